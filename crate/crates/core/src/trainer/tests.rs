use super::*;
use crate::dataset::{generate_world, split_dataset, WorldConfig};

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(0, 100, 1e-3), 1e-3);
    assert!(cosine_lr(100, 100, 1e-3).abs() < 1e-18);
    assert!((cosine_lr(50, 100, 1e-3) - 5e-4).abs() < 1e-15);
}

#[test]
fn adamw_scalar_matches_textbook_step() {
    let h = AdamHyper::default();
    let (theta0, g, lr, wd) = (0.5, 0.2, 0.1, 0.01);
    let mut theta = [theta0];
    let (mut m, mut v) = ([0.0], [0.0]);
    adamw_update(&mut theta, &[g], &mut m, &mut v, 1, lr, wd, h);
    // first step: m̂ = g, v̂ = g²
    let m1 = (1.0 - 0.9) * g;
    let v1 = (1.0 - 0.999) * g * g;
    let mhat = m1 / (1.0 - 0.9);
    let vhat = v1 / (1.0 - 0.999);
    let want = theta0 - lr * wd * theta0 - lr * mhat / (vhat.sqrt() + 1e-8);
    assert!((theta[0] - want).abs() < 1e-12);

    // second step with a different gradient
    let g2 = -0.05;
    adamw_update(&mut theta, &[g2], &mut m, &mut v, 2, lr, wd, h);
    let m2 = 0.9 * m1 + 0.1 * g2;
    let v2 = 0.999 * v1 + 0.001 * g2 * g2;
    let want2 = want - lr * wd * want - lr * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
    assert!((theta[0] - want2).abs() < 1e-12);
}

#[test]
fn adamw_zero_gradient_cases() {
    let h = AdamHyper::default();
    let mut theta = [0.7, -1.3];
    let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
    adamw_update(&mut theta, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, 0.0, h);
    assert_eq!(theta, [0.7, -1.3]);
    adamw_update(&mut theta, &[0.0, 0.0], &mut m, &mut v, 2, 0.1, 0.5, h);
    for (t, t0) in theta.iter().zip([0.7, -1.3]) {
        assert!((t - t0 * (1.0 - 0.05)).abs() < 1e-15);
    }
}

#[test]
fn decay_targets_tokenizer_weights_only() {
    let cfg = PhaseConfig::phase1();
    for g in ParamGroup::ALL {
        let d = cfg.decay(g);
        assert_eq!(d != 0.0, g == ParamGroup::TokenizerWeight, "{g:?}");
    }
}

#[test]
fn default_hyperparameters() {
    let p1 = PhaseConfig::phase1();
    assert_eq!((p1.epochs, p1.base_lr, p1.batch_size, p1.l2_on_tokenizer), (20, 1e-3, 5, 0.2));
    let p2 = PhaseConfig::phase2();
    assert_eq!((p2.epochs, p2.base_lr, p2.batch_size, p2.l2_on_tokenizer), (2, 2e-5, 5, 5e-4));
    let l = LoraConfig::default();
    assert_eq!((l.rank, l.alpha, l.dropout), (16, 16.0, 0.05));
}

#[test]
fn central_difference_exact_on_linear_model() {
    // f(w) = ½‖Xw − y‖², ∇f = Xᵀ(Xw − y)
    let x = [[1.0, 2.0, -1.0], [0.5, -0.3, 2.0], [3.0, 0.1, 0.2], [-1.0, 1.0, 1.0]];
    let y = [1.0, -2.0, 0.5, 0.3];
    let w = [0.3, -0.7, 1.1];
    let f = |w: &[f64]| -> f64 {
        x.iter()
            .zip(&y)
            .map(|(row, yi)| {
                let r: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - yi;
                0.5 * r * r
            })
            .sum()
    };
    for i in 0..3 {
        let analytic: f64 = x
            .iter()
            .zip(&y)
            .map(|(row, yi)| (row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - yi) * row[i])
            .sum();
        let numeric = central_difference(f, &w, i, 1e-5);
        assert!(relative_error(analytic, numeric, 1e-12) < 1e-8);
    }
}

#[test]
fn grad_check_micro_model_all_groups() {
    let (model, batch) = micro_model(3).unwrap();
    let report = grad_check(&model, &batch, 1e-5, 6, Some(17), 1.0).unwrap();
    assert_eq!(report.groups.len(), ParamGroup::ALL.len(), "{}", report.table());
    assert!(report.passed(1e-4), "{}", report.table());

    let corrupted = grad_check(&model, &batch, 1e-5, 6, Some(17), 1.01).unwrap();
    assert!(corrupted.groups.iter().all(|g| g.max_rel_error > 1e-3), "{}", corrupted.table());
}

fn small_world() -> (Dataset, crate::dataset::Split) {
    let cfg = WorldConfig {
        n_vertices: 64,
        n_regions: 4,
        n_trials: 60,
        shared_fraction: 0.2,
        test_count: 4,
        ..WorldConfig::default()
    };
    let ds = generate_world(&cfg).unwrap();
    let split = split_dataset(&ds.trials, cfg.test_count, 0).unwrap();
    (ds, split)
}

fn small_model(ds: &Dataset, split: &crate::dataset::Split) -> FusionModel {
    let vocab = build_vocabulary(ds);
    let dcfg = DecoderConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: 0,
        max_seq_len: 64,
    };
    let lm = LmConfig {
        epochs: 1,
        ..LmConfig::default()
    };
    let (decoder, _) = pretrain_decoder_lm(ds, &split.train_ids, &split.val_ids, &vocab, &dcfg, &lm).unwrap();
    let caps: Vec<&str> = split
        .train_ids
        .iter()
        .flat_map(|&id| ds.trial(id).unwrap().captions.iter().map(String::as_str))
        .collect();
    let projection = fit_caption_projection(&decoder, &vocab, &caps, 0.95).unwrap();
    let tokenizers = tokenizer::init_tokenizers(&ds.parcellation, 8, &projection, 0);
    FusionModel {
        vocab,
        decoder,
        projection,
        parcellation: ds.parcellation.clone(),
        tokenizers,
        lora: None,
        banned: vec![],
    }
}

#[test]
fn phases_respect_freeze_contracts_and_replay() {
    let (ds, split) = small_world();
    let base = small_model(&ds, &split);
    let p1 = PhaseConfig {
        epochs: 2,
        ..PhaseConfig::phase1()
    };
    let mut m1 = base.clone();
    let r1 = train_phase1(&mut m1, &ds, &split.train_ids, &split.val_ids, &p1).unwrap();
    for (a, b) in base.tensors().iter().zip(m1.tensors()) {
        let frozen = !p1.trainable.contains(&a.group);
        assert_eq!(frozen, a.data == b.data, "{}", a.name);
    }
    assert!(r1.final_val_loss() < r1.initial_val_loss, "{r1:?}");
    assert_eq!(r1.log_lines().len(), 2);

    let mut again = base.clone();
    let r1b = train_phase1(&mut again, &ds, &split.train_ids, &split.val_ids, &p1).unwrap();
    assert_eq!(again, m1);
    assert_eq!(r1.epochs, r1b.epochs);

    let mut m2 = m1.clone();
    let p2 = PhaseConfig {
        epochs: 1,
        base_lr: 1e-3,
        ..PhaseConfig::phase2()
    };
    train_phase2(&mut m2, &ds, &split.train_ids, &split.val_ids, &p2, LoraConfig::default()).unwrap();
    assert_eq!(m1.decoder.blocks[0].wq, m2.decoder.blocks[0].wq);
    assert_eq!(m1.decoder.blocks[0].wv, m2.decoder.blocks[0].wv);
    assert_eq!(m1.decoder.tok_emb, m2.decoder.tok_emb);
    assert_ne!(m1.tokenizers, m2.tokenizers);
    let lora = m2.lora.as_ref().unwrap();
    assert!(lora.layers[0].q.b.data.iter().any(|&x| x != 0.0));
}

#[test]
fn gradient_reaches_every_tokenizer() {
    let (ds, split) = small_world();
    let model = small_model(&ds, &split);
    let t = ds.trial(split.train_ids[0]).unwrap();
    let q = model.vocab.tokenize(&t.qa_pairs[0].0);
    let a = model.vocab.tokenize(&t.qa_pairs[0].1);
    let (_, g) = fusion_sample_grad(&model, &t.betas, &q, &a, PhaseConfig::phase1().needs(), true, None).unwrap();
    for tok in &g.tokenizers {
        assert!(tok.w1.data.iter().any(|&x| x != 0.0));
    }
}

#[test]
fn control_shuffle_keeps_vertex_multisets() {
    let (ds, split) = small_world();
    let shuffled = shuffle_betas(&ds, &split.train_ids, 5).unwrap();
    let mut moved = 0;
    for v in 0..ds.config.n_vertices {
        let mut a: Vec<f64> = split.train_ids.iter().map(|&id| ds.trial(id).unwrap().betas[v]).collect();
        let mut b: Vec<f64> = split.train_ids.iter().map(|&id| shuffled.trial(id).unwrap().betas[v]).collect();
        if a != b {
            moved += 1;
        }
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }
    assert!(moved > ds.config.n_vertices / 2);
    for &id in &split.test_ids {
        assert_eq!(ds.trial(id), shuffled.trial(id));
    }
}

#[test]
fn lm_pretraining_learns_and_replays() {
    let (ds, split) = small_world();
    let vocab = build_vocabulary(&ds);
    let dcfg = DecoderConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: 0,
        max_seq_len: 64,
    };
    let lm = LmConfig {
        epochs: 3,
        ..LmConfig::default()
    };
    let (p, r) = pretrain_decoder_lm(&ds, &split.train_ids, &split.val_ids, &vocab, &dcfg, &lm).unwrap();
    assert!(r.final_val_loss() < (vocab.len() as f64).ln());
    let (p2, r2) = pretrain_decoder_lm(&ds, &split.train_ids, &split.val_ids, &vocab, &dcfg, &lm).unwrap();
    assert_eq!(p, p2);
    assert_eq!(r.param_hash, r2.param_hash);
}
