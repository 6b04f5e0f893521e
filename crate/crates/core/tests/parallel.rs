//! The parallel map and the sequential fallback must agree bit for bit, and
//! training must replay exactly under a fixed seed.

use brainlang::dataset::{generate_world, split_dataset, Dataset, WorldConfig};
use brainlang::decoder::{
    assemble_prompt, backward, forward_cached, loss_and_grad, DecoderConfig, DecoderParams, GradNeeds, Gradients,
};
use brainlang::model::FusionModel;
use brainlang::par;
use brainlang::tokenizer::{fit_projection, init_tokenizers};
use brainlang::trainer::{build_vocabulary, train_phase1, PhaseConfig};

fn small_world() -> (Dataset, FusionModel) {
    let ds = generate_world(&WorldConfig {
        n_vertices: 128,
        n_regions: 4,
        n_trials: 60,
        shared_fraction: 0.25,
        test_count: 6,
        ..WorldConfig::default()
    })
    .unwrap();
    let vocab = build_vocabulary(&ds);
    let cfg = DecoderConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: vocab.len(),
        max_seq_len: 64,
    };
    let decoder = DecoderParams::init(&cfg, 3).unwrap();
    let rows: Vec<Vec<f64>> = (0..vocab.len()).map(|i| decoder.tok_emb.row(i).to_vec()).collect();
    let projection = fit_projection(&rows, 0.95).unwrap();
    let tokenizers = init_tokenizers(&ds.parcellation, 8, &projection, 4);
    let model = FusionModel {
        vocab,
        decoder,
        projection,
        parcellation: ds.parcellation.clone(),
        tokenizers,
        lora: None,
        banned: vec![],
    };
    (ds, model)
}

/// Loss and flattened decoder gradient for one trial's first caption.
fn sample(model: &FusionModel, ds: &Dataset, id: usize) -> (f64, Vec<f64>) {
    let t = &ds.trials[id];
    let tokens = model.brain_tokens(&t.betas).unwrap();
    let q = model.vocab.tokenize(&t.qa_pairs[0].0);
    let a = model.vocab.tokenize(&t.captions[0]);
    let seq = assemble_prompt(tokens, &q, Some(&a), model.decoder.config.max_seq_len).unwrap();
    let (logits, cache) = forward_cached(&model.decoder, None, &seq, false, 0).unwrap();
    let (loss, dlogits) = loss_and_grad(&logits, &seq).unwrap();
    let mut g = Gradients::zeros(&model.decoder, None);
    backward(&model.decoder, None, &seq, &cache, &dlogits, GradNeeds::ALL, &mut g);
    let flat = g.decoder.tensors().iter().flat_map(|t| t.data.iter().copied()).collect();
    (loss, flat)
}

fn ordered_sum(parts: &[(f64, Vec<f64>)]) -> Vec<f64> {
    let mut acc = vec![0.0; parts[0].1.len()];
    for (_, g) in parts {
        acc.iter_mut().zip(g).for_each(|(a, x)| *a += x);
    }
    acc
}

#[test]
fn map_keeps_input_order() {
    let items: Vec<u64> = (0..257).collect();
    assert_eq!(par::map(&items, |x| x * 3), par::map_sequential(&items, |x| x * 3));
}

#[cfg(feature = "parallel")]
#[test]
fn parallel_batch_gradients_match_sequential_bitwise() {
    let (ds, model) = small_world();
    let ids: Vec<usize> = (0..12).collect();
    let seq = par::map_sequential(&ids, |&i| sample(&model, &ds, i));
    let par = par::map_parallel(&ids, |&i| sample(&model, &ds, i));
    for (s, p) in seq.iter().zip(&par) {
        assert_eq!(s.0.to_bits(), p.0.to_bits());
    }
    let (a, b) = (ordered_sum(&seq), ordered_sum(&par));
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(par::is_parallel());
}

#[test]
fn phase_one_training_replays_exactly() {
    let (ds, model) = small_world();
    let split = split_dataset(&ds.trials, 6, 0).unwrap();
    let cfg = PhaseConfig {
        epochs: 1,
        ..PhaseConfig::phase1()
    };
    let run = || {
        let mut m = model.clone();
        let report = train_phase1(&mut m, &ds, &split.train_ids, &split.val_ids, &cfg).unwrap();
        (m, report.final_val_loss())
    };
    let (m1, l1) = run();
    let (m2, l2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert!(m1 == m2);
    assert!(m1 != model, "one epoch should move the trainable parameters");
}
