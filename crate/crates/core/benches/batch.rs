use std::hint::black_box;

use brainlang::dataset::{generate_world, Dataset, WorldConfig};
use brainlang::decoder::{
    assemble_prompt, backward, forward_cached, loss_and_grad, DecoderConfig, DecoderParams, GradNeeds, Gradients,
};
use brainlang::generate::{generate, GenerationConfig};
use brainlang::model::FusionModel;
use brainlang::par;
use brainlang::tokenizer::{fit_projection, init_tokenizers};
use brainlang::trainer::build_vocabulary;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

/// Untrained default-size model over a small world; cost per sample matches
/// the trained model.
fn setup() -> (Dataset, FusionModel) {
    let ds = generate_world(&WorldConfig {
        n_trials: 120,
        test_count: 4,
        ..WorldConfig::default()
    })
    .unwrap();
    let vocab = build_vocabulary(&ds);
    let cfg = DecoderConfig {
        vocab_size: vocab.len(),
        ..DecoderConfig::default()
    };
    let decoder = DecoderParams::init(&cfg, 1).unwrap();
    let rows: Vec<Vec<f64>> = (0..vocab.len()).map(|i| decoder.tok_emb.row(i).to_vec()).collect();
    let projection = fit_projection(&rows, 0.95).unwrap();
    let tokenizers = init_tokenizers(&ds.parcellation, 32, &projection, 2);
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

fn sample_grad(model: &FusionModel, ds: &Dataset, id: usize) -> f64 {
    let t = &ds.trials[id];
    let tokens = model.brain_tokens(&t.betas).unwrap();
    let q = model.vocab.tokenize(&t.qa_pairs[0].0);
    let a = model.vocab.tokenize(&t.captions[0]);
    let seq = assemble_prompt(tokens, &q, Some(&a), model.decoder.config.max_seq_len).unwrap();
    let (logits, cache) = forward_cached(&model.decoder, None, &seq, false, 0).unwrap();
    let (loss, dlogits) = loss_and_grad(&logits, &seq).unwrap();
    let mut g = Gradients::zeros(&model.decoder, None);
    backward(&model.decoder, None, &seq, &cache, &dlogits, GradNeeds::ALL, &mut g);
    loss
}

fn batch_gradients(c: &mut Criterion) {
    let (ds, model) = setup();
    let mut g = c.benchmark_group("batch_gradients");
    g.sample_size(10);
    for batch in [5usize, 20] {
        let ids: Vec<usize> = (0..batch).collect();
        g.bench_with_input(BenchmarkId::new("sequential", batch), &ids, |b, ids| {
            b.iter(|| par::map_sequential(black_box(ids), |&i| sample_grad(&model, &ds, i)))
        });
        #[cfg(feature = "parallel")]
        g.bench_with_input(BenchmarkId::new("parallel", batch), &ids, |b, ids| {
            b.iter(|| par::map_parallel(black_box(ids), |&i| sample_grad(&model, &ds, i)))
        });
    }
    g.finish();
}

fn caption_sweep(c: &mut Criterion) {
    let (ds, model) = setup();
    let cfg = GenerationConfig {
        max_new_tokens: 12,
        ..GenerationConfig::default()
    };
    let caption = |i: &usize| generate(&model, &ds.trials[*i].betas, "Describe this image.", &cfg).unwrap().text;
    let mut g = c.benchmark_group("caption_sweep");
    g.sample_size(10);
    let ids: Vec<usize> = (0..8).collect();
    g.bench_function("sequential", |b| b.iter(|| par::map_sequential(black_box(&ids), caption)));
    #[cfg(feature = "parallel")]
    g.bench_function("parallel", |b| b.iter(|| par::map_parallel(black_box(&ids), caption)));
    g.finish();
}

criterion_group!(benches, batch_gradients, caption_sweep);
criterion_main!(benches);
