//! Optimisation: base-decoder LM pretraining, the two fusion phases, the
//! shuffled-data control and a finite-difference gradient check.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{parcellate, Dataset, Trial, CAPTION_PROMPTS, COUNT_WORDS};
use crate::decoder::{
    assemble_prompt, assemble_with_prefix, backward, forward_cached, loss_and_grad, DecoderConfig, DecoderParams,
    GradNeeds, Gradients, LoraAdapters, LoraConfig, MultimodalSequence, ParamGroup, Slot, Tensor, Vocabulary,
};
use crate::error::{Error, Result};
use crate::model::{tokenizer_tensors, FusionModel};
use crate::tokenizer::{self, encode_trial_cached, LowRankProjection, RegionTokenizer};
use crate::{par, rng};

// ---------------------------------------------------------------------------
// Optimiser

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(hyper: AdamHyper, sizes: &[usize]) -> Self {
        Self {
            hyper,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected AdamW update of a single tensor at (1-based) step `t`:
/// `θ ← θ − lr·λ·θ − lr·m̂/(√v̂+ε)`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    weight_decay: f64,
    h: AdamHyper,
) {
    let c1 = 1.0 - h.beta1.powi(t as i32);
    let c2 = 1.0 - h.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        theta[i] -= lr * weight_decay * theta[i] + lr * mhat / (vhat.sqrt() + h.eps);
    }
}

/// Applies one AdamW step to every tensor in `params`. `decay` gives the
/// decoupled weight decay of each parameter group.
pub fn adamw_step<F>(params: &mut [crate::decoder::TensorMut<'_>], grads: &[Tensor<'_>], state: &mut OptimizerState, lr: f64, decay: F) -> Result<()>
where
    F: Fn(ParamGroup) -> f64,
{
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "optimizer: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.data.len() != g.data.len() || p.data.len() != state.m[i].len() {
            return Err(Error::Shape(format!("optimizer: tensor {} size mismatch", p.name)));
        }
        adamw_update(
            p.data,
            g.data,
            &mut state.m[i],
            &mut state.v[i],
            state.step,
            lr,
            decay(p.group),
            state.hyper,
        );
    }
    Ok(())
}

/// Cosine decay from `base_lr` at step 0 to 0 at `total_steps`, no warmup.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * s).cos())
}

// ---------------------------------------------------------------------------
// Configuration and reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub trainable: Vec<ParamGroup>,
    pub epochs: usize,
    pub base_lr: f64,
    /// Decoupled weight decay on tokenizer weight matrices only.
    pub l2_on_tokenizer: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamHyper,
    pub seed: u64,
}

impl PhaseConfig {
    pub fn phase1() -> Self {
        Self {
            trainable: vec![ParamGroup::TokenizerWeight, ParamGroup::TokenizerBias, ParamGroup::LayerNorm],
            epochs: 20,
            base_lr: 1e-3,
            l2_on_tokenizer: 0.2,
            batch_size: 5,
            adam: AdamHyper::default(),
            seed: 0,
        }
    }

    pub fn phase2() -> Self {
        Self {
            trainable: vec![
                ParamGroup::LoraA,
                ParamGroup::LoraB,
                ParamGroup::TokenizerWeight,
                ParamGroup::TokenizerBias,
                ParamGroup::LayerNorm,
            ],
            epochs: 2,
            base_lr: 2e-5,
            l2_on_tokenizer: 5e-4,
            batch_size: 5,
            adam: AdamHyper::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) || !(self.l2_on_tokenizer >= 0.0) {
            return Err(Error::Config("learning rate and L2 must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn is_trainable(&self, g: ParamGroup) -> bool {
        self.trainable.contains(&g)
    }

    fn needs(&self) -> GradNeeds {
        use ParamGroup::*;
        GradNeeds {
            embeddings: self.is_trainable(TokenEmbedding) || self.is_trainable(PositionEmbedding),
            weights: self.is_trainable(Attention) || self.is_trainable(Mlp),
            layer_norms: self.is_trainable(LayerNorm),
            lora: self.is_trainable(LoraA) || self.is_trainable(LoraB),
        }
    }

    fn needs_tokenizers(&self) -> bool {
        self.is_trainable(ParamGroup::TokenizerWeight) || self.is_trainable(ParamGroup::TokenizerBias)
    }

    fn decay(&self, g: ParamGroup) -> f64 {
        if g == ParamGroup::TokenizerWeight {
            self.l2_on_tokenizer
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Probability that a sample's keyword context is left empty.
    pub empty_context_rate: f64,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            base_lr: 3e-3,
            batch_size: 5,
            weight_decay: 0.0,
            empty_context_rate: 0.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: String,
    /// Validation loss before the first update.
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochMetrics>,
    /// sha256 over the final learnable tensors.
    pub param_hash: String,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn final_val_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_val_loss, |e| e.val_loss)
    }

    /// Plain-text metrics log, one line per epoch.
    pub fn log_lines(&self) -> Vec<String> {
        self.epochs
            .iter()
            .map(|e| {
                format!(
                    "epoch={} phase={} train_loss={:.6} val_loss={:.6} lr={:.3e}",
                    e.epoch, e.phase, e.train_loss, e.val_loss, e.lr
                )
            })
            .collect()
    }
}

fn hash_tensors(tensors: &[Tensor<'_>]) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        h.update(t.name.as_bytes());
        for x in t.data {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

// ---------------------------------------------------------------------------
// Samples

/// Pre-tokenized prompt/answer options of one trial.
#[derive(Debug, Clone)]
struct TrialText {
    captions: Vec<Vec<u32>>,
    qa: Vec<(Vec<u32>, Vec<u32>)>,
}

struct Corpus {
    prompts: Vec<Vec<u32>>,
    trials: Vec<TrialText>,
}

impl Corpus {
    fn new(vocab: &Vocabulary, trials: &[&Trial]) -> Self {
        Self {
            prompts: CAPTION_PROMPTS.iter().map(|p| vocab.tokenize(p)).collect(),
            trials: trials
                .iter()
                .map(|t| TrialText {
                    captions: t.captions.iter().map(|c| vocab.tokenize(c)).collect(),
                    qa: t.qa_pairs.iter().map(|(q, a)| (vocab.tokenize(q), vocab.tokenize(a))).collect(),
                })
                .collect(),
        }
    }

    /// Uniform over the caption prompts and the trial's QA pairs.
    fn draw(&self, i: usize, r: &mut rng::Rng) -> (Vec<u32>, Vec<u32>) {
        let t = &self.trials[i];
        let k = r.random_range(0..self.prompts.len() + t.qa.len());
        if k < self.prompts.len() {
            let c = r.random_range(0..t.captions.len());
            (self.prompts[k].clone(), t.captions[c].clone())
        } else {
            t.qa[k - self.prompts.len()].clone()
        }
    }

    /// Deterministic validation samples: one caption plus every QA pair.
    fn validation(&self, i: usize) -> Vec<(Vec<u32>, Vec<u32>)> {
        let t = &self.trials[i];
        let mut out = vec![(self.prompts[i % self.prompts.len()].clone(), t.captions[i % t.captions.len()].clone())];
        out.extend(t.qa.iter().cloned());
        out
    }
}

/// Every text the vocabulary must cover: prompts, captions and QA.
pub fn corpus_texts(dataset: &Dataset) -> Vec<String> {
    let mut out: Vec<String> = CAPTION_PROMPTS.iter().map(|s| s.to_string()).collect();
    for t in &dataset.trials {
        out.extend(t.captions.iter().cloned());
        for (q, a) in &t.qa_pairs {
            out.push(q.clone());
            out.push(a.clone());
        }
    }
    out
}

pub fn build_vocabulary(dataset: &Dataset) -> Vocabulary {
    let texts = corpus_texts(dataset);
    Vocabulary::build(texts.iter().map(String::as_str))
}

/// Fits the low-rank projection on the embeddings of the distinct tokens
/// appearing in the given training captions.
pub fn fit_caption_projection(
    decoder: &DecoderParams,
    vocab: &Vocabulary,
    captions: &[&str],
    variance_target: f64,
) -> Result<LowRankProjection> {
    let ids: BTreeSet<u32> = captions.iter().flat_map(|c| vocab.tokenize(c)).collect();
    let embeddings: Vec<Vec<f64>> = ids.iter().map(|&id| decoder.tok_emb.row(id as usize).to_vec()).collect();
    tokenizer::fit_projection(&embeddings, variance_target)
}

// ---------------------------------------------------------------------------
// Gradient accumulation

/// Gradient buffers laid out like [`FusionModel::tensors`].
#[derive(Debug, Clone)]
struct ModelGrads {
    inner: Gradients,
    tokenizers: Vec<RegionTokenizer>,
}

impl ModelGrads {
    fn zeros(model: &FusionModel) -> Self {
        Self {
            inner: Gradients::zeros(&model.decoder, model.lora.as_ref()),
            tokenizers: model.tokenizers.iter().map(RegionTokenizer::zeros_like).collect(),
        }
    }

    fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = self.inner.decoder.tensors();
        if let Some(l) = &self.inner.lora {
            out.extend(l.tensors());
        }
        out.extend(tokenizer_tensors(&self.tokenizers));
        out
    }

    fn add_scaled(&mut self, other: &ModelGrads, s: f64) {
        let mut dst = self.tensors_mut();
        for (d, o) in dst.iter_mut().zip(other.tensors()) {
            for (a, b) in d.data.iter_mut().zip(o.data) {
                *a += s * b;
            }
        }
    }

    fn tensors_mut(&mut self) -> Vec<crate::decoder::TensorMut<'_>> {
        let mut out = self.inner.decoder.tensors_mut();
        if let Some(l) = &mut self.inner.lora {
            out.extend(l.tensors_mut());
        }
        out.extend(crate::model::tokenizer_tensors_mut(&mut self.tokenizers));
        out
    }
}

/// Loss and gradients of one fused sample.
fn fusion_sample_grad(
    model: &FusionModel,
    betas: &[f64],
    question: &[u32],
    answer: &[u32],
    needs: GradNeeds,
    with_tokenizers: bool,
    dropout_seed: Option<u64>,
) -> Result<(f64, ModelGrads)> {
    let regions = parcellate(betas, &model.parcellation)?;
    let (tokens, caches) = encode_trial_cached(&regions, &model.tokenizers, &model.projection)?;
    let seq = assemble_prompt(tokens, question, Some(answer), model.decoder.config.max_seq_len)?;
    let (logits, cache) = forward_cached(
        &model.decoder,
        model.lora.as_ref(),
        &seq,
        dropout_seed.is_some(),
        dropout_seed.unwrap_or(0),
    )?;
    let (loss, dlogits) = loss_and_grad(&logits, &seq)?;
    let mut g = ModelGrads::zeros(model);
    let token_grads = backward(&model.decoder, model.lora.as_ref(), &seq, &cache, &dlogits, needs, &mut g.inner);
    if with_tokenizers {
        tokenizer::backward(&token_grads, &caches, &model.tokenizers, &model.projection, &mut g.tokenizers);
    }
    Ok((loss, g))
}

fn fusion_sample_loss(model: &FusionModel, betas: &[f64], question: &[u32], answer: &[u32], dropout_seed: Option<u64>) -> Result<f64> {
    let tokens = model.brain_tokens(betas)?;
    let seq = assemble_prompt(tokens, question, Some(answer), model.decoder.config.max_seq_len)?;
    let logits = crate::decoder::forward(
        &model.decoder,
        model.lora.as_ref(),
        &seq,
        dropout_seed.is_some(),
        dropout_seed.unwrap_or(0),
    )?;
    crate::decoder::loss(&logits, &seq)
}

// ---------------------------------------------------------------------------
// Fusion phases

fn resolve<'a>(dataset: &'a Dataset, ids: &[u32]) -> Result<Vec<&'a Trial>> {
    ids.iter()
        .map(|&id| {
            dataset
                .trial(id)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown trial id {id}")))
        })
        .collect()
}

/// Mean validation loss over a fixed sample set (no dropout).
pub fn validation_loss(model: &FusionModel, dataset: &Dataset, val_ids: &[u32]) -> Result<f64> {
    let trials = resolve(dataset, val_ids)?;
    if trials.is_empty() {
        return Ok(f64::NAN);
    }
    let corpus = Corpus::new(&model.vocab, &trials);
    let jobs: Vec<(usize, Vec<u32>, Vec<u32>)> = (0..trials.len())
        .flat_map(|i| corpus.validation(i).into_iter().map(move |(q, a)| (i, q, a)))
        .collect();
    let losses = par::map(&jobs, |(i, q, a)| fusion_sample_loss(model, &trials[*i].betas, q, a, None));
    let mut sum = 0.0;
    for l in &losses {
        sum += *l.as_ref().map_err(|e| Error::Numerical(e.to_string()))?;
    }
    Ok(sum / jobs.len() as f64)
}

/// Runs one optimisation phase over the training trials. Parameters outside
/// `cfg.trainable` are never written.
pub fn train_phase(
    model: &mut FusionModel,
    dataset: &Dataset,
    train_ids: &[u32],
    val_ids: &[u32],
    cfg: &PhaseConfig,
    phase: &str,
) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let trials = resolve(dataset, train_ids)?;
    let steps_per_epoch = trials.len() / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "{} training trials cannot fill one batch of {}",
            trials.len(),
            cfg.batch_size
        )));
    }
    let corpus = Corpus::new(&model.vocab, &trials);
    let total = steps_per_epoch * cfg.epochs;
    let needs = cfg.needs();
    let with_tok = cfg.needs_tokenizers();
    let dropout_active = model.lora.as_ref().is_some_and(|l| l.config.dropout > 0.0) && needs.lora;
    let sizes: Vec<usize> = model
        .tensors()
        .iter()
        .filter(|t| cfg.is_trainable(t.group))
        .map(|t| t.data.len())
        .collect();
    let mut state = OptimizerState::new(cfg.adam, &sizes);
    let initial_val_loss = validation_loss(model, dataset, val_ids)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..trials.len()).collect();
        order.shuffle(&mut rng::substream(cfg.seed, "shuffle", &[phase_tag(phase), epoch as u64]));
        let mut pick = rng::substream(cfg.seed, "shuffle/prompt", &[phase_tag(phase), epoch as u64]);
        let samples: Vec<(usize, Vec<u32>, Vec<u32>)> = order
            .iter()
            .map(|&i| {
                let (q, a) = corpus.draw(i, &mut pick);
                (i, q, a)
            })
            .collect();
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for (b, batch) in samples.chunks_exact(cfg.batch_size).enumerate() {
            let model_ref: &FusionModel = model;
            let jobs: Vec<(usize, &(usize, Vec<u32>, Vec<u32>))> = batch.iter().enumerate().collect();
            let results = par::map(&jobs, |(j, (i, q, a))| {
                let seed = dropout_active
                    .then(|| rng::derive_seed(cfg.seed, "dropout", &[phase_tag(phase), step as u64, *j as u64]));
                fusion_sample_grad(model_ref, &trials[*i].betas, q, a, needs, with_tok, seed)
            });
            let mut acc = ModelGrads::zeros(model);
            let mut batch_loss = 0.0;
            let scale = 1.0 / batch.len() as f64;
            for (r, (i, _, _)) in results.into_iter().zip(batch) {
                let (l, g) = r?;
                if !l.is_finite() {
                    return Err(Error::Numerical(format!(
                        "{phase}: non-finite loss at epoch {epoch}, step {b}, trial {}",
                        trials[*i].trial_id
                    )));
                }
                batch_loss += l * scale;
                acc.add_scaled(&g, scale);
            }
            lr = cosine_lr(step, total, cfg.base_lr);
            let grads: Vec<Tensor<'_>> = acc.tensors().into_iter().filter(|t| cfg.is_trainable(t.group)).collect();
            let mut params: Vec<_> = model.tensors_mut().into_iter().filter(|t| cfg.is_trainable(t.group)).collect();
            adamw_step(&mut params, &grads, &mut state, lr, |g| cfg.decay(g))?;
            epoch_loss += batch_loss;
            step += 1;
        }
        if !model.is_finite() {
            return Err(Error::Numerical(format!("{phase}: parameters became non-finite in epoch {epoch}")));
        }
        let val_loss = validation_loss(model, dataset, val_ids)?;
        let m = EpochMetrics {
            phase: phase.to_string(),
            epoch: epoch + 1,
            train_loss: epoch_loss / steps_per_epoch as f64,
            val_loss,
            lr,
        };
        log::info!(
            "epoch={} phase={} train_loss={:.6} val_loss={:.6} lr={:.3e}",
            m.epoch,
            m.phase,
            m.train_loss,
            m.val_loss,
            m.lr
        );
        epochs.push(m);
    }
    Ok(TrainReport {
        phase: phase.to_string(),
        initial_val_loss,
        epochs,
        param_hash: hash_tensors(&model.tensors()),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

fn phase_tag(phase: &str) -> u64 {
    rng::derive_seed(0, phase, &[])
}

/// Phase 1: tokenizers and layer norms on top of the frozen base decoder.
pub fn train_phase1(
    model: &mut FusionModel,
    dataset: &Dataset,
    train_ids: &[u32],
    val_ids: &[u32],
    cfg: &PhaseConfig,
) -> Result<TrainReport> {
    train_phase(model, dataset, train_ids, val_ids, cfg, "phase1")
}

/// Phase 2: attaches fresh adapters when absent, then trains the configured set.
pub fn train_phase2(
    model: &mut FusionModel,
    dataset: &Dataset,
    train_ids: &[u32],
    val_ids: &[u32],
    cfg: &PhaseConfig,
    lora: LoraConfig,
) -> Result<TrainReport> {
    if model.lora.is_none() {
        model.lora = Some(LoraAdapters::init(
            &model.decoder.config,
            lora,
            rng::derive_seed(cfg.seed, "init/lora", &[]),
        )?);
    }
    let report = train_phase(model, dataset, train_ids, val_ids, cfg, "phase2")?;
    if report.final_val_loss() > report.initial_val_loss {
        log::warn!(
            "phase2 validation loss rose from {:.6} to {:.6}",
            report.initial_val_loss,
            report.final_val_loss()
        );
    }
    Ok(report)
}

/// Control data: every vertex's values are permuted across the given trials
/// independently, destroying the pairing of betas with text while keeping
/// each vertex's value multiset.
pub fn shuffle_betas(dataset: &Dataset, ids: &[u32], seed: u64) -> Result<Dataset> {
    let mut out = dataset.clone();
    let positions: Vec<usize> = ids
        .iter()
        .map(|&id| {
            out.trials
                .iter()
                .position(|t| t.trial_id == id)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown trial id {id}")))
        })
        .collect::<Result<_>>()?;
    let mut r = rng::stream(seed, "shuffle/control");
    let n_v = dataset.config.n_vertices;
    let mut perm: Vec<usize> = (0..positions.len()).collect();
    for v in 0..n_v {
        perm.shuffle(&mut r);
        let column: Vec<f64> = positions.iter().map(|&p| dataset.trials[p].betas[v]).collect();
        for (k, &p) in positions.iter().enumerate() {
            out.trials[p].betas[v] = column[perm[k]];
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Base decoder pretraining

/// Scene keywords a context prefix may carry.
fn scene_keywords(dataset: &Dataset, vocab: &Vocabulary, t: &Trial) -> Vec<u32> {
    let mut words = vec![
        dataset.category_name(&t.scene).to_string(),
        COUNT_WORDS[t.scene.count as usize - 1].to_string(),
        dataset.setting_name(&t.scene).to_string(),
    ];
    if t.scene.has_person {
        words.push("person".into());
    }
    words.iter().filter_map(|w| vocab.id(w)).collect()
}

/// Keyword context occupying the brain-token slots: each keyword at a random
/// slot, the rest empty.
fn keyword_prefix(n_slots: usize, keywords: &[u32], r: &mut rng::Rng, empty_rate: f64) -> Vec<Slot> {
    let mut slots = vec![Slot::Empty; n_slots];
    if r.random::<f64>() < empty_rate || n_slots < keywords.len() {
        return slots;
    }
    let mut idx: Vec<usize> = (0..n_slots).collect();
    idx.shuffle(r);
    for (k, &id) in keywords.iter().enumerate() {
        slots[idx[k]] = Slot::Text(id);
    }
    slots
}

fn lm_sample_grad(params: &DecoderParams, seq: &MultimodalSequence) -> Result<(f64, DecoderParams)> {
    let (logits, cache) = forward_cached(params, None, seq, false, 0)?;
    let (loss, dlogits) = loss_and_grad(&logits, seq)?;
    let mut g = Gradients::zeros(params, None);
    let needs = GradNeeds {
        lora: false,
        ..GradNeeds::ALL
    };
    backward(params, None, seq, &cache, &dlogits, needs, &mut g);
    Ok((loss, g.decoder))
}

/// Next-token pretraining of the base decoder on captions and QA text. The
/// prefix slots later used by brain tokens carry scene keywords, so the
/// decoder learns to read context placed there.
pub fn pretrain_decoder_lm(
    dataset: &Dataset,
    train_ids: &[u32],
    val_ids: &[u32],
    vocab: &Vocabulary,
    decoder: &DecoderConfig,
    cfg: &LmConfig,
) -> Result<(DecoderParams, TrainReport)> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be >= 1".into()));
    }
    let start = Instant::now();
    let decoder = DecoderConfig {
        vocab_size: vocab.len(),
        ..decoder.clone()
    };
    let mut params = DecoderParams::init(&decoder, rng::derive_seed(cfg.seed, "init", &[]))?;
    let n_slots = dataset.parcellation.n_regions();
    let trials = resolve(dataset, train_ids)?;
    let val_trials = resolve(dataset, val_ids)?;
    let corpus = Corpus::new(vocab, &trials);
    let val_corpus = Corpus::new(vocab, &val_trials);
    let keywords: Vec<Vec<u32>> = trials.iter().map(|t| scene_keywords(dataset, vocab, t)).collect();
    let max = decoder.max_seq_len;

    let val_seqs: Vec<MultimodalSequence> = {
        let mut r = rng::stream(cfg.seed, "shuffle/lm-val");
        let mut out = Vec::new();
        for (i, t) in val_trials.iter().enumerate() {
            let kw = scene_keywords(dataset, vocab, t);
            for (q, a) in val_corpus.validation(i) {
                let prefix = keyword_prefix(n_slots, &kw, &mut r, cfg.empty_context_rate);
                out.push(assemble_with_prefix(prefix, vec![], &q, Some(&a), max)?);
            }
        }
        out
    };
    let val_loss = |p: &DecoderParams| -> Result<f64> {
        if val_seqs.is_empty() {
            return Ok(f64::NAN);
        }
        let losses = par::map(&val_seqs, |s| {
            crate::decoder::forward(p, None, s, false, 0).and_then(|l| crate::decoder::loss(&l, s))
        });
        let mut sum = 0.0;
        for l in losses {
            sum += l?;
        }
        Ok(sum / val_seqs.len() as f64)
    };

    let steps_per_epoch = trials.len() / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::Config("not enough training trials for one batch".into()));
    }
    let total = steps_per_epoch * cfg.epochs;
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
    let mut state = OptimizerState::new(AdamHyper::default(), &sizes);
    let initial_val_loss = val_loss(&params)?;
    let mut epochs = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..trials.len()).collect();
        order.shuffle(&mut rng::substream(cfg.seed, "shuffle", &[phase_tag("lm"), epoch as u64]));
        let mut pick = rng::substream(cfg.seed, "shuffle/prompt", &[phase_tag("lm"), epoch as u64]);
        let mut seqs = Vec::with_capacity(order.len());
        for &i in &order {
            let (q, a) = corpus.draw(i, &mut pick);
            let prefix = keyword_prefix(n_slots, &keywords[i], &mut pick, cfg.empty_context_rate);
            seqs.push(assemble_with_prefix(prefix, vec![], &q, Some(&a), max)?);
        }
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for batch in seqs.chunks_exact(cfg.batch_size) {
            let results = par::map(batch, |s| lm_sample_grad(&params, s));
            let mut acc = params.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for r in results {
                let (l, g) = r?;
                if !l.is_finite() {
                    return Err(Error::Numerical(format!("lm: non-finite loss in epoch {epoch}")));
                }
                batch_loss += l * scale;
                for (d, o) in acc.tensors_mut().iter_mut().zip(g.tensors()) {
                    for (a, b) in d.data.iter_mut().zip(o.data) {
                        *a += scale * b;
                    }
                }
            }
            lr = cosine_lr(step, total, cfg.base_lr);
            let grads = acc.tensors();
            let mut ps = params.tensors_mut();
            adamw_step(&mut ps, &grads, &mut state, lr, |_| cfg.weight_decay)?;
            epoch_loss += batch_loss;
            step += 1;
        }
        if !params.is_finite() {
            return Err(Error::Numerical(format!("lm: parameters became non-finite in epoch {epoch}")));
        }
        let m = EpochMetrics {
            phase: "lm".into(),
            epoch: epoch + 1,
            train_loss: epoch_loss / steps_per_epoch as f64,
            val_loss: val_loss(&params)?,
            lr,
        };
        log::info!(
            "epoch={} phase=lm train_loss={:.6} val_loss={:.6} lr={:.3e}",
            m.epoch,
            m.train_loss,
            m.val_loss,
            m.lr
        );
        epochs.push(m);
    }
    let report = TrainReport {
        phase: "lm".into(),
        initial_val_loss,
        epochs,
        param_hash: hash_tensors(&params.tensors()),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}

// ---------------------------------------------------------------------------
// Gradient check

pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], i: usize, eps: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += eps;
    let up = f(&xp);
    xp[i] = x[i] - eps;
    let down = f(&xp);
    (up - down) / (2.0 * eps)
}

/// `|a−n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: ParamGroup,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        !self.groups.is_empty() && self.groups.iter().all(|g| g.max_rel_error < tol)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<18} {:>8} {:>14}\n", "group", "checked", "max_rel_error");
        for g in &self.groups {
            s.push_str(&format!("{:<18} {:>8} {:>14.3e}\n", g.group.label(), g.checked, g.max_rel_error));
        }
        s
    }
}

/// One fused training example used by [`grad_check`].
#[derive(Debug, Clone)]
pub struct CheckSample {
    pub betas: Vec<f64>,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
}

fn micro_batch_loss(model: &FusionModel, batch: &[CheckSample], dropout_seed: Option<u64>) -> Result<f64> {
    let mut s = 0.0;
    for (j, b) in batch.iter().enumerate() {
        let seed = dropout_seed.map(|d| rng::derive_seed(d, "dropout", &[j as u64]));
        s += fusion_sample_loss(model, &b.betas, &b.question, &b.answer, seed)?;
    }
    Ok(s / batch.len() as f64)
}

/// Compares analytic gradients of the mean micro-batch loss with central
/// differences for every parameter group. `corrupt` scales the analytic
/// gradient (1.0 for a real check) to test the harness itself.
pub fn grad_check(
    model: &FusionModel,
    batch: &[CheckSample],
    eps: f64,
    per_tensor: usize,
    dropout_seed: Option<u64>,
    corrupt: f64,
) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("grad_check needs at least one sample".into()));
    }
    let mut acc = ModelGrads::zeros(model);
    for (j, b) in batch.iter().enumerate() {
        let seed = dropout_seed.map(|d| rng::derive_seed(d, "dropout", &[j as u64]));
        let (_, g) = fusion_sample_grad(model, &b.betas, &b.question, &b.answer, GradNeeds::ALL, true, seed)?;
        acc.add_scaled(&g, 1.0 / batch.len() as f64);
    }
    let analytic: Vec<Vec<f64>> = acc.tensors().iter().map(|t| t.data.to_vec()).collect();
    let meta: Vec<(ParamGroup, usize)> = model.tensors().iter().map(|t| (t.group, t.data.len())).collect();
    let mut worst: Vec<(ParamGroup, f64, usize)> = Vec::new();
    let mut probe = model.clone();
    for (ti, (group, len)) in meta.iter().enumerate() {
        // largest analytic entries plus an even spread
        let mut idx: Vec<usize> = (0..*len).collect();
        idx.sort_by(|&a, &b| analytic[ti][b].abs().total_cmp(&analytic[ti][a].abs()).then(a.cmp(&b)));
        let mut picks: Vec<usize> = idx.into_iter().take(per_tensor.div_ceil(2)).collect();
        let spread = per_tensor / 2;
        for s in 0..spread {
            picks.push(s * len / spread.max(1));
        }
        picks.sort_unstable();
        picks.dedup();
        for &i in &picks {
            let orig = probe.tensors()[ti].data[i];
            probe.tensors_mut()[ti].data[i] = orig + eps;
            let up = micro_batch_loss(&probe, batch, dropout_seed)?;
            probe.tensors_mut()[ti].data[i] = orig - eps;
            let down = micro_batch_loss(&probe, batch, dropout_seed)?;
            probe.tensors_mut()[ti].data[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(analytic[ti][i] * corrupt, numeric, 1e-8);
            match worst.iter_mut().find(|w| w.0 == *group) {
                Some(w) => {
                    w.1 = w.1.max(err);
                    w.2 += 1;
                }
                None => worst.push((*group, err, 1)),
            }
        }
    }
    let groups = ParamGroup::ALL
        .iter()
        .filter_map(|g| {
            worst.iter().find(|w| w.0 == *g).map(|w| GroupError {
                group: w.0,
                max_rel_error: w.1,
                checked: w.2,
            })
        })
        .collect();
    Ok(GradCheckReport { eps, groups })
}

/// A small fused model with every parameter group active, for gradient checks.
pub fn micro_model(seed: u64) -> Result<(FusionModel, Vec<CheckSample>)> {
    use crate::dataset::Parcellation;
    let texts = ["a zebra in a field .", "two birds near a lake", "how many zebras ?"];
    let vocab = Vocabulary::build(texts.iter().copied());
    let cfg = DecoderConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: vocab.len(),
        max_seq_len: 24,
    };
    let decoder = DecoderParams::init(&cfg, seed)?;
    let ids: Vec<u32> = (6..vocab.len() as u32).collect();
    let emb: Vec<Vec<f64>> = ids.iter().map(|&i| decoder.tok_emb.row(i as usize).to_vec()).collect();
    let projection = tokenizer::fit_projection(&emb, 0.95)?;
    let parcellation = Parcellation::contiguous(12, 3)?;
    let tokenizers = tokenizer::init_tokenizers(&parcellation, 4, &projection, seed);
    let mut lora = LoraAdapters::init(
        &cfg,
        LoraConfig {
            rank: 2,
            alpha: 4.0,
            dropout: 0.2,
        },
        seed,
    )?;
    let mut r = rng::stream(seed, "init/micro");
    for t in lora.tensors_mut() {
        for x in t.data.iter_mut() {
            *x = r.random_range(-0.5..0.5);
        }
    }
    let model = FusionModel {
        vocab,
        decoder,
        projection,
        parcellation,
        tokenizers,
        lora: Some(lora),
        banned: vec![],
    };
    let batch = (0..2)
        .map(|k| CheckSample {
            betas: (0..12).map(|_| r.random_range(-1.5..1.5)).collect(),
            question: model.vocab.tokenize(texts[2]),
            answer: model.vocab.tokenize(texts[k]),
        })
        .collect();
    Ok((model, batch))
}

#[cfg(test)]
mod tests;
