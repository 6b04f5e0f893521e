//! Deterministic beam search with relative min-p filtering, greedy decoding
//! and token-evidence traces.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::decoder::{MultimodalSequence, Slot, BOS_ID, EOS_ID, INST_CLOSE_ID, INST_OPEN_ID, PAD_ID, UNK_ID};
use crate::error::{Error, Result};
use crate::linalg::{log_softmax, softmax_in_place};
use crate::model::FusionModel;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub beams: usize,
    pub min_p: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Treat `min_p` as an absolute probability floor instead of `min_p·p_max`.
    pub absolute_min_p: bool,
    /// Single-beam ancestral sampling over the filtered distribution.
    pub stochastic: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            beams: 2,
            min_p: 0.2,
            temperature: 1.0,
            max_new_tokens: 24,
            seed: 0,
            absolute_min_p: false,
            stochastic: false,
        }
    }
}

impl GenerationConfig {
    pub fn greedy() -> Self {
        Self {
            beams: 1,
            min_p: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beams == 0 {
            return Err(Error::Config("beams must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_p) {
            return Err(Error::Config(format!("min_p {} outside [0, 1]", self.min_p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Anything that scores the next token given the tokens generated so far.
pub trait StepModel {
    fn next_logits(&self, generated: &[u32]) -> Result<Vec<f64>>;
    fn eos(&self) -> u32 {
        EOS_ID
    }
    /// Upper bound on generated length imposed by the model (e.g. context size).
    fn capacity(&self) -> usize {
        usize::MAX
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub ids: Vec<u32>,
    /// Sum of log-probabilities under the filtered, renormalised distributions.
    pub score: f64,
}

/// Surviving `(token, log p')` after temperature, min-p filtering and
/// renormalisation, in token order.
pub fn filtered_candidates(logits: &[f64], cfg: &GenerationConfig) -> Vec<(u32, f64)> {
    let mut p: Vec<f64> = logits.iter().map(|l| l / cfg.temperature).collect();
    softmax_in_place(&mut p);
    let p_max = p.iter().cloned().fold(0.0, f64::max);
    let threshold = if cfg.absolute_min_p { cfg.min_p.min(p_max) } else { cfg.min_p * p_max };
    let kept: Vec<(u32, f64)> = p
        .iter()
        .enumerate()
        .filter(|(_, &q)| q > 0.0 && q >= threshold)
        .map(|(i, &q)| (i as u32, q))
        .collect();
    let z: f64 = kept.iter().map(|k| k.1).sum();
    kept.into_iter().map(|(i, q)| (i, (q / z).ln())).collect()
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.ids.cmp(&b.ids))
}

/// Beam search: keeps the `beams` best partial sequences by summed
/// log-probability and returns the best finished one. No length penalty.
pub fn beam_search<M: StepModel + ?Sized>(model: &M, cfg: &GenerationConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    if cfg.stochastic {
        return sample(model, cfg);
    }
    let limit = cfg.max_new_tokens.min(model.capacity());
    let mut live = vec![Hypothesis { ids: vec![], score: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..limit {
        let mut candidates = Vec::new();
        for h in &live {
            let logits = model.next_logits(&h.ids)?;
            for (tok, lp) in filtered_candidates(&logits, cfg) {
                let mut ids = h.ids.clone();
                ids.push(tok);
                candidates.push(Hypothesis { ids, score: h.score + lp });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(cfg.beams);
        live.clear();
        for c in candidates {
            if c.ids.last() == Some(&model.eos()) {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        // scores only decrease with length, so no live beam can overtake
        let best_finished = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || live.iter().all(|h| h.score <= best_finished) {
            break;
        }
    }
    finished.extend(live);
    finished.sort_by(rank);
    finished
        .into_iter()
        .next()
        .ok_or_else(|| Error::Numerical("beam search produced no hypothesis".into()))
}

fn sample<M: StepModel + ?Sized>(model: &M, cfg: &GenerationConfig) -> Result<Hypothesis> {
    let mut r = rng::stream(cfg.seed, "generation");
    let mut h = Hypothesis { ids: vec![], score: 0.0 };
    for _ in 0..cfg.max_new_tokens.min(model.capacity()) {
        let cands = filtered_candidates(&model.next_logits(&h.ids)?, cfg);
        let u: f64 = r.random();
        let mut acc = 0.0;
        let mut pick = cands[cands.len() - 1];
        for c in &cands {
            acc += c.1.exp();
            if u < acc {
                pick = *c;
                break;
            }
        }
        h.ids.push(pick.0);
        h.score += pick.1;
        if pick.0 == model.eos() {
            break;
        }
    }
    Ok(h)
}

/// A fused model bound to one prompt.
pub struct Prompted<'a> {
    pub model: &'a FusionModel,
    pub seq: MultimodalSequence,
    blocked: Vec<bool>,
}

impl<'a> Prompted<'a> {
    pub fn new(model: &'a FusionModel, seq: MultimodalSequence) -> Result<Self> {
        let max = model.decoder.config.max_seq_len;
        if seq.len() >= max {
            return Err(Error::SequenceOverflow {
                length: seq.len() + 1,
                max,
            });
        }
        let mut blocked = vec![false; model.vocab.len()];
        for id in [PAD_ID, UNK_ID, BOS_ID, INST_OPEN_ID, INST_CLOSE_ID] {
            blocked[id as usize] = true;
        }
        for &id in &model.banned {
            if let Some(b) = blocked.get_mut(id as usize) {
                *b = true;
            }
        }
        Ok(Self { model, seq, blocked })
    }
}

impl StepModel for Prompted<'_> {
    fn next_logits(&self, generated: &[u32]) -> Result<Vec<f64>> {
        let mut seq = self.seq.clone();
        seq.slots.extend(generated.iter().map(|&id| Slot::Text(id)));
        seq.loss_mask.resize(seq.slots.len(), false);
        let logits = self.model.logits(&seq)?;
        let mut last = logits.row(seq.len() - 1).to_vec();
        for (l, &b) in last.iter_mut().zip(&self.blocked) {
            if b {
                *l = f64::NEG_INFINITY;
            }
        }
        Ok(last)
    }

    fn capacity(&self) -> usize {
        self.model.decoder.config.max_seq_len - self.seq.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub ids: Vec<u32>,
    pub score: f64,
}

/// Encodes `betas`, prompts with `question` and decodes an answer.
pub fn generate(model: &FusionModel, betas: &[f64], question: &str, cfg: &GenerationConfig) -> Result<Generation> {
    let seq = model.prompt(betas, question)?;
    generate_from(model, seq, cfg)
}

pub fn generate_from(model: &FusionModel, seq: MultimodalSequence, cfg: &GenerationConfig) -> Result<Generation> {
    let p = Prompted::new(model, seq)?;
    let h = beam_search(&p, cfg)?;
    Ok(Generation {
        text: model.vocab.detokenize(&h.ids),
        ids: h.ids,
        score: h.score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceTrace {
    pub text: String,
    /// Per decoding step, total probability of the query tokens.
    pub step_sums: Vec<f64>,
    /// Log of the largest per-step sum.
    pub aggregate: f64,
}

/// Greedy decode recording the probability mass on `token_set` at each step.
pub fn token_evidence<M: StepModel + ?Sized>(model: &M, token_set: &[u32], max_steps: usize) -> Result<(Vec<u32>, Vec<f64>, f64)> {
    if token_set.is_empty() {
        return Err(Error::InvalidArgument("evidence token set is empty".into()));
    }
    let mut ids = Vec::new();
    let mut sums = Vec::new();
    for _ in 0..max_steps.min(model.capacity()) {
        let logits = model.next_logits(&ids)?;
        let lp = log_softmax(&logits);
        let s: f64 = token_set
            .iter()
            .filter_map(|&t| lp.get(t as usize))
            .map(|l| l.exp())
            .sum::<f64>()
            .min(1.0);
        sums.push(s);
        let next = lp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i as u32)
            .ok_or_else(|| Error::Numerical("empty logits".into()))?;
        ids.push(next);
        if next == model.eos() {
            break;
        }
    }
    let max = sums.iter().cloned().fold(0.0, f64::max);
    Ok((ids, sums, max.max(f64::MIN_POSITIVE).ln()))
}

/// Evidence for words (looked up in the model vocabulary) on one trial.
pub fn trial_evidence(
    model: &FusionModel,
    betas: &[f64],
    question: &str,
    words: &[&str],
    max_steps: usize,
) -> Result<EvidenceTrace> {
    let set: Vec<u32> = words.iter().filter_map(|w| model.vocab.id(&w.to_lowercase())).collect();
    if set.is_empty() {
        return Err(Error::InvalidArgument("no evidence token is in the vocabulary".into()));
    }
    let p = Prompted::new(model, model.prompt(betas, question)?)?;
    let (ids, step_sums, aggregate) = token_evidence(&p, &set, max_steps)?;
    Ok(EvidenceTrace {
        text: model.vocab.detokenize(&ids),
        step_sums,
        aggregate,
    })
}
