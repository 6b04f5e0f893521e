//! Scoring: sentence-embedding caption scores, text metrics, shuffled-pair
//! baselines, significance tests and numerosity accuracy.

mod metrics;
mod stats;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use metrics::{bleu, rouge_l, words, ROUGE_BETA};
pub use stats::{
    inc_beta, kolmogorov_q, ks_test, ln_gamma, mean_var, null_rejection_rate, t_survival, welch_one_sided, KsResult,
    WelchResult,
};

use crate::dataset::{Dataset, CAPTION_PROMPTS, COUNT_WORDS};
use crate::decoder::{split_words, Vocabulary};
use crate::error::{Error, Result};
use crate::generate::{generate, GenerationConfig};
use crate::linalg::{dot, norm, Mat};
use crate::model::FusionModel;
use crate::{par, rng};

pub const STOPWORDS: [&str; 18] = [
    "a", "an", "the", "in", "on", "of", "is", "are", "there", "this", "it", "and", "to", "with", "near", "seen",
    "at", "image",
];

/// Stopword-filtered mean of token embeddings, L2-normalised.
#[derive(Debug, Clone)]
pub struct SentenceEmbedder {
    vocab: Vocabulary,
    embeddings: Mat,
    stop: HashSet<String>,
}

impl SentenceEmbedder {
    pub fn new(vocab: Vocabulary, embeddings: Mat) -> Self {
        Self {
            vocab,
            embeddings,
            stop: STOPWORDS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn from_model(model: &FusionModel) -> Self {
        Self::new(model.vocab.clone(), model.decoder.tok_emb.clone())
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols
    }

    /// Unit vector, or `None` when no content token is in the vocabulary.
    pub fn embed(&self, text: &str) -> Option<Vec<f64>> {
        let mut acc = vec![0.0; self.dim()];
        let mut n = 0;
        for w in split_words(text) {
            if self.stop.contains(&w) || !w.chars().any(char::is_alphanumeric) {
                continue;
            }
            if let Some(id) = self.vocab.id(&w) {
                for (a, e) in acc.iter_mut().zip(self.embeddings.row(id as usize)) {
                    *a += e;
                }
                n += 1;
            }
        }
        let len = norm(&acc);
        if n == 0 || len == 0.0 {
            return None;
        }
        Some(acc.into_iter().map(|x| x / len).collect())
    }

    pub fn cosine(&self, a: &str, b: &str) -> f64 {
        match (self.embed(a), self.embed(b)) {
            (Some(x), Some(y)) => dot(&x, &y),
            _ => 0.0,
        }
    }

    /// `w · max_ref max(cos, 0)`; zero for an empty candidate.
    pub fn caption_score(&self, candidate: &str, references: &[&str], w: f64) -> f64 {
        let Some(c) = self.embed(candidate) else {
            return 0.0;
        };
        references
            .iter()
            .filter_map(|r| self.embed(r))
            .map(|r| dot(&c, &r).max(0.0))
            .fold(0.0, f64::max)
            * w
    }

    /// Mean over trials and references of each reference scored against the
    /// trial's other references.
    pub fn human_ceiling(&self, references: &[Vec<String>]) -> f64 {
        let mut sum = 0.0;
        let mut n = 0;
        for refs in references {
            for i in 0..refs.len() {
                let others: Vec<&str> = refs
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, r)| r.as_str())
                    .collect();
                if !others.is_empty() {
                    sum += self.caption_score(&refs[i], &others, 1.0);
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Uniform random permutation without fixed points (rejection sampling).
pub fn derangement(n: usize, r: &mut rng::Rng) -> Vec<usize> {
    assert!(n >= 2, "a derangement needs at least two items");
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(r);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return p;
        }
    }
}

/// Scores of candidates paired with other trials' references, pooled over
/// `n_permutations` derangements.
pub fn shuffled_baseline<F>(n: usize, n_permutations: usize, seed: u64, score: F) -> Result<Vec<f64>>
where
    F: Fn(usize, usize) -> f64,
{
    if n < 2 {
        return Err(Error::InvalidArgument("shuffled baseline needs at least two trials".into()));
    }
    let mut r = rng::stream(seed, "shuffle/baseline");
    let mut out = Vec::with_capacity(n * n_permutations);
    for _ in 0..n_permutations {
        let p = derangement(n, &mut r);
        out.extend((0..n).map(|i| score(i, p[i])));
    }
    Ok(out)
}

/// Count in an answer: the first count word (`one`..`four`) or digit 1..4.
pub fn parse_count(answer: &str) -> Option<u8> {
    split_words(answer).iter().find_map(|w| {
        COUNT_WORDS
            .iter()
            .position(|c| c == w)
            .map(|i| i as u8 + 1)
            .or_else(|| w.parse::<u8>().ok().filter(|n| (1..=4).contains(n)))
    })
}

pub fn numerosity_accuracy(answers: &[&str], truths: &[u8]) -> f64 {
    if answers.is_empty() {
        return 0.0;
    }
    let hits = answers
        .iter()
        .zip(truths)
        .filter(|(a, &t)| parse_count(a) == Some(t))
        .count();
    hits as f64 / answers.len() as f64
}

/// Mode of a sample: centre of the fullest Freedman–Diaconis histogram bin.
pub fn fd_mode(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = p * (s.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        s[lo] + (h - lo as f64) * (s[hi] - s[lo])
    };
    let iqr = q(0.75) - q(0.25);
    let (min, max) = (s[0], s[s.len() - 1]);
    let mut width = 2.0 * iqr / (s.len() as f64).cbrt();
    if width <= 0.0 || max == min {
        return q(0.5);
    }
    // a rounding-noise IQR would ask for billions of bins
    let mut bins = ((max - min) / width).ceil().max(1.0) as usize;
    if bins > s.len() {
        bins = s.len();
        width = (max - min) / bins as f64;
    }
    let mut counts = vec![0usize; bins];
    for v in &s {
        let b = (((v - min) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let best = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    min + (best as f64 + 0.5) * width
}

// ---------------------------------------------------------------------------
// Model outputs and reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionOutput {
    pub trial_id: u32,
    pub prompt: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaOutput {
    pub trial_id: u32,
    pub question: String,
    pub truth: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutputs {
    pub captions: Vec<CaptionOutput>,
    pub qa: Vec<QaOutput>,
}

/// Captions (first captioning prompt) and QA answers for the given trials.
pub fn collect_outputs(model: &FusionModel, dataset: &Dataset, ids: &[u32], cfg: &GenerationConfig) -> Result<ModelOutputs> {
    let trials: Vec<_> = ids
        .iter()
        .map(|&id| dataset.trial(id).ok_or_else(|| Error::InvalidArgument(format!("unknown trial id {id}"))))
        .collect::<Result<_>>()?;
    let prompt = CAPTION_PROMPTS[0];
    let caps = par::map(&trials, |t| {
        generate(model, &t.betas, prompt, cfg).map(|g| CaptionOutput {
            trial_id: t.trial_id,
            prompt: prompt.to_string(),
            text: g.text,
        })
    });
    let jobs: Vec<(usize, usize)> = trials
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.qa_pairs.len()).map(move |k| (i, k)))
        .collect();
    let qa = par::map(&jobs, |&(i, k)| {
        let t = trials[i];
        let (q, a) = &t.qa_pairs[k];
        generate(model, &t.betas, q, cfg).map(|g| QaOutput {
            trial_id: t.trial_id,
            question: q.clone(),
            truth: a.clone(),
            answer: g.text,
        })
    });
    Ok(ModelOutputs {
        captions: caps.into_iter().collect::<Result<_>>()?,
        qa: qa.into_iter().collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub metric: String,
    pub scores: Vec<f64>,
    pub baseline_scores: Vec<f64>,
    pub control_scores: Option<Vec<f64>>,
    pub mean: f64,
    pub baseline_mean: f64,
    pub control_mean: Option<f64>,
    pub mode: f64,
    /// `None` when the comparison is untestable; see `notes`.
    pub vs_baseline: Option<WelchResult>,
    pub vs_control: Option<WelchResult>,
    pub notes: Vec<String>,
    pub ceiling: Option<f64>,
    pub percent_of_ceiling: Option<f64>,
}

/// Welch test that records zero-variance pairs instead of failing the report.
fn compare(label: &str, a: &[f64], b: &[f64], notes: &mut Vec<String>) -> Result<Option<WelchResult>> {
    match welch_one_sided(a, b) {
        Ok(w) => Ok(Some(w)),
        Err(Error::Degenerate(why)) => {
            log::warn!("{label}: {why}");
            notes.push(format!("{label}: {why} (means {:.6} vs {:.6})", mean(a), mean(b)));
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len().max(1) as f64
}

impl ScoreReport {
    pub fn new(
        metric: &str,
        scores: Vec<f64>,
        baseline_scores: Vec<f64>,
        control_scores: Option<Vec<f64>>,
        ceiling: Option<f64>,
    ) -> Result<Self> {
        if scores.iter().chain(&baseline_scores).any(|s| !s.is_finite()) {
            return Err(Error::Numerical(format!("{metric}: non-finite score")));
        }
        let mut notes = Vec::new();
        let vs_baseline = compare(&format!("{metric} vs shuffled"), &scores, &baseline_scores, &mut notes)?;
        let vs_control = match &control_scores {
            Some(c) => compare(&format!("{metric} vs control"), &scores, c, &mut notes)?,
            None => None,
        };
        let m = mean(&scores);
        Ok(Self {
            metric: metric.to_string(),
            mean: m,
            baseline_mean: mean(&baseline_scores),
            control_mean: control_scores.as_deref().map(mean),
            mode: fd_mode(&scores),
            vs_baseline,
            vs_control,
            notes,
            percent_of_ceiling: ceiling.filter(|&c| c > 0.0).map(|c| 100.0 * m / c),
            ceiling,
            scores,
            baseline_scores,
            control_scores,
        })
    }

    pub fn table_row(&self) -> String {
        // "n/a" marks a comparison that was run but untestable
        let p_cell = |w: Option<WelchResult>, ran: bool| match w {
            Some(w) => format!("{:.2e}", w.p),
            None if ran => "n/a".to_string(),
            None => "-".to_string(),
        };
        let opt = |x: Option<f64>, prec: usize| x.map_or("-".to_string(), |v| format!("{v:.prec$}"));
        format!(
            "{:<10} {:>7.4} {:>7.4} {:>8.4} {:>9} {:>10} {:>10} {:>8} {:>7}",
            self.metric,
            self.mean,
            self.mode,
            self.baseline_mean,
            opt(self.control_mean, 4),
            p_cell(self.vs_baseline, true),
            p_cell(self.vs_control, self.control_scores.is_some()),
            opt(self.ceiling, 4),
            opt(self.percent_of_ceiling, 1),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumerosityReport {
    pub accuracy: f64,
    pub control_accuracy: Option<f64>,
    pub predictions: Vec<f64>,
    pub control_predictions: Option<Vec<f64>>,
    /// KS test between model and control predicted counts.
    pub ks: Option<KsResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_trials: usize,
    pub caption: ScoreReport,
    pub qa: ScoreReport,
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub numerosity: NumerosityReport,
    pub outputs: ModelOutputs,
    pub control_outputs: Option<ModelOutputs>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>7} {:>7} {:>8} {:>9} {:>10} {:>10} {:>8} {:>7}\n",
            "metric", "mean", "mode", "shuffled", "control", "p(shuf)", "p(ctrl)", "ceiling", "%ceil"
        );
        s.push_str(&self.caption.table_row());
        s.push('\n');
        s.push_str(&self.qa.table_row());
        s.push('\n');
        s.push_str(&format!(
            "BLEU-1..4 {:.4} {:.4} {:.4} {:.4}  ROUGE-L {:.4}\n",
            self.bleu[0], self.bleu[1], self.bleu[2], self.bleu[3], self.rouge_l
        ));
        s.push_str(&format!(
            "numerosity accuracy {:.4} (control {})",
            self.numerosity.accuracy,
            self.numerosity.control_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
        ));
        if let Some(ks) = self.numerosity.ks {
            s.push_str(&format!("  KS D={:.4} p={:.3e}", ks.d, ks.p));
        }
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_permutations: usize,
    pub seed: u64,
    /// Scale applied to caption scores.
    pub score_weight: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_permutations: 5,
            seed: 0,
            score_weight: 1.0,
        }
    }
}

fn is_count_question(q: &str) -> bool {
    q.starts_with("How many")
}

fn count_predictions(out: &ModelOutputs) -> Vec<f64> {
    out.qa
        .iter()
        .filter(|o| is_count_question(&o.question))
        .map(|o| parse_count(&o.answer).map_or(0.0, f64::from))
        .collect()
}

/// Scores model (and optional control) outputs against ground truth.
pub fn score_outputs(
    embedder: &SentenceEmbedder,
    dataset: &Dataset,
    outputs: ModelOutputs,
    control: Option<ModelOutputs>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let refs: Vec<Vec<String>> = outputs
        .captions
        .iter()
        .map(|c| {
            dataset
                .trial(c.trial_id)
                .map(|t| t.captions.clone())
                .ok_or_else(|| Error::InvalidArgument(format!("unknown trial id {}", c.trial_id)))
        })
        .collect::<Result<_>>()?;
    let ref_strs = |i: usize| refs[i].iter().map(String::as_str).collect::<Vec<_>>();
    let w = cfg.score_weight;
    let cap_score = |o: &ModelOutputs| -> Vec<f64> {
        o.captions
            .iter()
            .enumerate()
            .map(|(i, c)| embedder.caption_score(&c.text, &ref_strs(i), w))
            .collect()
    };
    let cap_scores = cap_score(&outputs);
    let cap_base = shuffled_baseline(outputs.captions.len(), cfg.n_permutations, cfg.seed, |i, j| {
        embedder.caption_score(&outputs.captions[i].text, &ref_strs(j), w)
    })?;
    let ceiling = embedder.human_ceiling(&refs) * w;
    let caption = ScoreReport::new(
        "caption",
        cap_scores,
        cap_base,
        control.as_ref().map(cap_score),
        Some(ceiling),
    )?;

    let qa_score = |o: &ModelOutputs| -> Vec<f64> {
        o.qa.iter()
            .map(|q| embedder.caption_score(&q.answer, &[q.truth.as_str()], w))
            .collect()
    };
    // baseline pairs answers with other questions of the same kind
    let qa_base = shuffled_baseline(outputs.qa.len(), cfg.n_permutations, rng::derive_seed(cfg.seed, "qa", &[]), |i, j| {
        embedder.caption_score(&outputs.qa[i].answer, &[outputs.qa[j].truth.as_str()], w)
    })?;
    let qa = ScoreReport::new("qa", qa_score(&outputs), qa_base, control.as_ref().map(qa_score), None)?;

    let mut bleu_sum = [0.0; 4];
    let mut rouge = 0.0;
    for (i, c) in outputs.captions.iter().enumerate() {
        for (n, b) in bleu_sum.iter_mut().enumerate() {
            *b += bleu(&c.text, &ref_strs(i), n + 1);
        }
        rouge += rouge_l(&c.text, &ref_strs(i));
    }
    let nc = outputs.captions.len().max(1) as f64;

    let truths: Vec<u8> = outputs
        .qa
        .iter()
        .filter(|o| is_count_question(&o.question))
        .map(|o| dataset.trial(o.trial_id).map(|t| t.scene.count).unwrap_or(0))
        .collect();
    let accuracy_of = |o: &ModelOutputs| {
        let answers: Vec<&str> = o
            .qa
            .iter()
            .filter(|q| is_count_question(&q.question))
            .map(|q| q.answer.as_str())
            .collect();
        numerosity_accuracy(&answers, &truths)
    };
    let predictions = count_predictions(&outputs);
    let control_predictions = control.as_ref().map(count_predictions);
    let ks = match &control_predictions {
        Some(c) if !c.is_empty() && !predictions.is_empty() => Some(ks_test(&predictions, c)?),
        _ => None,
    };
    let numerosity = NumerosityReport {
        accuracy: accuracy_of(&outputs),
        control_accuracy: control.as_ref().map(accuracy_of),
        predictions,
        control_predictions,
        ks,
    };
    Ok(EvalReport {
        n_trials: outputs.captions.len(),
        caption,
        qa,
        bleu: bleu_sum.map(|b| b / nc),
        rouge_l: rouge / nc,
        numerosity,
        outputs,
        control_outputs: control,
    })
}
