//! Zero-shot category holdout and in-silico microstimulation harnesses.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{round_half_up, Dataset, Split, Trial, CAPTION_PROMPTS};
use crate::decoder::split_words;
use crate::error::{Error, Result};
use crate::eval::SentenceEmbedder;
use crate::generate::{generate, trial_evidence, GenerationConfig};
use crate::linalg::dot;
use crate::model::FusionModel;
use crate::par;
use crate::trainer::corpus_texts;

// ---------------------------------------------------------------------------
// Category holdout

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryFilter {
    pub category: String,
    /// Lowercase whole-word match terms.
    pub terms: Vec<String>,
}

impl CategoryFilter {
    pub fn new(category: &str, terms: &[&str]) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidArgument(format!("filter for {category} has no terms")));
        }
        Ok(Self {
            category: category.to_string(),
            terms: terms.iter().map(|t| t.to_lowercase()).collect(),
        })
    }

    /// Published term lists for zebra, surfer and airplane; other categories
    /// match their singular and plural nouns.
    pub fn for_category(dataset: &Dataset, name: &str) -> Result<Self> {
        match name {
            "zebra" => Self::new(name, &["zebra", "zebras"]),
            "surfer" => Self::new(name, &["surf", "surfer", "surfers", "surfing", "surfboard"]),
            "airplane" => Self::new(name, &["airplane", "airplanes", "plane", "planes"]),
            _ => {
                let spec = dataset
                    .config
                    .categories
                    .iter()
                    .find(|c| c.name == name)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown category {name}")))?;
                Self::new(name, &[&spec.name, &spec.plural])
            }
        }
    }

    pub fn matches(&self, text: &str) -> bool {
        split_words(text).iter().any(|w| self.terms.contains(w))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Holdout {
    pub filters: Vec<CategoryFilter>,
    /// Trials whose captions match no filter.
    pub reduced: Dataset,
    pub held_out: Vec<u32>,
    /// Tokens occurring only in held-out trials.
    pub withheld_tokens: Vec<String>,
}

impl Holdout {
    /// The original split restricted to the reduced dataset.
    pub fn restrict(&self, split: &Split) -> Split {
        let held: BTreeSet<u32> = self.held_out.iter().copied().collect();
        let keep = |ids: &[u32]| ids.iter().copied().filter(|id| !held.contains(id)).collect();
        Split {
            train_ids: keep(&split.train_ids),
            val_ids: keep(&split.val_ids),
            test_ids: keep(&split.test_ids),
        }
    }
}

/// Removes every trial with a caption matching any filter.
pub fn holdout_category(dataset: &Dataset, filters: &[CategoryFilter]) -> Result<Holdout> {
    if filters.is_empty() {
        return Err(Error::InvalidArgument("no category filters".into()));
    }
    let (held, kept): (Vec<&Trial>, Vec<&Trial>) = dataset
        .trials
        .iter()
        .partition(|t| t.captions.iter().any(|c| filters.iter().any(|f| f.matches(c))));
    if held.is_empty() || kept.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "filter matched {} of {} trials",
            held.len(),
            dataset.trials.len()
        )));
    }
    let reduced = Dataset {
        config: dataset.config.clone(),
        parcellation: dataset.parcellation.clone(),
        trials: kept.into_iter().cloned().collect(),
    };
    let kept_words: BTreeSet<String> = corpus_texts(&reduced).iter().flat_map(|t| split_words(t)).collect();
    let mut withheld = BTreeSet::new();
    for t in &held {
        let texts = t.captions.iter().chain(t.qa_pairs.iter().flat_map(|(q, a)| [q, a]));
        for text in texts {
            for w in split_words(text) {
                if !kept_words.contains(&w) {
                    withheld.insert(w);
                }
            }
        }
    }
    Ok(Holdout {
        filters: filters.to_vec(),
        reduced,
        held_out: held.iter().map(|t| t.trial_id).collect(),
        withheld_tokens: withheld.into_iter().collect(),
    })
}

/// Marks the withheld tokens as never-emittable in `model`.
pub fn ban_withheld(model: &mut FusionModel, holdout: &Holdout) {
    let mut banned: BTreeSet<u32> = model.banned.iter().copied().collect();
    banned.extend(holdout.withheld_tokens.iter().filter_map(|w| model.vocab.id(w)));
    model.banned = banned.into_iter().collect();
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotTrial {
    pub trial_id: u32,
    pub category: String,
    pub caption: String,
    pub assigned: String,
    /// Closest centroid other than the trial's own category.
    pub nearest_other: String,
    pub xy: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub categories: Vec<String>,
    pub accuracy: f64,
    pub chance: f64,
    pub trials: Vec<ZeroShotTrial>,
    pub centroid_xy: Vec<[f64; 2]>,
    /// Any emitted token from the withheld list.
    pub withheld_emitted: Vec<String>,
}

/// Unit-norm mean embedding of each category's captions over `trial_ids`.
pub fn category_centroids(embedder: &SentenceEmbedder, dataset: &Dataset, trial_ids: &[u32]) -> Vec<Option<Vec<f64>>> {
    let n = dataset.config.categories.len();
    let mut sums = vec![vec![0.0; embedder.dim()]; n];
    let mut counts = vec![0usize; n];
    for t in trial_ids.iter().filter_map(|&id| dataset.trial(id)) {
        for c in &t.captions {
            if let Some(e) = embedder.embed(c) {
                for (s, x) in sums[t.scene.category].iter_mut().zip(&e) {
                    *s += x;
                }
                counts[t.scene.category] += 1;
            }
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| {
            let len = crate::linalg::norm(&s);
            (c > 0 && len > 0.0).then(|| s.into_iter().map(|x| x / len).collect())
        })
        .collect()
}

fn ranked_centroids(e: Option<&Vec<f64>>, centroids: &[Option<Vec<f64>>]) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = centroids
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.as_ref().map(|c| (i, e.map_or(0.0, |e| dot(e, c)))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().map(|s| s.0).collect()
}

/// Two leading principal axes of `points` (zero-padded when rank < 2).
fn pca_2d(points: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let Ok(p) = crate::tokenizer::fit_projection(points, 1.0) else {
        return vec![[0.0, 0.0]; points.len()];
    };
    points
        .iter()
        .map(|x| {
            let c: Vec<f64> = x.iter().zip(&p.mean).map(|(a, m)| a - m).collect();
            let z = p.project(&c);
            [z.first().copied().unwrap_or(0.0), z.get(1).copied().unwrap_or(0.0)]
        })
        .collect()
}

/// Captions held-out trials and assigns each caption to its nearest category
/// centroid (centroids from ground-truth captions of `reference_ids`).
pub fn zeroshot_caption_eval(
    model: &FusionModel,
    embedder: &SentenceEmbedder,
    dataset: &Dataset,
    trial_ids: &[u32],
    reference_ids: &[u32],
    withheld: &[String],
    cfg: &GenerationConfig,
) -> Result<ZeroShotReport> {
    let trials: Vec<&Trial> = trial_ids
        .iter()
        .map(|&id| dataset.trial(id).ok_or_else(|| Error::InvalidArgument(format!("unknown trial id {id}"))))
        .collect::<Result<_>>()?;
    let names: Vec<String> = dataset.config.categories.iter().map(|c| c.name.clone()).collect();
    let centroids = category_centroids(embedder, dataset, reference_ids);
    let captions = par::map(&trials, |t| generate(model, &t.betas, CAPTION_PROMPTS[0], cfg));
    let mut out = Vec::with_capacity(trials.len());
    let mut points = Vec::new();
    let mut emitted = BTreeSet::new();
    let mut hits = 0;
    for (t, g) in trials.iter().zip(captions) {
        let g = g?;
        for w in split_words(&g.text) {
            if withheld.contains(&w) {
                emitted.insert(w);
            }
        }
        let e = embedder.embed(&g.text);
        let ranked = ranked_centroids(e.as_ref(), &centroids);
        let own = t.scene.category;
        let assigned = ranked.first().copied().unwrap_or(own);
        let other = ranked.iter().copied().find(|&c| c != own).unwrap_or(own);
        if assigned == own {
            hits += 1;
        }
        points.push(e.unwrap_or_else(|| vec![0.0; embedder.dim()]));
        out.push(ZeroShotTrial {
            trial_id: t.trial_id,
            category: names[own].clone(),
            caption: g.text,
            assigned: names[assigned].clone(),
            nearest_other: names[other].clone(),
            xy: [0.0, 0.0],
        });
    }
    let n_trials = out.len();
    points.extend(centroids.iter().map(|c| c.clone().unwrap_or_else(|| vec![0.0; embedder.dim()])));
    let xy = pca_2d(&points);
    for (t, p) in out.iter_mut().zip(&xy) {
        t.xy = *p;
    }
    Ok(ZeroShotReport {
        chance: 1.0 / names.len() as f64,
        categories: names,
        accuracy: if n_trials == 0 { 0.0 } else { hits as f64 / n_trials as f64 },
        trials: out,
        centroid_xy: xy[n_trials..].to_vec(),
        withheld_emitted: emitted.into_iter().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceTrial {
    pub trial_id: u32,
    pub truth: String,
    pub answer: String,
    pub choice: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceReport {
    pub options: Vec<String>,
    pub counts: BTreeMap<String, usize>,
    pub non_compliant: usize,
    pub accuracy: f64,
    pub trials: Vec<ChoiceTrial>,
}

/// The option whose term occurs first (whole word) in `answer`.
pub fn classify_choice(answer: &str, options: &[CategoryFilter]) -> Option<String> {
    let words = split_words(answer);
    words.iter().find_map(|w| {
        options
            .iter()
            .find(|o| o.category == *w || o.terms.contains(w))
            .map(|o| o.category.clone())
    })
}

/// Forced-choice prompt over `options` for each trial; answers classified by
/// first occurrence.
pub fn choice_experiment(
    model: &FusionModel,
    dataset: &Dataset,
    trial_ids: &[u32],
    options: &[CategoryFilter],
    cfg: &GenerationConfig,
) -> Result<ChoiceReport> {
    let names: Vec<&str> = options.iter().map(|o| o.category.as_str()).collect();
    let question = crate::dataset::choice_question(&names);
    let trials: Vec<&Trial> = trial_ids
        .iter()
        .map(|&id| dataset.trial(id).ok_or_else(|| Error::InvalidArgument(format!("unknown trial id {id}"))))
        .collect::<Result<_>>()?;
    let answers = par::map(&trials, |t| generate(model, &t.betas, &question, cfg));
    let mut counts: BTreeMap<String, usize> = names.iter().map(|n| (n.to_string(), 0)).collect();
    let mut non_compliant = 0;
    let mut correct = 0;
    let mut out = Vec::new();
    for (t, a) in trials.iter().zip(answers) {
        let a = a?;
        let choice = classify_choice(&a.text, options);
        let truth = dataset.category_name(&t.scene).to_string();
        match &choice {
            Some(c) => {
                *counts.entry(c.clone()).or_default() += 1;
                if *c == truth {
                    correct += 1;
                }
            }
            None => non_compliant += 1,
        }
        out.push(ChoiceTrial {
            trial_id: t.trial_id,
            truth,
            answer: a.text,
            choice,
        });
    }
    Ok(ChoiceReport {
        options: names.iter().map(|s| s.to_string()).collect(),
        counts,
        non_compliant,
        accuracy: if out.is_empty() { 0.0 } else { correct as f64 / out.len() as f64 },
        trials: out,
    })
}

// ---------------------------------------------------------------------------
// Microstimulation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimMask {
    pub id: String,
    pub fraction: f64,
    /// t-values inside the mask, zero elsewhere.
    pub weights: Vec<f64>,
    pub nonzero: usize,
}

/// Number of vertices a mask of `fraction` keeps: round-half-up of `fraction·n`.
pub fn mask_cardinality(n: usize, fraction: f64) -> usize {
    round_half_up(fraction * n as f64).min(n)
}

/// Keeps the t-values of the `round(fraction·n)` largest-t vertices (ties to
/// the lower index).
pub fn build_stim_mask(t_values: &[f64], fraction: f64, id: &str) -> Result<StimMask> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("mask fraction {fraction} outside (0, 1)")));
    }
    let k = mask_cardinality(t_values.len(), fraction);
    let mut idx: Vec<usize> = (0..t_values.len()).collect();
    idx.sort_by(|&a, &b| t_values[b].total_cmp(&t_values[a]).then(a.cmp(&b)));
    let mut weights = vec![0.0; t_values.len()];
    for &i in &idx[..k] {
        weights[i] = t_values[i];
    }
    Ok(StimMask {
        id: id.to_string(),
        fraction,
        nonzero: weights.iter().filter(|w| **w != 0.0).count(),
        weights,
    })
}

/// `betas + β·mask`.
pub fn stimulate(betas: &[f64], mask: &StimMask, beta: f64) -> Result<Vec<f64>> {
    if betas.len() != mask.weights.len() {
        return Err(Error::Shape(format!(
            "betas length {} differs from mask length {}",
            betas.len(),
            mask.weights.len()
        )));
    }
    Ok(betas.iter().zip(&mask.weights).map(|(b, w)| b + beta * w).collect())
}

pub const DEFAULT_BETA_GRID: [f64; 11] = [-5.0, -1.0, -0.5, -0.25, -0.15, 0.0, 0.15, 0.25, 0.5, 1.0, 5.0];

/// Evidence tokens for person mentions.
pub const PERSON_TOKENS: [&str; 8] = ["person", "people", "man", "woman", "men", "women", "boy", "girl"];

/// Mention detector terms: evidence tokens plus plural and possessive forms.
pub fn person_terms() -> Vec<String> {
    let mut t: Vec<String> = PERSON_TOKENS.iter().map(|s| s.to_string()).collect();
    for s in ["persons", "person's", "people's", "man's", "woman's", "men's", "women's", "boys", "girls", "boy's", "girl's"] {
        t.push(s.to_string());
    }
    t
}

pub fn mentions_any(text: &str, terms: &[String]) -> bool {
    split_words(text).iter().any(|w| terms.contains(w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub mask_id: String,
    pub prompt: String,
    pub grid: Vec<f64>,
    pub trial_ids: Vec<u32>,
    pub mention_rate: Vec<f64>,
    pub mean_evidence: Vec<f64>,
    /// `captions[b][i]`: caption of trial `i` at grid point `b`.
    pub captions: Vec<Vec<String>>,
    pub evidence: Vec<Vec<f64>>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("beta,mention_rate,mean_evidence\n");
        for ((b, m), e) in self.grid.iter().zip(&self.mention_rate).zip(&self.mean_evidence) {
            s.push_str(&format!("{b},{m},{e}\n"));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec<'a> {
    pub grid: &'a [f64],
    pub prompt: &'a str,
    pub mention_terms: &'a [String],
    pub evidence_tokens: &'a [&'a str],
    pub max_steps: usize,
}

/// For every β: perturb each trial, caption it and record person evidence.
pub fn microstim_sweep(
    model: &FusionModel,
    trials: &[&Trial],
    mask: &StimMask,
    spec: &SweepSpec<'_>,
    cfg: &GenerationConfig,
) -> Result<SweepResult> {
    let jobs: Vec<(usize, usize)> = (0..spec.grid.len())
        .flat_map(|b| (0..trials.len()).map(move |i| (b, i)))
        .collect();
    let results = par::map(&jobs, |&(b, i)| -> Result<(String, f64)> {
        let betas = stimulate(&trials[i].betas, mask, spec.grid[b])?;
        let caption = generate(model, &betas, spec.prompt, cfg)?.text;
        let ev = trial_evidence(model, &betas, spec.prompt, spec.evidence_tokens, spec.max_steps)?;
        Ok((caption, ev.aggregate))
    });
    let n = trials.len();
    let mut captions = vec![Vec::with_capacity(n); spec.grid.len()];
    let mut evidence = vec![Vec::with_capacity(n); spec.grid.len()];
    for (&(b, _), r) in jobs.iter().zip(results) {
        let (c, e) = r?;
        captions[b].push(c);
        evidence[b].push(e);
    }
    let mention_rate = captions
        .iter()
        .map(|cs| cs.iter().filter(|c| mentions_any(c, spec.mention_terms)).count() as f64 / n.max(1) as f64)
        .collect();
    let mean_evidence = evidence.iter().map(|e| e.iter().sum::<f64>() / n.max(1) as f64).collect();
    Ok(SweepResult {
        mask_id: mask.id.clone(),
        prompt: spec.prompt.to_string(),
        grid: spec.grid.to_vec(),
        trial_ids: trials.iter().map(|t| t.trial_id).collect(),
        mention_rate,
        mean_evidence,
        captions,
        evidence,
    })
}

/// Up to `per_group` trials without and with a person, in id order.
pub fn select_person_trials<'a>(dataset: &'a Dataset, ids: &[u32], per_group: usize) -> (Vec<&'a Trial>, Vec<&'a Trial>) {
    let trials: Vec<&Trial> = ids.iter().filter_map(|&id| dataset.trial(id)).collect();
    let without = trials.iter().filter(|t| !t.scene.has_person).take(per_group).copied().collect();
    let with = trials.iter().filter(|t| t.scene.has_person).take(per_group).copied().collect();
    (without, with)
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}
