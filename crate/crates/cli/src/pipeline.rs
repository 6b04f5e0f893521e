//! Stage functions shared by the command line, the service and the tests.
//!
//! Every stage that produces a model passes it through the checkpoint
//! encoding before returning, so a model used in-process is bit-for-bit the
//! model a later command would load from disk.

use std::path::{Path, PathBuf};

use brainlang::checkpoint::{Checkpoint, PhaseProvenance};
use brainlang::dataset::{localizer_ttest, split_dataset, Dataset, Split};
use brainlang::eval::{collect_outputs, score_outputs, EvalReport, SentenceEmbedder};
use brainlang::experiments::{
    ban_withheld, build_stim_mask, choice_experiment, holdout_category, microstim_sweep, person_terms,
    select_person_trials, spearman, zeroshot_caption_eval, CategoryFilter, ChoiceReport, Holdout, StimMask,
    SweepResult, SweepSpec, ZeroShotReport, PERSON_TOKENS,
};
use brainlang::generate::{generate, GenerationConfig};
use brainlang::model::FusionModel;
use brainlang::tokenizer::init_tokenizers;
use brainlang::trainer::{
    build_vocabulary, fit_caption_projection, pretrain_decoder_lm, shuffle_betas, train_phase1, train_phase2,
    TrainReport,
};
use brainlang::{rng, Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// File names inside the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }
    pub fn dataset(&self) -> PathBuf {
        self.dir.join("dataset.jsonl")
    }
    pub fn split(&self) -> PathBuf {
        self.dir.join("split.json")
    }
    pub fn base(&self) -> PathBuf {
        self.dir.join("base.ckpt")
    }
    pub fn checkpoint(&self, variant: &Variant, phase: u8) -> PathBuf {
        self.dir.join(format!("{}.phase{phase}.ckpt", variant.tag()))
    }
    pub fn train_log(&self, variant: &Variant) -> PathBuf {
        self.dir.join(format!("{}.train.log", variant.tag()))
    }
    pub fn holdout(&self, variant: &Variant) -> PathBuf {
        self.dir.join(format!("{}.holdout.json", variant.tag()))
    }
    pub fn report(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Variant {
    Main,
    Control,
    Holdout(Vec<String>),
}

impl Variant {
    pub fn tag(&self) -> String {
        match self {
            Variant::Main => "main".into(),
            Variant::Control => "control".into(),
            Variant::Holdout(c) => format!("holdout-{}", c.join("+")),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path).map_err(|e| Error::InvalidArgument(format!("cannot open {}: {e}", path.display())))?;
    Dataset::read_jsonl(std::io::BufReader::new(f))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::InvalidArgument(format!("missing checkpoint {}", path.display())));
    }
    Checkpoint::load(path)
}

/// Encodes and decodes `ck`, fixing its values to the stored precision.
pub fn canonical(ck: Checkpoint) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&ck.to_bytes()?)
}

// ---------------------------------------------------------------------------
// Stages

pub fn synth(cfg: &RunConfig) -> Result<(Dataset, Split)> {
    let ds = brainlang::dataset::generate_world(&cfg.world)?;
    let split = split_dataset(&ds.trials, cfg.world.test_count, rng::derive_seed(cfg.seed, "split", &[]))?;
    Ok((ds, split))
}

/// Language-model pretraining of the decoder on the full corpus, the fixed
/// caption projection and freshly initialised tokenizers.
pub fn pretrain_base(cfg: &RunConfig, ds: &Dataset, split: &Split) -> Result<(Checkpoint, TrainReport)> {
    let vocab = build_vocabulary(ds);
    let (decoder, report) = pretrain_decoder_lm(ds, &split.train_ids, &split.val_ids, &vocab, &cfg.decoder, &cfg.lm)?;
    let captions: Vec<&str> = split
        .train_ids
        .iter()
        .filter_map(|&id| ds.trial(id))
        .flat_map(|t| t.captions.iter().map(String::as_str))
        .collect();
    let projection = fit_caption_projection(&decoder, &vocab, &captions, cfg.tokenizer.variance_target)?;
    log::info!(
        "projection: k={} of D={} (explained {:.4})",
        projection.k(),
        projection.dim(),
        projection.explained_variance_ratio.iter().sum::<f64>()
    );
    let tokenizers = init_tokenizers(
        &ds.parcellation,
        cfg.tokenizer.hidden,
        &projection,
        rng::derive_seed(cfg.seed, "init/tokenizers", &[]),
    );
    let model = FusionModel {
        vocab,
        decoder,
        projection,
        parcellation: ds.parcellation.clone(),
        tokenizers,
        lora: None,
        banned: vec![],
    };
    let ck = canonical(Checkpoint {
        config: cfg.echo(),
        model,
        provenance: vec![PhaseProvenance::from(&report)],
    })?;
    Ok((ck, report))
}

pub struct TrainOutcome {
    pub phase1: Checkpoint,
    pub phase2: Checkpoint,
    pub reports: Vec<TrainReport>,
    pub holdout: Option<Holdout>,
}

pub fn holdout_for(ds: &Dataset, categories: &[String]) -> Result<Holdout> {
    let filters: Vec<CategoryFilter> = categories
        .iter()
        .map(|c| CategoryFilter::for_category(ds, c))
        .collect::<Result<_>>()?;
    holdout_category(ds, &filters)
}

/// Two-phase training of one variant starting from the base checkpoint.
pub fn train(cfg: &RunConfig, base: &Checkpoint, ds: &Dataset, split: &Split, variant: &Variant) -> Result<TrainOutcome> {
    let mut model = base.model.clone();
    let (data, split, holdout) = match variant {
        Variant::Main => (ds.clone(), split.clone(), None),
        Variant::Control => (
            shuffle_betas(ds, &split.train_ids, rng::derive_seed(cfg.seed, "shuffle", &[]))?,
            split.clone(),
            None,
        ),
        Variant::Holdout(cats) => {
            let h = holdout_for(ds, cats)?;
            ban_withheld(&mut model, &h);
            (h.reduced.clone(), h.restrict(split), Some(h))
        }
    };
    let tag = variant.tag();
    let mut provenance = base.provenance.clone();

    let r1 = train_phase1(&mut model, &data, &split.train_ids, &split.val_ids, &cfg.phase1)?;
    if !model.is_finite() {
        return Err(Error::Numerical(format!("{tag} phase1 produced non-finite parameters")));
    }
    let mut p1 = PhaseProvenance::from(&r1);
    p1.phase = format!("{tag}/phase1");
    provenance.push(p1);
    let phase1 = canonical(Checkpoint {
        config: cfg.echo(),
        model,
        provenance: provenance.clone(),
    })?;

    let mut model = phase1.model.clone();
    let r2 = train_phase2(&mut model, &data, &split.train_ids, &split.val_ids, &cfg.phase2, cfg.lora)?;
    if !model.is_finite() {
        return Err(Error::Numerical(format!("{tag} phase2 produced non-finite parameters")));
    }
    let mut p2 = PhaseProvenance::from(&r2);
    p2.phase = format!("{tag}/phase2");
    provenance.push(p2);
    let phase2 = canonical(Checkpoint {
        config: cfg.echo(),
        model,
        provenance,
    })?;
    Ok(TrainOutcome {
        phase1,
        phase2,
        reports: vec![r1, r2],
        holdout,
    })
}

/// Caption, QA and numerosity scores on the test split.
pub fn evaluate(cfg: &RunConfig, model: &FusionModel, control: Option<&FusionModel>, ds: &Dataset, split: &Split) -> Result<EvalReport> {
    let outputs = collect_outputs(model, ds, &split.test_ids, &cfg.generation)?;
    let control_outputs = control
        .map(|c| collect_outputs(c, ds, &split.test_ids, &cfg.generation))
        .transpose()?;
    let embedder = SentenceEmbedder::from_model(model);
    score_outputs(&embedder, ds, outputs, control_outputs, &cfg.eval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotBundle {
    pub held_out_categories: Vec<String>,
    pub withheld_tokens: Vec<String>,
    pub captions: ZeroShotReport,
    pub choice: ChoiceReport,
}

/// Probes a holdout-trained model on held-out trials.
pub fn zeroshot(cfg: &RunConfig, model: &FusionModel, ds: &Dataset, split: &Split, categories: &[String]) -> Result<ZeroShotBundle> {
    let h = holdout_for(ds, categories)?;
    let mut probe: Vec<u32> = h.held_out.clone();
    probe.sort_unstable();
    probe.truncate(cfg.zeroshot.max_trials);
    let embedder = SentenceEmbedder::from_model(model);
    let captions = zeroshot_caption_eval(
        model,
        &embedder,
        ds,
        &probe,
        &split.train_ids,
        &h.withheld_tokens,
        &cfg.generation,
    )?;
    let options: Vec<CategoryFilter> = cfg
        .zeroshot
        .options
        .iter()
        .map(|c| CategoryFilter::for_category(ds, c))
        .collect::<Result<_>>()?;
    let choice = choice_experiment(model, ds, &probe, &options, &cfg.generation)?;
    Ok(ZeroShotBundle {
        held_out_categories: categories.to_vec(),
        withheld_tokens: h.withheld_tokens,
        captions,
        choice,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub id: String,
    pub fraction: f64,
    pub nonzero: usize,
}

impl From<&StimMask> for MaskSummary {
    fn from(m: &StimMask) -> Self {
        Self {
            id: m.id.clone(),
            fraction: m.fraction,
            nonzero: m.nonzero,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSweeps {
    pub mask: MaskSummary,
    /// Trials without a person, full grid.
    pub excitatory: SweepResult,
    /// Trials with a person, full grid.
    pub inhibitory: SweepResult,
    /// Spearman ρ(mention rate, β) over β ≥ 0 on trials without a person.
    pub rho_excitatory: f64,
    /// Spearman ρ(mention rate, |β|) over β ≤ 0 on trials with a person.
    pub rho_inhibitory: f64,
    /// Captions at β = 0 equal unstimulated captions, byte for byte.
    pub zero_rows_identical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicrostimReport {
    pub localizer_trials: usize,
    pub max_t: f64,
    pub sweeps: Vec<MaskSweeps>,
}

pub fn mask_id(fraction: f64) -> String {
    format!("top{}pct", (fraction * 100.0 * 1000.0).round() / 1000.0)
}

/// Stimulation masks from the face localizer over the training trials.
pub fn stim_masks(cfg: &RunConfig, ds: &Dataset, split: &Split) -> Result<(Vec<StimMask>, f64)> {
    let loc = localizer_ttest(split.train_ids.iter().filter_map(|&id| ds.trial(id)));
    let max_t = loc.t_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let masks = cfg
        .microstim
        .fractions
        .iter()
        .map(|&f| build_stim_mask(&loc.t_values, f, &mask_id(f)))
        .collect::<Result<_>>()?;
    Ok((masks, max_t))
}

fn half_rho(grid: &[f64], rate: &[f64], keep: impl Fn(f64) -> bool, x: impl Fn(f64) -> f64) -> f64 {
    let (xs, ys): (Vec<f64>, Vec<f64>) = grid
        .iter()
        .zip(rate)
        .filter(|(b, _)| keep(**b))
        .map(|(b, r)| (x(*b), *r))
        .unzip();
    spearman(&xs, &ys)
}

pub fn microstim_generation(cfg: &RunConfig) -> GenerationConfig {
    GenerationConfig {
        beams: cfg.microstim.beams,
        ..cfg.generation.clone()
    }
}

pub fn microstim(cfg: &RunConfig, model: &FusionModel, ds: &Dataset, split: &Split) -> Result<MicrostimReport> {
    let (masks, max_t) = stim_masks(cfg, ds, split)?;
    let (without, with) = select_person_trials(ds, &split.test_ids, cfg.microstim.per_group);
    if without.is_empty() || with.is_empty() {
        return Err(Error::Degenerate("test split lacks trials with or without a person".into()));
    }
    let gen = microstim_generation(cfg);
    let terms = person_terms();
    let spec = SweepSpec {
        grid: &cfg.microstim.grid,
        prompt: &cfg.microstim.prompt,
        mention_terms: &terms,
        evidence_tokens: &PERSON_TOKENS,
        max_steps: cfg.microstim.evidence_max_steps,
    };
    let baseline = |trials: &[&brainlang::dataset::Trial]| -> Result<Vec<String>> {
        trials
            .iter()
            .map(|t| generate(model, &t.betas, &cfg.microstim.prompt, &gen).map(|g| g.text))
            .collect()
    };
    let base_without = baseline(&without)?;
    let base_with = baseline(&with)?;
    let zero = cfg.microstim.grid.iter().position(|b| *b == 0.0);
    let mut sweeps = Vec::new();
    for mask in &masks {
        let excitatory = microstim_sweep(model, &without, mask, &spec, &gen)?;
        let inhibitory = microstim_sweep(model, &with, mask, &spec, &gen)?;
        let zero_rows_identical = zero.is_some_and(|z| excitatory.captions[z] == base_without && inhibitory.captions[z] == base_with);
        sweeps.push(MaskSweeps {
            mask: MaskSummary::from(mask),
            rho_excitatory: half_rho(&excitatory.grid, &excitatory.mention_rate, |b| b >= 0.0, |b| b),
            rho_inhibitory: half_rho(&inhibitory.grid, &inhibitory.mention_rate, |b| b <= 0.0, f64::abs),
            zero_rows_identical,
            excitatory,
            inhibitory,
        });
    }
    Ok(MicrostimReport {
        localizer_trials: split.train_ids.len(),
        max_t,
        sweeps,
    })
}
