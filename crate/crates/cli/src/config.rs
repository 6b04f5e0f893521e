//! Run configuration: one TOML file, unknown keys rejected, versioned schema.

use std::path::{Path, PathBuf};

use brainlang::dataset::{WorldConfig, CAPTION_PROMPTS};
use brainlang::decoder::{DecoderConfig, LoraConfig};
use brainlang::eval::EvalConfig;
use brainlang::experiments::DEFAULT_BETA_GRID;
use brainlang::generate::GenerationConfig;
use brainlang::rng::derive_seed;
use brainlang::trainer::{LmConfig, PhaseConfig};
use brainlang::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSettings {
    pub hidden: usize,
    /// Cumulative explained variance the projection must reach.
    pub variance_target: f64,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        Self {
            hidden: 32,
            variance_target: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZeroShotSettings {
    /// Categories withheld by `train --holdout` when no list is given.
    pub holdout: Vec<String>,
    /// Forced-choice options, in prompt order.
    pub options: Vec<String>,
    /// Held-out trials probed (drawn from every split, lowest ids first).
    pub max_trials: usize,
}

impl Default for ZeroShotSettings {
    fn default() -> Self {
        Self {
            holdout: vec!["zebra".into()],
            options: vec!["zebra".into(), "airplane".into(), "surfer".into()],
            max_trials: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MicrostimSettings {
    pub fractions: Vec<f64>,
    pub grid: Vec<f64>,
    /// Test trials per group (with / without a person).
    pub per_group: usize,
    pub prompt: String,
    pub evidence_max_steps: usize,
    pub beams: usize,
}

impl Default for MicrostimSettings {
    fn default() -> Self {
        Self {
            fractions: vec![0.01, 0.05],
            grid: DEFAULT_BETA_GRID.to_vec(),
            per_group: 20,
            prompt: CAPTION_PROMPTS[1].to_string(),
            evidence_max_steps: 16,
            beams: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSettings {
    pub addr: String,
    pub cors: bool,
    /// Largest β grid accepted by the sweep endpoint.
    pub max_grid: usize,
}

impl Default for ServeSettings {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            cors: false,
            max_grid: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Root seed. Every component seed below is derived from it on resolve.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub world: WorldConfig,
    pub decoder: DecoderConfig,
    pub tokenizer: TokenizerSettings,
    pub lm: LmConfig,
    pub phase1: PhaseConfig,
    pub phase2: PhaseConfig,
    pub lora: LoraConfig,
    pub generation: GenerationConfig,
    pub eval: EvalConfig,
    pub zeroshot: ZeroShotSettings,
    pub microstim: MicrostimSettings,
    pub serve: ServeSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out_dir: PathBuf::from("run"),
            world: WorldConfig::default(),
            decoder: DecoderConfig::default(),
            tokenizer: TokenizerSettings::default(),
            lm: LmConfig::default(),
            phase1: PhaseConfig::phase1(),
            phase2: PhaseConfig::phase2(),
            lora: LoraConfig::default(),
            generation: GenerationConfig::default(),
            eval: EvalConfig::default(),
            zeroshot: ZeroShotSettings::default(),
            microstim: MicrostimSettings::default(),
            serve: ServeSettings::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text` as overrides on top of the defaults; tables merge key by key.
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = toml::Table::try_from(Self::default()).expect("defaults serialize");
        merge(&mut base, file);
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// File contents (empty for defaults) plus `key.path=value` overrides.
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut file: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let line = format!("{} = {}", key.trim(), value.trim());
            let over: toml::Table = toml::from_str(&line)
                .or_else(|_| toml::from_str(&format!("{} = {:?}", key.trim(), value.trim())))
                .map_err(|e: toml::de::Error| Error::Config(format!("override {o:?}: {e}")))?;
            merge(&mut file, over);
        }
        Self::from_toml(&toml::to_string(&file).expect("table serializes"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Derives component seeds from the root seed and validates.
    pub fn resolved(mut self) -> Result<Self> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        // 63-bit seeds so the effective config stays representable in TOML
        let root = self.seed;
        let sub = |name: &str| derive_seed(root, name, &[]) >> 1;
        self.world.seed = sub("world");
        self.lm.seed = sub("lm");
        self.phase1.seed = sub("phase1");
        self.phase2.seed = sub("phase2");
        self.generation.seed = sub("generation");
        self.eval.seed = sub("eval");
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.phase1.validate()?;
        self.phase2.validate()?;
        self.generation.validate()?;
        if self.decoder.n_heads == 0 || !self.decoder.d_model.is_multiple_of(self.decoder.n_heads) {
            return Err(Error::Config("decoder.d_model must be divisible by decoder.n_heads".into()));
        }
        if self.tokenizer.hidden == 0 || !(self.tokenizer.variance_target > 0.0 && self.tokenizer.variance_target <= 1.0) {
            return Err(Error::Config("tokenizer.hidden must be >= 1 and variance_target in (0, 1]".into()));
        }
        if self.lora.rank == 0 || !(0.0..1.0).contains(&self.lora.dropout) {
            return Err(Error::Config("lora.rank must be >= 1 and dropout in [0, 1)".into()));
        }
        if self.microstim.grid.iter().any(|b| !b.is_finite()) || self.microstim.grid.is_empty() {
            return Err(Error::Config("microstim.grid must be non-empty and finite".into()));
        }
        if self.microstim.fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(Error::Config("microstim.fractions must lie in (0, 1)".into()));
        }
        if self.zeroshot.options.len() < 2 {
            return Err(Error::Config("zeroshot.options needs at least two categories".into()));
        }
        for name in self.zeroshot.options.iter().chain(&self.zeroshot.holdout) {
            if self.world.category_index(name).is_none() {
                return Err(Error::Config(format!("unknown category {name}")));
            }
        }
        Ok(())
    }

    /// Effective configuration as JSON, for checkpoint echoes.
    pub fn echo(&self) -> serde_json::Value {
        // where a run is written is not part of the model
        let normalized = Self {
            out_dir: Self::default().out_dir,
            ..self.clone()
        };
        serde_json::to_value(normalized).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
