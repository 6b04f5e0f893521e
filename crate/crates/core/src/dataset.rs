//! Deterministic synthetic brain world: scenes, captions, QA pairs, per-vertex
//! betas, a parcellation, splits and a face localizer.
//!
//! Betas follow `b_v = w_v·z(scene) + gain·[v ∈ F]·[person] + ε_v` where
//! `z(scene)` sums a category latent with count and setting offsets and `F` is
//! a contiguous block of face-selective vertices.

use std::io::{BufRead, Write};

use base64::Engine;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

pub const DATASET_FORMAT: &str = "brainlang-dataset";
pub const DATASET_VERSION: u32 = 1;

pub const COUNT_WORDS: [&str; 4] = ["one", "two", "three", "four"];
const COUNT_ARTICLES: [&str; 4] = ["A", "Two", "Three", "Four"];

/// The five captioning prompts used for training and evaluation.
pub const CAPTION_PROMPTS: [&str; 5] = [
    "Give a concise and descriptive caption of this image.",
    "Describe the following image in detail in one sentence.",
    "Provide a detailed description of the given image in one sentence.",
    "Describe the important features of the scene in this image.",
    "What is in this picture?",
];

/// Round half up, the cardinality rule shared by the face set and stim masks.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorySpec {
    pub name: String,
    pub plural: String,
    /// Categories sharing a group get correlated latents (near-confusable).
    pub group: usize,
    /// Setting drawn with probability `setting_affinity`.
    pub preferred_setting: String,
}

fn cat(name: &str, plural: &str, group: usize, setting: &str) -> CategorySpec {
    CategorySpec {
        name: name.into(),
        plural: plural.into(),
        group,
        preferred_setting: setting.into(),
    }
}

pub fn default_categories() -> Vec<CategorySpec> {
    vec![
        cat("zebra", "zebras", 0, "savanna"),
        cat("horse", "horses", 0, "field"),
        cat("giraffe", "giraffes", 0, "forest"),
        cat("airplane", "airplanes", 1, "runway"),
        cat("bird", "birds", 1, "lake"),
        cat("surfer", "surfers", 2, "beach"),
        cat("skateboarder", "skateboarders", 2, "park"),
        cat("bus", "buses", 3, "street"),
    ]
}

pub fn default_settings() -> Vec<String> {
    ["field", "savanna", "beach", "park", "street", "runway", "lake", "forest"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_vertices: usize,
    pub n_regions: usize,
    pub latent_dim: usize,
    pub categories: Vec<CategorySpec>,
    pub settings: Vec<String>,
    pub setting_affinity: f64,
    /// Share of forced-choice questions whose options omit the true category
    /// but list one from the same group, which is then the answer.
    pub choice_near_miss_rate: f64,
    /// Fraction of latent variance shared within a category group.
    pub group_share: f64,
    pub offset_scale: f64,
    pub face_vertex_fraction: f64,
    pub person_gain: f64,
    pub person_rate: f64,
    pub noise_std: f64,
    pub n_trials: usize,
    pub shared_fraction: f64,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_vertices: 2048,
            n_regions: 16,
            latent_dim: 16,
            categories: default_categories(),
            settings: default_settings(),
            setting_affinity: 0.7,
            choice_near_miss_rate: 0.3,
            group_share: 0.6,
            offset_scale: 0.8,
            face_vertex_fraction: 0.05,
            person_gain: 2.0,
            person_rate: 0.5,
            noise_std: 0.5,
            n_trials: 2000,
            shared_fraction: 0.1,
            test_count: 64,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.categories.is_empty() {
            return bad("categories must be non-empty");
        }
        if self.settings.is_empty() {
            return bad("settings must be non-empty");
        }
        if !(self.face_vertex_fraction > 0.0 && self.face_vertex_fraction < 1.0) {
            return bad("face_vertex_fraction must lie in (0, 1)");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be >= 0");
        }
        if self.n_regions == 0 || self.n_regions > self.n_vertices {
            return bad("n_regions must be in 1..=n_vertices");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive");
        }
        if !(0.0..=1.0).contains(&self.setting_affinity)
            || !(0.0..=1.0).contains(&self.choice_near_miss_rate)
            || !(0.0..=1.0).contains(&self.group_share)
            || !(0.0..=1.0).contains(&self.person_rate)
            || !(0.0..=1.0).contains(&self.shared_fraction)
        {
            return bad("probabilities must lie in [0, 1]");
        }
        for c in &self.categories {
            if !self.settings.contains(&c.preferred_setting) {
                return bad(&format!(
                    "category {} prefers unknown setting {}",
                    c.name, c.preferred_setting
                ));
            }
        }
        let mut names: Vec<&str> = self.categories.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.categories.len() {
            return bad("duplicate category names");
        }
        Ok(())
    }

    pub fn face_vertex_count(&self) -> usize {
        round_half_up(self.face_vertex_fraction * self.n_vertices as f64).clamp(1, self.n_vertices)
    }

    /// Contiguous face-selective block, centred in vertex index space.
    pub fn face_vertices(&self) -> std::ops::Range<usize> {
        let size = self.face_vertex_count();
        let start = (self.n_vertices / 2).min(self.n_vertices - size);
        start..start + size
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parcellation {
    pub name: String,
    pub n_vertices: usize,
    pub regions: Vec<Vec<usize>>,
}

impl Parcellation {
    /// Contiguous blocks of near-equal size.
    pub fn contiguous(n_vertices: usize, n_regions: usize) -> Result<Self> {
        if n_regions == 0 || n_regions > n_vertices {
            return Err(Error::Config(format!(
                "cannot split {n_vertices} vertices into {n_regions} regions"
            )));
        }
        let regions = (0..n_regions)
            .map(|i| (i * n_vertices / n_regions..(i + 1) * n_vertices / n_regions).collect())
            .collect();
        Ok(Self {
            name: format!("synth-{n_regions}"),
            n_vertices,
            regions,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn region_sizes(&self) -> Vec<usize> {
        self.regions.iter().map(Vec::len).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.n_vertices];
        for (i, r) in self.regions.iter().enumerate() {
            if r.is_empty() {
                return Err(Error::Config(format!("region {i} is empty")));
            }
            for &v in r {
                if v >= self.n_vertices || seen[v] {
                    return Err(Error::Config(format!(
                        "region {i}: vertex {v} out of range or shared"
                    )));
                }
                seen[v] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config("regions do not cover every vertex".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub category: usize,
    pub count: u8,
    pub setting: usize,
    pub has_person: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial_id: u32,
    pub scene: Scene,
    pub betas: Vec<f64>,
    pub captions: Vec<String>,
    pub qa_pairs: Vec<(String, String)>,
    pub is_shared: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: WorldConfig,
    pub parcellation: Parcellation,
    pub trials: Vec<Trial>,
}

impl Dataset {
    pub fn trial(&self, id: u32) -> Option<&Trial> {
        self.trials.iter().find(|t| t.trial_id == id)
    }

    pub fn category_name(&self, scene: &Scene) -> &str {
        &self.config.categories[scene.category].name
    }

    pub fn setting_name(&self, scene: &Scene) -> &str {
        &self.config.settings[scene.setting]
    }
}

/// Latent structure drawn from the world seed.
struct Latents {
    category: Vec<Vec<f64>>,
    count: Vec<Vec<f64>>,
    setting: Vec<Vec<f64>>,
    mixing: Vec<Vec<f64>>,
}

fn normal_vec(rng: &mut rng::Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>()
}

fn draw_latents(cfg: &WorldConfig) -> Latents {
    let l = cfg.latent_dim;
    let mut r = rng::stream(cfg.seed, "world/latents");
    let n_groups = cfg.categories.iter().map(|c| c.group).max().unwrap_or(0) + 1;
    let groups: Vec<Vec<f64>> = (0..n_groups).map(|_| normal_vec(&mut r, l, 1.0)).collect();
    let (gs, cs) = (cfg.group_share.sqrt(), (1.0 - cfg.group_share).sqrt());
    let category = cfg
        .categories
        .iter()
        .map(|c| {
            let own = normal_vec(&mut r, l, 1.0);
            groups[c.group]
                .iter()
                .zip(&own)
                .map(|(g, o)| gs * g + cs * o)
                .collect()
        })
        .collect();
    let count = (0..4).map(|_| normal_vec(&mut r, l, cfg.offset_scale)).collect();
    let setting = (0..cfg.settings.len())
        .map(|_| normal_vec(&mut r, l, cfg.offset_scale))
        .collect();
    let wscale = 1.0 / (l as f64).sqrt();
    let mut rm = rng::stream(cfg.seed, "world/mixing");
    let mixing = (0..cfg.n_vertices)
        .map(|_| normal_vec(&mut rm, l, wscale))
        .collect();
    Latents {
        category,
        count,
        setting,
        mixing,
    }
}

fn plural_word(spec: &CategorySpec, count: u8) -> &str {
    if count == 1 {
        &spec.name
    } else {
        &spec.plural
    }
}

pub fn render_captions(cfg: &WorldConfig, scene: &Scene) -> Vec<String> {
    let spec = &cfg.categories[scene.category];
    let noun = plural_word(spec, scene.count);
    let setting = &cfg.settings[scene.setting];
    let ci = scene.count as usize - 1;
    let p = scene.has_person;
    vec![
        format!(
            "{} {noun} in a {setting}{}.",
            COUNT_ARTICLES[ci],
            if p { ", with a person" } else { "" }
        ),
        format!(
            "{} {noun} seen in a {setting}{}.",
            COUNT_ARTICLES[ci],
            if p { " near a person" } else { "" }
        ),
        format!(
            "There {} {} {noun} in the {setting}{}.",
            if scene.count == 1 { "is" } else { "are" },
            COUNT_WORDS[ci],
            if p { " with a person" } else { "" }
        ),
    ]
}

/// Forced-choice prompt over the given option nouns.
pub fn choice_question(options: &[&str]) -> String {
    format!(
        "What is in this image? Answer with one noun, chosen from [{}].",
        options.join(", ")
    )
}

fn render_qa(cfg: &WorldConfig, scene: &Scene, r: &mut rng::Rng) -> Vec<(String, String)> {
    let spec = &cfg.categories[scene.category];
    let ci = scene.count as usize - 1;
    let count_answer = if scene.count == 1 {
        format!("There is one {}.", spec.name)
    } else {
        format!("There are {} {}.", COUNT_WORDS[ci], spec.plural)
    };
    let person_answer = if scene.has_person {
        "Yes, there is a person.".to_string()
    } else {
        "No, there is no person.".to_string()
    };
    let mut qa = vec![
        (format!("How many {} are there?", spec.plural), count_answer),
        ("Is there a person in this image?".to_string(), person_answer),
        (
            "Where was this picture taken?".to_string(),
            format!("In a {}.", cfg.settings[scene.setting]),
        ),
    ];
    if cfg.categories.len() >= 3 {
        let group = spec.group;
        let mut siblings: Vec<usize> = (0..cfg.categories.len())
            .filter(|&i| i != scene.category && cfg.categories[i].group == group)
            .collect();
        let mut outsiders: Vec<usize> = (0..cfg.categories.len())
            .filter(|&i| cfg.categories[i].group != group)
            .collect();
        let near_miss = r.random::<f64>() < cfg.choice_near_miss_rate;
        let (answer, mut opts) = if near_miss && !siblings.is_empty() && outsiders.len() >= 2 {
            // the closest listed noun is the right answer when the true one is absent
            siblings.shuffle(r);
            outsiders.shuffle(r);
            (siblings[0], vec![siblings[0], outsiders[0], outsiders[1]])
        } else {
            let mut others: Vec<usize> = (0..cfg.categories.len())
                .filter(|&i| i != scene.category)
                .collect();
            others.shuffle(r);
            (scene.category, vec![scene.category, others[0], others[1]])
        };
        opts.shuffle(r);
        let names: Vec<&str> = opts.iter().map(|&i| cfg.categories[i].name.as_str()).collect();
        qa.push((choice_question(&names), format!("{}.", cfg.categories[answer].name)));
    }
    qa
}

fn to_f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

fn scene_betas(cfg: &WorldConfig, lat: &Latents, scene: &Scene, noise: &mut rng::Rng) -> Vec<f64> {
    let z: Vec<f64> = (0..cfg.latent_dim)
        .map(|j| {
            lat.category[scene.category][j]
                + lat.count[scene.count as usize - 1][j]
                + lat.setting[scene.setting][j]
        })
        .collect();
    let face = cfg.face_vertices();
    let dist = Normal::new(0.0, cfg.noise_std).expect("validated noise_std");
    (0..cfg.n_vertices)
        .map(|v| {
            let mut b: f64 = lat.mixing[v].iter().zip(&z).map(|(w, zj)| w * zj).sum();
            if scene.has_person && face.contains(&v) {
                b += cfg.person_gain;
            }
            if cfg.noise_std > 0.0 {
                b += dist.sample(noise);
            }
            to_f32_grid(b)
        })
        .collect()
}

pub fn generate_world(cfg: &WorldConfig) -> Result<Dataset> {
    cfg.validate()?;
    let parcellation = Parcellation::contiguous(cfg.n_vertices, cfg.n_regions)?;
    let lat = draw_latents(cfg);
    let mut rs = rng::stream(cfg.seed, "world/scenes");
    let mut rq = rng::stream(cfg.seed, "world/qa");
    let mut rn = rng::stream(cfg.seed, "world/noise");

    let n_shared = round_half_up(cfg.shared_fraction * cfg.n_trials as f64).min(cfg.n_trials);
    let mut order: Vec<usize> = (0..cfg.n_trials).collect();
    order.shuffle(&mut rng::stream(cfg.seed, "world/shared"));
    let mut shared = vec![false; cfg.n_trials];
    for &i in &order[..n_shared] {
        shared[i] = true;
    }

    let n_set = cfg.settings.len();
    let mut trials = Vec::with_capacity(cfg.n_trials);
    for (i, is_shared) in shared.into_iter().enumerate() {
        let category = rs.random_range(0..cfg.categories.len());
        let count = rs.random_range(1..=4u8);
        let preferred = cfg
            .settings
            .iter()
            .position(|s| *s == cfg.categories[category].preferred_setting)
            .expect("validated");
        let setting = if rs.random::<f64>() < cfg.setting_affinity {
            preferred
        } else {
            rs.random_range(0..n_set)
        };
        let has_person = rs.random::<f64>() < cfg.person_rate;
        let scene = Scene {
            category,
            count,
            setting,
            has_person,
        };
        let betas = scene_betas(cfg, &lat, &scene, &mut rn);
        trials.push(Trial {
            trial_id: i as u32,
            captions: render_captions(cfg, &scene),
            qa_pairs: render_qa(cfg, &scene, &mut rq),
            scene,
            betas,
            is_shared,
        });
    }
    Ok(Dataset {
        config: cfg.clone(),
        parcellation,
        trials,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_ids: Vec<u32>,
    pub val_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
}

/// Test ids are drawn from the shared trials; the remaining shared trials form
/// the validation set and all non-shared trials are training data.
pub fn split_dataset(trials: &[Trial], test_count: usize, seed: u64) -> Result<Split> {
    let mut shared: Vec<u32> = trials.iter().filter(|t| t.is_shared).map(|t| t.trial_id).collect();
    let needed = test_count + 1;
    if shared.len() < needed {
        return Err(Error::InsufficientShared {
            required: needed,
            available: shared.len(),
        });
    }
    shared.shuffle(&mut rng::stream(seed, "split"));
    let mut test_ids = shared[..test_count].to_vec();
    let mut val_ids = shared[test_count..].to_vec();
    test_ids.sort_unstable();
    val_ids.sort_unstable();
    let train_ids = trials.iter().filter(|t| !t.is_shared).map(|t| t.trial_id).collect();
    Ok(Split {
        train_ids,
        val_ids,
        test_ids,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizerResult {
    pub t_values: Vec<f64>,
    pub n_face: usize,
    pub n_nonface: usize,
    /// Vertices whose statistic was forced to zero (degenerate group or variance).
    pub degenerate_vertices: usize,
}

/// Per-vertex Welch t contrasting person vs. no-person trials.
pub fn localizer_ttest<'a, I>(trials: I) -> LocalizerResult
where
    I: IntoIterator<Item = &'a Trial>,
{
    let trials: Vec<&Trial> = trials.into_iter().collect();
    let n_vertices = trials.first().map_or(0, |t| t.betas.len());
    let (face, other): (Vec<&Trial>, Vec<&Trial>) =
        trials.iter().partition(|t| t.scene.has_person);
    let (n1, n2) = (face.len(), other.len());
    if n1 < 2 || n2 < 2 {
        log::warn!("localizer: degenerate groups ({n1} face, {n2} non-face); t set to 0");
        return LocalizerResult {
            t_values: vec![0.0; n_vertices],
            n_face: n1,
            n_nonface: n2,
            degenerate_vertices: n_vertices,
        };
    }
    let moments = |group: &[&Trial]| -> (Vec<f64>, Vec<f64>) {
        let n = group.len() as f64;
        let mut mean = vec![0.0; n_vertices];
        for t in group {
            for (m, b) in mean.iter_mut().zip(&t.betas) {
                *m += b;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; n_vertices];
        for t in group {
            for ((s, b), m) in var.iter_mut().zip(&t.betas).zip(&mean) {
                *s += (b - m) * (b - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n - 1.0);
        (mean, var)
    };
    let (m1, v1) = moments(&face);
    let (m2, v2) = moments(&other);
    let mut degenerate = 0;
    let t_values = (0..n_vertices)
        .map(|v| {
            let se2 = v1[v] / n1 as f64 + v2[v] / n2 as f64;
            if se2 <= 0.0 {
                degenerate += 1;
                0.0
            } else {
                (m1[v] - m2[v]) / se2.sqrt()
            }
        })
        .collect();
    if degenerate > 0 {
        log::warn!("localizer: {degenerate} zero-variance vertices set to t = 0");
    }
    LocalizerResult {
        t_values,
        n_face: n1,
        n_nonface: n2,
        degenerate_vertices: degenerate,
    }
}

/// Splits a beta vector into per-region vectors, in region order.
pub fn parcellate(betas: &[f64], parcellation: &Parcellation) -> Result<Vec<Vec<f64>>> {
    if betas.len() != parcellation.n_vertices {
        return Err(Error::Shape(format!(
            "betas length {} != parcellation n_vertices {}",
            betas.len(),
            parcellation.n_vertices
        )));
    }
    Ok(parcellation
        .regions
        .iter()
        .map(|r| r.iter().map(|&v| betas[v]).collect())
        .collect())
}

// ---------------------------------------------------------------------------
// Serialization: one JSON header line, then one JSON line per trial with the
// betas as base64-encoded little-endian f32.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    parcellation: Parcellation,
    config: WorldConfig,
    n_trials: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrialRecord {
    trial_id: u32,
    scene: Scene,
    captions: Vec<String>,
    qa_pairs: Vec<(String, String)>,
    is_shared: bool,
    betas_f32le_b64: String,
}

pub fn encode_f32le(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn decode_f32le(text: &str) -> Result<Vec<f64>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(text)
        .map_err(|e| Error::Format(format!("base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format("f32 payload length not a multiple of 4".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

impl Dataset {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            parcellation: self.parcellation.clone(),
            config: self.config.clone(),
            n_trials: self.trials.len(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for t in &self.trials {
            let rec = TrialRecord {
                trial_id: t.trial_id,
                scene: t.scene.clone(),
                captions: t.captions.clone(),
                qa_pairs: t.qa_pairs.clone(),
                is_shared: t.is_shared,
                betas_f32le_b64: encode_f32le(&t.betas),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_jsonl(&mut out).expect("in-memory write");
        out
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty dataset file".into()))??;
        let header: Header = serde_json::from_str(&first)?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset format {} v{}",
                header.format, header.version
            )));
        }
        header.parcellation.validate()?;
        let mut trials = Vec::with_capacity(header.n_trials);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TrialRecord = serde_json::from_str(&line)?;
            let betas = decode_f32le(&rec.betas_f32le_b64)?;
            if betas.len() != header.parcellation.n_vertices {
                return Err(Error::Format(format!(
                    "trial {}: {} betas, expected {}",
                    rec.trial_id,
                    betas.len(),
                    header.parcellation.n_vertices
                )));
            }
            trials.push(Trial {
                trial_id: rec.trial_id,
                scene: rec.scene,
                betas,
                captions: rec.captions,
                qa_pairs: rec.qa_pairs,
                is_shared: rec.is_shared,
            });
        }
        if trials.len() != header.n_trials {
            return Err(Error::Format(format!(
                "header announces {} trials, found {}",
                header.n_trials,
                trials.len()
            )));
        }
        Ok(Self {
            config: header.config,
            parcellation: header.parcellation,
            trials,
        })
    }
}
