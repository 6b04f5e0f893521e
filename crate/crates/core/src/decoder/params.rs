use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size: 0,
            max_seq_len: 160,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which optimizer settings apply to a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    TokenEmbedding,
    PositionEmbedding,
    Attention,
    Mlp,
    LayerNorm,
    LoraA,
    LoraB,
    TokenizerWeight,
    TokenizerBias,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::TokenEmbedding,
        ParamGroup::PositionEmbedding,
        ParamGroup::Attention,
        ParamGroup::Mlp,
        ParamGroup::LayerNorm,
        ParamGroup::LoraA,
        ParamGroup::LoraB,
        ParamGroup::TokenizerWeight,
        ParamGroup::TokenizerBias,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ParamGroup::TokenEmbedding => "token_embedding",
            ParamGroup::PositionEmbedding => "position_embedding",
            ParamGroup::Attention => "attention",
            ParamGroup::Mlp => "mlp",
            ParamGroup::LayerNorm => "layer_norm",
            ParamGroup::LoraA => "lora_a",
            ParamGroup::LoraB => "lora_b",
            ParamGroup::TokenizerWeight => "tokenizer_weight",
            ParamGroup::TokenizerBias => "tokenizer_bias",
        }
    }
}

/// A named view of one parameter tensor.
pub struct Tensor<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            gain: vec![0.0; d],
            bias: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNorm,
    /// D×D projections stored out×in.
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub ln2: LayerNorm,
    /// d_ff×D
    pub w_in: Mat,
    /// D×d_ff
    pub w_out: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    /// vocab×D, also the (tied) LM head.
    pub tok_emb: Mat,
    /// max_seq_len×D
    pub pos_emb: Mat,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

fn normal_mat(r: &mut rng::Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, r))
            .collect::<Vec<f64>>(),
    )
}

impl DecoderParams {
    pub fn init(config: &DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut r = rng::stream(seed, "init/decoder");
        let in_std = 0.5 / (d as f64).sqrt();
        let out_std = in_std / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = normal_mat(&mut r, config.vocab_size, d, 0.1);
        let pos_emb = normal_mat(&mut r, config.max_seq_len, d, 0.02);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1: LayerNorm::new(d),
                wq: normal_mat(&mut r, d, d, in_std),
                wk: normal_mat(&mut r, d, d, in_std),
                wv: normal_mat(&mut r, d, d, in_std),
                wo: normal_mat(&mut r, d, d, out_std),
                ln2: LayerNorm::new(d),
                w_in: normal_mat(&mut r, config.d_ff, d, in_std),
                w_out: normal_mat(&mut r, d, config.d_ff, out_std / 2.0),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            blocks,
            ln_f: LayerNorm::new(d),
        })
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let d = self.config.d_model;
        Self {
            config: self.config.clone(),
            tok_emb: self.tok_emb.zeros_like(),
            pos_emb: self.pos_emb.zeros_like(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1: LayerNorm::zeros(d),
                    wq: b.wq.zeros_like(),
                    wk: b.wk.zeros_like(),
                    wv: b.wv.zeros_like(),
                    wo: b.wo.zeros_like(),
                    ln2: LayerNorm::zeros(d),
                    w_in: b.w_in.zeros_like(),
                    w_out: b.w_out.zeros_like(),
                })
                .collect(),
            ln_f: LayerNorm::zeros(d),
        }
    }

    pub fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = Vec::new();
        fn mat(name: String, group: ParamGroup, m: &Mat) -> Tensor<'_> {
            Tensor {
                name,
                group,
                shape: vec![m.rows, m.cols],
                data: &m.data,
            }
        }
        fn vec(name: String, group: ParamGroup, v: &[f64]) -> Tensor<'_> {
            Tensor {
                name,
                group,
                shape: vec![v.len()],
                data: v,
            }
        }
        out.push(mat("tok_emb".into(), ParamGroup::TokenEmbedding, &self.tok_emb));
        out.push(mat("pos_emb".into(), ParamGroup::PositionEmbedding, &self.pos_emb));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(vec(format!("blocks.{i}.ln1.gain"), ParamGroup::LayerNorm, &b.ln1.gain));
            out.push(vec(format!("blocks.{i}.ln1.bias"), ParamGroup::LayerNorm, &b.ln1.bias));
            out.push(mat(format!("blocks.{i}.wq"), ParamGroup::Attention, &b.wq));
            out.push(mat(format!("blocks.{i}.wk"), ParamGroup::Attention, &b.wk));
            out.push(mat(format!("blocks.{i}.wv"), ParamGroup::Attention, &b.wv));
            out.push(mat(format!("blocks.{i}.wo"), ParamGroup::Attention, &b.wo));
            out.push(vec(format!("blocks.{i}.ln2.gain"), ParamGroup::LayerNorm, &b.ln2.gain));
            out.push(vec(format!("blocks.{i}.ln2.bias"), ParamGroup::LayerNorm, &b.ln2.bias));
            out.push(mat(format!("blocks.{i}.w_in"), ParamGroup::Mlp, &b.w_in));
            out.push(mat(format!("blocks.{i}.w_out"), ParamGroup::Mlp, &b.w_out));
        }
        out.push(vec("ln_f.gain".into(), ParamGroup::LayerNorm, &self.ln_f.gain));
        out.push(vec("ln_f.bias".into(), ParamGroup::LayerNorm, &self.ln_f.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        fn mat(name: String, group: ParamGroup, m: &mut Mat) -> TensorMut<'_> {
            TensorMut {
                name,
                group,
                shape: vec![m.rows, m.cols],
                data: &mut m.data,
            }
        }
        fn vec(name: String, group: ParamGroup, v: &mut [f64]) -> TensorMut<'_> {
            TensorMut {
                name,
                group,
                shape: vec![v.len()],
                data: v,
            }
        }
        out.push(mat("tok_emb".into(), ParamGroup::TokenEmbedding, &mut self.tok_emb));
        out.push(mat("pos_emb".into(), ParamGroup::PositionEmbedding, &mut self.pos_emb));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push(vec(format!("blocks.{i}.ln1.gain"), ParamGroup::LayerNorm, &mut b.ln1.gain));
            out.push(vec(format!("blocks.{i}.ln1.bias"), ParamGroup::LayerNorm, &mut b.ln1.bias));
            out.push(mat(format!("blocks.{i}.wq"), ParamGroup::Attention, &mut b.wq));
            out.push(mat(format!("blocks.{i}.wk"), ParamGroup::Attention, &mut b.wk));
            out.push(mat(format!("blocks.{i}.wv"), ParamGroup::Attention, &mut b.wv));
            out.push(mat(format!("blocks.{i}.wo"), ParamGroup::Attention, &mut b.wo));
            out.push(vec(format!("blocks.{i}.ln2.gain"), ParamGroup::LayerNorm, &mut b.ln2.gain));
            out.push(vec(format!("blocks.{i}.ln2.bias"), ParamGroup::LayerNorm, &mut b.ln2.bias));
            out.push(mat(format!("blocks.{i}.w_in"), ParamGroup::Mlp, &mut b.w_in));
            out.push(mat(format!("blocks.{i}.w_out"), ParamGroup::Mlp, &mut b.w_out));
        }
        out.push(vec("ln_f.gain".into(), ParamGroup::LayerNorm, &mut self.ln_f.gain));
        out.push(vec("ln_f.bias".into(), ParamGroup::LayerNorm, &mut self.ln_f.bias));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraPair {
    /// r×D
    pub a: Mat,
    /// D×r
    pub b: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraLayer {
    pub q: LoraPair,
    pub v: LoraPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 16.0,
            dropout: 0.05,
        }
    }
}

/// Rank-r adapters on the query and value projections of every layer.
/// Effective weight: `W + (alpha/r)·B·A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapters {
    pub config: LoraConfig,
    pub layers: Vec<LoraLayer>,
}

impl LoraAdapters {
    /// `A` Kaiming-uniform (bound `1/sqrt(D)`), `B` zero.
    pub fn init(decoder: &DecoderConfig, config: LoraConfig, seed: u64) -> Result<Self> {
        if config.rank == 0 {
            return Err(Error::Config("LoRA rank must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config("LoRA dropout must lie in [0, 1)".into()));
        }
        let d = decoder.d_model;
        let r = config.rank;
        let mut g = rng::stream(seed, "init/lora");
        let bound = 1.0 / (d as f64).sqrt();
        let pair = |g: &mut rng::Rng| LoraPair {
            a: Mat::from_vec(r, d, (0..r * d).map(|_| g.random_range(-bound..=bound)).collect()),
            b: Mat::zeros(d, r),
        };
        let layers = (0..decoder.n_layers)
            .map(|_| LoraLayer {
                q: pair(&mut g),
                v: pair(&mut g),
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn scale(&self) -> f64 {
        self.config.alpha / self.config.rank as f64
    }

    pub fn zeros_like(&self) -> Self {
        let z = |p: &LoraPair| LoraPair {
            a: p.a.zeros_like(),
            b: p.b.zeros_like(),
        };
        Self {
            config: self.config,
            layers: self
                .layers
                .iter()
                .map(|l| LoraLayer { q: z(&l.q), v: z(&l.v) })
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (which, p) in [("q", &l.q), ("v", &l.v)] {
                out.push(Tensor {
                    name: format!("lora.{i}.{which}.a"),
                    group: ParamGroup::LoraA,
                    shape: vec![p.a.rows, p.a.cols],
                    data: &p.a.data,
                });
                out.push(Tensor {
                    name: format!("lora.{i}.{which}.b"),
                    group: ParamGroup::LoraB,
                    shape: vec![p.b.rows, p.b.cols],
                    data: &p.b.data,
                });
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (which, p) in [("q", &mut l.q), ("v", &mut l.v)] {
                out.push(TensorMut {
                    name: format!("lora.{i}.{which}.a"),
                    group: ParamGroup::LoraA,
                    shape: vec![p.a.rows, p.a.cols],
                    data: &mut p.a.data,
                });
                out.push(TensorMut {
                    name: format!("lora.{i}.{which}.b"),
                    group: ParamGroup::LoraB,
                    shape: vec![p.b.rows, p.b.cols],
                    data: &mut p.b.data,
                });
            }
        }
        out
    }
}
