//! The fused model: region tokenizers feeding a decoder with optional adapters.

use serde::{Deserialize, Serialize};

use crate::dataset::{parcellate, Parcellation};
use crate::decoder::{
    assemble_prompt, forward, DecoderParams, LoraAdapters, MultimodalSequence, ParamGroup, Tensor, TensorMut,
    Vocabulary,
};
use crate::error::Result;
use crate::linalg::Mat;
use crate::tokenizer::{encode_trial, LowRankProjection, RegionTokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub vocab: Vocabulary,
    pub decoder: DecoderParams,
    pub projection: LowRankProjection,
    pub parcellation: Parcellation,
    pub tokenizers: Vec<RegionTokenizer>,
    pub lora: Option<LoraAdapters>,
    /// Token ids that generation must never emit (withheld vocabulary).
    pub banned: Vec<u32>,
}

impl FusionModel {
    pub fn brain_tokens(&self, betas: &[f64]) -> Result<Vec<Vec<f64>>> {
        let regions = parcellate(betas, &self.parcellation)?;
        encode_trial(&regions, &self.tokenizers, &self.projection)
    }

    /// Inference prompt for one trial and question text.
    pub fn prompt(&self, betas: &[f64], question: &str) -> Result<MultimodalSequence> {
        let tokens = self.brain_tokens(betas)?;
        let q = self.vocab.tokenize(question);
        assemble_prompt(tokens, &q, None, self.decoder.config.max_seq_len)
    }

    pub fn logits(&self, seq: &MultimodalSequence) -> Result<Mat> {
        forward(&self.decoder, self.lora.as_ref(), seq, false, 0)
    }

    /// Every learnable tensor in canonical order: decoder, adapters, tokenizers.
    pub fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = self.decoder.tensors();
        if let Some(l) = &self.lora {
            out.extend(l.tensors());
        }
        out.extend(tokenizer_tensors(&self.tokenizers));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = self.decoder.tensors_mut();
        if let Some(l) = &mut self.lora {
            out.extend(l.tensors_mut());
        }
        out.extend(tokenizer_tensors_mut(&mut self.tokenizers));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

pub fn tokenizer_tensors(tokenizers: &[RegionTokenizer]) -> Vec<Tensor<'_>> {
    let mut out = Vec::with_capacity(tokenizers.len() * 4);
    for (i, t) in tokenizers.iter().enumerate() {
        out.push(Tensor {
            name: format!("tokenizer.{i}.w1"),
            group: ParamGroup::TokenizerWeight,
            shape: vec![t.w1.rows, t.w1.cols],
            data: &t.w1.data,
        });
        out.push(Tensor {
            name: format!("tokenizer.{i}.b1"),
            group: ParamGroup::TokenizerBias,
            shape: vec![t.b1.len()],
            data: &t.b1,
        });
        out.push(Tensor {
            name: format!("tokenizer.{i}.w2"),
            group: ParamGroup::TokenizerWeight,
            shape: vec![t.w2.rows, t.w2.cols],
            data: &t.w2.data,
        });
        out.push(Tensor {
            name: format!("tokenizer.{i}.b2"),
            group: ParamGroup::TokenizerBias,
            shape: vec![t.b2.len()],
            data: &t.b2,
        });
    }
    out
}

pub fn tokenizer_tensors_mut(tokenizers: &mut [RegionTokenizer]) -> Vec<TensorMut<'_>> {
    let mut out = Vec::with_capacity(tokenizers.len() * 4);
    for (i, t) in tokenizers.iter_mut().enumerate() {
        out.push(TensorMut {
            name: format!("tokenizer.{i}.w1"),
            group: ParamGroup::TokenizerWeight,
            shape: vec![t.w1.rows, t.w1.cols],
            data: &mut t.w1.data,
        });
        out.push(TensorMut {
            name: format!("tokenizer.{i}.b1"),
            group: ParamGroup::TokenizerBias,
            shape: vec![t.b1.len()],
            data: &mut t.b1,
        });
        out.push(TensorMut {
            name: format!("tokenizer.{i}.w2"),
            group: ParamGroup::TokenizerWeight,
            shape: vec![t.w2.rows, t.w2.cols],
            data: &mut t.w2.data,
        });
        out.push(TensorMut {
            name: format!("tokenizer.{i}.b2"),
            group: ParamGroup::TokenizerBias,
            shape: vec![t.b2.len()],
            data: &mut t.b2,
        });
    }
    out
}
