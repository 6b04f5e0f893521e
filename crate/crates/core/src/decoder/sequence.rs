use serde::{Deserialize, Serialize};

use super::vocab::{BOS_ID, EOS_ID, INST_CLOSE_ID, INST_OPEN_ID};
use crate::error::{Error, Result};

/// What occupies one input position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    /// Embedded vocabulary token.
    Text(u32),
    /// Index into the sequence's brain tokens.
    Brain(usize),
    /// Zero vector (only positional embedding).
    Empty,
}

/// Brain tokens and text fused into one decoder input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSequence {
    pub slots: Vec<Slot>,
    pub brain_tokens: Vec<Vec<f64>>,
    /// True exactly on answer and EOS positions.
    pub loss_mask: Vec<bool>,
}

impl MultimodalSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Text ids of the positions after the brain prefix.
    pub fn text_ids(&self) -> Vec<u32> {
        self.slots
            .iter()
            .filter_map(|s| match s {
                Slot::Text(id) => Some(*id),
                _ => None,
            })
            .collect()
    }

    pub fn push_token(&mut self, id: u32) {
        self.slots.push(Slot::Text(id));
        self.loss_mask.push(false);
    }
}

/// Layout: `BOS · prefix · INST_OPEN · question · INST_CLOSE · [answer · EOS]`.
pub fn assemble_with_prefix(
    prefix: Vec<Slot>,
    brain_tokens: Vec<Vec<f64>>,
    question: &[u32],
    answer: Option<&[u32]>,
    max_seq_len: usize,
) -> Result<MultimodalSequence> {
    let answer_len = answer.map_or(0, |a| a.len() + 1);
    let length = 1 + prefix.len() + 1 + question.len() + 1 + answer_len;
    if length > max_seq_len {
        return Err(Error::SequenceOverflow {
            length,
            max: max_seq_len,
        });
    }
    let mut slots = Vec::with_capacity(length);
    slots.push(Slot::Text(BOS_ID));
    slots.extend(prefix);
    slots.push(Slot::Text(INST_OPEN_ID));
    slots.extend(question.iter().map(|&id| Slot::Text(id)));
    slots.push(Slot::Text(INST_CLOSE_ID));
    let mut loss_mask = vec![false; slots.len()];
    if let Some(a) = answer {
        slots.extend(a.iter().map(|&id| Slot::Text(id)));
        slots.push(Slot::Text(EOS_ID));
        loss_mask.resize(slots.len(), true);
    }
    Ok(MultimodalSequence {
        slots,
        brain_tokens,
        loss_mask,
    })
}

/// Prepends one position per brain token.
pub fn assemble_prompt(
    brain_tokens: Vec<Vec<f64>>,
    question: &[u32],
    answer: Option<&[u32]>,
    max_seq_len: usize,
) -> Result<MultimodalSequence> {
    let prefix = (0..brain_tokens.len()).map(Slot::Brain).collect();
    assemble_with_prefix(prefix, brain_tokens, question, answer, max_seq_len)
}
