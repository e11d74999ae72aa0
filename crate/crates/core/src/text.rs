//! Closed-vocabulary text encoder: a trainable token-embedding bag pooled
//! into a fixed number of context slots.

use candle_core::{DType, Device, Tensor};
use candle_nn::{Init, VarBuilder};

use crate::error::Result;

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Every word the synthetic caption grammar can emit, plus padding and unknown.
pub const VOCAB: &[&str] = &[
    "<pad>", "<unk>", "a", "and", "on", "background", "moving", "resting", "small", "large", "red",
    "green", "blue", "yellow", "purple", "cyan", "orange", "circle", "square", "triangle", "left",
    "right", "up", "down", "black", "gray", "silver", "white", "navy", "brown",
];

pub fn token_id(word: &str) -> usize {
    VOCAB.iter().position(|w| *w == word).unwrap_or(UNK)
}

/// Lowercase, split on anything that is not a letter or digit.
pub fn tokenize(prompt: &str) -> Vec<usize> {
    prompt
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(token_id)
        .collect()
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    embedding: Tensor,
    slot_pos: Tensor,
    slots: usize,
    dim: usize,
}

impl TextEncoder {
    pub fn new(slots: usize, dim: usize, vb: VarBuilder) -> Result<Self> {
        let embedding = vb.get_with_hints((VOCAB.len(), dim), "embedding", Init::Randn { mean: 0.0, stdev: 1.0 })?;
        let slot_pos = vb.get_with_hints((slots, dim), "slot_pos", Init::Randn { mean: 0.0, stdev: 0.1 })?;
        Ok(Self {
            embedding,
            slot_pos,
            slots,
            dim,
        })
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Pooling weights `[K, V]` for one prompt: token `p` lands in slot
    /// `p mod K`; slots average their tokens; empty slots hold `<pad>`.
    fn pooling_row(&self, prompt: &str) -> Vec<f32> {
        let v = VOCAB.len();
        let mut m = vec![0f32; self.slots * v];
        let mut counts = vec![0usize; self.slots];
        let tokens = tokenize(prompt);
        for (p, &tok) in tokens.iter().enumerate() {
            let s = p % self.slots;
            m[s * v + tok] += 1.0;
            counts[s] += 1;
        }
        for (s, &c) in counts.iter().enumerate() {
            if c == 0 {
                m[s * v + PAD] = 1.0;
            } else {
                for x in &mut m[s * v..(s + 1) * v] {
                    *x /= c as f32;
                }
            }
        }
        m
    }

    /// Context tokens `[B, K, D]`. The empty prompt is the unconditional context.
    pub fn encode<S: AsRef<str>>(&self, prompts: &[S]) -> Result<Tensor> {
        let dev: &Device = self.embedding.device();
        let dtype: DType = self.embedding.dtype();
        let rows: Vec<f32> = prompts.iter().flat_map(|p| self.pooling_row(p.as_ref())).collect();
        let pool = Tensor::from_vec(rows, (prompts.len(), self.slots, VOCAB.len()), dev)?.to_dtype(dtype)?;
        let emb = self.embedding.unsqueeze(0)?.broadcast_as((prompts.len(), VOCAB.len(), self.dim))?;
        Ok(pool.matmul(&emb.contiguous()?)?.broadcast_add(&self.slot_pos)?)
    }

    pub fn null_context(&self, batch: usize) -> Result<Tensor> {
        self.encode(&vec![""; batch])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn tokenizer_maps_unknowns() {
        assert_eq!(tokenize("A  red, circle!"), vec![2, 10, 17]);
        assert_eq!(tokenize("a windmill"), vec![2, UNK]);
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn context_shape_and_null() {
        let ps = ParamStore::new(0);
        let enc = TextEncoder::new(8, 64, ps.builder(DType::F32, &Device::Cpu)).unwrap();
        let ctx = enc.encode(&["a red circle", "a large blue square moving left on a gray background"]).unwrap();
        assert_eq!(ctx.dims(), &[2, 8, 64]);
        let a = enc.null_context(1).unwrap();
        let b = enc.encode(&[""]).unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }
}
