//! Toy text conditioning: a learned token table plus learned positions.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::params::{Init, ParamBuilder, ParamStore};
use crate::unet::Context;

/// Unconditional token; a context made only of it is the classifier-free null condition.
pub const NULL_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const UNK_ID: u32 = 2;

const MASKED: f64 = -1e9;

/// One prompt's conditioning, `embedding: [context_len, context_dim]`.
#[derive(Debug, Clone)]
pub struct Condition {
    pub tokens: Vec<u32>,
    pub embedding: Tensor,
    pub null_flag: bool,
}

impl Condition {
    fn key_bias(&self) -> Option<Vec<f64>> {
        self.tokens
            .iter()
            .any(|&t| t == PAD_ID)
            .then(|| self.tokens.iter().map(|&t| if t == PAD_ID { MASKED } else { 0.0 }).collect())
    }

    /// Stacks conditions into a batched [`Context`].
    pub fn stack(conds: &[Condition]) -> Result<Context> {
        let first = conds.first().ok_or_else(|| Error::Domain("empty condition batch".into()))?;
        let rows: Vec<&Tensor> = conds.iter().map(|c| &c.embedding).collect();
        let embedding = Tensor::stack(&rows, 0)?;
        let len = first.tokens.len();
        let key_bias = if conds.iter().any(|c| c.key_bias().is_some()) {
            let mut data = Vec::with_capacity(conds.len() * len);
            for c in conds {
                data.extend(c.key_bias().unwrap_or_else(|| vec![0.0; len]));
            }
            Some(
                Tensor::from_vec(data, (conds.len(), 1, 1, len), first.embedding.device())?
                    .to_dtype(first.embedding.dtype())?,
            )
        } else {
            None
        };
        Ok(Context { embedding, key_bias })
    }

    /// The same condition repeated `n` times.
    pub fn repeat(&self, n: usize) -> Result<Context> {
        Condition::stack(&vec![self.clone(); n])
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    params: ParamStore,
    token_embedding: Tensor,
    position_embedding: Tensor,
    vocab_size: usize,
    context_len: usize,
    dim: usize,
}

impl TextEncoder {
    pub fn build(vocab_size: usize, context_len: usize, dim: usize, seed: u64) -> Result<Self> {
        Self::build_on(vocab_size, context_len, dim, seed, &Device::Cpu, DType::F32)
    }

    pub fn build_on(vocab_size: usize, context_len: usize, dim: usize, seed: u64, device: &Device, dtype: DType) -> Result<Self> {
        if vocab_size <= UNK_ID as usize {
            return Err(Error::config(format!("vocabulary of {vocab_size} leaves no room for reserved tokens")));
        }
        let mut params = ParamStore::new(device.clone(), dtype);
        let mut pb = ParamBuilder::new(&mut params, seed);
        let mut pb = pb.push("text");
        let token_embedding = pb.var("token_embedding", &[vocab_size, dim], Init::Uniform(1.0))?;
        let position_embedding = pb.var("position_embedding", &[context_len, dim], Init::Uniform(0.1))?;
        Ok(Self { params, token_embedding, position_embedding, vocab_size, context_len, dim })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Pads (with `PAD_ID`) or truncates to `context_len` and embeds.
    pub fn condition(&self, tokens: &[u32]) -> Result<Condition> {
        let mut ids: Vec<u32> = tokens.iter().take(self.context_len).copied().collect();
        if let Some(bad) = ids.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Domain(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        ids.resize(self.context_len, PAD_ID);
        let index = Tensor::from_vec(ids.clone(), self.context_len, self.params.device())?;
        let embedding = (self.token_embedding.index_select(&index, 0)? + &self.position_embedding)?;
        let null_flag = ids.iter().all(|&t| t == NULL_ID);
        Ok(Condition { tokens: ids, embedding, null_flag })
    }

    pub fn null_condition(&self) -> Result<Condition> {
        self.condition(&vec![NULL_ID; self.context_len])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Archive::from_store(&self.params)?.write(path)
    }

    pub fn load(&self, path: impl AsRef<Path>) -> Result<()> {
        Archive::read(path)?.load_into(&self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_condition_is_flagged_and_unmasked() {
        let enc = TextEncoder::build(10, 4, 6, 0).unwrap();
        let null = enc.null_condition().unwrap();
        assert!(null.null_flag);
        assert_eq!(null.embedding.dims(), &[4, 6]);
        let ctx = Condition::stack(&[null]).unwrap();
        assert!(ctx.key_bias.is_none());
    }

    #[test]
    fn padding_is_masked_and_truncation_applies() {
        let enc = TextEncoder::build(10, 4, 6, 0).unwrap();
        let c = enc.condition(&[5]).unwrap();
        assert_eq!(c.tokens, vec![5, PAD_ID, PAD_ID, PAD_ID]);
        let ctx = Condition::stack(&[c, enc.null_condition().unwrap()]).unwrap();
        let bias = ctx.key_bias.unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(&bias[..4], &[0.0, -1e9, -1e9, -1e9]);
        assert_eq!(&bias[4..], &[0.0; 4]);
        assert_eq!(enc.condition(&[3, 4, 5, 6, 7, 8]).unwrap().tokens.len(), 4);
        assert!(enc.condition(&[11]).is_err());
    }
}
