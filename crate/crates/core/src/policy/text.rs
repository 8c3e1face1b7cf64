use crate::error::{Error, Result};
use crate::numcore::{BlockDims, ParamId, ParamStore, SelfAttentionBlock, SelfAttentionBlockCache, Tensor};
use crate::rng::SplitMix64;
use crate::synthworld::MAX_INSTRUCTION_LEN;

/// Sinusoidal encoding of a token position.
pub fn token_position_encoding(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 / rate;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// Token embedding plus position, through self-attention layers.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub layers: Vec<SelfAttentionBlock>,
    pub vocab_size: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct TextCache {
    tokens: Vec<usize>,
    layers: Vec<SelfAttentionBlockCache>,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        dims: BlockDims,
        num_layers: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let embedding = store.register_uniform(&format!("{name}.embed"), &[vocab_size, dims.dim], 1.0, rng)?;
        let layers = (0..num_layers)
            .map(|l| SelfAttentionBlock::new(store, &format!("{name}.layer{l}"), dims, rng))
            .collect::<Result<_>>()?;
        Ok(Self { embedding, layers, vocab_size, dim: dims.dim })
    }

    /// Contextual embeddings `[L × D]`.
    pub fn forward(&self, store: &ParamStore, tokens: &[usize]) -> Result<(Tensor, TextCache)> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("instruction has no tokens".into()));
        }
        if tokens.len() > MAX_INSTRUCTION_LEN {
            return Err(Error::InvalidArgument(format!("{} tokens exceed {MAX_INSTRUCTION_LEN}", tokens.len())));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::OutOfRange(format!("token {t} outside vocabulary of {}", self.vocab_size)));
        }
        let table = store.value(self.embedding);
        let mut x = Tensor::zeros(&[tokens.len(), self.dim]);
        for (l, &t) in tokens.iter().enumerate() {
            let pe = token_position_encoding(l, self.dim);
            for ((o, e), p) in x.row_mut(l).iter_mut().zip(table.row(t)).zip(pe) {
                *o = e + p;
            }
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward(store, &x)?;
            caches.push(c);
            x = y;
        }
        Ok((x, TextCache { tokens: tokens.to_vec(), layers: caches }))
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &TextCache, dx: &Tensor) -> Result<()> {
        let mut d = dx.clone();
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            d = layer.backward(store, c, &d)?;
        }
        let mut dtable = vec![0.0; self.vocab_size * self.dim];
        for (l, &t) in cache.tokens.iter().enumerate() {
            for (a, b) in dtable[t * self.dim..(t + 1) * self.dim].iter_mut().zip(d.row(l)) {
                *a += b;
            }
        }
        store.accumulate(self.embedding, &dtable);
        Ok(())
    }
}
