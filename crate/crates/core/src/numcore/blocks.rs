//! Residual transformer sublayers (post-norm) and the blocks built from them.

use crate::error::Result;
use crate::numcore::attention::{AttentionCache, MultiHeadAttention};
use crate::numcore::layers::{Ffn, FfnCache, LayerNorm, LayerNormCache};
use crate::numcore::{ParamStore, Tensor};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDims {
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
}

/// `LN(x + Attn(x, context))`.
#[derive(Debug, Clone)]
pub struct AttentionSublayer {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct AttentionSublayerCache {
    pub attn: AttentionCache,
    norm: LayerNormCache,
}

impl AttentionSublayer {
    pub fn new(store: &mut ParamStore, name: &str, d: BlockDims, rng: &mut SplitMix64) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d.dim, d.heads, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.ln"), d.dim)?,
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        context: &Tensor,
    ) -> Result<(Tensor, AttentionSublayerCache)> {
        let (a, attn) = self.attn.forward(store, x, context)?;
        let (y, norm) = self.norm.forward(store, &a)?;
        Ok((y, AttentionSublayerCache { attn, norm }))
    }

    /// [`Self::forward`] with a constant additive attention-logit bias.
    pub fn forward_biased(
        &self,
        store: &ParamStore,
        x: &Tensor,
        context: &Tensor,
        bias: &Tensor,
    ) -> Result<(Tensor, AttentionSublayerCache)> {
        let (a, attn) = self.attn.forward_biased(store, x, context, bias)?;
        let (y, norm) = self.norm.forward(store, &a)?;
        Ok((y, AttentionSublayerCache { attn, norm }))
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &AttentionSublayerCache,
        dy: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let da = self.norm.backward(store, &cache.norm, dy)?;
        self.attn.backward(store, &cache.attn, &da)
    }

    pub fn backward_with_weight_grad(
        &self,
        store: &mut ParamStore,
        cache: &AttentionSublayerCache,
        dy: &Tensor,
        dweights: Option<&[Vec<f64>]>,
    ) -> Result<(Tensor, Tensor)> {
        let da = self.norm.backward(store, &cache.norm, dy)?;
        self.attn.backward_with_weight_grad(store, &cache.attn, &da, dweights)
    }
}

/// `LN(x + FFN(x))`.
#[derive(Debug, Clone)]
pub struct FfnSublayer {
    pub ffn: Ffn,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct FfnSublayerCache {
    ffn: FfnCache,
    norm: LayerNormCache,
}

impl FfnSublayer {
    pub fn new(store: &mut ParamStore, name: &str, d: BlockDims, rng: &mut SplitMix64) -> Result<Self> {
        Ok(Self {
            ffn: Ffn::new(store, &format!("{name}.ffn"), d.dim, d.hidden, d.dim, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.ln"), d.dim)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, FfnSublayerCache)> {
        let (f, ffn) = self.ffn.forward(store, x)?;
        let (y, norm) = self.norm.forward(store, &x.add(&f)?)?;
        Ok((y, FfnSublayerCache { ffn, norm }))
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &FfnSublayerCache, dy: &Tensor) -> Result<Tensor> {
        let ds = self.norm.backward(store, &cache.norm, dy)?;
        let mut dx = self.ffn.backward(store, &cache.ffn, &ds)?;
        dx.add_assign(&ds)?;
        Ok(dx)
    }
}

/// Self-attention sublayer followed by a feed-forward sublayer.
#[derive(Debug, Clone)]
pub struct SelfAttentionBlock {
    pub attn: AttentionSublayer,
    pub ffn: FfnSublayer,
}

#[derive(Debug, Clone)]
pub struct SelfAttentionBlockCache {
    attn: AttentionSublayerCache,
    ffn: FfnSublayerCache,
}

impl SelfAttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: BlockDims, rng: &mut SplitMix64) -> Result<Self> {
        Ok(Self {
            attn: AttentionSublayer::new(store, &format!("{name}.self"), d, rng)?,
            ffn: FfnSublayer::new(store, &format!("{name}.out"), d, rng)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, SelfAttentionBlockCache)> {
        let (h, attn) = self.attn.forward(store, x, x)?;
        let (y, ffn) = self.ffn.forward(store, &h)?;
        Ok((y, SelfAttentionBlockCache { attn, ffn }))
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &SelfAttentionBlockCache,
        dy: &Tensor,
    ) -> Result<Tensor> {
        let dh = self.ffn.backward(store, &cache.ffn, dy)?;
        let (mut dq, dkv) = self.attn.backward(store, &cache.attn, &dh)?;
        dq.add_assign(&dkv)?;
        Ok(dq)
    }
}

/// Cross-attention sublayer followed by a feed-forward sublayer.
#[derive(Debug, Clone)]
pub struct CrossAttentionLayer {
    pub attn: AttentionSublayer,
    pub ffn: FfnSublayer,
}

#[derive(Debug, Clone)]
pub struct CrossAttentionLayerCache {
    pub attn: AttentionSublayerCache,
    ffn: FfnSublayerCache,
}

impl CrossAttentionLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: BlockDims, rng: &mut SplitMix64) -> Result<Self> {
        Ok(Self {
            attn: AttentionSublayer::new(store, &format!("{name}.cross"), d, rng)?,
            ffn: FfnSublayer::new(store, &format!("{name}.out"), d, rng)?,
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        context: &Tensor,
    ) -> Result<(Tensor, CrossAttentionLayerCache)> {
        let (h, attn) = self.attn.forward(store, x, context)?;
        let (y, ffn) = self.ffn.forward(store, &h)?;
        Ok((y, CrossAttentionLayerCache { attn, ffn }))
    }

    /// [`Self::forward`] with a constant additive attention-logit bias.
    pub fn forward_biased(
        &self,
        store: &ParamStore,
        x: &Tensor,
        context: &Tensor,
        bias: &Tensor,
    ) -> Result<(Tensor, CrossAttentionLayerCache)> {
        let (h, attn) = self.attn.forward_biased(store, x, context, bias)?;
        let (y, ffn) = self.ffn.forward(store, &h)?;
        Ok((y, CrossAttentionLayerCache { attn, ffn }))
    }

    /// Returns `(dL/dx, dL/dcontext)`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &CrossAttentionLayerCache,
        dy: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        self.backward_with_weight_grad(store, cache, dy, None)
    }

    /// [`Self::backward`] with an extra gradient on the cross-attention weights.
    pub fn backward_with_weight_grad(
        &self,
        store: &mut ParamStore,
        cache: &CrossAttentionLayerCache,
        dy: &Tensor,
        dweights: Option<&[Vec<f64>]>,
    ) -> Result<(Tensor, Tensor)> {
        let dh = self.ffn.backward(store, &cache.ffn, dy)?;
        self.attn.backward_with_weight_grad(store, &cache.attn, &dh, dweights)
    }
}

/// Cross-modal layer: attend to the other modality, then to itself, then FFN.
#[derive(Debug, Clone)]
pub struct CrossModalLayer {
    pub cross: AttentionSublayer,
    pub own: AttentionSublayer,
    pub ffn: FfnSublayer,
}

#[derive(Debug, Clone)]
pub struct CrossModalLayerCache {
    cross: AttentionSublayerCache,
    own: AttentionSublayerCache,
    ffn: FfnSublayerCache,
}

impl CrossModalLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: BlockDims, rng: &mut SplitMix64) -> Result<Self> {
        Ok(Self {
            cross: AttentionSublayer::new(store, &format!("{name}.cross"), d, rng)?,
            own: AttentionSublayer::new(store, &format!("{name}.self"), d, rng)?,
            ffn: FfnSublayer::new(store, &format!("{name}.out"), d, rng)?,
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        context: &Tensor,
    ) -> Result<(Tensor, CrossModalLayerCache)> {
        let (h1, cross) = self.cross.forward(store, x, context)?;
        let (h2, own) = self.own.forward(store, &h1, &h1)?;
        let (y, ffn) = self.ffn.forward(store, &h2)?;
        Ok((y, CrossModalLayerCache { cross, own, ffn }))
    }

    /// Returns `(dL/dx, dL/dcontext)`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &CrossModalLayerCache,
        dy: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let dh2 = self.ffn.backward(store, &cache.ffn, dy)?;
        let (mut dh1, dkv) = self.own.backward(store, &cache.own, &dh2)?;
        dh1.add_assign(&dkv)?;
        self.cross.backward(store, &cache.cross, &dh1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> BlockDims {
        BlockDims { dim: 8, heads: 2, hidden: 16 }
    }

    #[test]
    fn self_block_is_permutation_equivariant() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(5);
        let block = SelfAttentionBlock::new(&mut store, "b", dims(), &mut rng).unwrap();
        let x = Tensor::from_vec(&[4, 8], (0..32).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let perm = [2usize, 0, 3, 1];
        let (y, _) = block.forward(&store, &x).unwrap();
        let (yp, _) = block.forward(&store, &x.gather_rows(&perm)).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            for (a, b) in yp.row(r).iter().zip(y.row(src)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_row_is_finite_and_shape_preserving() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(6);
        let block = SelfAttentionBlock::new(&mut store, "b", dims(), &mut rng).unwrap();
        let x = Tensor::from_vec(&[1, 8], vec![0.3; 8]).unwrap();
        let (y, _) = block.forward(&store, &x).unwrap();
        assert_eq!(y.shape(), &[1, 8]);
        assert!(y.is_finite());
    }
}
