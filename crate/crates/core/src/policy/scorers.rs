use crate::error::{Error, Result};
use crate::numcore::{
    BlockDims, CrossAttentionLayer, CrossAttentionLayerCache, CrossModalLayer, CrossModalLayerCache, Ffn, FfnCache,
    ParamStore, Tensor,
};
use crate::rng::SplitMix64;

fn column(scores: &[f64]) -> Result<Tensor> {
    Tensor::from_vec(&[scores.len(), 1], scores.to_vec())
}

/// Node embeddings attend to the instruction, then to each other, then an
/// FFN reads one score per node.
#[derive(Debug, Clone)]
pub struct GraphScorer {
    pub layer: CrossModalLayer,
    pub head: Ffn,
}

#[derive(Debug, Clone)]
pub struct GraphScorerCache {
    layer: CrossModalLayerCache,
    head: FfnCache,
    /// Cross-modal node features before the score head.
    pub enriched: Tensor,
}

impl GraphScorer {
    pub fn new(store: &mut ParamStore, name: &str, dims: BlockDims, rng: &mut SplitMix64) -> Result<Self> {
        Ok(Self {
            layer: CrossModalLayer::new(store, &format!("{name}.xmod"), dims, rng)?,
            head: Ffn::new(store, &format!("{name}.head"), dims.dim, dims.hidden, 1, rng)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, nodes: &Tensor, text: &Tensor) -> Result<(Vec<f64>, GraphScorerCache)> {
        if nodes.rows() == 0 {
            return Err(Error::InvalidArgument("graph has no nodes".into()));
        }
        let (enriched, layer) = self.layer.forward(store, nodes, text)?;
        let (s, head) = self.head.forward(store, &enriched)?;
        Ok((s.into_data(), GraphScorerCache { layer, head, enriched }))
    }

    /// Returns `(dL/dnodes, dL/dtext)`.
    pub fn backward(&self, store: &mut ParamStore, cache: &GraphScorerCache, dscores: &[f64]) -> Result<(Tensor, Tensor)> {
        let de = self.head.backward(store, &cache.head, &column(dscores)?)?;
        self.layer.backward(store, &cache.layer, &de)
    }
}

/// BEV cells attend to the instruction, then an FFN reads one score per cell.
#[derive(Debug, Clone)]
pub struct GridScorer {
    pub layer: CrossAttentionLayer,
    pub head: Ffn,
}

#[derive(Debug, Clone)]
pub struct GridScorerCache {
    layer: CrossAttentionLayerCache,
    head: FfnCache,
}

impl GridScorer {
    pub fn new(store: &mut ParamStore, name: &str, dims: BlockDims, rng: &mut SplitMix64) -> Result<Self> {
        Ok(Self {
            layer: CrossAttentionLayer::new(store, &format!("{name}.xattn"), dims, rng)?,
            head: Ffn::new(store, &format!("{name}.head"), dims.dim, dims.hidden, 1, rng)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, grid: &Tensor, text: &Tensor) -> Result<(Vec<f64>, GridScorerCache)> {
        let (enriched, layer) = self.layer.forward(store, grid, text)?;
        let (s, head) = self.head.forward(store, &enriched)?;
        Ok((s.into_data(), GridScorerCache { layer, head }))
    }

    /// Returns `(dL/dgrid, dL/dtext)`.
    pub fn backward(&self, store: &mut ParamStore, cache: &GridScorerCache, dscores: &[f64]) -> Result<(Tensor, Tensor)> {
        let de = self.head.backward(store, &cache.head, &column(dscores)?)?;
        self.layer.backward(store, &cache.layer, &de)
    }
}
