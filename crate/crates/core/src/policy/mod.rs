//! Cross-modal scoring and action selection over the scene graph.

mod pooling;
mod scorers;
mod text;

use serde::{Deserialize, Serialize};

pub use pooling::{
    fuse_scores, gaussian_weights, lift_backtrack, pool_grid_to_candidates, BackSource, CandidatePooling,
    GaussianPoolConfig, Lifted,
};
pub use scorers::{GraphScorer, GraphScorerCache, GridScorer, GridScorerCache};
pub use text::{token_position_encoding, TextCache, TextEncoder};

use crate::bevtransform::BevFeature;
use crate::error::{Error, Result};
use crate::numcore::{softmax, BlockDims, ParamId, ParamStore, Tensor};
use crate::rng::SplitMix64;
use crate::scenegraph::{grid_neighborhood, register_stop_embedding, SceneGraph, DEFAULT_NEIGHBORHOOD};
use crate::synthworld::Vocabulary;

/// Parameter-name prefix of the policy.
pub const POLICY_PREFIX: &str = "policy";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub text_layers: usize,
    pub vocab_size: usize,
    /// `W_f`: weight of the lifted grid branch in the fused score.
    pub fusion_weight: f64,
    /// Cells per grid neighborhood.
    pub neighborhood: usize,
    pub pool: GaussianPoolConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            hidden: 64,
            text_layers: 1,
            vocab_size: Vocabulary::default().len(),
            fusion_weight: 0.5,
            neighborhood: DEFAULT_NEIGHBORHOOD,
            pool: GaussianPoolConfig::default(),
        }
    }
}

impl PolicyConfig {
    pub fn dims(&self) -> BlockDims {
        BlockDims { dim: self.dim, heads: self.heads, hidden: self.hidden }
    }
}

/// All scores of one decision step. Global vectors list the known nodes in
/// id order with stop last; candidate vectors list the candidates with stop
/// last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub node_ids: Vec<usize>,
    pub candidates: Vec<usize>,
    pub graph: Vec<f64>,
    pub grid: Vec<f64>,
    pub candidate: Vec<f64>,
    pub lifted: Vec<f64>,
    pub fused: Vec<f64>,
    /// Selectable entries: everything but the current node.
    pub valid: Vec<bool>,
}

impl ScoreSet {
    pub fn stop_index(&self) -> usize {
        self.node_ids.len()
    }

    /// Global index of a node id, or of stop for `None`.
    pub fn index_of(&self, node: Option<usize>) -> Option<usize> {
        match node {
            None => Some(self.stop_index()),
            Some(id) => self.node_ids.binary_search(&id).ok(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepCache {
    graph: GraphScorerCache,
    grid: GridScorerCache,
    pooling: CandidatePooling,
    lifted: Lifted,
    num_cells: usize,
    fusion_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Stop,
    /// Go to `target` along `route` (current node first) in the known graph.
    Move { target: usize, route: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    /// Index into the global score vector.
    pub index: usize,
    pub action: Action,
}

/// Picks an entry of `scores.fused`. Greedy takes the first maximum (node
/// ids ascend, stop is last); sampling draws from the softmax over valid
/// entries.
pub fn select_action(scores: &ScoreSet, graph: &SceneGraph, mode: SelectMode, rng: &mut SplitMix64) -> Result<Decision> {
    let s = &scores.fused;
    if s.len() != scores.node_ids.len() + 1 || scores.valid.len() != s.len() {
        return Err(Error::shape("select_action", "fused scores do not match the node list"));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fused scores".into()));
    }
    let valid: Vec<usize> = (0..s.len()).filter(|&i| scores.valid[i]).collect();
    let index = match mode {
        SelectMode::Greedy => valid.iter().copied().fold(valid[0], |b, i| if s[i] > s[b] { i } else { b }),
        SelectMode::Sample => {
            let p = softmax(&valid.iter().map(|&i| s[i]).collect::<Vec<_>>())?;
            let u = rng.next_f64();
            let mut acc = 0.0;
            let mut pick = *valid.last().expect("stop is always valid");
            for (&i, pi) in valid.iter().zip(&p) {
                acc += pi;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        }
    };
    decision_at(scores, graph, index)
}

/// The action behind global index `index`.
pub fn decision_at(scores: &ScoreSet, graph: &SceneGraph, index: usize) -> Result<Decision> {
    if !scores.valid.get(index).copied().unwrap_or(false) {
        return Err(Error::InvalidArgument(format!("entry {index} is not selectable")));
    }
    if index == scores.stop_index() {
        return Ok(Decision { index, action: Action::Stop });
    }
    let target = scores.node_ids[index];
    let current = graph.current().ok_or_else(|| Error::InvalidArgument("graph has no current node".into()))?;
    let route = graph.route(current, target)?;
    Ok(Decision { index, action: Action::Move { target, route } })
}

/// Cross-entropy of the masked softmax over `fused` against `target`, with
/// its gradient.
pub fn action_loss(fused: &[f64], valid: &[bool], target: usize) -> Result<(f64, Vec<f64>)> {
    if !valid.get(target).copied().unwrap_or(false) {
        return Err(Error::InvalidArgument(format!("target {target} is not a selectable entry")));
    }
    let idx: Vec<usize> = (0..fused.len()).filter(|&i| valid[i]).collect();
    let p = softmax(&idx.iter().map(|&i| fused[i]).collect::<Vec<_>>())?;
    let mut grad = vec![0.0; fused.len()];
    let mut loss = 0.0;
    for (&i, &pi) in idx.iter().zip(&p) {
        grad[i] = pi;
        if i == target {
            grad[i] -= 1.0;
            loss = -pi.max(f64::MIN_POSITIVE).ln();
        }
    }
    Ok((loss, grad))
}

/// Text encoder, graph and grid scorers, and the stop-node embedding.
#[derive(Debug, Clone)]
pub struct NavPolicy {
    pub config: PolicyConfig,
    pub text: TextEncoder,
    pub graph: GraphScorer,
    pub grid: GridScorer,
    pub stop: ParamId,
}

impl NavPolicy {
    pub fn new(store: &mut ParamStore, config: PolicyConfig, rng: &mut SplitMix64) -> Result<Self> {
        let p = POLICY_PREFIX;
        let dims = config.dims();
        Ok(Self {
            config,
            text: TextEncoder::new(store, &format!("{p}.text"), config.vocab_size, dims, config.text_layers, rng)?,
            graph: GraphScorer::new(store, &format!("{p}.graph"), dims, rng)?,
            grid: GridScorer::new(store, &format!("{p}.grid"), dims, rng)?,
            stop: register_stop_embedding(store, &format!("{p}.stop"), config.dim, rng)?,
        })
    }

    pub fn new_graph(&self) -> SceneGraph {
        SceneGraph::new(self.stop, self.config.neighborhood)
    }

    pub fn encode_text(&self, store: &ParamStore, tokens: &[usize]) -> Result<(Tensor, TextCache)> {
        self.text.forward(store, tokens)
    }

    /// Scores for one step. `graph` must already hold the current BEV
    /// observation; `candidates` are node ids reachable in one move.
    pub fn step(
        &self,
        store: &ParamStore,
        graph: &SceneGraph,
        bev: &BevFeature,
        text: &Tensor,
        candidates: &[usize],
    ) -> Result<(ScoreSet, StepCache)> {
        let current = graph.current().ok_or_else(|| Error::InvalidArgument("graph has no current node".into()))?;
        let node_ids = graph.node_ids();
        let (graph_scores, graph_cache) = self.graph.forward(store, &graph.embeddings(store)?, text)?;
        let (grid_scores, grid_cache) = self.grid.forward(store, &bev.grid, text)?;

        let k = self.config.neighborhood;
        let mut neighborhoods = Vec::with_capacity(candidates.len() + 1);
        for &c in candidates {
            let node = graph.node(c).ok_or_else(|| Error::OutOfRange(format!("candidate {c} not in graph")))?;
            neighborhoods.push(grid_neighborhood(bev, node.position, k)?);
        }
        neighborhoods.push(grid_neighborhood(bev, bev.ego, k)?);
        let pooling = CandidatePooling::new(neighborhoods, &self.config.pool)?;
        let candidate_scores = pooling.pool(&grid_scores)?;
        let lifted = lift_backtrack(graph, &candidate_scores, candidates)?;
        let fused = fuse_scores(&lifted.scores, &graph_scores, self.config.fusion_weight)?;
        let mut valid = vec![true; fused.len()];
        if let Ok(i) = node_ids.binary_search(&current) {
            valid[i] = false;
        }
        let set = ScoreSet {
            node_ids,
            candidates: candidates.to_vec(),
            graph: graph_scores,
            grid: grid_scores,
            candidate: candidate_scores,
            lifted: lifted.scores.clone(),
            fused,
            valid,
        };
        let cache = StepCache {
            graph: graph_cache,
            grid: grid_cache,
            pooling,
            lifted,
            num_cells: bev.grid.rows(),
            fusion_weight: self.config.fusion_weight,
        };
        Ok((set, cache))
    }

    /// Backpropagates `dL/dfused`; returns `(dL/dtext, dL/dgrid)`. Node
    /// embeddings other than stop are treated as constants.
    pub fn step_backward(&self, store: &mut ParamStore, cache: &StepCache, dfused: &[f64]) -> Result<(Tensor, Tensor)> {
        let w = cache.fusion_weight;
        let dgraph: Vec<f64> = dfused.iter().map(|g| (1.0 - w) * g).collect();
        let dlifted: Vec<f64> = dfused.iter().map(|g| w * g).collect();
        let dcand = cache.lifted.backward(&dlifted, cache.pooling.neighborhoods.len());
        let dgrid_scores = cache.pooling.backward(&dcand, cache.num_cells);
        let (dnodes, mut dtext) = self.graph.backward(store, &cache.graph, &dgraph)?;
        store.accumulate(self.stop, dnodes.row(dnodes.rows() - 1));
        let (dgrid, dtext_grid) = self.grid.backward(store, &cache.grid, &dgrid_scores)?;
        dtext.add_assign(&dtext_grid)?;
        Ok((dtext, dgrid))
    }
}
