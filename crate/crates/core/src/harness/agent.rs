use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::RwLock;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::manifest::{write_artifact, Manifest};
use crate::bevtransform::{compute_overlap, BevEncoder, BevEncoderCache, BevFeature, TemporalCache, TemporalUpdate};
use crate::detection::ENCODER_PREFIX;
use crate::error::{Error, Result};
use crate::navmetrics::{evaluate_episode, metrics_csv, MetricReport, Trajectory};
use crate::numcore::{Checkpoint, ParamStore, Tensor};
use crate::policy::{
    action_loss, decision_at, select_action, Action, NavPolicy, PolicyConfig, SelectMode, StepCache, TextCache,
};
use crate::rng::SplitMix64;
use crate::scenegraph::{GraphSnapshot, SceneGraph};
use crate::synthworld::{expert_action, render_node_views, Corpus, Episode, NavAction, WorldGraph};

/// Parameter-name prefix of the temporal BEV update.
pub const TEMPORAL_PREFIX: &str = "temporal";

const INIT_STREAM: u64 = 0xA0;
const TRAIN_CORPUS_STREAM: u64 = 0xA1;
const VAL_CORPUS_STREAM: u64 = 0xA2;
const TEST_CORPUS_STREAM: u64 = 0xA3;
const BATCH_STREAM: u64 = 0xA4;
const ROLLOUT_STREAM: u64 = 0xA5;

/// BEV encoder, temporal update and policy.
#[derive(Debug, Clone)]
pub struct Agent {
    pub encoder: BevEncoder,
    pub temporal: TemporalUpdate,
    pub policy: NavPolicy,
    pub max_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentModelConfig {
    pub detector: crate::detection::DetectorConfig,
    pub policy: PolicyConfig,
}

impl Agent {
    pub fn new(store: &mut ParamStore, cfg: &RunConfig, rng: &mut SplitMix64) -> Result<Self> {
        let det = cfg.detector_config();
        let dims = det.head.dims();
        Ok(Self {
            encoder: BevEncoder::new(store, ENCODER_PREFIX, det.bev, dims, det.refine_layers, rng)?,
            temporal: TemporalUpdate::new(store, TEMPORAL_PREFIX, dims.dim, dims.heads, rng)?,
            policy: NavPolicy::new(store, cfg.policy_config(), rng)?,
            max_steps: cfg.max_steps,
        })
    }

    pub fn model_config(&self, cfg: &RunConfig) -> AgentModelConfig {
        AgentModelConfig { detector: cfg.detector_config(), policy: self.policy.config }
    }

    fn encoder_frozen(store: &ParamStore) -> bool {
        store.ids_with_prefix(&[ENCODER_PREFIX]).iter().all(|&id| store.is_frozen(id))
    }

    fn encode_node(
        &self,
        store: &ParamStore,
        world: &WorldGraph,
        node: usize,
        step: usize,
    ) -> Result<(BevFeature, BevEncoderCache)> {
        let pos = world.position(node)?;
        let views = render_node_views(world, node, self.policy.config.dim)?;
        let cameras: Vec<_> =
            world.camera.poses(pos).into_iter().map(|p| (p, world.camera.intrinsics)).collect();
        self.encoder.encode(store, &views, &cameras, pos, step)
    }
}

/// Encoded BEV per `(world seed, node)`. Only valid while the encoder is
/// frozen.
#[derive(Debug, Default)]
pub struct BevCache {
    map: RwLock<HashMap<(u64, usize), BevFeature>>,
}

impl BevCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.read().map(|m| m.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get_or_encode(
        &self,
        store: &ParamStore,
        agent: &Agent,
        world: &WorldGraph,
        node: usize,
        step: usize,
    ) -> Result<BevFeature> {
        let key = (world.seed, node);
        if let Some(b) = self.map.read().ok().and_then(|m| m.get(&key).cloned()) {
            return Ok(BevFeature { step, ..b });
        }
        let (bev, _) = agent.encode_node(store, world, node, step)?;
        if let Ok(mut m) = self.map.write() {
            m.insert(key, bev.clone());
        }
        Ok(bev)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutMode {
    /// Follow the expert; every step is labelled.
    Teacher,
    /// Sample from the policy; every visited state is labelled by the expert.
    Student,
    Greedy,
    /// Uniform over the selectable entries.
    Random,
    /// Replay the expert without scoring losses.
    Expert,
}

/// One decision step of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub node: usize,
    /// Node ids in the order of `candidate_scores` (stop last, omitted).
    pub candidates: Vec<usize>,
    /// Known node ids in the order of the global vectors (stop last, omitted).
    pub node_ids: Vec<usize>,
    pub graph_scores: Vec<f64>,
    pub candidate_scores: Vec<f64>,
    pub lifted_scores: Vec<f64>,
    pub fused_scores: Vec<f64>,
    pub action: Action,
    pub fusion_weight: f64,
    /// Expert label as a global index, when one exists.
    pub expert: Option<usize>,
    /// The step budget ran out: the agent stops after this action.
    pub forced_stop: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub world_id: u64,
    pub start: usize,
    pub goal: usize,
    pub tokens: Vec<usize>,
    pub steps: Vec<StepRecord>,
    /// Every node the agent passed through, start first.
    pub trajectory: Vec<usize>,
    pub graph: GraphSnapshot,
    pub metrics: MetricReport,
}

/// Caches of one labelled step, kept for the backward pass.
struct StepGrad {
    step: StepCache,
    dfused: Vec<f64>,
    temporal: Option<TemporalCache>,
    encoder: Option<BevEncoderCache>,
}

pub struct Rollout {
    pub trace: EpisodeTrace,
    /// Sum of the per-step cross-entropies.
    pub loss: f64,
    pub labelled_steps: usize,
    steps: Vec<StepGrad>,
    text: Option<TextCache>,
}

/// Runs one episode. With `keep_caches`, the teacher and student modes keep
/// what [`backward`] needs.
pub fn rollout(
    store: &ParamStore,
    agent: &Agent,
    world: &WorldGraph,
    episode: &Episode,
    mode: RolloutMode,
    rng: &mut SplitMix64,
    cache: Option<&BevCache>,
    keep_caches: bool,
) -> Result<Rollout> {
    let policy = &agent.policy;
    let (text, text_cache) = policy.encode_text(store, &episode.instruction.tokens)?;
    let labelled = matches!(mode, RolloutMode::Teacher | RolloutMode::Student);
    let keep = keep_caches && labelled;
    let frozen = Agent::encoder_frozen(store);
    let keep_encoder = keep && !frozen;
    let max_steps = agent.max_steps.min(episode.max_steps).max(1);

    let mut graph: SceneGraph = policy.new_graph();
    let mut current = episode.start;
    let mut trajectory = vec![current];
    let mut prev: Option<BevFeature> = None;
    let mut records = Vec::new();
    let mut grads = Vec::new();
    let mut loss = 0.0;
    let mut labelled_steps = 0;

    for t in 0..max_steps {
        let (raw, enc_cache) = match cache {
            // Cached features are only valid while the encoder cannot change.
            Some(c) if frozen => (c.get_or_encode(store, agent, world, current, t)?, None),
            _ => {
                let (b, c) = agent.encode_node(store, world, current, t)?;
                (b, keep_encoder.then_some(c))
            }
        };
        let (bev, temporal) = match &prev {
            Some(p) => {
                let (b, c) = agent.temporal.forward(store, p, &raw, &compute_overlap(p, &raw))?;
                (b, Some(c))
            }
            None => (raw, None),
        };
        let position = world.position(current)?;
        let neighbors: Vec<(usize, [f64; 3])> =
            world.neighbors(current).into_iter().map(|n| Ok((n, world.position(n)?))).collect::<Result<_>>()?;
        graph.update(&bev, current, position, &neighbors)?;
        let candidates: Vec<usize> =
            neighbors.iter().map(|&(n, _)| n).filter(|&n| graph.has_edge(current, n)).collect();
        let (scores, step_cache) = policy.step(store, &graph, &bev, &text, &candidates)?;

        let expert = match expert_action(world, current, episode.goal)? {
            NavAction::Stop => scores.index_of(None),
            NavAction::Goto(n) => scores.index_of(Some(n)),
        }
        .filter(|&i| scores.valid[i]);

        if labelled {
            if let Some(target) = expert {
                let (l, dfused) = action_loss(&scores.fused, &scores.valid, target)?;
                if !l.is_finite() {
                    return Err(Error::Divergence(format!("agent loss {l} at step {t}")));
                }
                loss += l;
                labelled_steps += 1;
                if keep {
                    grads.push(StepGrad { step: step_cache, dfused, temporal, encoder: enc_cache });
                }
            } else if keep {
                // No label: the step still carries the temporal chain.
                let dfused = vec![0.0; scores.fused.len()];
                grads.push(StepGrad { step: step_cache, dfused, temporal, encoder: enc_cache });
            }
        }

        let decision = match mode {
            RolloutMode::Teacher | RolloutMode::Expert => match expert {
                Some(i) => decision_at(&scores, &graph, i)?,
                None => decision_at(&scores, &graph, scores.stop_index())?,
            },
            RolloutMode::Student => select_action(&scores, &graph, SelectMode::Sample, rng)?,
            RolloutMode::Greedy => select_action(&scores, &graph, SelectMode::Greedy, rng)?,
            RolloutMode::Random => {
                let valid: Vec<usize> = (0..scores.valid.len()).filter(|&i| scores.valid[i]).collect();
                decision_at(&scores, &graph, valid[rng.below(valid.len())])?
            }
        };
        let forced_stop = t + 1 == max_steps && decision.action != Action::Stop;
        records.push(StepRecord {
            t,
            node: current,
            candidates: scores.candidates.clone(),
            node_ids: scores.node_ids.clone(),
            graph_scores: scores.graph.clone(),
            candidate_scores: scores.candidate.clone(),
            lifted_scores: scores.lifted.clone(),
            fused_scores: scores.fused.clone(),
            action: decision.action.clone(),
            fusion_weight: policy.config.fusion_weight,
            expert,
            forced_stop,
        });
        match decision.action {
            Action::Stop => break,
            Action::Move { target, route } => {
                trajectory.extend_from_slice(&route[1..]);
                current = target;
                prev = Some(bev);
            }
        }
    }

    let metrics = evaluate_episode(&Trajectory::new(trajectory.clone()), episode, world)?;
    Ok(Rollout {
        trace: EpisodeTrace {
            world_id: episode.world_id,
            start: episode.start,
            goal: episode.goal,
            tokens: episode.instruction.tokens.clone(),
            steps: records,
            trajectory,
            graph: graph.snapshot(),
            metrics,
        },
        loss,
        labelled_steps,
        steps: grads,
        text: keep.then_some(text_cache),
    })
}

/// Backpropagates `scale · loss` of a rollout kept with caches.
pub fn backward(store: &mut ParamStore, agent: &Agent, rollout: &Rollout, scale: f64) -> Result<()> {
    let Some(text_cache) = &rollout.text else {
        return Err(Error::InvalidArgument("rollout was run without caches".into()));
    };
    let mut dtext: Option<Tensor> = None;
    // Gradient flowing into step t's BEV from the temporal update of step t+1.
    let mut carry: Option<Tensor> = None;
    for s in rollout.steps.iter().rev() {
        let dfused: Vec<f64> = s.dfused.iter().map(|g| g * scale).collect();
        let (dt, mut dgrid) = agent.policy.step_backward(store, &s.step, &dfused)?;
        match &mut dtext {
            Some(acc) => acc.add_assign(&dt)?,
            None => dtext = Some(dt),
        }
        if let Some(c) = carry.take() {
            dgrid.add_assign(&c)?;
        }
        let draw = match &s.temporal {
            Some(tc) => {
                let (dprev, dnext) = agent.temporal.backward(store, tc, &dgrid)?;
                carry = Some(dprev);
                dnext
            }
            None => dgrid,
        };
        if let Some(ec) = &s.encoder {
            agent.encoder.backward(store, ec, &draw)?;
        }
    }
    if let Some(dt) = dtext {
        agent.policy.text.backward(store, text_cache, &dt)?;
    }
    Ok(())
}

/// Train, validation and test corpora from disjoint seed streams.
#[derive(Debug, Clone)]
pub struct AgentCorpora {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

pub fn agent_corpora(cfg: &RunConfig) -> Result<AgentCorpora> {
    let c = &cfg.corpus;
    let make = |stream: u64, worlds: usize| {
        Corpus::generate(SplitMix64::derive(cfg.seed, stream).next_u64(), worlds, c.episodes_per_world, c.size)
    };
    Ok(AgentCorpora {
        train: make(TRAIN_CORPUS_STREAM, c.train_worlds)?,
        val: make(VAL_CORPUS_STREAM, c.val_worlds)?,
        test: make(TEST_CORPUS_STREAM, c.test_worlds)?,
    })
}

/// Builds an agent; with a detector checkpoint the BEV encoder starts from
/// it, and `cfg.freeze_bev` keeps it fixed.
pub fn new_agent(cfg: &RunConfig, detector: Option<&Checkpoint>) -> Result<(ParamStore, Agent)> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let agent = Agent::new(&mut store, cfg, &mut SplitMix64::derive(cfg.seed, INIT_STREAM))?;
    if let Some(ckpt) = detector {
        if ckpt.model_config != serde_json::to_value(cfg.detector_config())? {
            return Err(Error::Checkpoint("detector checkpoint was trained with different dims".into()));
        }
        let mut det_store = ParamStore::new();
        crate::detection::Detector::new(&mut det_store, cfg.detector_config(), &mut SplitMix64::new(0))?;
        ckpt.load_into(&mut det_store)?;
        for id in store.ids_with_prefix(&[ENCODER_PREFIX]) {
            let src = det_store
                .id(store.name(id))
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {}", store.name(id))))?;
            *store.value_mut(id) = det_store.value(src).clone();
        }
    }
    store.set_frozen(&[ENCODER_PREFIX], cfg.freeze_bev);
    Ok((store, agent))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentLogRow {
    pub iteration: usize,
    pub mode: RolloutMode,
    pub learning_rate: f64,
    /// Mean cross-entropy per labelled step.
    pub loss: f64,
    pub labelled_steps: usize,
    pub grad_norm: f64,
    pub val_sr: Option<f64>,
}

pub fn agent_log_csv(rows: &[AgentLogRow]) -> String {
    let mut s = String::from("iteration,mode,lr,loss,labelled_steps,grad_norm,val_sr\n");
    for r in rows {
        let mode = if r.mode == RolloutMode::Teacher { "tf" } else { "sf" };
        let val = r.val_sr.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{mode},{:e},{},{},{},{val}",
            r.iteration, r.learning_rate, r.loss, r.labelled_steps, r.grad_norm
        );
    }
    s
}

pub struct AgentRun {
    pub store: ParamStore,
    pub agent: Agent,
    pub log: Vec<AgentLogRow>,
    pub seconds: f64,
}

impl AgentRun {
    pub fn checkpoint(&self, cfg: &RunConfig) -> Result<Checkpoint> {
        Ok(Checkpoint::from_store(serde_json::to_value(self.agent.model_config(cfg))?, &self.store))
    }
}

/// Imitation training alternating teacher- and student-forced mini-batches.
pub fn train_agent(
    cfg: &RunConfig,
    detector: Option<&Checkpoint>,
    corpora: &AgentCorpora,
    mut on_row: impl FnMut(&AgentLogRow),
) -> Result<AgentRun> {
    let (mut store, agent) = new_agent(cfg, detector)?;
    let train = &corpora.train;
    if train.episodes.is_empty() {
        return Err(Error::InvalidArgument("empty training corpus".into()));
    }
    let cache = BevCache::new();
    let t0 = Instant::now();
    let a = &cfg.agent;
    let total = a.iterations;
    let mut batch_rng = SplitMix64::derive(cfg.seed, BATCH_STREAM);
    let mut log = Vec::with_capacity(total);
    for it in 0..total {
        let mode = if it % 2 == 0 { RolloutMode::Teacher } else { RolloutMode::Student };
        let mut rollouts = Vec::with_capacity(a.batch);
        for b in 0..a.batch {
            let e = &train.episodes[batch_rng.below(train.episodes.len())];
            let mut rng = SplitMix64::derive(cfg.seed, ROLLOUT_STREAM ^ ((it * a.batch + b) as u64) << 8);
            rollouts.push(rollout(&store, &agent, train.world(e.world_id)?, e, mode, &mut rng, Some(&cache), true)?);
        }
        let steps: usize = rollouts.iter().map(|r| r.labelled_steps).sum();
        let loss: f64 = rollouts.iter().map(|r| r.loss).sum::<f64>() / steps.max(1) as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("agent loss {loss} at iteration {}", it + 1)));
        }
        store.zero_grads();
        for r in &rollouts {
            backward(&mut store, &agent, r, 1.0 / steps.max(1) as f64)?;
        }
        let s = a.schedule;
        let grad_norm = if s.clip_norm > 0.0 { store.clip_grad_norm(s.clip_norm) } else { store.grad_norm() };
        let lr = s.lr_at(it, total);
        store.adam_step(lr)?;
        let val_sr = if (a.validate_every > 0 && (it + 1) % a.validate_every == 0) || it + 1 == total {
            Some(evaluate(&store, &agent, &corpora.val, RolloutMode::Greedy, cfg.seed, Some(&cache))?.report.sr)
        } else {
            None
        };
        let row = AgentLogRow { iteration: it + 1, mode, learning_rate: lr, loss, labelled_steps: steps, grad_norm, val_sr };
        on_row(&row);
        log.push(row);
    }
    Ok(AgentRun { store, agent, log, seconds: t0.elapsed().as_secs_f64() })
}

pub struct Evaluation {
    pub traces: Vec<EpisodeTrace>,
    pub report: MetricReport,
}

impl Evaluation {
    /// One JSON trace per line.
    pub fn traces_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for t in &self.traces {
            s.push_str(&serde_json::to_string(t)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Rolls out every episode of `corpus`, in parallel over episodes. Traces are
/// in corpus order.
pub fn evaluate(
    store: &ParamStore,
    agent: &Agent,
    corpus: &Corpus,
    mode: RolloutMode,
    seed: u64,
    cache: Option<&BevCache>,
) -> Result<Evaluation> {
    let traces = corpus
        .episodes
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let mut rng = SplitMix64::derive(seed, ROLLOUT_STREAM ^ (i as u64) << 8 ^ 0xE);
            Ok(rollout(store, agent, corpus.world(e.world_id)?, e, mode, &mut rng, cache, false)?.trace)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricReport::mean(&traces.iter().map(|t| t.metrics).collect::<Vec<_>>());
    Ok(Evaluation { traces, report })
}

/// Metrics of the same parameters under each fusion weight and each
/// neighborhood size of the sweeps.
pub fn ablation_rows(
    store: &ParamStore,
    agent: &Agent,
    corpus: &Corpus,
    cfg: &RunConfig,
) -> Result<(Vec<(String, MetricReport)>, Vec<(String, MetricReport)>)> {
    let cache = BevCache::new();
    let run = |policy: PolicyConfig| -> Result<MetricReport> {
        let mut a = agent.clone();
        a.policy.config = policy;
        Ok(evaluate(store, &a, corpus, RolloutMode::Greedy, cfg.seed, Some(&cache))?.report)
    };
    let mut fusion = Vec::new();
    for &w in &cfg.fusion_sweep {
        fusion.push((format!("fusion_weight={w}"), run(PolicyConfig { fusion_weight: w, ..agent.policy.config })?));
    }
    let mut neighborhood = Vec::new();
    for &k in &cfg.neighborhood_sweep {
        neighborhood.push((format!("neighborhood={k}"), run(PolicyConfig { neighborhood: k, ..agent.policy.config })?));
    }
    Ok((fusion, neighborhood))
}

/// Markdown comparison table with one row per configuration.
pub fn ablation_table(title: &str, rows: &[(String, MetricReport)]) -> String {
    let mut s = format!("### {title}\n\n| setting | SR | OSR | TL | NE | SPL | CLS | nDTW | SDTW |\n|---|---|---|---|---|---|---|---|---|\n");
    for (name, r) in rows {
        let _ = write!(s, "| {name} |");
        for v in r.values() {
            let _ = write!(s, " {v:.3} |");
        }
        s.push('\n');
    }
    s
}

/// Writes the training log, checkpoint and manifest of a finished run.
pub fn save_agent_run(cfg: &RunConfig, run: &AgentRun, detector: Option<&Path>, out: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out)?;
    let mut manifest = Manifest::new("train-agent", cfg)?;
    if let Some(p) = detector {
        manifest.input(p)?;
    }
    write_artifact(&mut manifest, out, "agent_log.csv", agent_log_csv(&run.log).as_bytes())?;
    write_artifact(&mut manifest, out, "agent.ckpt", &run.checkpoint(cfg)?.to_bytes())?;
    manifest.note("seconds", run.seconds);
    manifest.save(out)?;
    Ok(manifest)
}

pub fn load_agent(cfg: &RunConfig, path: &Path) -> Result<(ParamStore, Agent)> {
    let ckpt = Checkpoint::read(std::fs::File::open(path)?)?;
    let (mut store, agent) = new_agent(cfg, None)?;
    if ckpt.model_config != serde_json::to_value(agent.model_config(cfg))? {
        return Err(Error::Checkpoint("agent checkpoint does not match the configured dims".into()));
    }
    ckpt.load_into(&mut store)?;
    Ok((store, agent))
}

/// Writes `metrics.csv` and `traces.jsonl` for an evaluation.
pub fn save_evaluation(
    manifest: &mut Manifest,
    out: &Path,
    rows: &[(String, MetricReport)],
    eval: &Evaluation,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_artifact(manifest, out, "metrics.csv", metrics_csv(rows).as_bytes())?;
    write_artifact(manifest, out, "traces.jsonl", eval.traces_jsonl()?.as_bytes())?;
    Ok(())
}
