//! Navigation success and path-fidelity metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::synthworld::{dijkstra, Episode, WorldGraph};

/// Success radius in meters.
pub const SUCCESS_DISTANCE: f64 = 3.0;

/// Relative tolerance under which a trajectory counts as no longer than the
/// geodesic.
const LENGTH_RTOL: f64 = 1e-12;

pub const CSV_HEADER: &str = "split,SR,OSR,TL,NE,SPL,CLS,nDTW,SDTW";

/// Visited nodes in order; consecutive nodes must share an edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub nodes: Vec<usize>,
}

impl Trajectory {
    pub fn new(nodes: Vec<usize>) -> Self {
        Self { nodes }
    }

    pub fn validate(&self, world: &WorldGraph) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("empty trajectory".into()));
        }
        for &n in &self.nodes {
            world.position(n)?;
        }
        for w in self.nodes.windows(2) {
            if !world.has_edge(w[0], w[1]) {
                return Err(Error::InvalidArgument(format!("trajectory step {} -> {} is not an edge", w[0], w[1])));
            }
        }
        Ok(())
    }

    pub fn length(&self, world: &WorldGraph) -> f64 {
        self.nodes.windows(2).map(|w| world.edge_length(w[0], w[1])).sum()
    }

    pub fn positions(&self, world: &WorldGraph) -> Result<Vec<Vec3>> {
        self.nodes.iter().map(|&n| world.position(n)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub sr: f64,
    pub osr: f64,
    pub tl: f64,
    pub ne: f64,
    pub spl: f64,
    pub cls: f64,
    pub ndtw: f64,
    pub sdtw: f64,
}

impl MetricReport {
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        if reports.is_empty() {
            return MetricReport::default();
        }
        let n = reports.len() as f64;
        let sum = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        MetricReport {
            sr: sum(|r| r.sr),
            osr: sum(|r| r.osr),
            tl: sum(|r| r.tl),
            ne: sum(|r| r.ne),
            spl: sum(|r| r.spl),
            cls: sum(|r| r.cls),
            ndtw: sum(|r| r.ndtw),
            sdtw: sum(|r| r.sdtw),
        }
    }

    pub fn values(&self) -> [f64; 8] {
        [self.sr, self.osr, self.tl, self.ne, self.spl, self.cls, self.ndtw, self.sdtw]
    }

    pub fn csv_row(&self, split: &str) -> String {
        let mut s = split.to_string();
        for v in self.values() {
            let _ = write!(s, ",{v:.6}");
        }
        s
    }
}

/// Header plus one row per `(split, report)`.
pub fn metrics_csv(rows: &[(String, MetricReport)]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for (split, r) in rows {
        s.push_str(&r.csv_row(split));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessMetrics {
    pub sr: f64,
    pub osr: f64,
    pub tl: f64,
    pub ne: f64,
    pub spl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityMetrics {
    pub cls: f64,
    pub ndtw: f64,
    pub sdtw: f64,
}

fn geodesic_from(world: &WorldGraph, source: usize) -> Vec<f64> {
    let adj = world.adjacency();
    dijkstra(world.node_count(), source, |u| {
        adj[u].iter().map(|&v| (v, world.edge_length(u, v))).collect::<Vec<_>>()
    })
    .0
}

pub fn success_metrics(traj: &Trajectory, episode: &Episode, world: &WorldGraph) -> Result<SuccessMetrics> {
    traj.validate(world)?;
    let to_goal = geodesic_from(world, episode.goal);
    let start_goal = to_goal[episode.start];
    if !start_goal.is_finite() {
        return Err(Error::Unreachable(format!("goal {} from start {}", episode.goal, episode.start)));
    }
    let last = *traj.nodes.last().expect("validated non-empty");
    let ne = to_goal[last];
    let sr = if ne < SUCCESS_DISTANCE { 1.0 } else { 0.0 };
    let osr = if traj.nodes.iter().any(|&n| to_goal[n] < SUCCESS_DISTANCE) { 1.0 } else { 0.0 };
    let tl = traj.length(world);
    // Path sums in a different edge order can exceed the geodesic by an ulp.
    let spl = if tl <= start_goal * (1.0 + LENGTH_RTOL) { sr } else { sr * start_goal / tl };
    Ok(SuccessMetrics { sr, osr, tl, ne, spl })
}

fn dist(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Dynamic time warping cost between two point sequences.
pub fn dtw(query: &[Vec3], reference: &[Vec3]) -> f64 {
    let (n, m) = (query.len(), reference.len());
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            cur[j] = dist(&query[i - 1], &reference[j - 1]) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// `exp(-DTW / (|R| · d_th))`.
pub fn ndtw(query: &[Vec3], reference: &[Vec3]) -> f64 {
    (-dtw(query, reference) / (reference.len() as f64 * SUCCESS_DISTANCE)).exp()
}

/// Coverage weighted by length score.
pub fn cls(query: &[Vec3], query_length: f64, reference: &[Vec3], reference_length: f64) -> f64 {
    let pc = reference
        .iter()
        .map(|r| {
            let d = query.iter().map(|q| dist(q, r)).fold(f64::INFINITY, f64::min);
            (-d / SUCCESS_DISTANCE).exp()
        })
        .sum::<f64>()
        / reference.len() as f64;
    let expected = pc * reference_length;
    let denom = expected + (query_length - expected).abs();
    let ls = if denom > 0.0 { expected / denom } else { 1.0 };
    pc * ls
}

/// CLS, nDTW and SDTW of `traj` against `reference`; `sr` comes from
/// [`success_metrics`].
pub fn fidelity_metrics(traj: &Trajectory, reference: &[usize], world: &WorldGraph, sr: f64) -> Result<FidelityMetrics> {
    if traj.nodes.is_empty() || reference.is_empty() {
        return Err(Error::InvalidArgument("fidelity metrics need non-empty paths".into()));
    }
    let q = traj.positions(world)?;
    let reference = Trajectory::new(reference.to_vec());
    let r = reference.positions(world)?;
    let ndtw = ndtw(&q, &r);
    Ok(FidelityMetrics {
        cls: cls(&q, traj.length(world), &r, reference.length(world)),
        ndtw,
        sdtw: sr * ndtw,
    })
}

/// All metrics for one episode.
pub fn evaluate_episode(traj: &Trajectory, episode: &Episode, world: &WorldGraph) -> Result<MetricReport> {
    let s = success_metrics(traj, episode, world)?;
    let f = fidelity_metrics(traj, &episode.path, world, s.sr)?;
    Ok(MetricReport { sr: s.sr, osr: s.osr, tl: s.tl, ne: s.ne, spl: s.spl, cls: f.cls, ndtw: f.ndtw, sdtw: f.sdtw })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{generate_world, sample_episode, SizeClass};

    fn setup(seed: u64) -> (WorldGraph, Episode) {
        let world = generate_world(seed, SizeClass::Small);
        let ep = sample_episode(&world, seed).unwrap();
        (world, ep)
    }

    #[test]
    fn expert_path_scores_one() {
        for seed in 0..10 {
            let (world, ep) = setup(seed);
            let r = evaluate_episode(&Trajectory::new(ep.path.clone()), &ep, &world).unwrap();
            assert_eq!((r.sr, r.osr, r.spl, r.ne), (1.0, 1.0, 1.0, 0.0));
            assert!((r.ndtw - 1.0).abs() < 1e-12 && (r.cls - 1.0).abs() < 1e-12 && (r.sdtw - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn detour_halves_spl() {
        // Go to the goal, step back and return: length l + 2e where e = last edge.
        let (world, ep) = setup(3);
        let n = ep.path.len();
        let mut nodes = ep.path.clone();
        nodes.push(ep.path[n - 2]);
        nodes.push(ep.goal);
        let t = Trajectory::new(nodes);
        let s = success_metrics(&t, &ep, &world).unwrap();
        let l = Trajectory::new(ep.path.clone()).length(&world);
        assert!((s.spl - l / t.length(&world)).abs() < 1e-12);
    }

    #[test]
    fn empty_trajectory_rejected() {
        let (world, ep) = setup(1);
        assert!(success_metrics(&Trajectory::new(vec![]), &ep, &world).is_err());
    }

    #[test]
    fn dtw_small_cases() {
        let a = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert_eq!(dtw(&a, &a), 0.0);
        let b = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        // The middle point warps to either neighbor at cost 1.
        assert!((dtw(&a, &b) - 1.0).abs() < 1e-12);
        assert!((ndtw(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_has_fixed_columns() {
        let csv = metrics_csv(&[("val".into(), MetricReport::default())]);
        assert_eq!(csv.lines().next(), Some(CSV_HEADER));
        assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 9);
    }
}
