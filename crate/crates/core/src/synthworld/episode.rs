use std::path::Path;

use serde::{Deserialize, Serialize};

use super::language::{generate_instruction, goal_category, Instruction};
use super::paths::shortest_path;
use super::world::{generate_world, SizeClass, WorldGraph};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const DEFAULT_MAX_STEPS: usize = 15;
const MIN_PATH_EDGES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    /// Seed of the world the episode lives in.
    pub world_id: u64,
    pub start: usize,
    pub goal: usize,
    pub instruction: Instruction,
    pub path: Vec<usize>,
    pub max_steps: usize,
}

impl Episode {
    pub fn validate(&self, world: &WorldGraph) -> Result<()> {
        if self.path.first() != Some(&self.start) || self.path.last() != Some(&self.goal) {
            return Err(Error::InvalidArgument("episode path endpoints do not match start/goal".into()));
        }
        if self.path.windows(2).any(|p| !world.has_edge(p[0], p[1])) {
            return Err(Error::InvalidArgument("episode path uses a missing edge".into()));
        }
        if self.instruction.goal_node != self.goal {
            return Err(Error::InvalidArgument("instruction goal differs from episode goal".into()));
        }
        Ok(())
    }
}

/// Start/goal pair at least two edges apart. Goals with a nearby object of a
/// world-unique category are preferred, then any goal with a nearby object,
/// then any node.
pub fn sample_episode(world: &WorldGraph, seed: u64) -> Result<Episode> {
    let n = world.node_count();
    if n < 2 {
        return Err(Error::InvalidArgument("episode needs at least two nodes".into()));
    }
    let mut rng = SplitMix64::derive(seed, 0xE915);
    let tiers: [Box<dyn Fn(usize) -> bool>; 3] = [
        Box::new(|g| goal_category(world, g).is_some_and(|c| world.category_count(c) == 1)),
        Box::new(|g| goal_category(world, g).is_some()),
        Box::new(|_| true),
    ];
    for accept in &tiers {
        let goals: Vec<usize> = (0..n).filter(|&g| accept(g)).collect();
        let mut pairs = Vec::new();
        for &g in &goals {
            for s in 0..n {
                if s != g && shortest_path(world, s, g)?.nodes.len() > MIN_PATH_EDGES {
                    pairs.push((s, g));
                }
            }
        }
        if pairs.is_empty() {
            continue;
        }
        let (start, goal) = pairs[rng.below(pairs.len())];
        let path = shortest_path(world, start, goal)?.nodes;
        let instruction = generate_instruction(world, start, goal, rng.next_u64())?;
        return Ok(Episode {
            world_id: world.seed,
            start,
            goal,
            instruction,
            path,
            max_steps: DEFAULT_MAX_STEPS,
        });
    }
    Err(Error::Degenerate("no start/goal pair two edges apart".into()))
}

/// A set of worlds with episodes sampled from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub worlds: Vec<WorldGraph>,
    pub episodes: Vec<Episode>,
}

impl Corpus {
    /// `world_count` worlds seeded from `seed`, `per_world` episodes each.
    pub fn generate(seed: u64, world_count: usize, per_world: usize, size: SizeClass) -> Result<Self> {
        let mut rng = SplitMix64::derive(seed, 0xC0);
        let mut worlds = Vec::with_capacity(world_count);
        let mut episodes = Vec::with_capacity(world_count * per_world);
        for _ in 0..world_count {
            let world = generate_world(rng.next_u64(), size);
            for _ in 0..per_world {
                episodes.push(sample_episode(&world, rng.next_u64())?);
            }
            worlds.push(world);
        }
        Ok(Self { worlds, episodes })
    }

    pub fn world(&self, id: u64) -> Result<&WorldGraph> {
        self.worlds
            .iter()
            .find(|w| w.seed == id)
            .ok_or_else(|| Error::InvalidArgument(format!("episode references unknown world {id}")))
    }

    pub fn validate(&self) -> Result<()> {
        for w in &self.worlds {
            w.validate()?;
        }
        for e in &self.episodes {
            e.validate(self.world(e.world_id)?)?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("worlds"))?;
        for w in &self.worlds {
            w.save(&dir.join("worlds").join(format!("world_{}.json", w.seed)))?;
        }
        std::fs::write(dir.join("episodes.json"), serde_json::to_string_pretty(&self.episodes)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let episodes: Vec<Episode> = serde_json::from_str(&std::fs::read_to_string(dir.join("episodes.json"))?)?;
        let mut paths: Vec<_> = std::fs::read_dir(dir.join("worlds"))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::result::Result<_, _>>()?;
        paths.sort();
        let mut worlds = paths.iter().map(|p| WorldGraph::load(p)).collect::<Result<Vec<_>>>()?;
        worlds.sort_by_key(|w| w.seed);
        let corpus = Self { worlds, episodes };
        corpus.validate()?;
        Ok(corpus)
    }
}
