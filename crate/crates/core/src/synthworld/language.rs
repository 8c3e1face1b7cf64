use serde::{Deserialize, Serialize};

use super::paths::shortest_path;
use super::world::{Region, WorldGraph, CATEGORIES, NUM_CATEGORIES};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const MAX_INSTRUCTION_LEN: usize = 20;
/// Goal objects must lie within this distance of the goal node.
pub const GOAL_OBJECT_RADIUS: f64 = 2.0;

const FUNCTION_WORDS: [&str; 12] = [
    "go", "walk", "head", "through", "past", "to", "the", "toward", "in", "and", "stop", "at",
];

/// Fixed vocabulary: function words, then category names, then region names.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<&'static str>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut words: Vec<&'static str> = FUNCTION_WORDS.to_vec();
        words.extend(CATEGORIES.iter().map(|c| c.name));
        words.extend(Region::ALL.iter().map(|r| r.name()));
        Self { words }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| *w == word)
    }

    pub fn word(&self, id: usize) -> Option<&'static str> {
        self.words.get(id).copied()
    }

    pub fn category_token(&self, category: usize) -> usize {
        FUNCTION_WORDS.len() + category
    }

    pub fn region_token(&self, region: Region) -> usize {
        FUNCTION_WORDS.len() + NUM_CATEGORIES + Region::ALL.iter().position(|r| *r == region).expect("known region")
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.word(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub tokens: Vec<usize>,
    pub goal_node: usize,
    pub goal_category: Option<usize>,
}

/// Object category to name at the goal: the nearest object within
/// [`GOAL_OBJECT_RADIUS`], preferring categories that occur once in the world.
pub fn goal_category(world: &WorldGraph, goal: usize) -> Option<usize> {
    let p = world.nodes[goal].position;
    let mut near: Vec<(bool, f64, usize)> = world
        .objects_near(goal, GOAL_OBJECT_RADIUS)
        .into_iter()
        .map(|i| {
            let o = &world.objects[i];
            let d = ((o.center[0] - p[0]).powi(2) + (o.center[1] - p[1]).powi(2)).sqrt();
            (world.category_count(o.category) > 1, d, o.category)
        })
        .collect();
    near.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    near.first().map(|t| t.2)
}

/// Template instruction: `<verb> <prep> <regions along the path> <ending>`
/// where the ending names the goal object and the goal region.
pub fn generate_instruction(world: &WorldGraph, start: usize, goal: usize, seed: u64) -> Result<Instruction> {
    if start == goal {
        return Err(Error::InvalidArgument("instruction needs start != goal".into()));
    }
    let vocab = Vocabulary::default();
    let path = shortest_path(world, start, goal)?;
    let mut rng = SplitMix64::derive(seed, 0x1A57);
    let goal_region = world.region(goal);

    let mut regions: Vec<Region> = Vec::new();
    for &n in &path.nodes[..path.nodes.len() - 1] {
        let r = world.region(n);
        if regions.last() != Some(&r) {
            regions.push(r);
        }
    }
    if regions.last() == Some(&goal_region) {
        regions.pop();
    }

    let t = |w: &str| vocab.id(w).expect("template word in vocabulary");
    let verb = ["go", "walk", "head"][rng.below(3)];
    let prep = ["through", "past"][rng.below(2)];
    let category = goal_category(world, goal);
    let ending: Vec<usize> = match category {
        Some(c) if rng.below(2) == 0 => vec![t("to"), t("the"), vocab.category_token(c), t("in"), t("the"), vocab.region_token(goal_region)],
        Some(c) => vec![t("and"), t("stop"), t("at"), t("the"), vocab.category_token(c), t("in"), vocab.region_token(goal_region)],
        None => vec![t("toward"), t("the"), vocab.region_token(goal_region)],
    };
    let budget = MAX_INSTRUCTION_LEN - 2 - ending.len();
    regions.truncate(budget);

    let mut tokens = Vec::with_capacity(MAX_INSTRUCTION_LEN);
    if !regions.is_empty() {
        tokens.push(t(verb));
        tokens.push(t(prep));
        tokens.extend(regions.iter().map(|&r| vocab.region_token(r)));
    } else {
        tokens.push(t(verb));
    }
    tokens.extend(ending);
    debug_assert!(tokens.len() <= MAX_INSTRUCTION_LEN);
    Ok(Instruction {
        tokens,
        goal_node: goal,
        goal_category: category,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::world::{generate_world, SizeClass};

    #[test]
    fn vocabulary_is_small_and_consistent() {
        let v = Vocabulary::default();
        assert!(v.len() <= 64);
        for c in 0..NUM_CATEGORIES {
            assert_eq!(v.word(v.category_token(c)), Some(CATEGORIES[c].name));
        }
        for r in Region::ALL {
            assert_eq!(v.word(v.region_token(r)), Some(r.name()));
        }
    }

    #[test]
    fn instruction_mentions_goal_region_and_is_deterministic() {
        let v = Vocabulary::default();
        for seed in 0..30 {
            let w = generate_world(seed, SizeClass::Medium);
            let goal = w.node_count() - 1;
            let a = generate_instruction(&w, 0, goal, seed).unwrap();
            let b = generate_instruction(&w, 0, goal, seed).unwrap();
            assert_eq!(a, b);
            assert!(a.tokens.contains(&v.region_token(w.region(goal))));
            assert!(a.tokens.len() <= MAX_INSTRUCTION_LEN);
            if let Some(c) = a.goal_category {
                assert!(a.tokens.contains(&v.category_token(c)));
            }
        }
        let w = generate_world(0, SizeClass::Small);
        assert!(generate_instruction(&w, 1, 1, 0).is_err());
    }
}
