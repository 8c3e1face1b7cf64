//! Seeded synthetic environments, feature rendering, template instructions
//! and expert supervision.

mod episode;
mod language;
mod paths;
mod render;
mod world;

pub use episode::{sample_episode, Corpus, Episode, DEFAULT_MAX_STEPS};
pub use language::{generate_instruction, goal_category, Instruction, Vocabulary, GOAL_OBJECT_RADIUS, MAX_INSTRUCTION_LEN};
pub use paths::{dijkstra, expert_action, geodesic_distances, shortest_path, NavAction, PathResult};
pub use render::{category_embedding, render_node_views, render_view_features, visible_objects, SPLAT_SIGMA};
pub use world::{
    generate_world, CameraRig, CategorySpec, Node, Region, SizeClass, WorldGraph, CATEGORIES, LATTICE_SPACING,
    NUM_CATEGORIES, WORLD_FORMAT_VERSION,
};
