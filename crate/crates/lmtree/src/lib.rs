//! Linear model trees for control policies, with built-in per-step
//! explanations and a ship-docking simulation to distill against.

mod error;
mod rng;

pub mod cli;
pub mod dataset;
pub mod env;
pub mod leaf;
pub mod teacher;
pub mod tree;

pub use dataset::{
    distill_loop, harvest_failures, label, load_dataset, sample_random, save_dataset, Dataset,
    DistillConfig, RoundMetrics, RowTag,
};
pub use env::{
    load_env_config, run_episode, scale_action, thrust_to_force, tree_controller, unscale_action,
    wrap_angle, write_trajectory, Controller, DockingEnv, EnvConfig, Events, ExplainHook,
    FeatureBounds, Normalizer, Outcome, Pose, Start, StateVector, TrajStep, Trajectory, Velocity,
    ACTION_DIM, ACTION_HIGHS, ACTION_LOWS, ACTION_NAMES, FEATURE_NAMES, STATE_DIM,
};
pub use error::{Error, Result};
pub use leaf::{attribute, fit_leaf, leaf_loss, predict_leaf, Attribution, LeafModel};
pub use teacher::{load_mlp, save_mlp, MlpPolicy, ScriptedController, TeacherPolicy};
pub use tree::{
    build_tree, build_tree_traced, candidate_thresholds, find_best_split, load_tree, save_tree,
    select_next_node, tree_stats, BuildConfig, BuildTrace, Explanation, PathStep, SplitCandidate,
    Tree, TreeNode, TreeStats,
};
