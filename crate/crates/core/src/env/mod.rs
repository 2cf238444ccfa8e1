//! Cart-pole simulator and batch dataset generation.

pub mod cartpole;
pub mod dataset;

pub use cartpole::{
    action_levels, euler_step, force_for, initial_state, is_terminal_slice, reward_for, step, step_with_noise, CartState, EnvConfig, NoiseDraw, StepOutcome, EARTH_GRAVITY,
    HD_GRAVITIES, STATE_DIM,
};
pub use dataset::{
    first_trials, generate_trials, read_jsonl, trials, window, write_jsonl, ActionPolicy, DatasetMeta, Provenance, TrialLabels,
    Transition, UniformRandomPolicy,
};
