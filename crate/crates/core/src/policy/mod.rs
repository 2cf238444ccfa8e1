//! Policy learning: tabular Q-learning with a value-iteration oracle, and
//! the dueling double DQN used on augmented datasets.

pub mod d3qn;
pub mod eval;
pub mod tabular;

pub use d3qn::{double_dqn_targets, mean_q_on, train_d3qn, D3qnConfig, D3qnReport, DuelingHead, DuelingNet};
pub use eval::{evaluate_policy, EvalMetrics, DEFAULT_EVAL_TRIALS, DEFAULT_HORIZON};
pub use tabular::{
    sup_norm, tabular_q_learning, value_iteration, AugmentedStream, FiniteMdp, QTable, Schedule, TabularStep,
};
