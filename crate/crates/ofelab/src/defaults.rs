//! Recorded default hyperparameters.
//!
//! The `PAPER_*` constants are the full-scale benchmark protocol values; the
//! `DESK_*` constants are the scaled-down defaults the desk environments run
//! with. Everything is overridable from the run configuration.

/// Mini-batch size for every network update.
pub const BATCH_SIZE: usize = 256;

/// Adam learning rate for extractors and agents.
pub const LEARNING_RATE: f64 = 3e-4;

/// Random-policy warmup before learning starts (full-scale protocol).
pub const PAPER_WARMUP_SAC: usize = 10_000;
pub const PAPER_WARMUP_TD3: usize = 100_000;
/// Desk-scale warmup.
pub const DESK_WARMUP: usize = 1_000;

/// Evaluation cadence and episode count (full-scale protocol).
pub const PAPER_EVAL_INTERVAL: usize = 5_000;
pub const PAPER_EVAL_EPISODES: usize = 10;
/// Trailing window (in environment steps) for the actual score.
pub const PAPER_ACTUAL_SCORE_WINDOW: usize = 100_000;

pub const DESK_EVAL_INTERVAL: usize = 1_000;
pub const DESK_EVAL_EPISODES: usize = 10;
pub const DESK_ACTUAL_SCORE_WINDOW: usize = 10_000;

/// Random-policy corpus sizes for architecture selection.
pub const PAPER_CORPUS_TRAIN: usize = 100_000;
pub const PAPER_CORPUS_TEST: usize = 20_000;
pub const DESK_CORPUS_TRAIN: usize = 10_000;
pub const DESK_CORPUS_TEST: usize = 2_000;

/// Auxiliary-score training steps per candidate seed.
pub const PAPER_AUX_TRAIN_STEPS: usize = 100_000;
pub const DESK_AUX_TRAIN_STEPS: usize = 10_000;

/// Replay capacity.
pub const PAPER_BUFFER_CAPACITY: usize = 1_000_000;
pub const DESK_BUFFER_CAPACITY: usize = 100_000;

/// Discount and polyak coefficient shared by both agents.
pub const GAMMA: f64 = 0.99;
pub const TAU: f64 = 0.005;

/// Agent hidden widths.
pub const AGENT_HIDDEN: [usize; 2] = [256, 256];

/// Model-network baseline: hidden width, reward trade-off, learning rate.
pub const ML_HIDDEN: usize = 100;
pub const ML_LAMBDA: f64 = 10.0;
pub const ML_LEARNING_RATE: f64 = 1e-3;

/// Increment added by each extractor block at full scale.
pub const PAPER_INCREMENT: usize = 240;
