//! A self-contained deep reinforcement-learning laboratory built around
//! online feature extraction.
//!
//! The lab trains densely connected feature extractors with a
//! next-observation prediction objective alongside SAC/TD3 agents on
//! desk-scale control environments, and includes the baselines, ablation
//! switches, and the auxiliary-score architecture-selection procedure needed
//! to study what the extractor contributes. All numerics run on
//! [`gradkit`]'s tape-based reverse-mode engine; everything is deterministic
//! given a master seed.

pub mod agents;
pub mod archsearch;
pub mod config;
pub mod defaults;
pub mod envs;
pub mod error;
pub mod extractors;
pub mod mlmodel;
pub mod plot;
pub mod replay;
pub mod rng;
pub mod runner;
