//! Optimization, schedules, staged training and checkpoints.

pub mod ablation;
pub mod adamw;
pub mod checkpoint;
pub mod config;
pub mod pipeline;
pub mod schedule;
pub mod stage;
