//! Ephemerally value-adjusted Q-learning on a coin-collection gridworld.
//!
//! The crate is organised bottom-up:
//!
//! * [`knn`] — exact nearest-neighbour search over embeddings
//! * [`replay`] — ring-buffer replay memory with trajectory extraction
//! * [`qfunc`] — the MLP value network, its trainer, and a tabular stand-in
//! * [`trace`] — n-step, trajectory-centric, and kernel-based planning backups
//! * [`value_buffer`] — the ephemeral cache of planned action values
//! * [`gridworld`] — the environment
//! * [`config`] — hyperparameters and experiment settings
//! * [`agent`] — the acting/learning/planning agent
//! * [`metrics`] — CSV metrics logging
//! * [`checkpoint`] — binary save/restore of a whole training run
//! * [`harness`] — training and evaluation drivers

pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod gridworld;
pub mod harness;
pub mod knn;
pub mod metrics;
pub mod qfunc;
pub mod replay;
pub mod trace;
pub mod value_buffer;
