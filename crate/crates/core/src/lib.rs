//! Modular diffusion-sampling runtime.
//!
//! The crate externalizes the denoising loop of a diffusion planner from the
//! model graph. It provides:
//!
//! - [`schedule`] — variance-preserving noise schedule and logSNR-uniform
//!   timestep grids
//! - [`solver`] — pluggable denoising-step solvers (DDIM, DPM-Solver++
//!   first/second order) over the VP schedule
//! - [`denoise`] — the abstract x0-predictor interface, a caching
//!   context-encoder wrapper, and analytic/graph-backed backends
//! - [`graph`] — a computational-graph IR with repeated-substructure
//!   detection, module extraction, a reference interpreter, and a
//!   numerical-equivalence validator
//! - [`pipeline`] — the end-to-end planning cycle: cached encode, solver
//!   loop with state anchoring, denoise-to-zero, turn-indicator head,
//!   denormalization
//! - [`bench`] — latency models, solver sweeps with FDE/ADE, the
//!   schedule-vs-truncation study, and Pareto frontier computation

pub mod bench;
pub mod denoise;
pub mod graph;
pub mod pipeline;
pub mod schedule;
pub mod solver;
pub mod tensor;

pub use schedule::{TimestepGrid, VpSchedule};
pub use solver::SolverKind;
pub use tensor::Tensor;
