//! Layer-adaptive KV-cache retention budgets.
//!
//! The pipeline: [`trace`] loads or synthesizes attention traces,
//! [`importance`] turns them into per-layer priority sequences, [`lorenz`]
//! measures how concentrated each layer's importance is, [`allocator`]
//! searches for the retention threshold that fits a global budget, and
//! [`cachesim`] replays prefill compression and decode-time maintenance,
//! optionally driven by the attention-only [`toymodel`].

pub mod allocator;
pub mod cachesim;
pub mod cli;
pub mod importance;
pub mod lorenz;
pub mod toymodel;
pub mod trace;
