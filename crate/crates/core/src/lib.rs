//! Memory planning for training graphs and the pose-estimation math that
//! rides on top of it.
//!
//! The planner side ([`graphcore`], [`memplanner`], [`adexec`]) reasons about
//! which activations to keep, recompute or reconstruct. The pose side
//! ([`posemath`], [`sslrefine`], [`harness`]) covers heatmap codecs, losses,
//! the left/right rule, shape-prior refinement and evaluation.

pub mod adexec;
pub mod graphcore;
pub mod harness;
pub mod memplanner;
pub mod posemath;
pub mod sslrefine;
pub mod synthgraph;
