//! Networked integrated sensing and communication toolkit: distributed
//! sparse scene reconstruction over a user network, closed-form
//! steady-state error prediction, and joint beam design.
//!
//! Modules:
//! - [`topology`]: random connected networks and combination weights
//! - [`scene`]: 3-D voxel grid, sparse reflectivity, propagation channels
//! - [`waveform`]: beams, symbol streams, received-signal synthesis
//! - [`sensing`]: diffusion sparse total-least-squares estimator
//! - [`two_step`]: interference cancellation around a symbol-recovery pass
//! - [`theory`]: stability and steady-state error in closed form
//! - [`beamform`]: penalty-based difference-of-convex beam optimization
//! - [`harness`]: experiment configuration, parallel runs, CSV export

pub mod beamform;
pub mod error;
pub mod harness;
pub mod rng;
pub mod scene;
pub mod sensing;
pub mod theory;
pub mod topology;
pub mod two_step;
pub mod waveform;

pub use error::{Error, Result};
