//! Conditioned diffusion over vehicle control variables for multimodal
//! trajectory prediction.
//!
//! The library covers the full pipeline at desk scale:
//!
//! - [`schedule`] — noise schedules and reduced timestep grids,
//! - [`diffusion`] — forward noising, velocity-parameterization algebra, and
//!   the ancestral / deterministic reverse updates,
//! - [`guidance`] — classifier-free guidance with a cosine,
//!   uncertainty-adaptive scale,
//! - [`context`] — scenario encoding, vector quantization with dead-code
//!   re-anchoring, a maneuver classifier head, and Mahalanobis scenario
//!   uncertainty,
//! - [`denoiser`] — a small conditional velocity predictor with its training
//!   and sampling loops,
//! - [`vmm`] — kinematic rollout of control sequences and the inverse
//!   extraction of controls from position histories,
//! - [`multimodal`] — sample-count estimation and hypothesis extraction via
//!   min-max scaling, PCA, and a BIC-selected Gaussian mixture,
//! - [`metrics`] — displacement errors and the per-token distribution
//!   divergence diagnostic,
//! - [`scenario_gen`] — a deterministic synthetic highway scenario generator,
//! - [`pipeline`] + [`cli`] — end-to-end orchestration and the `trajdiff`
//!   binary.
//!
//! ## Runnable examples
//!
//! One example per major capability lives in `examples/`:
//!
//! ```text
//! cargo run --example schedule_grids          # schedules and reduced sampling grids
//! cargo run --example parameterization        # noising / velocity round trips
//! cargo run --example guidance_sweep          # adaptive guidance-scale table
//! cargo run --example vmm_rollout             # kinematic rollout and inverse controls
//! cargo run --example generate_dataset        # synthetic highway scenarios
//! cargo run --example codebook_health         # dead-code re-anchoring A/B
//! cargo run --example multimodal_modes        # PCA + GMM + BIC hypothesis extraction
//! cargo run --example train_and_predict       # end-to-end mini pipeline
//! ```
//!
//! The acceptance suite runs with `cargo test --test acceptance -- --nocapture`.

pub mod cli;
pub mod config;
pub mod context;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod multimodal;
pub mod nn;
pub mod pipeline;
pub mod scenario_gen;
pub mod schedule;
pub mod vmm;

pub use error::{Error, Result};
