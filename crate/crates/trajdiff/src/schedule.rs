//! Diffusion noise schedule and reduced timestep grids for fast sampling.
//!
//! Timesteps are 1-based: `t` ranges over `1..=t_max()`, and `t = 0` denotes
//! the clean-data endpoint with `alpha_bar(0) = 1`.

use crate::error::{Error, Result};

/// Per-timestep noise schedule of a variance-preserving diffusion process.
///
/// Stores `beta[t]`, `alpha[t] = 1 - beta[t]`, the cumulative product
/// `alpha_bar[t]`, the signal scale `a[t] = sqrt(alpha_bar[t])`, the noise
/// scale `sigma[t] = sqrt(1 - alpha_bar[t])`, and the posterior variance
/// `beta_tilde[t]`. Immutable after construction and safe to share across
/// parallel samplers.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    a: Vec<f64>,
    sigma: Vec<f64>,
    beta_tilde: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from raw per-step variance increments.
    ///
    /// Rejects an empty vector and any `beta` outside `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !b.is_finite() || b <= 0.0 || b >= 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "beta[{}] = {} outside (0, 1)",
                    i + 1,
                    b
                )));
            }
        }
        let t_max = betas.len();
        // Index 0 holds the t = 0 convention: alpha_bar = 1, no noise.
        let mut beta = vec![0.0];
        let mut alpha = vec![1.0];
        let mut alpha_bar = vec![1.0];
        let mut a = vec![1.0];
        let mut sigma = vec![0.0];
        let mut beta_tilde = vec![0.0];
        let mut prod = 1.0;
        for t in 1..=t_max {
            let b = betas[t - 1];
            let al = 1.0 - b;
            let prev_bar = prod;
            prod *= al;
            beta.push(b);
            alpha.push(al);
            alpha_bar.push(prod);
            a.push(prod.sqrt());
            sigma.push((1.0 - prod).sqrt());
            beta_tilde.push((1.0 - prev_bar) / (1.0 - prod) * b);
        }
        Ok(Self { beta, alpha, alpha_bar, a, sigma, beta_tilde })
    }

    /// Number of diffusion steps `T`.
    pub fn t_max(&self) -> usize {
        self.beta.len() - 1
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(Error::InvalidArgument(format!(
                "timestep {} outside 1..={}",
                t,
                self.t_max()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// Cumulative signal retention; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Signal scale `sqrt(alpha_bar(t))`.
    pub fn signal_scale(&self, t: usize) -> f64 {
        self.a[t]
    }

    /// Noise scale `sqrt(1 - alpha_bar(t))`.
    pub fn noise_scale(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Posterior variance of the one-step reverse transition.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t]
    }

    pub(crate) fn require_t(&self, t: usize) -> Result<()> {
        self.check_t(t)
    }
}

/// Default linear-schedule endpoints.
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
/// Default full schedule length.
pub const DEFAULT_T: usize = 1000;

/// Builds a schedule whose `beta[t]` interpolates linearly from `beta_start`
/// at `t = 1` to `beta_end` at `t = T`.
pub fn build_linear_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps == 0 {
        return Err(Error::InvalidArgument("T must be >= 1".into()));
    }
    if !beta_start.is_finite() || !beta_end.is_finite() {
        return Err(Error::InvalidArgument("beta endpoints must be finite".into()));
    }
    if beta_start <= 0.0 || beta_end >= 1.0 || beta_start > beta_end {
        return Err(Error::InvalidArgument(format!(
            "beta endpoints ({}, {}) must satisfy 0 < start <= end < 1",
            beta_start, beta_end
        )));
    }
    let betas = if t_steps == 1 {
        vec![beta_start]
    } else {
        (0..t_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// Selects `s_steps` timesteps from `1..=T`, linearly spaced and including `T`,
/// returned in descending order for the reverse pass.
///
/// The grid rounds an inclusive linear space over `[1, T]` with the largest
/// element forced to `T`; for `s_steps <= T` the rounded values are distinct
/// because consecutive grid points are at least one step apart.
pub fn subset_timesteps(schedule: &NoiseSchedule, s_steps: usize) -> Result<Vec<usize>> {
    let t_max = schedule.t_max();
    if s_steps == 0 || s_steps > t_max {
        return Err(Error::InvalidArgument(format!(
            "subset size {} outside 1..={}",
            s_steps, t_max
        )));
    }
    if s_steps == 1 {
        return Ok(vec![t_max]);
    }
    let mut ts: Vec<usize> = (0..s_steps)
        .map(|i| {
            let g = 1.0 + (t_max - 1) as f64 * i as f64 / (s_steps - 1) as f64;
            g.round() as usize
        })
        .collect();
    *ts.last_mut().unwrap() = t_max;
    ts.dedup();
    debug_assert_eq!(ts.len(), s_steps, "rounded subset grid must stay distinct");
    ts.reverse();
    Ok(ts)
}
