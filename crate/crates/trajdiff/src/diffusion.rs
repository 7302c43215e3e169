//! Forward noising, the data/noise/velocity parameterization algebra, and the
//! reverse updates (ancestral and deterministic).
//!
//! All operations are pure functions over `f64` matrices; the round-trip
//! identities in this module are exact to floating-point rounding.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// A noised control matrix together with its schedule position.
#[derive(Debug, Clone)]
pub struct DiffusionState {
    pub x: Array2<f64>,
    pub t: usize,
}

impl DiffusionState {
    pub fn new(x: Array2<f64>, t: usize, schedule: &NoiseSchedule) -> Result<Self> {
        if t > schedule.t_max() {
            return Err(Error::InvalidArgument(format!(
                "timestep {} outside 0..={}",
                t,
                schedule.t_max()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("diffusion state contains non-finite entries".into()));
        }
        Ok(Self { x, t })
    }
}

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Closed-form forward noising: `x_t = a_t * x0 + sigma_t * eps`.
pub fn forward_noise(
    s: &NoiseSchedule,
    x0: &Array2<f64>,
    t: usize,
    eps: &Array2<f64>,
) -> Result<Array2<f64>> {
    s.require_t(t)?;
    check_same_shape(x0, eps, "forward_noise x0/eps")?;
    let a = s.signal_scale(t);
    let sig = s.noise_scale(t);
    Ok(a * x0 + sig * eps)
}

/// Velocity training target: `v_t = a_t * eps - sigma_t * x0`.
pub fn velocity_target(
    s: &NoiseSchedule,
    x0: &Array2<f64>,
    eps: &Array2<f64>,
    t: usize,
) -> Result<Array2<f64>> {
    s.require_t(t)?;
    check_same_shape(x0, eps, "velocity_target x0/eps")?;
    let a = s.signal_scale(t);
    let sig = s.noise_scale(t);
    Ok(a * eps - sig * x0)
}

/// Recovers `(x0, eps)` from `(x_t, v)`.
///
/// Uses the division-free forms `x0 = a*x_t - sigma*v` and
/// `eps = sigma*x_t + a*v`, which are defined for every `t` (including
/// `sigma_t = 0`) because `a_t^2 + sigma_t^2 = 1`.
pub fn recover_x0_eps(
    s: &NoiseSchedule,
    x_t: &Array2<f64>,
    v: &Array2<f64>,
    t: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    s.require_t(t)?;
    check_same_shape(x_t, v, "recover_x0_eps x_t/v")?;
    let a = s.signal_scale(t);
    let sig = s.noise_scale(t);
    let x0_hat = a * x_t - sig * v;
    let eps_hat = sig * x_t + a * v;
    Ok((x0_hat, eps_hat))
}

/// One ancestral reverse step:
/// `x_{t-1} = (x_t - (1-alpha_t)/sigma_t * eps_hat) / sqrt(alpha_t) + sqrt(beta_tilde_t) * z`.
pub fn ddpm_step(
    s: &NoiseSchedule,
    x_t: &Array2<f64>,
    eps_hat: &Array2<f64>,
    t: usize,
    z: &Array2<f64>,
) -> Result<Array2<f64>> {
    s.require_t(t)?;
    check_same_shape(x_t, eps_hat, "ddpm_step x_t/eps_hat")?;
    check_same_shape(x_t, z, "ddpm_step x_t/z")?;
    let coef = (1.0 - s.alpha(t)) / s.noise_scale(t);
    let mean = (x_t - &(coef * eps_hat)) / s.alpha(t).sqrt();
    Ok(mean + s.beta_tilde(t).sqrt() * z)
}

/// Deterministic-by-default reverse jump from `t` to `t_prev < t`:
/// `x = a_prev * x0_hat + sqrt(1 - alpha_bar_prev - sig^2) * eps_hat + sig * noise`,
/// with `sig = eta * sqrt((1-ab_prev)/(1-ab_t)) * sqrt(1 - ab_t/ab_prev)`.
///
/// `eta = 0` (the default use) makes the update a pure function of its inputs;
/// `noise` may then be `None`. `t_prev = 0` lands exactly on `x0_hat`.
pub fn ddim_step(
    s: &NoiseSchedule,
    x_t: &Array2<f64>,
    x0_hat: &Array2<f64>,
    eps_hat: &Array2<f64>,
    t: usize,
    t_prev: usize,
    eta: f64,
    noise: Option<&Array2<f64>>,
) -> Result<Array2<f64>> {
    s.require_t(t)?;
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!("t_prev {} must be < t {}", t_prev, t)));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidArgument(format!("eta {} outside [0, 1]", eta)));
    }
    check_same_shape(x_t, x0_hat, "ddim_step x_t/x0_hat")?;
    check_same_shape(x_t, eps_hat, "ddim_step x_t/eps_hat")?;
    let ab_t = s.alpha_bar(t);
    let ab_prev = s.alpha_bar(t_prev);
    let a_prev = s.signal_scale(t_prev);
    let sig = eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt();
    let mut radicand = 1.0 - ab_prev - sig * sig;
    if radicand < 0.0 {
        if radicand < -1e-12 {
            return Err(Error::InvalidArgument(format!(
                "gap variance too large: sig^2 = {} exceeds 1 - alpha_bar(t_prev) = {}",
                sig * sig,
                1.0 - ab_prev
            )));
        }
        radicand = 0.0;
    }
    let mut x = a_prev * x0_hat + radicand.sqrt() * eps_hat;
    if sig > 0.0 {
        let z = noise.ok_or_else(|| {
            Error::InvalidArgument("eta > 0 requires a noise draw".into())
        })?;
        check_same_shape(x_t, z, "ddim_step x_t/noise")?;
        x = x + sig * z;
    }
    Ok(x)
}
