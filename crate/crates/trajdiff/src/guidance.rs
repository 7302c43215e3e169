//! Classifier-free guidance combination and the cosine, uncertainty-adaptive
//! guidance-scale schedule.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Parameters of the adaptive guidance-scale schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    /// Scale at the start of the cosine ramp (`t = 0`).
    pub w_min: f64,
    /// Maximal scale reached at `t = T` when the scenario distance is zero.
    pub w_max_base: f64,
    /// Mahalanobis distance at which conditioning saturates to zero.
    pub t_c: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { w_min: 0.1, w_max_base: 1.0, t_c: 50.0 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_min.is_finite() && self.w_max_base.is_finite() && self.t_c.is_finite()) {
            return Err(Error::InvalidArgument("guidance parameters must be finite".into()));
        }
        if self.w_min > self.w_max_base {
            return Err(Error::InvalidArgument(format!(
                "w_min {} must be <= w_max_base {}",
                self.w_min, self.w_max_base
            )));
        }
        if self.t_c <= 0.0 {
            return Err(Error::InvalidArgument(format!("t_c {} must be > 0", self.t_c)));
        }
        Ok(())
    }
}

/// Maps a velocity prediction to the noise domain:
/// `eps_hat = sigma_t * x_t + a_t * v`.
pub fn v_to_eps(s: &NoiseSchedule, x_t: &Array2<f64>, v: &Array2<f64>, t: usize) -> Result<Array2<f64>> {
    s.require_t(t)?;
    if x_t.dim() != v.dim() {
        return Err(Error::ShapeMismatch(format!(
            "v_to_eps x_t/v: {:?} vs {:?}",
            x_t.dim(),
            v.dim()
        )));
    }
    Ok(s.noise_scale(t) * x_t + s.signal_scale(t) * v)
}

/// Guided noise estimate: `(1 + w) * eps_cond - w * eps_uncond`.
pub fn cfg_combine(eps_cond: &Array2<f64>, eps_uncond: &Array2<f64>, w: f64) -> Result<Array2<f64>> {
    if !w.is_finite() {
        return Err(Error::InvalidArgument(format!("guidance scale {} not finite", w)));
    }
    if eps_cond.dim() != eps_uncond.dim() {
        return Err(Error::ShapeMismatch(format!(
            "cfg_combine cond/uncond: {:?} vs {:?}",
            eps_cond.dim(),
            eps_uncond.dim()
        )));
    }
    Ok((1.0 + w) * eps_cond - w * eps_uncond)
}

/// Cosine-ramped, uncertainty-adaptive guidance scale.
///
/// `w_max(delta) = w_max_base * (1 - min(delta, t_c) / t_c)`, then
/// `w = w_min + (w_max(delta) - w_min) * (1 - cos(pi * t / T)) / 2`.
///
/// `t` is the position in the original `T`-step schedule, not the index into a
/// reduced sampling grid. The cosine blend is applied without clamping, so for
/// `delta >= t_c` the scale ramps from `w_min` down towards zero at `t = T`.
pub fn guidance_scale(t: usize, t_total: usize, delta: f64, cfg: &GuidanceConfig) -> Result<f64> {
    cfg.validate()?;
    if t_total == 0 || t > t_total {
        return Err(Error::InvalidArgument(format!("t {} outside 0..={}", t, t_total)));
    }
    if !(delta >= 0.0) {
        return Err(Error::InvalidArgument(format!("delta {} must be >= 0", delta)));
    }
    let w_max = cfg.w_max_base * (1.0 - delta.min(cfg.t_c) / cfg.t_c);
    let ramp = (1.0 - (std::f64::consts::PI * t as f64 / t_total as f64).cos()) / 2.0;
    Ok(cfg.w_min + (w_max - cfg.w_min) * ramp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{forward_noise, recover_x0_eps, velocity_target};
    use crate::schedule::build_linear_schedule;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha12Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
    }

    #[test]
    fn v_to_eps_recovers_known_noise() {
        let s = build_linear_schedule(300, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for &t in &[1usize, 77, 300] {
            let x0 = randn(2, 25, &mut rng);
            let eps = randn(2, 25, &mut rng);
            let x_t = forward_noise(&s, &x0, t, &eps).unwrap();
            let v = velocity_target(&s, &x0, &eps, t).unwrap();
            let eps_hat = v_to_eps(&s, &x_t, &v, t).unwrap();
            let diff = (&eps_hat - &eps).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-12, "t={t} diff={diff}");
        }
    }

    #[test]
    fn v_to_eps_zero_state() {
        let s = build_linear_schedule(100, 1e-4, 0.02).unwrap();
        let v = arr2(&[[0.4, -0.8]]);
        let zeros = Array2::zeros((1, 2));
        let out = v_to_eps(&s, &zeros, &v, 42).unwrap();
        assert_eq!(out, s.signal_scale(42) * &v);
    }

    #[test]
    fn v_to_eps_agrees_with_recover_path() {
        let s = build_linear_schedule(100, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for &t in &[1usize, 13, 100] {
            let x_t = randn(2, 8, &mut rng);
            let v = randn(2, 8, &mut rng);
            let (_, eps_rec) = recover_x0_eps(&s, &x_t, &v, t).unwrap();
            let eps_dir = v_to_eps(&s, &x_t, &v, t).unwrap();
            let diff = (&eps_rec - &eps_dir).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn cfg_combine_limits() {
        let c = arr2(&[[1.0, 2.0], [3.0, -1.0]]);
        let u = arr2(&[[0.5, 0.0], [1.0, 1.0]]);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), c);
        let w1 = cfg_combine(&c, &u, 1.0).unwrap();
        assert_eq!(w1, 2.0 * &c - &u);
        // Degenerate equality: the combination is the common value for any w.
        for &w in &[-2.0, 0.0, 0.7, 5.0] {
            let same = cfg_combine(&c, &c, w).unwrap();
            let diff = (&same - &c).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-12, "w={w}");
        }
        assert!(cfg_combine(&c, &u, f64::NAN).is_err());
    }

    #[test]
    fn guidance_scale_endpoints() {
        let cfg = GuidanceConfig::default();
        for &delta in &[0.0, 10.0, 50.0, 400.0] {
            let w = guidance_scale(0, 1000, delta, &cfg).unwrap();
            assert_eq!(w, cfg.w_min, "delta={delta}");
        }
        let w = guidance_scale(1000, 1000, 0.0, &cfg).unwrap();
        assert!((w - cfg.w_max_base).abs() < 1e-15);
    }

    #[test]
    fn saturated_delta_drives_scale_to_zero_at_terminal_step() {
        let cfg = GuidanceConfig::default();
        for &delta in &[50.0, 51.0, 1e6] {
            let w = guidance_scale(1000, 1000, delta, &cfg).unwrap();
            assert!(w.abs() < 1e-15, "delta={delta} w={w}");
        }
    }

    #[test]
    fn guidance_scale_monotonicity() {
        let cfg = GuidanceConfig::default();
        // Non-decreasing in t when w_max(delta) >= w_min.
        let delta = 10.0;
        let mut prev = f64::NEG_INFINITY;
        for t in 0..=100 {
            let w = guidance_scale(t * 10, 1000, delta, &cfg).unwrap();
            assert!(w >= prev - 1e-15, "t={t}");
            prev = w;
        }
        // Non-increasing in delta at fixed t.
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let delta = i as f64;
            let w = guidance_scale(700, 1000, delta, &cfg).unwrap();
            assert!(w <= prev + 1e-15, "delta={delta}");
            prev = w;
        }
    }

    #[test]
    fn guidance_scale_rejects_negative_delta() {
        let cfg = GuidanceConfig::default();
        assert!(guidance_scale(10, 100, -0.1, &cfg).is_err());
        assert!(guidance_scale(10, 100, f64::NAN, &cfg).is_err());
    }
}
