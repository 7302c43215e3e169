//! Kinematic vehicle motion model: forward rollout of acceleration/yaw-rate
//! controls to positions, and the inverse extraction of controls from a
//! position history.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Planar positions, one column per step; row 0 is x, row 1 is y.
pub type Trajectory = Array2<f64>;

/// Pose and speed of a vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    /// Speed in m/s, non-negative at construction.
    pub v: f64,
    /// Heading in rad.
    pub psi: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, v: f64, psi: f64) -> Result<Self> {
        if ![x, y, v, psi].iter().all(|f| f.is_finite()) {
            return Err(Error::InvalidArgument("vehicle state must be finite".into()));
        }
        if v < 0.0 {
            return Err(Error::InvalidArgument(format!("initial speed {} must be >= 0", v)));
        }
        Ok(Self { x, y, v, psi })
    }

    /// State at the end of a position history: the last sample anchors the
    /// position, the last segment gives speed and heading. Degenerate final
    /// segments fall back to zero speed and the previous segment's heading.
    pub fn from_track_tail(positions: &Array2<f64>, dt: f64) -> Result<Self> {
        if positions.nrows() != 2 || positions.ncols() < 2 {
            return Err(Error::InvalidArgument(
                "track tail needs a 2 x (>=2) position matrix".into(),
            ));
        }
        if dt <= 0.0 {
            return Err(Error::InvalidArgument("dt must be positive".into()));
        }
        let m = positions.ncols();
        let mut psi = 0.0;
        let mut v = 0.0;
        for k in 0..m - 1 {
            let dx = positions[[0, k + 1]] - positions[[0, k]];
            let dy = positions[[1, k + 1]] - positions[[1, k]];
            let d = (dx * dx + dy * dy).sqrt();
            if d > 1e-9 {
                psi = dy.atan2(dx);
            }
            v = d / dt;
        }
        VehicleState::new(positions[[0, m - 1]], positions[[1, m - 1]], v, psi)
    }
}

/// Longitudinal acceleration and yaw-rate commands on a fixed time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSequence {
    pub accel: Vec<f64>,
    pub yaw_rate: Vec<f64>,
    /// Time increment per step, in seconds.
    pub tau: f64,
}

impl ControlSequence {
    pub fn new(accel: Vec<f64>, yaw_rate: Vec<f64>, tau: f64) -> Result<Self> {
        if accel.len() != yaw_rate.len() || accel.is_empty() {
            return Err(Error::InvalidArgument(
                "control channels must be non-empty and equal length".into(),
            ));
        }
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::InvalidArgument(format!("tau {} must be positive", tau)));
        }
        if accel.iter().chain(yaw_rate.iter()).any(|f| !f.is_finite()) {
            return Err(Error::InvalidArgument("controls must be finite".into()));
        }
        Ok(Self { accel, yaw_rate, tau })
    }

    pub fn len(&self) -> usize {
        self.accel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accel.is_empty()
    }

    /// 2 x T matrix view: row 0 acceleration, row 1 yaw rate. This is the
    /// diffusion variable layout.
    pub fn to_matrix(&self) -> Array2<f64> {
        let t = self.len();
        let mut m = Array2::zeros((2, t));
        for k in 0..t {
            m[[0, k]] = self.accel[k];
            m[[1, k]] = self.yaw_rate[k];
        }
        m
    }

    pub fn from_matrix(m: &Array2<f64>, tau: f64) -> Result<Self> {
        if m.nrows() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "control matrix must have 2 rows, got {}",
                m.nrows()
            )));
        }
        Self::new(m.row(0).to_vec(), m.row(1).to_vec(), tau)
    }
}

/// Wraps an angle difference into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut w = a % two_pi;
    if w <= -std::f64::consts::PI {
        w += two_pi;
    } else if w > std::f64::consts::PI {
        w -= two_pi;
    }
    w
}

/// Rolls a control sequence forward from `s0`. Per step of length `tau`:
///
/// ```text
/// x   += v cos(psi) tau + (a cos(psi) - psi_dot v sin(psi)) tau^2 / 2
/// y   += v sin(psi) tau + (a sin(psi) + psi_dot v cos(psi)) tau^2 / 2
/// v   += a tau
/// psi += psi_dot tau
/// ```
///
/// Returns the positions after each step as a 2 x T matrix.
pub fn rollout(s0: &VehicleState, u: &ControlSequence) -> Result<Trajectory> {
    if u.tau <= 0.0 {
        return Err(Error::InvalidArgument("tau must be positive".into()));
    }
    let t_len = u.len();
    let tau = u.tau;
    let half_tau_sq = tau * tau / 2.0;
    let mut out = Array2::zeros((2, t_len));
    let (mut x, mut y, mut v, mut psi) = (s0.x, s0.y, s0.v, s0.psi);
    for k in 0..t_len {
        let (a, w) = (u.accel[k], u.yaw_rate[k]);
        let (sin_psi, cos_psi) = psi.sin_cos();
        x += v * cos_psi * tau + (a * cos_psi - w * v * sin_psi) * half_tau_sq;
        y += v * sin_psi * tau + (a * sin_psi + w * v * cos_psi) * half_tau_sq;
        v += a * tau;
        psi += w * tau;
        out[[0, k]] = x;
        out[[1, k]] = y;
    }
    Ok(out)
}

/// Extracts controls from a position history by forward differences.
///
/// For positions `P_0 .. P_{M-1}` sampled every `tau` seconds: headings
/// `psi_k = atan2(dy_k, dx_k)`, speeds `v_k = |P_{k+1} - P_k| / tau`,
/// accelerations `a_k = (v_{k+1} - v_k) / tau`, and yaw rates
/// `psi_dot_k = wrap(psi_{k+1} - psi_k) / tau`; the final control is held
/// from the previous step. Zero-motion segments hold the previous heading.
///
/// Returns `M - 1` controls plus the initial state anchored at `P_0`, so that
/// [`rollout`] approximately reconstructs `P_1 .. P_{M-1}`.
pub fn inverse_controls(positions: &Array2<f64>, tau: f64) -> Result<(ControlSequence, VehicleState)> {
    if positions.nrows() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "positions must be 2 x M, got {} rows",
            positions.nrows()
        )));
    }
    let m = positions.ncols();
    if m < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 position samples, got {}",
            m
        )));
    }
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("tau {} must be positive", tau)));
    }
    let n_seg = m - 1;
    let mut speeds = Vec::with_capacity(n_seg);
    let mut headings = Vec::with_capacity(n_seg);
    let mut prev_psi = 0.0;
    for k in 0..n_seg {
        let dx = positions[[0, k + 1]] - positions[[0, k]];
        let dy = positions[[1, k + 1]] - positions[[1, k]];
        let d = (dx * dx + dy * dy).sqrt();
        let psi = if d > 1e-9 { dy.atan2(dx) } else { prev_psi };
        prev_psi = psi;
        speeds.push(d / tau);
        headings.push(psi);
    }
    let n_ctl = n_seg; // one control per rolled-out step
    let mut accel = Vec::with_capacity(n_ctl);
    let mut yaw_rate = Vec::with_capacity(n_ctl);
    for k in 0..n_seg - 1 {
        accel.push((speeds[k + 1] - speeds[k]) / tau);
        yaw_rate.push(wrap_angle(headings[k + 1] - headings[k]) / tau);
    }
    // Hold the last differenced value for the final step.
    accel.push(*accel.last().unwrap());
    yaw_rate.push(*yaw_rate.last().unwrap());
    let s0 = VehicleState::new(
        positions[[0, 0]],
        positions[[1, 0]],
        speeds[0].max(0.0),
        headings[0],
    )?;
    Ok((ControlSequence::new(accel, yaw_rate, tau)?, s0))
}
