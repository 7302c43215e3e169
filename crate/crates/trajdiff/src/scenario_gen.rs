//! Deterministic synthetic highway-scenario generator.
//!
//! Each record is built from a smooth analytic maneuver template on a
//! three-lane carriageway (lane centers at -w, 0, +w with the target starting
//! in the middle lane). The template is sampled on the prediction grid,
//! inverted to controls, and the emitted future trajectory is the rollout of
//! those controls, so every record's controls reproduce its future exactly.
//! Lane-change transitions begin shortly before the prediction start so the
//! observation window carries a visible cue for the conditioning module.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::context::{ManeuverClass, Scenario};
use crate::error::{Error, Result};
use crate::vmm::{inverse_controls, rollout, ControlSequence, Trajectory, VehicleState};

/// Generator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub n_scenarios: usize,
    /// Lane width in meters.
    pub lane_width: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Maneuver mix over (kl, lcl, lcr); must sum to 1.
    pub mix: [f64; 3],
    pub rng_seed: u64,
    /// Prediction-grid increment in seconds.
    pub tau: f64,
    pub t_obs_steps: usize,
    pub t_pred_steps: usize,
    pub n_vehicles: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_scenarios: 256,
            lane_width: 3.4,
            speed_min: 25.0,
            speed_max: 40.0,
            mix: [1.0 / 3.0; 3],
            rng_seed: 0,
            tau: 0.2,
            t_obs_steps: 75,
            t_pred_steps: 25,
            n_vehicles: 9,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_scenarios == 0 {
            return Err(Error::InvalidArgument("n_scenarios must be >= 1".into()));
        }
        if (self.mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.mix.iter().any(|&m| m < 0.0) {
            return Err(Error::InvalidArgument(format!("maneuver mix {:?} must sum to 1", self.mix)));
        }
        if !(self.speed_min > 0.0 && self.speed_max >= self.speed_min) {
            return Err(Error::InvalidArgument("need 0 < speed_min <= speed_max".into()));
        }
        if self.tau <= 0.0 || self.lane_width <= 0.0 {
            return Err(Error::InvalidArgument("tau and lane_width must be positive".into()));
        }
        if self.t_obs_steps < 3 || self.t_pred_steps < 2 || self.n_vehicles < 1 {
            return Err(Error::InvalidArgument("grid too small".into()));
        }
        Ok(())
    }

    /// Observation-grid increment; 75 steps span the 3 s window at 25 Hz.
    pub fn obs_dt(&self) -> f64 {
        3.0 / self.t_obs_steps as f64
    }
}

/// One dataset record: the observed scenario, the realized future, and the
/// control sequence the future is the exact rollout of.
#[derive(Debug, Clone)]
pub struct ScenarioRecord {
    pub scenario: Scenario,
    pub future: Trajectory,
    pub controls: ControlSequence,
    pub init_state: VehicleState,
}

/// Polynomial smoothstep: exactly 0 before the window, exactly 1 after it,
/// twice differentiable inside.
fn smootherstep(u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else if u >= 1.0 {
        1.0
    } else {
        u * u * u * (10.0 + u * (-15.0 + 6.0 * u))
    }
}

fn smootherstep_deriv(u: f64) -> f64 {
    if !(0.0..=1.0).contains(&u) {
        0.0
    } else {
        30.0 * u * u * (1.0 - u) * (1.0 - u)
    }
}

/// Continuous target-vehicle template over template time (0 = prediction
/// start; observation looks at negative times).
struct ManeuverTemplate {
    v0: f64,
    jitter_amp: f64,
    jitter_omega: f64,
    jitter_phase: f64,
    /// Signed lateral goal: +w for lcl, -w for lcr, 0 for lane keep.
    lateral_goal: f64,
    onset: f64,
    duration: f64,
    wander_amp: f64,
    wander_omega: f64,
    wander_phase: f64,
}

impl ManeuverTemplate {
    fn draw(label: ManeuverClass, cfg: &GenConfig, rng: &mut ChaCha12Rng) -> Self {
        let v0 = rng.random_range(cfg.speed_min..cfg.speed_max.max(cfg.speed_min + 1e-9));
        let lateral_goal = match label {
            ManeuverClass::Kl => 0.0,
            ManeuverClass::Lcl => cfg.lane_width,
            ManeuverClass::Lcr => -cfg.lane_width,
        };
        Self {
            v0,
            jitter_amp: rng.random_range(0.0..0.4),
            jitter_omega: rng.random_range(0.3..0.8),
            jitter_phase: rng.random_range(0.0..std::f64::consts::TAU),
            lateral_goal,
            onset: rng.random_range(-1.0..-0.2),
            duration: rng.random_range(3.0..4.0),
            wander_amp: rng.random_range(0.0..0.12),
            wander_omega: rng.random_range(0.2..0.5),
            wander_phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    /// Longitudinal position: integral of the jittered speed, zero at t = 0.
    fn x(&self, t: f64) -> f64 {
        let w = self.jitter_omega;
        self.v0 * t
            - self.jitter_amp / w * ((w * t + self.jitter_phase).cos() - self.jitter_phase.cos())
    }

    fn vx(&self, t: f64) -> f64 {
        self.v0 + self.jitter_amp * (self.jitter_omega * t + self.jitter_phase).sin()
    }

    fn y(&self, t: f64) -> f64 {
        let wander = self.wander_amp * (self.wander_omega * t + self.wander_phase).sin();
        let u = (t - self.onset) / self.duration;
        wander + self.lateral_goal * smootherstep(u)
    }

    fn vy(&self, t: f64) -> f64 {
        let wander =
            self.wander_amp * self.wander_omega * (self.wander_omega * t + self.wander_phase).cos();
        let u = (t - self.onset) / self.duration;
        wander + self.lateral_goal * smootherstep_deriv(u) / self.duration
    }
}

/// Deterministic class sequence realizing the mix with counts that differ by
/// at most one from the exact quotas.
fn class_sequence(n: usize, mix: [f64; 3]) -> Vec<ManeuverClass> {
    let mut emitted = [0usize; 3];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for c in 0..3 {
            let deficit = mix[c] * (i + 1) as f64 - emitted[c] as f64;
            if deficit > best_deficit + 1e-12 {
                best_deficit = deficit;
                best = c;
            }
        }
        emitted[best] += 1;
        out.push(ManeuverClass::from_index(best).unwrap());
    }
    out
}

fn generate_record(
    label: ManeuverClass,
    cfg: &GenConfig,
    rng: &mut ChaCha12Rng,
) -> Result<ScenarioRecord> {
    let template = ManeuverTemplate::draw(label, cfg, rng);
    let t_obs = cfg.t_obs_steps;
    let t_pred = cfg.t_pred_steps;
    let obs_dt = cfg.obs_dt();

    // Observation tensor: target in slot 0, neighbors afterwards.
    let mut xi = Array3::zeros((cfg.n_vehicles, 4, t_obs));
    let mut present = vec![false; cfg.n_vehicles];
    present[0] = true;
    for j in 0..t_obs {
        let t = -obs_dt * (t_obs - 1 - j) as f64;
        xi[[0, 0, j]] = template.x(t);
        xi[[0, 1, j]] = template.y(t);
        xi[[0, 2, j]] = template.vx(t);
        xi[[0, 3, j]] = template.vy(t);
    }

    let max_neighbors = cfg.n_vehicles - 1;
    let n_neighbors = if max_neighbors == 0 {
        0
    } else {
        rng.random_range(3.min(max_neighbors)..=8.min(max_neighbors))
    };
    for v in 1..=n_neighbors {
        present[v] = true;
        let lane = [-1.0, 0.0, 1.0][rng.random_range(0..3usize)];
        let y_n = lane * cfg.lane_width;
        // Same-lane neighbors keep a longer gap.
        let min_gap = if lane == 0.0 { 15.0 } else { 8.0 };
        let gap = rng.random_range(min_gap..80.0);
        let sign = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
        let x_off = sign * gap;
        let v_n = rng.random_range((cfg.speed_min - 5.0).max(1.0)..cfg.speed_max + 5.0);
        for j in 0..t_obs {
            let t = -obs_dt * (t_obs - 1 - j) as f64;
            xi[[v, 0, j]] = x_off + v_n * t;
            xi[[v, 1, j]] = y_n;
            xi[[v, 2, j]] = v_n;
            xi[[v, 3, j]] = 0.0;
        }
    }

    // Prediction grid: template positions, inverted to controls, re-rolled so
    // the emitted future is exactly the rollout of the emitted controls.
    let mut positions = Array2::zeros((2, t_pred + 1));
    for k in 0..=t_pred {
        let t = cfg.tau * k as f64;
        positions[[0, k]] = template.x(t);
        positions[[1, k]] = template.y(t);
    }
    let (controls, init_state) = inverse_controls(&positions, cfg.tau)?;
    let future = rollout(&init_state, &controls)?;

    let scenario = Scenario::new(xi, present, label)?;
    Ok(ScenarioRecord { scenario, future, controls, init_state })
}

/// Generates the full dataset; record `i` draws from stream `i` of the seeded
/// generator, so shards can be produced independently.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Vec<ScenarioRecord>> {
    cfg.validate()?;
    let labels = class_sequence(cfg.n_scenarios, cfg.mix);
    let mut out = Vec::with_capacity(cfg.n_scenarios);
    for (i, label) in labels.into_iter().enumerate() {
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.rng_seed);
        rng.set_stream(i as u64);
        out.push(generate_record(label, cfg, &mut rng)?);
    }
    Ok(out)
}

use rand::SeedableRng;

/// Reclassifies a record from its realized lateral displacement over the
/// prediction window; the checker behind the label-consistency invariant.
pub fn label_from_future(future: &Trajectory, start_y: f64, lane_width: f64) -> ManeuverClass {
    let dy = future[[1, future.ncols() - 1]] - start_y;
    if dy > lane_width / 2.0 {
        ManeuverClass::Lcl
    } else if dy < -lane_width / 2.0 {
        ManeuverClass::Lcr
    } else {
        ManeuverClass::Kl
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_counts_balanced_within_one() {
        let labels = class_sequence(9841, [1.0 / 3.0; 3]);
        let mut counts = [0usize; 3];
        for l in &labels {
            counts[l.index()] += 1;
        }
        let max = *counts.iter().max().unwrap();
        let min = *counts.iter().min().unwrap();
        assert!(max - min <= 1, "counts {counts:?}");
        assert_eq!(counts.iter().sum::<usize>(), 9841);
    }

    #[test]
    fn same_seed_reproduces_dataset() {
        let cfg = GenConfig { n_scenarios: 6, ..Default::default() };
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        for (ra, rb) in a.iter().zip(b.iter()) {
            assert_eq!(ra.scenario.xi, rb.scenario.xi);
            assert_eq!(ra.future, rb.future);
            assert_eq!(ra.controls.accel, rb.controls.accel);
        }
    }

    #[test]
    fn lane_keep_stays_in_lane() {
        let cfg = GenConfig { n_scenarios: 30, ..Default::default() };
        let records = generate_dataset(&cfg).unwrap();
        for r in records.iter().filter(|r| r.scenario.label == ManeuverClass::Kl) {
            let y0 = r.init_state.y;
            let y_end = r.future[[1, cfg.t_pred_steps - 1]];
            assert!((y_end - y0).abs() < 0.5, "lane keep drifted {}", y_end - y0);
        }
    }

    #[test]
    fn lane_change_reaches_adjacent_lane() {
        let cfg = GenConfig { n_scenarios: 30, ..Default::default() };
        let records = generate_dataset(&cfg).unwrap();
        let mut saw_lcl = false;
        for r in &records {
            let goal = match r.scenario.label {
                ManeuverClass::Lcl => cfg.lane_width,
                ManeuverClass::Lcr => -cfg.lane_width,
                ManeuverClass::Kl => continue,
            };
            saw_lcl |= r.scenario.label == ManeuverClass::Lcl;
            // The lateral goal is measured from the origin lane center; the
            // transition completes within the horizon.
            let y_end = r.future[[1, cfg.t_pred_steps - 1]];
            assert!(
                (y_end - goal).abs() < 0.3,
                "{:?} ended at {} vs goal {}",
                r.scenario.label,
                y_end,
                goal
            );
        }
        assert!(saw_lcl);
    }

    #[test]
    fn controls_round_trip_exactly_onto_future() {
        let cfg = GenConfig { n_scenarios: 12, ..Default::default() };
        let records = generate_dataset(&cfg).unwrap();
        for r in &records {
            let rebuilt = rollout(&r.init_state, &r.controls).unwrap();
            let max_err = (0..cfg.t_pred_steps)
                .map(|k| {
                    let dx = rebuilt[[0, k]] - r.future[[0, k]];
                    let dy = rebuilt[[1, k]] - r.future[[1, k]];
                    (dx * dx + dy * dy).sqrt()
                })
                .fold(0.0, f64::max);
            assert!(max_err < 0.1, "round trip error {max_err}");
        }
    }

    #[test]
    fn labels_match_realized_displacement() {
        let cfg = GenConfig { n_scenarios: 45, ..Default::default() };
        let records = generate_dataset(&cfg).unwrap();
        for r in &records {
            let recomputed = label_from_future(&r.future, r.init_state.y, cfg.lane_width);
            assert_eq!(recomputed, r.scenario.label);
        }
    }

    #[test]
    fn observation_window_ends_at_prediction_start() {
        let cfg = GenConfig { n_scenarios: 3, ..Default::default() };
        let records = generate_dataset(&cfg).unwrap();
        for r in &records {
            let t_obs = cfg.t_obs_steps;
            // Last observed position is the rollout anchor.
            let x_last = r.scenario.xi[[0, 0, t_obs - 1]];
            let y_last = r.scenario.xi[[0, 1, t_obs - 1]];
            assert!((x_last - r.init_state.x).abs() < 1e-9);
            assert!((y_last - r.init_state.y).abs() < 1e-9);
        }
    }

    #[test]
    fn presence_mask_consistent_with_padding() {
        let cfg = GenConfig { n_scenarios: 10, ..Default::default() };
        let records = generate_dataset(&cfg).unwrap();
        for r in &records {
            for v in 0..cfg.n_vehicles {
                if !r.scenario.present[v] {
                    for f in 0..4 {
                        for k in 0..cfg.t_obs_steps {
                            assert_eq!(r.scenario.xi[[v, f, k]], 0.0);
                        }
                    }
                }
            }
            let n_present = r.scenario.present.iter().filter(|&&p| p).count();
            assert!((4..=9).contains(&n_present), "{n_present} vehicles present");
        }
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = GenConfig { n_scenarios: 0, ..Default::default() };
        assert!(generate_dataset(&cfg).is_err());
        cfg.n_scenarios = 1;
        cfg.mix = [0.5, 0.2, 0.2];
        assert!(generate_dataset(&cfg).is_err());
    }
}
