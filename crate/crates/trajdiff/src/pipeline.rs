//! End-to-end orchestration: context training, denoiser training, and
//! prediction with uncertainty-adaptive guidance.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::context::{fit_cluster_gaussians, reinit_dead_codes, ClusterModel, ContextDims, ContextModel, Scenario, Standardizer};
use crate::denoiser::{sample_controls, train, ControlScaler, CountingDenoiser, Denoiser, DenoiserDims, MlpDenoiser, TrainConfig};
use crate::error::{Error, Result};
use crate::io::DatasetMeta;
use crate::metrics::MetricReport;
use crate::multimodal::{extract_hypotheses, mean_trajectory, pca_project, select_by_bic, HypothesisSet};
use crate::nn::{Optimizer, OptimizerKind};
use crate::scenario_gen::ScenarioRecord;
use crate::schedule::{build_linear_schedule, NoiseSchedule};
use crate::vmm::{rollout, ControlSequence, Trajectory, VehicleState};

/// RNG stream namespaces, so the same master seed drives independent
/// generators per purpose.
const STREAM_CONTEXT: u64 = 1 << 32;
const STREAM_DIFFUSION_INIT: u64 = 2 << 32;
const STREAM_PREDICTION: u64 = 3 << 32;

fn seeded(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trained context module, fitted cluster Gaussians, and the loss trace.
pub struct ContextTrainingOutput {
    pub model: ContextModel,
    pub clusters: ClusterModel,
    pub loss_trace: Vec<f64>,
}

/// Trains the scenario-conditioning module on a dataset, then freezes it,
/// assigns every scenario to a token, and fits the per-cluster Gaussians.
pub fn run_context_training(
    records: &[ScenarioRecord],
    meta: &DatasetMeta,
    cfg: &Config,
) -> Result<ContextTrainingOutput> {
    if records.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let scenarios: Vec<&Scenario> = records.iter().map(|r| &r.scenario).collect();
    let owned: Vec<Scenario> = scenarios.iter().map(|s| (*s).clone()).collect();
    let standardizer = Standardizer::fit(&owned)?;
    let dims = ContextDims {
        n_vehicles: meta.n_vehicles,
        n_features: meta.n_features,
        t_obs: meta.t_obs,
        latent: cfg.context.latent_dim,
        hidden: cfg.context.hidden.clone(),
        codebook_size: cfg.context.codebook_size,
    };
    let mut rng = seeded(cfg.seed, STREAM_CONTEXT);
    let mut model = ContextModel::new(dims, standardizer, &mut rng)?;
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.context.learning_rate);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut trace = Vec::with_capacity(cfg.context.epochs);
    for epoch in 0..cfg.context.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0.0;
        for chunk in order.chunks(cfg.context.batch_size.max(1)) {
            let batch: Vec<&Scenario> = chunk.iter().map(|&i| &records[i].scenario).collect();
            let (losses, grads, latents) =
                model.batch_loss_and_grads(&batch, cfg.context.beta_commit, cfg.context.lambda_cl)?;
            if !losses.total.is_finite() {
                return Err(Error::Divergence(format!(
                    "context loss became {} at epoch {epoch}",
                    losses.total
                )));
            }
            let gs: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
            let refs: Vec<&[f64]> = gs.iter().map(|v| v.as_slice()).collect();
            {
                let mut params = model.param_slices_mut();
                opt.step(&mut params, &refs);
            }
            let zs: Vec<_> = latents.iter().map(|(z, _)| z.clone()).collect();
            if cfg.context.reinit_enabled {
                reinit_dead_codes(
                    &mut model.codebook,
                    &zs,
                    cfg.context.reinit_decay,
                    cfg.context.reinit_threshold,
                    &mut rng,
                )?;
            } else {
                // Track usage without re-anchoring.
                let mut counts = vec![0.0f64; model.codebook.len()];
                for z in &zs {
                    let (_, token) = model.codebook.quantize(z)?;
                    counts[token - 1] += 1.0;
                }
                for idx in 0..model.codebook.len() {
                    model.codebook.usage[idx] = cfg.context.reinit_decay
                        * model.codebook.usage[idx]
                        + (1.0 - cfg.context.reinit_decay) * counts[idx];
                }
            }
            epoch_loss += losses.total;
            n_batches += 1.0;
        }
        trace.push(epoch_loss / n_batches);
    }

    // Freeze and fit the per-token Gaussians over the whole training set.
    let mut assignments = Vec::with_capacity(records.len());
    for r in records {
        let (z_hat, _, token) = model.tokenize(&r.scenario)?;
        assignments.push((token, z_hat));
    }
    let clusters = fit_cluster_gaussians(&assignments, &model.codebook)?;
    Ok(ContextTrainingOutput { model, clusters, loss_trace: trace })
}

/// Trained denoiser, the control scaler it was trained under, and the loss
/// trace.
pub struct DiffusionTrainingOutput {
    pub model: MlpDenoiser,
    pub scaler: ControlScaler,
    pub loss_trace: Vec<f64>,
}

/// Labels every record with its frozen-context token and trains the velocity
/// predictor on the control sequences.
pub fn run_diffusion_training(
    records: &[ScenarioRecord],
    meta: &DatasetMeta,
    context: &ContextModel,
    cfg: &Config,
) -> Result<DiffusionTrainingOutput> {
    if records.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let schedule = build_linear_schedule(
        cfg.diffusion.t_steps,
        cfg.diffusion.beta_start,
        cfg.diffusion.beta_end,
    )?;
    let raw_controls: Vec<_> = records.iter().map(|r| r.controls.to_matrix()).collect();
    let scaler = ControlScaler::fit(&raw_controls)?;
    let mut dataset = Vec::with_capacity(records.len());
    for (r, m) in records.iter().zip(&raw_controls) {
        let (_, _, token) = context.tokenize(&r.scenario)?;
        dataset.push((scaler.normalize(m), Some(token)));
    }
    let dims = DenoiserDims {
        t_pred: meta.t_pred,
        t_max: cfg.diffusion.t_steps,
        q: context.dims.codebook_size,
        t_embed: cfg.diffusion.t_embed,
        cond_embed: cfg.diffusion.cond_embed,
        hidden: cfg.diffusion.hidden.clone(),
    };
    let mut rng = seeded(cfg.seed, STREAM_DIFFUSION_INIT);
    let mut model = MlpDenoiser::new(dims, &mut rng)?;
    let train_cfg = TrainConfig {
        batch_size: cfg.diffusion.batch_size,
        learning_rate: cfg.diffusion.learning_rate,
        epochs: cfg.diffusion.epochs,
        cond_dropout: cfg.diffusion.cond_dropout,
        rng_seed: cfg.seed,
        optimizer: OptimizerKind::Adam,
    };
    let loss_trace = train(&mut model, &dataset, &schedule, &train_cfg)?;
    Ok(DiffusionTrainingOutput { model, scaler, loss_trace })
}

/// Everything produced for one scenario prediction.
pub struct PredictionOutput {
    pub samples: Vec<Trajectory>,
    pub mean: Trajectory,
    pub hypotheses: HypothesisSet,
    pub token: usize,
    pub delta: f64,
    pub denoiser_calls: u64,
    pub metrics: Option<MetricReport>,
}

/// Runs the full prediction path for one scenario: encode, quantize, score
/// the scenario distance, draw control samples with adaptive guidance, roll
/// them out from the observed tail state, and extract hypotheses.
///
/// The distance depends only on the latent, so it is computed once and
/// reused at every diffusion step. Ground truth is optional; metrics are
/// attached when it is given.
#[allow(clippy::too_many_arguments)]
pub fn run_prediction(
    scenario: &Scenario,
    ground_truth: Option<&Trajectory>,
    context: &ContextModel,
    clusters: &ClusterModel,
    denoiser: &dyn Denoiser,
    scaler: &ControlScaler,
    schedule: &NoiseSchedule,
    meta: &DatasetMeta,
    cfg: &Config,
    scenario_index: u64,
) -> Result<PredictionOutput> {
    let (z_hat, _, token) = context.tokenize(scenario)?;
    let delta = clusters.delta(token, &z_hat)?;
    let counting = CountingDenoiser::new(denoiser);
    let mut rng = seeded(cfg.seed, STREAM_PREDICTION ^ scenario_index);
    let control_mats = sample_controls(
        &counting,
        schedule,
        token,
        delta,
        &cfg.guidance,
        cfg.sampling.ddim_steps,
        cfg.sampling.n_samples,
        meta.t_pred,
        &mut rng,
    )?;
    let s0 = VehicleState::from_track_tail(&scenario.target_track(), meta.obs_dt)?;
    let mut samples = Vec::with_capacity(control_mats.len());
    for m in &control_mats {
        let controls = ControlSequence::from_matrix(&scaler.denormalize(m), meta.tau)?;
        samples.push(rollout(&s0, &controls)?);
    }
    let mean = mean_trajectory(&samples)?;
    let points = pca_project(&samples, 2)?;
    let (gmm, _) = select_by_bic(&points, cfg.sampling.c_max, &mut rng, cfg.sampling.gmm_restarts)?;
    let hypotheses = extract_hypotheses(&samples, &gmm, &points)?;
    let metrics = match ground_truth {
        Some(gt) => Some(MetricReport::from_prediction(&mean, &hypotheses, gt)?),
        None => None,
    };
    Ok(PredictionOutput {
        samples,
        mean,
        hypotheses,
        token,
        delta,
        denoiser_calls: counting.calls(),
        metrics,
    })
}

/// Straight-line extrapolation of the observed tail at constant velocity;
/// the reference baseline for training-sanity checks.
pub fn constant_velocity_baseline(
    scenario: &Scenario,
    meta: &DatasetMeta,
) -> Result<Trajectory> {
    let s0 = VehicleState::from_track_tail(&scenario.target_track(), meta.obs_dt)?;
    let mut out = Array2::zeros((2, meta.t_pred));
    for k in 0..meta.t_pred {
        let t = meta.tau * (k + 1) as f64;
        out[[0, k]] = s0.x + s0.v * s0.psi.cos() * t;
        out[[1, k]] = s0.y + s0.v * s0.psi.sin() * t;
    }
    Ok(out)
}

/// Aggregate of per-scenario metric reports: the mean of each mode metric.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub n_scenarios: usize,
    pub mean_ade: f64,
    pub mean_fde: f64,
    pub most_likely_ade: f64,
    pub most_likely_fde: f64,
    pub min_ade_k: f64,
    pub min_fde_k: f64,
}

impl AggregateMetrics {
    pub fn from_reports(reports: &[MetricReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::InvalidArgument("no metric reports to aggregate".into()));
        }
        let n = reports.len() as f64;
        let mut agg = AggregateMetrics { n_scenarios: reports.len(), ..Default::default() };
        for r in reports {
            agg.mean_ade += r.mean.ade / n;
            agg.mean_fde += r.mean.fde / n;
            agg.most_likely_ade += r.most_likely.ade / n;
            agg.most_likely_fde += r.most_likely.fde / n;
            agg.min_ade_k += r.min_ade_k / n;
            agg.min_fde_k += r.min_fde_k / n;
        }
        Ok(agg)
    }
}

/// Per-scenario entry of the run manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub index: usize,
    pub token: usize,
    /// Mahalanobis scenario distance; None when the cluster is unfittable.
    pub delta: Option<f64>,
    pub n_hypotheses: usize,
    pub denoiser_calls: u64,
}

/// Reproducibility record written next to prediction outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config_hash: String,
    pub context_checkpoint: String,
    pub model_checkpoint: String,
    pub n_scenarios: usize,
    pub n_samples: usize,
    pub ddim_steps: usize,
    pub total_denoiser_calls: u64,
    pub scenarios: Vec<ScenarioManifest>,
    pub metrics: Option<AggregateMetrics>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario_gen::{generate_dataset, GenConfig};

    fn mini_config() -> Config {
        let mut cfg = Config::default();
        cfg.gen = GenConfig { n_scenarios: 24, ..Default::default() };
        cfg.context.hidden = vec![24];
        cfg.context.latent_dim = 8;
        cfg.context.codebook_size = 6;
        cfg.context.epochs = 4;
        cfg.context.learning_rate = 1e-3;
        cfg.context.batch_size = 12;
        cfg.diffusion.t_steps = 100;
        cfg.diffusion.hidden = vec![32, 32];
        cfg.diffusion.epochs = 3;
        cfg.diffusion.batch_size = 12;
        cfg.diffusion.learning_rate = 1e-3;
        cfg.sampling.ddim_steps = 5;
        cfg.sampling.n_samples = 4;
        cfg
    }

    fn meta_for(cfg: &Config) -> DatasetMeta {
        DatasetMeta {
            n_vehicles: cfg.gen.n_vehicles,
            n_features: 4,
            t_obs: cfg.gen.t_obs_steps,
            t_pred: cfg.gen.t_pred_steps,
            tau: cfg.gen.tau,
            obs_dt: cfg.gen.obs_dt(),
            seed: cfg.seed,
        }
    }

    #[test]
    fn end_to_end_prediction_shapes_and_counts() {
        let cfg = mini_config();
        let records = generate_dataset(&cfg.gen).unwrap();
        let meta = meta_for(&cfg);
        let ctx = run_context_training(&records, &meta, &cfg).unwrap();
        // Every scenario tokenizes into range after freezing.
        for r in &records {
            let (_, _, token) = ctx.model.tokenize(&r.scenario).unwrap();
            assert!(token >= 1 && token <= cfg.context.codebook_size);
        }
        let diff = run_diffusion_training(&records, &meta, &ctx.model, &cfg).unwrap();
        let schedule = build_linear_schedule(
            cfg.diffusion.t_steps,
            cfg.diffusion.beta_start,
            cfg.diffusion.beta_end,
        )
        .unwrap();
        let out = run_prediction(
            &records[0].scenario,
            Some(&records[0].future),
            &ctx.model,
            &ctx.clusters,
            &diff.model,
            &diff.scaler,
            &schedule,
            &meta,
            &cfg,
            0,
        )
        .unwrap();
        assert_eq!(out.samples.len(), cfg.sampling.n_samples);
        assert_eq!(out.denoiser_calls, 2 * (cfg.sampling.ddim_steps * cfg.sampling.n_samples) as u64);
        assert_eq!(out.mean.dim(), (2, meta.t_pred));
        let total: usize = out.hypotheses.hypotheses.iter().map(|h| h.members.len()).sum();
        assert_eq!(total, cfg.sampling.n_samples);
        assert!(out.metrics.is_some());
        // Rollouts anchor at the target's current position: the first step
        // is one tau of motion away at most (bounded by speed).
        let s0 = VehicleState::from_track_tail(&records[0].scenario.target_track(), meta.obs_dt)
            .unwrap();
        for s in &out.samples {
            let dx = s[[0, 0]] - s0.x;
            let dy = s[[1, 0]] - s0.y;
            let step = (dx * dx + dy * dy).sqrt();
            assert!(step < (s0.v.abs() + 20.0) * meta.tau, "first step {step}");
        }
    }

    #[test]
    fn prediction_is_deterministic_per_seed_and_index() {
        let cfg = mini_config();
        let records = generate_dataset(&cfg.gen).unwrap();
        let meta = meta_for(&cfg);
        let ctx = run_context_training(&records, &meta, &cfg).unwrap();
        let diff = run_diffusion_training(&records, &meta, &ctx.model, &cfg).unwrap();
        let schedule = build_linear_schedule(
            cfg.diffusion.t_steps,
            cfg.diffusion.beta_start,
            cfg.diffusion.beta_end,
        )
        .unwrap();
        let a = run_prediction(
            &records[1].scenario, None, &ctx.model, &ctx.clusters, &diff.model, &diff.scaler,
            &schedule, &meta, &cfg, 1,
        )
        .unwrap();
        let b = run_prediction(
            &records[1].scenario, None, &ctx.model, &ctx.clusters, &diff.model, &diff.scaler,
            &schedule, &meta, &cfg, 1,
        )
        .unwrap();
        for (x, y) in a.samples.iter().zip(b.samples.iter()) {
            assert_eq!(x, y);
        }
        let c = run_prediction(
            &records[1].scenario, None, &ctx.model, &ctx.clusters, &diff.model, &diff.scaler,
            &schedule, &meta, &cfg, 2,
        )
        .unwrap();
        assert_ne!(a.samples[0], c.samples[0], "different scenario streams must differ");
    }

    #[test]
    fn context_training_is_deterministic() {
        let cfg = mini_config();
        let records = generate_dataset(&cfg.gen).unwrap();
        let meta = meta_for(&cfg);
        let a = run_context_training(&records, &meta, &cfg).unwrap();
        let b = run_context_training(&records, &meta, &cfg).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.model.codebook.entries, b.model.codebook.entries);
    }

    #[test]
    fn constant_velocity_baseline_extends_straight() {
        let cfg = mini_config();
        let records = generate_dataset(&cfg.gen).unwrap();
        let meta = meta_for(&cfg);
        let kl = records
            .iter()
            .find(|r| r.scenario.label == crate::context::ManeuverClass::Kl)
            .unwrap();
        let cv = constant_velocity_baseline(&kl.scenario, &meta).unwrap();
        // On a lane keep the baseline is close to the realized future.
        let err = crate::metrics::ade(&cv, &kl.future).unwrap();
        assert!(err < 3.0, "baseline ADE {err} on lane keep");
    }
}
