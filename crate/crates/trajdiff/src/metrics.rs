//! Displacement metrics and the per-token endpoint-distribution divergence
//! diagnostic.



use crate::error::{Error, Result};
use crate::multimodal::HypothesisSet;
use crate::vmm::Trajectory;

/// Distance convention for the displacement metrics. Reported numbers use
/// plain Euclidean meters; the squared variant is kept behind a flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DisplacementNorm {
    #[default]
    Euclidean,
    Squared,
}

fn step_distance(pred: &Trajectory, gt: &Trajectory, k: usize, norm: DisplacementNorm) -> f64 {
    let dx = pred[[0, k]] - gt[[0, k]];
    let dy = pred[[1, k]] - gt[[1, k]];
    let sq = dx * dx + dy * dy;
    match norm {
        DisplacementNorm::Euclidean => sq.sqrt(),
        DisplacementNorm::Squared => sq,
    }
}

/// Average displacement error with an explicit norm choice.
pub fn ade_with(pred: &Trajectory, gt: &Trajectory, norm: DisplacementNorm) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::ShapeMismatch(format!("ade: {:?} vs {:?}", pred.dim(), gt.dim())));
    }
    let t_len = pred.ncols();
    if t_len == 0 {
        return Err(Error::InvalidArgument("empty trajectories".into()));
    }
    let sum: f64 = (0..t_len).map(|k| step_distance(pred, gt, k, norm)).sum();
    Ok(sum / t_len as f64)
}

/// Mean Euclidean distance between prediction and ground truth over all steps.
pub fn ade(pred: &Trajectory, gt: &Trajectory) -> Result<f64> {
    ade_with(pred, gt, DisplacementNorm::Euclidean)
}

/// Displacement at one horizon index with an explicit norm choice.
pub fn fde_with(
    pred: &Trajectory,
    gt: &Trajectory,
    horizon: usize,
    norm: DisplacementNorm,
) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::ShapeMismatch(format!("fde: {:?} vs {:?}", pred.dim(), gt.dim())));
    }
    if horizon >= pred.ncols() {
        return Err(Error::InvalidArgument(format!(
            "horizon {} outside 0..{}",
            horizon,
            pred.ncols()
        )));
    }
    Ok(step_distance(pred, gt, horizon, norm))
}

/// Euclidean distance at the final step.
pub fn fde(pred: &Trajectory, gt: &Trajectory) -> Result<f64> {
    if pred.ncols() == 0 {
        return Err(Error::InvalidArgument("empty trajectories".into()));
    }
    fde_with(pred, gt, pred.ncols() - 1, DisplacementNorm::Euclidean)
}

/// Best-of-K errors over the hypothesis mean trajectories.
pub fn min_over_hypotheses(hyps: &HypothesisSet, gt: &Trajectory) -> Result<(f64, f64)> {
    if hyps.hypotheses.is_empty() {
        return Err(Error::InvalidArgument("empty hypothesis set".into()));
    }
    let mut min_ade = f64::INFINITY;
    let mut min_fde = f64::INFINITY;
    for h in &hyps.hypotheses {
        min_ade = min_ade.min(ade(&h.mean, gt)?);
        min_fde = min_fde.min(fde(&h.mean, gt)?);
    }
    Ok((min_ade, min_fde))
}

/// One row of the cluster-usage divergence report.
#[derive(Debug, Clone, PartialEq)]
pub struct KlRow {
    pub token: usize,
    /// Ground-truth endpoint count for the token.
    pub n_q: usize,
    pub kl: f64,
}

/// Divergence report with tokens skipped for insufficient data.
#[derive(Debug, Clone, Default)]
pub struct KlReport {
    pub rows: Vec<KlRow>,
    pub skipped: Vec<usize>,
}

/// KL divergence between two planar point sets estimated on a shared
/// histogram over their union bounding box, with additive smoothing
/// `1 / (bins * n_points)` per distribution.
pub fn kl_between_point_sets(
    p_points: &[(f64, f64)],
    q_points: &[(f64, f64)],
    bins_x: usize,
    bins_y: usize,
) -> Result<f64> {
    if p_points.len() < 2 || q_points.len() < 2 {
        return Err(Error::InvalidArgument("each point set needs >= 2 points".into()));
    }
    if bins_x == 0 || bins_y == 0 {
        return Err(Error::InvalidArgument("histogram needs >= 1 bin per axis".into()));
    }
    let all = p_points.iter().chain(q_points.iter());
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::InvalidArgument("non-finite endpoint".into()));
        }
        lo.0 = lo.0.min(x);
        lo.1 = lo.1.min(y);
        hi.0 = hi.0.max(x);
        hi.1 = hi.1.max(y);
    }
    // Degenerate spans collapse everything into bin 0 on that axis.
    let span = ((hi.0 - lo.0).max(1e-12), (hi.1 - lo.1).max(1e-12));
    let bin_of = |x: f64, y: f64| -> usize {
        let bx = (((x - lo.0) / span.0 * bins_x as f64) as usize).min(bins_x - 1);
        let by = (((y - lo.1) / span.1 * bins_y as f64) as usize).min(bins_y - 1);
        by * bins_x + bx
    };
    let b = bins_x * bins_y;
    let histogram = |points: &[(f64, f64)]| -> Vec<f64> {
        let mut counts = vec![0.0f64; b];
        for &(x, y) in points {
            counts[bin_of(x, y)] += 1.0;
        }
        let n = points.len() as f64;
        let alpha = 1.0 / (b as f64 * n);
        let total = n + b as f64 * alpha;
        counts.into_iter().map(|c| (c + alpha) / total).collect()
    };
    let p = histogram(p_points);
    let q = histogram(q_points);
    Ok(p.iter().zip(q.iter()).map(|(&pi, &qi)| pi * (pi / qi).ln()).sum())
}

/// Default histogram resolution per axis for the divergence report.
pub const KL_DEFAULT_BINS: usize = 32;

/// Per-token divergence between ground-truth and generated endpoint sets,
/// emitted with the ground-truth count `N_q` for log-log inspection. Tokens
/// with fewer than two points on either side are recorded as skipped.
pub fn cluster_kl_report(
    gt_endpoints: &[(usize, Vec<(f64, f64)>)],
    gen_endpoints: &[(usize, Vec<(f64, f64)>)],
) -> KlReport {
    let mut report = KlReport::default();
    for (token, gt_set) in gt_endpoints {
        let gen_set = gen_endpoints.iter().find(|(t, _)| t == token).map(|(_, s)| s);
        match gen_set {
            Some(gen_set) if gt_set.len() >= 2 && gen_set.len() >= 2 => {
                match kl_between_point_sets(gt_set, gen_set, KL_DEFAULT_BINS, KL_DEFAULT_BINS) {
                    Ok(kl) => report.rows.push(KlRow { token: *token, n_q: gt_set.len(), kl }),
                    Err(_) => report.skipped.push(*token),
                }
            }
            _ => report.skipped.push(*token),
        }
    }
    report
}

/// Displacement summary for one prediction mode.
#[derive(Debug, Clone, Copy, Default, serde::Serialize)]
pub struct ModeMetrics {
    pub ade: f64,
    pub fde: f64,
}

/// Per-scenario metric report across the three aggregation modes.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricReport {
    /// Mean-trajectory errors.
    pub mean: ModeMetrics,
    /// Errors of the hypothesis with the highest empirical probability.
    pub most_likely: ModeMetrics,
    /// Best-of-K errors over hypothesis means.
    pub min_ade_k: f64,
    pub min_fde_k: f64,
}

impl MetricReport {
    pub fn from_prediction(
        mean: &Trajectory,
        hyps: &HypothesisSet,
        gt: &Trajectory,
    ) -> Result<Self> {
        let most = hyps.most_likely();
        let (min_ade_k, min_fde_k) = min_over_hypotheses(hyps, gt)?;
        Ok(Self {
            mean: ModeMetrics { ade: ade(mean, gt)?, fde: fde(mean, gt)? },
            most_likely: ModeMetrics { ade: ade(&most.mean, gt)?, fde: fde(&most.mean, gt)? },
            min_ade_k,
            min_fde_k,
        })
    }
}
