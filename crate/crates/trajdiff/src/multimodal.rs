//! Sample-count estimation, trajectory aggregation, and multimodal hypothesis
//! extraction: min-max scaling, PCA to two components, and a Gaussian mixture
//! selected by BIC.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, Cholesky};
use crate::vmm::Trajectory;

/// Raw confidence-interval sample-size value `(z * sigma / eps)^2`.
pub fn required_samples_raw(sigma_t: f64, eps_tol: f64, z: f64) -> Result<f64> {
    if !(eps_tol > 0.0) {
        return Err(Error::InvalidArgument(format!("eps_tol {} must be > 0", eps_tol)));
    }
    if !(sigma_t >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_t {} must be >= 0", sigma_t)));
    }
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::InvalidArgument(format!("quantile {} must be positive", z)));
    }
    let r = z * sigma_t / eps_tol;
    Ok(r * r)
}

/// Number of samples needed for the target mean-estimate accuracy,
/// `max(1, ceil(raw))`.
pub fn required_samples(sigma_t: f64, eps_tol: f64, z: f64) -> Result<usize> {
    let raw = required_samples_raw(sigma_t, eps_tol, z)?;
    Ok((raw.ceil() as usize).max(1))
}

/// Pooled positional standard deviation at prediction step `t`:
/// `sqrt(Var(x_t) + Var(y_t))` with population variances across samples.
pub fn pooled_std(samples: &[Trajectory], t: usize) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("pooled_std needs at least 2 samples".into()));
    }
    for s in samples {
        if t >= s.ncols() {
            return Err(Error::InvalidArgument(format!(
                "step {} outside trajectory of {} steps",
                t,
                s.ncols()
            )));
        }
    }
    let n = samples.len() as f64;
    let mut var_sum = 0.0;
    for row in 0..2 {
        let mean: f64 = samples.iter().map(|s| s[[row, t]]).sum::<f64>() / n;
        let var: f64 = samples.iter().map(|s| (s[[row, t]] - mean).powi(2)).sum::<f64>() / n;
        var_sum += var;
    }
    Ok(var_sum.sqrt())
}

/// Elementwise mean across sample trajectories.
pub fn mean_trajectory(samples: &[Trajectory]) -> Result<Trajectory> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("mean of an empty sample set".into()));
    }
    let dim = samples[0].dim();
    let mut acc = Array2::<f64>::zeros(dim);
    for s in samples {
        if s.dim() != dim {
            return Err(Error::ShapeMismatch(format!("trajectory {:?} vs {:?}", s.dim(), dim)));
        }
        acc += s;
    }
    Ok(acc / samples.len() as f64)
}

/// Min-max scales the x and y channels of a sample set to [0, 1] (degenerate
/// spans map to 0) and flattens each trajectory to a row of the result.
///
/// Scaling is computed per sample set, so longitudinal variance does not
/// dominate the reduced representation.
pub fn minmax_scale_flatten(samples: &[Trajectory]) -> Result<Array2<f64>> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples".into()));
    }
    let dim = samples[0].dim();
    let t_len = dim.1;
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for s in samples {
        if s.dim() != dim {
            return Err(Error::ShapeMismatch(format!("trajectory {:?} vs {:?}", s.dim(), dim)));
        }
        for row in 0..2 {
            for k in 0..t_len {
                lo[row] = lo[row].min(s[[row, k]]);
                hi[row] = hi[row].max(s[[row, k]]);
            }
        }
    }
    let span = [hi[0] - lo[0], hi[1] - lo[1]];
    let mut flat = Array2::<f64>::zeros((samples.len(), 2 * t_len));
    for (i, s) in samples.iter().enumerate() {
        for row in 0..2 {
            for k in 0..t_len {
                let v = if span[row] > 0.0 { (s[[row, k]] - lo[row]) / span[row] } else { 0.0 };
                flat[[i, row * t_len + k]] = v;
            }
        }
    }
    Ok(flat)
}

/// Projects scaled, flattened trajectories onto their top `r` principal
/// components. Returns an `N x r` point matrix.
pub fn pca_project(samples: &[Trajectory], r: usize) -> Result<Array2<f64>> {
    let flat = minmax_scale_flatten(samples)?;
    let d = flat.ncols();
    if r == 0 || r > d {
        return Err(Error::InvalidArgument(format!("r {} outside 1..={}", r, d)));
    }
    let mean = flat.mean_axis(Axis(0)).unwrap();
    let centered = &flat - &mean;
    let cov = centered.t().dot(&centered) / flat.nrows() as f64;
    let (_, vecs) = symmetric_eigen(&cov)?;
    let basis = vecs.slice(ndarray::s![.., ..r]).to_owned();
    Ok(centered.dot(&basis))
}

/// Full-covariance Gaussian mixture fitted by expectation-maximization.
#[derive(Debug, Clone)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<Array1<f64>>,
    pub covariances: Vec<Array2<f64>>,
    /// Total log-likelihood of the fitted model on its training points.
    pub log_likelihood: f64,
    /// Log-likelihood after each EM iteration of the winning restart.
    pub ll_trace: Vec<f64>,
}

impl GmmModel {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// Per-component log densities `ln pi_c + ln N(x | mu_c, Sigma_c)`.
    fn weighted_log_densities(&self, x: &Array1<f64>) -> Vec<f64> {
        self.weights
            .iter()
            .zip(self.means.iter().zip(self.covariances.iter()))
            .map(|(&pi, (mu, cov))| {
                let ch = Cholesky::decompose(cov).expect("covariance kept PD by ridge");
                let diff = x - mu;
                let sol = ch.solve(&diff);
                let maha2: f64 = diff.iter().zip(sol.iter()).map(|(a, b)| a * b).sum();
                let d = mu.len() as f64;
                pi.ln() - 0.5 * (d * (2.0 * std::f64::consts::PI).ln() + ch.log_det() + maha2)
            })
            .collect()
    }

    /// Posterior responsibilities of each component for a point.
    pub fn responsibilities(&self, x: &Array1<f64>) -> Vec<f64> {
        let logs = self.weighted_log_densities(x);
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    /// Log density of the mixture at a point.
    pub fn log_density(&self, x: &Array1<f64>) -> f64 {
        let logs = self.weighted_log_densities(x);
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
    }
}

const GMM_ABS_RIDGE: f64 = 1e-6;
const GMM_REL_RIDGE: f64 = 0.20;
const EM_REL_TOL: f64 = 1e-8;
const EM_MAX_ITER: usize = 200;
/// Default number of seeded EM restarts.
pub const DEFAULT_RESTARTS: usize = 5;

/// Eigenvalue floor applied to every component covariance:
/// `1e-6 + 0.20 * mean per-axis variance` of the points being fit.
///
/// An absolute 1e-6 regularizer alone cannot keep best-of-restarts EM away
/// from degenerate single-point spikes at N = 9; the data-scaled floor bounds
/// component densities so BIC comparisons reflect cluster structure.
pub fn covariance_ridge(points: &Array2<f64>) -> f64 {
    let n = points.nrows() as f64;
    let d = points.ncols();
    let mean = points.mean_axis(Axis(0)).unwrap();
    let mut var_sum = 0.0;
    for j in 0..d {
        var_sum += points.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n;
    }
    GMM_ABS_RIDGE + GMM_REL_RIDGE * var_sum / d as f64
}

/// Floors the eigenvalues of a symmetric covariance at `ridge`.
///
/// Flooring in the eigenbasis is the exact maximizer of the EM M-step
/// objective over `{Sigma : Sigma >= ridge I}`, so the data log-likelihood
/// stays monotone across iterations (a diagonal ridge added after the exact
/// M-step would not guarantee that).
fn floor_cov(cov: Array2<f64>, ridge: f64) -> Array2<f64> {
    let (vals, vecs) = symmetric_eigen(&cov).expect("covariance is square");
    if vals.iter().all(|&v| v >= ridge) {
        return cov;
    }
    let d = cov.nrows();
    let mut out = Array2::<f64>::zeros((d, d));
    for c in 0..d {
        let lam = vals[c].max(ridge);
        let v = vecs.column(c);
        for i in 0..d {
            for j in 0..d {
                out[[i, j]] += lam * v[i] * v[j];
            }
        }
    }
    out
}

fn kmeans_pp_seeds(points: &Array2<f64>, c: usize, rng: &mut ChaCha12Rng) -> Vec<Array1<f64>> {
    let n = points.nrows();
    let mut centers: Vec<Array1<f64>> = Vec::with_capacity(c);
    centers.push(points.row(rng.random_range(0..n)).to_owned());
    while centers.len() < c {
        let d2: Vec<f64> = (0..n)
            .map(|i| {
                let p = points.row(i);
                centers
                    .iter()
                    .map(|ce| p.iter().zip(ce.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points.row(idx).to_owned());
    }
    centers
}

fn kmeans_assign(points: &Array2<f64>, centers: &[Array1<f64>]) -> Vec<usize> {
    (0..points.nrows())
        .map(|i| {
            let p = points.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, ce) in centers.iter().enumerate() {
                let d: f64 = p.iter().zip(ce.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn fit_gmm_once(points: &Array2<f64>, c: usize, rng: &mut ChaCha12Rng) -> GmmModel {
    let n = points.nrows();
    let d = points.ncols();
    let ridge = covariance_ridge(points);

    // K-means-style seeding.
    let mut centers = kmeans_pp_seeds(points, c, rng);
    let mut assign = kmeans_assign(points, &centers);
    for _ in 0..20 {
        for (ci, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == ci).collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = Array1::<f64>::zeros(d);
            for &i in &members {
                mean += &points.row(i);
            }
            *center = mean / members.len() as f64;
        }
        let next = kmeans_assign(points, &centers);
        if next == assign {
            break;
        }
        assign = next;
    }

    // Initial mixture parameters from the hard clustering.
    let data_mean = points.mean_axis(Axis(0)).unwrap();
    let centered = points - &data_mean;
    let data_cov = floor_cov(centered.t().dot(&centered) / n as f64, ridge);
    let mut weights = vec![0.0f64; c];
    let mut means = Vec::with_capacity(c);
    let mut covs = Vec::with_capacity(c);
    for ci in 0..c {
        let members: Vec<usize> = (0..n).filter(|&i| assign[i] == ci).collect();
        weights[ci] = members.len().max(1) as f64;
        if members.is_empty() {
            means.push(centers[ci].clone());
            covs.push(data_cov.clone());
            continue;
        }
        let mut mean = Array1::<f64>::zeros(d);
        for &i in &members {
            mean += &points.row(i);
        }
        mean /= members.len() as f64;
        let mut cov = Array2::<f64>::zeros((d, d));
        for &i in &members {
            let diff = &points.row(i) - &mean;
            for a in 0..d {
                for b in 0..d {
                    cov[[a, b]] += diff[a] * diff[b];
                }
            }
        }
        cov /= members.len() as f64;
        means.push(mean);
        covs.push(floor_cov(cov, ridge));
    }
    let wsum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= wsum;
    }

    let mut model = GmmModel {
        weights,
        means,
        covariances: covs,
        log_likelihood: f64::NEG_INFINITY,
        ll_trace: Vec::new(),
    };

    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..EM_MAX_ITER {
        // E-step.
        let mut resp = Array2::<f64>::zeros((n, c));
        let mut ll = 0.0;
        for i in 0..n {
            let x = points.row(i).to_owned();
            let logs = model.weighted_log_densities(&x);
            let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logs.iter().map(|l| (l - m).exp()).sum();
            ll += m + sum.ln();
            for ci in 0..c {
                resp[[i, ci]] = (logs[ci] - m).exp() / sum;
            }
        }
        model.log_likelihood = ll;
        model.ll_trace.push(ll);
        if prev_ll.is_finite() && (ll - prev_ll).abs() < EM_REL_TOL * ll.abs().max(1.0) {
            break;
        }
        prev_ll = ll;

        // M-step.
        for ci in 0..c {
            let nk: f64 = (0..n).map(|i| resp[[i, ci]]).sum();
            let nk_safe = nk.max(1e-12);
            model.weights[ci] = nk / n as f64;
            let mut mean = Array1::<f64>::zeros(d);
            for i in 0..n {
                mean.scaled_add(resp[[i, ci]], &points.row(i));
            }
            mean /= nk_safe;
            let mut cov = Array2::<f64>::zeros((d, d));
            for i in 0..n {
                let diff = &points.row(i) - &mean;
                let r = resp[[i, ci]];
                for a in 0..d {
                    for b in 0..d {
                        cov[[a, b]] += r * diff[a] * diff[b];
                    }
                }
            }
            cov /= nk_safe;
            model.means[ci] = mean;
            model.covariances[ci] = floor_cov(cov, ridge);
        }
        let wsum: f64 = model.weights.iter().sum();
        for w in &mut model.weights {
            *w /= wsum;
        }
    }
    model
}

/// Fits a `c`-component mixture, keeping the best of `restarts` seeded runs
/// by final log-likelihood.
pub fn fit_gmm_em(
    points: &Array2<f64>,
    c: usize,
    rng: &mut ChaCha12Rng,
    restarts: usize,
) -> Result<GmmModel> {
    if c == 0 || restarts == 0 {
        return Err(Error::InvalidArgument("need c >= 1 and restarts >= 1".into()));
    }
    if points.nrows() < c {
        return Err(Error::InvalidArgument(format!(
            "cannot fit {} components to {} points",
            c,
            points.nrows()
        )));
    }
    let mut best: Option<GmmModel> = None;
    for _ in 0..restarts {
        let model = fit_gmm_once(points, c, rng);
        if best.as_ref().map_or(true, |b| model.log_likelihood > b.log_likelihood) {
            best = Some(model);
        }
    }
    Ok(best.unwrap())
}

/// Learnable-parameter count of a `c`-component full-covariance mixture over
/// `dim` dimensions; `6c - 1` for `dim = 2`.
pub fn gmm_param_count(c: usize, dim: usize) -> usize {
    c * (dim + dim * (dim + 1) / 2) + c - 1
}

/// Fits mixtures with `1..=c_max` components and returns the one minimizing
/// `BIC = -2 ln L + p ln N`; ties go to the smaller component count.
pub fn select_by_bic(
    points: &Array2<f64>,
    c_max: usize,
    rng: &mut ChaCha12Rng,
    restarts: usize,
) -> Result<(GmmModel, usize)> {
    if c_max == 0 {
        return Err(Error::InvalidArgument("c_max must be >= 1".into()));
    }
    let n = points.nrows() as f64;
    let dim = points.ncols();
    let mut best: Option<(GmmModel, usize, f64)> = None;
    for c in 1..=c_max.min(points.nrows()) {
        let model = fit_gmm_em(points, c, rng, restarts)?;
        let p = gmm_param_count(c, dim) as f64;
        let bic = -2.0 * model.log_likelihood + p * n.ln();
        if best.as_ref().map_or(true, |(_, _, b)| bic < *b) {
            best = Some((model, c, bic));
        }
    }
    let (model, c, _) = best.ok_or_else(|| Error::InvalidArgument("no model fitted".into()))?;
    Ok((model, c))
}

/// One extracted motion mode: the mean trajectory over its member samples and
/// the (0-based) member indices.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub mean: Trajectory,
    pub members: Vec<usize>,
}

/// Hypotheses for one prediction; member sets partition the sample indices.
#[derive(Debug, Clone)]
pub struct HypothesisSet {
    pub hypotheses: Vec<Hypothesis>,
    pub n_samples: usize,
}

impl HypothesisSet {
    /// Empirical mode probability `|members| / N_samples`.
    pub fn probability(&self, idx: usize) -> f64 {
        self.hypotheses[idx].members.len() as f64 / self.n_samples as f64
    }

    /// Hypothesis with the largest member count; ties go to the lower index.
    pub fn most_likely(&self) -> &Hypothesis {
        let mut best = 0;
        for i in 1..self.hypotheses.len() {
            if self.hypotheses[i].members.len() > self.hypotheses[best].members.len() {
                best = i;
            }
        }
        &self.hypotheses[best]
    }
}

/// Assigns each sample to its maximum-responsibility component, averages the
/// member trajectories per component, and drops empty components.
pub fn extract_hypotheses(
    samples: &[Trajectory],
    gmm: &GmmModel,
    points: &Array2<f64>,
) -> Result<HypothesisSet> {
    if samples.len() != points.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} samples vs {} projected points",
            samples.len(),
            points.nrows()
        )));
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to cluster".into()));
    }
    let c = gmm.components();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
    for i in 0..samples.len() {
        let resp = gmm.responsibilities(&points.row(i).to_owned());
        let mut best = 0;
        for ci in 1..c {
            if resp[ci] > resp[best] {
                best = ci;
            }
        }
        members[best].push(i);
    }
    let mut hypotheses = Vec::new();
    for list in members.into_iter().filter(|m| !m.is_empty()) {
        let selected: Vec<Trajectory> = list.iter().map(|&i| samples[i].clone()).collect();
        hypotheses.push(Hypothesis { mean: mean_trajectory(&selected)?, members: list });
    }
    Ok(HypothesisSet { hypotheses, n_samples: samples.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn traj(points: &[(f64, f64)]) -> Trajectory {
        let mut m = Array2::zeros((2, points.len()));
        for (k, &(x, y)) in points.iter().enumerate() {
            m[[0, k]] = x;
            m[[1, k]] = y;
        }
        m
    }

    #[test]
    fn required_samples_examples() {
        // Raw value per the formula; the count floors at one sample.
        let raw = required_samples_raw(4.06, 2.81, 1.96).unwrap();
        assert!((raw - 8.019_579_002_292_27).abs() < 1e-12);
        assert_eq!(required_samples(4.06, 2.81, 1.96).unwrap(), 9);
        assert_eq!(required_samples(0.0, 2.81, 1.96).unwrap(), 1);
        // Doubling sigma quadruples the raw value.
        let r1 = required_samples_raw(2.0, 1.0, 1.96).unwrap();
        let r2 = required_samples_raw(4.0, 1.0, 1.96).unwrap();
        assert!((r2 - 4.0 * r1).abs() < 1e-12);
        assert!(required_samples(1.0, 0.0, 1.96).is_err());
    }

    #[test]
    fn required_samples_monotonicity() {
        let mut prev = 0;
        for i in 0..20 {
            let n = required_samples(i as f64 * 0.5, 1.0, 1.96).unwrap();
            assert!(n >= prev);
            prev = n;
        }
        let mut prev = usize::MAX;
        for i in 1..20 {
            let n = required_samples(3.0, i as f64 * 0.3, 1.96).unwrap();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn pooled_std_examples() {
        let a = traj(&[(0.0, 0.0), (1.0, 1.0)]);
        let b = traj(&[(2.0, 0.0), (1.0, 1.0)]);
        assert_eq!(pooled_std(&[a.clone(), a.clone()], 1).unwrap(), 0.0);
        assert!((pooled_std(&[a.clone(), b], 0).unwrap() - 1.0).abs() < 1e-15);
        assert!(pooled_std(&[a], 0).is_err());
    }

    #[test]
    fn pooled_std_matches_two_pass_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let samples: Vec<Trajectory> = (0..500)
            .map(|_| Array2::from_shape_fn((2, 5), |_| StandardNormal.sample(&mut rng)))
            .collect();
        let t = 3;
        let got = pooled_std(&samples, t).unwrap();
        // Independent two-pass computation.
        let n = samples.len() as f64;
        let mut expect = 0.0;
        for row in 0..2 {
            let mean: f64 = samples.iter().map(|s| s[[row, t]]).sum::<f64>() / n;
            let var: f64 = samples.iter().map(|s| (s[[row, t]] - mean).powi(2)).sum::<f64>() / n;
            expect += var;
        }
        assert!((got - expect.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn mean_trajectory_cases() {
        let a = traj(&[(1.0, 2.0), (3.0, 4.0)]);
        assert_eq!(mean_trajectory(&[a.clone()]).unwrap(), a);
        let neg = -&a;
        let m = mean_trajectory(&[a.clone(), neg]).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
        // Accumulate-then-divide oracle on 9 random samples.
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let samples: Vec<Trajectory> = (0..9)
            .map(|_| Array2::from_shape_fn((2, 7), |_| StandardNormal.sample(&mut rng)))
            .collect();
        let got = mean_trajectory(&samples).unwrap();
        for i in 0..2 {
            for k in 0..7 {
                let s: f64 = samples.iter().map(|t| t[[i, k]]).sum();
                assert!((got[[i, k]] - s / 9.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pca_rank1_data_has_negligible_second_component() {
        // Trajectories varying along a single direction in trajectory space.
        let base = traj(&[(0.0, 0.0), (1.0, 0.5), (2.0, 1.0)]);
        let dir = traj(&[(0.5, 0.1), (0.4, 0.2), (0.3, 0.3)]);
        let samples: Vec<Trajectory> = (0..6).map(|i| &base + &(i as f64 * &dir)).collect();
        let pts = pca_project(&samples, 2).unwrap();
        let var2: f64 = pts.column(1).iter().map(|v| v * v).sum();
        let var1: f64 = pts.column(0).iter().map(|v| v * v).sum();
        assert!(var2 < 1e-18 * var1.max(1.0), "var2 = {var2}");
    }

    #[test]
    fn pca_preserves_distances_on_rank2_data() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let b1 = Array2::from_shape_fn((2, 6), |_| StandardNormal.sample(&mut rng));
        let b2 = Array2::from_shape_fn((2, 6), |_| StandardNormal.sample(&mut rng));
        let samples: Vec<Trajectory> = (0..7)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                a * &b1 + b * &b2
            })
            .collect();
        let pts = pca_project(&samples, 2).unwrap();
        let flat = minmax_scale_flatten(&samples).unwrap();
        for i in 0..samples.len() {
            for j in i + 1..samples.len() {
                let d_flat: f64 = (&flat.row(i) - &flat.row(j)).iter().map(|v| v * v).sum();
                let d_proj: f64 = (&pts.row(i) - &pts.row(j)).iter().map(|v| v * v).sum();
                assert!(
                    (d_flat - d_proj).abs() < 1e-9 * d_flat.max(1e-9),
                    "({i},{j}): {d_flat} vs {d_proj}"
                );
            }
        }
    }

    #[test]
    fn pca_beats_random_projections_at_reconstruction() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let samples: Vec<Trajectory> = (0..9)
            .map(|_| Array2::from_shape_fn((2, 5), |_| StandardNormal.sample(&mut rng)))
            .collect();
        let flat = minmax_scale_flatten(&samples).unwrap();
        let mean = flat.mean_axis(Axis(0)).unwrap();
        let centered = &flat - &mean;
        let d = centered.ncols();
        let r = 2;

        // Projection residual || X - X B B^T ||^2 for an orthonormal basis B.
        let residual = |basis: &Array2<f64>| -> f64 {
            let proj = centered.dot(basis);
            let recon = proj.dot(&basis.t());
            (&centered - &recon).iter().map(|v| v * v).sum()
        };

        let cov = centered.t().dot(&centered) / flat.nrows() as f64;
        let (_, vecs) = symmetric_eigen(&cov).unwrap();
        let pca_basis = vecs.slice(ndarray::s![.., ..r]).to_owned();
        let pca_err = residual(&pca_basis);

        for _ in 0..20 {
            // Random orthonormal r-frame via Gram-Schmidt on Gaussian columns.
            let mut basis = Array2::<f64>::zeros((d, r));
            for c in 0..r {
                let mut v: Array1<f64> =
                    Array1::from_shape_fn(d, |_| StandardNormal.sample(&mut rng));
                for p in 0..c {
                    let prev = basis.column(p).to_owned();
                    let dot = v.dot(&prev);
                    v.scaled_add(-dot, &prev);
                }
                let norm = v.dot(&v).sqrt();
                v /= norm;
                basis.column_mut(c).assign(&v);
            }
            let rand_err = residual(&basis);
            assert!(pca_err <= rand_err + 1e-9, "pca {pca_err} vs random {rand_err}");
        }
    }

    #[test]
    fn single_component_gmm_is_closed_form() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let points = Array2::from_shape_fn((30, 2), |_| StandardNormal.sample(&mut rng));
        let model = fit_gmm_em(&points, 1, &mut rng, 1).unwrap();
        let mean = points.mean_axis(Axis(0)).unwrap();
        let centered = &points - &mean;
        let cov = centered.t().dot(&centered) / 30.0;
        assert!((model.weights[0] - 1.0).abs() < 1e-12);
        for k in 0..2 {
            assert!((model.means[0][k] - mean[k]).abs() < 1e-10);
        }
        // The eigenvalue floor is inactive on well-scattered data, so the
        // fitted covariance is exactly the maximum-likelihood one.
        for i in 0..2 {
            for j in 0..2 {
                assert!((model.covariances[0][[i, j]] - cov[[i, j]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn two_blob_fixture_recovers_centers() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let mut pts = Vec::new();
        for _ in 0..5 {
            let dx: f64 = StandardNormal.sample(&mut rng);
            let dy: f64 = StandardNormal.sample(&mut rng);
            pts.push([0.02 * dx, 0.02 * dy]);
        }
        for _ in 0..4 {
            let dx: f64 = StandardNormal.sample(&mut rng);
            let dy: f64 = StandardNormal.sample(&mut rng);
            pts.push([5.0 + 0.02 * dx, 5.0 + 0.02 * dy]);
        }
        let points = Array2::from_shape_fn((9, 2), |(i, j)| pts[i][j]);
        let model = fit_gmm_em(&points, 2, &mut rng, 5).unwrap();
        let mut centers: Vec<(f64, f64)> = model.means.iter().map(|m| (m[0], m[1])).collect();
        centers.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        assert!(centers[0].0.abs() < 0.1 && centers[0].1.abs() < 0.1);
        assert!((centers[1].0 - 5.0).abs() < 0.1 && (centers[1].1 - 5.0).abs() < 0.1);
        // Nesting: a 2-component fit is at least as likely as the 1-component fit.
        let single = fit_gmm_em(&points, 1, &mut rng, 1).unwrap();
        assert!(model.log_likelihood >= single.log_likelihood - 1e-9);
        // Responsibilities are practically hard on well-separated blobs.
        for i in 0..9 {
            let r = model.responsibilities(&points.row(i).to_owned());
            assert!(r.iter().cloned().fold(0.0, f64::max) > 0.999);
        }
    }

    #[test]
    fn em_log_likelihood_is_monotone() {
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let points = Array2::from_shape_fn((40, 2), |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * 2.0
        });
        for c in 1..=3 {
            let model = fit_gmm_em(&points, c, &mut rng, 3).unwrap();
            for w in model.ll_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "trace dip: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn param_count_formula() {
        assert_eq!(gmm_param_count(1, 2), 5);
        assert_eq!(gmm_param_count(2, 2), 11);
        assert_eq!(gmm_param_count(3, 2), 17);
    }

    #[test]
    fn bic_prefers_one_component_on_single_blob() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let points = Array2::from_shape_fn((9, 2), |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * 0.1
        });
        let (_, c) = select_by_bic(&points, 3, &mut rng, 5).unwrap();
        assert_eq!(c, 1);
    }

    #[test]
    fn bic_prefers_two_components_on_split_blobs() {
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        let points = Array2::from_shape_fn((9, 2), |(i, _)| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            if i < 5 {
                0.05 * noise
            } else {
                8.0 + 0.05 * noise
            }
        });
        let (_, c) = select_by_bic(&points, 3, &mut rng, 5).unwrap();
        assert_eq!(c, 2);
    }

    #[test]
    fn hypotheses_partition_samples() {
        let mut rng = ChaCha12Rng::seed_from_u64(47);
        let samples: Vec<Trajectory> = (0..9)
            .map(|i| {
                let lat = if i < 6 { 0.0 } else { 3.4 };
                let mut t = Array2::zeros((2, 10));
                for k in 0..10 {
                    t[[0, k]] = 5.0 * (k + 1) as f64;
                    let n: f64 = StandardNormal.sample(&mut rng);
                    t[[1, k]] = lat + 0.05 * n;
                }
                t
            })
            .collect();
        let pts = pca_project(&samples, 2).unwrap();
        let (gmm, c) = select_by_bic(&pts, 3, &mut rng, 5).unwrap();
        assert_eq!(c, 2);
        let hyp = extract_hypotheses(&samples, &gmm, &pts).unwrap();
        let total: usize = hyp.hypotheses.iter().map(|h| h.members.len()).sum();
        assert_eq!(total, 9);
        let mut seen = vec![false; 9];
        for h in &hyp.hypotheses {
            for &m in &h.members {
                assert!(!seen[m], "sample {m} in two hypotheses");
                seen[m] = true;
            }
        }
        let psum: f64 = (0..hyp.hypotheses.len()).map(|i| hyp.probability(i)).sum();
        assert!((psum - 1.0).abs() < 1e-12);
        // Member counts 6 and 3 here; the most likely mode is the larger one.
        assert_eq!(hyp.most_likely().members.len(), 6);
    }

    #[test]
    fn single_component_hypothesis_is_global_mean() {
        let mut rng = ChaCha12Rng::seed_from_u64(53);
        let samples: Vec<Trajectory> = (0..5)
            .map(|_| Array2::from_shape_fn((2, 4), |_| StandardNormal.sample(&mut rng)))
            .collect();
        let pts = pca_project(&samples, 2).unwrap();
        let gmm = fit_gmm_em(&pts, 1, &mut rng, 1).unwrap();
        let hyp = extract_hypotheses(&samples, &gmm, &pts).unwrap();
        assert_eq!(hyp.hypotheses.len(), 1);
        assert!((hyp.probability(0) - 1.0).abs() < 1e-15);
        let global = mean_trajectory(&samples).unwrap();
        let diff =
            (&hyp.hypotheses[0].mean - &global).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-12);
    }
}
