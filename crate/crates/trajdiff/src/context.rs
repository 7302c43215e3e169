//! Scenario encoding, vector quantization with dead-code re-anchoring, the
//! maneuver classifier head, and Mahalanobis scenario-uncertainty estimation.
//!
//! Training is single-threaded and seeded; once frozen, encode / quantize /
//! mahalanobis are read-only and safe to share.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::nn::{Dense, DenseGrad, Mlp};

/// Maneuver classes: lane keep, lane change left, lane change right.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManeuverClass {
    Kl,
    Lcl,
    Lcr,
}

pub const N_CLASSES: usize = 3;

impl ManeuverClass {
    pub fn index(self) -> usize {
        match self {
            ManeuverClass::Kl => 0,
            ManeuverClass::Lcl => 1,
            ManeuverClass::Lcr => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(ManeuverClass::Kl),
            1 => Ok(ManeuverClass::Lcl),
            2 => Ok(ManeuverClass::Lcr),
            _ => Err(Error::InvalidArgument(format!("class index {} outside 0..3", i))),
        }
    }

    pub fn one_hot(self) -> [f64; N_CLASSES] {
        let mut s = [0.0; N_CLASSES];
        s[self.index()] = 1.0;
        s
    }

    pub fn name(self) -> &'static str {
        match self {
            ManeuverClass::Kl => "kl",
            ManeuverClass::Lcl => "lcl",
            ManeuverClass::Lcr => "lcr",
        }
    }
}

/// Observed multi-agent tensor plus the maneuver label.
///
/// `xi` is `N x F x T_obs` with features `[x, y, v_x, v_y]`; absent vehicles
/// are zero-padded and flagged off in `present`. Vehicle 0 is the target.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub xi: Array3<f64>,
    pub present: Vec<bool>,
    pub label: ManeuverClass,
}

impl Scenario {
    pub fn new(xi: Array3<f64>, present: Vec<bool>, label: ManeuverClass) -> Result<Self> {
        if present.len() != xi.dim().0 {
            return Err(Error::ShapeMismatch(format!(
                "presence mask {} vs {} vehicles",
                present.len(),
                xi.dim().0
            )));
        }
        if xi.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("scenario tensor has non-finite entries".into()));
        }
        Ok(Self { xi, present, label })
    }

    /// Target-vehicle positions over the observation window, 2 x T_obs.
    pub fn target_track(&self) -> Array2<f64> {
        let t_obs = self.xi.dim().2;
        let mut out = Array2::zeros((2, t_obs));
        for k in 0..t_obs {
            out[[0, k]] = self.xi[[0, 0, k]];
            out[[1, k]] = self.xi[[0, 1, k]];
        }
        out
    }
}

/// Per-feature affine normalization fitted on the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

impl Standardizer {
    /// Statistics over present vehicles of all scenarios.
    pub fn fit(scenarios: &[Scenario]) -> Result<Self> {
        if scenarios.is_empty() {
            return Err(Error::InvalidArgument("cannot fit standardizer on empty set".into()));
        }
        let mut sum = [0.0f64; 4];
        let mut sum_sq = [0.0f64; 4];
        let mut count = [0.0f64; 4];
        for sc in scenarios {
            let (n, f, t) = sc.xi.dim();
            if f != 4 {
                return Err(Error::ShapeMismatch(format!("expected 4 features, got {}", f)));
            }
            for v in 0..n {
                if !sc.present[v] {
                    continue;
                }
                for feat in 0..4 {
                    for k in 0..t {
                        let x = sc.xi[[v, feat, k]];
                        sum[feat] += x;
                        sum_sq[feat] += x * x;
                        count[feat] += 1.0;
                    }
                }
            }
        }
        let mut mean = [0.0; 4];
        let mut std = [0.0; 4];
        for feat in 0..4 {
            let c = count[feat].max(1.0);
            mean[feat] = sum[feat] / c;
            let var = (sum_sq[feat] / c - mean[feat] * mean[feat]).max(0.0);
            std[feat] = var.sqrt().max(1e-9);
        }
        Ok(Self { mean, std })
    }

    /// Standardized, flattened scenario with the presence mask appended.
    /// Absent vehicles stay exactly zero.
    pub fn flatten(&self, sc: &Scenario) -> Vec<f64> {
        let (n, f, t) = sc.xi.dim();
        let mut out = Vec::with_capacity(n * f * t + n);
        for v in 0..n {
            for feat in 0..f {
                for k in 0..t {
                    let raw = sc.xi[[v, feat, k]];
                    out.push(if sc.present[v] {
                        (raw - self.mean[feat]) / self.std[feat]
                    } else {
                        0.0
                    });
                }
            }
        }
        for v in 0..n {
            out.push(if sc.present[v] { 1.0 } else { 0.0 });
        }
        out
    }
}

/// Learned prototype vectors with exponentially averaged usage counts.
#[derive(Debug, Clone)]
pub struct Codebook {
    /// Q x d entry matrix.
    pub entries: Array2<f64>,
    /// EMA of batch assignment counts, one per entry.
    pub usage: Array1<f64>,
}

impl Codebook {
    pub fn new(q: usize, dim: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        if q == 0 || dim == 0 {
            return Err(Error::InvalidArgument("codebook needs q >= 1 and dim >= 1".into()));
        }
        let entries = Array2::from_shape_fn((q, dim), |_| rng.random_range(-1.0..1.0));
        Ok(Self { entries, usage: Array1::zeros(q) })
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entry(&self, token: usize) -> Array1<f64> {
        self.entries.row(token - 1).to_owned()
    }

    /// Nearest entry by squared Euclidean distance; ties break to the lowest
    /// index. Tokens are 1-based so that 0 can denote the null condition.
    pub fn quantize(&self, z_hat: &Array1<f64>) -> Result<(Array1<f64>, usize)> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("empty codebook".into()));
        }
        if z_hat.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "latent dim {} vs codebook dim {}",
                z_hat.len(),
                self.dim()
            )));
        }
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (idx, row) in self.entries.rows().into_iter().enumerate() {
            let d: f64 = row.iter().zip(z_hat.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = idx;
            }
        }
        Ok((self.entries.row(best).to_owned(), best + 1))
    }

    /// Codebook usage perplexity `exp(-sum u ln u)` over normalized usage.
    pub fn perplexity(&self) -> f64 {
        let total: f64 = self.usage.sum();
        if total <= 0.0 {
            return 0.0;
        }
        let mut h = 0.0;
        for &u in self.usage.iter() {
            if u > 0.0 {
                let p = u / total;
                h -= p * p.ln();
            }
        }
        h.exp()
    }

    /// Fraction of entries with usage below `threshold`.
    pub fn dead_fraction(&self, threshold: f64) -> f64 {
        let dead = self.usage.iter().filter(|&&u| u < threshold).count();
        dead as f64 / self.len() as f64
    }
}

/// The three CVQ training terms for one sample. `commit` already carries the
/// commitment weight `beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvqLosses {
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
}

/// Squared-error CVQ losses: reconstruction `|xi - xi_hat|^2`, codebook pull
/// `|sg(z_hat) - z_q|^2`, and commitment `beta * |z_hat - sg(z_q)|^2`.
pub fn cvq_losses(
    xi: &[f64],
    xi_hat: &[f64],
    z_hat: &Array1<f64>,
    z_q: &Array1<f64>,
    beta: f64,
) -> Result<CvqLosses> {
    if xi.len() != xi_hat.len() {
        return Err(Error::ShapeMismatch(format!("xi {} vs xi_hat {}", xi.len(), xi_hat.len())));
    }
    if z_hat.len() != z_q.len() {
        return Err(Error::ShapeMismatch(format!("z_hat {} vs z_q {}", z_hat.len(), z_q.len())));
    }
    let recon: f64 = xi.iter().zip(xi_hat.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    let gap: f64 = z_hat.iter().zip(z_q.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(CvqLosses { recon, codebook: gap, commit: beta * gap })
}

/// Cross entropy of a softmax over `logits` against a one-hot label.
pub fn cross_entropy_from_logits(logits: &[f64], one_hot: &[f64]) -> Result<f64> {
    if logits.len() != one_hot.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits {} vs label {}",
            logits.len(),
            one_hot.len()
        )));
    }
    let ones = one_hot.iter().filter(|&&s| s == 1.0).count();
    if ones != 1 || one_hot.iter().any(|&s| s != 0.0 && s != 1.0) {
        return Err(Error::InvalidArgument("label must be one-hot".into()));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    let mut loss = 0.0;
    for (l, s) in logits.iter().zip(one_hot.iter()) {
        if *s == 1.0 {
            loss = lse - l;
        }
    }
    Ok(loss)
}

/// EMA-updates usage from batch assignments and re-anchors under-used
/// entries to batch latents.
///
/// Usage becomes `decay * usage + (1 - decay) * counts`. Every entry whose
/// updated usage falls below `threshold` is moved onto a batch latent drawn
/// with probability proportional to the latent's squared distance from its
/// assigned entry, and its usage resets to the post-update mean usage.
pub fn reinit_dead_codes(
    cb: &mut Codebook,
    batch_latents: &[Array1<f64>],
    decay: f64,
    threshold: f64,
    rng: &mut ChaCha12Rng,
) -> Result<usize> {
    if batch_latents.is_empty() {
        return Err(Error::InvalidArgument("reinit needs a non-empty batch".into()));
    }
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::InvalidArgument(format!("decay {} outside [0, 1)", decay)));
    }
    let q = cb.len();
    let mut counts = vec![0.0f64; q];
    let mut dist_sq = vec![0.0f64; batch_latents.len()];
    for (i, z) in batch_latents.iter().enumerate() {
        let (z_q, token) = cb.quantize(z)?;
        counts[token - 1] += 1.0;
        dist_sq[i] = z.iter().zip(z_q.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    }
    for idx in 0..q {
        cb.usage[idx] = decay * cb.usage[idx] + (1.0 - decay) * counts[idx];
    }
    let mean_usage = cb.usage.sum() / q as f64;
    let total_dist: f64 = dist_sq.iter().sum();
    let mut reinitialized = 0;
    for idx in 0..q {
        if cb.usage[idx] >= threshold {
            continue;
        }
        let pick = if total_dist > 0.0 {
            let mut target = rng.random_range(0.0..total_dist);
            let mut chosen = batch_latents.len() - 1;
            for (i, &w) in dist_sq.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..batch_latents.len())
        };
        cb.entries.row_mut(idx).assign(&batch_latents[pick]);
        cb.usage[idx] = mean_usage;
        reinitialized += 1;
    }
    Ok(reinitialized)
}

/// Gaussian fitted to one scenario cluster, with cached inverse and log-det.
#[derive(Debug, Clone)]
pub struct ClusterGaussian {
    pub mu: Array1<f64>,
    pub sigma: Array2<f64>,
    pub sigma_inv: Array2<f64>,
    pub log_det: f64,
}

impl ClusterGaussian {
    /// Builds from a mean and raw covariance, applying the relative ridge
    /// `1e-6 * trace / d` (absolute 1e-6 when the trace vanishes) before
    /// inversion.
    pub fn from_moments(mu: Array1<f64>, mut sigma: Array2<f64>) -> Result<Self> {
        let d = mu.len();
        if sigma.dim() != (d, d) {
            return Err(Error::ShapeMismatch(format!("sigma {:?} vs dim {}", sigma.dim(), d)));
        }
        let trace: f64 = sigma.diag().sum();
        let ridge = if trace > 0.0 { 1e-6 * trace / d as f64 } else { 1e-6 };
        for i in 0..d {
            sigma[[i, i]] += ridge;
        }
        let ch = Cholesky::decompose(&sigma)?;
        let log_det = ch.log_det();
        let sigma_inv = ch.inverse();
        Ok(Self { mu, sigma, sigma_inv, log_det })
    }

    /// Ridge value used by [`ClusterGaussian::from_moments`] for a given raw
    /// covariance trace.
    pub fn ridge_for(trace: f64, d: usize) -> f64 {
        if trace > 0.0 {
            1e-6 * trace / d as f64
        } else {
            1e-6
        }
    }
}

/// Covariance-weighted distance of a latent from a cluster mean.
pub fn mahalanobis(z_hat: &Array1<f64>, g: &ClusterGaussian) -> Result<f64> {
    if z_hat.len() != g.mu.len() {
        return Err(Error::ShapeMismatch(format!(
            "latent dim {} vs cluster dim {}",
            z_hat.len(),
            g.mu.len()
        )));
    }
    if z_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite latent".into()));
    }
    let diff = z_hat - &g.mu;
    let quad: f64 = diff.dot(&g.sigma_inv.dot(&diff));
    Ok(quad.max(0.0).sqrt())
}

/// Per-token cluster Gaussians; tokens without member latents stay
/// unfittable and report infinite distance (saturating the guidance scale).
#[derive(Debug, Clone, Default)]
pub struct ClusterModel {
    pub clusters: Vec<Option<ClusterGaussian>>,
}

impl ClusterModel {
    /// Scenario-uncertainty distance for a latent against its token cluster.
    pub fn delta(&self, token: usize, z_hat: &Array1<f64>) -> Result<f64> {
        let g = self
            .clusters
            .get(token - 1)
            .ok_or_else(|| Error::InvalidArgument(format!("token {} out of range", token)))?;
        match g {
            Some(g) => mahalanobis(z_hat, g),
            None => Ok(f64::INFINITY),
        }
    }
}

/// Fits one Gaussian per codebook entry from the latents assigned to it:
/// mean fixed to the entry itself, covariance the empirical second moment
/// about that mean.
pub fn fit_cluster_gaussians(
    assignments: &[(usize, Array1<f64>)],
    cb: &Codebook,
) -> Result<ClusterModel> {
    let d = cb.dim();
    let mut buckets: Vec<Vec<&Array1<f64>>> = vec![Vec::new(); cb.len()];
    for (token, z) in assignments {
        if *token == 0 || *token > cb.len() {
            return Err(Error::InvalidArgument(format!("token {} outside 1..={}", token, cb.len())));
        }
        if z.len() != d {
            return Err(Error::ShapeMismatch(format!("latent dim {} vs {}", z.len(), d)));
        }
        buckets[token - 1].push(z);
    }
    let mut clusters = Vec::with_capacity(cb.len());
    for (idx, members) in buckets.iter().enumerate() {
        if members.is_empty() {
            clusters.push(None);
            continue;
        }
        let mu = cb.entries.row(idx).to_owned();
        let mut sigma = Array2::<f64>::zeros((d, d));
        for z in members {
            let diff = *z - &mu;
            for a in 0..d {
                for b in 0..d {
                    sigma[[a, b]] += diff[a] * diff[b];
                }
            }
        }
        sigma /= members.len() as f64;
        clusters.push(Some(ClusterGaussian::from_moments(mu, sigma)?));
    }
    Ok(ClusterModel { clusters })
}

/// Architecture dimensions of the context module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextDims {
    pub n_vehicles: usize,
    pub n_features: usize,
    pub t_obs: usize,
    pub latent: usize,
    pub hidden: Vec<usize>,
    pub codebook_size: usize,
}

impl Default for ContextDims {
    fn default() -> Self {
        Self {
            n_vehicles: 9,
            n_features: 4,
            t_obs: 75,
            latent: 16,
            hidden: vec![64, 32],
            codebook_size: 60,
        }
    }
}

impl ContextDims {
    pub fn input_dim(&self) -> usize {
        self.n_vehicles * self.n_features * self.t_obs + self.n_vehicles
    }
}

/// The trainable scenario-conditioning module: encoder, decoder, linear
/// classifier, and the codebook.
#[derive(Debug, Clone)]
pub struct ContextModel {
    pub dims: ContextDims,
    pub standardizer: Standardizer,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub classifier: Dense,
    pub codebook: Codebook,
}

/// Mean per-sample loss terms of one training batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct ContextBatchLosses {
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub classifier: f64,
    pub total: f64,
}

/// Gradients of one context training batch, aligned with
/// [`ContextModel::param_slices_mut`].
pub struct ContextGrads {
    pub encoder: Vec<DenseGrad>,
    pub decoder: Vec<DenseGrad>,
    pub classifier: DenseGrad,
    pub codebook: Array2<f64>,
}

impl ContextModel {
    pub fn new(dims: ContextDims, standardizer: Standardizer, rng: &mut ChaCha12Rng) -> Result<Self> {
        let input = dims.input_dim();
        let mut enc_dims = vec![input];
        enc_dims.extend_from_slice(&dims.hidden);
        enc_dims.push(dims.latent);
        let mut dec_dims = vec![dims.latent];
        dec_dims.extend(dims.hidden.iter().rev());
        dec_dims.push(input);
        let encoder = Mlp::new(&enc_dims, rng);
        let decoder = Mlp::new(&dec_dims, rng);
        let classifier = Dense::new(dims.latent, N_CLASSES, rng);
        let codebook = Codebook::new(dims.codebook_size, dims.latent, rng)?;
        Ok(Self { dims, standardizer, encoder, decoder, classifier, codebook })
    }

    fn check_scenario(&self, sc: &Scenario) -> Result<()> {
        let want = (self.dims.n_vehicles, self.dims.n_features, self.dims.t_obs);
        if sc.xi.dim() != want {
            return Err(Error::ShapeMismatch(format!(
                "scenario {:?} vs model {:?}",
                sc.xi.dim(),
                want
            )));
        }
        Ok(())
    }

    /// Deterministic latent embedding of a scenario.
    pub fn encode(&self, sc: &Scenario) -> Result<Array1<f64>> {
        self.check_scenario(sc)?;
        let flat = self.standardizer.flatten(sc);
        let x = Array2::from_shape_vec((1, flat.len()), flat)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Ok(self.encoder.forward(&x).row(0).to_owned())
    }

    /// Encode, quantize, and return `(z_hat, z_q, token)`.
    pub fn tokenize(&self, sc: &Scenario) -> Result<(Array1<f64>, Array1<f64>, usize)> {
        let z_hat = self.encode(sc)?;
        let (z_q, token) = self.codebook.quantize(&z_hat)?;
        Ok((z_hat, z_q, token))
    }

    /// Per-sample classifier loss on a quantized latent.
    pub fn classifier_loss(&self, z_q: &Array1<f64>, one_hot: &[f64]) -> Result<f64> {
        let x = Array2::from_shape_vec((1, z_q.len()), z_q.to_vec())
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let logits = self.classifier.forward(&x);
        cross_entropy_from_logits(logits.row(0).to_slice().unwrap(), one_hot)
    }

    /// Forward/backward pass over one batch. Returns the mean losses, the
    /// parameter gradients, and the per-sample `(latent, token)` pairs for
    /// usage tracking.
    ///
    /// Gradient routing: the reconstruction and classifier branches read the
    /// quantized latent but propagate to the encoder through the
    /// straight-through estimator; the codebook entries learn only from the
    /// codebook pull term.
    pub fn batch_loss_and_grads(
        &self,
        batch: &[&Scenario],
        beta_commit: f64,
        lambda_cl: f64,
    ) -> Result<(ContextBatchLosses, ContextGrads, Vec<(Array1<f64>, usize)>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let b = batch.len();
        let input_dim = self.dims.input_dim();
        let latent = self.dims.latent;
        let mut x = Array2::zeros((b, input_dim));
        for (i, sc) in batch.iter().enumerate() {
            self.check_scenario(sc)?;
            let flat = self.standardizer.flatten(sc);
            for (j, v) in flat.into_iter().enumerate() {
                x[[i, j]] = v;
            }
        }

        let (z, enc_cache) = self.encoder.forward_cached(&x);
        let mut z_q = Array2::zeros((b, latent));
        let mut tokens = Vec::with_capacity(b);
        for i in 0..b {
            let (zq, token) = self.codebook.quantize(&z.row(i).to_owned())?;
            z_q.row_mut(i).assign(&zq);
            tokens.push(token);
        }

        let (x_hat, dec_cache) = self.decoder.forward_cached(&z_q);
        let logits = self.classifier.forward(&z_q);

        let inv_b = 1.0 / b as f64;
        let mut losses = ContextBatchLosses::default();
        let mut d_logits = Array2::zeros((b, N_CLASSES));
        for i in 0..b {
            let one_hot = batch[i].label.one_hot();
            let row: Vec<f64> = logits.row(i).to_vec();
            losses.classifier += cross_entropy_from_logits(&row, &one_hot)? * inv_b;
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|l| (l - m).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for c in 0..N_CLASSES {
                d_logits[[i, c]] = lambda_cl * (exps[c] / sum - one_hot[c]) * inv_b;
            }
        }

        let diff_x = &x_hat - &x;
        losses.recon = diff_x.iter().map(|v| v * v).sum::<f64>() * inv_b;
        let diff_z = &z - &z_q;
        let gap = diff_z.iter().map(|v| v * v).sum::<f64>() * inv_b;
        losses.codebook = gap;
        losses.commit = beta_commit * gap;
        losses.total = losses.recon + losses.codebook + losses.commit + lambda_cl * losses.classifier;

        // Reconstruction branch.
        let d_xhat = 2.0 * inv_b * &diff_x;
        let (dec_grads, d_zq_dec) = self.decoder.backward(&dec_cache, &d_xhat);
        // Classifier branch.
        let (cls_grad, d_zq_cls) = self.classifier.backward(&z_q, &d_logits);
        // Straight-through into the encoder, plus the commitment pull.
        let d_z = &d_zq_dec + &d_zq_cls + &(2.0 * beta_commit * inv_b * &diff_z);
        let (enc_grads, _) = self.encoder.backward(&enc_cache, &d_z);
        // Codebook pull: d/dz_q |sg(z_hat) - z_q|^2 accumulated per entry.
        let mut cb_grad = Array2::zeros(self.codebook.entries.dim());
        for i in 0..b {
            let token = tokens[i];
            for j in 0..latent {
                cb_grad[[token - 1, j]] += 2.0 * inv_b * (z_q[[i, j]] - z[[i, j]]);
            }
        }

        let latents: Vec<(Array1<f64>, usize)> =
            (0..b).map(|i| (z.row(i).to_owned(), tokens[i])).collect();
        Ok((
            losses,
            ContextGrads { encoder: enc_grads, decoder: dec_grads, classifier: cls_grad, codebook: cb_grad },
            latents,
        ))
    }

    /// Parameter tensors in a stable order, for the optimizer.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.encoder.layers {
            out.push(l.w.as_slice_mut().unwrap());
            out.push(l.b.as_slice_mut().unwrap());
        }
        for l in &mut self.decoder.layers {
            out.push(l.w.as_slice_mut().unwrap());
            out.push(l.b.as_slice_mut().unwrap());
        }
        out.push(self.classifier.w.as_slice_mut().unwrap());
        out.push(self.classifier.b.as_slice_mut().unwrap());
        out.push(self.codebook.entries.as_slice_mut().unwrap());
        out
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + self.decoder.param_count()
            + self.classifier.w.len()
            + self.classifier.b.len()
            + self.codebook.entries.len()
    }
}

impl ContextGrads {
    /// Gradient slices aligned with [`ContextModel::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in &self.encoder {
            out.push(g.dw.as_slice().unwrap());
            out.push(g.db.as_slice().unwrap());
        }
        for g in &self.decoder {
            out.push(g.dw.as_slice().unwrap());
            out.push(g.db.as_slice().unwrap());
        }
        out.push(self.classifier.dw.as_slice().unwrap());
        out.push(self.classifier.db.as_slice().unwrap());
        out.push(self.codebook.as_slice().unwrap());
        out
    }
}
