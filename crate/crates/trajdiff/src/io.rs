//! Binary dataset/checkpoint formats and CSV emitters.
//!
//! All binary payloads are little-endian; floats are 64-bit and written in
//! declaration order behind a magic/version header, so identical inputs
//! produce byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3};

use crate::context::{
    ClusterGaussian, ClusterModel, Codebook, ContextDims, ContextModel, ManeuverClass, Scenario,
    Standardizer,
};
use crate::denoiser::{ControlScaler, DenoiserDims, MlpDenoiser};
use crate::error::{Error, Result};
use crate::multimodal::HypothesisSet;
use crate::nn::{Dense, Mlp};
use crate::scenario_gen::{GenConfig, ScenarioRecord};
use crate::vmm::{ControlSequence, Trajectory, VehicleState};

const DATASET_MAGIC: &[u8; 4] = b"TDDS";
const CONTEXT_MAGIC: &[u8; 4] = b"TDCX";
const DENOISER_MAGIC: &[u8; 4] = b"TDDN";
const FORMAT_VERSION: u32 = 1;

struct BinWriter<W: Write> {
    w: W,
}

impl<W: Write> BinWriter<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        self.w.write_all(&[v])?;
        Ok(())
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.w.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.w.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.w.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) -> Result<()> {
        for v in vs {
            self.f64(*v)?;
        }
        Ok(())
    }
}

struct BinReader<R: Read> {
    r: R,
}

impl<R: Read> BinReader<R> {
    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.r.read_exact(&mut b)?;
        Ok(b[0])
    }
    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.r.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.r.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn expect_magic(&mut self, magic: &[u8; 4], what: &str) -> Result<()> {
        let mut b = [0u8; 4];
        self.r.read_exact(&mut b)?;
        if &b != magic {
            return Err(Error::Checkpoint(format!("{what}: bad magic {:?}", b)));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{what}: unsupported version {version} (expected {FORMAT_VERSION})"
            )));
        }
        Ok(())
    }
}

fn open_write(path: &Path) -> Result<BinWriter<BufWriter<File>>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(BinWriter { w: BufWriter::new(File::create(path)?) })
}

fn open_read(path: &Path, what: &str) -> Result<BinReader<BufReader<File>>> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("{what} {}: {e}", path.display())))?;
    Ok(BinReader { r: BufReader::new(file) })
}

/// Header metadata of a dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub n_vehicles: usize,
    pub n_features: usize,
    pub t_obs: usize,
    pub t_pred: usize,
    pub tau: f64,
    pub obs_dt: f64,
    pub seed: u64,
}

/// A loaded dataset: header metadata plus records.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<ScenarioRecord>,
}

pub fn write_dataset(path: &Path, cfg: &GenConfig, records: &[ScenarioRecord]) -> Result<()> {
    let mut w = open_write(path)?;
    w.w.write_all(DATASET_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.u64(records.len() as u64)?;
    w.u32(cfg.n_vehicles as u32)?;
    w.u32(4)?;
    w.u32(cfg.t_obs_steps as u32)?;
    w.u32(cfg.t_pred_steps as u32)?;
    w.f64(cfg.tau)?;
    w.f64(cfg.obs_dt())?;
    w.u64(cfg.rng_seed)?;
    for r in records {
        w.u8(r.scenario.label.index() as u8)?;
        for &p in &r.scenario.present {
            w.u8(p as u8)?;
        }
        w.f64s(r.scenario.xi.iter())?;
        w.f64s(r.future.iter())?;
        w.f64s(r.controls.to_matrix().iter())?;
        w.f64(r.init_state.x)?;
        w.f64(r.init_state.y)?;
        w.f64(r.init_state.v)?;
        w.f64(r.init_state.psi)?;
    }
    w.w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = open_read(path, "dataset")?;
    r.expect_magic(DATASET_MAGIC, "dataset")
        .map_err(|e| Error::Data(e.to_string()))?;
    let n_records = r.u64()? as usize;
    let n_vehicles = r.u32()? as usize;
    let n_features = r.u32()? as usize;
    let t_obs = r.u32()? as usize;
    let t_pred = r.u32()? as usize;
    let tau = r.f64()?;
    let obs_dt = r.f64()?;
    let seed = r.u64()?;
    if n_features != 4 {
        return Err(Error::Data(format!("expected 4 features, file has {n_features}")));
    }
    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let label = ManeuverClass::from_index(r.u8()? as usize)
            .map_err(|e| Error::Data(e.to_string()))?;
        let mut present = Vec::with_capacity(n_vehicles);
        for _ in 0..n_vehicles {
            present.push(r.u8()? != 0);
        }
        let xi_flat = r.f64s(n_vehicles * n_features * t_obs)?;
        let xi = Array3::from_shape_vec((n_vehicles, n_features, t_obs), xi_flat)
            .map_err(|e| Error::Data(e.to_string()))?;
        let fut_flat = r.f64s(2 * t_pred)?;
        let future = Array2::from_shape_vec((2, t_pred), fut_flat)
            .map_err(|e| Error::Data(e.to_string()))?;
        let ctl_flat = r.f64s(2 * t_pred)?;
        let ctl = Array2::from_shape_vec((2, t_pred), ctl_flat)
            .map_err(|e| Error::Data(e.to_string()))?;
        let controls = ControlSequence::from_matrix(&ctl, tau)?;
        let (x, y, v, psi) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let init_state = VehicleState::new(x, y, v, psi)?;
        let scenario = Scenario::new(xi, present, label)?;
        records.push(ScenarioRecord { scenario, future, controls, init_state });
    }
    Ok(Dataset {
        meta: DatasetMeta { n_vehicles, n_features, t_obs, t_pred, tau, obs_dt, seed },
        records,
    })
}

/// Human-inspectable dataset dump: one row per record with the label, the
/// initial state, and the future trajectory.
pub fn export_dataset_csv(path: &Path, records: &[ScenarioRecord]) -> Result<()> {
    let mut w = open_write(path)?;
    let t_pred = records.first().map_or(0, |r| r.future.ncols());
    let mut header = String::from("record,label,x0,y0,v0,psi0");
    for k in 0..t_pred {
        header.push_str(&format!(",x_{k}"));
    }
    for k in 0..t_pred {
        header.push_str(&format!(",y_{k}"));
    }
    writeln!(w.w, "{header}")?;
    for (i, r) in records.iter().enumerate() {
        let mut line = format!(
            "{},{},{},{},{},{}",
            i,
            r.scenario.label.name(),
            r.init_state.x,
            r.init_state.y,
            r.init_state.v,
            r.init_state.psi
        );
        for k in 0..t_pred {
            line.push_str(&format!(",{}", r.future[[0, k]]));
        }
        for k in 0..t_pred {
            line.push_str(&format!(",{}", r.future[[1, k]]));
        }
        writeln!(w.w, "{line}")?;
    }
    w.w.flush()?;
    Ok(())
}

fn write_mlp<W: Write>(w: &mut BinWriter<W>, mlp: &Mlp) -> Result<()> {
    for layer in &mlp.layers {
        w.f64s(layer.w.iter())?;
        w.f64s(layer.b.iter())?;
    }
    Ok(())
}

fn read_mlp<R: Read>(r: &mut BinReader<R>, dims: &[usize]) -> Result<Mlp> {
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for pair in dims.windows(2) {
        let (in_dim, out_dim) = (pair[0], pair[1]);
        let w_flat = r.f64s(out_dim * in_dim)?;
        let w = Array2::from_shape_vec((out_dim, in_dim), w_flat)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let b = Array1::from_vec(r.f64s(out_dim)?);
        layers.push(Dense { w, b });
    }
    Ok(Mlp { layers })
}

pub fn write_context_checkpoint(
    path: &Path,
    model: &ContextModel,
    clusters: &ClusterModel,
) -> Result<()> {
    let mut w = open_write(path)?;
    w.w.write_all(CONTEXT_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    let d = &model.dims;
    w.u32(d.n_vehicles as u32)?;
    w.u32(d.n_features as u32)?;
    w.u32(d.t_obs as u32)?;
    w.u32(d.latent as u32)?;
    w.u32(d.codebook_size as u32)?;
    w.u32(d.hidden.len() as u32)?;
    for &h in &d.hidden {
        w.u32(h as u32)?;
    }
    w.f64s(model.standardizer.mean.iter())?;
    w.f64s(model.standardizer.std.iter())?;
    write_mlp(&mut w, &model.encoder)?;
    write_mlp(&mut w, &model.decoder)?;
    w.f64s(model.classifier.w.iter())?;
    w.f64s(model.classifier.b.iter())?;
    w.f64s(model.codebook.entries.iter())?;
    w.f64s(model.codebook.usage.iter())?;
    if clusters.clusters.len() != d.codebook_size {
        return Err(Error::Checkpoint(format!(
            "{} cluster blocks for codebook of {}",
            clusters.clusters.len(),
            d.codebook_size
        )));
    }
    for c in &clusters.clusters {
        match c {
            None => w.u8(0)?,
            Some(g) => {
                w.u8(1)?;
                w.f64s(g.mu.iter())?;
                w.f64s(g.sigma.iter())?;
            }
        }
    }
    w.w.flush()?;
    Ok(())
}

pub fn read_context_checkpoint(path: &Path) -> Result<(ContextModel, ClusterModel)> {
    let mut r = open_read(path, "context checkpoint")?;
    r.expect_magic(CONTEXT_MAGIC, "context checkpoint")?;
    let n_vehicles = r.u32()? as usize;
    let n_features = r.u32()? as usize;
    let t_obs = r.u32()? as usize;
    let latent = r.u32()? as usize;
    let codebook_size = r.u32()? as usize;
    let n_hidden = r.u32()? as usize;
    let mut hidden = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden.push(r.u32()? as usize);
    }
    let dims = ContextDims { n_vehicles, n_features, t_obs, latent, hidden, codebook_size };
    let mean_v = r.f64s(4)?;
    let std_v = r.f64s(4)?;
    let standardizer = Standardizer {
        mean: [mean_v[0], mean_v[1], mean_v[2], mean_v[3]],
        std: [std_v[0], std_v[1], std_v[2], std_v[3]],
    };
    let input = dims.input_dim();
    let mut enc_dims = vec![input];
    enc_dims.extend_from_slice(&dims.hidden);
    enc_dims.push(latent);
    let mut dec_dims = vec![latent];
    dec_dims.extend(dims.hidden.iter().rev());
    dec_dims.push(input);
    let encoder = read_mlp(&mut r, &enc_dims)?;
    let decoder = read_mlp(&mut r, &dec_dims)?;
    let cls_w_flat = r.f64s(crate::context::N_CLASSES * latent)?;
    let cls_w = Array2::from_shape_vec((crate::context::N_CLASSES, latent), cls_w_flat)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let cls_b = Array1::from_vec(r.f64s(crate::context::N_CLASSES)?);
    let entries_flat = r.f64s(codebook_size * latent)?;
    let entries = Array2::from_shape_vec((codebook_size, latent), entries_flat)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let usage = Array1::from_vec(r.f64s(codebook_size)?);
    let mut clusters = Vec::with_capacity(codebook_size);
    for _ in 0..codebook_size {
        match r.u8()? {
            0 => clusters.push(None),
            1 => {
                let mu = Array1::from_vec(r.f64s(latent)?);
                let sigma_flat = r.f64s(latent * latent)?;
                let sigma = Array2::from_shape_vec((latent, latent), sigma_flat)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
                // Ridge was applied before writing; rebuild the caches from
                // the stored covariance directly.
                let ch = crate::linalg::Cholesky::decompose(&sigma)
                    .map_err(|e| Error::Checkpoint(format!("stored covariance not PD: {e}")))?;
                clusters.push(Some(ClusterGaussian {
                    mu,
                    sigma: sigma.clone(),
                    sigma_inv: ch.inverse(),
                    log_det: ch.log_det(),
                }));
            }
            other => return Err(Error::Checkpoint(format!("bad cluster flag {other}"))),
        }
    }
    let model = ContextModel {
        dims,
        standardizer,
        encoder,
        decoder,
        classifier: Dense { w: cls_w, b: cls_b },
        codebook: Codebook { entries, usage },
    };
    Ok((model, ClusterModel { clusters }))
}

pub fn write_denoiser_checkpoint(
    path: &Path,
    model: &MlpDenoiser,
    beta_start: f64,
    beta_end: f64,
    scaler: &ControlScaler,
) -> Result<()> {
    let mut w = open_write(path)?;
    w.w.write_all(DENOISER_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    let d = &model.dims;
    w.u32(d.t_pred as u32)?;
    w.u32(d.t_max as u32)?;
    w.u32(d.q as u32)?;
    w.u32(d.t_embed as u32)?;
    w.u32(d.cond_embed as u32)?;
    w.u32(d.hidden.len() as u32)?;
    for &h in &d.hidden {
        w.u32(h as u32)?;
    }
    w.f64(beta_start)?;
    w.f64(beta_end)?;
    w.f64s(scaler.mean.iter())?;
    w.f64s(scaler.std.iter())?;
    write_mlp(&mut w, &model.net)?;
    w.f64s(model.cond_table.table.iter())?;
    w.w.flush()?;
    Ok(())
}

pub fn read_denoiser_checkpoint(path: &Path) -> Result<(MlpDenoiser, f64, f64, ControlScaler)> {
    let mut r = open_read(path, "denoiser checkpoint")?;
    r.expect_magic(DENOISER_MAGIC, "denoiser checkpoint")?;
    let t_pred = r.u32()? as usize;
    let t_max = r.u32()? as usize;
    let q = r.u32()? as usize;
    let t_embed = r.u32()? as usize;
    let cond_embed = r.u32()? as usize;
    let n_hidden = r.u32()? as usize;
    let mut hidden = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden.push(r.u32()? as usize);
    }
    let beta_start = r.f64()?;
    let beta_end = r.f64()?;
    let sc_mean = r.f64s(2)?;
    let sc_std = r.f64s(2)?;
    let scaler = ControlScaler { mean: [sc_mean[0], sc_mean[1]], std: [sc_std[0], sc_std[1]] };
    let dims = DenoiserDims { t_pred, t_max, q, t_embed, cond_embed, hidden };
    let mut net_dims = vec![dims.input_dim()];
    net_dims.extend_from_slice(&dims.hidden);
    net_dims.push(2 * t_pred);
    let net = read_mlp(&mut r, &net_dims)?;
    let table_flat = r.f64s((q + 1) * cond_embed)?;
    let table = Array2::from_shape_vec((q + 1, cond_embed), table_flat)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let model = MlpDenoiser { dims, net, cond_table: crate::nn::Embedding { table } };
    Ok((model, beta_start, beta_end, scaler))
}

/// `epoch,loss` rows.
pub fn write_loss_trace_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = open_write(path)?;
    writeln!(w.w, "epoch,loss")?;
    for (i, l) in trace.iter().enumerate() {
        writeln!(w.w, "{},{}", i, l)?;
    }
    w.w.flush()?;
    Ok(())
}

fn trajectory_csv_cells(t: &Trajectory) -> String {
    let mut line = String::new();
    for k in 0..t.ncols() {
        line.push_str(&format!(",{}", t[[0, k]]));
    }
    for k in 0..t.ncols() {
        line.push_str(&format!(",{}", t[[1, k]]));
    }
    line
}

fn trajectory_csv_header(prefix: &str, t_pred: usize) -> String {
    let mut h = String::from(prefix);
    for k in 0..t_pred {
        h.push_str(&format!(",x_{k}"));
    }
    for k in 0..t_pred {
        h.push_str(&format!(",y_{k}"));
    }
    h
}

/// One row per sampled trajectory.
pub fn write_samples_csv(path: &Path, samples: &[Trajectory]) -> Result<()> {
    let mut w = open_write(path)?;
    let t_pred = samples.first().map_or(0, |s| s.ncols());
    writeln!(w.w, "{}", trajectory_csv_header("sample", t_pred))?;
    for (i, s) in samples.iter().enumerate() {
        writeln!(w.w, "{}{}", i, trajectory_csv_cells(s))?;
    }
    w.w.flush()?;
    Ok(())
}

/// One row per hypothesis: id, probability, then the mean trajectory.
pub fn write_hypotheses_csv(path: &Path, hyps: &HypothesisSet) -> Result<()> {
    let mut w = open_write(path)?;
    let t_pred = hyps.hypotheses.first().map_or(0, |h| h.mean.ncols());
    writeln!(w.w, "{}", trajectory_csv_header("hypothesis,p", t_pred))?;
    for (i, h) in hyps.hypotheses.iter().enumerate() {
        writeln!(w.w, "{},{}{}", i, hyps.probability(i), trajectory_csv_cells(&h.mean))?;
    }
    w.w.flush()?;
    Ok(())
}

/// Parses a trajectory-per-row CSV written by the emitters above; returns
/// the leading non-coordinate cells and the trajectory per row.
pub fn read_trajectory_csv(path: &Path, leading: usize) -> Result<Vec<(Vec<String>, Trajectory)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Data("empty csv".into()))?;
    let n_cols = header.split(',').count();
    if n_cols < leading || (n_cols - leading) % 2 != 0 {
        return Err(Error::Data(format!("unexpected column count {n_cols}")));
    }
    let t_pred = (n_cols - leading) / 2;
    let mut out = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n_cols {
            return Err(Error::Data(format!("ragged csv row in {}", path.display())));
        }
        let lead: Vec<String> = cells[..leading].iter().map(|s| s.to_string()).collect();
        let mut traj = Array2::zeros((2, t_pred));
        for k in 0..t_pred {
            traj[[0, k]] = cells[leading + k]
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("bad float: {e}")))?;
            traj[[1, k]] = cells[leading + t_pred + k]
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("bad float: {e}")))?;
        }
        out.push((lead, traj));
    }
    Ok(out)
}
