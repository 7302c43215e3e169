//! Command-line front end: dataset generation, the two training stages,
//! prediction, evaluation, the codebook-size ablation, and the per-token
//! divergence diagnostic.
//!
//! Exit codes: 0 success, 2 config/usage error, 3 data or checkpoint error,
//! 4 numerical divergence.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{config_hash, resolve_config_path, Config};
use crate::error::{Error, Result};
use crate::io::{
    export_dataset_csv, read_context_checkpoint, read_dataset, read_denoiser_checkpoint,
    read_trajectory_csv, write_context_checkpoint, write_dataset, write_denoiser_checkpoint,
    write_hypotheses_csv, write_loss_trace_csv, write_samples_csv, Dataset,
};
use crate::metrics::{ade_with, cluster_kl_report, fde_with, DisplacementNorm};
use crate::pipeline::{
    run_context_training, run_diffusion_training, run_prediction, AggregateMetrics, RunManifest,
    ScenarioManifest,
};
use crate::scenario_gen::generate_dataset;
use crate::schedule::build_linear_schedule;

#[derive(Parser, Debug)]
#[command(name = "trajdiff", version, about = "Conditioned-diffusion trajectory prediction")]
pub struct Cli {
    /// Overrides the config seed everywhere.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic highway dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also export an inspection CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train the scenario-conditioning module and freeze it.
    TrainContext {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train the diffusion velocity predictor against a frozen context.
    TrainDiffusion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        context: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Predict futures for every scenario in a dataset.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        context: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Trajectories drawn per scenario.
        #[arg(long)]
        samples: Option<usize>,
        /// Reduced reverse-pass step count.
        #[arg(long = "ddim-steps")]
        ddim_steps: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Predict only the first N scenarios.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score a prediction directory against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Rerun context training and evaluation across codebook sizes.
    AblateQ {
        /// Comma-separated codebook sizes, e.g. 30,60,90,128,256.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-token endpoint-distribution divergence report.
    DiagKl {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<(Config, String)> {
    let (mut cfg, hash) = match path {
        Some(p) => {
            let resolved = resolve_config_path(p);
            (Config::load(&resolved)?, config_hash(&resolved)?)
        }
        None => (Config::default(), "default".to_string()),
    };
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    Ok((cfg, hash))
}

fn scenario_csv_name(index: usize) -> String {
    format!("scn_{index:05}.csv")
}

fn load_dataset_checked(path: &Path, cfg: &Config) -> Result<Dataset> {
    let ds = read_dataset(path)?;
    if ds.meta.t_pred < 2 {
        return Err(Error::Data("dataset prediction grid too short".into()));
    }
    let _ = cfg;
    Ok(ds)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, csv } => {
            let (cfg, _) = load_config(&config, cli.seed)?;
            let records = generate_dataset(&cfg.gen)?;
            write_dataset(&out, &cfg.gen, &records)?;
            if let Some(csv_path) = csv {
                export_dataset_csv(&csv_path, &records)?;
            }
            println!("wrote {} scenarios to {}", records.len(), out.display());
            Ok(())
        }
        Command::TrainContext { data, config, out, trace } => {
            let (cfg, _) = load_config(&config, cli.seed)?;
            let ds = load_dataset_checked(&data, &cfg)?;
            let result = run_context_training(&ds.records, &ds.meta, &cfg)?;
            write_context_checkpoint(&out, &result.model, &result.clusters)?;
            if let Some(trace_path) = trace {
                write_loss_trace_csv(&trace_path, &result.loss_trace)?;
            }
            println!(
                "context trained on {} scenarios; final loss {:.6}; checkpoint {}",
                ds.records.len(),
                result.loss_trace.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }
        Command::TrainDiffusion { data, context, config, out, trace } => {
            let (cfg, _) = load_config(&config, cli.seed)?;
            let ds = load_dataset_checked(&data, &cfg)?;
            let (ctx_model, _) = read_context_checkpoint(&context)?;
            let result = run_diffusion_training(&ds.records, &ds.meta, &ctx_model, &cfg)?;
            write_denoiser_checkpoint(
                &out,
                &result.model,
                cfg.diffusion.beta_start,
                cfg.diffusion.beta_end,
                &result.scaler,
            )?;
            if let Some(trace_path) = trace {
                write_loss_trace_csv(&trace_path, &result.loss_trace)?;
            }
            println!(
                "denoiser trained ({} parameters); final loss {:.6}; checkpoint {}",
                result.model.param_count(),
                result.loss_trace.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }
        Command::Predict { data, context, model, samples, ddim_steps, config, out, limit } => {
            let (mut cfg, hash) = load_config(&config, cli.seed)?;
            if let Some(n) = samples {
                cfg.sampling.n_samples = n;
            }
            if let Some(s) = ddim_steps {
                cfg.sampling.ddim_steps = s;
            }
            cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
            let ds = load_dataset_checked(&data, &cfg)?;
            let (ctx_model, clusters) = read_context_checkpoint(&context)?;
            let (den_model, beta_start, beta_end, scaler) = read_denoiser_checkpoint(&model)?;
            if cfg.sampling.ddim_steps > den_model.dims.t_max {
                return Err(Error::Config(format!(
                    "{} reverse steps exceed the model's {}-step schedule",
                    cfg.sampling.ddim_steps, den_model.dims.t_max
                )));
            }
            // The checkpoint carries the schedule the model was trained on.
            let schedule = build_linear_schedule(den_model.dims.t_max, beta_start, beta_end)?;
            std::fs::create_dir_all(out.join("samples"))?;
            std::fs::create_dir_all(out.join("hypotheses"))?;
            let n_scenarios = limit.unwrap_or(ds.records.len()).min(ds.records.len());
            let mut manifest = RunManifest {
                seed: cfg.seed,
                config_hash: hash,
                context_checkpoint: context.display().to_string(),
                model_checkpoint: model.display().to_string(),
                n_scenarios,
                n_samples: cfg.sampling.n_samples,
                ddim_steps: cfg.sampling.ddim_steps,
                total_denoiser_calls: 0,
                scenarios: Vec::with_capacity(n_scenarios),
                metrics: None,
            };
            let mut reports = Vec::new();
            let mut means_file = std::io::BufWriter::new(std::fs::File::create(out.join("means.csv"))?);
            let mut wrote_header = false;
            for (i, record) in ds.records.iter().take(n_scenarios).enumerate() {
                let pred = run_prediction(
                    &record.scenario,
                    Some(&record.future),
                    &ctx_model,
                    &clusters,
                    &den_model,
                    &scaler,
                    &schedule,
                    &ds.meta,
                    &cfg,
                    i as u64,
                )?;
                write_samples_csv(&out.join("samples").join(scenario_csv_name(i)), &pred.samples)?;
                write_hypotheses_csv(
                    &out.join("hypotheses").join(scenario_csv_name(i)),
                    &pred.hypotheses,
                )?;
                if !wrote_header {
                    let mut header = String::from("scenario");
                    for k in 0..ds.meta.t_pred {
                        header.push_str(&format!(",x_{k}"));
                    }
                    for k in 0..ds.meta.t_pred {
                        header.push_str(&format!(",y_{k}"));
                    }
                    writeln!(means_file, "{header}")?;
                    wrote_header = true;
                }
                let mut line = format!("{i}");
                for k in 0..ds.meta.t_pred {
                    line.push_str(&format!(",{}", pred.mean[[0, k]]));
                }
                for k in 0..ds.meta.t_pred {
                    line.push_str(&format!(",{}", pred.mean[[1, k]]));
                }
                writeln!(means_file, "{line}")?;
                manifest.total_denoiser_calls += pred.denoiser_calls;
                manifest.scenarios.push(ScenarioManifest {
                    index: i,
                    token: pred.token,
                    delta: if pred.delta.is_finite() { Some(pred.delta) } else { None },
                    n_hypotheses: pred.hypotheses.hypotheses.len(),
                    denoiser_calls: pred.denoiser_calls,
                });
                if let Some(m) = pred.metrics {
                    reports.push(m);
                }
            }
            means_file.flush()?;
            if !reports.is_empty() {
                manifest.metrics = Some(AggregateMetrics::from_reports(&reports)?);
            }
            let json = serde_json::to_string_pretty(&manifest)
                .map_err(|e| Error::Data(e.to_string()))?;
            std::fs::write(out.join("manifest.json"), json)?;
            println!(
                "predicted {} scenarios ({} denoiser calls) into {}",
                n_scenarios,
                manifest.total_denoiser_calls,
                out.display()
            );
            Ok(())
        }
        Command::Evaluate { pred, data, out, config } => {
            let (cfg, _) = load_config(&config, cli.seed)?;
            let norm = if cfg.eval_squared {
                DisplacementNorm::Squared
            } else {
                DisplacementNorm::Euclidean
            };
            let ds = load_dataset_checked(&data, &cfg)?;
            let agg = evaluate_prediction_dir(&pred, &ds, norm)?;
            let mut w = std::io::BufWriter::new(std::fs::File::create(&out)?);
            writeln!(w, "mode,ade,fde")?;
            writeln!(w, "mean,{},{}", agg.mean_ade, agg.mean_fde)?;
            writeln!(w, "most_likely,{},{}", agg.most_likely_ade, agg.most_likely_fde)?;
            writeln!(w, "best_of_k,{},{}", agg.min_ade_k, agg.min_fde_k)?;
            w.flush()?;
            let json = serde_json::to_string_pretty(&agg).map_err(|e| Error::Data(e.to_string()))?;
            std::fs::write(out.with_extension("json"), json)?;
            println!(
                "evaluated {} scenarios: mean ADE {:.4} FDE {:.4}; best-of-K ADE {:.4}",
                agg.n_scenarios, agg.mean_ade, agg.mean_fde, agg.min_ade_k
            );
            Ok(())
        }
        Command::AblateQ { grid, data, config, out } => {
            let (cfg, _) = load_config(&config, cli.seed)?;
            let ds = load_dataset_checked(&data, &cfg)?;
            let qs: Vec<usize> = grid
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad grid entry '{v}'")))
                })
                .collect::<Result<_>>()?;
            if qs.is_empty() {
                return Err(Error::Config("empty ablation grid".into()));
            }
            let mut w = std::io::BufWriter::new(std::fs::File::create(&out)?);
            writeln!(
                w,
                "q,n_eval,mean_ade,mean_fde,most_likely_ade,most_likely_fde,min_ade_k,min_fde_k"
            )?;
            for q in qs {
                let mut run_cfg = cfg.clone();
                run_cfg.context.codebook_size = q;
                let agg = ablate_once(&ds, &run_cfg)?;
                writeln!(
                    w,
                    "{q},{},{},{},{},{},{},{}",
                    agg.n_scenarios,
                    agg.mean_ade,
                    agg.mean_fde,
                    agg.most_likely_ade,
                    agg.most_likely_fde,
                    agg.min_ade_k,
                    agg.min_fde_k
                )?;
                println!("q = {q}: mean ADE {:.4}, FDE {:.4}", agg.mean_ade, agg.mean_fde);
            }
            w.flush()?;
            Ok(())
        }
        Command::DiagKl { pred, data, out } => {
            let ds = read_dataset(&data)?;
            let report = kl_report_for_dir(&pred, &ds)?;
            let mut w = std::io::BufWriter::new(std::fs::File::create(&out)?);
            writeln!(w, "token,n_q,kl")?;
            for row in &report.rows {
                writeln!(w, "{},{},{}", row.token, row.n_q, row.kl)?;
            }
            w.flush()?;
            for token in &report.skipped {
                eprintln!("warning: token {token} skipped (fewer than two endpoints)");
            }
            println!("wrote {} divergence rows to {}", report.rows.len(), out.display());
            Ok(())
        }
    }
}

/// Scores a prediction directory against the dataset's ground truth under
/// the chosen displacement norm.
pub fn evaluate_prediction_dir(
    pred_dir: &Path,
    ds: &Dataset,
    norm: DisplacementNorm,
) -> Result<AggregateMetrics> {
    let means = read_trajectory_csv(&pred_dir.join("means.csv"), 1)?;
    if means.is_empty() {
        return Err(Error::Data("prediction directory has no mean trajectories".into()));
    }
    let mut agg = AggregateMetrics { n_scenarios: means.len(), ..Default::default() };
    let n = means.len() as f64;
    for (lead, mean_traj) in &means {
        let index: usize =
            lead[0].parse().map_err(|_| Error::Data(format!("bad scenario id '{}'", lead[0])))?;
        let record = ds
            .records
            .get(index)
            .ok_or_else(|| Error::Data(format!("scenario {index} not in dataset")))?;
        let gt = &record.future;
        let horizon = gt.ncols() - 1;
        agg.mean_ade += ade_with(mean_traj, gt, norm)? / n;
        agg.mean_fde += fde_with(mean_traj, gt, horizon, norm)? / n;

        let hyp_rows =
            read_trajectory_csv(&pred_dir.join("hypotheses").join(scenario_csv_name(index)), 2)?;
        if hyp_rows.is_empty() {
            return Err(Error::Data(format!("scenario {index} has no hypotheses")));
        }
        let mut best_p = f64::NEG_INFINITY;
        let mut ml_idx = 0;
        for (i, (lead, _)) in hyp_rows.iter().enumerate() {
            let p: f64 =
                lead[1].parse().map_err(|_| Error::Data(format!("bad p '{}'", lead[1])))?;
            if p > best_p {
                best_p = p;
                ml_idx = i;
            }
        }
        let (_, ml_traj) = &hyp_rows[ml_idx];
        agg.most_likely_ade += ade_with(ml_traj, gt, norm)? / n;
        agg.most_likely_fde += fde_with(ml_traj, gt, horizon, norm)? / n;
        let mut min_ade = f64::INFINITY;
        let mut min_fde = f64::INFINITY;
        for (_, traj) in &hyp_rows {
            min_ade = min_ade.min(ade_with(traj, gt, norm)?);
            min_fde = min_fde.min(fde_with(traj, gt, horizon, norm)?);
        }
        agg.min_ade_k += min_ade / n;
        agg.min_fde_k += min_fde / n;
    }
    Ok(agg)
}

/// Groups ground-truth and generated endpoints by token and estimates the
/// per-token divergence.
pub fn kl_report_for_dir(pred_dir: &Path, ds: &Dataset) -> Result<crate::metrics::KlReport> {
    let manifest_text = std::fs::read_to_string(pred_dir.join("manifest.json"))
        .map_err(|e| Error::Data(format!("manifest: {e}")))?;
    let manifest: RunManifest =
        serde_json::from_str(&manifest_text).map_err(|e| Error::Data(e.to_string()))?;
    use std::collections::BTreeMap;
    let mut gt_by_token: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    let mut gen_by_token: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for sm in &manifest.scenarios {
        let record = ds
            .records
            .get(sm.index)
            .ok_or_else(|| Error::Data(format!("scenario {} not in dataset", sm.index)))?;
        let gt = &record.future;
        let last = gt.ncols() - 1;
        gt_by_token.entry(sm.token).or_default().push((gt[[0, last]], gt[[1, last]]));
        let samples =
            read_trajectory_csv(&pred_dir.join("samples").join(scenario_csv_name(sm.index)), 1)?;
        for (_, traj) in &samples {
            let k = traj.ncols() - 1;
            gen_by_token.entry(sm.token).or_default().push((traj[[0, k]], traj[[1, k]]));
        }
    }
    let gt_sets: Vec<(usize, Vec<(f64, f64)>)> = gt_by_token.into_iter().collect();
    let gen_sets: Vec<(usize, Vec<(f64, f64)>)> = gen_by_token.into_iter().collect();
    Ok(cluster_kl_report(&gt_sets, &gen_sets))
}

/// One ablation pass: train context and denoiser on the leading 80% of the
/// records, evaluate predictions on the remaining 20%.
fn ablate_once(ds: &Dataset, cfg: &Config) -> Result<AggregateMetrics> {
    let n_train = (ds.records.len() * 4 / 5).max(1);
    let (train_recs, eval_recs) = ds.records.split_at(n_train);
    if eval_recs.is_empty() {
        return Err(Error::Data("dataset too small to hold out an evaluation split".into()));
    }
    let ctx = run_context_training(train_recs, &ds.meta, cfg)?;
    let diff = run_diffusion_training(train_recs, &ds.meta, &ctx.model, cfg)?;
    let schedule = build_linear_schedule(
        cfg.diffusion.t_steps,
        cfg.diffusion.beta_start,
        cfg.diffusion.beta_end,
    )?;
    let mut reports = Vec::new();
    for (i, record) in eval_recs.iter().enumerate() {
        let pred = run_prediction(
            &record.scenario,
            Some(&record.future),
            &ctx.model,
            &ctx.clusters,
            &diff.model,
            &diff.scaler,
            &schedule,
            &ds.meta,
            cfg,
            (n_train + i) as u64,
        )?;
        reports.push(pred.metrics.expect("ground truth was provided"));
    }
    AggregateMetrics::from_reports(&reports)
}
