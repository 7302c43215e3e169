//! Run configuration: a flat `key = value` text file with `#` comments.
//!
//! A config file plus the seed fully determines a run; commands hash the file
//! bytes into their manifest so reruns are attributable.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::scenario_gen::GenConfig;

/// Context-module training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub codebook_size: usize,
    pub beta_commit: f64,
    pub lambda_cl: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub reinit_enabled: bool,
    pub reinit_decay: f64,
    pub reinit_threshold: f64,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            hidden: vec![64, 32],
            codebook_size: 60,
            beta_commit: 0.25,
            lambda_cl: 1.0,
            learning_rate: 4.5e-6,
            batch_size: 64,
            epochs: 60,
            reinit_enabled: true,
            reinit_decay: 0.9,
            reinit_threshold: 0.1,
        }
    }
}

/// Diffusion-module settings: schedule plus denoiser training.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionConfig {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: Vec<usize>,
    pub t_embed: usize,
    pub cond_embed: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub cond_dropout: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            t_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            hidden: vec![64, 64, 64],
            t_embed: 16,
            cond_embed: 16,
            learning_rate: 2.0e-4,
            batch_size: 256,
            epochs: 200,
            cond_dropout: 0.10,
        }
    }
}

/// Sampling and hypothesis-extraction settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    pub n_samples: usize,
    pub ddim_steps: usize,
    pub c_max: usize,
    pub gmm_restarts: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { n_samples: 9, ddim_steps: 10, c_max: 3, gmm_restarts: 5 }
    }
}

/// Full run configuration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub seed: u64,
    pub gen: GenConfig,
    pub context: ContextConfig,
    pub diffusion: DiffusionConfig,
    pub guidance: GuidanceConfig,
    pub sampling: SamplingConfig,
    /// Report squared displacement errors instead of Euclidean ones.
    pub eval_squared: bool,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::Config(format!("cannot parse value '{value}' for key '{key}'")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("cannot parse list '{value}' for key '{key}'")))
        })
        .collect()
}

impl Config {
    /// Parses `key = value` lines; keys not listed keep their defaults,
    /// unknown keys are rejected, duplicate keys take the last value.
    pub fn from_str(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            seen.insert(key.to_string());
            match key {
                "seed" => cfg.seed = parse(key, value)?,
                "gen.n_scenarios" => cfg.gen.n_scenarios = parse(key, value)?,
                "gen.lane_width" => cfg.gen.lane_width = parse(key, value)?,
                "gen.speed_min" => cfg.gen.speed_min = parse(key, value)?,
                "gen.speed_max" => cfg.gen.speed_max = parse(key, value)?,
                "gen.mix_kl" => cfg.gen.mix[0] = parse(key, value)?,
                "gen.mix_lcl" => cfg.gen.mix[1] = parse(key, value)?,
                "gen.mix_lcr" => cfg.gen.mix[2] = parse(key, value)?,
                "gen.tau" => cfg.gen.tau = parse(key, value)?,
                "gen.t_obs_steps" => cfg.gen.t_obs_steps = parse(key, value)?,
                "gen.t_pred_steps" => cfg.gen.t_pred_steps = parse(key, value)?,
                "gen.n_vehicles" => cfg.gen.n_vehicles = parse(key, value)?,
                "context.latent_dim" => cfg.context.latent_dim = parse(key, value)?,
                "context.hidden" => cfg.context.hidden = parse_list(key, value)?,
                "context.codebook_size" => cfg.context.codebook_size = parse(key, value)?,
                "context.beta_commit" => cfg.context.beta_commit = parse(key, value)?,
                "context.lambda_cl" => cfg.context.lambda_cl = parse(key, value)?,
                "context.learning_rate" => cfg.context.learning_rate = parse(key, value)?,
                "context.batch_size" => cfg.context.batch_size = parse(key, value)?,
                "context.epochs" => cfg.context.epochs = parse(key, value)?,
                "context.reinit_enabled" => cfg.context.reinit_enabled = parse(key, value)?,
                "context.reinit_decay" => cfg.context.reinit_decay = parse(key, value)?,
                "context.reinit_threshold" => cfg.context.reinit_threshold = parse(key, value)?,
                "diffusion.t_steps" => cfg.diffusion.t_steps = parse(key, value)?,
                "diffusion.beta_start" => cfg.diffusion.beta_start = parse(key, value)?,
                "diffusion.beta_end" => cfg.diffusion.beta_end = parse(key, value)?,
                "diffusion.hidden" => cfg.diffusion.hidden = parse_list(key, value)?,
                "diffusion.t_embed" => cfg.diffusion.t_embed = parse(key, value)?,
                "diffusion.cond_embed" => cfg.diffusion.cond_embed = parse(key, value)?,
                "diffusion.learning_rate" => cfg.diffusion.learning_rate = parse(key, value)?,
                "diffusion.batch_size" => cfg.diffusion.batch_size = parse(key, value)?,
                "diffusion.epochs" => cfg.diffusion.epochs = parse(key, value)?,
                "diffusion.cond_dropout" => cfg.diffusion.cond_dropout = parse(key, value)?,
                "guidance.w_min" => cfg.guidance.w_min = parse(key, value)?,
                "guidance.w_max_base" => cfg.guidance.w_max_base = parse(key, value)?,
                "guidance.t_c" => cfg.guidance.t_c = parse(key, value)?,
                "sampling.n_samples" => cfg.sampling.n_samples = parse(key, value)?,
                "sampling.ddim_steps" => cfg.sampling.ddim_steps = parse(key, value)?,
                "sampling.c_max" => cfg.sampling.c_max = parse(key, value)?,
                "sampling.gmm_restarts" => cfg.sampling.gmm_restarts = parse(key, value)?,
                "eval.squared" => cfg.eval_squared = parse(key, value)?,
                other => return Err(Error::Config(format!("unknown key '{other}'"))),
            }
        }
        let _ = seen;
        cfg.gen.rng_seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.guidance.validate()?;
        if self.sampling.n_samples == 0
            || self.sampling.ddim_steps == 0
            || self.sampling.ddim_steps > self.diffusion.t_steps
        {
            return Err(Error::Config(format!(
                "sampling {} steps of a {}-step schedule",
                self.sampling.ddim_steps, self.diffusion.t_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.diffusion.cond_dropout) {
            return Err(Error::Config("cond_dropout outside [0, 1]".into()));
        }
        if self.sampling.c_max == 0 || self.sampling.gmm_restarts == 0 {
            return Err(Error::Config("c_max and gmm_restarts must be >= 1".into()));
        }
        Ok(())
    }

    /// Overrides the seed everywhere it is threaded through.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.gen.rng_seed = seed;
        self
    }
}

/// SHA-256 of the raw config file bytes, hex encoded.
pub fn config_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Resolves a config path, consulting `TRAJDIFF_CONFIG_DIR` for relative
/// paths that do not exist as given.
pub fn resolve_config_path(path: &Path) -> std::path::PathBuf {
    if path.exists() || path.is_absolute() {
        return path.to_path_buf();
    }
    if let Ok(dir) = std::env::var("TRAJDIFF_CONFIG_DIR") {
        let candidate = Path::new(&dir).join(path);
        if candidate.exists() {
            return candidate;
        }
    }
    path.to_path_buf()
}
