//! Flat TOML run configuration: one typed key-value document covering the
//! simulator, model, training plan, optimizer, and rollout/evaluation
//! settings, with documented defaults for every key and hard errors on
//! unknown keys. Values can be overridden from the command line with
//! `--set key=value`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, StochasticMode};
use crate::curriculum::TrainingPlan;
use crate::error::{Error, Result};
use crate::grid::{make_equiangular_grid, GridSpec};
use crate::optim::OptimConfig;
use crate::toyatmos::{DynamicsParams, TrainingWindow};

/// Environment variable that overrides `output_root`.
pub const OUTPUT_ROOT_ENV: &str = "UCAST_OUTPUT_ROOT";

fn d_run_id() -> String { "run".into() }
fn d_output_root() -> String { "runs".into() }
fn d_n_lat() -> usize { 24 }
fn d_n_lon() -> usize { 48 }
fn d_n_channels() -> usize { 2 }
fn d_advection_speed() -> Vec<f64> { vec![1.0, -2.0] }
fn d_diffusion_coeff() -> Vec<f64> { vec![0.01, 0.01] }
fn d_forcing_amplitude() -> f64 { 0.02 }
fn d_coupling_strength() -> f64 { 0.12 }
fn d_sim_seed() -> u64 { 7 }
fn d_sim_steps() -> usize { 400 }
fn d_clock_period() -> usize { 24 }
fn d_base_width() -> usize { 12 }
fn d_channel_multipliers() -> Vec<usize> { vec![1, 2, 3] }
fn d_blocks_per_resolution() -> usize { 1 }
fn d_attention_levels() -> Vec<usize> { vec![0] }
fn d_dropout_rate() -> f64 { 0.1 }
fn d_stochastic_mode() -> StochasticMode { StochasticMode::Dropout }
fn d_noise_dim() -> usize { 16 }
fn d_init_seed() -> u64 { 31 }
fn d_stage1_epochs() -> usize { 6 }
fn d_stage2_epochs() -> usize { 2 }
fn d_batch_size() -> usize { 16 }
fn d_train_ensemble_size() -> usize { 2 }
fn d_deep_ensemble_size() -> usize { 2 }
fn d_seeds() -> Vec<u64> { vec![101, 102, 103, 104] }
fn d_from_scratch_crps() -> bool { false }
fn d_validation_leads() -> Vec<usize> { vec![1, 2, 4] }
fn d_validation_inits() -> usize { 4 }
fn d_stage1_muon_lr() -> f64 { 5e-3 }
fn d_stage1_adamw_lr() -> f64 { 5e-4 }
fn d_stage2_muon_lr() -> f64 { 1e-3 }
fn d_stage2_adamw_lr() -> f64 { 1e-4 }
fn d_muon_weight_decay() -> f64 { 0.0 }
fn d_adamw_weight_decay() -> f64 { 0.0 }
fn d_warmup_steps() -> usize { 5 }
fn d_momentum() -> f64 { 0.95 }
fn d_ns_iterations() -> usize { 5 }
fn d_ema_decay() -> f64 { 0.95 }
fn d_adamw_only() -> bool { false }
fn d_forecast_steps() -> usize { 8 }
fn d_members_per_checkpoint() -> usize { 2 }
fn d_forecast_inits() -> usize { 4 }
fn d_forecast_seed() -> u64 { 2024 }
fn d_frozen_masks() -> bool { false }

/// The resolved desk-scale run configuration. One flat document; every
/// field has a default, so an empty TOML file is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Run identifier; outputs land under `<output_root>/<run_id>`.
    #[serde(default = "d_run_id")]
    pub run_id: String,
    /// Output root directory; the `UCAST_OUTPUT_ROOT` environment variable
    /// takes precedence when set.
    #[serde(default = "d_output_root")]
    pub output_root: String,

    // --- toy-planet simulation ---
    #[serde(default = "d_n_lat")]
    pub n_lat: usize,
    #[serde(default = "d_n_lon")]
    pub n_lon: usize,
    #[serde(default = "d_n_channels")]
    pub n_channels: usize,
    /// Cells per step along longitude, one entry per channel.
    #[serde(default = "d_advection_speed")]
    pub advection_speed: Vec<f64>,
    /// Explicit-diffusion coefficient per channel, in [0, 0.25].
    #[serde(default = "d_diffusion_coeff")]
    pub diffusion_coeff: Vec<f64>,
    #[serde(default = "d_forcing_amplitude")]
    pub forcing_amplitude: f64,
    #[serde(default = "d_coupling_strength")]
    pub coupling_strength: f64,
    #[serde(default = "d_sim_seed")]
    pub sim_seed: u64,
    /// Trajectory length in steps.
    #[serde(default = "d_sim_steps")]
    pub sim_steps: usize,
    /// Diurnal-clock period for the time forcings.
    #[serde(default = "d_clock_period")]
    pub clock_period: usize,

    // --- backbone ---
    #[serde(default = "d_base_width")]
    pub base_width: usize,
    #[serde(default = "d_channel_multipliers")]
    pub channel_multipliers: Vec<usize>,
    #[serde(default = "d_blocks_per_resolution")]
    pub blocks_per_resolution: usize,
    /// Resolution levels (coarsest-first index) that get self-attention.
    #[serde(default = "d_attention_levels")]
    pub attention_levels: Vec<usize>,
    #[serde(default = "d_dropout_rate")]
    pub dropout_rate: f64,
    /// `dropout`, `adaln_noise`, or `deterministic`.
    #[serde(default = "d_stochastic_mode")]
    pub stochastic_mode: StochasticMode,
    /// Noise vector length for the adaln_noise variant.
    #[serde(default = "d_noise_dim")]
    pub noise_dim: usize,
    /// Weight-initialization seed.
    #[serde(default = "d_init_seed")]
    pub init_seed: u64,

    // --- training plan ---
    #[serde(default = "d_stage1_epochs")]
    pub stage1_epochs: usize,
    #[serde(default = "d_stage2_epochs")]
    pub stage2_epochs: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    /// M: dropout members per gradient step in Stage 2.
    #[serde(default = "d_train_ensemble_size")]
    pub train_ensemble_size: usize,
    /// K: independent Stage-2 repeats forming the deep ensemble.
    #[serde(default = "d_deep_ensemble_size")]
    pub deep_ensemble_size: usize,
    /// Per-seed list; the first seed drives Stage 1, the first K drive
    /// the deep ensemble.
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    /// Train the CRPS objective from scratch instead of fine-tuning.
    #[serde(default = "d_from_scratch_crps")]
    pub from_scratch_crps: bool,
    #[serde(default = "d_validation_leads")]
    pub validation_leads: Vec<usize>,
    #[serde(default = "d_validation_inits")]
    pub validation_inits: usize,

    // --- optimizer ---
    #[serde(default = "d_stage1_muon_lr")]
    pub stage1_muon_lr: f64,
    #[serde(default = "d_stage1_adamw_lr")]
    pub stage1_adamw_lr: f64,
    #[serde(default = "d_stage2_muon_lr")]
    pub stage2_muon_lr: f64,
    #[serde(default = "d_stage2_adamw_lr")]
    pub stage2_adamw_lr: f64,
    #[serde(default = "d_muon_weight_decay")]
    pub muon_weight_decay: f64,
    #[serde(default = "d_adamw_weight_decay")]
    pub adamw_weight_decay: f64,
    #[serde(default = "d_warmup_steps")]
    pub warmup_steps: usize,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_ns_iterations")]
    pub ns_iterations: usize,
    #[serde(default = "d_ema_decay")]
    pub ema_decay: f64,
    /// Route matrices through AdamW too (optimizer-swap ablation).
    #[serde(default = "d_adamw_only")]
    pub adamw_only: bool,

    // --- rollout / evaluation ---
    #[serde(default = "d_forecast_steps")]
    pub forecast_steps: usize,
    /// N: stochastic members drawn per deep-ensemble checkpoint.
    #[serde(default = "d_members_per_checkpoint")]
    pub members_per_checkpoint: usize,
    /// Number of initialization times evaluated from the test split.
    #[serde(default = "d_forecast_inits")]
    pub forecast_inits: usize,
    #[serde(default = "d_forecast_seed")]
    pub forecast_seed: u64,
    /// Freeze dropout masks across autoregressive steps.
    #[serde(default = "d_frozen_masks")]
    pub frozen_masks: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        // an empty document resolves purely to the field defaults
        toml::from_str("").expect("defaults must deserialize")
    }
}

impl RunConfig {
    /// Load a config file (or pure defaults when `path` is None) and apply
    /// `--set key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|_| Error::MissingArtifact(format!("config file {}", p.display())))?;
                text.parse()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let key = key.trim();
            let value = value.trim();
            // parse the value as TOML; fall back to a bare string
            let parsed: toml::Table = format!("v = {value}")
                .parse()
                .unwrap_or_else(|_| format!("v = {value:?}").parse().unwrap());
            table.insert(key.to_string(), parsed["v"].clone());
        }
        let config: RunConfig = table
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.dynamics()?.validate()?;
        self.model_config().validate()?;
        self.training_plan().validate()?;
        if self.sim_steps < 20 {
            return Err(Error::Config("sim_steps must be at least 20".into()));
        }
        if self.forecast_steps == 0 || self.forecast_inits == 0 {
            return Err(Error::Config(
                "forecast_steps and forecast_inits must be positive".into(),
            ));
        }
        if self.run_id.is_empty()
            || self.run_id.contains(['/', '\\'])
            || self.run_id.starts_with('.')
        {
            return Err(Error::Config(format!(
                "run_id `{}` must be a plain directory name",
                self.run_id
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<GridSpec> {
        make_equiangular_grid(self.n_lat, self.n_lon)
    }

    pub fn dynamics(&self) -> Result<DynamicsParams> {
        let params = DynamicsParams {
            n_channels: self.n_channels,
            advection_speed: self.advection_speed.clone(),
            diffusion_coeff: self.diffusion_coeff.clone(),
            forcing_amplitude: self.forcing_amplitude,
            coupling_strength: self.coupling_strength,
            seed: self.sim_seed,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: 2 * self.n_channels + TrainingWindow::N_FORCINGS,
            out_channels: self.n_channels,
            base_width: self.base_width,
            channel_multipliers: self.channel_multipliers.clone(),
            blocks_per_resolution: self.blocks_per_resolution,
            attention_levels: self.attention_levels.clone(),
            dropout_rate: self.dropout_rate,
            stochastic_mode: self.stochastic_mode,
            noise_dim: self.noise_dim,
        }
    }

    fn optim(&self, muon_lr: f64, adamw_lr: f64) -> OptimConfig {
        OptimConfig {
            muon_peak_lr: muon_lr,
            adamw_peak_lr: adamw_lr,
            muon_weight_decay: self.muon_weight_decay,
            adamw_weight_decay: self.adamw_weight_decay,
            warmup_steps: self.warmup_steps,
            total_steps: 0, // resolved from the stage length
            momentum: self.momentum,
            ns_iterations: self.ns_iterations,
            ema_decay: self.ema_decay,
            adamw_only: self.adamw_only,
        }
    }

    pub fn training_plan(&self) -> TrainingPlan {
        TrainingPlan {
            stage1_epochs: self.stage1_epochs,
            stage2_epochs: self.stage2_epochs,
            batch_size: self.batch_size,
            train_ensemble_size: self.train_ensemble_size,
            deep_ensemble_size: self.deep_ensemble_size,
            stage1_optim: self.optim(self.stage1_muon_lr, self.stage1_adamw_lr),
            stage2_optim: self.optim(self.stage2_muon_lr, self.stage2_adamw_lr),
            seeds: self.seeds.clone(),
            from_scratch_crps: self.from_scratch_crps,
            validation_leads: self.validation_leads.clone(),
            validation_inits: self.validation_inits,
        }
    }

    /// Output root, honoring the `UCAST_OUTPUT_ROOT` override.
    pub fn output_root(&self) -> PathBuf {
        std::env::var(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|_| PathBuf::from(&self.output_root))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root().join(&self.run_id)
    }

    /// Serialize the fully resolved config for the run manifest.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
