//! Command-line frontend: data simulation, curriculum training, ensemble
//! rollout, verification, scorecards, and the ablation grid.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::{s, Array4};

use ucast::backbone::build;
use ucast::config::RunConfig;
use ucast::curriculum::{
    load_checkpoint, save_checkpoint, train_stage1, train_stage2, validation_crps, Checkpoint,
    Dataset, StageTag,
};
use ucast::error::{Error, Result};
use ucast::grid::area_weights;
use ucast::nn::mix_seed;
use ucast::report::{render_scorecard, render_training_curves, TrainingCurve};
use ucast::rollout::{read_archive, roll_forward, write_archive, RolloutOptions};
use ucast::toyatmos::{
    fit_norm_stats, load_trajectory, make_windows, save_trajectory, simulate, split_indices,
    TrainingWindow,
};
use ucast::verification::{
    central_lat_band, evaluate, read_metrics_csv, relative_skill, write_metrics_csv,
    write_metrics_json, write_spectrum_csv, SkillMetric, SpectrumRecord, VerificationCase,
};

#[derive(Parser)]
#[command(
    name = "ucast",
    about = "Desk-scale probabilistic weather emulation on a synthetic toy planet",
    version
)]
struct Cli {
    /// Path to a TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set dropout_rate=0.15 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Overwrite outputs of an existing run_id.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for deep-ensemble seeds and ablation cells.
    #[arg(long, global = true, default_value_t = 1)]
    parallel: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and persist a toy-planet trajectory.
    Simulate,
    /// Stage 1 (MAE), then Stage 2 (fair CRPS) across the deep ensemble.
    Train {
        /// Stop after Stage 1.
        #[arg(long)]
        no_stage2: bool,
    },
    /// Roll an ensemble forecast from the trained checkpoints.
    Forecast,
    /// Score forecast archives against the simulated truth.
    Evaluate,
    /// Relative-skill table between two metric CSVs.
    Scorecard {
        /// Metric CSV of the model under test.
        #[arg(long)]
        model: PathBuf,
        /// Metric CSV of the reference.
        #[arg(long)]
        reference: PathBuf,
        /// crps or rmse.
        #[arg(long, default_value = "crps")]
        metric: String,
    },
    /// Run the ablation grid: dropout rate, adaLN noise, M, from-scratch
    /// CRPS, and the AdamW-only optimizer swap.
    Ablate,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    match cli.command {
        Command::Simulate => cmd_simulate(&config, cli.force),
        Command::Train { no_stage2 } => cmd_train(&config, no_stage2, cli.force, cli.parallel),
        Command::Forecast => cmd_forecast(&config, cli.force),
        Command::Evaluate => cmd_evaluate(&config, cli.force),
        Command::Scorecard {
            model,
            reference,
            metric,
        } => cmd_scorecard(&config, &model, &reference, &metric, cli.force),
        Command::Ablate => cmd_ablate(&config, cli.force, cli.parallel),
    }
}

/// Claim an output directory for this command, refusing to clobber an
/// existing one unless forced, and record the resolved config.
fn claim_dir(config: &RunConfig, name: &str, force: bool) -> Result<PathBuf> {
    let dir = config.run_dir().join(name);
    if dir.exists() {
        if !force {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let manifest = config.run_dir().join(format!("config.{name}.toml"));
    std::fs::write(&manifest, config.to_toml())
        .map_err(|e| Error::io(manifest.display().to_string(), e))?;
    Ok(dir)
}

fn cmd_simulate(config: &RunConfig, force: bool) -> Result<()> {
    let dir = claim_dir(config, "data", force)?;
    let grid = config.grid()?;
    let params = config.dynamics()?;
    let states = simulate(&grid, &params, config.sim_steps)?;
    let stats = fit_norm_stats(&states)?;
    save_trajectory(&dir, &grid, &params, &states, &stats)?;
    println!(
        "simulated {} steps of {} channels on {}x{} -> {}",
        states.len(),
        params.n_channels,
        grid.n_lat,
        grid.n_lon,
        dir.display()
    );
    Ok(())
}

struct DiskDataset {
    dataset: Dataset,
    test: Vec<TrainingWindow>,
    truth: Vec<ucast::toyatmos::StateTensor>,
}

fn load_dataset(config: &RunConfig) -> Result<DiskDataset> {
    let data_dir = config.run_dir().join("data");
    let loaded = load_trajectory(&data_dir).map_err(|e| match e {
        Error::MissingArtifact(m) => {
            Error::MissingArtifact(format!("{m}; produce it with `ucast simulate`"))
        }
        other => other,
    })?;
    let windows = make_windows(&loaded.states, &loaded.stats, config.clock_period)?;
    let (train, val, test) = split_indices(windows.len());
    let channel_names = loaded.states[0].channel_names.clone();
    Ok(DiskDataset {
        dataset: Dataset {
            train: windows[train].to_vec(),
            val: windows[val].to_vec(),
            grid: loaded.grid,
            stats: loaded.stats,
            channel_names,
        },
        test: windows[test].to_vec(),
        truth: loaded.states,
    })
}

fn save_member(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    save_checkpoint(ckpt, dir)?;
    if ckpt.diverged {
        return Err(Error::Numeric(format!(
            "training diverged; last good checkpoint saved to {}",
            dir.display()
        )));
    }
    Ok(())
}

fn cmd_train(config: &RunConfig, no_stage2: bool, force: bool, parallel: usize) -> Result<()> {
    let dir = claim_dir(config, "checkpoints", force)?;
    let disk = load_dataset(config)?;
    let dataset = &disk.dataset;
    let plan = config.training_plan();
    let aw = area_weights(&dataset.grid)?;

    let mut stage1_plan = plan.clone();
    if config.from_scratch_crps {
        stage1_plan.stage1_epochs = 0; // Stage 2 starts from initialization
    }
    let model = build(&config.model_config(), &dataset.grid, config.init_seed)?;
    let stage1 = train_stage1(&stage1_plan, model, dataset)?;
    save_member(&stage1, &dir.join("stage1"))?;
    println!(
        "stage 1 done: {} epochs, val MAE {:?}",
        stage1.epoch_in_stage,
        stage1.history.last().and_then(|h| h.val_mae)
    );
    if no_stage2 || plan.stage2_epochs == 0 {
        return Ok(());
    }

    let first_lead = *plan.validation_leads.first().unwrap_or(&1);
    let baseline = validation_crps(
        &stage1.ema_model()?,
        dataset,
        &aw,
        &[first_lead],
        plan.train_ensemble_size,
        plan.validation_inits,
        plan.seeds[0],
    )?[0]
        .1;

    let k = plan.deep_ensemble_size;
    let mut members: Vec<Option<Result<Checkpoint>>> = (0..k).map(|_| None).collect();
    let workers = parallel.max(1);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for chunk in (0..k).collect::<Vec<_>>().chunks(k.div_ceil(workers)) {
            let chunk = chunk.to_vec();
            let (plan, stage1, dataset) = (&plan, &stage1, dataset);
            handles.push(scope.spawn(move || {
                chunk
                    .into_iter()
                    .map(|i| (i, train_stage2(plan, stage1, dataset, plan.seeds[i])))
                    .collect::<Vec<_>>()
            }));
        }
        for handle in handles {
            for (i, result) in handle.join().expect("training thread panicked") {
                members[i] = Some(result);
            }
        }
    });

    let mut curves = Vec::new();
    for (i, result) in members.into_iter().enumerate() {
        let ckpt = result.expect("member scheduled")?;
        let points = ckpt
            .history
            .iter()
            .filter(|h| h.stage != StageTag::Stage1)
            .filter_map(|h| {
                h.val_crps
                    .iter()
                    .find(|(lead, _)| *lead == first_lead)
                    .map(|&(_, v)| (h.global_step as usize, v))
            })
            .collect();
        curves.push(TrainingCurve {
            label: format!("MEMBER {i}"),
            points,
        });
        save_member(&ckpt, &dir.join(format!("member_{i:02}")))?;
        println!("stage 2 member {i} done (seed {})", plan.seeds[i]);
    }
    let fig_dir = config.run_dir().join("figures");
    std::fs::create_dir_all(&fig_dir).map_err(|e| Error::io(fig_dir.display().to_string(), e))?;
    render_training_curves(&curves, Some(baseline), &fig_dir.join("training_curves.png"))?;
    Ok(())
}

/// Evenly spaced test-split init indices leaving room for `steps` leads.
fn init_indices(n_test: usize, steps: usize, n_inits: usize) -> Result<Vec<usize>> {
    if n_test <= steps {
        return Err(Error::invalid(format!(
            "test split has {n_test} windows; need more than forecast_steps = {steps}"
        )));
    }
    let usable = n_test - steps;
    let n = n_inits.min(usable);
    Ok((0..n).map(|i| i * usable / n).collect())
}

fn cmd_forecast(config: &RunConfig, force: bool) -> Result<()> {
    let dir = claim_dir(config, "forecasts", force)?;
    let disk = load_dataset(config)?;
    let ckpt_dir = config.run_dir().join("checkpoints");
    let mut checkpoints = Vec::new();
    for i in 0.. {
        let member = ckpt_dir.join(format!("member_{i:02}"));
        if !member.exists() {
            break;
        }
        checkpoints.push(load_checkpoint(&member)?);
    }
    if checkpoints.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "no member checkpoints under {}; produce them with `ucast train`",
            ckpt_dir.display()
        )));
    }
    let options = RolloutOptions {
        frozen_masks: config.frozen_masks,
        clock_period: config.clock_period,
    };
    for idx in init_indices(disk.test.len(), config.forecast_steps, config.forecast_inits)? {
        let window = &disk.test[idx];
        let forecast = roll_forward(
            &checkpoints,
            window,
            config.forecast_steps,
            config.members_per_checkpoint,
            mix_seed(config.forecast_seed, idx as u64),
            options,
        )?;
        let out = dir.join(format!("init_{:05}", window.time_index));
        write_archive(&forecast, &out)?;
        println!(
            "forecast from t={} ({} members x {} leads) -> {}",
            window.time_index,
            forecast.n_members(),
            forecast.n_leads(),
            out.display()
        );
    }
    Ok(())
}

fn cmd_evaluate(config: &RunConfig, force: bool) -> Result<()> {
    let dir = claim_dir(config, "metrics", force)?;
    let disk = load_dataset(config)?;
    let fc_root = config.run_dir().join("forecasts");
    let mut archive_dirs: Vec<PathBuf> = std::fs::read_dir(&fc_root)
        .map_err(|_| {
            Error::MissingArtifact(format!(
                "forecast archives under {}; produce them with `ucast forecast`",
                fc_root.display()
            ))
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    archive_dirs.sort();
    if archive_dirs.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "forecast archives under {}; produce them with `ucast forecast`",
            fc_root.display()
        )));
    }

    let mut cases = Vec::new();
    let mut spectra_samples: Vec<ndarray::Array2<f64>> = Vec::new();
    let mut last_forecast = None;
    for adir in &archive_dirs {
        let forecast = read_archive(adir)?;
        let (_, l, c, h, w) = forecast.members.dim();
        let mut truth = Array4::zeros((l, c, h, w));
        for (j, &lead) in forecast.lead_steps.iter().enumerate() {
            let t = forecast.init_time + lead as i64;
            let state = disk
                .truth
                .iter()
                .find(|s| s.time_index == t)
                .ok_or_else(|| {
                    Error::MissingArtifact(format!(
                        "truth state t={t} for archive {}; regenerate with `ucast simulate`",
                        adir.display()
                    ))
                })?;
            truth.slice_mut(s![j, .., .., ..]).assign(&state.values);
        }
        for m in 0..forecast.n_members() {
            spectra_samples.push(forecast.members.slice(s![m, l - 1, 0, .., ..]).to_owned());
        }
        cases.push(VerificationCase {
            members: forecast.members.clone(),
            truth,
        });
        last_forecast = Some(forecast);
    }

    let aw = area_weights(&disk.dataset.grid)?;
    let records = evaluate(&cases, &aw, &disk.dataset.channel_names)?;
    write_metrics_csv(&records, &dir.join("metrics.csv"))?;
    write_metrics_json(&records, &dir.join("metrics.json"))?;

    let forecast = last_forecast.expect("at least one archive");
    let band = central_lat_band(&disk.dataset.grid);
    let views: Vec<_> = spectra_samples.iter().map(|a| a.view()).collect();
    let (wavenumbers, power) = ucast::verification::zonal_spectrum(&views, &disk.dataset.grid, band)?;
    let spectrum = SpectrumRecord {
        variable: disk.dataset.channel_names[0].clone(),
        lead: *forecast.lead_steps.last().unwrap(),
        wavenumbers,
        power,
        lat_band: band,
    };
    write_spectrum_csv(&spectrum, &dir.join("spectrum.csv"))?;
    println!("wrote {} metric rows -> {}", records.len(), dir.display());
    Ok(())
}

fn cmd_scorecard(
    config: &RunConfig,
    model: &Path,
    reference: &Path,
    metric: &str,
    force: bool,
) -> Result<()> {
    let metric = match metric {
        "crps" => SkillMetric::Crps,
        "rmse" => SkillMetric::Rmse,
        other => return Err(Error::Config(format!("unknown metric `{other}`"))),
    };
    let dir = claim_dir(config, "scorecard", force)?;
    let model_records = read_metrics_csv(model)?;
    let reference_records = read_metrics_csv(reference)?;
    let table = relative_skill(&model_records, &reference_records, metric)?;
    render_scorecard(&table, &dir.join("scorecard.png"))?;
    println!(
        "scorecard aggregate: {:+.2}% ({} cells) -> {}",
        table.aggregate,
        table.cells.len(),
        dir.display()
    );
    Ok(())
}

struct AblationCell {
    name: &'static str,
    overrides: Vec<String>,
}

fn ablation_cells() -> Vec<AblationCell> {
    let cell = |name, overrides: &[&str]| AblationCell {
        name,
        overrides: overrides.iter().map(|s| s.to_string()).collect(),
    };
    vec![
        cell("baseline_dropout10", &["dropout_rate=0.10"]),
        cell("dropout5", &["dropout_rate=0.05"]),
        cell("dropout15", &["dropout_rate=0.15"]),
        cell("adaln_noise", &["stochastic_mode=adaln_noise"]),
        cell("m4", &["train_ensemble_size=4"]),
        cell("from_scratch_crps", &["from_scratch_crps=true"]),
        cell("adamw_only", &["adamw_only=true"]),
    ]
}

/// Train one ablation cell (Stage 1 + one Stage 2 member) and return its
/// final validation CRPS at the first validation lead.
fn run_ablation_cell(base: &RunConfig, cell: &AblationCell, dataset: &Dataset) -> Result<f64> {
    let mut overrides = cell.overrides.clone();
    overrides.push(format!("run_id={}", base.run_id)); // reuse the parent id
    let config = apply_overrides(base, &overrides)?;
    let plan = config.training_plan();
    let aw = area_weights(&dataset.grid)?;
    let mut stage1_plan = plan.clone();
    if config.from_scratch_crps {
        stage1_plan.stage1_epochs = 0;
    }
    let model = build(&config.model_config(), &dataset.grid, config.init_seed)?;
    let stage1 = train_stage1(&stage1_plan, model, dataset)?;
    let stage2 = train_stage2(&plan, &stage1, dataset, plan.seeds[0])?;
    if stage2.diverged {
        return Err(Error::Numeric(format!("ablation cell {} diverged", cell.name)));
    }
    let first_lead = *plan.validation_leads.first().unwrap_or(&1);
    Ok(validation_crps(
        &stage2.ema_model()?,
        dataset,
        &aw,
        &[first_lead],
        plan.train_ensemble_size.max(2),
        plan.validation_inits,
        plan.seeds[0],
    )?[0]
        .1)
}

fn apply_overrides(base: &RunConfig, overrides: &[String]) -> Result<RunConfig> {
    // round-trip through TOML so --set semantics match exactly
    let dir = std::env::temp_dir().join(format!("ucast-base-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let path = dir.join(format!("base-{:x}.toml", mix_seed(0, overrides.len() as u64)));
    std::fs::write(&path, base.to_toml()).map_err(|e| Error::io(path.display().to_string(), e))?;
    let config = RunConfig::load(Some(&path), overrides);
    let _ = std::fs::remove_file(&path);
    config
}

fn cmd_ablate(config: &RunConfig, force: bool, parallel: usize) -> Result<()> {
    let dir = claim_dir(config, "ablations", force)?;
    let disk = load_dataset(config)?;
    let dataset = &disk.dataset;
    let cells = ablation_cells();
    let mut results: Vec<Option<Result<f64>>> = (0..cells.len()).map(|_| None).collect();
    let workers = parallel.max(1);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for chunk in (0..cells.len()).collect::<Vec<_>>().chunks(cells.len().div_ceil(workers)) {
            let chunk = chunk.to_vec();
            let cells = &cells;
            handles.push(scope.spawn(move || {
                chunk
                    .into_iter()
                    .map(|i| (i, run_ablation_cell(config, &cells[i], dataset)))
                    .collect::<Vec<_>>()
            }));
        }
        for handle in handles {
            for (i, result) in handle.join().expect("ablation thread panicked") {
                results[i] = Some(result);
            }
        }
    });

    let mut rows = Vec::new();
    for (cell, result) in cells.iter().zip(results.into_iter()) {
        rows.push((cell.name, result.expect("cell scheduled")?));
    }
    let baseline = rows[0].1;
    let csv_path = dir.join("ablation.csv");
    let mut writer =
        csv::Writer::from_path(&csv_path).map_err(|e| Error::Format(e.to_string()))?;
    writer
        .write_record(["cell", "val_crps", "relative_to_baseline_pct"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for (name, crps) in &rows {
        let rel = 100.0 * (crps - baseline) / baseline;
        writer
            .write_record([name.to_string(), format!("{crps}"), format!("{rel:.3}")])
            .map_err(|e| Error::Format(e.to_string()))?;
        println!("{name}: val CRPS {crps:.6} ({rel:+.2}% vs baseline)");
    }
    writer
        .flush()
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    Ok(())
}
