//! The three-stage training curriculum: deterministic MAE pre-training,
//! fair-CRPS fine-tuning with M stochastic members, and K-seed deep
//! ensembling from a shared first-stage checkpoint — plus checkpoint
//! save/load with bitwise round-trips.
//!
//! All randomness is functional: batch order, dropout member seeds, and
//! validation seeds are derived from (run seed, epoch, step), so resuming
//! from a checkpoint replays the uninterrupted run exactly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array3, Array4, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::backbone::{build, Model, ModelConfig, StochasticTag};
use crate::error::{Error, Result};
use crate::grid::{area_weights, AreaWeights, GridSpec};
use crate::nn::{mix_seed, Forward, ParamStore};
use crate::objectives::{
    fair_crps, fair_crps_loss, weighted_mae, weighted_mae_loss, ChannelWeights,
};
use crate::optim::{ema_update, OptimConfig, Optimizer};
use crate::toyatmos::{NormStats, TrainingWindow};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    /// M: stochastic members per CRPS training step.
    pub train_ensemble_size: usize,
    /// K: independent Stage-2 runs in the deep ensemble.
    pub deep_ensemble_size: usize,
    pub stage1_optim: OptimConfig,
    pub stage2_optim: OptimConfig,
    pub seeds: Vec<u64>,
    /// Ablation: run the CRPS stage from fresh initialization instead of a
    /// Stage-1 checkpoint.
    pub from_scratch_crps: bool,
    /// Lead times (steps) for per-epoch validation CRPS.
    pub validation_leads: Vec<usize>,
    /// Initialization count for validation rollouts.
    pub validation_inits: usize,
}

impl TrainingPlan {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.train_ensemble_size < 2 {
            return Err(Error::invalid(
                "train_ensemble_size must be at least 2 for the CRPS stage",
            ));
        }
        if self.deep_ensemble_size < 1 {
            return Err(Error::invalid("deep_ensemble_size must be at least 1"));
        }
        if self.seeds.len() < self.deep_ensemble_size {
            return Err(Error::invalid(format!(
                "need at least {} seeds for a deep ensemble of that size",
                self.deep_ensemble_size
            )));
        }
        self.stage1_optim.validate()?;
        self.stage2_optim.validate()?;
        Ok(())
    }
}

/// Fraction of total training forward passes spent in the CRPS stage:
/// `e2 * M / (e1 + e2 * M)`.
pub fn stage2_compute_fraction(plan: &TrainingPlan) -> f64 {
    let stage2 = (plan.stage2_epochs * plan.train_ensemble_size) as f64;
    stage2 / (plan.stage1_epochs as f64 + stage2)
}

/// Supervised windows split for training, with everything needed to
/// interpret them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<TrainingWindow>,
    /// Validation windows, time-contiguous and sorted by time index.
    pub val: Vec<TrainingWindow>,
    pub grid: GridSpec,
    pub stats: NormStats,
    pub channel_names: Vec<String>,
}

impl Dataset {
    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Stage1,
    Stage2,
    Scratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: StageTag,
    pub epoch: usize,
    pub global_step: u64,
    pub mean_train_loss: f64,
    pub val_mae: Option<f64>,
    /// (lead, fair CRPS) pairs from short validation rollouts.
    pub val_crps: Vec<(usize, f64)>,
    pub skipped_steps: usize,
}

/// Full training state: weights, EMA, optimizer, progress, and history.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub grid: GridSpec,
    pub stats: NormStats,
    pub channel_names: Vec<String>,
    pub weights: ParamStore,
    pub ema: Vec<ArrayD<f64>>,
    pub opt_state: Vec<(String, ArrayD<f64>)>,
    pub opt_steps_taken: u64,
    pub stage: StageTag,
    pub epoch_in_stage: usize,
    pub global_step: u64,
    /// Run seed; together with `global_step` this is the full RNG state.
    pub seed: u64,
    pub history: Vec<EpochLog>,
    pub diverged: bool,
}

impl Checkpoint {
    /// Reconstruct the model with the stored (raw) weights.
    pub fn model(&self) -> Result<Model> {
        let mut model = build(&self.model_config, &self.grid, 0)?;
        copy_values(&mut model.store, self.weights.values())?;
        Ok(model)
    }

    /// Reconstruct the model with the EMA weights (the evaluation weights).
    pub fn ema_model(&self) -> Result<Model> {
        let mut model = build(&self.model_config, &self.grid, 0)?;
        copy_values(&mut model.store, &self.ema)?;
        Ok(model)
    }
}

fn copy_values(store: &mut ParamStore, values: &[ArrayD<f64>]) -> Result<()> {
    if store.values().len() != values.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} arrays but the architecture has {}",
            values.len(),
            store.values().len()
        )));
    }
    for (dst, src) in store.values_mut().iter_mut().zip(values) {
        if dst.shape() != src.shape() {
            return Err(Error::Format(format!(
                "checkpoint array shape {:?} does not match parameter shape {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        *dst = src.clone();
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
enum Mode {
    Mae,
    Crps { members: usize },
}

/// Assemble a batch `[B, 2C+F, H, W]` input stack and `[B, C, H, W]`
/// residual target from windows.
fn batch_arrays(windows: &[&TrainingWindow]) -> (Array4<f64>, Array4<f64>) {
    let b = windows.len();
    let in_dim = windows[0].stacked_input().dim();
    let tgt_dim = windows[0].target_residual.dim();
    let mut x = Array4::zeros((b, in_dim.0, in_dim.1, in_dim.2));
    let mut y = Array4::zeros((b, tgt_dim.0, tgt_dim.1, tgt_dim.2));
    for (i, w) in windows.iter().enumerate() {
        x.index_axis_mut(Axis(0), i).assign(&w.stacked_input());
        y.index_axis_mut(Axis(0), i).assign(&w.target_residual);
    }
    (x, y)
}

/// Deterministic epoch shuffle via a seeded Fisher-Yates pass.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x0e0c << 16 | epoch as u64));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

/// Deterministic validation MAE over all validation windows.
pub fn validation_mae(model: &Model, dataset: &Dataset, aw: &AreaWeights) -> Result<f64> {
    let cw = ChannelWeights::uniform(dataset.n_channels());
    let mut total = 0.0;
    for w in &dataset.val {
        let x = w
            .stacked_input()
            .insert_axis(Axis(0));
        let pred = model.predict(&x, StochasticTag::deterministic())?;
        let pred3 = pred.index_axis(Axis(0), 0).to_owned();
        total += weighted_mae(&pred3, &w.target_residual, aw, &cw)?.total;
    }
    Ok(total / dataset.val.len() as f64)
}

/// MAE of the persistence forecast (zero residual) on the validation split.
pub fn persistence_mae(dataset: &Dataset, aw: &AreaWeights) -> Result<f64> {
    let cw = ChannelWeights::uniform(dataset.n_channels());
    let mut total = 0.0;
    for w in &dataset.val {
        let zeros = Array3::zeros(w.target_residual.dim());
        total += weighted_mae(&zeros, &w.target_residual, aw, &cw)?.total;
    }
    Ok(total / dataset.val.len() as f64)
}

/// Short autoregressive validation rollouts in normalized space: fair CRPS
/// per requested lead, averaged over evenly spaced initializations.
pub fn validation_crps(
    model: &Model,
    dataset: &Dataset,
    aw: &AreaWeights,
    leads: &[usize],
    members: usize,
    n_inits: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let c = dataset.n_channels();
    let cw = ChannelWeights::uniform(c);
    let max_lead = *leads.iter().max().ok_or_else(|| Error::invalid("no leads"))?;
    let val = &dataset.val;
    if val.len() <= max_lead {
        return Err(Error::invalid(format!(
            "validation split has {} windows; need more than max lead {max_lead}",
            val.len()
        )));
    }
    let usable = val.len() - max_lead;
    let n_inits = n_inits.min(usable).max(1);
    let stride = (usable / n_inits).max(1);
    let inits: Vec<usize> = (0..n_inits).map(|k| k * stride).collect();

    let mut acc: HashMap<usize, f64> = leads.iter().map(|l| (*l, 0.0)).collect();
    for &init in &inits {
        // member trajectories, each a live (prev, cur) normalized state pair
        let (_, h, w) = val[init].target_residual.dim();
        let mut prev: Vec<Array3<f64>> = Vec::with_capacity(members);
        let mut cur: Vec<Array3<f64>> = Vec::with_capacity(members);
        for _ in 0..members {
            prev.push(
                val[init]
                    .inputs
                    .slice(ndarray::s![0..c, .., ..])
                    .to_owned(),
            );
            cur.push(
                val[init]
                    .inputs
                    .slice(ndarray::s![c..2 * c, .., ..])
                    .to_owned(),
            );
        }
        for step in 0..max_lead {
            let forcings = &val[init + step].forcings;
            for m in 0..members {
                let mut x = Array4::zeros((1, 2 * c + forcings.dim().0, h, w));
                x.slice_mut(ndarray::s![0, 0..c, .., ..]).assign(&prev[m]);
                x.slice_mut(ndarray::s![0, c..2 * c, .., ..]).assign(&cur[m]);
                x.slice_mut(ndarray::s![0, 2 * c.., .., ..]).assign(forcings);
                let tag = StochasticTag::member(mix_seed(
                    mix_seed(seed, (init * 1024 + step) as u64),
                    m as u64,
                ));
                let residual = model.predict(&x, tag)?;
                let next = &cur[m] + &residual.index_axis(Axis(0), 0);
                prev[m] = std::mem::replace(&mut cur[m], next);
            }
            let lead = step + 1;
            if acc.contains_key(&lead) {
                // truth x_{t+lead} is the "current" input block of the
                // window `lead` steps ahead
                let truth = val[init + lead]
                    .inputs
                    .slice(ndarray::s![c..2 * c, .., ..])
                    .to_owned();
                let mut ens = Array4::zeros((members, c, h, w));
                for m in 0..members {
                    ens.index_axis_mut(Axis(0), m).assign(&cur[m]);
                }
                let score = fair_crps(&ens, &truth, aw, &cw)?;
                *acc.get_mut(&lead).unwrap() += score.total / inits.len() as f64;
            }
        }
    }
    let mut out: Vec<(usize, f64)> = leads.iter().map(|l| (*l, acc[l])).collect();
    out.sort_by_key(|(l, _)| *l);
    Ok(out)
}

struct StageRun<'a> {
    plan: &'a TrainingPlan,
    dataset: &'a Dataset,
    mode: Mode,
    optim: OptimConfig,
    epochs: usize,
    seed: u64,
    stage: StageTag,
}

/// Run (or resume) one stage. Returns the finished checkpoint; on numeric
/// divergence, returns the last epoch-end state with `diverged` set.
fn run_stage(
    run: &StageRun<'_>,
    mut model: Model,
    mut ema: Vec<ArrayD<f64>>,
    mut opt: Optimizer,
    start_epoch: usize,
    mut global_step: u64,
    mut history: Vec<EpochLog>,
) -> Result<Checkpoint> {
    let dataset = run.dataset;
    let aw = area_weights(&dataset.grid)?;
    let cw = ChannelWeights::uniform(dataset.n_channels());
    if dataset.train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let steps_per_epoch = dataset.train.len().div_ceil(run.plan.batch_size);
    let make_ckpt = |model: &Model,
                     ema: &Vec<ArrayD<f64>>,
                     opt: &Optimizer,
                     epoch: usize,
                     global_step: u64,
                     history: &Vec<EpochLog>,
                     diverged: bool| Checkpoint {
        model_config: model.config.clone(),
        grid: dataset.grid.clone(),
        stats: dataset.stats.clone(),
        channel_names: dataset.channel_names.clone(),
        weights: model.store.clone(),
        ema: ema.clone(),
        opt_state: opt.named_state(&model.store),
        opt_steps_taken: opt.steps_taken,
        stage: run.stage,
        epoch_in_stage: epoch,
        global_step,
        seed: run.seed,
        history: history.clone(),
        diverged,
    };

    let mut last_good = make_ckpt(&model, &ema, &opt, start_epoch, global_step, &history, false);
    let mut recent_losses: Vec<f64> = Vec::new();
    // the LR schedule is stage-local; global_step keeps counting across stages
    let mut stage_step = start_epoch * steps_per_epoch;

    for epoch in start_epoch..run.epochs {
        let order = epoch_order(dataset.train.len(), run.seed, epoch);
        let mut epoch_loss = 0.0;
        let mut skipped = 0usize;
        let mut n_batches = 0usize;
        for chunk in order.chunks(run.plan.batch_size) {
            let windows: Vec<&TrainingWindow> =
                chunk.iter().map(|i| &dataset.train[*i]).collect();
            let (x, y) = batch_arrays(&windows);
            let mut fw = Forward::new(&model.store);
            let xv = fw.tape.leaf(x.into_dyn());
            let yv = fw.tape.leaf(y.into_dyn());
            let step_seed = mix_seed(run.seed, global_step);
            let loss_var = match run.mode {
                Mode::Mae => {
                    let tag = StochasticTag::member(step_seed);
                    let pred = model.forward_on(&mut fw, xv, tag)?;
                    weighted_mae_loss(&mut fw, pred, yv, &aw, &cw)
                }
                Mode::Crps { members } => {
                    let mut preds = Vec::with_capacity(members);
                    for m in 0..members {
                        let tag = StochasticTag::member(mix_seed(step_seed, m as u64));
                        preds.push(model.forward_on(&mut fw, xv, tag)?);
                    }
                    fair_crps_loss(&mut fw, &preds, yv, &aw, &cw)?
                }
            };
            let loss = *fw.tape.value(loss_var).first().unwrap();
            if !loss.is_finite() {
                last_good.diverged = true;
                return Ok(last_good);
            }
            // loss-spike guard: skip steps far above the running median
            let spike = if recent_losses.len() >= 5 {
                let mut sample = recent_losses.clone();
                loss > 10.0 * median(&mut sample)
            } else {
                false
            };
            recent_losses.push(loss);
            if recent_losses.len() > 25 {
                recent_losses.remove(0);
            }
            epoch_loss += loss;
            n_batches += 1;
            if spike {
                skipped += 1;
            } else {
                let grads = fw.param_grads(loss_var);
                drop(fw);
                opt.step(&mut model.store, &grads, stage_step)?;
                ema_update(&mut ema, model.store.values(), run.optim.ema_decay);
            }
            global_step += 1;
            stage_step += 1;
        }

        // epoch-end validation with the EMA weights
        let mut eval_model = build(&model.config, &dataset.grid, 0)?;
        copy_values(&mut eval_model.store, &ema)?;
        let (val_mae, val_crps) = match run.mode {
            Mode::Mae => (Some(validation_mae(&eval_model, dataset, &aw)?), Vec::new()),
            Mode::Crps { members } => (
                None,
                validation_crps(
                    &eval_model,
                    dataset,
                    &aw,
                    &run.plan.validation_leads,
                    members.max(2),
                    run.plan.validation_inits,
                    mix_seed(run.seed, 0x7a1 ^ epoch as u64),
                )?,
            ),
        };
        history.push(EpochLog {
            stage: run.stage,
            epoch,
            global_step,
            mean_train_loss: epoch_loss / n_batches.max(1) as f64,
            val_mae,
            val_crps,
            skipped_steps: skipped,
        });
        last_good = make_ckpt(&model, &ema, &opt, epoch + 1, global_step, &history, false);
    }
    Ok(last_good)
}

/// Fill in `total_steps` when left at zero: one schedule over the whole
/// stage.
fn resolved_optim(cfg: &OptimConfig, epochs: usize, dataset: &Dataset, batch: usize) -> OptimConfig {
    let mut cfg = cfg.clone();
    if cfg.total_steps == 0 {
        let steps = epochs * dataset.train.len().div_ceil(batch);
        cfg.total_steps = steps.max(cfg.warmup_steps).max(1);
    }
    cfg
}

/// Stage 1: deterministic MAE pre-training with dropout as a regularizer.
pub fn train_stage1(plan: &TrainingPlan, model: Model, dataset: &Dataset) -> Result<Checkpoint> {
    plan.validate()?;
    let seed = plan.seeds[0];
    let optim = resolved_optim(&plan.stage1_optim, plan.stage1_epochs, dataset, plan.batch_size);
    let opt = Optimizer::new(optim.clone(), &model.store)?;
    let ema: Vec<ArrayD<f64>> = model.store.values().to_vec();
    let run = StageRun {
        plan,
        dataset,
        mode: Mode::Mae,
        optim,
        epochs: plan.stage1_epochs,
        seed,
        stage: StageTag::Stage1,
    };
    run_stage(&run, model, ema, opt, 0, 0, Vec::new())
}

/// Stage 2: fair-CRPS fine-tuning with M member-seeded stochastic forward
/// passes per batch. The EMA restarts from the loaded weights.
pub fn train_stage2(
    plan: &TrainingPlan,
    start: &Checkpoint,
    dataset: &Dataset,
    seed: u64,
) -> Result<Checkpoint> {
    plan.validate()?;
    if plan.train_ensemble_size < 2 {
        return Err(Error::invalid("Stage 2 requires at least 2 members"));
    }
    let model = start.model()?;
    let optim = resolved_optim(&plan.stage2_optim, plan.stage2_epochs, dataset, plan.batch_size);
    let opt = Optimizer::new(optim.clone(), &model.store)?;
    let ema: Vec<ArrayD<f64>> = model.store.values().to_vec();
    let stage = if plan.from_scratch_crps {
        StageTag::Scratch
    } else {
        StageTag::Stage2
    };
    let run = StageRun {
        plan,
        dataset,
        mode: Mode::Crps {
            members: plan.train_ensemble_size,
        },
        optim,
        epochs: plan.stage2_epochs,
        seed,
        stage,
    };
    run_stage(&run, model, ema, opt, 0, start.global_step, start.history.clone())
}

/// Stage 3: K independent Stage-2 runs from the same Stage-1 checkpoint,
/// differing only in seed.
pub fn train_deep_ensemble(
    plan: &TrainingPlan,
    stage1: &Checkpoint,
    dataset: &Dataset,
) -> Result<Vec<Checkpoint>> {
    plan.validate()?;
    let mut out = Vec::with_capacity(plan.deep_ensemble_size);
    for k in 0..plan.deep_ensemble_size {
        out.push(train_stage2(plan, stage1, dataset, plan.seeds[k])?);
    }
    Ok(out)
}

/// Continue an interrupted stage from a checkpoint up to `epochs` total
/// epochs for that stage.
pub fn resume_stage(
    plan: &TrainingPlan,
    ckpt: &Checkpoint,
    dataset: &Dataset,
    epochs: usize,
) -> Result<Checkpoint> {
    plan.validate()?;
    let model = ckpt.model()?;
    let (mode, optim_cfg) = match ckpt.stage {
        StageTag::Stage1 => (Mode::Mae, &plan.stage1_optim),
        StageTag::Stage2 | StageTag::Scratch => (
            Mode::Crps {
                members: plan.train_ensemble_size,
            },
            &plan.stage2_optim,
        ),
    };
    let optim = resolved_optim(optim_cfg, epochs, dataset, plan.batch_size);
    let mut opt = Optimizer::new(optim.clone(), &model.store)?;
    let named: HashMap<String, ArrayD<f64>> = ckpt.opt_state.iter().cloned().collect();
    opt.load_state(&model.store, &named, ckpt.opt_steps_taken)?;
    let run = StageRun {
        plan,
        dataset,
        mode,
        optim,
        epochs,
        seed: ckpt.seed,
        stage: ckpt.stage,
    };
    run_stage(
        &run,
        model,
        ckpt.ema.clone(),
        opt,
        ckpt.epoch_in_stage,
        ckpt.global_step,
        ckpt.history.clone(),
    )
}

// ---------------------------------------------------------------------------
// checkpoint serialization

#[derive(Serialize, Deserialize)]
struct ArrayIndexEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    model_config: ModelConfig,
    grid: GridSpec,
    stats: NormStats,
    channel_names: Vec<String>,
    stage: StageTag,
    epoch_in_stage: usize,
    global_step: u64,
    seed: u64,
    opt_steps_taken: u64,
    diverged: bool,
    history: Vec<EpochLog>,
    weights_index: Vec<ArrayIndexEntry>,
    opt_index: Vec<ArrayIndexEntry>,
}

fn write_f64_file(path: &Path, arrays: &[&ArrayD<f64>]) -> Result<()> {
    let mut bytes = Vec::new();
    for a in arrays {
        for v in a.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_f64_file(path: &Path, index: &[ArrayIndexEntry]) -> Result<Vec<ArrayD<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let total: usize = index.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if bytes.len() != total * 8 {
        return Err(Error::Format(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            total * 8
        )));
    }
    let mut out = Vec::with_capacity(index.len());
    let mut offset = 0usize;
    for entry in index {
        let n: usize = entry.shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let start = (offset + i) * 8;
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&bytes[start..start + 8]);
            values.push(f64::from_le_bytes(buf));
        }
        offset += n;
        out.push(
            ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
                .map_err(|e| Error::Format(e.to_string()))?,
        );
    }
    Ok(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let weights_index: Vec<ArrayIndexEntry> = ckpt
        .weights
        .iter()
        .map(|(name, a)| ArrayIndexEntry {
            name: name.to_string(),
            shape: a.shape().to_vec(),
        })
        .collect();
    let opt_index: Vec<ArrayIndexEntry> = ckpt
        .opt_state
        .iter()
        .map(|(name, a)| ArrayIndexEntry {
            name: name.clone(),
            shape: a.shape().to_vec(),
        })
        .collect();
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model_config: ckpt.model_config.clone(),
        grid: ckpt.grid.clone(),
        stats: ckpt.stats.clone(),
        channel_names: ckpt.channel_names.clone(),
        stage: ckpt.stage,
        epoch_in_stage: ckpt.epoch_in_stage,
        global_step: ckpt.global_step,
        seed: ckpt.seed,
        opt_steps_taken: ckpt.opt_steps_taken,
        diverged: ckpt.diverged,
        history: ckpt.history.clone(),
        weights_index,
        opt_index,
    };
    let manifest_path = dir.join("manifest.json");
    let body =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&manifest_path, body)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;

    let weight_refs: Vec<&ArrayD<f64>> = ckpt.weights.iter().map(|(_, a)| a).collect();
    write_f64_file(&dir.join("weights.f64"), &weight_refs)?;
    let ema_refs: Vec<&ArrayD<f64>> = ckpt.ema.iter().collect();
    write_f64_file(&dir.join("ema.f64"), &ema_refs)?;
    let opt_refs: Vec<&ArrayD<f64>> = ckpt.opt_state.iter().map(|(_, a)| a).collect();
    write_f64_file(&dir.join("optimizer.f64"), &opt_refs)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join("manifest.json");
    let body = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&body).map_err(|e| {
        Error::Format(format!("corrupt checkpoint manifest {}: {e}", manifest_path.display()))
    })?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {} unsupported (expected {})",
            manifest.format_version, CHECKPOINT_FORMAT_VERSION
        )));
    }
    let weights_arrays = read_f64_file(&dir.join("weights.f64"), &manifest.weights_index)?;
    let ema = read_f64_file(&dir.join("ema.f64"), &manifest.weights_index)?;
    let opt_arrays = read_f64_file(&dir.join("optimizer.f64"), &manifest.opt_index)?;
    let mut weights = ParamStore::new();
    for (entry, a) in manifest.weights_index.iter().zip(weights_arrays) {
        weights.register(entry.name.clone(), a);
    }
    let opt_state = manifest
        .opt_index
        .iter()
        .zip(opt_arrays)
        .map(|(entry, a)| (entry.name.clone(), a))
        .collect();
    Ok(Checkpoint {
        model_config: manifest.model_config,
        grid: manifest.grid,
        stats: manifest.stats,
        channel_names: manifest.channel_names,
        weights,
        ema,
        opt_state,
        opt_steps_taken: manifest.opt_steps_taken,
        stage: manifest.stage,
        epoch_in_stage: manifest.epoch_in_stage,
        global_step: manifest.global_step,
        seed: manifest.seed,
        history: manifest.history,
        diverged: manifest.diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::StochasticMode;
    use crate::grid::make_equiangular_grid;
    use crate::toyatmos::{
        fit_norm_stats, initial_condition, make_windows, simulate_from, split_indices, DynamicsParams,
    };

    fn tiny_dataset() -> Dataset {
        let grid = make_equiangular_grid(8, 16).unwrap();
        let params = DynamicsParams {
            n_channels: 1,
            advection_speed: vec![0.7],
            diffusion_coeff: vec![0.05],
            forcing_amplitude: 0.05,
            coupling_strength: 0.0,
            seed: 5,
        };
        let init = initial_condition(&grid, &params);
        let traj = simulate_from(&grid, &params, &init, 120).unwrap();
        let stats = fit_norm_stats(&traj).unwrap();
        let windows = make_windows(&traj, &stats, 24).unwrap();
        let (train, val, _) = split_indices(windows.len());
        Dataset {
            train: windows[train].to_vec(),
            val: windows[val].to_vec(),
            grid,
            stats,
            channel_names: vec!["ch0".into()],
        }
    }

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            in_channels: 6,
            out_channels: 1,
            base_width: 6,
            channel_multipliers: vec![1, 2],
            blocks_per_resolution: 1,
            attention_levels: vec![0],
            dropout_rate: 0.1,
            stochastic_mode: StochasticMode::Dropout,
            noise_dim: 4,
        }
    }

    fn tiny_optim() -> OptimConfig {
        OptimConfig {
            muon_peak_lr: 5e-3,
            adamw_peak_lr: 5e-4,
            muon_weight_decay: 0.0,
            adamw_weight_decay: 0.0,
            warmup_steps: 3,
            total_steps: 0, // resolved from the stage length
            momentum: 0.95,
            ns_iterations: 5,
            ema_decay: 0.9,
            adamw_only: false,
        }
    }

    fn tiny_plan(stage1_epochs: usize, stage2_epochs: usize) -> TrainingPlan {
        TrainingPlan {
            stage1_epochs,
            stage2_epochs,
            batch_size: 16,
            train_ensemble_size: 2,
            deep_ensemble_size: 2,
            stage1_optim: tiny_optim(),
            stage2_optim: tiny_optim(),
            seeds: vec![11, 12, 13, 14],
            from_scratch_crps: false,
            validation_leads: vec![1, 2],
            validation_inits: 2,
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let dataset = tiny_dataset();
        let model = build(&tiny_model_config(), &dataset.grid, 3).unwrap();
        let init_values = model.store.values().to_vec();
        let ckpt = train_stage1(&tiny_plan(0, 1), model, &dataset).unwrap();
        assert_eq!(ckpt.weights.values(), init_values.as_slice());
        assert_eq!(ckpt.ema.as_slice(), init_values.as_slice());
        assert_eq!(ckpt.global_step, 0);
    }

    #[test]
    fn same_seed_reproduces_loss_curve() {
        let dataset = tiny_dataset();
        let plan = tiny_plan(2, 1);
        let run = || {
            let model = build(&tiny_model_config(), &dataset.grid, 3).unwrap();
            train_stage1(&plan, model, &dataset).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.history, b.history);
        assert_eq!(a.weights.values(), b.weights.values());
    }

    #[test]
    fn stage1_beats_persistence() {
        let dataset = tiny_dataset();
        let aw = area_weights(&dataset.grid).unwrap();
        let plan = tiny_plan(8, 1);
        let model = build(&tiny_model_config(), &dataset.grid, 3).unwrap();
        let ckpt = train_stage1(&plan, model, &dataset).unwrap();
        let val = ckpt.history.last().unwrap().val_mae.unwrap();
        let persistence = persistence_mae(&dataset, &aw).unwrap();
        assert!(
            val < persistence,
            "trained MAE {val} not below persistence {persistence}"
        );
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dataset = tiny_dataset();
        let plan = tiny_plan(1, 1);
        let model = build(&tiny_model_config(), &dataset.grid, 3).unwrap();
        let ckpt = train_stage1(&plan, model, &dataset).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&ckpt, dir.path()).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.weights.values(), ckpt.weights.values());
        assert_eq!(loaded.ema, ckpt.ema);
        assert_eq!(loaded.history, ckpt.history);
        // bitwise-identical forward passes
        let x = Array4::from_elem((1, 6, 8, 16), 0.3);
        let before = ckpt
            .model()
            .unwrap()
            .predict(&x, StochasticTag::deterministic())
            .unwrap();
        let after = loaded
            .model()
            .unwrap()
            .predict(&x, StochasticTag::deterministic())
            .unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn version_mismatch_is_an_explicit_error() {
        let dataset = tiny_dataset();
        let plan = tiny_plan(0, 1);
        let model = build(&tiny_model_config(), &dataset.grid, 3).unwrap();
        let ckpt = train_stage1(&plan, model, &dataset).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&ckpt, dir.path()).unwrap();
        let manifest_path = dir.path().join("manifest.json");
        let body = fs::read_to_string(&manifest_path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 999");
        fs::write(&manifest_path, body).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dataset = tiny_dataset();
        let plan = tiny_plan(3, 1);
        let model = build(&tiny_model_config(), &dataset.grid, 3).unwrap();
        let full = train_stage1(&plan, model, &dataset).unwrap();

        // the interrupted run must follow the full run's LR schedule
        let mut short_plan = tiny_plan(1, 1);
        short_plan.stage1_optim =
            resolved_optim(&plan.stage1_optim, 3, &dataset, plan.batch_size);
        let model2 = build(&tiny_model_config(), &dataset.grid, 3).unwrap();
        let mid = train_stage1(&short_plan, model2, &dataset).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&mid, dir.path()).unwrap();
        let reloaded = load_checkpoint(dir.path()).unwrap();
        // resume must use the same schedule length as the full run
        let mut resume_plan = plan.clone();
        resume_plan.stage1_optim =
            resolved_optim(&plan.stage1_optim, 3, &dataset, plan.batch_size);
        let resumed = resume_stage(&resume_plan, &reloaded, &dataset, 3).unwrap();

        assert_eq!(full.history.len(), resumed.history.len());
        for (a, b) in full.history.iter().zip(&resumed.history) {
            assert!((a.mean_train_loss - b.mean_train_loss).abs() < 1e-6);
        }
    }

    #[test]
    fn stage2_improves_over_stage1_ensemble() {
        let dataset = tiny_dataset();
        let aw = area_weights(&dataset.grid).unwrap();
        let plan = tiny_plan(6, 4);
        let model = build(&tiny_model_config(), &dataset.grid, 3).unwrap();
        let stage1 = train_stage1(&plan, model, &dataset).unwrap();
        let baseline = validation_crps(
            &stage1.ema_model().unwrap(),
            &dataset,
            &aw,
            &[1],
            2,
            2,
            99,
        )
        .unwrap()[0]
            .1;
        let stage2 = train_stage2(&plan, &stage1, &dataset, plan.seeds[0]).unwrap();
        let tuned = stage2.history.last().unwrap().val_crps[0].1;
        assert!(
            tuned < baseline,
            "stage2 CRPS {tuned} not below stage1 ensemble CRPS {baseline}"
        );
        assert_eq!(stage2.stage, StageTag::Stage2);
    }

    #[test]
    fn deep_ensemble_members_differ() {
        let dataset = tiny_dataset();
        let plan = tiny_plan(1, 1);
        let model = build(&tiny_model_config(), &dataset.grid, 3).unwrap();
        let stage1 = train_stage1(&plan, model, &dataset).unwrap();
        let members = train_deep_ensemble(&plan, &stage1, &dataset).unwrap();
        assert_eq!(members.len(), 2);
        assert_ne!(members[0].weights.values(), members[1].weights.values());
    }

    #[test]
    fn compute_fraction_matches_published_budget() {
        let mut plan = tiny_plan(100, 8);
        plan.train_ensemble_size = 2;
        let fraction = stage2_compute_fraction(&plan) * 100.0;
        assert!(
            (fraction - 15.0).abs() <= 3.0,
            "stage-2 fraction {fraction}% not within 3 points of 15%"
        );
    }
}
