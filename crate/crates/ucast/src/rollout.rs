//! Autoregressive ensemble inference: rolls trained checkpoints forward in
//! normalized space, combining K checkpoints x N stochastic members, and
//! persists forecast archives (manifest + per-member float32 arrays).

use std::fs;
use std::path::Path;

use ndarray::{Array4, Array5, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::StochasticTag;
use crate::curriculum::Checkpoint;
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::nn::mix_seed;
use crate::toyatmos::{forcing_channels, NormStats, TrainingWindow};

pub const ARCHIVE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct EnsembleForecast {
    /// `(K*N) x L x C x H x W`, ordered by member id.
    pub members: Array5<f64>,
    pub init_time: i64,
    /// (checkpoint index, member seed) per member, in output order.
    pub member_ids: Vec<(usize, u64)>,
    pub lead_steps: Vec<usize>,
    /// False while values are in normalized units.
    pub physical_units: bool,
    /// Per member: the last finite lead if the trajectory went non-finite
    /// (leads beyond it are NaN), or None for a clean rollout.
    pub truncated: Vec<Option<usize>>,
    pub channel_names: Vec<String>,
    pub grid: GridSpec,
}

impl EnsembleForecast {
    pub fn n_members(&self) -> usize {
        self.members.dim().0
    }

    pub fn n_leads(&self) -> usize {
        self.members.dim().1
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RolloutOptions {
    /// Freeze each member's dropout mask across autoregressive steps
    /// instead of redrawing it per step.
    pub frozen_masks: bool,
    /// Clock period (steps) for the time-of-day forcing channels.
    pub clock_period: usize,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions {
            frozen_masks: false,
            clock_period: 24,
        }
    }
}

fn check_checkpoints(checkpoints: &[Checkpoint]) -> Result<()> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::invalid("need at least one checkpoint"))?;
    for ckpt in checkpoints {
        if ckpt.grid != first.grid {
            return Err(Error::invalid("checkpoints disagree on the grid"));
        }
        if ckpt.stats != first.stats {
            return Err(Error::invalid(
                "checkpoints disagree on normalization statistics",
            ));
        }
    }
    Ok(())
}

/// Roll an ensemble forward `n_steps` from one initialization window, with
/// explicit per-checkpoint member seeds (outer: checkpoint, inner: member).
pub fn roll_forward_with_seeds(
    checkpoints: &[Checkpoint],
    init_window: &TrainingWindow,
    n_steps: usize,
    member_seeds: &[Vec<u64>],
    options: RolloutOptions,
) -> Result<EnsembleForecast> {
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be at least 1"));
    }
    check_checkpoints(checkpoints)?;
    if member_seeds.len() != checkpoints.len() {
        return Err(Error::invalid(
            "need one member-seed list per checkpoint",
        ));
    }
    let grid = checkpoints[0].grid.clone();
    let stats = checkpoints[0].stats.clone();
    let channel_names = checkpoints[0].channel_names.clone();
    let c = channel_names.len();
    let (in_c, h, w) = init_window.inputs.dim();
    if in_c != 2 * c {
        return Err(Error::ShapeMismatch(format!(
            "window has {in_c} input channels, expected {}",
            2 * c
        )));
    }
    let n_forcings = init_window.forcings.dim().0;

    let total_members: usize = member_seeds.iter().map(|s| s.len()).sum();
    let mut members = Array5::from_elem((total_members, n_steps, c, h, w), f64::NAN);
    let mut member_ids = Vec::with_capacity(total_members);
    let mut truncated = vec![None; total_members];

    let mut out_idx = 0usize;
    for (k, ckpt) in checkpoints.iter().enumerate() {
        let model = ckpt.ema_model()?;
        for &member_seed in &member_seeds[k] {
            member_ids.push((k, member_seed));
            let mut prev = init_window
                .inputs
                .slice(ndarray::s![0..c, .., ..])
                .to_owned();
            let mut cur = init_window
                .inputs
                .slice(ndarray::s![c..2 * c, .., ..])
                .to_owned();
            let mut time = init_window.time_index;
            for step in 0..n_steps {
                let forcings = forcing_channels(h, w, time, options.clock_period);
                debug_assert_eq!(forcings.dim().0, n_forcings);
                let mut x = Array4::zeros((1, 2 * c + n_forcings, h, w));
                x.slice_mut(ndarray::s![0, 0..c, .., ..]).assign(&prev);
                x.slice_mut(ndarray::s![0, c..2 * c, .., ..]).assign(&cur);
                x.slice_mut(ndarray::s![0, 2 * c.., .., ..]).assign(&forcings);
                let tag_seed = if options.frozen_masks {
                    member_seed
                } else {
                    mix_seed(member_seed, step as u64)
                };
                let residual = model.predict(&x, StochasticTag::member(tag_seed))?;
                let next = &cur + &residual.index_axis(Axis(0), 0);
                if !next.iter().all(|v| v.is_finite()) {
                    truncated[out_idx] = Some(step);
                    break;
                }
                members
                    .slice_mut(ndarray::s![out_idx, step, .., .., ..])
                    .assign(&next);
                prev = std::mem::replace(&mut cur, next);
                time += 1;
            }
            out_idx += 1;
        }
    }

    // denormalize at the archive boundary
    for ch in 0..c {
        let mean = stats.mean[ch];
        let std = stats.std[ch];
        members
            .slice_mut(ndarray::s![.., .., ch, .., ..])
            .mapv_inplace(|v| v * std + mean);
    }

    Ok(EnsembleForecast {
        members,
        init_time: init_window.time_index,
        member_ids,
        lead_steps: (1..=n_steps).collect(),
        physical_units: true,
        truncated,
        channel_names,
        grid,
    })
}

/// K checkpoints x N members per checkpoint, with member seeds derived from
/// `seed`, `checkpoint index`, and member index.
pub fn roll_forward(
    checkpoints: &[Checkpoint],
    init_window: &TrainingWindow,
    n_steps: usize,
    members_per_ckpt: usize,
    seed: u64,
    options: RolloutOptions,
) -> Result<EnsembleForecast> {
    if members_per_ckpt == 0 {
        return Err(Error::invalid("members_per_ckpt must be at least 1"));
    }
    let member_seeds: Vec<Vec<u64>> = (0..checkpoints.len())
        .map(|k| {
            (0..members_per_ckpt)
                .map(|n| mix_seed(mix_seed(seed, k as u64), n as u64))
                .collect()
        })
        .collect();
    roll_forward_with_seeds(checkpoints, init_window, n_steps, &member_seeds, options)
}

#[derive(Serialize, Deserialize)]
struct ArchiveManifest {
    format_version: u32,
    grid: GridSpec,
    stats_placeholder: Option<NormStats>,
    channel_names: Vec<String>,
    init_time: i64,
    lead_steps: Vec<usize>,
    member_ids: Vec<(usize, u64)>,
    physical_units: bool,
    truncated: Vec<Option<usize>>,
    n_lat: usize,
    n_lon: usize,
}

fn member_file_name(i: usize) -> String {
    format!("member_{i:04}.f32")
}

/// Write the forecast as a directory: `manifest.json` plus one float32
/// little-endian `L*C*H*W` row-major file per member. Values are rounded
/// to float32.
pub fn write_archive(forecast: &EnsembleForecast, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let (_, _, _, h, w) = forecast.members.dim();
    let manifest = ArchiveManifest {
        format_version: ARCHIVE_FORMAT_VERSION,
        grid: forecast.grid.clone(),
        stats_placeholder: None,
        channel_names: forecast.channel_names.clone(),
        init_time: forecast.init_time,
        lead_steps: forecast.lead_steps.clone(),
        member_ids: forecast.member_ids.clone(),
        physical_units: forecast.physical_units,
        truncated: forecast.truncated.clone(),
        n_lat: h,
        n_lon: w,
    };
    let body = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, body).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    for m in 0..forecast.n_members() {
        let mut bytes = Vec::new();
        for v in forecast.members.index_axis(Axis(0), m).iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let path = dir.join(member_file_name(m));
        fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

pub fn read_archive(dir: &Path) -> Result<EnsembleForecast> {
    let mpath = dir.join("manifest.json");
    let body =
        fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let manifest: ArchiveManifest = serde_json::from_str(&body).map_err(|e| {
        Error::Format(format!("corrupt archive manifest {}: {e}", mpath.display()))
    })?;
    if manifest.format_version != ARCHIVE_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "archive format version {} unsupported (expected {})",
            manifest.format_version, ARCHIVE_FORMAT_VERSION
        )));
    }
    let n_members = manifest.member_ids.len();
    let l = manifest.lead_steps.len();
    let c = manifest.channel_names.len();
    let (h, w) = (manifest.n_lat, manifest.n_lon);
    let mut members = Array5::zeros((n_members, l, c, h, w));
    for m in 0..n_members {
        let path = dir.join(member_file_name(m));
        let bytes = fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let expected = l * c * h * w * 4;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "{} holds {} bytes, expected {expected}",
                path.display(),
                bytes.len()
            )));
        }
        let mut view = members.index_axis_mut(Axis(0), m);
        for (i, v) in view.iter_mut().enumerate() {
            let mut buf = [0u8; 4];
            buf.copy_from_slice(&bytes[i * 4..i * 4 + 4]);
            *v = f32::from_le_bytes(buf) as f64;
        }
    }
    Ok(EnsembleForecast {
        members,
        init_time: manifest.init_time,
        member_ids: manifest.member_ids,
        lead_steps: manifest.lead_steps,
        physical_units: manifest.physical_units,
        truncated: manifest.truncated,
        channel_names: manifest.channel_names,
        grid: manifest.grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use crate::backbone::{build, ModelConfig, StochasticMode};
    use crate::curriculum::StageTag;
    use crate::grid::make_equiangular_grid;
    use crate::nn::normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model_config(mode: StochasticMode) -> ModelConfig {
        ModelConfig {
            in_channels: 6,
            out_channels: 1,
            base_width: 6,
            channel_multipliers: vec![1, 2],
            blocks_per_resolution: 1,
            attention_levels: vec![0],
            dropout_rate: 0.2,
            stochastic_mode: mode,
            noise_dim: 4,
        }
    }

    fn fresh_checkpoint(mode: StochasticMode, init_seed: u64, perturb: bool) -> Checkpoint {
        let grid = make_equiangular_grid(8, 16).unwrap();
        let mut model = build(&model_config(mode), &grid, init_seed).unwrap();
        if perturb {
            let mut rng = ChaCha8Rng::seed_from_u64(0xfeed ^ init_seed);
            for v in model.store.values_mut() {
                v.mapv_inplace(|x| x + 0.05 * normal(&mut rng));
            }
        }
        Checkpoint {
            model_config: model.config.clone(),
            grid,
            stats: NormStats {
                mean: vec![1.5],
                std: vec![2.0],
                diff_std: vec![1.0],
            },
            channel_names: vec!["ch0".into()],
            ema: model.store.values().to_vec(),
            weights: model.store.clone(),
            opt_state: Vec::new(),
            opt_steps_taken: 0,
            stage: StageTag::Stage1,
            epoch_in_stage: 0,
            global_step: 0,
            seed: 0,
            history: Vec::new(),
            diverged: false,
        }
    }

    fn init_window() -> TrainingWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let inputs = Array3::from_shape_fn((2, 8, 16), |_| normal(&mut rng));
        TrainingWindow {
            inputs,
            forcings: forcing_channels(8, 16, 5, 24),
            target_residual: Array3::zeros((1, 8, 16)),
            time_index: 5,
        }
    }

    #[test]
    fn zero_residual_model_gives_persistence() {
        // a freshly initialized model outputs exactly zero (zero-init head)
        let ckpt = fresh_checkpoint(StochasticMode::Dropout, 1, false);
        let window = init_window();
        let fc = roll_forward(&[ckpt.clone()], &window, 4, 2, 9, RolloutOptions::default())
            .unwrap();
        // persistence: x_t held fixed, denormalized
        let xt = window.inputs.slice(ndarray::s![1, .., ..]);
        for m in 0..fc.n_members() {
            for lead in 0..4 {
                for i in 0..8 {
                    for j in 0..16 {
                        let want = xt[[i, j]] * ckpt.stats.std[0] + ckpt.stats.mean[0];
                        let got = fc.members[[m, lead, 0, i, j]];
                        assert!((got - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn single_step_deterministic_equals_forward_pass() {
        let ckpt = fresh_checkpoint(StochasticMode::Deterministic, 2, true);
        let window = init_window();
        let fc = roll_forward(&[ckpt.clone()], &window, 1, 1, 3, RolloutOptions::default())
            .unwrap();
        let model = ckpt.ema_model().unwrap();
        let c = 1;
        let mut x = Array4::zeros((1, 6, 8, 16));
        x.slice_mut(ndarray::s![0, 0..2, .., ..]).assign(&window.inputs);
        x.slice_mut(ndarray::s![0, 2.., .., ..]).assign(&window.forcings);
        let residual = model.predict(&x, StochasticTag::deterministic()).unwrap();
        for i in 0..8 {
            for j in 0..16 {
                let norm = window.inputs[[c, i, j]] + residual[[0, 0, i, j]];
                let want = norm * ckpt.stats.std[0] + ckpt.stats.mean[0];
                assert!((fc.members[[0, 0, 0, i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_bitwise_identical() {
        let ckpt = fresh_checkpoint(StochasticMode::Dropout, 3, true);
        let window = init_window();
        let a = roll_forward(&[ckpt.clone()], &window, 3, 2, 42, RolloutOptions::default())
            .unwrap();
        let b = roll_forward(&[ckpt], &window, 3, 2, 42, RolloutOptions::default()).unwrap();
        assert_eq!(a.members, b.members);
        assert_eq!(a.member_ids, b.member_ids);
    }

    #[test]
    fn members_are_exchangeable() {
        let ckpt = fresh_checkpoint(StochasticMode::Dropout, 4, true);
        let window = init_window();
        let fwd = roll_forward_with_seeds(
            &[ckpt.clone()],
            &window,
            2,
            &[vec![10, 20, 30]],
            RolloutOptions::default(),
        )
        .unwrap();
        let rev = roll_forward_with_seeds(
            &[ckpt],
            &window,
            2,
            &[vec![30, 10, 20]],
            RolloutOptions::default(),
        )
        .unwrap();
        for (a, b) in [(0usize, 1usize), (1, 2), (2, 0)] {
            assert_eq!(
                fwd.members.index_axis(Axis(0), a),
                rev.members.index_axis(Axis(0), b)
            );
        }
    }

    #[test]
    fn deterministic_mode_has_zero_spread() {
        let ckpt = fresh_checkpoint(StochasticMode::Deterministic, 5, true);
        let window = init_window();
        let fc = roll_forward(&[ckpt], &window, 3, 3, 1, RolloutOptions::default()).unwrap();
        let first = fc.members.index_axis(Axis(0), 0).to_owned();
        for m in 1..fc.n_members() {
            assert_eq!(fc.members.index_axis(Axis(0), m), first.view());
        }
    }

    #[test]
    fn nan_truncates_and_flags_member() {
        let mut ckpt = fresh_checkpoint(StochasticMode::Dropout, 6, true);
        for v in ckpt.ema.iter_mut() {
            v.mapv_inplace(|_| f64::NAN);
        }
        let window = init_window();
        let fc = roll_forward(&[ckpt], &window, 3, 1, 1, RolloutOptions::default()).unwrap();
        assert_eq!(fc.truncated[0], Some(0));
        assert!(fc.members[[0, 0, 0, 0, 0]].is_nan());
    }

    #[test]
    fn archive_round_trips() {
        let ckpt = fresh_checkpoint(StochasticMode::Dropout, 7, true);
        let window = init_window();
        let fc = roll_forward(&[ckpt], &window, 3, 2, 11, RolloutOptions::default()).unwrap();
        // quantize to f32 so the round-trip is exact
        let mut expected = fc.clone();
        expected.members.mapv_inplace(|v| v as f32 as f64);
        let dir = tempfile::tempdir().unwrap();
        write_archive(&fc, dir.path()).unwrap();
        let back = read_archive(dir.path()).unwrap();
        assert_eq!(back.members, expected.members);
        assert_eq!(back.member_ids, fc.member_ids);
        assert_eq!(back.lead_steps, fc.lead_steps);
        assert_eq!(back.init_time, fc.init_time);
    }

    #[test]
    fn manifest_reports_dimensions() {
        let grid = make_equiangular_grid(32, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fc = EnsembleForecast {
            members: Array5::from_shape_fn((8, 10, 4, 32, 64), |_| normal(&mut rng)),
            init_time: 0,
            member_ids: (0..8).map(|i| (0, i as u64)).collect(),
            lead_steps: (1..=10).collect(),
            physical_units: true,
            truncated: vec![None; 8],
            channel_names: (0..4).map(|i| format!("ch{i}")).collect(),
            grid,
        };
        let dir = tempfile::tempdir().unwrap();
        write_archive(&fc, dir.path()).unwrap();
        let back = read_archive(dir.path()).unwrap();
        assert_eq!(back.members.dim(), (8, 10, 4, 32, 64));
        assert_eq!(back.n_leads(), 10);
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let ckpt = fresh_checkpoint(StochasticMode::Dropout, 9, true);
        let window = init_window();
        let fc = roll_forward(&[ckpt], &window, 1, 1, 1, RolloutOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_archive(&fc, dir.path()).unwrap();
        let mpath = dir.path().join("manifest.json");
        let body = fs::read_to_string(&mpath)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 2");
        fs::write(&mpath, body).unwrap();
        let err = read_archive(dir.path()).unwrap_err();
        assert!(err.to_string().contains("version"));
    }
}
