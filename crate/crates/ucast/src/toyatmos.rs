//! Synthetic ground-truth dynamics on the periodic grid, plus training-window
//! packaging (two past states in, one-step residual out).
//!
//! The dynamics are semi-Lagrangian circular advection along longitude,
//! flux-form explicit diffusion (conserving the area-weighted global mean),
//! zonally uniform stochastic forcing, and a weak quadratic cross-channel
//! coupling. Everything is deterministic given the seed.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{area_weights, GridSpec};
use crate::nn::{mix_seed, normal};

pub const TRAJECTORY_FORMAT_VERSION: u32 = 1;
const CHUNK_STEPS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    pub n_channels: usize,
    /// Cells per step along longitude, per channel. May be fractional.
    pub advection_speed: Vec<f64>,
    /// Nondimensional explicit-diffusion coefficient per channel; must stay
    /// within the unit-grid stability bound of 0.25.
    pub diffusion_coeff: Vec<f64>,
    pub forcing_amplitude: f64,
    pub coupling_strength: f64,
    pub seed: u64,
}

impl DynamicsParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 {
            return Err(Error::invalid("n_channels must be positive"));
        }
        if self.advection_speed.len() != self.n_channels
            || self.diffusion_coeff.len() != self.n_channels
        {
            return Err(Error::invalid("per-channel parameter length != n_channels"));
        }
        for &d in &self.diffusion_coeff {
            if !(0.0..=0.25).contains(&d) {
                return Err(Error::invalid(format!(
                    "diffusion_coeff {d} outside stability bound [0, 0.25]"
                )));
            }
        }
        if self.forcing_amplitude < 0.0 || self.coupling_strength < 0.0 {
            return Err(Error::invalid("forcing/coupling must be nonnegative"));
        }
        Ok(())
    }
}

/// One atmospheric snapshot: `C x H x W` values at a time index.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTensor {
    pub values: Array3<f64>,
    pub time_index: i64,
    pub channel_names: Vec<String>,
}

impl StateTensor {
    pub fn check_finite(&self) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!(
                "non-finite state at t={}",
                self.time_index
            )))
        }
    }
}

/// Per-channel normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Standard deviation of one-step differences, per channel.
    pub diff_std: Vec<f64>,
}

/// One supervised example: two normalized past states, forcing channels, and
/// the normalized one-step residual target.
#[derive(Debug, Clone)]
pub struct TrainingWindow {
    /// `2C` channels: normalized `x_{t-1}` then `x_t`.
    pub inputs: Array3<f64>,
    /// `F = 4` channels: orography, binary mask, clock sin, clock cos.
    pub forcings: Array3<f64>,
    /// `C` channels: normalized `x_{t+1} - x_t`.
    pub target_residual: Array3<f64>,
    pub time_index: i64,
}

impl TrainingWindow {
    pub const N_FORCINGS: usize = 4;

    /// `2C + F` input stack fed to the network.
    pub fn stacked_input(&self) -> Array3<f64> {
        ndarray::concatenate(
            ndarray::Axis(0),
            &[self.inputs.view(), self.forcings.view()],
        )
        .expect("window channel stack")
    }
}

pub fn default_channel_names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("var{i}")).collect()
}

/// Multi-scale seeded initial condition: 8 zonal/meridional Fourier modes per
/// channel with 1/k amplitude decay.
pub fn initial_condition(grid: &GridSpec, params: &DynamicsParams) -> Vec<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(params.seed, 0x1c));
    let (h, w) = (grid.n_lat, grid.n_lon);
    (0..params.n_channels)
        .map(|_| {
            let mut field = Array2::<f64>::zeros((h, w));
            for k in 1..=8usize {
                let amp = 1.0 / k as f64;
                let kx = rng.gen_range(1..=6) as f64;
                let ky = rng.gen_range(0..=4) as f64;
                let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let psi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                for i in 0..h {
                    let my = (std::f64::consts::PI * ky * (i as f64 + 0.5) / h as f64 + psi).cos();
                    for j in 0..w {
                        let mx =
                            (std::f64::consts::TAU * kx * j as f64 / w as f64 + phi).sin();
                        field[[i, j]] += amp * mx * my;
                    }
                }
            }
            field
        })
        .collect()
}

fn advect_lon(field: &Array2<f64>, speed: f64) -> Array2<f64> {
    let (h, w) = field.dim();
    if speed == 0.0 {
        return field.clone();
    }
    let mut out = Array2::zeros((h, w));
    for j in 0..w {
        // Semi-Lagrangian departure point with circular linear interpolation.
        let dep = j as f64 - speed;
        let j0 = dep.floor();
        let frac = dep - j0;
        let a = (j0 as i64).rem_euclid(w as i64) as usize;
        let b = (j0 as i64 + 1).rem_euclid(w as i64) as usize;
        for i in 0..h {
            out[[i, j]] = (1.0 - frac) * field[[i, a]] + frac * field[[i, b]];
        }
    }
    out
}

fn diffuse(field: &Array2<f64>, coeff: f64, aw: &[f64]) -> Array2<f64> {
    let (h, w) = field.dim();
    if coeff == 0.0 {
        return field.clone();
    }
    let mut out = field.clone();
    for i in 0..h {
        for j in 0..w {
            let jm = (j + w - 1) % w;
            let jp = (j + 1) % w;
            out[[i, j]] += coeff * (field[[i, jp]] - 2.0 * field[[i, j]] + field[[i, jm]]);
        }
    }
    // Latitude: flux form with zero flux at the poles, divided by the row
    // area weight so the area-weighted global mean is conserved.
    for i in 0..h {
        for j in 0..w {
            let f_up = if i + 1 < h {
                coeff * (field[[i + 1, j]] - field[[i, j]])
            } else {
                0.0
            };
            let f_dn = if i > 0 {
                coeff * (field[[i, j]] - field[[i - 1, j]])
            } else {
                0.0
            };
            out[[i, j]] += (f_up - f_dn) / aw[i];
        }
    }
    out
}

/// Evolve `n_steps` from an explicit initial condition. `init[c]` is the
/// channel-`c` field at `time_index` 0.
pub fn simulate_from(
    grid: &GridSpec,
    params: &DynamicsParams,
    init: &[Array2<f64>],
    n_steps: usize,
) -> Result<Vec<StateTensor>> {
    params.validate()?;
    grid.validate()?;
    if init.len() != params.n_channels {
        return Err(Error::invalid("initial condition channel count mismatch"));
    }
    let aw = area_weights(grid)?;
    let names = default_channel_names(params.n_channels);
    let c = params.n_channels;
    let (h, w) = (grid.n_lat, grid.n_lon);
    let mut fields: Vec<Array2<f64>> = init.to_vec();
    let mut forcing_rng = ChaCha8Rng::seed_from_u64(mix_seed(params.seed, 0xf0));
    let lat_profile: Vec<f64> = (0..h).map(|i| grid.lat_center(i).to_radians().cos()).collect();

    let pack = |fields: &[Array2<f64>], t: i64, names: &[String]| -> StateTensor {
        let mut v = Array3::zeros((c, h, w));
        for (ci, f) in fields.iter().enumerate() {
            v.index_axis_mut(ndarray::Axis(0), ci).assign(f);
        }
        StateTensor {
            values: v,
            time_index: t,
            channel_names: names.to_vec(),
        }
    };

    let mut out = Vec::with_capacity(n_steps + 1);
    out.push(pack(&fields, 0, &names));
    for t in 1..=n_steps {
        let mut next: Vec<Array2<f64>> = Vec::with_capacity(c);
        for ci in 0..c {
            let adv = advect_lon(&fields[ci], params.advection_speed[ci]);
            next.push(diffuse(&adv, params.diffusion_coeff[ci], &aw.normalized));
        }
        // Zonally uniform stochastic forcing (commutes with longitude shifts).
        if params.forcing_amplitude > 0.0 {
            for f in next.iter_mut() {
                let g = normal(&mut forcing_rng) * params.forcing_amplitude;
                for i in 0..h {
                    let add = g * lat_profile[i];
                    for j in 0..w {
                        f[[i, j]] += add;
                    }
                }
            }
        }
        // Weak quadratic cross-channel coupling, pointwise and bounded.
        if params.coupling_strength > 0.0 && c >= 2 {
            let prev = next.clone();
            for ci in 0..c {
                let a = &prev[(ci + 1) % c];
                let b = &prev[(ci + 2) % c];
                for i in 0..h {
                    for j in 0..w {
                        next[ci][[i, j]] +=
                            params.coupling_strength * (a[[i, j]] * b[[i, j]]).tanh();
                    }
                }
            }
        }
        fields = next;
        out.push(pack(&fields, t as i64, &names));
        out.last().unwrap().check_finite()?;
    }
    Ok(out)
}

/// Seeded trajectory: initial condition plus `n_steps` evolved states.
pub fn simulate(grid: &GridSpec, params: &DynamicsParams, n_steps: usize) -> Result<Vec<StateTensor>> {
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be positive"));
    }
    let init = initial_condition(grid, params);
    simulate_from(grid, params, &init, n_steps)
}

pub fn fit_norm_stats(trajectory: &[StateTensor]) -> Result<NormStats> {
    if trajectory.len() < 2 {
        return Err(Error::invalid("need at least two states to fit statistics"));
    }
    let c = trajectory[0].values.dim().0;
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    let mut diff_std = vec![0.0; c];
    let n_per = trajectory[0].values.len() / c;
    let n = (trajectory.len() * n_per) as f64;
    for ci in 0..c {
        let mut s = 0.0;
        for st in trajectory {
            s += st.values.index_axis(ndarray::Axis(0), ci).sum();
        }
        let m = s / n;
        let mut v = 0.0;
        for st in trajectory {
            v += st
                .values
                .index_axis(ndarray::Axis(0), ci)
                .mapv(|x| (x - m) * (x - m))
                .sum();
        }
        mean[ci] = m;
        std[ci] = (v / n).sqrt();
        let mut dv = 0.0;
        for k in 1..trajectory.len() {
            let d = &trajectory[k].values.index_axis(ndarray::Axis(0), ci)
                - &trajectory[k - 1].values.index_axis(ndarray::Axis(0), ci);
            dv += d.mapv(|x| x * x).sum();
        }
        diff_std[ci] = (dv / ((trajectory.len() - 1) * n_per) as f64).sqrt();
        if std[ci] <= 0.0 || diff_std[ci] <= 0.0 {
            return Err(Error::invalid(format!(
                "channel {ci} has zero variance; cannot normalize"
            )));
        }
    }
    Ok(NormStats { mean, std, diff_std })
}

pub fn normalize(state: &StateTensor, stats: &NormStats) -> StateTensor {
    let mut v = state.values.clone();
    for (ci, mut ch) in v.axis_iter_mut(ndarray::Axis(0)).enumerate() {
        ch.mapv_inplace(|x| (x - stats.mean[ci]) / stats.std[ci]);
    }
    StateTensor {
        values: v,
        time_index: state.time_index,
        channel_names: state.channel_names.clone(),
    }
}

pub fn denormalize(state: &StateTensor, stats: &NormStats) -> StateTensor {
    let mut v = state.values.clone();
    for (ci, mut ch) in v.axis_iter_mut(ndarray::Axis(0)).enumerate() {
        ch.mapv_inplace(|x| x * stats.std[ci] + stats.mean[ci]);
    }
    StateTensor {
        values: v,
        time_index: state.time_index,
        channel_names: state.channel_names.clone(),
    }
}

/// Static forcing fields are derived from the grid shape alone so every
/// window of a given grid sees identical channels.
pub fn static_forcings(n_lat: usize, n_lon: usize) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(0xC0FFEE, (n_lat as u64) << 32 | n_lon as u64));
    let mut orog = Array2::<f64>::zeros((n_lat, n_lon));
    for k in 1..=6usize {
        let amp = 1.0 / k as f64;
        let kx = rng.gen_range(1..=5) as f64;
        let ky = rng.gen_range(0..=3) as f64;
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        for i in 0..n_lat {
            let my = (std::f64::consts::PI * ky * (i as f64 + 0.5) / n_lat as f64).cos();
            for j in 0..n_lon {
                orog[[i, j]] +=
                    amp * (std::f64::consts::TAU * kx * j as f64 / n_lon as f64 + phi).sin() * my;
            }
        }
    }
    let mut sorted: Vec<f64> = orog.iter().cloned().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let mask = orog.mapv(|x| if x > median { 1.0 } else { 0.0 });
    (orog, mask)
}

pub fn clock_forcing(time_index: i64, clock_period: usize) -> (f64, f64) {
    let phase = std::f64::consts::TAU * time_index as f64 / clock_period as f64;
    (phase.sin(), phase.cos())
}

/// Build the forcing stack for a window whose last input state is at
/// `time_index`.
pub fn forcing_channels(n_lat: usize, n_lon: usize, time_index: i64, clock_period: usize) -> Array3<f64> {
    let (orog, mask) = static_forcings(n_lat, n_lon);
    let (s, c) = clock_forcing(time_index, clock_period);
    let mut f = Array3::<f64>::zeros((TrainingWindow::N_FORCINGS, n_lat, n_lon));
    f.index_axis_mut(ndarray::Axis(0), 0).assign(&orog);
    f.index_axis_mut(ndarray::Axis(0), 1).assign(&mask);
    f.index_axis_mut(ndarray::Axis(0), 2).fill(s);
    f.index_axis_mut(ndarray::Axis(0), 3).fill(c);
    f
}

/// One window per interior time step: inputs are normalized
/// `(x_{t-1}, x_t)`, target is the normalized residual `x_{t+1} - x_t`.
pub fn make_windows(
    trajectory: &[StateTensor],
    stats: &NormStats,
    clock_period: usize,
) -> Result<Vec<TrainingWindow>> {
    if trajectory.len() < 3 {
        return Err(Error::invalid("trajectory must contain at least 3 states"));
    }
    if clock_period == 0 {
        return Err(Error::invalid("clock_period must be positive"));
    }
    let (c, h, w) = trajectory[0].values.dim();
    let normed: Vec<StateTensor> = trajectory.iter().map(|s| normalize(s, stats)).collect();
    let mut windows = Vec::with_capacity(trajectory.len() - 2);
    for t in 1..(trajectory.len() - 1) {
        let mut inputs = Array3::<f64>::zeros((2 * c, h, w));
        inputs
            .slice_mut(ndarray::s![..c, .., ..])
            .assign(&normed[t - 1].values);
        inputs
            .slice_mut(ndarray::s![c.., .., ..])
            .assign(&normed[t].values);
        let target_residual = &normed[t + 1].values - &normed[t].values;
        windows.push(TrainingWindow {
            inputs,
            forcings: forcing_channels(h, w, normed[t].time_index, clock_period),
            target_residual,
            time_index: normed[t].time_index,
        });
    }
    Ok(windows)
}

/// 80/10/10 temporal split over window indices, no shuffling across the
/// boundary.
pub fn split_indices(n: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
    let train_end = n * 8 / 10;
    let val_end = n * 9 / 10;
    (0..train_end, train_end..val_end, val_end..n)
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryManifest {
    version: u32,
    grid: GridSpec,
    params: DynamicsParams,
    channel_names: Vec<String>,
    norm_stats: NormStats,
    n_states: usize,
    chunk_steps: usize,
}

/// Persist a trajectory as manifest JSON plus little-endian f32 chunk files.
pub fn save_trajectory(
    dir: &Path,
    grid: &GridSpec,
    params: &DynamicsParams,
    states: &[StateTensor],
    stats: &NormStats,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let manifest = TrajectoryManifest {
        version: TRAJECTORY_FORMAT_VERSION,
        grid: grid.clone(),
        params: params.clone(),
        channel_names: states[0].channel_names.clone(),
        norm_stats: stats.clone(),
        n_states: states.len(),
        chunk_steps: CHUNK_STEPS,
    };
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| Error::io(mpath.display().to_string(), e))?;
    for (ci, chunk) in states.chunks(CHUNK_STEPS).enumerate() {
        let path = dir.join(format!("chunk_{ci:05}.f32"));
        let mut file =
            fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut buf = Vec::with_capacity(chunk.len() * states[0].values.len() * 4);
        for st in chunk {
            for &v in st.values.iter() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        file.write_all(&buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

pub struct LoadedTrajectory {
    pub grid: GridSpec,
    pub params: DynamicsParams,
    pub states: Vec<StateTensor>,
    pub stats: NormStats,
}

pub fn load_trajectory(dir: &Path) -> Result<LoadedTrajectory> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath)
        .map_err(|_| Error::MissingArtifact(format!("{} (run `ucast simulate` first)", mpath.display())))?;
    let manifest: TrajectoryManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    if manifest.version != TRAJECTORY_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "trajectory format version {} unsupported (expect {TRAJECTORY_FORMAT_VERSION})",
            manifest.version
        )));
    }
    let (c, h, w) = (
        manifest.params.n_channels,
        manifest.grid.n_lat,
        manifest.grid.n_lon,
    );
    let per_state = c * h * w;
    let mut states = Vec::with_capacity(manifest.n_states);
    let n_chunks = manifest.n_states.div_ceil(manifest.chunk_steps);
    for ci in 0..n_chunks {
        let path = dir.join(format!("chunk_{ci:05}.f32"));
        let mut bytes = Vec::new();
        fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let n_here = bytes.len() / (per_state * 4);
        for k in 0..n_here {
            let mut values = Array3::<f64>::zeros((c, h, w));
            let base = k * per_state * 4;
            for (i, v) in values.iter_mut().enumerate() {
                let o = base + i * 4;
                *v = f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as f64;
            }
            states.push(StateTensor {
                values,
                time_index: (ci * manifest.chunk_steps + k) as i64,
                channel_names: manifest.channel_names.clone(),
            });
        }
    }
    if states.len() != manifest.n_states {
        return Err(Error::Format(format!(
            "expected {} states, found {}",
            manifest.n_states,
            states.len()
        )));
    }
    Ok(LoadedTrajectory {
        grid: manifest.grid,
        params: manifest.params,
        states,
        stats: manifest.norm_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_equiangular_grid;

    fn small_params(seed: u64) -> DynamicsParams {
        DynamicsParams {
            n_channels: 2,
            advection_speed: vec![1.0, 0.5],
            diffusion_coeff: vec![0.05, 0.1],
            forcing_amplitude: 0.01,
            coupling_strength: 0.02,
            seed,
        }
    }

    #[test]
    fn frozen_dynamics_constant() {
        let grid = make_equiangular_grid(8, 16).unwrap();
        let params = DynamicsParams {
            n_channels: 1,
            advection_speed: vec![0.0],
            diffusion_coeff: vec![0.0],
            forcing_amplitude: 0.0,
            coupling_strength: 0.0,
            seed: 3,
        };
        let traj = simulate(&grid, &params, 5).unwrap();
        for st in &traj[1..] {
            assert_eq!(st.values, traj[0].values);
        }
    }

    #[test]
    fn unit_advection_is_circular_shift() {
        let grid = make_equiangular_grid(6, 12).unwrap();
        let params = DynamicsParams {
            n_channels: 1,
            advection_speed: vec![1.0],
            diffusion_coeff: vec![0.0],
            forcing_amplitude: 0.0,
            coupling_strength: 0.0,
            seed: 7,
        };
        let traj = simulate(&grid, &params, 4).unwrap();
        for (k, st) in traj.iter().enumerate() {
            for i in 0..6 {
                for j in 0..12 {
                    let expect = traj[0].values[[0, i, (j + 12 - k % 12) % 12]];
                    assert!((st.values[[0, i, j]] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn diffusion_conserves_weighted_mean() {
        let grid = make_equiangular_grid(9, 16).unwrap();
        let params = DynamicsParams {
            n_channels: 1,
            advection_speed: vec![0.3],
            diffusion_coeff: vec![0.2],
            forcing_amplitude: 0.0,
            coupling_strength: 0.0,
            seed: 11,
        };
        let aw = area_weights(&grid).unwrap();
        let traj = simulate(&grid, &params, 20).unwrap();
        let wmean = |st: &StateTensor| -> f64 {
            let mut s = 0.0;
            for i in 0..9 {
                for j in 0..16 {
                    s += aw.normalized[i] * st.values[[0, i, j]];
                }
            }
            s / (9.0 * 16.0)
        };
        let m0 = wmean(&traj[0]);
        for (k, st) in traj.iter().enumerate().skip(1) {
            assert!((wmean(st) - m0).abs() < 1e-10 * k as f64, "step {k}");
        }
    }

    #[test]
    fn stability_violation_rejected() {
        let grid = make_equiangular_grid(4, 8).unwrap();
        let mut p = small_params(1);
        p.diffusion_coeff[0] = 0.3;
        assert!(simulate(&grid, &p, 2).is_err());
    }

    #[test]
    fn bit_reproducible() {
        let grid = make_equiangular_grid(8, 16).unwrap();
        let p = small_params(99);
        let a = simulate(&grid, &p, 10).unwrap();
        let b = simulate(&grid, &p, 10).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.values, y.values);
        }
    }

    #[test]
    fn longitude_shift_equivariance() {
        let grid = make_equiangular_grid(6, 12).unwrap();
        let p = small_params(5);
        let init = initial_condition(&grid, &p);
        let shift = 4usize;
        let shifted: Vec<Array2<f64>> = init
            .iter()
            .map(|f| {
                let mut s = Array2::zeros(f.dim());
                for i in 0..6 {
                    for j in 0..12 {
                        s[[i, (j + shift) % 12]] = f[[i, j]];
                    }
                }
                s
            })
            .collect();
        let a = simulate_from(&grid, &p, &init, 8).unwrap();
        let b = simulate_from(&grid, &p, &shifted, 8).unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            for c in 0..2 {
                for i in 0..6 {
                    for j in 0..12 {
                        let d = (sb.values[[c, i, (j + shift) % 12]] - sa.values[[c, i, j]]).abs();
                        assert!(d < 1e-12, "t={} c={c} i={i} j={j}", sa.time_index);
                    }
                }
            }
        }
    }

    #[test]
    fn norm_stats_round_trip_and_standardization() {
        let grid = make_equiangular_grid(6, 12).unwrap();
        let traj = simulate(&grid, &small_params(13), 50).unwrap();
        let stats = fit_norm_stats(&traj).unwrap();
        for (ci, (&m, &s)) in stats.mean.iter().zip(&stats.std).enumerate() {
            let normed: Vec<f64> = traj
                .iter()
                .flat_map(|st| st.values.index_axis(ndarray::Axis(0), ci).iter().cloned().collect::<Vec<_>>())
                .map(|x| (x - m) / s)
                .collect();
            let n = normed.len() as f64;
            let mean = normed.iter().sum::<f64>() / n;
            let var = normed.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6);
            assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
        let rt = denormalize(&normalize(&traj[3], &stats), &stats);
        for (a, b) in rt.values.iter().zip(traj[3].values.iter()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn constant_channel_rejected() {
        let names = default_channel_names(1);
        let traj: Vec<StateTensor> = (0..4)
            .map(|t| StateTensor {
                values: Array3::ones((1, 4, 8)),
                time_index: t,
                channel_names: names.clone(),
            })
            .collect();
        assert!(fit_norm_stats(&traj).is_err());
    }

    #[test]
    fn window_counting_and_residuals() {
        let grid = make_equiangular_grid(6, 12).unwrap();
        let traj = simulate(&grid, &small_params(17), 2).unwrap();
        assert_eq!(traj.len(), 3);
        let stats = fit_norm_stats(&traj).unwrap();
        let windows = make_windows(&traj, &stats, 24).unwrap();
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0].stacked_input().dim().0, 2 * 2 + 4);
        assert!(make_windows(&traj[..2], &stats, 24).is_err());
    }

    #[test]
    fn constant_trajectory_zero_residual() {
        // Frozen dynamics: residual target must be identically zero.
        let grid = make_equiangular_grid(6, 12).unwrap();
        let mut p = small_params(19);
        p.advection_speed = vec![0.0, 0.0];
        p.diffusion_coeff = vec![0.0, 0.0];
        p.forcing_amplitude = 0.0;
        p.coupling_strength = 0.0;
        let traj = simulate(&grid, &p, 4).unwrap();
        let stats = NormStats {
            mean: vec![0.0, 0.0],
            std: vec![1.0, 1.0],
            diff_std: vec![1.0, 1.0],
        };
        let windows = make_windows(&traj, &stats, 24).unwrap();
        for w in windows {
            assert!(w.target_residual.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn clock_forcings_periodic() {
        let grid = make_equiangular_grid(6, 12).unwrap();
        let traj = simulate(&grid, &small_params(23), 30).unwrap();
        let stats = fit_norm_stats(&traj).unwrap();
        let windows = make_windows(&traj, &stats, 12).unwrap();
        let a = &windows[0];
        let b = &windows[12];
        assert_eq!(b.time_index - a.time_index, 12);
        for (x, y) in a.forcings.iter().zip(b.forcings.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn trajectory_round_trip() {
        let grid = make_equiangular_grid(6, 12).unwrap();
        let p = small_params(29);
        let traj = simulate(&grid, &p, 10).unwrap();
        let stats = fit_norm_stats(&traj).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_trajectory(dir.path(), &grid, &p, &traj, &stats).unwrap();
        let loaded = load_trajectory(dir.path()).unwrap();
        assert_eq!(loaded.states.len(), traj.len());
        assert_eq!(loaded.grid, grid);
        // f32 persistence: compare at single precision.
        for (a, b) in loaded.states.iter().zip(&traj) {
            for (x, y) in a.values.iter().zip(b.values.iter()) {
                assert!((x - y).abs() <= (*y as f32).abs() as f64 * 1e-6 + 1e-7);
            }
        }
    }

    #[test]
    fn split_is_temporal() {
        let (tr, va, te) = split_indices(100);
        assert_eq!(tr, 0..80);
        assert_eq!(va, 80..90);
        assert_eq!(te, 90..100);
    }
}
