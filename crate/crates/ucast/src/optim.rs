//! Hybrid optimizer: Muon (momentum + Newton-Schulz orthogonalization) for
//! matrix-shaped parameters, AdamW for 1-D parameters, a warmup+cosine
//! learning-rate schedule, and EMA weight tracking.

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const ADAMW_BETA1: f64 = 0.9;
pub const ADAMW_BETA2: f64 = 0.95;
pub const ADAMW_EPS: f64 = 1e-8;

/// Quintic iteration coefficients from the Muon reference implementation.
pub const NS_COEFFS: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);

/// Contractive cubic steps appended after the quintic iterations.
pub const NS_POLISH_ITERATIONS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub muon_peak_lr: f64,
    pub adamw_peak_lr: f64,
    pub muon_weight_decay: f64,
    pub adamw_weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub momentum: f64,
    pub ns_iterations: usize,
    pub ema_decay: f64,
    /// Route every parameter through AdamW instead of splitting matrices
    /// off to Muon (optimizer-swap ablation).
    #[serde(default)]
    pub adamw_only: bool,
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        // total_steps == 0 means "resolve from the stage length" upstream
        if self.total_steps != 0 && self.warmup_steps > self.total_steps {
            return Err(Error::invalid("warmup_steps must not exceed total_steps"));
        }
        if self.muon_peak_lr <= 0.0 || self.adamw_peak_lr <= 0.0 {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::invalid("ema_decay must lie in [0, 1]"));
        }
        if self.ns_iterations == 0 {
            return Err(Error::invalid("ns_iterations must be at least 1"));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak` over `warmup_steps`, then cosine decay to
/// 0 at `total_steps` (squared-cosine form, so the cosine midpoint sits at
/// `peak / 2`).
pub fn lr_at(step_index: usize, warmup_steps: usize, total_steps: usize, peak: f64) -> f64 {
    if step_index < warmup_steps {
        return peak * step_index as f64 / warmup_steps as f64;
    }
    if total_steps == warmup_steps {
        return peak;
    }
    let frac = (step_index - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    let frac = frac.min(1.0);
    let c = (std::f64::consts::FRAC_PI_2 * frac).cos();
    peak * c * c
}

/// Approximate polar factor UV^T via the quintic Newton-Schulz iteration.
/// Returns the orthogonalized matrix and a flag marking an all-zero input
/// (for which the output is the zero matrix).
pub fn newton_schulz_orthogonalize(matrix: &Array2<f64>, iterations: usize) -> (Array2<f64>, bool) {
    let fro = matrix.iter().map(|v| v * v).sum::<f64>().sqrt();
    if fro == 0.0 {
        return (matrix.clone(), true);
    }
    let (a, b, c) = NS_COEFFS;
    let transposed = matrix.nrows() > matrix.ncols();
    let mut x = if transposed {
        matrix.t().to_owned() / fro
    } else {
        matrix.to_owned() / fro
    };
    for _ in 0..iterations {
        let xxt = x.dot(&x.t());
        let bpart = &xxt * b + xxt.dot(&xxt) * c;
        x = &x * a + bpart.dot(&x);
    }
    // The quintic alone leaves singular values oscillating in roughly
    // [0.68, 1.13]; a few contractive cubic steps pull them to ~1 so the
    // output is stable under re-application.
    for _ in 0..NS_POLISH_ITERATIONS {
        let xxt = x.dot(&x.t());
        x = &x * 1.5 - xxt.dot(&x) * 0.5;
    }
    if transposed {
        (x.t().to_owned(), false)
    } else {
        (x, false)
    }
}

/// ema <- decay * ema + (1 - decay) * current
pub fn ema_update(ema: &mut [ArrayD<f64>], current: &[ArrayD<f64>], decay: f64) {
    for (e, c) in ema.iter_mut().zip(current) {
        e.zip_mut_with(c, |ev, cv| *ev = decay * *ev + (1.0 - decay) * cv);
    }
}

#[derive(Debug, Clone)]
enum Slot {
    Muon { momentum: ArrayD<f64> },
    Adam { m: ArrayD<f64>, v: ArrayD<f64> },
}

/// Hybrid Muon/AdamW optimizer over a parameter store. Parameters with two
/// or more dimensions take Muon steps on an `(out_channels, rest)` reshape;
/// 1-D parameters take AdamW steps.
#[derive(Debug)]
pub struct Optimizer {
    pub config: OptimConfig,
    slots: Vec<Slot>,
    /// Number of completed steps, used for AdamW bias correction.
    pub steps_taken: u64,
}

impl Optimizer {
    pub fn new(config: OptimConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let slots = store
            .values()
            .iter()
            .map(|p| {
                if p.ndim() >= 2 && !config.adamw_only {
                    Slot::Muon {
                        momentum: ArrayD::zeros(p.raw_dim()),
                    }
                } else {
                    Slot::Adam {
                        m: ArrayD::zeros(p.raw_dim()),
                        v: ArrayD::zeros(p.raw_dim()),
                    }
                }
            })
            .collect();
        Ok(Optimizer {
            config,
            slots,
            steps_taken: 0,
        })
    }

    /// Apply one update. `grads` is indexed like the store; `None` entries
    /// are treated as zero gradient (the parameter still decays under AdamW
    /// bias correction semantics is not advanced for it).
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<ArrayD<f64>>],
        step_index: usize,
    ) -> Result<()> {
        let muon_lr = lr_at(
            step_index,
            self.config.warmup_steps,
            self.config.total_steps,
            self.config.muon_peak_lr,
        );
        let adamw_lr = lr_at(
            step_index,
            self.config.warmup_steps,
            self.config.total_steps,
            self.config.adamw_peak_lr,
        );
        let t = (self.steps_taken + 1) as f64;
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        let params = store.values_mut();
        for (i, slot) in self.slots.iter_mut().enumerate() {
            let Some(g) = grads.get(i).and_then(|g| g.as_ref()) else {
                continue;
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {}",
                    names[i]
                )));
            }
            let p = &mut params[i];
            match slot {
                Slot::Muon { momentum } => {
                    momentum.zip_mut_with(g, |b, gv| *b = self.config.momentum * *b + gv);
                    // Nesterov lookahead
                    let mut update = g.clone();
                    update.zip_mut_with(momentum, |u, b| *u += self.config.momentum * b);
                    let rows = update.shape()[0];
                    let cols: usize = update.shape()[1..].iter().product();
                    let mat = update
                        .into_shape_with_order(IxDyn(&[rows, cols]))
                        .expect("muon reshape")
                        .into_dimensionality::<ndarray::Ix2>()
                        .expect("2-d");
                    let (ortho, _) = newton_schulz_orthogonalize(&mat, self.config.ns_iterations);
                    let shape_factor = (rows as f64 / cols as f64).sqrt().max(1.0);
                    let scale = muon_lr * shape_factor;
                    let ortho = ortho
                        .into_dyn()
                        .into_shape_with_order(p.raw_dim())
                        .expect("muon unshape");
                    let decay = 1.0 - muon_lr * self.config.muon_weight_decay;
                    p.zip_mut_with(&ortho, |pv, ov| *pv = decay * *pv - scale * ov);
                }
                Slot::Adam { m, v } => {
                    m.zip_mut_with(g, |mv, gv| {
                        *mv = ADAMW_BETA1 * *mv + (1.0 - ADAMW_BETA1) * gv
                    });
                    v.zip_mut_with(g, |vv, gv| {
                        *vv = ADAMW_BETA2 * *vv + (1.0 - ADAMW_BETA2) * gv * gv
                    });
                    let bc1 = 1.0 - ADAMW_BETA1.powf(t);
                    let bc2 = 1.0 - ADAMW_BETA2.powf(t);
                    let decay = 1.0 - adamw_lr * self.config.adamw_weight_decay;
                    for ((pv, mv), vv) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                        let mhat = mv / bc1;
                        let vhat = vv / bc2;
                        *pv = decay * *pv - adamw_lr * mhat / (vhat.sqrt() + ADAMW_EPS);
                    }
                }
            }
        }
        self.steps_taken += 1;
        Ok(())
    }

    /// Flatten optimizer state to named arrays for checkpointing.
    pub fn named_state(&self, store: &ParamStore) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        for (i, (name, _)) in store.iter().enumerate() {
            match &self.slots[i] {
                Slot::Muon { momentum } => {
                    out.push((format!("opt.momentum.{name}"), momentum.clone()));
                }
                Slot::Adam { m, v } => {
                    out.push((format!("opt.adam_m.{name}"), m.clone()));
                    out.push((format!("opt.adam_v.{name}"), v.clone()));
                }
            }
        }
        out
    }

    /// Restore state previously produced by [`named_state`].
    pub fn load_state(
        &mut self,
        store: &ParamStore,
        arrays: &std::collections::HashMap<String, ArrayD<f64>>,
        steps_taken: u64,
    ) -> Result<()> {
        for (i, (name, _)) in store.iter().enumerate() {
            match &mut self.slots[i] {
                Slot::Muon { momentum } => {
                    let key = format!("opt.momentum.{name}");
                    let a = arrays
                        .get(&key)
                        .ok_or_else(|| Error::MissingArtifact(key.clone()))?;
                    *momentum = a.clone();
                }
                Slot::Adam { m, v } => {
                    for (key, dst) in [
                        (format!("opt.adam_m.{name}"), &mut *m),
                        (format!("opt.adam_v.{name}"), &mut *v),
                    ] {
                        let a = arrays
                            .get(&key)
                            .ok_or_else(|| Error::MissingArtifact(key.clone()))?;
                        *dst = a.clone();
                    }
                }
            }
        }
        self.steps_taken = steps_taken;
        Ok(())
    }
}
