//! Training objectives: pointwise L1, area-weighted deterministic MAE, and
//! the fair (unbiased) CRPS ensemble loss with per-channel weights.
//!
//! All spatial averages use normalized latitude area weights (unit mean), so
//! a uniform unit error always scores exactly 1 regardless of the grid.

use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::grid::AreaWeights;
use crate::nn::Forward;
use crate::tape::Var;
use crate::toyatmos::StateTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWeights {
    pub weights: Vec<f64>,
}

impl ChannelWeights {
    pub fn uniform(n_channels: usize) -> Self {
        ChannelWeights {
            weights: vec![1.0; n_channels],
        }
    }

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("channel weights must be finite and nonnegative"));
        }
        if !weights.iter().any(|w| *w > 0.0) {
            return Err(Error::invalid("at least one channel weight must be positive"));
        }
        Ok(ChannelWeights { weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Weight-normalized mean over channels.
    pub fn mean(&self, per_channel: &[f64]) -> f64 {
        let total: f64 = self.weights.iter().sum();
        per_channel
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| v * w / total)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_channel: Vec<f64>,
    pub skill_term: f64,
    pub spread_term: f64,
}

/// Pointwise L1 distance summed over channels, one value per grid point.
pub fn pointwise_l1(u: &StateTensor, v: &StateTensor) -> Result<Array2<f64>> {
    if u.values.dim() != v.values.dim() {
        return Err(Error::ShapeMismatch(format!(
            "pointwise_l1: {:?} vs {:?}",
            u.values.dim(),
            v.values.dim()
        )));
    }
    let (_, h, w) = u.values.dim();
    let mut out = Array2::zeros((h, w));
    for ((c, i, j), a) in u.values.indexed_iter() {
        out[[i, j]] += (a - v.values[[c, i, j]]).abs();
    }
    Ok(out)
}

fn area_weighted_l1(a: &Array3<f64>, b: &Array3<f64>, aw: &AreaWeights) -> Vec<f64> {
    let (c, h, w) = a.dim();
    let mut per_channel = vec![0.0; c];
    for ((ch, i, j), x) in a.indexed_iter() {
        per_channel[ch] += aw.normalized[i] * (x - b[[ch, i, j]]).abs();
    }
    let norm = (h * w) as f64;
    for v in &mut per_channel {
        *v /= norm;
    }
    per_channel
}

fn check_shapes(pred: &Array3<f64>, target: &Array3<f64>, aw: &AreaWeights, cw: &ChannelWeights) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.dim().1 != aw.normalized.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} latitude rows vs {} area weights",
            pred.dim().1,
            aw.normalized.len()
        )));
    }
    if pred.dim().0 != cw.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} channels vs {} channel weights",
            pred.dim().0,
            cw.len()
        )));
    }
    Ok(())
}

/// Area-weighted deterministic MAE.
pub fn weighted_mae(
    prediction: &Array3<f64>,
    target: &Array3<f64>,
    weights: &AreaWeights,
    cw: &ChannelWeights,
) -> Result<LossBreakdown> {
    check_shapes(prediction, target, weights, cw)?;
    let per_channel = area_weighted_l1(prediction, target, weights);
    let total = cw.mean(&per_channel);
    Ok(LossBreakdown {
        total,
        skill_term: total,
        spread_term: 0.0,
        per_channel,
    })
}

/// Fair CRPS of an `[M, C, H, W]` ensemble against a `[C, H, W]` target.
///
/// Skill is the ensemble-mean L1 error; Spread is the mean pairwise L1
/// distance between distinct members with the unbiased `M(M-1)` divisor.
/// The per-channel loss is `Skill - Spread / 2`, aggregated by the channel
/// weights.
pub fn fair_crps(
    members: &Array4<f64>,
    target: &Array3<f64>,
    weights: &AreaWeights,
    cw: &ChannelWeights,
) -> Result<LossBreakdown> {
    let (m, c, _, _) = members.dim();
    if m < 2 {
        return Err(Error::invalid(
            "fair CRPS needs at least 2 members (the spread divisor M-1 vanishes)",
        ));
    }
    let first = members.index_axis(ndarray::Axis(0), 0).to_owned();
    check_shapes(&first, target, weights, cw)?;

    let mut skill = vec![0.0; c];
    let mut spread = vec![0.0; c];
    let views: Vec<Array3<f64>> = (0..m)
        .map(|i| members.index_axis(ndarray::Axis(0), i).to_owned())
        .collect();
    for mem in &views {
        let s = area_weighted_l1(mem, target, weights);
        for (acc, v) in skill.iter_mut().zip(s) {
            *acc += v / m as f64;
        }
    }
    for a in 0..m {
        for b in (a + 1)..m {
            let d = area_weighted_l1(&views[a], &views[b], weights);
            for (acc, v) in spread.iter_mut().zip(d) {
                // each unordered pair counts twice in the n != m double sum
                *acc += 2.0 * v / (m * (m - 1)) as f64;
            }
        }
    }
    let per_channel: Vec<f64> = skill
        .iter()
        .zip(&spread)
        .map(|(s, p)| s - 0.5 * p)
        .collect();
    Ok(LossBreakdown {
        total: cw.mean(&per_channel),
        skill_term: cw.mean(&skill),
        spread_term: cw.mean(&spread),
        per_channel,
    })
}

/// Combined per-element weight tensor for a `[B, C, H, W]` batch: channel
/// weight x normalized area weight x 1/(B*H*W).
fn weight_tensor(shape: &[usize], aw: &AreaWeights, cw: &ChannelWeights) -> ArrayD<f64> {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert_eq!(c, cw.len());
    assert_eq!(h, aw.normalized.len());
    let wsum: f64 = cw.weights.iter().sum();
    let norm = (b * h * w) as f64;
    ArrayD::from_shape_fn(IxDyn(shape), |ix| {
        cw.weights[ix[1]] / wsum * aw.normalized[ix[2]] / norm
    })
}

fn weighted_l1_on(fw: &mut Forward, a: Var, b: Var, w: &ArrayD<f64>) -> Var {
    let d = fw.tape.sub(a, b);
    let ad = fw.tape.abs(d);
    let wd = fw.tape.mul_const(ad, w.clone());
    fw.tape.sum_all(wd)
}

/// Differentiable batch MAE between `[B, C, H, W]` prediction and target
/// variables, averaged over the batch.
pub fn weighted_mae_loss(
    fw: &mut Forward,
    prediction: Var,
    target: Var,
    aw: &AreaWeights,
    cw: &ChannelWeights,
) -> Var {
    let shape = fw.tape.value(prediction).shape().to_vec();
    let w = weight_tensor(&shape, aw, cw);
    weighted_l1_on(fw, prediction, target, &w)
}

/// Differentiable fair CRPS over member prediction variables, each
/// `[B, C, H, W]`, against one target variable.
pub fn fair_crps_loss(
    fw: &mut Forward,
    members: &[Var],
    target: Var,
    aw: &AreaWeights,
    cw: &ChannelWeights,
) -> Result<Var> {
    let m = members.len();
    if m < 2 {
        return Err(Error::invalid(
            "fair CRPS needs at least 2 members (the spread divisor M-1 vanishes)",
        ));
    }
    let shape = fw.tape.value(members[0]).shape().to_vec();
    let w = weight_tensor(&shape, aw, cw);
    let mut skill: Option<Var> = None;
    for &mem in members {
        let s = weighted_l1_on(fw, mem, target, &w);
        skill = Some(match skill {
            Some(acc) => fw.tape.add(acc, s),
            None => s,
        });
    }
    let skill = fw.tape.scale(skill.unwrap(), 1.0 / m as f64);
    let mut spread: Option<Var> = None;
    for a in 0..m {
        for b in (a + 1)..m {
            let d = weighted_l1_on(fw, members[a], members[b], &w);
            spread = Some(match spread {
                Some(acc) => fw.tape.add(acc, d),
                None => d,
            });
        }
    }
    let spread = fw
        .tape
        .scale(spread.unwrap(), 2.0 / (m * (m - 1)) as f64);
    let half = fw.tape.scale(spread, -0.5);
    Ok(fw.tape.add(skill, half))
}
