//! Parameter storage and small layer helpers on top of the tape.
//!
//! Parameters live in a [`ParamStore`] between steps; each forward pass loads
//! them onto a fresh [`Tape`] as leaves. Layer structs hold `ParamId`s only,
//! so a model is cheap to describe and checkpoints are just the store.

use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named parameter arrays in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: ArrayD<f64>) {
        assert_eq!(self.values[id.0].shape(), value.shape());
        self.values[id.0] = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn values(&self) -> &[ArrayD<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ArrayD<f64>] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }
}

/// One forward pass: a tape plus the store parameters loaded as leaves.
pub struct Forward {
    pub tape: Tape,
    param_vars: Vec<Var>,
}

impl Forward {
    pub fn new(store: &ParamStore) -> Self {
        let mut tape = Tape::new();
        let param_vars = store.values().iter().map(|v| tape.leaf(v.clone())).collect();
        Forward { tape, param_vars }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.param_vars[id.0]
    }

    /// Gradients aligned with store order after a backward pass from `root`.
    pub fn param_grads(&self, root: Var) -> Vec<Option<ArrayD<f64>>> {
        let grads = self.tape.backward(root);
        self.param_vars.iter().map(|v| grads[v.0].clone()).collect()
    }
}

/// SplitMix64 step, used to derive independent seed streams.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard normal via Box-Muller.
pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| normal(rng) * std)
}

/// Inverted-scaling dropout mask: entries are `0` or `1/(1-rate)`.
pub fn dropout_mask(shape: &[usize], rate: f64, seed: u64) -> ArrayD<f64> {
    assert!((0.0..1.0).contains(&rate));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 - rate;
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
}

impl Conv2d {
    /// 2-d convolution with lat-zero / lon-circular padding preserving H x W.
    pub fn build(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        zero_init: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let std = if zero_init {
            0.0
        } else {
            (1.0 / (c_in * kernel * kernel) as f64).sqrt()
        };
        let w = store.register(
            format!("{name}.weight"),
            randn(&[c_out, c_in, kernel, kernel], std, rng),
        );
        let b = store.register(format!("{name}.bias"), Array1::zeros(c_out).into_dyn());
        Conv2d { w, b, kernel }
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Var {
        let pad = self.kernel / 2;
        let xin = if pad > 0 {
            fw.tape.pad_lat_lon(x, pad, pad)
        } else {
            x
        };
        let w = fw.param(self.w);
        let b = fw.param(self.b);
        let y = fw.tape.conv2d(xin, w);
        fw.tape.add_bias4(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Weight stored as `[d_in, d_out]`: forward is `x . w + b`.
    pub fn build(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        zero_init: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let std = if zero_init { 0.0 } else { (1.0 / d_in as f64).sqrt() };
        let w = store.register(format!("{name}.weight"), randn(&[d_in, d_out], std, rng));
        let b = store.register(format!("{name}.bias"), Array1::zeros(d_out).into_dyn());
        Linear { w, b }
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Var {
        let w = fw.param(self.w);
        let b = fw.param(self.b);
        let y = fw.tape.matmul(x, w);
        fw.tape.add_bias2(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    /// 32 groups, reduced when the channel count is smaller or not divisible.
    pub fn build(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let groups = preferred_groups(channels);
        let gamma = store.register(format!("{name}.gamma"), Array1::ones(channels).into_dyn());
        let beta = store.register(format!("{name}.beta"), Array1::zeros(channels).into_dyn());
        GroupNorm { gamma, beta, groups }
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Var {
        let g = fw.param(self.gamma);
        let b = fw.param(self.beta);
        fw.tape.group_norm(x, g, b, self.groups, 1e-5)
    }
}

pub fn preferred_groups(channels: usize) -> usize {
    let mut g = 32.min(channels);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array4};

    #[test]
    fn dropout_mask_seeded_and_scaled() {
        let a = dropout_mask(&[4, 8], 0.25, 42);
        let b = dropout_mask(&[4, 8], 0.25, 42);
        assert_eq!(a, b);
        let c = dropout_mask(&[4, 8], 0.25, 43);
        assert_ne!(a, c);
        for &v in a.iter() {
            assert!(v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn preferred_groups_divides() {
        for c in [1, 3, 16, 32, 48, 96, 100, 320] {
            let g = preferred_groups(c);
            assert_eq!(c % g, 0);
            assert!(g <= 32);
        }
    }

    #[test]
    fn mix_seed_streams_differ() {
        assert_ne!(mix_seed(1, 2), mix_seed(1, 3));
        assert_ne!(mix_seed(1, 2), mix_seed(2, 2));
        assert_eq!(mix_seed(5, 9), mix_seed(5, 9));
    }

    #[test]
    fn linear_matches_manual() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::build(&mut store, "l", 3, 2, false, &mut rng);
        let mut fw = Forward::new(&store);
        let x = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let xv = fw.tape.leaf(x.clone().into_dyn());
        let y = lin.forward(&mut fw, xv);
        let w = store.get(lin.w).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let expect = x.dot(&w);
        let got = fw.tape.value(y);
        for j in 0..2 {
            assert!((got[IxDyn(&[0, j])] - expect[[0, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_zero_init_outputs_bias_only() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::build(&mut store, "c", 2, 3, 3, true, &mut rng);
        let mut fw = Forward::new(&store);
        let x = fw.tape.leaf(randn(&[1, 2, 4, 6], 1.0, &mut rng));
        let y = conv.forward(&mut fw, x);
        assert!(fw.tape.value(y).iter().all(|&v| v == 0.0));
        let _ = Array4::<f64>::zeros((1, 1, 1, 1));
    }
}
