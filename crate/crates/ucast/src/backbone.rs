//! The forecaster network: a diffusion-style convolutional encoder-decoder
//! with bottleneck self-attention, adapted for the periodic lat-lon grid.
//!
//! Adaptations relative to the stock diffusion U-Net: convolutions pad
//! circularly along longitude and with zeros along latitude; the decoder
//! bilinearly resizes to the exact skip shape so non-power-of-2 grids work;
//! and there is no timestep conditioning. Stochasticity comes from seeded
//! Monte Carlo dropout inside every residual block, or (as an ablation
//! variant) from a noise vector injected through zero-initialized
//! scale/shift projections on the second normalization of each block.

use std::fmt;

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::nn::{
    dropout_mask, mix_seed, normal, preferred_groups, Forward, ParamId, ParamStore,
};
use crate::tape::Var;

pub const ATTENTION_HEAD_WIDTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StochasticMode {
    Dropout,
    AdalnNoise,
    Deterministic,
}

impl fmt::Display for StochasticMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StochasticMode::Dropout => write!(f, "dropout"),
            StochasticMode::AdalnNoise => write!(f, "adaln_noise"),
            StochasticMode::Deterministic => write!(f, "deterministic"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `2C + F` network input channels.
    pub in_channels: usize,
    /// `C` predicted residual channels.
    pub out_channels: usize,
    pub base_width: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_resolution: usize,
    /// Resolution indices with self-attention, coarsest-first (0 = coarsest).
    pub attention_levels: Vec<usize>,
    pub dropout_rate: f64,
    pub stochastic_mode: StochasticMode,
    /// Dimension of the injected noise vector (adaln_noise mode only).
    pub noise_dim: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.channel_multipliers.is_empty() {
            return Err(Error::invalid("need at least one channel multiplier"));
        }
        if self.blocks_per_resolution == 0 {
            return Err(Error::invalid("blocks_per_resolution must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout_rate must lie in [0, 1)"));
        }
        let n_levels = self.channel_multipliers.len();
        for &a in &self.attention_levels {
            if a >= n_levels {
                return Err(Error::invalid(format!(
                    "attention level {a} out of range for {n_levels} resolutions"
                )));
            }
        }
        if self.stochastic_mode == StochasticMode::AdalnNoise && self.noise_dim == 0 {
            return Err(Error::invalid("noise_dim must be positive in adaln_noise mode"));
        }
        Ok(())
    }

    pub fn n_levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    /// Total spatial downsampling factor between the input and the coarsest
    /// resolution.
    pub fn total_stride(&self) -> usize {
        1 << (self.n_levels() - 1)
    }

    fn has_attention(&self, level: usize) -> bool {
        // attention_levels is coarsest-first; `level` counts finest-first.
        let coarsest_first = self.n_levels() - 1 - level;
        self.attention_levels.contains(&coarsest_first)
    }

    fn noise_embed_dim(&self) -> usize {
        4 * self.base_width
    }
}

/// Identity of one stochastic ensemble member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StochasticTag {
    pub member_seed: u64,
    pub enabled: bool,
}

impl StochasticTag {
    pub fn deterministic() -> Self {
        StochasticTag {
            member_seed: 0,
            enabled: false,
        }
    }

    pub fn member(seed: u64) -> Self {
        StochasticTag {
            member_seed: seed,
            enabled: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal { std: f64 },
    Zero,
    One,
}

trait Registrar {
    fn register(&mut self, name: String, shape: &[usize], init: Init) -> ParamId;
}

/// Counts parameter scalars without allocating them.
#[derive(Default)]
struct CountRegistrar {
    total: usize,
    next: usize,
}

impl Registrar for CountRegistrar {
    fn register(&mut self, _name: String, shape: &[usize], _init: Init) -> ParamId {
        self.total += shape.iter().product::<usize>();
        self.next += 1;
        ParamId(self.next - 1)
    }
}

struct StoreRegistrar {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Registrar for StoreRegistrar {
    fn register(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        let value = match init {
            Init::Zero => ArrayD::zeros(IxDyn(shape)),
            Init::One => ArrayD::from_elem(IxDyn(shape), 1.0),
            Init::Normal { std } => {
                ArrayD::from_shape_fn(IxDyn(shape), |_| normal(&mut self.rng) * std)
            }
        };
        self.store.register(name, value)
    }
}

#[derive(Debug, Clone)]
struct ConvP {
    w: ParamId,
    b: ParamId,
    kernel: usize,
}

#[derive(Debug, Clone)]
struct NormP {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

#[derive(Debug, Clone)]
struct LinearP {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct AttnP {
    norm: NormP,
    qkv: ConvP,
    proj: ConvP,
    heads: usize,
}

#[derive(Debug, Clone)]
struct ResBlockP {
    norm1: NormP,
    conv1: ConvP,
    norm2: NormP,
    conv2: ConvP,
    skip: Option<ConvP>,
    attn: Option<AttnP>,
    /// Noise-conditioning projection producing per-channel scale/shift.
    emb_proj: Option<LinearP>,
    c_out: usize,
    dropout_id: u64,
}

#[derive(Debug, Clone)]
struct Arch {
    conv_in: ConvP,
    encoder: Vec<Vec<ResBlockP>>,
    middle: Vec<ResBlockP>,
    decoder: Vec<Vec<ResBlockP>>,
    out_norm: NormP,
    out_conv: ConvP,
    noise_mlp: Option<(LinearP, LinearP)>,
}

fn reg_conv<R: Registrar>(
    reg: &mut R,
    name: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    zero: bool,
) -> ConvP {
    let init = if zero {
        Init::Zero
    } else {
        Init::Normal {
            std: (1.0 / (c_in * kernel * kernel) as f64).sqrt(),
        }
    };
    ConvP {
        w: reg.register(format!("{name}.weight"), &[c_out, c_in, kernel, kernel], init),
        b: reg.register(format!("{name}.bias"), &[c_out], Init::Zero),
        kernel,
    }
}

fn reg_norm<R: Registrar>(reg: &mut R, name: &str, channels: usize) -> NormP {
    NormP {
        gamma: reg.register(format!("{name}.gamma"), &[channels], Init::One),
        beta: reg.register(format!("{name}.beta"), &[channels], Init::Zero),
        groups: preferred_groups(channels),
    }
}

fn reg_linear<R: Registrar>(reg: &mut R, name: &str, d_in: usize, d_out: usize, zero: bool) -> LinearP {
    let init = if zero {
        Init::Zero
    } else {
        Init::Normal {
            std: (1.0 / d_in as f64).sqrt(),
        }
    };
    LinearP {
        w: reg.register(format!("{name}.weight"), &[d_in, d_out], init),
        b: reg.register(format!("{name}.bias"), &[d_out], Init::Zero),
    }
}

fn reg_res_block<R: Registrar>(
    reg: &mut R,
    config: &ModelConfig,
    name: &str,
    c_in: usize,
    c_out: usize,
    attention: bool,
    dropout_id: &mut u64,
) -> ResBlockP {
    let norm1 = reg_norm(reg, &format!("{name}.norm1"), c_in);
    let conv1 = reg_conv(reg, &format!("{name}.conv1"), c_in, c_out, 3, false);
    let norm2 = reg_norm(reg, &format!("{name}.norm2"), c_out);
    let conv2 = reg_conv(reg, &format!("{name}.conv2"), c_out, c_out, 3, true);
    let skip = (c_in != c_out).then(|| reg_conv(reg, &format!("{name}.skip"), c_in, c_out, 1, false));
    let attn = attention.then(|| {
        let heads = (c_out / ATTENTION_HEAD_WIDTH).max(1);
        AttnP {
            norm: reg_norm(reg, &format!("{name}.attn.norm"), c_out),
            qkv: reg_conv(reg, &format!("{name}.attn.qkv"), c_out, 3 * c_out, 1, false),
            proj: reg_conv(reg, &format!("{name}.attn.proj"), c_out, c_out, 1, true),
            heads,
        }
    });
    let emb_proj = (config.stochastic_mode == StochasticMode::AdalnNoise).then(|| {
        reg_linear(
            reg,
            &format!("{name}.emb_proj"),
            config.noise_embed_dim(),
            2 * c_out,
            true, // zero-init: identity modulation at initialization
        )
    });
    let id = *dropout_id;
    *dropout_id += 1;
    ResBlockP {
        norm1,
        conv1,
        norm2,
        conv2,
        skip,
        attn,
        emb_proj,
        c_out,
        dropout_id: id,
    }
}

fn build_arch<R: Registrar>(config: &ModelConfig, reg: &mut R) -> Arch {
    let widths: Vec<usize> = config
        .channel_multipliers
        .iter()
        .map(|m| m * config.base_width)
        .collect();
    let n_levels = widths.len();
    let nb = config.blocks_per_resolution;
    let mut dropout_id = 0u64;

    let conv_in = reg_conv(reg, "conv_in", config.in_channels, widths[0], 3, false);

    let mut encoder = Vec::with_capacity(n_levels);
    // Skip-channel bookkeeping mirrors the forward pass exactly.
    let mut skip_channels = vec![widths[0]];
    let mut c_cur = widths[0];
    for (level, &w) in widths.iter().enumerate() {
        let mut blocks = Vec::with_capacity(nb);
        for b in 0..nb {
            let blk = reg_res_block(
                reg,
                config,
                &format!("enc{level}.block{b}"),
                c_cur,
                w,
                config.has_attention(level),
                &mut dropout_id,
            );
            c_cur = w;
            skip_channels.push(c_cur);
            blocks.push(blk);
        }
        encoder.push(blocks);
        if level + 1 < n_levels {
            // Parameter-free average-pool downsample; record the skip.
            skip_channels.push(c_cur);
        }
    }

    let middle = vec![
        reg_res_block(
            reg,
            config,
            "middle.block0",
            c_cur,
            c_cur,
            config.has_attention(n_levels - 1),
            &mut dropout_id,
        ),
        reg_res_block(reg, config, "middle.block1", c_cur, c_cur, false, &mut dropout_id),
    ];

    let mut decoder = Vec::with_capacity(n_levels);
    for level in (0..n_levels).rev() {
        let w = widths[level];
        let mut blocks = Vec::with_capacity(nb + 1);
        for b in 0..=nb {
            let skip_c = skip_channels.pop().expect("skip stack underflow");
            let blk = reg_res_block(
                reg,
                config,
                &format!("dec{level}.block{b}"),
                c_cur + skip_c,
                w,
                config.has_attention(level),
                &mut dropout_id,
            );
            c_cur = w;
            blocks.push(blk);
        }
        decoder.push(blocks);
    }
    assert!(skip_channels.is_empty());

    let out_norm = reg_norm(reg, "out.norm", c_cur);
    let out_conv = reg_conv(reg, "out.conv", c_cur, config.out_channels, 3, true);

    let noise_mlp = (config.stochastic_mode == StochasticMode::AdalnNoise).then(|| {
        let e = config.noise_embed_dim();
        (
            reg_linear(reg, "noise_mlp.fc1", config.noise_dim, e, false),
            reg_linear(reg, "noise_mlp.fc2", e, e, false),
        )
    });

    Arch {
        conv_in,
        encoder,
        middle,
        decoder,
        out_norm,
        out_conv,
        noise_mlp,
    }
}

/// Scalar parameter count of the architecture, shape-only (no allocation).
pub fn parameter_count(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    let mut reg = CountRegistrar::default();
    build_arch(config, &mut reg);
    Ok(reg.total)
}

pub struct Model {
    pub config: ModelConfig,
    pub grid: GridSpec,
    pub store: ParamStore,
    arch: Arch,
}

/// Instantiate the network with seeded initialization.
pub fn build(config: &ModelConfig, grid: &GridSpec, init_seed: u64) -> Result<Model> {
    config.validate()?;
    grid.validate()?;
    let stride = config.total_stride();
    if grid.n_lat < stride || grid.n_lon < stride {
        return Err(Error::invalid(format!(
            "grid {}x{} smaller than total downsampling factor {stride}",
            grid.n_lat, grid.n_lon
        )));
    }
    let mut reg = StoreRegistrar {
        store: ParamStore::new(),
        rng: ChaCha8Rng::seed_from_u64(mix_seed(init_seed, 0x0b0e)),
    };
    let arch = build_arch(config, &mut reg);
    Ok(Model {
        config: config.clone(),
        grid: grid.clone(),
        store: reg.store,
        arch,
    })
}

fn conv_forward(fw: &mut Forward, p: &ConvP, x: Var) -> Var {
    let pad = p.kernel / 2;
    let xin = if pad > 0 { fw.tape.pad_lat_lon(x, pad, pad) } else { x };
    let w = fw.param(p.w);
    let b = fw.param(p.b);
    let y = fw.tape.conv2d(xin, w);
    fw.tape.add_bias4(y, b)
}

fn norm_forward(fw: &mut Forward, p: &NormP, x: Var) -> Var {
    let g = fw.param(p.gamma);
    let b = fw.param(p.beta);
    fw.tape.group_norm(x, g, b, p.groups, 1e-5)
}

fn linear_forward(fw: &mut Forward, p: &LinearP, x: Var) -> Var {
    let w = fw.param(p.w);
    let b = fw.param(p.b);
    let y = fw.tape.matmul(x, w);
    fw.tape.add_bias2(y, b)
}

fn attn_forward(fw: &mut Forward, p: &AttnP, x: Var) -> Var {
    let shape = fw.tape.value(x).shape().to_vec();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let heads = p.heads;
    let dh = c / heads;
    let t = h * w;
    let normed = norm_forward(fw, &p.norm, x);
    let qkv = conv_forward(fw, &p.qkv, normed);
    let mut parts = Vec::with_capacity(3);
    for i in 0..3 {
        let sl = fw.tape.slice_channels(qkv, i * c, (i + 1) * c);
        let r = fw.tape.reshape(sl, &[b * heads, dh, t]);
        parts.push(fw.tape.permute(r, &[0, 2, 1])); // [b*heads, t, dh]
    }
    let (q, k, v) = (parts[0], parts[1], parts[2]);
    let kt = fw.tape.permute(k, &[0, 2, 1]);
    let scores = fw.tape.bmm(q, kt);
    let scaled = fw.tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = fw.tape.softmax_last(scaled);
    let ctx = fw.tape.bmm(attn, v); // [b*heads, t, dh]
    let ctx_t = fw.tape.permute(ctx, &[0, 2, 1]);
    let ctx_r = fw.tape.reshape(ctx_t, &[b, c, h, w]);
    let proj = conv_forward(fw, &p.proj, ctx_r);
    fw.tape.add(x, proj)
}

struct ForwardState<'a> {
    config: &'a ModelConfig,
    tag: StochasticTag,
    /// Noise embedding `[B, 4*base]` in adaln_noise mode.
    emb: Option<Var>,
}

fn res_block_forward(fw: &mut Forward, p: &ResBlockP, st: &ForwardState, x: Var) -> Var {
    let mut h = norm_forward(fw, &p.norm1, x);
    h = fw.tape.silu(h);
    h = conv_forward(fw, &p.conv1, h);
    h = norm_forward(fw, &p.norm2, h);
    if let (Some(proj), Some(emb)) = (&p.emb_proj, st.emb) {
        let mod2c = linear_forward(fw, proj, emb);
        let scale = fw.tape.slice_cols(mod2c, 0, p.c_out);
        let shift = fw.tape.slice_cols(mod2c, p.c_out, 2 * p.c_out);
        h = fw.tape.scale_shift(h, scale, shift);
    }
    h = fw.tape.silu(h);
    if st.config.stochastic_mode == StochasticMode::Dropout
        && st.tag.enabled
        && st.config.dropout_rate > 0.0
    {
        let shape = fw.tape.value(h).shape().to_vec();
        let seed = mix_seed(mix_seed(st.tag.member_seed, 0xd80), p.dropout_id);
        let mask = dropout_mask(&shape, st.config.dropout_rate, seed);
        h = fw.tape.mul_const(h, mask);
    }
    h = conv_forward(fw, &p.conv2, h);
    let shortcut = match &p.skip {
        Some(sk) => conv_forward(fw, sk, x),
        None => x,
    };
    let mut y = fw.tape.add(shortcut, h);
    if let Some(attn) = &p.attn {
        y = attn_forward(fw, attn, y);
    }
    y
}

impl Model {
    /// Record a residual prediction on the given tape. `x` is the
    /// `[B, 2C+F, H, W]` input stack; the output is `[B, C, H, W]`.
    pub fn forward_on(&self, fw: &mut Forward, x: Var, tag: StochasticTag) -> Result<Var> {
        let shape = fw.tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "expected [B, {}, H, W] input, got {shape:?}",
                self.config.in_channels
            )));
        }
        let batch = shape[0];
        let emb = match (&self.arch.noise_mlp, self.config.stochastic_mode) {
            (Some((fc1, fc2)), StochasticMode::AdalnNoise) => {
                let noise = if tag.enabled {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(mix_seed(tag.member_seed, 0xada1));
                    Array2::from_shape_fn((batch, self.config.noise_dim), |_| normal(&mut rng))
                } else {
                    Array2::zeros((batch, self.config.noise_dim))
                };
                let nv = fw.tape.leaf(noise.into_dyn());
                let e1 = linear_forward(fw, fc1, nv);
                let e1s = fw.tape.silu(e1);
                let e2 = linear_forward(fw, fc2, e1s);
                Some(fw.tape.silu(e2))
            }
            _ => None,
        };
        let st = ForwardState {
            config: &self.config,
            tag,
            emb,
        };

        let mut h = conv_forward(fw, &self.arch.conv_in, x);
        let mut skips = vec![h];
        let n_levels = self.config.n_levels();
        for (level, blocks) in self.arch.encoder.iter().enumerate() {
            for blk in blocks {
                h = res_block_forward(fw, blk, &st, h);
                skips.push(h);
            }
            if level + 1 < n_levels {
                h = fw.tape.avg_pool2(h);
                skips.push(h);
            }
        }
        for blk in &self.arch.middle {
            h = res_block_forward(fw, blk, &st, h);
        }
        for blocks in &self.arch.decoder {
            for blk in blocks {
                let skip = skips.pop().expect("skip underflow");
                let sshape = fw.tape.value(skip).shape().to_vec();
                let hshape = fw.tape.value(h).shape().to_vec();
                if sshape[2] != hshape[2] || sshape[3] != hshape[3] {
                    // Automatic bilinear upsampling to the skip's exact shape.
                    h = fw.tape.bilinear_resize(h, sshape[2], sshape[3]);
                }
                h = fw.tape.concat_channels(h, skip);
                h = res_block_forward(fw, blk, &st, h);
            }
        }
        debug_assert!(skips.is_empty());
        h = norm_forward(fw, &self.arch.out_norm, h);
        h = fw.tape.silu(h);
        Ok(conv_forward(fw, &self.arch.out_conv, h))
    }

    /// Convenience inference entry point: forward a batch without keeping
    /// the tape.
    pub fn predict(&self, input: &Array4<f64>, tag: StochasticTag) -> Result<Array4<f64>> {
        let mut fw = Forward::new(&self.store);
        let x = fw.tape.leaf(input.clone().into_dyn());
        let y = self.forward_on(&mut fw, x, tag)?;
        Ok(fw
            .tape
            .value(y)
            .clone()
            .into_dimensionality()
            .expect("4-d output"))
    }

    pub fn parameter_count(&self) -> usize {
        self.store.num_scalars()
    }
}
