//! Reverse-mode automatic differentiation over `ndarray` arrays.
//!
//! A `Tape` records one forward computation as an arena of nodes; `backward`
//! walks the arena in reverse and accumulates gradients. Tensors are f64
//! throughout so finite-difference checks and bitwise checkpoint round-trips
//! are unambiguous. A tape lives for a single forward/backward pair and is
//! then dropped; parameters persist outside the tape (see [`crate::nn`]).
//!
//! Convolution rebuilds its im2col buffer during the backward pass instead of
//! caching it, keeping per-node memory at one activation tensor.

use ndarray::{Array2, Array4, ArrayD, ArrayView2, ArrayView4, Axis, IxDyn};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

struct BackCtx<'a> {
    values: &'a [ArrayD<f64>],
    parents: &'a [usize],
    out: usize,
}

impl BackCtx<'_> {
    fn parent(&self, i: usize) -> &ArrayD<f64> {
        &self.values[self.parents[i]]
    }
    fn output(&self) -> &ArrayD<f64> {
        &self.values[self.out]
    }
}

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &BackCtx) -> Vec<ArrayD<f64>>>;

struct OpRecord {
    parents: Vec<usize>,
    backward: BackwardFn,
}

#[derive(Default)]
pub struct Tape {
    values: Vec<ArrayD<f64>>,
    ops: Vec<Option<OpRecord>>,
}

fn as4(a: &ArrayD<f64>) -> ArrayView4<'_, f64> {
    a.view().into_dimensionality().expect("expected 4-d tensor")
}

fn as2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality().expect("expected 2-d tensor")
}

/// Row-linear interpolation matrix mapping `n_in` samples to `n_out` with
/// half-pixel centers. `wrap` selects circular (longitude) vs clamped
/// (latitude) handling of out-of-range source positions.
pub fn interp_matrix(n_in: usize, n_out: usize, wrap: bool) -> Array2<f64> {
    let mut m = Array2::zeros((n_out, n_in));
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let i0 = src.floor();
        let frac = src - i0;
        let (a, b) = (i0 as i64, i0 as i64 + 1);
        let idx = |i: i64| -> usize {
            if wrap {
                i.rem_euclid(n_in as i64) as usize
            } else {
                i.clamp(0, n_in as i64 - 1) as usize
            }
        };
        m[[o, idx(a)]] += 1.0 - frac;
        m[[o, idx(b)]] += frac;
    }
    m
}

fn im2col(x: &ArrayView4<f64>, kh: usize, kw: usize) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut col = Array2::<f64>::zeros((c * kh * kw, b * oh * ow));
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    for oi in 0..oh {
                        for oj in 0..ow {
                            col[[row, (bi * oh + oi) * ow + oj]] = x[[bi, ci, oi + ki, oj + kj]];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(dcol: &Array2<f64>, b: usize, c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Array4<f64> {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut dx = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    for oi in 0..oh {
                        for oj in 0..ow {
                            dx[[bi, ci, oi + ki, oj + kj]] += dcol[[row, (bi * oh + oi) * ow + oj]];
                        }
                    }
                }
            }
        }
    }
    dx
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.values[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Option<OpRecord>) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    /// Input node: participates in gradient flow.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] + &self.values[b.0];
        self.push(
            v,
            Some(OpRecord {
                parents: vec![a.0, b.0],
                backward: Box::new(|g, _| vec![g.clone(), g.clone()]),
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] - &self.values[b.0];
        self.push(
            v,
            Some(OpRecord {
                parents: vec![a.0, b.0],
                backward: Box::new(|g, _| vec![g.clone(), g.mapv(|x| -x)]),
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] * &self.values[b.0];
        self.push(
            v,
            Some(OpRecord {
                parents: vec![a.0, b.0],
                backward: Box::new(|g, ctx| vec![g * ctx.parent(1), g * ctx.parent(0)]),
            }),
        )
    }

    /// Elementwise product with a constant (no gradient flows to `c`).
    pub fn mul_const(&mut self, a: Var, c: ArrayD<f64>) -> Var {
        let v = &self.values[a.0] * &c;
        self.push(
            v,
            Some(OpRecord {
                parents: vec![a.0],
                backward: Box::new(move |g, _| vec![g * &c]),
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.values[a.0].mapv(|x| x * s);
        self.push(
            v,
            Some(OpRecord {
                parents: vec![a.0],
                backward: Box::new(move |g, _| vec![g.mapv(|x| x * s)]),
            }),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x / (1.0 + (-x).exp()));
        self.push(
            v,
            Some(OpRecord {
                parents: vec![a.0],
                backward: Box::new(|g, ctx| {
                    let x = ctx.parent(0);
                    let d = x.mapv(|x| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        s * (1.0 + x * (1.0 - s))
                    });
                    vec![g * &d]
                }),
            }),
        )
    }

    /// Absolute value with the subgradient convention `sign(0) = 0`.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::abs);
        self.push(
            v,
            Some(OpRecord {
                parents: vec![a.0],
                backward: Box::new(|g, ctx| {
                    let s = ctx.parent(0).mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    vec![g * &s]
                }),
            }),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.values[a.0].sum();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            Some(OpRecord {
                parents: vec![a.0],
                backward: Box::new(|g, ctx| {
                    let gs = *g.first().expect("scalar grad");
                    vec![ArrayD::from_elem(ctx.parent(0).raw_dim(), gs)]
                }),
            }),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// 2-d matrix product `a[m,k] . b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = as2(&self.values[a.0]).dot(&as2(&self.values[b.0]));
        self.push(
            v.into_dyn(),
            Some(OpRecord {
                parents: vec![a.0, b.0],
                backward: Box::new(|g, ctx| {
                    let g2 = as2(g);
                    let da = g2.dot(&as2(ctx.parent(1)).t());
                    let db = as2(ctx.parent(0)).t().dot(&g2);
                    vec![da.into_dyn(), db.into_dyn()]
                }),
            }),
        )
    }

    /// Batched matrix product over 3-d arrays `[n, m, k] . [n, k, p]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let av = &self.values[a.0];
        let bv = &self.values[b.0];
        let (n, m, _k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let p = bv.shape()[2];
        let mut out = ndarray::Array3::<f64>::zeros((n, m, p));
        for i in 0..n {
            let ai = av.index_axis(Axis(0), i);
            let bi = bv.index_axis(Axis(0), i);
            let ai2: ArrayView2<f64> = ai.into_dimensionality().unwrap();
            let bi2: ArrayView2<f64> = bi.into_dimensionality().unwrap();
            out.index_axis_mut(Axis(0), i).assign(&ai2.dot(&bi2));
        }
        self.push(
            out.into_dyn(),
            Some(OpRecord {
                parents: vec![a.0, b.0],
                backward: Box::new(|g, ctx| {
                    let av = ctx.parent(0);
                    let bv = ctx.parent(1);
                    let n = av.shape()[0];
                    let mut da = ArrayD::zeros(av.raw_dim());
                    let mut db = ArrayD::zeros(bv.raw_dim());
                    for i in 0..n {
                        let gi: ArrayView2<f64> =
                            g.index_axis(Axis(0), i).into_dimensionality().unwrap();
                        let ai: ArrayView2<f64> =
                            av.index_axis(Axis(0), i).into_dimensionality().unwrap();
                        let bi: ArrayView2<f64> =
                            bv.index_axis(Axis(0), i).into_dimensionality().unwrap();
                        da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                        db.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                    }
                    vec![da, db]
                }),
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old = self.values[a.0].shape().to_vec();
        let v = self.values[a.0]
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.push(
            v,
            Some(OpRecord {
                parents: vec![a.0],
                backward: Box::new(move |g, _| {
                    vec![g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(&old))
                        .unwrap()]
                }),
            }),
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let axes_v = axes.to_vec();
        let v = self.values[a.0]
            .view()
            .permuted_axes(IxDyn(&axes_v))
            .to_owned();
        self.push(
            v,
            Some(OpRecord {
                parents: vec![a.0],
                backward: Box::new(move |g, _| {
                    let mut inv = vec![0usize; axes_v.len()];
                    for (i, &ax) in axes_v.iter().enumerate() {
                        inv[ax] = i;
                    }
                    vec![g.view().permuted_axes(IxDyn(&inv)).to_owned()]
                }),
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let last = x.ndim() - 1;
        let mut v = x.clone();
        for mut lane in v.lanes_mut(Axis(last)) {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lane.mapv_inplace(|t| (t - m).exp());
            let s = lane.sum();
            lane.mapv_inplace(|t| t / s);
        }
        self.push(
            v,
            Some(OpRecord {
                parents: vec![a.0],
                backward: Box::new(move |g, ctx| {
                    let y = ctx.output();
                    let last = y.ndim() - 1;
                    let mut dx = g * y;
                    let dot = (&dx).sum_axis(Axis(last)).insert_axis(Axis(last));
                    dx = dx - &dot * y;
                    vec![dx]
                }),
            }),
        )
    }

    /// Zero-pad latitude (axis 2) and circular-pad longitude (axis 3).
    pub fn pad_lat_lon(&mut self, a: Var, ph: usize, pw: usize) -> Var {
        let x = as4(&self.values[a.0]);
        let (b, c, h, w) = x.dim();
        let mut out = Array4::<f64>::zeros((b, c, h + 2 * ph, w + 2 * pw));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..(w + 2 * pw) {
                        let src_j = (j as i64 - pw as i64).rem_euclid(w as i64) as usize;
                        out[[bi, ci, i + ph, j]] = x[[bi, ci, i, src_j]];
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(OpRecord {
                parents: vec![a.0],
                backward: Box::new(move |g, ctx| {
                    let (b, c, h, w) = as4(ctx.parent(0)).dim();
                    let g4 = as4(g);
                    let mut dx = Array4::<f64>::zeros((b, c, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            for i in 0..h {
                                for j in 0..(w + 2 * pw) {
                                    let src_j = (j as i64 - pw as i64).rem_euclid(w as i64) as usize;
                                    dx[[bi, ci, i, src_j]] += g4[[bi, ci, i + ph, j]];
                                }
                            }
                        }
                    }
                    vec![dx.into_dyn()]
                }),
            }),
        )
    }

    /// Valid (no-padding) 2-d convolution of a pre-padded input.
    /// `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Var {
        let xv = as4(&self.values[x.0]);
        let wv = &self.values[w.0];
        let (b, c, h, ww) = xv.dim();
        let (cout, cin, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(c, cin, "conv2d channel mismatch");
        let (oh, ow) = (h - kh + 1, ww - kw + 1);
        let col = im2col(&xv, kh, kw);
        let w2 = self.values[w.0]
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap()
            .to_owned();
        let y2 = w2.dot(&col); // [cout, b*oh*ow]
        let mut out = Array4::<f64>::zeros((b, cout, oh, ow));
        for bi in 0..b {
            for co in 0..cout {
                for oi in 0..oh {
                    for oj in 0..ow {
                        out[[bi, co, oi, oj]] = y2[[co, (bi * oh + oi) * ow + oj]];
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(OpRecord {
                parents: vec![x.0, w.0],
                backward: Box::new(move |g, ctx| {
                    let xv = as4(ctx.parent(0));
                    let (b, c, h, wdim) = xv.dim();
                    let g4 = as4(g);
                    let (_, cout, oh, ow) = g4.dim();
                    let mut g2 = Array2::<f64>::zeros((cout, b * oh * ow));
                    for bi in 0..b {
                        for co in 0..cout {
                            for oi in 0..oh {
                                for oj in 0..ow {
                                    g2[[co, (bi * oh + oi) * ow + oj]] = g4[[bi, co, oi, oj]];
                                }
                            }
                        }
                    }
                    // im2col is rebuilt here rather than cached in the node.
                    let col = im2col(&xv, kh, kw);
                    let dw2 = g2.dot(&col.t());
                    let dw = dw2
                        .into_shape_with_order(IxDyn(&[cout, c, kh, kw]))
                        .unwrap();
                    let wv2 = ctx.parent(1)
                        .view()
                        .into_shape_with_order((cout, c * kh * kw))
                        .unwrap()
                        .to_owned();
                    let dcol = wv2.t().dot(&g2);
                    let dx = col2im(&dcol, b, c, h, wdim, kh, kw);
                    vec![dx.into_dyn(), dw]
                }),
            }),
        )
    }

    /// Broadcast-add a `[C]` bias over a `[B, C, H, W]` tensor.
    pub fn add_bias4(&mut self, x: Var, bias: Var) -> Var {
        let xv = as4(&self.values[x.0]);
        let bv = &self.values[bias.0];
        let (b, c, h, w) = xv.dim();
        assert_eq!(bv.len(), c);
        let mut out = xv.to_owned();
        for ci in 0..c {
            let bc = bv[[ci]];
            out.index_axis_mut(Axis(1), ci).mapv_inplace(|t| t + bc);
        }
        let _ = (b, h, w);
        self.push(
            out.into_dyn(),
            Some(OpRecord {
                parents: vec![x.0, bias.0],
                backward: Box::new(|g, ctx| {
                    let c = ctx.parent(1).len();
                    let g4 = as4(g);
                    let mut db = ndarray::Array1::<f64>::zeros(c);
                    for ci in 0..c {
                        db[ci] = g4.index_axis(Axis(1), ci).sum();
                    }
                    vec![g.clone(), db.into_dyn()]
                }),
            }),
        )
    }

    /// Broadcast-add a `[N]` bias over the rows of a `[B, N]` matrix.
    pub fn add_bias2(&mut self, x: Var, bias: Var) -> Var {
        let xv = as2(&self.values[x.0]).to_owned();
        let bv = &self.values[bias.0];
        let n = xv.ncols();
        assert_eq!(bv.len(), n);
        let out = xv + &bv.view().into_shape_with_order((1, n)).unwrap();
        self.push(
            out.into_dyn(),
            Some(OpRecord {
                parents: vec![x.0, bias.0],
                backward: Box::new(|g, _| {
                    let g2 = as2(g);
                    let db = g2.sum_axis(Axis(0));
                    vec![g.clone(), db.into_dyn()]
                }),
            }),
        )
    }

    /// Ceil-mode 2x2 average pooling (trailing odd rows/cols pool what remains).
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let x = as4(&self.values[a.0]);
        let (b, c, h, w) = x.dim();
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = Array4::<f64>::zeros((b, c, oh, ow));
        for bi in 0..b {
            for ci in 0..c {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let i1 = (2 * oi + 1).min(h - 1);
                        let j1 = (2 * oj + 1).min(w - 1);
                        let mut s = 0.0;
                        let mut n = 0.0;
                        for i in (2 * oi)..=i1 {
                            for j in (2 * oj)..=j1 {
                                s += x[[bi, ci, i, j]];
                                n += 1.0;
                            }
                        }
                        out[[bi, ci, oi, oj]] = s / n;
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(OpRecord {
                parents: vec![a.0],
                backward: Box::new(|g, ctx| {
                    let (b, c, h, w) = as4(ctx.parent(0)).dim();
                    let g4 = as4(g);
                    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
                    let mut dx = Array4::<f64>::zeros((b, c, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            for oi in 0..oh {
                                for oj in 0..ow {
                                    let i1 = (2 * oi + 1).min(h - 1);
                                    let j1 = (2 * oj + 1).min(w - 1);
                                    let n = ((i1 - 2 * oi + 1) * (j1 - 2 * oj + 1)) as f64;
                                    let gv = g4[[bi, ci, oi, oj]] / n;
                                    for i in (2 * oi)..=i1 {
                                        for j in (2 * oj)..=j1 {
                                            dx[[bi, ci, i, j]] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    vec![dx.into_dyn()]
                }),
            }),
        )
    }

    /// Bilinear resize to `(oh, ow)`: clamped along latitude, circular along
    /// longitude so the decoder stays shift-equivariant on the periodic axis.
    pub fn bilinear_resize(&mut self, a: Var, oh: usize, ow: usize) -> Var {
        let x = as4(&self.values[a.0]);
        let (b, c, h, w) = x.dim();
        if (h, w) == (oh, ow) {
            return self.scale(a, 1.0);
        }
        let rh = interp_matrix(h, oh, false);
        let rw = interp_matrix(w, ow, true);
        let mut out = Array4::<f64>::zeros((b, c, oh, ow));
        for bi in 0..b {
            for ci in 0..c {
                let xi: ArrayView2<f64> = x.slice(ndarray::s![bi, ci, .., ..]);
                let y = rh.dot(&xi).dot(&rw.t());
                out.slice_mut(ndarray::s![bi, ci, .., ..]).assign(&y);
            }
        }
        self.push(
            out.into_dyn(),
            Some(OpRecord {
                parents: vec![a.0],
                backward: Box::new(move |g, ctx| {
                    let (b, c, h, w) = as4(ctx.parent(0)).dim();
                    let g4 = as4(g);
                    let mut dx = Array4::<f64>::zeros((b, c, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            let gi: ArrayView2<f64> = g4.slice(ndarray::s![bi, ci, .., ..]);
                            let d = rh.t().dot(&gi).dot(&rw);
                            dx.slice_mut(ndarray::s![bi, ci, .., ..]).assign(&d);
                        }
                    }
                    vec![dx.into_dyn()]
                }),
            }),
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let av = as4(&self.values[a.0]);
        let bv = as4(&self.values[b.0]);
        let ca = av.dim().1;
        let v = ndarray::concatenate(Axis(1), &[av, bv]).expect("concat shape mismatch");
        self.push(
            v.into_dyn(),
            Some(OpRecord {
                parents: vec![a.0, b.0],
                backward: Box::new(move |g, _| {
                    let g4 = as4(g);
                    let da = g4.slice(ndarray::s![.., ..ca, .., ..]).to_owned();
                    let db = g4.slice(ndarray::s![.., ca.., .., ..]).to_owned();
                    vec![da.into_dyn(), db.into_dyn()]
                }),
            }),
        )
    }

    pub fn slice_channels(&mut self, a: Var, from: usize, to: usize) -> Var {
        let av = as4(&self.values[a.0]);
        let v = av.slice(ndarray::s![.., from..to, .., ..]).to_owned();
        self.push(
            v.into_dyn(),
            Some(OpRecord {
                parents: vec![a.0],
                backward: Box::new(move |g, ctx| {
                    let mut dx = ArrayD::zeros(ctx.parent(0).raw_dim());
                    dx.slice_mut(ndarray::s![.., from..to, .., ..]).assign(&as4(g));
                    vec![dx]
                }),
            }),
        )
    }

    /// Column slice `[N, from..to]` of a 2-d array.
    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let av = as2(&self.values[a.0]);
        let v = av.slice(ndarray::s![.., from..to]).to_owned();
        self.push(
            v.into_dyn(),
            Some(OpRecord {
                parents: vec![a.0],
                backward: Box::new(move |g, ctx| {
                    let mut dx = ArrayD::zeros(ctx.parent(0).raw_dim());
                    dx.slice_mut(ndarray::s![.., from..to]).assign(&as2(g));
                    vec![dx]
                }),
            }),
        )
    }

    /// Group normalization over `[B, C, H, W]` with affine `gamma`/`beta` of
    /// shape `[C]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xv = as4(&self.values[x.0]).to_owned();
        let (b, c, h, w) = xv.dim();
        assert!(c % groups == 0, "channels not divisible by groups");
        let gs = c / groups;
        let n = (gs * h * w) as f64;
        let mut mean = Array2::<f64>::zeros((b, groups));
        let mut var = Array2::<f64>::zeros((b, groups));
        for bi in 0..b {
            for gi in 0..groups {
                let sl = xv.slice(ndarray::s![bi, gi * gs..(gi + 1) * gs, .., ..]);
                let m = sl.sum() / n;
                let v = sl.mapv(|t| (t - m) * (t - m)).sum() / n;
                mean[[bi, gi]] = m;
                var[[bi, gi]] = v;
            }
        }
        let gv = &self.values[gamma.0];
        let bv = &self.values[beta.0];
        let mut out = Array4::<f64>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                let gi = ci / gs;
                let inv = 1.0 / (var[[bi, gi]] + eps).sqrt();
                let m = mean[[bi, gi]];
                let (ga, be) = (gv[[ci]], bv[[ci]]);
                for i in 0..h {
                    for j in 0..w {
                        out[[bi, ci, i, j]] = (xv[[bi, ci, i, j]] - m) * inv * ga + be;
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(OpRecord {
                parents: vec![x.0, gamma.0, beta.0],
                backward: Box::new(move |g, ctx| {
                    let xv = as4(ctx.parent(0));
                    let gv = ctx.parent(1);
                    let g4 = as4(g);
                    let (b, c, h, w) = xv.dim();
                    let gs = c / groups;
                    let n = (gs * h * w) as f64;
                    let mut dx = Array4::<f64>::zeros((b, c, h, w));
                    let mut dgamma = ndarray::Array1::<f64>::zeros(c);
                    let mut dbeta = ndarray::Array1::<f64>::zeros(c);
                    for bi in 0..b {
                        for gi in 0..groups {
                            let sl = xv.slice(ndarray::s![bi, gi * gs..(gi + 1) * gs, .., ..]);
                            let m = sl.sum() / n;
                            let v = sl.mapv(|t| (t - m) * (t - m)).sum() / n;
                            let inv = 1.0 / (v + eps).sqrt();
                            // dL/dxhat, plus the two reduction terms of the
                            // standard normalization backward.
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for ci in (gi * gs)..((gi + 1) * gs) {
                                let ga = gv[[ci]];
                                for i in 0..h {
                                    for j in 0..w {
                                        let xhat = (xv[[bi, ci, i, j]] - m) * inv;
                                        let dy = g4[[bi, ci, i, j]];
                                        dgamma[ci] += dy * xhat;
                                        dbeta[ci] += dy;
                                        let dxhat = dy * ga;
                                        sum_dxhat += dxhat;
                                        sum_dxhat_xhat += dxhat * xhat;
                                    }
                                }
                            }
                            for ci in (gi * gs)..((gi + 1) * gs) {
                                let ga = gv[[ci]];
                                for i in 0..h {
                                    for j in 0..w {
                                        let xhat = (xv[[bi, ci, i, j]] - m) * inv;
                                        let dxhat = g4[[bi, ci, i, j]] * ga;
                                        dx[[bi, ci, i, j]] = inv
                                            * (dxhat
                                                - sum_dxhat / n
                                                - xhat * sum_dxhat_xhat / n);
                                    }
                                }
                            }
                        }
                    }
                    vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
                }),
            }),
        )
    }

    /// FiLM-style modulation `x * (1 + scale) + shift` with per-sample,
    /// per-channel `scale`/`shift` of shape `[B, C]`.
    pub fn scale_shift(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xv = as4(&self.values[x.0]).to_owned();
        let sv = as2(&self.values[scale.0]).to_owned();
        let tv = as2(&self.values[shift.0]).to_owned();
        let (b, c, h, w) = xv.dim();
        let mut out = xv.clone();
        for bi in 0..b {
            for ci in 0..c {
                let s = 1.0 + sv[[bi, ci]];
                let t = tv[[bi, ci]];
                for i in 0..h {
                    for j in 0..w {
                        out[[bi, ci, i, j]] = xv[[bi, ci, i, j]] * s + t;
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(OpRecord {
                parents: vec![x.0, scale.0, shift.0],
                backward: Box::new(|g, ctx| {
                    let xv = as4(ctx.parent(0));
                    let sv = as2(ctx.parent(1));
                    let g4 = as4(g);
                    let (b, c, _h, _w) = xv.dim();
                    let mut dx = ArrayD::zeros(ctx.parent(0).raw_dim());
                    let mut ds = Array2::<f64>::zeros((b, c));
                    let mut dt = Array2::<f64>::zeros((b, c));
                    {
                        let mut dx4 = dx.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
                        for bi in 0..b {
                            for ci in 0..c {
                                let s = 1.0 + sv[[bi, ci]];
                                let gslice = g4.slice(ndarray::s![bi, ci, .., ..]);
                                let xslice = xv.slice(ndarray::s![bi, ci, .., ..]);
                                ds[[bi, ci]] = (&gslice * &xslice).sum();
                                dt[[bi, ci]] = gslice.sum();
                                dx4.slice_mut(ndarray::s![bi, ci, .., ..])
                                    .assign(&gslice.mapv(|t| t * s));
                            }
                        }
                    }
                    vec![dx, ds.into_dyn(), dt.into_dyn()]
                }),
            }),
        )
    }

    /// Reverse pass from a scalar root; returns one gradient slot per node.
    pub fn backward(&self, root: Var) -> Vec<Option<ArrayD<f64>>> {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.values.len()];
        grads[root.0] = Some(ArrayD::from_elem(self.values[root.0].raw_dim(), 1.0));
        for i in (0..self.values.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(op) = &self.ops[i] {
                let ctx = BackCtx {
                    values: &self.values,
                    parents: &op.parents,
                    out: i,
                };
                let pgrads = (op.backward)(&g, &ctx);
                debug_assert_eq!(pgrads.len(), op.parents.len());
                for (p, pg) in op.parents.iter().zip(pgrads) {
                    match &mut grads[*p] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            } else {
                grads[i] = Some(g); // leaf: keep for the caller
            }
        }
        grads
    }
}
