//! Forward and backward passes for the image classifiers described by an
//! [`ArchitectureDescriptor`] topology.

use std::sync::Arc;

use ndarray::{s, Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arch::{ArchitectureDescriptor, FlowShape, LayerKind, Op};
use crate::checkpoint::{BnStats, CheckpointMeta, ModelCheckpoint};
use crate::data::ImageSet;
use crate::error::{Error, Result};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    #[default]
    KaimingUniform,
    KaimingNormal,
    XavierUniform,
}

/// How batch-norm layers treat statistics during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics updated with momentum.
    Train,
    /// Running statistics.
    Eval,
    /// Batch statistics; per-channel input moments accumulated for
    /// [`NetParams::finish_collect`]. Running statistics untouched.
    Collect,
}

#[derive(Clone, Debug, Default)]
struct Moments {
    n: f64,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

/// Learned tensors (indexed by layer) and batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct NetParams {
    pub arch: Arc<ArchitectureDescriptor>,
    pub weights: Vec<Array2<f32>>,
    pub stats: Vec<Option<BnStats>>,
    moments: Vec<Option<Moments>>,
}

#[derive(Clone, Debug)]
pub enum Act {
    Map(Array4<f32>),
    Flat(Array2<f32>),
}

impl Act {
    fn dims(&self) -> (usize, usize, usize) {
        match self {
            Act::Map(a) => {
                let (b, c, h, w) = a.dim();
                (b, c, h * w)
            }
            Act::Flat(a) => {
                let (b, c) = a.dim();
                (b, c, 1)
            }
        }
    }

    fn as_slice(&self) -> &[f32] {
        match self {
            Act::Map(a) => a.as_slice().expect("standard layout"),
            Act::Flat(a) => a.as_slice().expect("standard layout"),
        }
    }

    fn as_slice_mut(&mut self) -> &mut [f32] {
        match self {
            Act::Map(a) => a.as_slice_mut().expect("standard layout"),
            Act::Flat(a) => a.as_slice_mut().expect("standard layout"),
        }
    }

    fn zeros_like(&self) -> Act {
        match self {
            Act::Map(a) => Act::Map(Array4::zeros(a.dim())),
            Act::Flat(a) => Act::Flat(Array2::zeros(a.dim())),
        }
    }

    pub fn into_flat(self) -> Array2<f32> {
        match self {
            Act::Flat(a) => a,
            Act::Map(a) => {
                let (b, c, h, w) = a.dim();
                a.into_shape_with_order((b, c * h * w)).expect("contiguous")
            }
        }
    }
}

enum Tape {
    Conv {
        layer: usize,
        cols: Array2<f32>,
        in_dim: (usize, usize, usize, usize),
        out_hw: (usize, usize),
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Bn {
        layer: usize,
        xhat: Act,
        inv_std: Vec<f32>,
    },
    Relu {
        out: Act,
    },
    MaxPool {
        argmax: Vec<usize>,
        in_dim: (usize, usize, usize, usize),
    },
    Gap {
        in_dim: (usize, usize, usize, usize),
    },
    Flatten {
        in_dim: Option<(usize, usize, usize, usize)>,
    },
    Linear {
        layer: usize,
        input: Array2<f32>,
    },
    Residual {
        body: Vec<Tape>,
        shortcut: Vec<Tape>,
    },
}

/// Recorded forward pass for [`NetParams::backward`].
pub struct ForwardTape(Vec<Tape>);

fn im2col(x: &Array4<f32>, k: usize, stride: usize, pad: usize) -> (Array2<f32>, usize, usize) {
    let (b, c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let ckk = c * k * k;
    let mut cols = vec![0.0f32; b * oh * ow * ckk];
    let xs = x.as_slice().expect("standard layout");
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * ckk;
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[row + (ci * k + ky) * k + kx] = xs[base + iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    (Array2::from_shape_vec((b * oh * ow, ckk), cols).expect("sized"), oh, ow)
}

fn col2im(
    dcols: &Array2<f32>,
    in_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let (b, c, h, w) = in_dim;
    let (oh, ow) = out_hw;
    let ckk = c * k * k;
    let mut dx = Array4::<f32>::zeros(in_dim);
    let dxs = dx.as_slice_mut().expect("standard layout");
    let dc = dcols.as_slice().expect("standard layout");
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * ckk;
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dxs[base + iy as usize * w + ix as usize] += dc[row + (ci * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    dx
}

impl NetParams {
    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        ckpt.validate()?;
        if !ckpt.arch.is_runnable() {
            return Err(Error::Validation(format!("architecture {} has no topology", ckpt.arch.arch_id)));
        }
        let weights = ckpt.arch.layers.iter().map(|l| ckpt.tensors[&l.name].clone()).collect();
        let stats = ckpt
            .arch
            .layers
            .iter()
            .map(|l| {
                (l.kind == LayerKind::Batchnorm)
                    .then(|| ckpt.buffers.get(&l.name).cloned().unwrap_or_else(|| BnStats::identity(l.out_dim)))
            })
            .collect();
        Ok(NetParams {
            moments: vec![None; ckpt.arch.layers.len()],
            arch: ckpt.arch.clone(),
            weights,
            stats,
        })
    }

    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> ModelCheckpoint {
        let tensors = self
            .arch
            .layers
            .iter()
            .zip(&self.weights)
            .map(|(l, w)| (l.name.clone(), w.clone()))
            .collect();
        let buffers = self
            .arch
            .layers
            .iter()
            .zip(&self.stats)
            .filter_map(|(l, s)| s.clone().map(|s| (l.name.clone(), s)))
            .collect();
        ModelCheckpoint {
            arch: self.arch.clone(),
            tensors,
            buffers,
            meta,
        }
    }

    pub fn init<R: Rng>(arch: Arc<ArchitectureDescriptor>, scheme: InitScheme, rng: &mut R) -> Result<Self> {
        if !arch.is_runnable() {
            return Err(Error::Validation(format!("architecture {} has no topology", arch.arch_id)));
        }
        let mut weights = Vec::with_capacity(arch.layers.len());
        for l in &arch.layers {
            let [r, c] = l.tensor_shape();
            let mut t = Array2::<f32>::zeros((r, c));
            match l.kind {
                LayerKind::Batchnorm => t.row_mut(0).fill(1.0),
                _ => {
                    let fan_in = l.fan_in.max(1) as f32;
                    let fan_out = l.out_dim as f32;
                    let mut body = t.slice_mut(s![.., ..l.fan_in]);
                    match scheme {
                        InitScheme::KaimingUniform => {
                            let b = (6.0 / fan_in).sqrt();
                            body.mapv_inplace(|_| rng.random_range(-b..b));
                        }
                        InitScheme::KaimingNormal => {
                            let n = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
                            body.mapv_inplace(|_| n.sample(rng));
                        }
                        InitScheme::XavierUniform => {
                            let b = (6.0 / (fan_in + fan_out)).sqrt();
                            body.mapv_inplace(|_| rng.random_range(-b..b));
                        }
                    }
                    if l.has_bias {
                        let b = 1.0 / fan_in.sqrt();
                        t.column_mut(l.fan_in).mapv_inplace(|_| rng.random_range(-b..b));
                    }
                }
            }
            weights.push(t);
        }
        let stats = arch
            .layers
            .iter()
            .map(|l| (l.kind == LayerKind::Batchnorm).then(|| BnStats::identity(l.out_dim)))
            .collect();
        Ok(NetParams {
            moments: vec![None; arch.layers.len()],
            arch,
            weights,
            stats,
        })
    }

    fn input_act(&self, x: Array4<f32>) -> Result<Act> {
        let (b, c, h, w) = x.dim();
        let [ec, eh, ew] = self.arch.input_shape;
        if (c, h, w) != (ec, eh, ew) {
            return Err(Error::shape(format!("{:?}", self.arch.input_shape), format!("{:?}", [c, h, w])));
        }
        Ok(if eh == 1 && ew == 1 {
            Act::Flat(x.into_shape_with_order((b, c)).expect("contiguous"))
        } else {
            Act::Map(x)
        })
    }

    /// Logits for a batch `[B, C, H, W]`.
    pub fn forward(&mut self, x: Array4<f32>, mode: BnMode) -> Result<Array2<f32>> {
        let x = self.input_act(x)?;
        let ops = self.arch.topology.clone();
        Ok(self.run(&ops, x, mode, None).into_flat())
    }

    /// Logits plus the tape needed by [`Self::backward`].
    pub fn forward_train(&mut self, x: Array4<f32>) -> Result<(Array2<f32>, ForwardTape)> {
        let x = self.input_act(x)?;
        let ops = self.arch.topology.clone();
        let mut tape = Vec::new();
        let out = self.run(&ops, x, BnMode::Train, Some(&mut tape)).into_flat();
        Ok((out, ForwardTape(tape)))
    }

    /// Gradients of the learned tensors given `dlogits`, indexed like `weights`.
    pub fn backward(&self, tape: ForwardTape, dlogits: Array2<f32>) -> Vec<Array2<f32>> {
        let mut grads: Vec<Array2<f32>> = self.weights.iter().map(|w| Array2::zeros(w.dim())).collect();
        self.back(tape.0, Act::Flat(dlogits), &mut grads);
        grads
    }

    fn run(&mut self, ops: &[Op], mut x: Act, mode: BnMode, mut tape: Option<&mut Vec<Tape>>) -> Act {
        for op in ops {
            x = self.op(op, x, mode, tape.as_deref_mut());
        }
        x
    }

    fn op(&mut self, op: &Op, x: Act, mode: BnMode, tape: Option<&mut Vec<Tape>>) -> Act {
        match *op {
            Op::Conv {
                layer,
                kernel,
                stride,
                padding,
            } => {
                let Act::Map(x) = x else { unreachable!("validated topology") };
                let in_dim = x.dim();
                let (cols, oh, ow) = im2col(&x, kernel, stride, padding);
                let w = &self.weights[layer];
                let fan_in = self.arch.layers[layer].fan_in;
                let mut out = cols.dot(&w.slice(s![.., ..fan_in]).t());
                if self.arch.layers[layer].has_bias {
                    out += &w.column(fan_in);
                }
                let o = w.nrows();
                let b = in_dim.0;
                let mut y = Array4::<f32>::zeros((b, o, oh, ow));
                {
                    let ys = y.as_slice_mut().expect("standard layout");
                    let os = out.as_slice().expect("standard layout");
                    for bi in 0..b {
                        for p in 0..oh * ow {
                            let row = (bi * oh * ow + p) * o;
                            for oc in 0..o {
                                ys[(bi * o + oc) * oh * ow + p] = os[row + oc];
                            }
                        }
                    }
                }
                if let Some(t) = tape {
                    t.push(Tape::Conv {
                        layer,
                        cols,
                        in_dim,
                        out_hw: (oh, ow),
                        kernel,
                        stride,
                        padding,
                    });
                }
                Act::Map(y)
            }
            Op::BatchNorm { layer } => self.batchnorm(layer, x, mode, tape),
            Op::Relu => {
                let mut y = x;
                y.as_slice_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                if let Some(t) = tape {
                    t.push(Tape::Relu { out: y.clone() });
                }
                y
            }
            Op::MaxPool { size } => {
                let Act::Map(x) = x else { unreachable!("validated topology") };
                let (b, c, h, w) = x.dim();
                let (oh, ow) = (h / size, w / size);
                let xs = x.as_slice().expect("standard layout");
                let mut y = Array4::<f32>::zeros((b, c, oh, ow));
                let mut argmax = Vec::with_capacity(b * c * oh * ow);
                {
                    let ys = y.as_slice_mut().expect("standard layout");
                    for bc in 0..b * c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = f32::NEG_INFINITY;
                                let mut arg = 0;
                                for dy in 0..size {
                                    for dx in 0..size {
                                        let idx = bc * h * w + (oy * size + dy) * w + ox * size + dx;
                                        if xs[idx] > best {
                                            best = xs[idx];
                                            arg = idx;
                                        }
                                    }
                                }
                                ys[(bc * oh + oy) * ow + ox] = best;
                                argmax.push(arg);
                            }
                        }
                    }
                }
                if let Some(t) = tape {
                    t.push(Tape::MaxPool {
                        argmax,
                        in_dim: (b, c, h, w),
                    });
                }
                Act::Map(y)
            }
            Op::GlobalAvgPool => {
                let Act::Map(x) = x else { unreachable!("validated topology") };
                let (b, c, h, w) = x.dim();
                let xs = x.as_slice().expect("standard layout");
                let y = Array2::from_shape_fn((b, c), |(bi, ci)| {
                    let base = (bi * c + ci) * h * w;
                    xs[base..base + h * w].iter().sum::<f32>() / (h * w) as f32
                });
                if let Some(t) = tape {
                    t.push(Tape::Gap { in_dim: (b, c, h, w) });
                }
                Act::Flat(y)
            }
            Op::Flatten => {
                let in_dim = match &x {
                    Act::Map(a) => Some(a.dim()),
                    Act::Flat(_) => None,
                };
                if let Some(t) = tape {
                    t.push(Tape::Flatten { in_dim });
                }
                Act::Flat(x.into_flat())
            }
            Op::Linear { layer } => {
                let Act::Flat(x) = x else { unreachable!("validated topology") };
                let w = &self.weights[layer];
                let fan_in = self.arch.layers[layer].fan_in;
                let mut y = x.dot(&w.slice(s![.., ..fan_in]).t());
                if self.arch.layers[layer].has_bias {
                    y += &w.column(fan_in);
                }
                if let Some(t) = tape {
                    t.push(Tape::Linear { layer, input: x });
                }
                Act::Flat(y)
            }
            Op::Residual {
                ref body,
                ref shortcut,
            } => {
                let mut body_tape = tape.is_some().then(Vec::new);
                let mut sc_tape = tape.is_some().then(Vec::new);
                let a = self.run(body, x.clone(), mode, body_tape.as_mut());
                let b = self.run(shortcut, x, mode, sc_tape.as_mut());
                let mut y = a;
                y.as_slice_mut().iter_mut().zip(b.as_slice()).for_each(|(u, v)| *u += v);
                if let Some(t) = tape {
                    t.push(Tape::Residual {
                        body: body_tape.unwrap_or_default(),
                        shortcut: sc_tape.unwrap_or_default(),
                    });
                }
                y
            }
        }
    }

    fn batchnorm(&mut self, layer: usize, x: Act, mode: BnMode, tape: Option<&mut Vec<Tape>>) -> Act {
        let (b, c, inner) = x.dims();
        let n = (b * inner) as f64;
        let xs = x.as_slice();
        let gamma: Vec<f32> = self.weights[layer].row(0).to_vec();
        let beta: Vec<f32> = self.weights[layer].row(1).to_vec();
        let (mean, var): (Vec<f32>, Vec<f32>) = match mode {
            BnMode::Eval => {
                let st = self.stats[layer].as_ref().expect("batchnorm stats");
                (st.mean.clone(), st.var.clone())
            }
            BnMode::Train | BnMode::Collect => {
                let mut mean = vec![0.0f64; c];
                let mut sq = vec![0.0f64; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * inner;
                        for &v in &xs[base..base + inner] {
                            mean[ci] += f64::from(v);
                            sq[ci] += f64::from(v) * f64::from(v);
                        }
                    }
                }
                if mode == BnMode::Collect {
                    let m = self.moments[layer].get_or_insert_with(|| Moments {
                        n: 0.0,
                        sum: vec![0.0; c],
                        sumsq: vec![0.0; c],
                    });
                    m.n += n;
                    for ci in 0..c {
                        m.sum[ci] += mean[ci];
                        m.sumsq[ci] += sq[ci];
                    }
                }
                let mut var = vec![0.0f32; c];
                let mut mu = vec![0.0f32; c];
                for ci in 0..c {
                    let m = mean[ci] / n;
                    mu[ci] = m as f32;
                    var[ci] = (sq[ci] / n - m * m).max(0.0) as f32;
                }
                if mode == BnMode::Train {
                    let st = self.stats[layer].as_mut().expect("batchnorm stats");
                    let unbias = if n > 1.0 { (n / (n - 1.0)) as f32 } else { 1.0 };
                    for ci in 0..c {
                        st.mean[ci] = (1.0 - BN_MOMENTUM) * st.mean[ci] + BN_MOMENTUM * mu[ci];
                        st.var[ci] = (1.0 - BN_MOMENTUM) * st.var[ci] + BN_MOMENTUM * var[ci] * unbias;
                    }
                }
                (mu, var)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = x.zeros_like();
        let mut y = x.zeros_like();
        {
            let hs = xhat.as_slice_mut();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * inner;
                    for i in base..base + inner {
                        hs[i] = (xs[i] - mean[ci]) * inv_std[ci];
                    }
                }
            }
            let ys = y.as_slice_mut();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * inner;
                    for i in base..base + inner {
                        ys[i] = gamma[ci] * hs[i] + beta[ci];
                    }
                }
            }
        }
        if let Some(t) = tape {
            t.push(Tape::Bn { layer, xhat, inv_std });
        }
        y
    }

    fn back(&self, tape: Vec<Tape>, mut dy: Act, grads: &mut [Array2<f32>]) -> Act {
        for entry in tape.into_iter().rev() {
            dy = self.back_op(entry, dy, grads);
        }
        dy
    }

    fn back_op(&self, entry: Tape, dy: Act, grads: &mut [Array2<f32>]) -> Act {
        match entry {
            Tape::Conv {
                layer,
                cols,
                in_dim,
                out_hw,
                kernel,
                stride,
                padding,
            } => {
                let Act::Map(dy) = dy else { unreachable!() };
                let (b, o, oh, ow) = dy.dim();
                let dys = dy.as_slice().expect("standard layout");
                let mut dmat = Array2::<f32>::zeros((b * oh * ow, o));
                {
                    let ds = dmat.as_slice_mut().expect("standard layout");
                    for bi in 0..b {
                        for oc in 0..o {
                            for p in 0..oh * ow {
                                ds[(bi * oh * ow + p) * o + oc] = dys[(bi * o + oc) * oh * ow + p];
                            }
                        }
                    }
                }
                let spec = &self.arch.layers[layer];
                let fan_in = spec.fan_in;
                let g = &mut grads[layer];
                g.slice_mut(s![.., ..fan_in]).scaled_add(1.0, &dmat.t().dot(&cols));
                if spec.has_bias {
                    let db = dmat.sum_axis(ndarray::Axis(0));
                    g.column_mut(fan_in).scaled_add(1.0, &db);
                }
                let dcols = dmat.dot(&self.weights[layer].slice(s![.., ..fan_in]));
                Act::Map(col2im(&dcols, in_dim, out_hw, kernel, stride, padding))
            }
            Tape::Bn { layer, xhat, inv_std } => {
                let (b, c, inner) = xhat.dims();
                let n = (b * inner) as f32;
                let gamma = self.weights[layer].row(0).to_vec();
                let hs = xhat.as_slice();
                let ds = dy.as_slice();
                let mut sum_dy = vec![0.0f32; c];
                let mut sum_dyx = vec![0.0f32; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * inner;
                        for i in base..base + inner {
                            sum_dy[ci] += ds[i];
                            sum_dyx[ci] += ds[i] * hs[i];
                        }
                    }
                }
                let g = &mut grads[layer];
                for ci in 0..c {
                    g[[0, ci]] += sum_dyx[ci];
                    g[[1, ci]] += sum_dy[ci];
                }
                let mut dx = dy.zeros_like();
                let xs = dx.as_slice_mut();
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * inner;
                        let k = gamma[ci] * inv_std[ci] / n;
                        for i in base..base + inner {
                            xs[i] = k * (n * ds[i] - sum_dy[ci] - hs[i] * sum_dyx[ci]);
                        }
                    }
                }
                dx
            }
            Tape::Relu { out } => {
                let mut dx = dy;
                dx.as_slice_mut()
                    .iter_mut()
                    .zip(out.as_slice())
                    .for_each(|(d, &o)| {
                        if o <= 0.0 {
                            *d = 0.0
                        }
                    });
                dx
            }
            Tape::MaxPool { argmax, in_dim } => {
                let mut dx = Array4::<f32>::zeros(in_dim);
                let xs = dx.as_slice_mut().expect("standard layout");
                for (&idx, &g) in argmax.iter().zip(dy.as_slice()) {
                    xs[idx] += g;
                }
                Act::Map(dx)
            }
            Tape::Gap { in_dim } => {
                let (b, c, h, w) = in_dim;
                let Act::Flat(dy) = dy else { unreachable!() };
                let scale = 1.0 / (h * w) as f32;
                let dx = Array4::from_shape_fn(in_dim, |(bi, ci, _, _)| dy[[bi, ci]] * scale);
                debug_assert_eq!(dx.dim(), (b, c, h, w));
                Act::Map(dx)
            }
            Tape::Flatten { in_dim } => match in_dim {
                Some(d) => {
                    let flat = dy.into_flat();
                    Act::Map(flat.into_shape_with_order(d).expect("contiguous"))
                }
                None => dy,
            },
            Tape::Linear { layer, input } => {
                let Act::Flat(dy) = dy else { unreachable!() };
                let spec = &self.arch.layers[layer];
                let fan_in = spec.fan_in;
                let g = &mut grads[layer];
                g.slice_mut(s![.., ..fan_in]).scaled_add(1.0, &dy.t().dot(&input));
                if spec.has_bias {
                    g.column_mut(fan_in).scaled_add(1.0, &dy.sum_axis(ndarray::Axis(0)));
                }
                Act::Flat(dy.dot(&self.weights[layer].slice(s![.., ..fan_in])))
            }
            Tape::Residual { body, shortcut } => {
                let da = self.back(body, dy.clone(), grads);
                let db = self.back(shortcut, dy, grads);
                let mut dx = da;
                dx.as_slice_mut().iter_mut().zip(db.as_slice()).for_each(|(u, v)| *u += v);
                dx
            }
        }
    }

    /// Clears accumulated moments before a [`BnMode::Collect`] sweep.
    pub fn begin_collect(&mut self) {
        self.moments.iter_mut().for_each(|m| *m = None);
    }

    /// Replaces running statistics with the pooled moments gathered since
    /// [`Self::begin_collect`]: mean, and unbiased variance.
    pub fn finish_collect(&mut self) -> Result<()> {
        for (layer, m) in self.moments.iter_mut().enumerate() {
            let Some(m) = m.take() else { continue };
            let st = self.stats[layer].as_mut().expect("batchnorm stats");
            for ci in 0..st.mean.len() {
                let mean = m.sum[ci] / m.n;
                let denom = if m.n > 1.0 { m.n - 1.0 } else { 1.0 };
                st.mean[ci] = mean as f32;
                st.var[ci] = ((m.sumsq[ci] - m.n * mean * mean) / denom).max(0.0) as f32;
            }
        }
        Ok(())
    }

    /// Output shape of the topology.
    pub fn output_shape(&self) -> Result<FlowShape> {
        self.arch.output_shape()
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Array2<f32>, labels: &[usize]) -> (f32, Array2<f32>) {
    let (b, k) = logits.dim();
    let mut grad = Array2::<f32>::zeros((b, k));
    let mut loss = 0.0f64;
    for i in 0..b {
        let row = logits.row(i);
        let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let z: f32 = row.iter().map(|v| (v - mx).exp()).sum();
        let lse = mx + z.ln();
        loss += f64::from(lse - row[labels[i]]);
        for j in 0..k {
            grad[[i, j]] = ((row[j] - lse).exp() - if j == labels[i] { 1.0 } else { 0.0 }) / b as f32;
        }
    }
    ((loss / b as f64) as f32, grad)
}

/// Eval-mode accuracy on `data`.
pub fn accuracy(params: &NetParams, data: &ImageSet) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let mut p = params.clone();
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, y) = data.batch(chunk);
        let logits = p.forward(x, BnMode::Eval)?;
        for (i, &label) in y.iter().enumerate() {
            let row = logits.row(i);
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc })
                .0;
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f32 / data.len() as f32)
}

/// Checkpoint accuracy; the checkpoint is not modified.
pub fn checkpoint_accuracy(ckpt: &ModelCheckpoint, data: &ImageSet) -> Result<f32> {
    accuracy(&NetParams::from_checkpoint(ckpt)?, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss_of(p: &NetParams, x: &Array4<f32>, y: &[usize]) -> f64 {
        let mut q = p.clone();
        let logits = q.forward(x.clone(), BnMode::Train).unwrap();
        cross_entropy(&logits, y).0 as f64
    }

    /// Directional finite-difference check of the full backward pass.
    fn check_grads(arch: ArchitectureDescriptor, seed: u64) {
        let arch = Arc::new(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = NetParams::init(arch.clone(), InitScheme::KaimingNormal, &mut rng).unwrap();
        for w in &mut p.weights {
            w.mapv_inplace(|v| v + rng.random_range(-0.05..0.05));
        }
        let [c, h, w] = arch.input_shape;
        let x = Array4::from_shape_fn((4, c, h, w), |_| rng.random_range(-1.0..1.0f32));
        let classes = arch.output_dim().unwrap();
        let y: Vec<usize> = (0..4).map(|i| i % classes).collect();
        let mut q = p.clone();
        let (logits, tape) = q.forward_train(x.clone()).unwrap();
        let (_, dl) = cross_entropy(&logits, &y);
        let grads = p.backward(tape, dl);
        let dirs: Vec<Array2<f32>> =
            p.weights.iter().map(|w| Array2::from_shape_fn(w.dim(), |_| rng.random_range(-1.0..1.0f32))).collect();
        let analytic: f64 = grads
            .iter()
            .zip(&dirs)
            .map(|(g, d)| g.iter().zip(d).map(|(a, b)| f64::from(a * b)).sum::<f64>())
            .sum();
        let h = 3e-4f32;
        let shifted = |sign: f32| {
            let mut q = p.clone();
            for (w, d) in q.weights.iter_mut().zip(&dirs) {
                w.scaled_add(sign * h, d);
            }
            loss_of(&q, &x, &y)
        };
        let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * f64::from(h));
        let rel = (analytic - fd).abs() / fd.abs().max(1e-3);
        assert!(rel < 2e-2, "analytic {analytic} vs fd {fd}");
    }

    #[test]
    fn mlp_gradients() {
        check_grads(arch::mlp(&[5, 7, 3]).unwrap(), 1);
    }

    #[test]
    fn mlp_bn_gradients() {
        check_grads(arch::mlp_bn(&[5, 6, 3]).unwrap(), 2);
    }

    #[test]
    fn small_cnn_gradients() {
        check_grads(arch::small_cnn([1, 20, 20], 4).unwrap(), 3);
    }

    #[test]
    fn mini_resnet_gradients() {
        check_grads(arch::mini_resnet([2, 6, 6], [3, 4], 3).unwrap(), 4);
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let a = Arc::new(arch::mini_resnet([1, 8, 8], [3, 4], 3).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = NetParams::init(a, InitScheme::KaimingUniform, &mut rng).unwrap();
        let x = Array4::from_shape_fn((3, 1, 8, 8), |_| rng.random_range(0.0..1.0f32));
        let _ = p.forward(x.clone(), BnMode::Train).unwrap();
        let c = p.to_checkpoint(CheckpointMeta::new("t", 1, 0));
        let mut q = NetParams::from_checkpoint(&c).unwrap();
        assert_eq!(p.forward(x.clone(), BnMode::Eval).unwrap(), q.forward(x, BnMode::Eval).unwrap());
    }
}
