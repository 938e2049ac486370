//! Sequence autoencoder over weight tokens: encoder, decoder and contrastive
//! projection head, with hand-written backpropagation.
//!
//! Both stacks are pre-norm transformers without a causal mask. The
//! positional embedding is the sum of three learned tables indexed by the
//! triple `[n, l, k]`, each index taken modulo its table size. The
//! projection head is a per-token two-layer MLP; its outputs are mean-pooled
//! over a window before entering the contrastive loss.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, NormalizationMode};
use crate::optim::{AdamW, LrSchedule};

pub const CONFIG_FILE: &str = "sane.json";
pub const TENSOR_FILE: &str = "sane.bin";
const LN_EPS: f32 = 1e-5;

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SaneConfig {
    pub d_t: usize,
    pub window_size: usize,
    pub d_model: usize,
    pub d_lat: usize,
    pub d_proj: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    /// Rows of the `l` and `k` position tables.
    pub max_layers: usize,
    pub max_tokens_per_layer: usize,
    pub gamma: f64,
    pub ntxent_temperature: f64,
    pub lr: f32,
    pub weight_decay: f32,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub aug_noise_sigma: f32,
    pub epsilon: f64,
    pub normalization: NormalizationMode,
    pub seed: u64,
}

impl Default for SaneConfig {
    fn default() -> Self {
        SaneConfig::cnn_reference()
    }
}

impl SaneConfig {
    /// Hyperparameters for the small-CNN track.
    pub fn cnn_reference() -> Self {
        SaneConfig {
            d_t: 289,
            window_size: 32,
            d_model: 1024,
            d_lat: 128,
            d_proj: 32,
            n_layers: 4,
            n_heads: 8,
            ffn_mult: 4,
            max_layers: 64,
            max_tokens_per_layer: 1024,
            gamma: 0.05,
            ntxent_temperature: 0.1,
            lr: 1e-4,
            weight_decay: 3e-9,
            lr_schedule: LrSchedule::WarmupCosine,
            batch_size: 32,
            epochs: 50,
            aug_noise_sigma: 0.01,
            epsilon: losses::DEFAULT_EPSILON,
            normalization: NormalizationMode::MaskedPerToken,
            seed: 0,
        }
    }

    /// Hyperparameters for the residual-network track.
    pub fn resnet_reference() -> Self {
        SaneConfig {
            d_t: 288,
            window_size: 256,
            d_model: 2048,
            n_layers: 8,
            lr: 2e-5,
            epochs: 60,
            ..SaneConfig::cnn_reference()
        }
    }

    /// Laptop-sized model used by tests and the toy pipeline.
    pub fn toy() -> Self {
        SaneConfig {
            window_size: 64,
            d_model: 64,
            d_lat: 32,
            d_proj: 16,
            n_layers: 2,
            n_heads: 4,
            ffn_mult: 2,
            max_tokens_per_layer: 256,
            lr: 1e-3,
            weight_decay: 1e-5,
            batch_size: 8,
            epochs: 20,
            ..SaneConfig::cnn_reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_t == 0 || self.window_size == 0 || self.d_model == 0 || self.d_lat == 0 {
            return bad("d_t, window_size, d_model and d_lat must be positive");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.d_proj == 0 || self.d_proj >= self.d_lat {
            return bad("d_proj must be positive and smaller than d_lat");
        }
        if self.ffn_mult == 0 || self.max_layers == 0 || self.max_tokens_per_layer == 0 {
            return bad("ffn_mult and position table sizes must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.ntxent_temperature > 0.0) {
            return bad("ntxent_temperature must be positive");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.aug_noise_sigma < 0.0 {
            return bad("lr must be positive; weight_decay and aug_noise_sigma nonnegative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if self.gamma > 0.0 && self.batch_size < 2 {
            return bad("contrastive training needs batch_size >= 2");
        }
        Ok(())
    }
}

/// One latent vector per token, with the positions carried through.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub z: Array2<f32>,
    pub positions: Array2<usize>,
}

/// A training window. Rows without any signal must form a suffix.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenWindow {
    pub tokens: Array2<f32>,
    pub positions: Array2<usize>,
    pub mask: Array2<u8>,
}

impl TokenWindow {
    /// Number of leading rows that carry signal.
    pub fn signal_rows(&self) -> Result<usize> {
        let mut n = 0;
        let mut ended = false;
        for row in self.mask.rows() {
            let live = row.iter().any(|&m| m != 0);
            if live && ended {
                return Err(Error::Structure("signal token after padding row in window".into()));
            }
            if live {
                n += 1;
            } else {
                ended = true;
            }
        }
        Ok(n)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub rec: f32,
    pub contrastive: f32,
    pub total: f32,
}

#[derive(Clone, Copy, Debug)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Ln {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln1: Ln,
    qkv: Lin,
    proj: Lin,
    ln2: Ln,
    ff1: Lin,
    ff2: Lin,
}

#[derive(Clone, Debug)]
struct Stack {
    inp: Lin,
    pos: [usize; 3],
    blocks: Vec<Block>,
    ln_f: Ln,
    out: Lin,
}

#[derive(Clone, Debug)]
struct Layout {
    enc: Stack,
    dec: Stack,
    head1: Lin,
    head2: Lin,
}

struct Builder {
    names: Vec<String>,
    params: Vec<Array2<f32>>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, name: String, a: Array2<f32>) -> usize {
        self.names.push(name);
        self.params.push(a);
        self.params.len() - 1
    }

    fn normal(&mut self, rows: usize, cols: usize, std: f32) -> Array2<f32> {
        let d = Normal::new(0.0, std).expect("finite std");
        Array2::from_shape_simple_fn((rows, cols), || d.sample(&mut self.rng))
    }

    fn lin(&mut self, name: &str, i: usize, o: usize) -> Lin {
        let w = self.normal(i, o, (1.0 / i as f32).sqrt());
        Lin {
            w: self.push(format!("{name}.w"), w),
            b: self.push(format!("{name}.b"), Array2::zeros((1, o))),
        }
    }

    fn ln(&mut self, name: &str, d: usize) -> Ln {
        Ln {
            g: self.push(format!("{name}.g"), Array2::ones((1, d))),
            b: self.push(format!("{name}.b"), Array2::zeros((1, d))),
        }
    }

    fn stack(&mut self, name: &str, c: &SaneConfig, d_in: usize, d_out: usize) -> Stack {
        let d = c.d_model;
        let inp = self.lin(&format!("{name}.in"), d_in, d);
        let tables = [c.window_size, c.max_layers, c.max_tokens_per_layer];
        let mut pos = [0; 3];
        for (i, (t, rows)) in ["pos_n", "pos_l", "pos_k"].iter().zip(tables).enumerate() {
            let a = self.normal(rows, d, 0.02);
            pos[i] = self.push(format!("{name}.{t}"), a);
        }
        let blocks = (0..c.n_layers)
            .map(|i| {
                let p = format!("{name}.block{i}");
                Block {
                    ln1: self.ln(&format!("{p}.ln1"), d),
                    qkv: self.lin(&format!("{p}.attn.qkv"), d, 3 * d),
                    proj: self.lin(&format!("{p}.attn.proj"), d, d),
                    ln2: self.ln(&format!("{p}.ln2"), d),
                    ff1: self.lin(&format!("{p}.ff1"), d, c.ffn_mult * d),
                    ff2: self.lin(&format!("{p}.ff2"), c.ffn_mult * d, d),
                }
            })
            .collect();
        Stack {
            inp,
            pos,
            blocks,
            ln_f: self.ln(&format!("{name}.ln_f"), d),
            out: self.lin(&format!("{name}.out"), d, d_out),
        }
    }
}

/// Gradient buffers matching the model's parameter list.
#[derive(Clone, Debug)]
pub struct Gradients(pub Vec<Array2<f32>>);

impl Gradients {
    pub fn norm(&self) -> f32 {
        self.0.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f32>().sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct SaneModel {
    config: SaneConfig,
    names: Vec<String>,
    params: Vec<Array2<f32>>,
    layout: Layout,
}

// ---- forward caches ----

struct LnCache {
    xhat: Array2<f32>,
    rstd: Array1<f32>,
}

struct AttnCache {
    qkv: Array2<f32>,
    probs: Vec<Array2<f32>>,
    concat: Array2<f32>,
}

struct BlockCache {
    h1: Array2<f32>,
    ln1: LnCache,
    attn: AttnCache,
    h2: Array2<f32>,
    ln2: LnCache,
    pre: Array2<f32>,
    act: Array2<f32>,
}

struct StackCache {
    x: Array2<f32>,
    rows: Vec<[usize; 3]>,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    y: Array2<f32>,
}

struct HeadCache {
    z: Array2<f32>,
    pre: Array2<f32>,
    act: Array2<f32>,
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl SaneModel {
    pub fn new(config: SaneConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            names: Vec::new(),
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let enc = b.stack("enc", &config, config.d_t, config.d_lat);
        let dec = b.stack("dec", &config, config.d_lat, config.d_t);
        let head1 = b.lin("head.fc1", config.d_lat, config.d_lat);
        let head2 = b.lin("head.fc2", config.d_lat, config.d_proj);
        Ok(SaneModel {
            config,
            names: b.names,
            params: b.params,
            layout: Layout { enc, dec, head1, head2 },
        })
    }

    pub fn config(&self) -> &SaneConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Parameter tensors in a fixed order, with their names.
    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Array2<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn params_mut(&mut self) -> &mut [Array2<f32>] {
        &mut self.params
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients(self.params.iter().map(|p| Array2::zeros(p.dim())).collect())
    }

    /// Bit-level equality of all parameters and the config.
    pub fn bit_eq(&self, other: &SaneModel) -> bool {
        self.config == other.config
            && self.names == other.names
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.dim() == b.dim() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    fn check_window(&self, rows: usize, width: usize, expected: usize, positions: &ArrayView2<usize>) -> Result<()> {
        if width != expected {
            return Err(Error::shape(format!("width {expected}"), format!("width {width}")));
        }
        if positions.dim() != (rows, 3) {
            return Err(Error::shape(format!("({rows}, 3) positions"), format!("{:?}", positions.dim())));
        }
        Ok(())
    }

    /// Encodes one window. Inference is deterministic.
    pub fn encode(&self, tokens: ArrayView2<f32>, positions: ArrayView2<usize>) -> Result<LatentSequence> {
        self.check_window(tokens.nrows(), tokens.ncols(), self.config.d_t, &positions)?;
        if tokens.nrows() > self.config.window_size {
            return Err(Error::shape(
                format!("at most {} tokens", self.config.window_size),
                format!("{} tokens", tokens.nrows()),
            ));
        }
        let (z, _) = self.stack_fwd(&self.layout.enc, tokens, positions);
        Ok(LatentSequence {
            z,
            positions: positions.to_owned(),
        })
    }

    /// Maps latents back to token space.
    pub fn decode(&self, lat: &LatentSequence) -> Result<Array2<f32>> {
        self.check_window(lat.z.nrows(), lat.z.ncols(), self.config.d_lat, &lat.positions.view())?;
        Ok(self.stack_fwd(&self.layout.dec, lat.z.view(), lat.positions.view()).0)
    }

    /// Per-token projection into the contrastive space.
    pub fn project(&self, lat: &LatentSequence) -> Result<Array2<f32>> {
        if lat.z.ncols() != self.config.d_lat {
            return Err(Error::shape(format!("width {}", self.config.d_lat), format!("width {}", lat.z.ncols())));
        }
        Ok(self.head_fwd(lat.z.clone()).0)
    }

    /// Encodes a sequence of any length in consecutive windows.
    pub fn encode_sequence(&self, tokens: ArrayView2<f32>, positions: ArrayView2<usize>) -> Result<LatentSequence> {
        self.check_window(tokens.nrows(), tokens.ncols(), self.config.d_t, &positions)?;
        let n = tokens.nrows();
        let mut z = Array2::zeros((n, self.config.d_lat));
        for start in (0..n).step_by(self.config.window_size) {
            let end = (start + self.config.window_size).min(n);
            let lat = self.encode(tokens.slice(s![start..end, ..]), positions.slice(s![start..end, ..]))?;
            z.slice_mut(s![start..end, ..]).assign(&lat.z);
        }
        Ok(LatentSequence {
            z,
            positions: positions.to_owned(),
        })
    }

    /// Decodes a sequence of any length in consecutive windows.
    pub fn decode_sequence(&self, lat: &LatentSequence) -> Result<Array2<f32>> {
        self.check_window(lat.z.nrows(), lat.z.ncols(), self.config.d_lat, &lat.positions.view())?;
        let n = lat.z.nrows();
        let mut out = Array2::zeros((n, self.config.d_t));
        for start in (0..n).step_by(self.config.window_size) {
            let end = (start + self.config.window_size).min(n);
            let w = LatentSequence {
                z: lat.z.slice(s![start..end, ..]).to_owned(),
                positions: lat.positions.slice(s![start..end, ..]).to_owned(),
            };
            out.slice_mut(s![start..end, ..]).assign(&self.decode(&w)?);
        }
        Ok(out)
    }

    /// `decode(encode(tokens))` over a whole sequence.
    pub fn reconstruct(&self, tokens: ArrayView2<f32>, positions: ArrayView2<usize>) -> Result<Array2<f32>> {
        self.decode_sequence(&self.encode_sequence(tokens, positions)?)
    }

    /// Mean reconstruction loss over windows, clean view only.
    pub fn eval_loss(&self, batch: &[TokenWindow]) -> Result<f32> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0f64;
        for w in batch {
            let n = w.signal_rows()?;
            let x = w.tokens.slice(s![..n, ..]);
            let pred = self.reconstruct(x, w.positions.slice(s![..n, ..]))?;
            let l = losses::normalized_reconstruction_loss(
                x,
                pred.view(),
                w.mask.slice(s![..n, ..]),
                self.config.normalization,
                self.config.epsilon as f32,
            )?;
            total += f64::from(l);
        }
        Ok((total / batch.len() as f64) as f32)
    }

    /// Loss parts and gradients for one batch. View `i` is the clean window,
    /// view `j` adds Gaussian noise to signal entries; both reconstruct the
    /// clean tokens. With `gamma == 0` only view `i` is computed.
    pub fn loss_and_grad<R: Rng>(&self, batch: &[TokenWindow], rng: &mut R) -> Result<(LossParts, Gradients)> {
        let c = &self.config;
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let gamma = c.gamma as f32;
        let contrastive = gamma > 0.0;
        let views = if contrastive { 2 } else { 1 };
        let noise = Normal::new(0.0, c.aug_noise_sigma.max(0.0)).expect("finite sigma");
        let mut grads = self.zero_grads();
        let scale_rec = (1.0 - gamma) / (batch.len() * views) as f32;
        let mut rec_sum = 0.0f64;
        let mut pooled = [
            Array2::<f32>::zeros((batch.len(), c.d_proj)),
            Array2::<f32>::zeros((batch.len(), c.d_proj)),
        ];
        let mut tapes = Vec::with_capacity(batch.len() * views);
        for (b, w) in batch.iter().enumerate() {
            let n = w.signal_rows()?;
            if n == 0 {
                return Err(Error::DegenerateToken { row: 0 });
            }
            if n > c.window_size {
                return Err(Error::shape(format!("at most {} tokens", c.window_size), format!("{n} tokens")));
            }
            let target = w.tokens.slice(s![..n, ..]);
            let mask = w.mask.slice(s![..n, ..]);
            let pos = w.positions.slice(s![..n, ..]);
            self.check_window(n, target.ncols(), c.d_t, &pos)?;
            for v in 0..views {
                let mut x = target.to_owned();
                if v == 1 && c.aug_noise_sigma > 0.0 {
                    for (xv, &m) in x.iter_mut().zip(mask.iter()) {
                        if m != 0 {
                            *xv += noise.sample(rng);
                        }
                    }
                }
                let (z, enc) = self.stack_fwd(&self.layout.enc, x.view(), pos);
                let (pred, dec) = self.stack_fwd(&self.layout.dec, z.view(), pos);
                let (l, dpred) = losses::normalized_reconstruction_loss_grad(
                    target,
                    pred.view(),
                    mask,
                    c.normalization,
                    c.epsilon as f32,
                )?;
                rec_sum += f64::from(l);
                let head = if contrastive {
                    let (p, hc) = self.head_fwd(z);
                    pooled[v].row_mut(b).assign(&p.mean_axis(Axis(0)).expect("nonempty window"));
                    Some(hc)
                } else {
                    None
                };
                tapes.push((enc, dec, dpred * scale_rec, head, n));
            }
        }
        let rec = (rec_sum / (batch.len() * views) as f64) as f32;
        let (l_c, dpool) = if contrastive {
            let nt = losses::ntxent_loss_grad(pooled[0].view(), pooled[1].view(), c.ntxent_temperature as f32)?;
            (nt.loss, Some([nt.grad_i * gamma, nt.grad_j * gamma]))
        } else {
            (0.0, None)
        };
        for (t, (enc, dec, dpred, head, n)) in tapes.into_iter().enumerate() {
            let (b, v) = (t / views, t % views);
            let mut dz = self.stack_bwd(&self.layout.dec, dec, dpred, &mut grads);
            if let (Some(hc), Some(dp)) = (head, dpool.as_ref()) {
                let row = dp[v].row(b).mapv(|g| g / n as f32);
                let dp_tokens = Array2::from_shape_fn((n, c.d_proj), |(_, j)| row[j]);
                dz += &self.head_bwd(hc, dp_tokens, &mut grads);
            }
            self.stack_bwd(&self.layout.enc, enc, dz, &mut grads);
        }
        let total = losses::combine(rec, l_c, gamma)?;
        Ok((
            LossParts {
                rec,
                contrastive: l_c,
                total,
            },
            grads,
        ))
    }

    /// One AdamW step with learning rate `lr`.
    pub fn apply(&mut self, opt: &mut AdamW, grads: &Gradients, lr: f32) {
        opt.begin_step();
        for (slot, (p, g)) in self.params.iter_mut().zip(&grads.0).enumerate() {
            opt.update(
                slot,
                p.as_slice_mut().expect("standard layout"),
                g.as_slice().expect("standard layout"),
                lr,
            );
        }
    }

    // ---- building blocks ----

    fn lin_fwd(&self, l: Lin, x: &ArrayView2<f32>) -> Array2<f32> {
        x.dot(&self.params[l.w]) + &self.params[l.b].row(0)
    }

    fn lin_bwd(&self, l: Lin, x: &Array2<f32>, dy: &Array2<f32>, g: &mut Gradients) -> Array2<f32> {
        g.0[l.w] += &x.t().dot(dy);
        g.0[l.b].row_mut(0).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        dy.dot(&self.params[l.w].t())
    }

    fn ln_fwd(&self, l: Ln, x: &Array2<f32>) -> (Array2<f32>, LnCache) {
        let d = x.ncols() as f32;
        let mut xhat = x.clone();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mu = row.sum() / d;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / d;
            *r = 1.0 / (var + LN_EPS).sqrt();
            let rr = *r;
            row.mapv_inplace(|v| (v - mu) * rr);
        }
        let y = &xhat * &self.params[l.g].row(0) + &self.params[l.b].row(0);
        (y, LnCache { xhat, rstd })
    }

    fn ln_bwd(&self, l: Ln, c: LnCache, dy: &Array2<f32>, g: &mut Gradients) -> Array2<f32> {
        g.0[l.g].row_mut(0).scaled_add(1.0, &(dy * &c.xhat).sum_axis(Axis(0)));
        g.0[l.b].row_mut(0).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        let mut dxhat = dy * &self.params[l.g].row(0);
        let d = dy.ncols() as f32;
        for ((mut row, xh), &r) in dxhat.rows_mut().into_iter().zip(c.xhat.rows()).zip(c.rstd.iter()) {
            let m1 = row.sum() / d;
            let m2 = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f32>() / d;
            row.zip_mut_with(&xh, |v, &x| *v = r * (*v - m1 - x * m2));
        }
        dxhat
    }

    fn attn_fwd(&self, b: &Block, h: &Array2<f32>) -> (Array2<f32>, AttnCache) {
        let d = self.config.d_model;
        let nh = self.config.n_heads;
        let dh = d / nh;
        let scale = 1.0 / (dh as f32).sqrt();
        let qkv = self.lin_fwd(b.qkv, &h.view());
        let n = h.nrows();
        let mut concat = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(nh);
        for hh in 0..nh {
            let q = qkv.slice(s![.., hh * dh..(hh + 1) * dh]);
            let k = qkv.slice(s![.., d + hh * dh..d + (hh + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + hh * dh..2 * d + (hh + 1) * dh]);
            let mut p = q.dot(&k.t()) * scale;
            for mut row in p.rows_mut() {
                let m = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|x| (x - m).exp());
                let s = row.sum();
                row.mapv_inplace(|x| x / s);
            }
            concat.slice_mut(s![.., hh * dh..(hh + 1) * dh]).assign(&p.dot(&v));
            probs.push(p);
        }
        let out = self.lin_fwd(b.proj, &concat.view());
        (out, AttnCache { qkv, probs, concat })
    }

    fn attn_bwd(&self, b: &Block, h: &Array2<f32>, c: AttnCache, dy: &Array2<f32>, g: &mut Gradients) -> Array2<f32> {
        let d = self.config.d_model;
        let nh = self.config.n_heads;
        let dh = d / nh;
        let scale = 1.0 / (dh as f32).sqrt();
        let dconcat = self.lin_bwd(b.proj, &c.concat, dy, g);
        let mut dqkv = Array2::zeros(c.qkv.dim());
        for (hh, p) in c.probs.iter().enumerate() {
            let q = c.qkv.slice(s![.., hh * dh..(hh + 1) * dh]);
            let k = c.qkv.slice(s![.., d + hh * dh..d + (hh + 1) * dh]);
            let v = c.qkv.slice(s![.., 2 * d + hh * dh..2 * d + (hh + 1) * dh]);
            let dout = dconcat.slice(s![.., hh * dh..(hh + 1) * dh]);
            let dv = p.t().dot(&dout);
            let dp = dout.dot(&v.t());
            let mut ds = &dp * p;
            for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let tot = row.sum();
                row.zip_mut_with(&prow, |x, &pp| *x = (*x - pp * tot) * scale);
            }
            dqkv.slice_mut(s![.., hh * dh..(hh + 1) * dh]).assign(&ds.dot(&k));
            dqkv.slice_mut(s![.., d + hh * dh..d + (hh + 1) * dh]).assign(&ds.t().dot(&q));
            dqkv.slice_mut(s![.., 2 * d + hh * dh..2 * d + (hh + 1) * dh]).assign(&dv);
        }
        self.lin_bwd(b.qkv, h, &dqkv, g)
    }

    fn table_rows(&self, s: &Stack, positions: ArrayView2<usize>) -> Vec<[usize; 3]> {
        positions
            .rows()
            .into_iter()
            .map(|p| std::array::from_fn(|i| p[i] % self.params[s.pos[i]].nrows()))
            .collect()
    }

    fn stack_fwd(&self, st: &Stack, x: ArrayView2<f32>, positions: ArrayView2<usize>) -> (Array2<f32>, StackCache) {
        let rows = self.table_rows(st, positions);
        let mut h = self.lin_fwd(st.inp, &x);
        for (mut hr, r) in h.rows_mut().into_iter().zip(&rows) {
            for i in 0..3 {
                hr += &self.params[st.pos[i]].row(r[i]);
            }
        }
        let mut blocks = Vec::with_capacity(st.blocks.len());
        for b in &st.blocks {
            let (h1, ln1) = self.ln_fwd(b.ln1, &h);
            let (a, attn) = self.attn_fwd(b, &h1);
            h += &a;
            let (h2, ln2) = self.ln_fwd(b.ln2, &h);
            let pre = self.lin_fwd(b.ff1, &h2.view());
            let act = pre.mapv(gelu);
            h += &self.lin_fwd(b.ff2, &act.view());
            blocks.push(BlockCache {
                h1,
                ln1,
                attn,
                h2,
                ln2,
                pre,
                act,
            });
        }
        let (y, lnf) = self.ln_fwd(st.ln_f, &h);
        let out = self.lin_fwd(st.out, &y.view());
        (
            out,
            StackCache {
                x: x.to_owned(),
                rows,
                blocks,
                lnf,
                y,
            },
        )
    }

    fn stack_bwd(&self, st: &Stack, c: StackCache, dout: Array2<f32>, g: &mut Gradients) -> Array2<f32> {
        let dy = self.lin_bwd(st.out, &c.y, &dout, g);
        let mut dh = self.ln_bwd(st.ln_f, c.lnf, &dy, g);
        for (b, bc) in st.blocks.iter().zip(c.blocks).rev() {
            let dact = self.lin_bwd(b.ff2, &bc.act, &dh, g);
            let dpre = Array2::from_shape_fn(dact.dim(), |ij| dact[ij] * gelu_grad(bc.pre[ij]));
            let dh2 = self.lin_bwd(b.ff1, &bc.h2, &dpre, g);
            dh += &self.ln_bwd(b.ln2, bc.ln2, &dh2, g);
            let dh1 = self.attn_bwd(b, &bc.h1, bc.attn, &dh, g);
            dh += &self.ln_bwd(b.ln1, bc.ln1, &dh1, g);
        }
        for (dr, r) in dh.rows().into_iter().zip(&c.rows) {
            for i in 0..3 {
                g.0[st.pos[i]].row_mut(r[i]).scaled_add(1.0, &dr);
            }
        }
        self.lin_bwd(st.inp, &c.x, &dh, g)
    }

    fn head_fwd(&self, z: Array2<f32>) -> (Array2<f32>, HeadCache) {
        let pre = self.lin_fwd(self.layout.head1, &z.view());
        let act = pre.mapv(gelu);
        let p = self.lin_fwd(self.layout.head2, &act.view());
        (p, HeadCache { z, pre, act })
    }

    fn head_bwd(&self, c: HeadCache, dp: Array2<f32>, g: &mut Gradients) -> Array2<f32> {
        let dact = self.lin_bwd(self.layout.head2, &c.act, &dp, g);
        let dpre = Array2::from_shape_fn(dact.dim(), |ij| dact[ij] * gelu_grad(c.pre[ij]));
        self.lin_bwd(self.layout.head1, &c.z, &dpre, g)
    }

    // ---- persistence ----

    /// Writes `sane.json` (config and tensor index) and `sane.bin`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
        let mut bytes = Vec::with_capacity(self.num_params() * 4);
        let mut tensors = Vec::new();
        for (name, p) in self.named_params() {
            tensors.push(TensorIndex {
                name: name.to_string(),
                offset: bytes.len() as u64,
                shape: [p.nrows(), p.ncols()],
            });
            for v in p.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let file = SaneFile {
            format_version: 1,
            config: self.config.clone(),
            num_params: self.num_params(),
            tensors,
        };
        let json = serde_json::to_string_pretty(&file).expect("serializable");
        let cfg = dir.join(CONFIG_FILE);
        fs::write(&cfg, json).map_err(|e| Error::storage(&cfg, e))?;
        let bin = dir.join(TENSOR_FILE);
        fs::write(&bin, bytes).map_err(|e| Error::storage(&bin, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&cfg).map_err(|e| Error::storage(&cfg, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let file: SaneFile = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        let bin = dir.join(TENSOR_FILE);
        let bytes = fs::read(&bin).map_err(|e| Error::storage(&bin, e))?;
        let mut model = SaneModel::new(file.config)?;
        if file.tensors.len() != model.params.len() {
            return Err(Error::Integrity {
                file: bin.display().to_string(),
                message: format!("expected {} tensors, index lists {}", model.params.len(), file.tensors.len()),
            });
        }
        for (i, t) in file.tensors.iter().enumerate() {
            if t.name != model.names[i] || t.shape != [model.params[i].nrows(), model.params[i].ncols()] {
                return Err(Error::Integrity {
                    file: cfg.display().to_string(),
                    message: format!("tensor {} does not match the model layout", t.name),
                });
            }
            let start = t.offset as usize;
            let end = start + 4 * t.shape[0] * t.shape[1];
            let Some(chunk) = bytes.get(start..end) else {
                return Err(Error::Integrity {
                    file: bin.display().to_string(),
                    message: format!("expected at least {end} bytes, found {}", bytes.len()),
                });
            };
            for (v, b) in model.params[i].iter_mut().zip(chunk.chunks_exact(4)) {
                *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorIndex {
    name: String,
    offset: u64,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct SaneFile {
    format_version: u32,
    config: SaneConfig,
    num_params: usize,
    tensors: Vec<TensorIndex>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn tiny() -> SaneConfig {
        SaneConfig {
            d_t: 5,
            window_size: 6,
            d_model: 8,
            d_lat: 6,
            d_proj: 3,
            n_layers: 1,
            n_heads: 2,
            ffn_mult: 2,
            max_layers: 4,
            max_tokens_per_layer: 8,
            gamma: 0.3,
            ntxent_temperature: 0.5,
            batch_size: 2,
            aug_noise_sigma: 0.1,
            ..SaneConfig::toy()
        }
    }

    fn window(rng: &mut ChaCha8Rng, rows: usize, live: usize, c: &SaneConfig) -> TokenWindow {
        let mut tokens = Array2::from_shape_simple_fn((rows, c.d_t), || rng.sample::<f32, _>(StandardNormal));
        let mut mask = Array2::ones((rows, c.d_t));
        for r in live..rows {
            tokens.row_mut(r).fill(0.0);
            mask.row_mut(r).fill(0);
        }
        tokens[[0, c.d_t - 1]] = 0.0;
        mask[[0, c.d_t - 1]] = 0;
        let positions = Array2::from_shape_fn((rows, 3), |(r, j)| [r + 3, r / 3, r % 3][j]);
        TokenWindow { tokens, positions, mask }
    }

    #[test]
    fn reference_configs_validate() {
        for c in [SaneConfig::cnn_reference(), SaneConfig::resnet_reference(), SaneConfig::toy()] {
            c.validate().unwrap();
            assert_eq!(c.d_lat, 128.min(c.d_lat));
        }
        assert_eq!(SaneConfig::resnet_reference().d_lat, 128);
        let mut c = tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c = tiny();
        c.d_proj = c.d_lat;
        assert!(c.validate().is_err());
    }

    #[test]
    fn shapes() {
        let m = SaneModel::new(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = window(&mut rng, 1, 1, m.config());
        let lat = m.encode(w.tokens.view(), w.positions.view()).unwrap();
        assert_eq!(lat.z.dim(), (1, 6));
        assert_eq!(m.decode(&lat).unwrap().dim(), (1, 5));
        assert_eq!(m.project(&lat).unwrap().dim(), (1, 3));
        assert!(m.encode(Array2::zeros((1, 4)).view(), w.positions.view()).is_err());
    }

    #[test]
    fn every_position_index_matters() {
        let m = SaneModel::new(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = window(&mut rng, 3, 3, m.config());
        let base = m.encode(w.tokens.view(), w.positions.view()).unwrap().z;
        for col in 0..3 {
            let mut p = w.positions.clone();
            p[[1, col]] += 1;
            let z = m.encode(w.tokens.view(), p.view()).unwrap().z;
            assert!(z != base, "index {col} ignored");
        }
    }

    #[test]
    fn projection_not_on_reconstruction_path() {
        let mut m = SaneModel::new(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = window(&mut rng, 4, 4, m.config());
        let before = m.reconstruct(w.tokens.view(), w.positions.view()).unwrap();
        let idx: Vec<usize> = m.names.iter().enumerate().filter(|(_, n)| n.starts_with("head.")).map(|(i, _)| i).collect();
        for i in idx {
            m.params[i].fill(0.0);
        }
        assert_eq!(before, m.reconstruct(w.tokens.view(), w.positions.view()).unwrap());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for gamma in [0.0, 0.3] {
            for mode in [NormalizationMode::None, NormalizationMode::MaskedPerToken] {
                let mut c = tiny();
                c.gamma = gamma;
                c.normalization = mode;
                let m = SaneModel::new(c.clone()).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                let batch = vec![window(&mut rng, 6, 6, &c), window(&mut rng, 6, 4, &c), window(&mut rng, 6, 5, &c)];
                let loss = |m: &SaneModel| m.loss_and_grad(&batch, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
                let (_, g) = loss(&m);
                let dir: Vec<Array2<f32>> = m
                    .params
                    .iter()
                    .map(|p| Array2::from_shape_simple_fn(p.dim(), || rng.sample::<f32, _>(StandardNormal)))
                    .collect();
                let analytic: f64 = g
                    .0
                    .iter()
                    .zip(&dir)
                    .map(|(a, b)| a.iter().zip(b).map(|(x, y)| f64::from(x * y)).sum::<f64>())
                    .sum();
                let h = 1e-3f32;
                let shifted = |sign: f32| {
                    let mut mm = m.clone();
                    for (p, d) in mm.params.iter_mut().zip(&dir) {
                        p.scaled_add(sign * h, d);
                    }
                    f64::from(loss(&mm).0.total)
                };
                let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * f64::from(h));
                let rel = (analytic - numeric).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
                assert!(rel < 2e-2, "gamma {gamma} {mode:?}: analytic {analytic} numeric {numeric}");
            }
        }
    }

    #[test]
    fn padding_rows_do_not_affect_loss() {
        let c = tiny();
        let m = SaneModel::new(c.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = window(&mut rng, 6, 4, &c);
        let mut w2 = w.clone();
        w2.tokens.row_mut(5).fill(7.0);
        assert_eq!(m.eval_loss(&[w]).unwrap(), m.eval_loss(&[w2]).unwrap());
    }

    #[test]
    fn windowed_sequence_processing() {
        let c = tiny();
        let m = SaneModel::new(c.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = window(&mut rng, 15, 15, &c);
        let lat = m.encode_sequence(w.tokens.view(), w.positions.view()).unwrap();
        let direct = m
            .encode(w.tokens.slice(s![12..15, ..]), w.positions.slice(s![12..15, ..]))
            .unwrap();
        assert_eq!(lat.z.slice(s![12..15, ..]), direct.z);
        assert_eq!(m.decode_sequence(&lat).unwrap().dim(), (15, 5));
    }

    #[test]
    fn save_load_round_trip() {
        let m = SaneModel::new(tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = SaneModel::load(dir.path()).unwrap();
        assert!(m.bit_eq(&back));
    }

    #[test]
    fn one_step_reduces_loss() {
        let c = tiny();
        let mut m = SaneModel::new(c.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = vec![window(&mut rng, 6, 6, &c), window(&mut rng, 6, 6, &c)];
        let before = m.eval_loss(&batch).unwrap();
        let mut opt = AdamW::new(0.0);
        for _ in 0..20 {
            let (_, g) = m.loss_and_grad(&batch, &mut rng).unwrap();
            m.apply(&mut opt, &g, 1e-2);
        }
        assert!(m.eval_loss(&batch).unwrap() < before);
    }
}
