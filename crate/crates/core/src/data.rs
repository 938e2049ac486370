//! Labeled image datasets.
//!
//! A dataset tag resolves either to IDX files under a data root
//! (`<root>/<tag>/{train,test}-{images-idx3,labels-idx1}-ubyte`) or, for the
//! built-in `synth-*` tags, to a deterministic procedural generator:
//!
//! | tag            | content                                               |
//! |----------------|-------------------------------------------------------|
//! | `synth-mnist`  | handwritten-style stroke digits, light on dark        |
//! | `synth-svhn`   | seven-segment digits on cluttered, mixed-polarity backgrounds |
//! | `synth-usps`   | frame-filling blurred stroke digits                   |
//! | `synth-fmnist` | ten filled clothing-like silhouettes                  |

use std::fs;
use std::path::Path;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SYNTH_TAGS: [&str; 4] = ["synth-mnist", "synth-svhn", "synth-usps", "synth-fmnist"];

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    /// `[channels, height, width]`.
    pub shape: [usize; 3],
    /// Row-major images, `len * c * h * w` values in `[0, 1]`.
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let s = self.image_size();
        &self.images[i * s..(i + 1) * s]
    }

    /// Stacks the given images into a `[B, C, H, W]` batch.
    pub fn batch(&self, idx: &[usize]) -> (Array4<f32>, Vec<usize>) {
        let [c, h, w] = self.shape;
        let mut data = Vec::with_capacity(idx.len() * self.image_size());
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        let x = Array4::from_shape_vec((idx.len(), c, h, w), data).expect("sized batch");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> ImageSet {
        let mut images = Vec::with_capacity(idx.len() * self.image_size());
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        ImageSet {
            shape: self.shape,
            images,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Converts to `target` shape: channel replication or averaging, then
    /// bilinear resize.
    pub fn adapt(&self, target: [usize; 3]) -> Result<ImageSet> {
        if self.shape == target {
            return Ok(self.clone());
        }
        let [sc, sh, sw] = self.shape;
        let [tc, th, tw] = target;
        if !(sc == tc || sc == 1 || tc == 1) {
            return Err(Error::Config(format!(
                "cannot adapt {sc} channels to {tc} channels"
            )));
        }
        let mut images = Vec::with_capacity(self.len() * tc * th * tw);
        for i in 0..self.len() {
            let img = self.image(i);
            let plane = |c: usize| -> Vec<f32> {
                if sc == tc {
                    img[c * sh * sw..(c + 1) * sh * sw].to_vec()
                } else if sc == 1 {
                    img.to_vec()
                } else {
                    (0..sh * sw)
                        .map(|p| (0..sc).map(|k| img[k * sh * sw + p]).sum::<f32>() / sc as f32)
                        .collect()
                }
            };
            for c in 0..tc {
                images.extend(resize_bilinear(&plane(c), sh, sw, th, tw));
            }
        }
        Ok(ImageSet {
            shape: target,
            images,
            labels: self.labels.clone(),
            classes: self.classes,
        })
    }
}

fn resize_bilinear(src: &[f32], sh: usize, sw: usize, th: usize, tw: usize) -> Vec<f32> {
    if sh == th && sw == tw {
        return src.to_vec();
    }
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let fy = ((y as f32 + 0.5) * sh as f32 / th as f32 - 0.5).clamp(0.0, (sh - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ay = fy - y0 as f32;
        for x in 0..tw {
            let fx = ((x as f32 + 0.5) * sw as f32 / tw as f32 - 0.5).clamp(0.0, (sw - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let ax = fx - x0 as f32;
            let v = src[y0 * sw + x0] * (1.0 - ay) * (1.0 - ax)
                + src[y0 * sw + x1] * (1.0 - ay) * ax
                + src[y1 * sw + x0] * ay * (1.0 - ax)
                + src[y1 * sw + x1] * ay * ax;
            out.push(v);
        }
    }
    out
}

/// Train/validation/test portions of one image dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub tag: String,
    pub train: ImageSet,
    pub val: ImageSet,
    pub test: ImageSet,
}

impl TaskData {
    pub fn adapt(&self, target: [usize; 3]) -> Result<TaskData> {
        Ok(TaskData {
            tag: self.tag.clone(),
            train: self.train.adapt(target)?,
            val: self.val.adapt(target)?,
            test: self.test.adapt(target)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.train.classes
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Seed of the procedural generators. Dataset content never depends on
    /// the experiment seed.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            seed: 0,
        }
    }
}

/// Resolves `tag` under `root` (IDX files) or to a built-in generator.
pub fn load_task(root: Option<&Path>, tag: &str, cfg: &DataConfig) -> Result<TaskData> {
    if let Some(root) = root {
        let dir = root.join(tag);
        if dir.join("train-images-idx3-ubyte").exists() {
            return load_idx_task(&dir, tag, cfg);
        }
    }
    if SYNTH_TAGS.contains(&tag) {
        return Ok(synth_task(tag, cfg));
    }
    Err(Error::Config(format!(
        "dataset {tag} not found{}",
        root.map(|r| format!(" under {}", r.display())).unwrap_or_default()
    )))
}

fn read_idx(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    let bad = |m: &str| Error::Parse {
        field: path.display().to_string(),
        message: m.to_string(),
    };
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(bad("not an unsigned-byte IDX file"));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + n {
        return Err(bad(&format!("expected {} data bytes, found {}", n, bytes.len() - header)));
    }
    Ok((dims, bytes[header..].to_vec()))
}

fn idx_set(dir: &Path, prefix: &str) -> Result<ImageSet> {
    let (idims, pixels) = read_idx(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
    let (ldims, labels) = read_idx(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    if idims.len() != 3 || ldims.len() != 1 || idims[0] != ldims[0] {
        return Err(Error::Parse {
            field: dir.display().to_string(),
            message: format!("image dims {idims:?} vs label dims {ldims:?}"),
        });
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(ImageSet {
        shape: [1, idims[1], idims[2]],
        images: pixels.into_iter().map(|p| f32::from(p) / 255.0).collect(),
        labels,
        classes,
    })
}

fn load_idx_task(dir: &Path, tag: &str, cfg: &DataConfig) -> Result<TaskData> {
    let full = idx_set(dir, "train")?;
    let test = idx_set(dir, "t10k").or_else(|_| idx_set(dir, "test"))?;
    let n_val = cfg.n_val.min(full.len() / 5);
    let n_train = cfg.n_train.min(full.len() - n_val);
    let train_idx: Vec<usize> = (0..n_train).collect();
    let val_idx: Vec<usize> = (full.len() - n_val..full.len()).collect();
    let test_idx: Vec<usize> = (0..cfg.n_test.min(test.len())).collect();
    let classes = full.classes.max(test.classes);
    let mut t = TaskData {
        tag: tag.to_string(),
        train: full.subset(&train_idx),
        val: full.subset(&val_idx),
        test: test.subset(&test_idx),
    };
    t.train.classes = classes;
    t.val.classes = classes;
    t.test.classes = classes;
    Ok(t)
}

/// Builds a built-in dataset. Panics on unknown tags; see [`load_task`].
pub fn synth_task(tag: &str, cfg: &DataConfig) -> TaskData {
    let style = match tag {
        "synth-mnist" => Style::Mnist,
        "synth-svhn" => Style::Svhn,
        "synth-usps" => Style::Usps,
        "synth-fmnist" => Style::Fashion,
        other => panic!("unknown synthetic dataset {other}"),
    };
    let tag_salt = tag.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(u64::from(b)));
    let mk = |split: u64, n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ tag_salt ^ (split << 56));
        let mut images = Vec::with_capacity(n * 28 * 28);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 10;
            images.extend(render(style, label, &mut rng));
            labels.push(label);
        }
        // shuffle so class order is not periodic
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let set = ImageSet {
            shape: [1, 28, 28],
            images,
            labels,
            classes: 10,
        };
        set.subset(&order)
    };
    TaskData {
        tag: tag.to_string(),
        train: mk(1, cfg.n_train),
        val: mk(2, cfg.n_val),
        test: mk(3, cfg.n_test),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Style {
    Mnist,
    Svhn,
    Usps,
    Fashion,
}

const SIDE: usize = 28;

type Pt = (f32, f32);

fn circle(cx: f32, cy: f32, rx: f32, ry: f32, from: f32, to: f32, n: usize) -> Vec<Pt> {
    (0..=n)
        .map(|i| {
            let t = from + (to - from) * i as f32 / n as f32;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Stroke polylines in the unit square (y grows downward).
fn digit_strokes(d: usize) -> Vec<Vec<Pt>> {
    use std::f32::consts::PI;
    match d {
        0 => vec![circle(0.5, 0.5, 0.22, 0.34, 0.0, 2.0 * PI, 16)],
        1 => vec![vec![(0.36, 0.3), (0.52, 0.15), (0.52, 0.85)]],
        2 => vec![vec![(0.27, 0.3), (0.36, 0.17), (0.55, 0.15), (0.7, 0.26), (0.68, 0.42), (0.27, 0.84), (0.75, 0.84)]],
        3 => vec![vec![(0.27, 0.2), (0.58, 0.14), (0.7, 0.3), (0.48, 0.48), (0.72, 0.62), (0.64, 0.82), (0.26, 0.84)]],
        4 => vec![vec![(0.62, 0.86), (0.62, 0.15), (0.22, 0.62), (0.78, 0.62)]],
        5 => vec![vec![(0.72, 0.15), (0.32, 0.15), (0.3, 0.45), (0.6, 0.42), (0.72, 0.6), (0.62, 0.82), (0.26, 0.82)]],
        6 => vec![vec![(0.66, 0.15), (0.38, 0.38), (0.29, 0.64), (0.4, 0.85), (0.62, 0.83), (0.7, 0.65), (0.55, 0.5), (0.31, 0.6)]],
        7 => vec![vec![(0.25, 0.16), (0.76, 0.16), (0.42, 0.86)]],
        8 => vec![
            circle(0.5, 0.31, 0.16, 0.15, 0.0, 2.0 * PI, 12),
            circle(0.5, 0.66, 0.2, 0.19, 0.0, 2.0 * PI, 12),
        ],
        _ => vec![
            circle(0.5, 0.34, 0.18, 0.17, 0.0, 2.0 * PI, 12),
            vec![(0.68, 0.34), (0.6, 0.86)],
        ],
    }
}

/// Seven-segment layout: a top, b upper-right, c lower-right, d bottom,
/// e lower-left, f upper-left, g middle.
fn segments(d: usize) -> &'static [usize] {
    const TABLE: [&[usize]; 10] = [
        &[0, 1, 2, 3, 4, 5],
        &[1, 2],
        &[0, 1, 6, 4, 3],
        &[0, 1, 6, 2, 3],
        &[5, 6, 1, 2],
        &[0, 5, 6, 2, 3],
        &[0, 5, 6, 4, 2, 3],
        &[0, 1, 2],
        &[0, 1, 2, 3, 4, 5, 6],
        &[0, 1, 2, 3, 5, 6],
    ];
    TABLE[d]
}

fn segment_strokes(d: usize) -> Vec<Vec<Pt>> {
    let (l, r, t, m, b) = (0.3, 0.7, 0.15, 0.5, 0.85);
    let seg = |s: usize| -> Vec<Pt> {
        match s {
            0 => vec![(l, t), (r, t)],
            1 => vec![(r, t), (r, m)],
            2 => vec![(r, m), (r, b)],
            3 => vec![(l, b), (r, b)],
            4 => vec![(l, m), (l, b)],
            5 => vec![(l, t), (l, m)],
            _ => vec![(l, m), (r, m)],
        }
    };
    segments(d).iter().map(|&s| seg(s)).collect()
}

/// Closed polygons of the fashion-style silhouettes.
fn garment(d: usize) -> Vec<Vec<Pt>> {
    match d {
        0 => vec![vec![(0.3, 0.2), (0.7, 0.2), (0.88, 0.35), (0.78, 0.45), (0.7, 0.4), (0.7, 0.85), (0.3, 0.85), (0.3, 0.4), (0.22, 0.45), (0.12, 0.35)]],
        1 => vec![
            vec![(0.32, 0.12), (0.68, 0.12), (0.68, 0.25), (0.32, 0.25)],
            vec![(0.32, 0.2), (0.48, 0.2), (0.46, 0.9), (0.34, 0.9)],
            vec![(0.52, 0.2), (0.68, 0.2), (0.66, 0.9), (0.54, 0.9)],
        ],
        2 => vec![vec![(0.3, 0.18), (0.7, 0.18), (0.85, 0.3), (0.88, 0.85), (0.76, 0.85), (0.72, 0.4), (0.7, 0.85), (0.3, 0.85), (0.28, 0.4), (0.24, 0.85), (0.12, 0.85), (0.15, 0.3)]],
        3 => vec![vec![(0.4, 0.12), (0.6, 0.12), (0.64, 0.4), (0.82, 0.9), (0.18, 0.9), (0.36, 0.4)]],
        4 => vec![
            vec![(0.28, 0.15), (0.72, 0.15), (0.88, 0.3), (0.9, 0.9), (0.78, 0.9), (0.74, 0.45), (0.74, 0.92), (0.26, 0.92), (0.26, 0.45), (0.22, 0.9), (0.1, 0.9), (0.12, 0.3)],
        ],
        5 => vec![
            vec![(0.1, 0.72), (0.9, 0.72), (0.9, 0.8), (0.1, 0.8)],
            vec![(0.2, 0.5), (0.3, 0.5), (0.4, 0.72), (0.3, 0.72)],
            vec![(0.5, 0.45), (0.6, 0.45), (0.7, 0.72), (0.6, 0.72)],
        ],
        6 => vec![vec![(0.3, 0.15), (0.45, 0.15), (0.5, 0.25), (0.55, 0.15), (0.7, 0.15), (0.86, 0.32), (0.78, 0.5), (0.7, 0.42), (0.7, 0.88), (0.3, 0.88), (0.3, 0.42), (0.22, 0.5), (0.14, 0.32)]],
        7 => vec![vec![(0.08, 0.55), (0.4, 0.5), (0.6, 0.62), (0.9, 0.66), (0.92, 0.78), (0.08, 0.78)]],
        8 => vec![
            vec![(0.15, 0.4), (0.85, 0.4), (0.85, 0.88), (0.15, 0.88)],
            vec![(0.35, 0.2), (0.65, 0.2), (0.65, 0.4), (0.58, 0.4), (0.58, 0.27), (0.42, 0.27), (0.42, 0.4), (0.35, 0.4)],
        ],
        _ => vec![vec![(0.3, 0.12), (0.6, 0.12), (0.6, 0.6), (0.9, 0.7), (0.9, 0.85), (0.3, 0.85)]],
    }
}

fn seg_dist(p: Pt, a: Pt, b: Pt) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn inside(p: Pt, poly: &[Pt]) -> bool {
    let mut c = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a.1 > p.1) != (b.1 > p.1) && p.0 < (b.0 - a.0) * (p.1 - a.1) / (b.1 - a.1) + a.0 {
            c = !c;
        }
        j = i;
    }
    c
}

/// Random similarity transform applied to unit-square geometry, mapped to pixels.
struct Jitter {
    cos: f32,
    sin: f32,
    sx: f32,
    sy: f32,
    tx: f32,
    ty: f32,
}

impl Jitter {
    fn sample(rng: &mut ChaCha8Rng, rot: f32, scale: (f32, f32), shift: f32, fill: bool) -> Self {
        let a = rng.random_range(-rot..=rot);
        let s = rng.random_range(scale.0..=scale.1);
        let aspect = if fill { rng.random_range(1.0..1.25) } else { rng.random_range(0.9..1.1) };
        Jitter {
            cos: a.cos(),
            sin: a.sin(),
            sx: s * aspect,
            sy: s,
            tx: rng.random_range(-shift..=shift),
            ty: rng.random_range(-shift..=shift),
        }
    }

    fn apply(&self, p: Pt) -> Pt {
        let (x, y) = ((p.0 - 0.5) * self.sx, (p.1 - 0.5) * self.sy);
        let (xr, yr) = (x * self.cos - y * self.sin, x * self.sin + y * self.cos);
        ((xr + 0.5) * SIDE as f32 + self.tx, (yr + 0.5) * SIDE as f32 + self.ty)
    }
}

fn draw_strokes(img: &mut [f32], strokes: &[Vec<Pt>], j: &Jitter, width: f32, value: f32) {
    let pts: Vec<Vec<Pt>> = strokes.iter().map(|s| s.iter().map(|&p| j.apply(p)).collect()).collect();
    for y in 0..SIDE {
        for x in 0..SIDE {
            let p = (x as f32 + 0.5, y as f32 + 0.5);
            let mut d = f32::INFINITY;
            for s in &pts {
                for w in s.windows(2) {
                    d = d.min(seg_dist(p, w[0], w[1]));
                }
            }
            let ink = (1.0 - (d - width / 2.0)).clamp(0.0, 1.0);
            let v = &mut img[y * SIDE + x];
            *v = v.max(ink * value);
        }
    }
}

fn fill_polys(img: &mut [f32], polys: &[Vec<Pt>], j: &Jitter, value: f32, rng: &mut ChaCha8Rng) {
    let pts: Vec<Vec<Pt>> = polys.iter().map(|s| s.iter().map(|&p| j.apply(p)).collect()).collect();
    let stripes = rng.random_range(0.0..0.25f32);
    let period = rng.random_range(3.0..6.0f32);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let p = (x as f32 + 0.5, y as f32 + 0.5);
            if pts.iter().any(|poly| inside(p, poly)) {
                let tex = 1.0 - stripes * ((y as f32 / period).sin() * 0.5 + 0.5);
                img[y * SIDE + x] = value * tex;
            }
        }
    }
}

fn blur(img: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let mut s = 0.0;
            let mut n = 0.0;
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let (yy, xx) = (y as i32 + dy, x as i32 + dx);
                    if (0..SIDE as i32).contains(&yy) && (0..SIDE as i32).contains(&xx) {
                        let w = if dx == 0 && dy == 0 { 4.0 } else if dx == 0 || dy == 0 { 2.0 } else { 1.0 };
                        s += w * img[yy as usize * SIDE + xx as usize];
                        n += w;
                    }
                }
            }
            out[y * SIDE + x] = s / n;
        }
    }
    out
}

fn render(style: Style, label: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let noise = Normal::new(0.0f32, 1.0).expect("valid normal");
    let mut img = vec![0.0f32; SIDE * SIDE];
    match style {
        Style::Mnist => {
            let j = Jitter::sample(rng, 0.25, (0.72, 0.95), 2.5, false);
            let width = rng.random_range(1.6..3.0);
            draw_strokes(&mut img, &digit_strokes(label), &j, width, 1.0);
            for v in img.iter_mut() {
                *v = (*v + 0.03 * noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
        Style::Usps => {
            let j = Jitter::sample(rng, 0.12, (1.0, 1.15), 1.0, true);
            let width = rng.random_range(2.4..3.4);
            draw_strokes(&mut img, &digit_strokes(label), &j, width, 1.0);
            img = blur(&img);
        }
        Style::Svhn => {
            let bg = rng.random_range(0.1..0.6f32);
            let gx = rng.random_range(-0.3..0.3f32);
            let gy = rng.random_range(-0.3..0.3f32);
            for y in 0..SIDE {
                for x in 0..SIDE {
                    img[y * SIDE + x] = bg + (gx * x as f32 + gy * y as f32) / SIDE as f32;
                }
            }
            let contrast = rng.random_range(0.3..0.7f32);
            // distractor digits cut by the frame
            for side in [-1.0f32, 1.0] {
                if rng.random_bool(0.6) {
                    let mut jd = Jitter::sample(rng, 0.1, (0.7, 0.85), 1.0, false);
                    jd.tx += side * rng.random_range(17.0..21.0);
                    let mut layer = vec![0.0f32; SIDE * SIDE];
                    draw_strokes(&mut layer, &segment_strokes(rng.random_range(0..10)), &jd, 3.0, 1.0);
                    for (v, l) in img.iter_mut().zip(&layer) {
                        *v += 0.6 * contrast * l;
                    }
                }
            }
            let j = Jitter::sample(rng, 0.15, (0.62, 0.82), 2.0, false);
            let width = rng.random_range(2.6..3.8);
            let mut layer = vec![0.0f32; SIDE * SIDE];
            draw_strokes(&mut layer, &segment_strokes(label), &j, width, 1.0);
            let sign = if rng.random_bool(0.3) { -1.0 } else { 1.0 };
            for (v, l) in img.iter_mut().zip(&layer) {
                *v = (*v + sign * contrast * l + 0.06 * noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
        Style::Fashion => {
            let j = Jitter::sample(rng, 0.08, (0.85, 1.0), 1.5, false);
            let value = rng.random_range(0.5..1.0);
            fill_polys(&mut img, &garment(label), &j, value, rng);
            for v in img.iter_mut() {
                *v = (*v + 0.02 * noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    img
}
