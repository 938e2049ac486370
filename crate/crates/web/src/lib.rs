//! Browser bindings. Every export returns a JSON string for the page to draw.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use weightgen::arch;
use weightgen::baselines::{rebasin_align, weight_distance_sq};
use weightgen::checkpoint::{CheckpointMeta, ModelCheckpoint};
use weightgen::data::ImageSet;
use weightgen::losses::{masked_token_stats, normalized_reconstruction_loss, token_stats, NormalizationMode, DEFAULT_EPSILON};
use weightgen::net::{self, InitScheme, NetParams};
use weightgen::tokenizer::sequence_layout;
use weightgen::zoogen::{train_classifier, TrainOptions};

type Out = std::result::Result<String, String>;

fn js(r: Out) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

/// Token layout of a reference architecture: per-layer table plus the
/// number of signal entries in every token.
pub fn layout_json(arch_name: &str, d_t: usize) -> Out {
    let (shape, classes) = match arch_name {
        "mini_resnet" => ([3, 32, 32], 10),
        _ => ([1, 28, 28], 10),
    };
    let a = arch::by_name(arch_name, shape, classes).map_err(|e| e.to_string())?;
    let layout = sequence_layout(&a, d_t).map_err(|e| e.to_string())?;
    let mask = layout.mask();
    let signal: Vec<usize> = mask.rows().into_iter().map(|r| r.iter().filter(|&&m| m == 1).count()).collect();
    let layers: Vec<Value> = layout
        .layers
        .iter()
        .map(|l| {
            json!({"name": l.name, "rows": l.rows, "row_len": l.row_len,
                   "tokens_per_row": l.tokens_per_row, "offset": l.offset, "count": l.count})
        })
        .collect();
    Ok(json!({"params": a.num_params(), "d_t": d_t, "tokens": layout.total, "layers": layers, "signal": signal})
        .to_string())
}

fn parse_rows(text: &str) -> std::result::Result<Vec<Vec<f64>>, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: {s:?}")))
                .collect()
        })
        .collect()
}

/// Loss of `pred` against `target` (one token per line) in every
/// normalization mode. Short lines are zero-padded to `d_t`; the padding is
/// masked out.
pub fn normalization_json(target: &str, pred: &str, d_t: usize) -> Out {
    let t = parse_rows(target)?;
    let p = parse_rows(pred)?;
    if t.len() != p.len() || t.is_empty() {
        return Err("target and prediction need the same nonzero number of lines".into());
    }
    let n = t.len();
    let mut tm = Array2::<f64>::zeros((n, d_t));
    let mut pm = Array2::<f64>::zeros((n, d_t));
    let mut mask = Array2::<u8>::zeros((n, d_t));
    for i in 0..n {
        if t[i].len() != p[i].len() || t[i].is_empty() || t[i].len() > d_t {
            return Err(format!("line {}: lengths must match and lie in 1..={d_t}", i + 1));
        }
        for j in 0..t[i].len() {
            tm[[i, j]] = t[i][j];
            pm[[i, j]] = p[i][j];
            mask[[i, j]] = 1;
        }
    }
    let modes = [
        ("none", NormalizationMode::None),
        ("per_token", NormalizationMode::PerToken),
        ("masked_per_token", NormalizationMode::MaskedPerToken),
    ];
    let mut losses = serde_json::Map::new();
    for (name, m) in modes {
        let l = normalized_reconstruction_loss(tm.view(), pm.view(), mask.view(), m, DEFAULT_EPSILON)
            .map_err(|e| e.to_string())?;
        losses.insert(name.into(), json!(l));
    }
    let stats: Vec<Value> = (0..n)
        .map(|i| {
            let row = tm.row(i).to_vec();
            let mrow = mask.row(i).to_vec();
            let (mm, ms) = masked_token_stats(&row, &mrow, DEFAULT_EPSILON).unwrap_or((f64::NAN, f64::NAN));
            let (um, us) = token_stats(&row, DEFAULT_EPSILON);
            json!({"masked": [mm, ms], "padded": [um, us]})
        })
        .collect();
    Ok(json!({"losses": losses, "stats": stats}).to_string())
}

fn moons(n: usize, rng: &mut ChaCha8Rng) -> ImageSet {
    let mut images = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let a = rng.random_range(0.0..std::f32::consts::PI);
        let (x, y) = if c == 0 { (a.cos(), a.sin()) } else { (1.0 - a.cos(), 0.5 - a.sin()) };
        images.push(x + rng.random_range(-0.15..0.15));
        images.push(y + rng.random_range(-0.15..0.15));
        labels.push(c);
    }
    ImageSet {
        shape: [2, 1, 1],
        images,
        labels,
        classes: 2,
    }
}

fn lerp(a: &ModelCheckpoint, b: &ModelCheckpoint, t: f32) -> ModelCheckpoint {
    let mut out = a.clone();
    for (k, v) in out.tensors.iter_mut() {
        *v = &a.tensors[k] * (1.0 - t) + &b.tensors[k] * t;
    }
    out
}

/// Trains two small MLPs on two-moons from different seeds and reports
/// accuracy along the straight line between them, before and after
/// permutation alignment.
pub fn interpolation_json(seed_a: u64, seed_b: u64, hidden: usize, steps: usize) -> Out {
    let e = |e: weightgen::Error| e.to_string();
    let hidden = hidden.clamp(2, 64);
    let steps = steps.clamp(2, 50);
    let a = Arc::new(arch::mlp(&[2, hidden, hidden, 2]).map_err(e)?);
    let data = moons(400, &mut ChaCha8Rng::seed_from_u64(99));
    let opts = TrainOptions {
        epochs: 40,
        batch_size: 32,
        lr: 1e-2,
        weight_decay: 0.0,
    };
    let train = |seed: u64| -> std::result::Result<ModelCheckpoint, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = NetParams::init(a.clone(), InitScheme::KaimingUniform, &mut rng).map_err(e)?;
        train_classifier(&mut p, &data, opts, &mut rng, |_, _, _| Ok(())).map_err(e)?;
        Ok(p.to_checkpoint(CheckpointMeta::new("moons", opts.epochs, seed)))
    };
    let ma = train(seed_a)?;
    let mb = train(seed_b)?;
    let al = rebasin_align(&ma, &mb, 20).map_err(e)?;
    let mut naive = Vec::new();
    let mut aligned = Vec::new();
    let mut ts = Vec::new();
    for s in 0..=steps {
        let t = s as f32 / steps as f32;
        ts.push(t);
        naive.push(net::checkpoint_accuracy(&lerp(&ma, &mb, t), &data).map_err(e)?);
        aligned.push(net::checkpoint_accuracy(&lerp(&ma, &al.aligned, t), &data).map_err(e)?);
    }
    Ok(json!({
        "t": ts, "naive": naive, "aligned": aligned,
        "distance_before": weight_distance_sq(&ma, &mb).sqrt(),
        "distance_after": weight_distance_sq(&ma, &al.aligned).sqrt(),
        "sweeps": al.sweeps,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn layout(arch_name: &str, d_t: usize) -> Result<String, JsValue> {
    js(layout_json(arch_name, d_t))
}

#[wasm_bindgen]
pub fn normalization(target: &str, pred: &str, d_t: usize) -> Result<String, JsValue> {
    js(normalization_json(target, pred, d_t))
}

#[wasm_bindgen]
pub fn interpolation(seed_a: u32, seed_b: u32, hidden: usize, steps: usize) -> Result<String, JsValue> {
    js(interpolation_json(seed_a.into(), seed_b.into(), hidden, steps))
}
