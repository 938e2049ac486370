use std::sync::Arc;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use weightgen::arch;
use weightgen::checkpoint::{CheckpointMeta, ModelCheckpoint};
use weightgen::losses::{
    masked_token_stats, normalized_reconstruction_loss, normalized_reconstruction_loss_grad, ntxent_loss,
    NormalizationMode,
};
use weightgen::net::{InitScheme, NetParams};
use weightgen::sampler::{generate_candidates, SampleSpec};
use weightgen::sane_model::{SaneConfig, SaneModel};
use weightgen::tokenizer::{detokenize, sequence_layout, tokenize};
use weightgen::trainer::{TokenDataset, ZooSource};
use weightgen::zoo_store::{Split, ZooManifest};

const MODES: [NormalizationMode; 3] = [
    NormalizationMode::None,
    NormalizationMode::PerToken,
    NormalizationMode::MaskedPerToken,
];
const EPS: f64 = 1e-6;

/// Target, prediction and a mask whose signal entries form a prefix of at
/// least two entries in every row. A lone signal entry has sigma = eps and a
/// loss term large enough to swamp finite differences of the others.
fn instance(rows: usize, cols: usize, seed: u64) -> (Array2<f64>, Array2<f64>, Array2<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale: f64 = 10f64.powf(rng.random_range(-3.0..2.0));
    let t = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0) * scale);
    let p = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0) * scale);
    let lens: Vec<usize> = (0..rows).map(|_| rng.random_range(2..=cols)).collect();
    let m = Array2::from_shape_fn((rows, cols), |(r, c)| u8::from(c < lens[r]));
    (t, p, m)
}

fn loss(t: &Array2<f64>, p: &Array2<f64>, m: &Array2<u8>, mode: NormalizationMode) -> f64 {
    normalized_reconstruction_loss(t.view(), p.view(), m.view(), mode, EPS).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_matches_central_difference(rows in 1usize..5, cols in 2usize..7, seed in any::<u64>()) {
        let (t, p, m) = instance(rows, cols, seed);
        for mode in MODES {
            let (_, g) = normalized_reconstruction_loss_grad(t.view(), p.view(), m.view(), mode, EPS).unwrap();
            for r in 0..rows {
                for c in 0..cols {
                    // The loss is quadratic in the prediction, so a large step
                    // has no truncation error and keeps cancellation small.
                    let h = 1e-2 * p.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    let mut up = p.clone();
                    up[[r, c]] += h;
                    let mut dn = p.clone();
                    dn[[r, c]] -= h;
                    let fd = (loss(&t, &up, &m, mode) - loss(&t, &dn, &m, mode)) / (2.0 * h);
                    let a = g[[r, c]];
                    let tol = 1e-4 * a.abs().max(fd.abs()).max(1e-6);
                    prop_assert!((a - fd).abs() <= tol, "{mode:?} [{r},{c}] analytic {a} fd {fd}");
                }
            }
        }
    }

    #[test]
    fn padding_never_changes_the_loss(rows in 1usize..5, cols in 2usize..8, seed in any::<u64>(), junk in -1e6f64..1e6) {
        let (t, p, m) = instance(rows, cols, seed);
        let mut t2 = t.clone();
        let mut p2 = p.clone();
        for ((r, c), &mv) in m.indexed_iter() {
            if mv == 0 {
                t2[[r, c]] = junk;
                p2[[r, c]] = -junk;
            }
        }
        for mode in MODES {
            prop_assert_eq!(loss(&t, &p, &m, mode).to_bits(), loss(&t2, &p2, &m, mode).to_bits());
        }
    }

    #[test]
    fn loss_scale_response(rows in 1usize..4, cols in 2usize..6, seed in any::<u64>(), k in 0.1f64..100.0) {
        let (t, p, m) = instance(rows, cols, seed);
        let base_none = loss(&t, &p, &m, NormalizationMode::None);
        let scaled_none = loss(&(&t * k), &(&p * k), &m, NormalizationMode::None);
        prop_assert!((scaled_none - k * k * base_none).abs() <= 1e-9 * scaled_none.abs().max(1e-12));
        // With epsilon negligible against the token spread, standardization
        // removes any common scale.
        let tiny = 1e-12;
        let a = normalized_reconstruction_loss(t.view(), p.view(), m.view(), NormalizationMode::MaskedPerToken, tiny).unwrap();
        let b = normalized_reconstruction_loss((&t * k).view(), (&p * k).view(), m.view(), NormalizationMode::MaskedPerToken, tiny).unwrap();
        prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn masked_stats_ignore_padding(vals in prop::collection::vec(-100.0f64..100.0, 1..20), pad in 0usize..10) {
        let mut token = vals.clone();
        let mut mask = vec![1u8; vals.len()];
        token.extend(std::iter::repeat_n(0.0, pad));
        mask.extend(std::iter::repeat_n(0u8, pad));
        let (mu, sigma) = masked_token_stats(&token, &mask, EPS).unwrap();
        let (mu0, sigma0) = masked_token_stats(&vals, &vec![1u8; vals.len()], EPS).unwrap();
        prop_assert_eq!(mu.to_bits(), mu0.to_bits());
        prop_assert_eq!(sigma.to_bits(), sigma0.to_bits());
    }

    #[test]
    fn ntxent_is_rotation_and_norm_invariant(b in 2usize..6, seed in any::<u64>(), angle in 0.0f64..6.28) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let zi = Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0));
        let zj = Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0));
        let base = ntxent_loss(zi.view(), zj.view(), 0.5).unwrap();
        // Givens rotation in the (0, 2) plane.
        let mut rot = Array2::<f64>::eye(d);
        rot[[0, 0]] = angle.cos();
        rot[[0, 2]] = -angle.sin();
        rot[[2, 0]] = angle.sin();
        rot[[2, 2]] = angle.cos();
        let rotated = ntxent_loss(zi.dot(&rot).view(), zj.dot(&rot).view(), 0.5).unwrap();
        prop_assert!((base - rotated).abs() < 1e-10);
        let scales: Vec<f64> = (0..b).map(|_| rng.random_range(0.1..10.0)).collect();
        let scaled = Array2::from_shape_fn((b, d), |(r, c)| zi[[r, c]] * scales[r]);
        let s = ntxent_loss(scaled.view(), zj.view(), 0.5).unwrap();
        prop_assert!((base - s).abs() < 1e-10);
    }

    #[test]
    fn tokenizer_round_trips_random_mlps(
        dims in prop::collection::vec(1usize..40, 2..5),
        d_t in 1usize..64,
        bn in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let a = if bn { arch::mlp_bn(&dims) } else { arch::mlp(&dims) }.unwrap();
        let a = Arc::new(a);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat: Vec<f32> = (0..a.num_params()).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        let ckpt = ModelCheckpoint::from_flat(a.clone(), &flat, CheckpointMeta::new("p", 1, seed)).unwrap();
        let tm = tokenize(&ckpt, d_t).unwrap();
        let layout = sequence_layout(&a, d_t).unwrap();
        let expect: usize = layout.layers.iter().map(|l| l.rows * l.row_len.div_ceil(d_t)).sum();
        prop_assert_eq!(tm.len(), expect);
        prop_assert_eq!(tm.mask.iter().filter(|&&m| m == 1).count(), a.num_params());
        let back = detokenize(&tm).unwrap();
        prop_assert!(back.flat().iter().zip(&flat).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

fn tiny_zoo(n: usize, widths: impl Fn(usize) -> usize) -> (ZooManifest, Vec<ModelCheckpoint>) {
    let mut manifest = ZooManifest::new("u", "synth", 0);
    let mut ckpts = Vec::new();
    for i in 0..n {
        let a = Arc::new(arch::mlp(&[3, widths(i), 2]).unwrap());
        let c = NetParams::init(a, InitScheme::KaimingUniform, &mut ChaCha8Rng::seed_from_u64(i as u64))
            .unwrap()
            .to_checkpoint(CheckpointMeta::new("synth", 1, i as u64));
        manifest.add_checkpoint(&format!("m{i}"), &c).unwrap();
        ckpts.push(c);
    }
    (manifest, ckpts)
}

/// Pearson chi-square statistic of `counts` against a uniform law, and the
/// bound three standard deviations above its null mean (`k - 1`, variance
/// `2 (k - 1)`).
fn chi_square(counts: &[usize]) -> (f64, f64) {
    let total: usize = counts.iter().sum();
    let dof = counts.len() as f64 - 1.0;
    let e = total as f64 / counts.len() as f64;
    let chi2 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    (chi2, dof + 3.0 * (2.0 * dof).sqrt())
}

#[test]
fn uniform_window_draws_cover_models_evenly() {
    // Models of very different lengths must still be drawn equally often.
    let (manifest, ckpts) = tiny_zoo(8, |i| 2 + 5 * i);
    let ds = TokenDataset::from_sources(
        &[ZooSource {
            manifest: &manifest,
            checkpoints: &ckpts,
        }],
        4,
        4,
        Split::Train,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = vec![0usize; ds.len()];
    for _ in 0..10_000 {
        counts[ds.sample_uniform(&mut rng).model_index] += 1;
    }
    let (chi2, bound) = chi_square(&counts);
    assert!(chi2 <= bound, "chi2 {chi2} > {bound}, counts {counts:?}");
}

#[test]
fn anchor_choices_are_uniform() {
    let a = Arc::new(arch::mlp(&[3, 6, 2]).unwrap());
    let anchors: Vec<ModelCheckpoint> = (0..5)
        .map(|s| {
            NetParams::init(a.clone(), InitScheme::KaimingNormal, &mut ChaCha8Rng::seed_from_u64(s))
                .unwrap()
                .to_checkpoint(CheckpointMeta::new("synth", 1, s))
        })
        .collect();
    let sane = SaneModel::new(SaneConfig {
        d_t: 4,
        window_size: 8,
        d_model: 8,
        d_lat: 4,
        d_proj: 2,
        n_layers: 1,
        n_heads: 2,
        ffn_mult: 1,
        max_layers: 4,
        max_tokens_per_layer: 8,
        ..SaneConfig::toy()
    })
    .unwrap();
    let spec = SampleSpec {
        n_candidates: 200,
        n_keep: 1,
        ..SampleSpec::new(a, anchors, 3)
    };
    let g = generate_candidates(&sane, &spec).unwrap();
    let mut counts = vec![0usize; 5];
    for choice in &g.anchor_choices {
        for &c in choice {
            counts[c] += 1;
        }
    }
    let (chi2, bound) = chi_square(&counts);
    assert!(chi2 <= bound, "chi2 {chi2} > {bound}, counts {counts:?}");
}
