//! Zero-shot weight generation: anchor subsampling in latent space,
//! batch-norm conditioning and candidate selection.

use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::arch::ArchitectureDescriptor;
use crate::checkpoint::{CheckpointMeta, ModelCheckpoint};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::net::{self, BnMode, NetParams};
use crate::sane_model::{LatentSequence, SaneModel};
use crate::tokenizer::{detokenize_with_layout, sequence_layout, tokenize};
use crate::zoo_store::{CheckpointEntry, Split};

pub const DEFAULT_CANDIDATES: usize = 200;
pub const DEFAULT_KEEP: usize = 10;
pub const DEFAULT_ANCHORS: usize = 5;
pub const DEFAULT_ANCHOR_EPOCH: u32 = 25;

/// Scale of the Gaussian noise added to subsampled latents.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum LatentNoise {
    /// Isotropic noise with this standard deviation.
    Absolute(f32),
    /// Per-dimension noise: this factor times the latent standard deviation
    /// of that dimension over all anchors and positions.
    Relative(f32),
}

impl Default for LatentNoise {
    fn default() -> Self {
        LatentNoise::Relative(0.05)
    }
}

#[derive(Clone, Debug)]
pub struct SampleSpec {
    pub target_arch: Arc<ArchitectureDescriptor>,
    pub anchors: Vec<ModelCheckpoint>,
    pub n_candidates: usize,
    pub n_keep: usize,
    pub latent_noise: LatentNoise,
    pub seed: u64,
}

impl SampleSpec {
    pub fn new(target_arch: Arc<ArchitectureDescriptor>, anchors: Vec<ModelCheckpoint>, seed: u64) -> Self {
        SampleSpec {
            target_arch,
            anchors,
            n_candidates: DEFAULT_CANDIDATES,
            n_keep: DEFAULT_KEEP,
            latent_noise: LatentNoise::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_keep == 0 || self.n_keep > self.n_candidates {
            return Err(Error::Validation(format!(
                "n_keep must lie in 1..={}, got {}",
                self.n_candidates, self.n_keep
            )));
        }
        if self.anchors.is_empty() {
            return Err(Error::Validation("at least one anchor is required".into()));
        }
        let sigma = match self.latent_noise {
            LatentNoise::Absolute(s) | LatentNoise::Relative(s) => s,
        };
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Validation("latent noise must be finite and nonnegative".into()));
        }
        for (i, a) in self.anchors.iter().enumerate() {
            if a.arch.arch_id != self.target_arch.arch_id {
                return Err(Error::Validation(format!(
                    "anchor {i} has architecture {}, target is {}",
                    a.arch.arch_id, self.target_arch.arch_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub candidates: Vec<ModelCheckpoint>,
    /// `anchor_choices[c][n]`: anchor whose latent candidate `c` used at
    /// token `n`.
    pub anchor_choices: Vec<Vec<usize>>,
}

/// Builds candidates token by token from anchor latents, then decodes and
/// detokenizes them. Deterministic in `spec.seed`.
pub fn generate_candidates(sane: &SaneModel, spec: &SampleSpec) -> Result<Generation> {
    spec.validate()?;
    let d_t = sane.config().d_t;
    let layout = sequence_layout(&spec.target_arch, d_t)?;
    let latents: Vec<LatentSequence> = spec
        .anchors
        .iter()
        .map(|a| {
            let tm = tokenize(a, d_t)?;
            sane.encode_sequence(tm.tokens.view(), tm.positions.view())
        })
        .collect::<Result<_>>()?;
    let n = layout.total;
    let d_lat = sane.config().d_lat;
    let noise_std: Array1<f32> = match spec.latent_noise {
        LatentNoise::Absolute(s) => Array1::from_elem(d_lat, s),
        LatentNoise::Relative(f) => latent_std(&latents) * f,
    };
    let positions = layout.positions();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut candidates = Vec::with_capacity(spec.n_candidates);
    let mut anchor_choices = Vec::with_capacity(spec.n_candidates);
    for c in 0..spec.n_candidates {
        let mut z = Array2::zeros((n, d_lat));
        let mut choice = Vec::with_capacity(n);
        for i in 0..n {
            let a = rng.random_range(0..latents.len());
            choice.push(a);
            let mut row = z.row_mut(i);
            row.assign(&latents[a].z.row(i));
            for (v, &s) in row.iter_mut().zip(noise_std.iter()) {
                if s > 0.0 {
                    *v += s * rng.sample::<f32, _>(StandardNormal);
                }
            }
        }
        let tokens = sane.decode_sequence(&LatentSequence {
            z,
            positions: positions.clone(),
        })?;
        let mut ckpt = detokenize_with_layout(&spec.target_arch, &layout, tokens.view())?;
        ckpt.meta = CheckpointMeta::new("generated", 0, spec.seed.wrapping_add(c as u64));
        if let Some(bad) = ckpt.tensors.values().find(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                epoch: 0,
                step: bad.len(),
            });
        }
        candidates.push(ckpt);
        anchor_choices.push(choice);
    }
    Ok(Generation {
        candidates,
        anchor_choices,
    })
}

/// Per-dimension population standard deviation over all anchors and positions.
pub fn latent_std(latents: &[LatentSequence]) -> Array1<f32> {
    let views: Vec<_> = latents.iter().map(|l| l.z.view()).collect();
    let all = ndarray::concatenate(Axis(0), &views).expect("equal latent widths");
    if all.nrows() == 0 {
        return Array1::zeros(all.ncols());
    }
    all.std_axis(Axis(0), 0.0)
}

/// Recomputes batch-norm running statistics from `n_batches` batches of
/// `data` without touching trainable parameters. Architectures without
/// batch norm are returned unchanged.
pub fn condition_batchnorm(
    ckpt: &ModelCheckpoint,
    data: &ImageSet,
    n_batches: usize,
    batch_size: usize,
) -> Result<ModelCheckpoint> {
    if !ckpt.arch.has_batchnorm() {
        return Ok(ckpt.clone());
    }
    if data.is_empty() || n_batches == 0 || batch_size == 0 {
        return Err(Error::Conditioning("no images to condition on".into()));
    }
    let mut p = NetParams::from_checkpoint(ckpt)?;
    p.begin_collect();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size).take(n_batches) {
        let (x, _) = data.batch(chunk);
        p.forward(x, BnMode::Collect)?;
    }
    p.finish_collect()?;
    let mut out = p.to_checkpoint(ckpt.meta.clone());
    // Trainable tensors are carried over bit for bit.
    out.tensors = ckpt.tensors.clone();
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Ranked {
    pub index: usize,
    pub accuracy: f32,
    pub checkpoint: ModelCheckpoint,
}

/// Ranks candidates by validation accuracy (ties to the lower index) and
/// keeps the best `n_keep`.
pub fn select_candidates(candidates: &[ModelCheckpoint], val: &ImageSet, n_keep: usize) -> Result<Vec<Ranked>> {
    let mut scored = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| Ok((i, net::checkpoint_accuracy(c, val)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(n_keep)
        .map(|(index, accuracy)| Ranked {
            index,
            accuracy,
            checkpoint: candidates[index].clone(),
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct SampleOutcome {
    pub generated: usize,
    pub kept: Vec<Ranked>,
}

/// Full protocol: generate, condition every candidate, keep the best on `val`.
/// Fails if any trainable parameter changes after generation.
pub fn sample_models(
    sane: &SaneModel,
    spec: &SampleSpec,
    condition_data: &ImageSet,
    val: &ImageSet,
    n_batches: usize,
) -> Result<SampleOutcome> {
    let gen = generate_candidates(sane, spec)?;
    let hashes: Vec<String> = gen.candidates.iter().map(ModelCheckpoint::trainable_hash).collect();
    let conditioned = gen
        .candidates
        .iter()
        .map(|c| condition_batchnorm(c, condition_data, n_batches, 64))
        .collect::<Result<Vec<_>>>()?;
    let kept = select_candidates(&conditioned, val, spec.n_keep)?;
    for r in &kept {
        if r.checkpoint.trainable_hash() != hashes[r.index] {
            return Err(Error::Validation(format!(
                "candidate {} changed trainable parameters",
                r.index
            )));
        }
    }
    Ok(SampleOutcome {
        generated: gen.candidates.len(),
        kept,
    })
}

/// Picks `n` distinct train-split checkpoints at `epoch` (default: the
/// latest epoch present in the split), seeded.
pub fn pick_anchors(entries: &[CheckpointEntry], n: usize, epoch: Option<u32>, seed: u64) -> Result<Vec<String>> {
    let train: Vec<&CheckpointEntry> = entries.iter().filter(|e| e.split == Split::Train).collect();
    let epoch = match epoch {
        Some(e) => e,
        None => train
            .iter()
            .map(|e| e.meta.epoch)
            .max()
            .ok_or_else(|| Error::Config("no train-split checkpoints to use as anchors".into()))?,
    };
    let mut pool: Vec<&str> = train.iter().filter(|e| e.meta.epoch == epoch).map(|e| e.id.as_str()).collect();
    if pool.len() < n {
        return Err(Error::Config(format!(
            "need {n} anchors at epoch {epoch}, found {}",
            pool.len()
        )));
    }
    pool.sort_unstable();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(pool.into_iter().take(n).map(str::to_string).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch;
    use crate::data::{synth_task, DataConfig};
    use crate::net::InitScheme;
    use crate::sane_model::SaneConfig;

    fn small_sane(d_t: usize) -> SaneModel {
        SaneModel::new(SaneConfig {
            d_t,
            window_size: 8,
            d_model: 16,
            d_lat: 8,
            d_proj: 4,
            n_heads: 2,
            n_layers: 1,
            ..SaneConfig::toy()
        })
        .unwrap()
    }

    fn models(a: &Arc<ArchitectureDescriptor>, n: usize) -> Vec<ModelCheckpoint> {
        (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                NetParams::init(a.clone(), InitScheme::KaimingUniform, &mut rng)
                    .unwrap()
                    .to_checkpoint(CheckpointMeta::new("t", 25, i as u64))
            })
            .collect()
    }

    #[test]
    fn single_anchor_without_noise_reproduces_reconstruction() {
        let a = Arc::new(arch::mlp(&[4, 6, 3]).unwrap());
        let sane = small_sane(5);
        let anchor = models(&a, 1).remove(0);
        let mut spec = SampleSpec::new(a.clone(), vec![anchor.clone()], 3);
        spec.n_candidates = 4;
        spec.n_keep = 2;
        spec.latent_noise = LatentNoise::Absolute(0.0);
        let gen = generate_candidates(&sane, &spec).unwrap();
        let tm = tokenize(&anchor, 5).unwrap();
        let rec = sane.reconstruct(tm.tokens.view(), tm.positions.view()).unwrap();
        let layout = sequence_layout(&a, 5).unwrap();
        let expected = detokenize_with_layout(&a, &layout, rec.view()).unwrap();
        for c in &gen.candidates {
            assert_eq!(c.tensors, expected.tensors);
        }
    }

    #[test]
    fn generation_is_deterministic_and_validates_anchors() {
        let a = Arc::new(arch::mlp(&[4, 6, 3]).unwrap());
        let sane = small_sane(5);
        let mut spec = SampleSpec::new(a.clone(), models(&a, 3), 11);
        spec.n_candidates = 5;
        spec.n_keep = 5;
        let g1 = generate_candidates(&sane, &spec).unwrap();
        let g2 = generate_candidates(&sane, &spec).unwrap();
        assert!(g1.candidates.iter().zip(&g2.candidates).all(|(x, y)| x.bit_eq(y)));
        assert_eq!(g1.anchor_choices, g2.anchor_choices);
        let other = Arc::new(arch::mlp(&[4, 5, 3]).unwrap());
        spec.anchors.push(models(&other, 1).remove(0));
        assert!(matches!(generate_candidates(&sane, &spec), Err(Error::Validation(_))));
    }

    #[test]
    fn conditioning_matches_moment_oracle() {
        let a = Arc::new(arch::mlp_bn(&[3, 4, 2]).unwrap());
        let ck = models(&a, 1).remove(0);
        let data = synth_task("synth-mnist", &DataConfig { n_train: 40, n_val: 1, n_test: 1, seed: 1 });
        let small = ImageSet {
            shape: [3, 1, 1],
            images: data.train.images.iter().take(40 * 3).copied().collect(),
            labels: vec![0; 40],
            classes: 2,
        };
        let out = condition_batchnorm(&ck, &small, 100, 8).unwrap();
        assert_eq!(out.tensors, ck.tensors);
        // Oracle: the input of the first batch-norm is the first linear layer's output.
        let spec = &a.layers[0];
        let w = ck.tensor(&spec.name);
        let mut acts = vec![Vec::new(); spec.out_dim];
        for i in 0..small.len() {
            let x = small.image(i);
            for (o, col) in acts.iter_mut().enumerate() {
                let v: f32 = (0..3).map(|j| w[[o, j]] * x[j]).sum::<f32>() + w[[o, 3]];
                col.push(f64::from(v));
            }
        }
        let bn = a.layers.iter().find(|l| l.kind == arch::LayerKind::Batchnorm).unwrap();
        let st = &out.buffers[&bn.name];
        for (o, col) in acts.iter().enumerate() {
            let n = col.len() as f64;
            let m = col.iter().sum::<f64>() / n;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
            assert!((f64::from(st.mean[o]) - m).abs() < 1e-4);
            assert!((f64::from(st.var[o]) - v).abs() < 1e-4);
        }
    }

    #[test]
    fn conditioning_no_op_and_empty_stream() {
        let a = Arc::new(arch::mlp(&[3, 4, 2]).unwrap());
        let ck = models(&a, 1).remove(0);
        let empty = ImageSet {
            shape: [3, 1, 1],
            images: vec![],
            labels: vec![],
            classes: 2,
        };
        assert!(condition_batchnorm(&ck, &empty, 1, 8).unwrap().bit_eq(&ck));
        let b = Arc::new(arch::mlp_bn(&[3, 4, 2]).unwrap());
        let ckb = models(&b, 1).remove(0);
        assert!(matches!(condition_batchnorm(&ckb, &empty, 1, 8), Err(Error::Conditioning(_))));
    }

    #[test]
    fn selection_ranks_and_breaks_ties_by_index() {
        let data = synth_task("synth-mnist", &DataConfig { n_train: 300, n_val: 100, n_test: 1, seed: 2 });
        let a = Arc::new(arch::small_cnn([1, 28, 28], 10).unwrap());
        let mut cands = models(&a, 4);
        let mut p = NetParams::from_checkpoint(&cands[2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        crate::zoogen::train_classifier(
            &mut p,
            &data.train,
            crate::zoogen::TrainOptions { epochs: 3, batch_size: 16, lr: 3e-3, weight_decay: 0.0 },
            &mut rng,
            |_, _, _| Ok(()),
        )
        .unwrap();
        cands[2] = p.to_checkpoint(cands[2].meta.clone());
        cands.push(cands[0].clone());
        let ranked = select_candidates(&cands, &data.val, 5).unwrap();
        assert_eq!(ranked[0].index, 2);
        let pos0 = ranked.iter().position(|r| r.index == 0).unwrap();
        let pos4 = ranked.iter().position(|r| r.index == 4).unwrap();
        assert!(pos0 < pos4);
        assert_eq!(ranked.len(), 5);
    }

    #[test]
    fn anchors_come_from_train_split_at_epoch() {
        let a = Arc::new(arch::mlp(&[2, 2]).unwrap());
        let mut m = crate::zoo_store::ZooManifest::new("z", "t", 0);
        for i in 0..20 {
            for e in [24, 25] {
                let c = ModelCheckpoint::zeros(a.clone(), CheckpointMeta::new("t", e, i));
                m.add_checkpoint(&format!("z-m{i:04}"), &c).unwrap();
            }
        }
        m.assign_splits();
        let ids = pick_anchors(&m.checkpoints, 5, None, 1).unwrap();
        assert_eq!(ids.len(), 5);
        for id in &ids {
            let e = m.entry(id).unwrap();
            assert_eq!(e.split, Split::Train);
            assert_eq!(e.meta.epoch, 25);
        }
        assert_eq!(ids, pick_anchors(&m.checkpoints, 5, None, 1).unwrap());
        assert!(pick_anchors(&m.checkpoints, 50, None, 1).is_err());
    }
}
