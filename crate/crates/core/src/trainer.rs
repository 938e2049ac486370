//! Window sampling over tokenized zoos and the SANE training loop.

use std::io::Write;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::sane_model::{LossParts, SaneConfig, SaneModel, TokenWindow};
use crate::tokenizer::{tokenize, TokenizedModel};
use crate::zoo_store::{Split, ZooManifest, ZooReader};

/// One tokenized model with its provenance.
#[derive(Clone, Debug)]
pub struct TokenizedEntry {
    pub checkpoint_id: String,
    pub zoo_index: usize,
    pub model: TokenizedModel,
}

/// A window plus where it came from.
#[derive(Clone, Debug)]
pub struct Window {
    pub window: TokenWindow,
    pub zoo_index: usize,
    pub model_index: usize,
    pub start: usize,
}

/// Tokenized checkpoints drawn from one split of one or more zoos.
#[derive(Clone, Debug)]
pub struct TokenDataset {
    pub d_t: usize,
    pub window_size: usize,
    pub zoo_ids: Vec<String>,
    pub entries: Vec<TokenizedEntry>,
}

/// Checkpoints of one zoo held in memory, in manifest order.
pub struct ZooSource<'a> {
    pub manifest: &'a ZooManifest,
    pub checkpoints: &'a [ModelCheckpoint],
}

impl TokenDataset {
    /// Tokenizes the checkpoints of `split` from in-memory zoos.
    pub fn from_sources(sources: &[ZooSource<'_>], d_t: usize, window_size: usize, split: Split) -> Result<Self> {
        if window_size == 0 || d_t == 0 {
            return Err(Error::Config("d_t and window_size must be positive".into()));
        }
        let mut entries = Vec::new();
        for (zi, src) in sources.iter().enumerate() {
            if src.manifest.checkpoints.len() != src.checkpoints.len() {
                return Err(Error::Validation(format!(
                    "zoo {} lists {} checkpoints but {} were given",
                    src.manifest.zoo_id,
                    src.manifest.checkpoints.len(),
                    src.checkpoints.len()
                )));
            }
            for (e, c) in src.manifest.checkpoints.iter().zip(src.checkpoints) {
                if e.split == split {
                    entries.push(TokenizedEntry {
                        checkpoint_id: e.id.clone(),
                        zoo_index: zi,
                        model: tokenize(c, d_t)?,
                    });
                }
            }
        }
        Self::finish(sources.iter().map(|s| s.manifest.zoo_id.clone()).collect(), entries, d_t, window_size)
    }

    fn finish(zoo_ids: Vec<String>, entries: Vec<TokenizedEntry>, d_t: usize, window_size: usize) -> Result<Self> {
        if entries.iter().all(|e| e.model.is_empty()) {
            return Err(Error::Config("selected split contains no tokens".into()));
        }
        Ok(TokenDataset {
            d_t,
            window_size,
            zoo_ids,
            entries,
        })
    }

    /// Number of weight tokens across all models.
    pub fn token_count(&self) -> usize {
        self.entries.iter().map(|e| e.model.len()).sum()
    }

    /// Number of signal (real weight) entries across all tokens.
    pub fn weight_count(&self) -> usize {
        self.entries.iter().map(|e| e.model.mask.iter().filter(|&&m| m != 0).count()).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Window of `window_size` rows starting at `start`, zero-padded with
    /// mask 0 past the end of the sequence.
    pub fn window(&self, model_index: usize, start: usize) -> Window {
        let e = &self.entries[model_index];
        let tm = &e.model;
        let w = self.window_size;
        let end = (start + w).min(tm.len());
        let n = end - start;
        let mut tokens = Array2::zeros((w, self.d_t));
        let mut mask = Array2::zeros((w, self.d_t));
        let mut positions = Array2::zeros((w, 3));
        tokens.slice_mut(s![..n, ..]).assign(&tm.tokens.slice(s![start..end, ..]));
        mask.slice_mut(s![..n, ..]).assign(&tm.mask.slice(s![start..end, ..]));
        positions.slice_mut(s![..n, ..]).assign(&tm.positions.slice(s![start..end, ..]));
        Window {
            window: TokenWindow { tokens, positions, mask },
            zoo_index: e.zoo_index,
            model_index,
            start,
        }
    }

    fn random_start<R: Rng>(&self, model_index: usize, rng: &mut R) -> usize {
        let len = self.entries[model_index].model.len();
        rng.random_range(0..=len.saturating_sub(self.window_size))
    }

    /// One window: model uniform over the dataset, start uniform over the
    /// model's sequence.
    pub fn sample_uniform<R: Rng>(&self, rng: &mut R) -> Window {
        let m = rng.random_range(0..self.entries.len());
        let start = self.random_start(m, rng);
        self.window(m, start)
    }

    /// Fresh windows for one epoch: each model contributes
    /// `ceil(len / window_size)` windows at random starts, in shuffled order.
    pub fn epoch_windows<R: Rng>(&self, rng: &mut R) -> Vec<Window> {
        let mut picks = Vec::new();
        for (m, e) in self.entries.iter().enumerate() {
            for _ in 0..e.model.len().div_ceil(self.window_size) {
                picks.push((m, self.random_start(m, rng)));
            }
        }
        picks.shuffle(rng);
        picks.into_iter().map(|(m, st)| self.window(m, st)).collect()
    }

    /// Consecutive, non-overlapping windows covering every model.
    pub fn fixed_windows(&self) -> Vec<Window> {
        let mut out = Vec::new();
        for (m, e) in self.entries.iter().enumerate() {
            for start in (0..e.model.len()).step_by(self.window_size) {
                out.push(self.window(m, start));
            }
        }
        out
    }
}

/// Loads and tokenizes `split` from zoo directories.
pub fn build_token_dataset(zoos: &[ZooReader], d_t: usize, window_size: usize, split: Split) -> Result<TokenDataset> {
    if let Some(bad) = zoos.iter().find(|z| z.manifest.token_size.is_some_and(|t| t != d_t)) {
        return Err(Error::Incompatible(format!(
            "zoo {} declares token size {}, training uses {d_t}",
            bad.manifest.zoo_id,
            bad.manifest.token_size.unwrap_or_default()
        )));
    }
    let mut entries = Vec::new();
    for (zi, z) in zoos.iter().enumerate() {
        for e in z.manifest.in_split(split) {
            entries.push(TokenizedEntry {
                checkpoint_id: e.id.clone(),
                zoo_index: zi,
                model: tokenize(&z.load(&e.id)?, d_t)?,
            });
        }
    }
    if entries.is_empty() {
        return Err(Error::Config(format!("split {split:?} is empty in all zoos")));
    }
    TokenDataset::finish(zoos.iter().map(|z| z.manifest.zoo_id.clone()).collect(), entries, d_t, window_size)
}

/// Per-epoch training record, written as one JSON line.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Global optimizer step count at the end of the epoch.
    pub step: usize,
    pub l_rec: f32,
    pub l_c: f32,
    pub total: f32,
    pub lr: f32,
    pub zoos: Vec<String>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: SaneModel,
    pub log: Vec<EpochRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Setup(#[from] Error),
    /// Training hit a non-finite loss; `last_good` is the model at the start
    /// of the failing epoch.
    #[error("{error}; last good model is from epoch {}", log.len())]
    Diverged {
        error: Error,
        last_good: Box<SaneModel>,
        log: Vec<EpochRecord>,
    },
}

fn batches(windows: Vec<Window>, batch_size: usize, need_pairs: bool) -> Vec<Vec<Window>> {
    let mut out: Vec<Vec<Window>> = Vec::new();
    let mut it = windows.into_iter().peekable();
    while it.peek().is_some() {
        out.push(it.by_ref().take(batch_size).collect());
    }
    if need_pairs && out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap_or_default();
        if let Some(prev) = out.last_mut() {
            prev.extend(tail);
        }
    }
    out
}

/// Trains a fresh model on `data`. One JSON line per epoch goes to `log_sink`.
pub fn train_sane(
    config: &SaneConfig,
    data: &TokenDataset,
    mut log_sink: Option<&mut dyn Write>,
) -> std::result::Result<TrainOutcome, TrainError> {
    config.validate()?;
    if data.d_t != config.d_t || data.window_size != config.window_size {
        return Err(Error::Config(format!(
            "dataset uses d_t {} / window {}, config {} / {}",
            data.d_t, data.window_size, config.d_t, config.window_size
        ))
        .into());
    }
    let need_pairs = config.gamma > 0.0;
    let per_epoch: usize = data.entries.iter().map(|e| e.model.len().div_ceil(data.window_size)).sum();
    if need_pairs && per_epoch < 2 {
        return Err(Error::InsufficientNegatives(per_epoch).into());
    }
    let mut model = SaneModel::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut opt = AdamW::new(config.weight_decay);
    let mut steps_per_epoch = per_epoch.div_ceil(config.batch_size);
    if need_pairs && steps_per_epoch > 1 && per_epoch % config.batch_size == 1 {
        steps_per_epoch -= 1;
    }
    let total_steps = steps_per_epoch * config.epochs;
    let mut step = 0usize;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let last_good = model.clone();
        let mut sum = LossParts::default();
        let mut n = 0usize;
        let mut touched = vec![false; data.zoo_ids.len()];
        let mut lr = config.lr;
        for batch in batches(data.epoch_windows(&mut rng), config.batch_size, need_pairs) {
            for w in &batch {
                touched[w.zoo_index] = true;
            }
            let windows: Vec<TokenWindow> = batch.into_iter().map(|w| w.window).collect();
            let (parts, grads) = model.loss_and_grad(&windows, &mut rng)?;
            if !parts.total.is_finite() || !grads.norm().is_finite() {
                return Err(TrainError::Diverged {
                    error: Error::NonFinite { epoch, step },
                    last_good: Box::new(last_good),
                    log,
                });
            }
            lr = config.lr_schedule.lr_at(config.lr, step, total_steps);
            model.apply(&mut opt, &grads, lr);
            step += 1;
            if model.named_params().any(|(_, p)| p.iter().any(|v| !v.is_finite())) {
                return Err(TrainError::Diverged {
                    error: Error::NonFinite { epoch, step },
                    last_good: Box::new(last_good),
                    log,
                });
            }
            sum.rec += parts.rec;
            sum.contrastive += parts.contrastive;
            sum.total += parts.total;
            n += 1;
        }
        let k = n.max(1) as f32;
        let rec = EpochRecord {
            epoch,
            step,
            l_rec: sum.rec / k,
            l_c: sum.contrastive / k,
            total: sum.total / k,
            lr,
            zoos: data
                .zoo_ids
                .iter()
                .zip(&touched)
                .filter(|(_, &t)| t)
                .map(|(z, _)| z.clone())
                .collect(),
        };
        if let Some(sink) = log_sink.as_deref_mut() {
            let line = serde_json::to_string(&rec).expect("serializable");
            writeln!(sink, "{line}").map_err(|e| Error::Storage {
                path: "<training log>".into(),
                source: e,
            })?;
        }
        log.push(rec);
    }
    Ok(TrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch;
    use crate::checkpoint::CheckpointMeta;
    use rand_distr::{Distribution, Normal};
    use std::sync::Arc;

    fn zoo(id: &str, n: usize, arch: &Arc<crate::arch::ArchitectureDescriptor>, seed: u64) -> (ZooManifest, Vec<ModelCheckpoint>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0f32, 0.3).unwrap();
        let mut m = ZooManifest::new(id, "toy", seed);
        let mut cks = Vec::new();
        for i in 0..n {
            let flat: Vec<f32> = (0..arch.num_params()).map(|_| d.sample(&mut rng)).collect();
            let c = ModelCheckpoint::from_flat(arch.clone(), &flat, CheckpointMeta::new("toy", 1, i as u64)).unwrap();
            m.add_checkpoint(&format!("{id}-m{i:04}"), &c).unwrap();
            cks.push(c);
        }
        m.assign_splits();
        (m, cks)
    }

    #[test]
    fn short_model_gives_one_padded_window() {
        let a = Arc::new(arch::mlp(&[3, 4, 2]).unwrap());
        let (m, c) = zoo("z", 10, &a, 0);
        let ds = TokenDataset::from_sources(&[ZooSource { manifest: &m, checkpoints: &c }], 4, 16, Split::Train).unwrap();
        let len = ds.entries[0].model.len();
        assert!(len < 16);
        let w = ds.epoch_windows(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(w.len(), ds.len());
        let w0 = &w[0].window;
        assert_eq!(w0.tokens.nrows(), 16);
        assert_eq!(w0.signal_rows().unwrap(), len);
        assert!(w0.mask.slice(s![len.., ..]).iter().all(|&v| v == 0));
        assert!(w0.tokens.slice(s![len.., ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_split_is_config_error() {
        let a = Arc::new(arch::mlp(&[3, 4, 2]).unwrap());
        let (m, c) = zoo("z", 1, &a, 0);
        let split = if m.checkpoints[0].split == Split::Test { Split::Train } else { Split::Test };
        let r = TokenDataset::from_sources(&[ZooSource { manifest: &m, checkpoints: &c }], 4, 8, split);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn batches_never_leave_a_lone_window() {
        let a = Arc::new(arch::mlp(&[3, 4, 2]).unwrap());
        let (m, c) = zoo("z", 1, &a, 0);
        let ds = TokenDataset::from_sources(&[ZooSource { manifest: &m, checkpoints: &c }], 4, 2, m.checkpoints[0].split).unwrap();
        let ws: Vec<Window> = (0..5).map(|i| ds.window(0, i % 2)).collect();
        let b = batches(ws, 2, true);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn toy_training_improves_and_logs_every_zoo() {
        let a = Arc::new(arch::mlp(&[6, 5, 3]).unwrap());
        let (m1, c1) = zoo("a", 12, &a, 1);
        let (m2, c2) = zoo("b", 12, &a, 2);
        let ds = TokenDataset::from_sources(
            &[
                ZooSource { manifest: &m1, checkpoints: &c1 },
                ZooSource { manifest: &m2, checkpoints: &c2 },
            ],
            7,
            8,
            Split::Train,
        )
        .unwrap();
        let cfg = SaneConfig {
            d_t: 7,
            window_size: 8,
            d_model: 16,
            d_lat: 8,
            d_proj: 4,
            n_heads: 2,
            n_layers: 1,
            epochs: 6,
            batch_size: 4,
            lr: 3e-3,
            ..SaneConfig::toy()
        };
        let mut sink = Vec::new();
        let out = train_sane(&cfg, &ds, Some(&mut sink)).unwrap();
        assert_eq!(out.log.len(), 6);
        assert!(out.log.last().unwrap().total < out.log[0].total);
        let lines: Vec<EpochRecord> = String::from_utf8(sink)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines, out.log);
        assert!(lines.iter().all(|r| r.zoos == vec!["a".to_string(), "b".to_string()]));
    }

    #[test]
    fn divergence_returns_last_good_model() {
        let a = Arc::new(arch::mlp(&[3, 4, 2]).unwrap());
        let (m, c) = zoo("z", 10, &a, 0);
        let ds = TokenDataset::from_sources(&[ZooSource { manifest: &m, checkpoints: &c }], 4, 8, Split::Train).unwrap();
        let cfg = SaneConfig {
            d_t: 4,
            window_size: 8,
            d_model: 8,
            d_lat: 4,
            d_proj: 2,
            n_heads: 2,
            n_layers: 1,
            epochs: 3,
            lr: f32::MAX,
            lr_schedule: crate::optim::LrSchedule::Constant,
            ..SaneConfig::toy()
        };
        match train_sane(&cfg, &ds, None) {
            Err(TrainError::Diverged { error, last_good, .. }) => {
                assert!(matches!(error, Error::NonFinite { .. }));
                assert!(last_good.named_params().all(|(_, p)| p.iter().all(|v| v.is_finite())));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
