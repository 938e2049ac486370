//! Trains populations of small image classifiers into model zoos.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{self, ArchitectureDescriptor};
use crate::checkpoint::{CheckpointMeta, ModelCheckpoint};
use crate::data::{ImageSet, TaskData};
use crate::error::{Error, Result};
use crate::net::{self, InitScheme, NetParams};
use crate::optim::AdamW;
use crate::zoo_store::ZooManifest;

/// First and last epoch retained when training runs at least this long.
pub const EPOCH_WINDOW: (u32, u32) = (21, 25);

/// Architecture given by reference name or full descriptor.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(untagged)]
pub enum ArchRef {
    Name(String),
    Descriptor(ArchitectureDescriptor),
}

impl ArchRef {
    pub fn resolve(&self, input_shape: [usize; 3], classes: usize) -> Result<ArchitectureDescriptor> {
        match self {
            ArchRef::Name(n) => arch::by_name(n, input_shape, classes),
            ArchRef::Descriptor(d) => {
                d.validate()?;
                Ok(d.clone())
            }
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default)]
pub struct HyperGrid {
    pub lr: Vec<f32>,
    pub weight_decay: Vec<f32>,
    pub init: Vec<InitScheme>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            lr: vec![3e-3, 1e-3],
            weight_decay: vec![0.0, 1e-4],
            init: vec![InitScheme::KaimingUniform, InitScheme::KaimingNormal],
        }
    }
}

impl HyperGrid {
    pub fn len(&self) -> usize {
        self.lr.len() * self.weight_decay.len() * self.init.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid point `i` (wrapping), enumerated as a row-major product.
    pub fn point(&self, i: usize) -> (f32, f32, InitScheme) {
        let i = i % self.len();
        let n_init = self.init.len();
        let n_wd = self.weight_decay.len();
        (
            self.lr[i / (n_init * n_wd)],
            self.weight_decay[(i / n_init) % n_wd],
            self.init[i % n_init],
        )
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct PopulationSpec {
    pub zoo_id: String,
    pub arch: ArchRef,
    pub dataset_tag: String,
    pub n_models: usize,
    pub epochs: u32,
    pub seed_base: u64,
    #[serde(default)]
    pub hyperparameter_grid: HyperGrid,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Preferred token width recorded in the manifest.
    #[serde(default)]
    pub token_size: Option<usize>,
}

fn default_batch() -> usize {
    32
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_models == 0 {
            return Err(Error::Config("n_models must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.hyperparameter_grid.is_empty() {
            return Err(Error::Config("hyperparameter grid is empty".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Epochs whose snapshots are kept.
    pub fn retained_epochs(&self) -> std::ops::RangeInclusive<u32> {
        if self.epochs >= EPOCH_WINDOW.1 {
            EPOCH_WINDOW.0..=EPOCH_WINDOW.1
        } else {
            1..=self.epochs
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFailure {
    pub model_id: String,
    pub epoch: u32,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct Population {
    pub manifest: ZooManifest,
    pub checkpoints: Vec<ModelCheckpoint>,
    pub failures: Vec<ModelFailure>,
}

impl Population {
    /// Test accuracy of each model's last retained snapshot.
    pub fn final_accuracies(&self) -> Vec<f32> {
        let last = self.checkpoints.iter().map(|c| c.meta.epoch).max().unwrap_or(0);
        self.checkpoints
            .iter()
            .filter(|c| c.meta.epoch == last)
            .filter_map(|c| c.meta.test_accuracy)
            .collect()
    }

    /// Population mean and standard deviation of final test accuracy.
    pub fn accuracy_summary(&self) -> (f32, f32) {
        mean_std(&self.final_accuracies())
    }

    /// Checkpoints at the given epoch.
    pub fn at_epoch(&self, epoch: u32) -> Vec<&ModelCheckpoint> {
        self.checkpoints.iter().filter(|c| c.meta.epoch == epoch).collect()
    }
}

pub(crate) fn mean_std(v: &[f32]) -> (f32, f32) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f32;
    let m = v.iter().sum::<f32>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f32>() / n;
    (m, var.sqrt())
}

/// Options for one classifier training run.
#[derive(Clone, Copy, Debug)]
pub struct TrainOptions {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
}

/// Trains `params` in place with AdamW and cross-entropy. `on_epoch` runs
/// after every epoch with the epoch number and mean training loss.
pub fn train_classifier(
    params: &mut NetParams,
    data: &ImageSet,
    opts: TrainOptions,
    rng: &mut ChaCha8Rng,
    mut on_epoch: impl FnMut(u32, f32, &NetParams) -> Result<()>,
) -> Result<()> {
    let mut opt = AdamW::new(opts.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=opts.epochs {
        order.shuffle(rng);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(opts.batch_size).enumerate() {
            let (x, y) = data.batch(chunk);
            let (logits, tape) = params.forward_train(x)?;
            let (loss, dl) = net::cross_entropy(&logits, &y);
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch: epoch as usize,
                    step,
                });
            }
            let grads = params.backward(tape, dl);
            opt.begin_step();
            for (slot, (w, g)) in params.weights.iter_mut().zip(&grads).enumerate() {
                opt.update(
                    slot,
                    w.as_slice_mut().expect("standard layout"),
                    g.as_slice().expect("standard layout"),
                    opts.lr,
                );
            }
            total += f64::from(loss);
            batches += 1;
        }
        if params.weights.iter().any(|w| w.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                epoch: epoch as usize,
                step: batches,
            });
        }
        on_epoch(epoch, (total / batches.max(1) as f64) as f32, params)?;
    }
    Ok(())
}

/// Trains one model per grid point / seed and collects the retained snapshots.
/// Models whose loss diverges are dropped and listed in `failures`.
pub fn train_population(spec: &PopulationSpec, data: &TaskData) -> Result<Population> {
    spec.validate()?;
    let arch = Arc::new(spec.arch.resolve(data.train.shape, data.classes())?);
    let retained = spec.retained_epochs();
    let mut manifest = ZooManifest::new(&spec.zoo_id, &spec.dataset_tag, spec.seed_base);
    manifest.token_size = spec.token_size;
    let mut checkpoints = Vec::new();
    let mut failures = Vec::new();
    for i in 0..spec.n_models {
        let model_id = format!("{}-m{i:04}", spec.zoo_id);
        let seed = spec.seed_base + i as u64;
        let (lr, weight_decay, init) = spec.hyperparameter_grid.point(i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = NetParams::init(arch.clone(), init, &mut rng)?;
        let mut snaps = Vec::new();
        let result = train_classifier(
            &mut params,
            &data.train,
            TrainOptions {
                epochs: spec.epochs,
                batch_size: spec.batch_size,
                lr,
                weight_decay,
            },
            &mut rng,
            |epoch, _loss, p| {
                if retained.contains(&epoch) {
                    let mut meta = CheckpointMeta::new(&spec.dataset_tag, epoch, seed);
                    meta.test_accuracy = Some(net::accuracy(p, &data.test)?);
                    snaps.push(p.to_checkpoint(meta));
                }
                Ok(())
            },
        );
        match result {
            Ok(()) => {
                for c in snaps {
                    manifest.add_checkpoint(&model_id, &c)?;
                    checkpoints.push(c);
                }
            }
            Err(e @ Error::NonFinite { .. }) => failures.push(ModelFailure {
                model_id,
                epoch: match e {
                    Error::NonFinite { epoch, .. } => epoch as u32,
                    _ => 0,
                },
                message: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    manifest.assign_splits();
    Ok(Population {
        manifest,
        checkpoints,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_task, DataConfig};

    fn spec(n: usize, epochs: u32) -> PopulationSpec {
        PopulationSpec {
            zoo_id: "t".into(),
            arch: ArchRef::Name("small_cnn".into()),
            dataset_tag: "synth-mnist".into(),
            n_models: n,
            epochs,
            seed_base: 100,
            hyperparameter_grid: HyperGrid::default(),
            batch_size: 16,
            token_size: Some(289),
        }
    }

    #[test]
    fn grid_enumerates_product() {
        let g = HyperGrid::default();
        assert_eq!(g.len(), 8);
        let pts: std::collections::BTreeSet<String> = (0..8).map(|i| format!("{:?}", g.point(i))).collect();
        assert_eq!(pts.len(), 8);
        assert_eq!(g.point(0), g.point(8));
    }

    #[test]
    fn retention_window() {
        assert_eq!(spec(1, 25).retained_epochs(), 21..=25);
        assert_eq!(spec(1, 30).retained_epochs(), 21..=25);
        assert_eq!(spec(1, 3).retained_epochs(), 1..=3);
    }

    #[test]
    fn smoke_one_model_one_epoch() {
        let data = synth_task(
            "synth-mnist",
            &DataConfig {
                n_train: 10,
                n_val: 10,
                n_test: 10,
                seed: 0,
            },
        );
        let pop = train_population(&spec(1, 1), &data).unwrap();
        assert_eq!(pop.checkpoints.len(), 1);
        assert!(pop.failures.is_empty());
        let c = &pop.checkpoints[0];
        c.validate().unwrap();
        assert!(c.meta.test_accuracy.is_some());
        assert_eq!(pop.manifest.checkpoints.len(), 1);
    }

    #[test]
    fn divergent_model_is_recorded_not_fatal() {
        let data = synth_task(
            "synth-mnist",
            &DataConfig {
                n_train: 20,
                n_val: 10,
                n_test: 10,
                seed: 0,
            },
        );
        let mut s = spec(2, 2);
        s.hyperparameter_grid = HyperGrid {
            lr: vec![1e-3, f32::INFINITY],
            weight_decay: vec![0.0],
            init: vec![InitScheme::KaimingUniform],
        };
        let pop = train_population(&s, &data).unwrap();
        assert_eq!(pop.failures.len(), 1);
        assert_eq!(pop.failures[0].model_id, "t-m0001");
        assert_eq!(pop.checkpoints.len(), 2);
    }
}
