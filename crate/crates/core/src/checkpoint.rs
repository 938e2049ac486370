use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{ArchitectureDescriptor, LayerKind};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub image_dataset: String,
    pub epoch: u32,
    pub seed: u64,
    /// Fraction in `[0, 1]`, absent when the model was never evaluated.
    pub test_accuracy: Option<f32>,
}

impl CheckpointMeta {
    pub fn new(image_dataset: impl Into<String>, epoch: u32, seed: u64) -> Self {
        CheckpointMeta {
            image_dataset: image_dataset.into(),
            epoch,
            seed,
            test_accuracy: None,
        }
    }
}

/// Running statistics of one batch-norm layer. Kept out of the learned tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BnStats {
    pub fn identity(n: usize) -> Self {
        BnStats {
            mean: vec![0.0; n],
            var: vec![1.0; n],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub arch: Arc<ArchitectureDescriptor>,
    /// Layer name to tensor of shape [`LayerSpec::tensor_shape`](crate::arch::LayerSpec::tensor_shape).
    pub tensors: BTreeMap<String, Array2<f32>>,
    /// Batch-norm layer name to running statistics.
    pub buffers: BTreeMap<String, BnStats>,
    pub meta: CheckpointMeta,
}

impl ModelCheckpoint {
    pub fn zeros(arch: Arc<ArchitectureDescriptor>, meta: CheckpointMeta) -> Self {
        let tensors = arch
            .layers
            .iter()
            .map(|l| {
                let [r, c] = l.tensor_shape();
                (l.name.clone(), Array2::zeros((r, c)))
            })
            .collect();
        let buffers = default_buffers(&arch);
        ModelCheckpoint {
            arch,
            tensors,
            buffers,
            meta,
        }
    }

    /// Builds a checkpoint from one flat vector in layer order (row-major).
    pub fn from_flat(arch: Arc<ArchitectureDescriptor>, flat: &[f32], meta: CheckpointMeta) -> Result<Self> {
        let total = arch.num_params();
        if flat.len() != total {
            return Err(Error::shape(format!("{total} parameters"), flat.len()));
        }
        let mut off = 0;
        let mut tensors = BTreeMap::new();
        for l in &arch.layers {
            let [r, c] = l.tensor_shape();
            let t = Array2::from_shape_vec((r, c), flat[off..off + r * c].to_vec()).expect("sized");
            off += r * c;
            tensors.insert(l.name.clone(), t);
        }
        let buffers = default_buffers(&arch);
        Ok(ModelCheckpoint {
            arch,
            tensors,
            buffers,
            meta,
        })
    }

    pub fn tensor(&self, layer: &str) -> &Array2<f32> {
        &self.tensors[layer]
    }

    /// All learned values in layer order, row-major.
    pub fn flat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.arch.num_params());
        for l in &self.arch.layers {
            out.extend(self.tensors[&l.name].iter().copied());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for l in &self.arch.layers {
            let t = self
                .tensors
                .get(&l.name)
                .ok_or_else(|| Error::Validation(format!("missing tensor for layer {}", l.name)))?;
            let [r, c] = l.tensor_shape();
            if t.dim() != (r, c) {
                return Err(Error::Validation(format!(
                    "layer {}: tensor shape {:?}, descriptor expects ({r}, {c})",
                    l.name,
                    t.dim()
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("layer {} has non-finite values", l.name)));
            }
        }
        if self.tensors.len() != self.arch.layers.len() {
            let extra: Vec<_> = self
                .tensors
                .keys()
                .filter(|k| self.arch.layer(k).is_none())
                .cloned()
                .collect();
            return Err(Error::Validation(format!("tensors without a layer: {extra:?}")));
        }
        for (name, stats) in &self.buffers {
            let l = self
                .arch
                .layer(name)
                .filter(|l| l.kind == LayerKind::Batchnorm)
                .ok_or_else(|| Error::Validation(format!("buffers for non-batchnorm layer {name}")))?;
            if stats.mean.len() != l.out_dim || stats.var.len() != l.out_dim {
                return Err(Error::Validation(format!("buffer width mismatch for {name}")));
            }
        }
        Ok(())
    }

    /// Hash over learned tensors only; batch-norm running statistics are excluded.
    pub fn trainable_hash(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.arch.layers {
            h.update(l.name.as_bytes());
            for v in self.tensors[&l.name].iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Bitwise equality of learned tensors and buffers.
    pub fn bit_eq(&self, other: &ModelCheckpoint) -> bool {
        fn same(a: &[f32], b: &[f32]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        self.arch.arch_id == other.arch.arch_id
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().all(|(k, t)| {
                other
                    .tensors
                    .get(k)
                    .is_some_and(|o| t.dim() == o.dim() && same(t.as_slice().unwrap(), o.as_slice().unwrap()))
            })
            && self.buffers.len() == other.buffers.len()
            && self.buffers.iter().all(|(k, b)| {
                other
                    .buffers
                    .get(k)
                    .is_some_and(|o| same(&b.mean, &o.mean) && same(&b.var, &o.var))
            })
    }
}

pub(crate) fn default_buffers(arch: &ArchitectureDescriptor) -> BTreeMap<String, BnStats> {
    arch.layers
        .iter()
        .filter(|l| l.kind == LayerKind::Batchnorm)
        .map(|l| (l.name.clone(), BnStats::identity(l.out_dim)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch;

    #[test]
    fn flat_round_trip() {
        let a = Arc::new(arch::mini_resnet([1, 8, 8], [2, 3], 2).unwrap());
        let flat: Vec<f32> = (0..a.num_params()).map(|i| i as f32 * 0.5).collect();
        let c = ModelCheckpoint::from_flat(a, &flat, CheckpointMeta::new("x", 1, 0)).unwrap();
        c.validate().unwrap();
        assert_eq!(c.flat(), flat);
    }

    #[test]
    fn validate_catches_shape_and_nan() {
        let a = Arc::new(arch::mlp(&[3, 2]).unwrap());
        let mut c = ModelCheckpoint::zeros(a, CheckpointMeta::new("x", 1, 0));
        c.validate().unwrap();
        c.tensors.get_mut("fc1").unwrap()[[0, 0]] = f32::NAN;
        assert!(c.validate().is_err());
        c.tensors.insert("fc1".into(), Array2::zeros((3, 3)));
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_ignores_running_stats() {
        let a = Arc::new(arch::mlp_bn(&[3, 4, 2]).unwrap());
        let c = ModelCheckpoint::zeros(a, CheckpointMeta::new("x", 1, 0));
        let mut d = c.clone();
        d.buffers.get_mut("bn1").unwrap().mean[0] = 3.0;
        assert_eq!(c.trainable_hash(), d.trainable_hash());
        assert!(!c.bit_eq(&d));
    }
}
