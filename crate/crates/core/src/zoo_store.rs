//! On-disk model zoo format.
//!
//! A zoo directory holds `manifest.json` and one `<checkpoint-id>.bin` per
//! checkpoint. Each `.bin` is raw little-endian `f32`: learned tensors in
//! layer order (row-major), then batch-norm running means and variances.
//! Byte offsets of every tensor are recorded in the manifest entry.
//!
//! ```text
//! manifest.json
//! {
//!   "format_version": 1,
//!   "zoo_id": "...", "dataset_tag": "...", "token_size": 289, "seed": 0,
//!   "architectures": { "<arch_id>": ArchitectureDescriptor, ... },
//!   "checkpoints": [
//!     { "id", "model_id", "file", "arch_id", "split": "train"|"val"|"test",
//!       "meta": { "image_dataset", "epoch", "seed", "test_accuracy" },
//!       "tensors": [ { "name", "offset", "shape": [rows, cols] } ],
//!       "buffers": [ { "name", "offset", "len" } ],
//!       "byte_len" }
//!   ]
//! }
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{ArchitectureDescriptor, LayerKind};
use crate::checkpoint::{BnStats, CheckpointMeta, ModelCheckpoint};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

/// Train/validation/test proportions.
pub const SPLIT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub offset: u64,
    pub shape: [usize; 2],
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct BufferEntry {
    pub name: String,
    pub offset: u64,
    /// Channels; the mean block is followed by an equally long variance block.
    pub len: usize,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct CheckpointEntry {
    pub id: String,
    pub model_id: String,
    pub file: String,
    pub arch_id: String,
    pub split: Split,
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorEntry>,
    pub buffers: Vec<BufferEntry>,
    pub byte_len: u64,
    /// Directory this entry loads from; set by [`read_zoo`], kept through merges.
    #[serde(skip)]
    pub origin: Option<PathBuf>,
}

impl PartialEq for CheckpointEntry {
    fn eq(&self, o: &Self) -> bool {
        self.id == o.id
            && self.model_id == o.model_id
            && self.file == o.file
            && self.arch_id == o.arch_id
            && self.split == o.split
            && self.meta == o.meta
            && self.tensors == o.tensors
            && self.buffers == o.buffers
            && self.byte_len == o.byte_len
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct ZooManifest {
    pub format_version: u32,
    pub zoo_id: String,
    pub dataset_tag: String,
    /// Preferred token width for this zoo's architectures, if declared.
    pub token_size: Option<usize>,
    pub seed: u64,
    pub architectures: BTreeMap<String, ArchitectureDescriptor>,
    pub checkpoints: Vec<CheckpointEntry>,
}

impl ZooManifest {
    pub fn new(zoo_id: impl Into<String>, dataset_tag: impl Into<String>, seed: u64) -> Self {
        ZooManifest {
            format_version: FORMAT_VERSION,
            zoo_id: zoo_id.into(),
            dataset_tag: dataset_tag.into(),
            token_size: None,
            seed,
            architectures: BTreeMap::new(),
            checkpoints: Vec::new(),
        }
    }

    /// Registers a checkpoint and its byte layout. The id is
    /// `<model_id>-e<epoch>`; splits start as train until [`Self::assign_splits`].
    pub fn add_checkpoint(&mut self, model_id: &str, ckpt: &ModelCheckpoint) -> Result<String> {
        ckpt.validate()?;
        let id = format!("{model_id}-e{:03}", ckpt.meta.epoch);
        if self.checkpoints.iter().any(|e| e.id == id) {
            return Err(Error::Validation(format!("duplicate checkpoint id {id}")));
        }
        self.architectures
            .entry(ckpt.arch.arch_id.clone())
            .or_insert_with(|| (*ckpt.arch).clone());
        let (tensors, buffers, byte_len) = layout_for(&ckpt.arch);
        self.checkpoints.push(CheckpointEntry {
            file: format!("{}.bin", sanitize(&id)),
            id: id.clone(),
            model_id: model_id.to_string(),
            arch_id: ckpt.arch.arch_id.clone(),
            split: Split::Train,
            meta: ckpt.meta.clone(),
            tensors,
            buffers,
            byte_len,
            origin: None,
        });
        Ok(id)
    }

    /// Deterministic split assignment from a seeded hash of each model id:
    /// models are ranked by hash and cut at 70/15/15. All snapshots of one
    /// model share a split.
    pub fn assign_splits(&mut self) {
        let models: BTreeSet<&str> = self.checkpoints.iter().map(|e| e.model_id.as_str()).collect();
        let mut ranked: Vec<(String, &str)> = models
            .into_iter()
            .map(|m| (split_hash(&self.zoo_id, self.seed, m), m))
            .collect();
        ranked.sort();
        let n = ranked.len();
        let n_train = (n as f64 * SPLIT_FRACTIONS[0]).round() as usize;
        let n_val = ((n as f64 * SPLIT_FRACTIONS[1]).round() as usize).min(n - n_train);
        let assignment: BTreeMap<String, Split> = ranked
            .iter()
            .enumerate()
            .map(|(i, (_, m))| {
                let s = if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
                (m.to_string(), s)
            })
            .collect();
        for e in &mut self.checkpoints {
            e.split = assignment[&e.model_id];
        }
    }

    pub fn splits(&self) -> BTreeMap<String, Split> {
        self.checkpoints.iter().map(|e| (e.id.clone(), e.split)).collect()
    }

    pub fn entry(&self, id: &str) -> Option<&CheckpointEntry> {
        self.checkpoints.iter().find(|e| e.id == id)
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &CheckpointEntry> {
        self.checkpoints.iter().filter(move |e| e.split == split)
    }

    /// Number of distinct models (not snapshots) per split.
    pub fn split_model_counts(&self) -> [usize; 3] {
        let mut seen = BTreeMap::new();
        for e in &self.checkpoints {
            seen.insert(e.model_id.as_str(), e.split);
        }
        let mut out = [0; 3];
        for s in seen.values() {
            out[*s as usize] += 1;
        }
        out
    }

    fn arch(&self, arch_id: &str) -> Result<Arc<ArchitectureDescriptor>> {
        self.architectures
            .get(arch_id)
            .cloned()
            .map(Arc::new)
            .ok_or_else(|| Error::Parse {
                field: "architectures".into(),
                message: format!("unknown arch_id {arch_id}"),
            })
    }
}

fn split_hash(zoo_id: &str, seed: u64, model_id: &str) -> String {
    let mut h = Sha256::new();
    h.update(zoo_id.as_bytes());
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    h.update(model_id.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn layout_for(arch: &ArchitectureDescriptor) -> (Vec<TensorEntry>, Vec<BufferEntry>, u64) {
    let mut off = 0u64;
    let mut tensors = Vec::with_capacity(arch.layers.len());
    for l in &arch.layers {
        let shape = l.tensor_shape();
        tensors.push(TensorEntry {
            name: l.name.clone(),
            offset: off,
            shape,
        });
        off += (shape[0] * shape[1] * 4) as u64;
    }
    let mut buffers = Vec::new();
    for l in arch.layers.iter().filter(|l| l.kind == LayerKind::Batchnorm) {
        buffers.push(BufferEntry {
            name: l.name.clone(),
            offset: off,
            len: l.out_dim,
        });
        off += (2 * l.out_dim * 4) as u64;
    }
    (tensors, buffers, off)
}

fn encode(ckpt: &ModelCheckpoint, entry: &CheckpointEntry) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(entry.byte_len as usize);
    for t in &entry.tensors {
        for v in ckpt.tensors[&t.name].iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    for b in &entry.buffers {
        let stats = &ckpt.buffers[&b.name];
        for v in stats.mean.iter().chain(&stats.var) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

fn read_f32s(bytes: &[u8], offset: u64, n: usize) -> Vec<f32> {
    let start = offset as usize;
    bytes[start..start + 4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Writes `manifest` and one tensor file per checkpoint into `dir`.
/// `checkpoints[i]` must correspond to `manifest.checkpoints[i]`.
pub fn write_zoo(dir: &Path, manifest: &ZooManifest, checkpoints: &[ModelCheckpoint]) -> Result<PathBuf> {
    if checkpoints.len() != manifest.checkpoints.len() {
        return Err(Error::Validation(format!(
            "manifest lists {} checkpoints, {} given",
            manifest.checkpoints.len(),
            checkpoints.len()
        )));
    }
    for (entry, ckpt) in manifest.checkpoints.iter().zip(checkpoints) {
        ckpt.validate()
            .map_err(|e| Error::Validation(format!("checkpoint {}: {e}", entry.id)))?;
        if entry.arch_id != ckpt.arch.arch_id || !manifest.architectures.contains_key(&entry.arch_id) {
            return Err(Error::Validation(format!("checkpoint {} architecture mismatch", entry.id)));
        }
        let (tensors, buffers, byte_len) = layout_for(&ckpt.arch);
        if tensors != entry.tensors || buffers != entry.buffers || byte_len != entry.byte_len {
            return Err(Error::Validation(format!("checkpoint {} layout mismatch", entry.id)));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    for (entry, ckpt) in manifest.checkpoints.iter().zip(checkpoints) {
        let path = dir.join(&entry.file);
        fs::write(&path, encode(ckpt, entry)).map_err(|e| Error::storage(&path, e))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    let mut f = fs::File::create(&path).map_err(|e| Error::storage(&path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::storage(&path, e))?;
    Ok(dir.to_path_buf())
}

/// Lazy view over a zoo on disk. Checkpoints load individually.
#[derive(Clone, Debug)]
pub struct ZooReader {
    pub manifest: ZooManifest,
    pub root: PathBuf,
}

/// Parses the manifest and checks that every tensor file exists with the
/// recorded size. Tensor data is not loaded.
pub fn read_zoo(dir: &Path) -> Result<ZooReader> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::storage(&path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let mut manifest: ZooManifest = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Parse {
            field: "format_version".into(),
            message: format!("unsupported version {}", manifest.format_version),
        });
    }
    for arch in manifest.architectures.values() {
        arch.validate().map_err(|e| Error::Parse {
            field: format!("architectures.{}", arch.arch_id),
            message: e.to_string(),
        })?;
    }
    for (i, e) in manifest.checkpoints.iter_mut().enumerate() {
        let arch = manifest.architectures.get(&e.arch_id).ok_or_else(|| Error::Parse {
            field: format!("checkpoints[{i}].arch_id"),
            message: format!("unknown arch_id {}", e.arch_id),
        })?;
        if layout_for(arch) != (e.tensors.clone(), e.buffers.clone(), e.byte_len) {
            return Err(Error::Parse {
                field: format!("checkpoints[{i}].tensors"),
                message: "offsets do not match the architecture".into(),
            });
        }
        check_file(dir, e)?;
        e.origin = Some(dir.to_path_buf());
    }
    Ok(ZooReader {
        manifest,
        root: dir.to_path_buf(),
    })
}

fn check_file(dir: &Path, e: &CheckpointEntry) -> Result<()> {
    let path = dir.join(&e.file);
    let md = fs::metadata(&path).map_err(|_| Error::Integrity {
        file: e.file.clone(),
        message: "tensor file is missing".into(),
    })?;
    if md.len() != e.byte_len {
        return Err(Error::Integrity {
            file: e.file.clone(),
            message: format!("expected {} bytes, found {}", e.byte_len, md.len()),
        });
    }
    Ok(())
}

impl ZooReader {
    pub fn load(&self, id: &str) -> Result<ModelCheckpoint> {
        let entry = self
            .manifest
            .entry(id)
            .ok_or_else(|| Error::Validation(format!("no checkpoint {id} in zoo {}", self.manifest.zoo_id)))?;
        load_entry(&self.manifest, entry, &self.root)
    }

    pub fn load_all(&self) -> Result<Vec<ModelCheckpoint>> {
        self.manifest
            .checkpoints
            .iter()
            .map(|e| load_entry(&self.manifest, e, &self.root))
            .collect()
    }
}

/// Loads one entry, from its recorded origin if it has one.
pub fn load_entry(manifest: &ZooManifest, entry: &CheckpointEntry, fallback_dir: &Path) -> Result<ModelCheckpoint> {
    let dir = entry.origin.as_deref().unwrap_or(fallback_dir);
    check_file(dir, entry)?;
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::storage(&path, e))?;
    if bytes.len() as u64 != entry.byte_len {
        return Err(Error::Integrity {
            file: entry.file.clone(),
            message: format!("expected {} bytes, found {}", entry.byte_len, bytes.len()),
        });
    }
    let arch = manifest.arch(&entry.arch_id)?;
    let mut tensors = BTreeMap::new();
    for t in &entry.tensors {
        let [r, c] = t.shape;
        let data = read_f32s(&bytes, t.offset, r * c);
        tensors.insert(t.name.clone(), Array2::from_shape_vec((r, c), data).expect("sized"));
    }
    let mut buffers = BTreeMap::new();
    for b in &entry.buffers {
        let all = read_f32s(&bytes, b.offset, 2 * b.len);
        buffers.insert(
            b.name.clone(),
            BnStats {
                mean: all[..b.len].to_vec(),
                var: all[b.len..].to_vec(),
            },
        );
    }
    let ckpt = ModelCheckpoint {
        arch,
        tensors,
        buffers,
        meta: entry.meta.clone(),
    };
    ckpt.validate().map_err(|e| Error::Integrity {
        file: entry.file.clone(),
        message: e.to_string(),
    })?;
    Ok(ckpt)
}

/// Union of several zoos. Split assignments, dataset tags and origins are
/// kept per checkpoint; the merged id is derived from the sorted source ids.
pub fn merge_zoos(zoos: &[ZooManifest]) -> Result<ZooManifest> {
    if zoos.is_empty() {
        return Err(Error::Validation("merge_zoos needs at least one zoo".into()));
    }
    let token_sizes: BTreeSet<usize> = zoos.iter().filter_map(|z| z.token_size).collect();
    if token_sizes.len() > 1 {
        return Err(Error::Incompatible(format!(
            "zoos declare different token sizes {token_sizes:?}"
        )));
    }
    let mut sorted: Vec<&ZooManifest> = zoos.iter().collect();
    sorted.sort_by(|a, b| a.zoo_id.cmp(&b.zoo_id));
    let ids: Vec<&str> = sorted.iter().map(|z| z.zoo_id.as_str()).collect();
    let tags: BTreeSet<&str> = sorted.iter().map(|z| z.dataset_tag.as_str()).collect();
    let mut merged = ZooManifest::new(
        format!("merged({})", ids.join("+")),
        tags.into_iter().collect::<Vec<_>>().join("+"),
        sorted[0].seed,
    );
    merged.token_size = token_sizes.into_iter().next();
    let mut seen = BTreeSet::new();
    for z in sorted {
        for (id, a) in &z.architectures {
            merged.architectures.entry(id.clone()).or_insert_with(|| a.clone());
        }
        for e in &z.checkpoints {
            if !seen.insert(e.id.clone()) {
                return Err(Error::Incompatible(format!("checkpoint id {} appears in two zoos", e.id)));
            }
            merged.checkpoints.push(e.clone());
        }
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch;
    use crate::checkpoint::CheckpointMeta;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_ckpt(arch: &Arc<ArchitectureDescriptor>, seed: u64) -> ModelCheckpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat: Vec<f32> = (0..arch.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut c = ModelCheckpoint::from_flat(arch.clone(), &flat, CheckpointMeta::new("toy", 25, seed)).unwrap();
        for b in c.buffers.values_mut() {
            b.mean.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            b.var.iter_mut().for_each(|v| *v = rng.random_range(0.1..2.0));
        }
        c
    }

    fn zoo(n: usize, zoo_id: &str, arch: &Arc<ArchitectureDescriptor>) -> (ZooManifest, Vec<ModelCheckpoint>) {
        let mut m = ZooManifest::new(zoo_id, "toy", 7);
        let mut cs = Vec::new();
        for i in 0..n {
            let c = random_ckpt(arch, i as u64);
            m.add_checkpoint(&format!("{zoo_id}-m{i:04}"), &c).unwrap();
            cs.push(c);
        }
        m.assign_splits();
        (m, cs)
    }

    #[test]
    fn empty_zoo_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = ZooManifest::new("empty", "none", 0);
        write_zoo(dir.path(), &m, &[]).unwrap();
        let r = read_zoo(dir.path()).unwrap();
        assert_eq!(r.manifest, m);
        assert!(r.load_all().unwrap().is_empty());
    }

    #[test]
    fn mlp_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let a = Arc::new(arch::mlp(&[5, 4, 3]).unwrap());
        let (m, cs) = zoo(1, "z", &a);
        write_zoo(dir.path(), &m, &cs).unwrap();
        let r = read_zoo(dir.path()).unwrap();
        assert_eq!(r.manifest, m);
        let back = r.load(&m.checkpoints[0].id).unwrap();
        assert!(back.bit_eq(&cs[0]));
        // raw bytes match the in-memory values
        let raw = fs::read(dir.path().join(&m.checkpoints[0].file)).unwrap();
        let first = f32::from_le_bytes(raw[..4].try_into().unwrap());
        assert_eq!(first.to_bits(), cs[0].tensor("fc1")[[0, 0]].to_bits());
    }

    #[test]
    fn batchnorm_buffers_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = Arc::new(arch::mini_resnet([1, 8, 8], [2, 3], 2).unwrap());
        let (m, cs) = zoo(3, "res", &a);
        write_zoo(dir.path(), &m, &cs).unwrap();
        let back = read_zoo(dir.path()).unwrap().load_all().unwrap();
        for (a, b) in cs.iter().zip(&back) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn split_sizes_for_200_models() {
        let a = Arc::new(arch::mlp(&[2, 2]).unwrap());
        let (m, _) = zoo(200, "cnn", &a);
        assert_eq!(m.split_model_counts(), [140, 30, 30]);
    }

    #[test]
    fn split_is_deterministic_and_position_free() {
        let a = Arc::new(arch::mlp(&[2, 2]).unwrap());
        let (m1, _) = zoo(30, "z", &a);
        let (mut m2, _) = zoo(30, "z", &a);
        m2.checkpoints.reverse();
        m2.assign_splits();
        let s1 = m1.splits();
        assert_eq!(s1, m2.splits());
        let mut m3 = m1.clone();
        m3.seed = 8;
        m3.assign_splits();
        assert_ne!(s1, m3.splits());
    }

    #[test]
    fn missing_file_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let a = Arc::new(arch::mlp(&[3, 2]).unwrap());
        let (m, cs) = zoo(2, "z", &a);
        write_zoo(dir.path(), &m, &cs).unwrap();
        fs::remove_file(dir.path().join(&m.checkpoints[1].file)).unwrap();
        match read_zoo(dir.path()) {
            Err(Error::Integrity { file, .. }) => assert_eq!(file, m.checkpoints[1].file),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_reports_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let a = Arc::new(arch::mlp(&[3, 2]).unwrap());
        let (m, cs) = zoo(1, "z", &a);
        write_zoo(dir.path(), &m, &cs).unwrap();
        let path = dir.path().join(&m.checkpoints[0].file);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let err = read_zoo(dir.path()).unwrap_err().to_string();
        assert!(err.contains("expected 32 bytes, found 28"), "{err}");
    }

    #[test]
    fn malformed_index_names_field() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            r#"{"format_version":1,"zoo_id":"z","dataset_tag":"t","token_size":null,"seed":"x","architectures":{},"checkpoints":[]}"#,
        )
        .unwrap();
        match read_zoo(dir.path()) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "seed"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_rejected_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let a = Arc::new(arch::mlp(&[3, 2]).unwrap());
        let (m, mut cs) = zoo(1, "z", &a);
        cs[0].tensors.insert("fc1".into(), Array2::zeros((1, 1)));
        assert!(matches!(write_zoo(dir.path(), &m, &cs), Err(Error::Validation(_))));
    }

    #[test]
    fn merge_two_zoos() {
        let a = Arc::new(arch::mlp(&[2, 2]).unwrap());
        let (z1, _) = zoo(100, "a", &a);
        let (mut z2, _) = zoo(100, "b", &a);
        z2.dataset_tag = "other".into();
        let m = merge_zoos(&[z2.clone(), z1.clone()]).unwrap();
        assert_eq!(m.checkpoints.len(), 200);
        assert_eq!(m.zoo_id, "merged(a+b)");
        assert_eq!(m.entry(&z2.checkpoints[0].id).unwrap().split, z2.checkpoints[0].split);
        let single = merge_zoos(std::slice::from_ref(&z1)).unwrap();
        assert_eq!(single.checkpoints, z1.checkpoints);
    }

    #[test]
    fn merge_rejects_token_size_conflict() {
        let mut a = ZooManifest::new("a", "x", 0);
        let mut b = ZooManifest::new("b", "y", 0);
        a.token_size = Some(289);
        b.token_size = Some(288);
        assert!(matches!(merge_zoos(&[a, b]), Err(Error::Incompatible(_))));
    }
}
