//! Training-free aggregation baselines: uniform model soups and weight-matching
//! permutation alignment.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchitectureDescriptor, LayerKind, Op};
use crate::checkpoint::{BnStats, ModelCheckpoint};
use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::lap;
use crate::net;
use crate::sampler::condition_batchnorm;
use crate::zoogen::mean_std;

fn same_arch(a: &ModelCheckpoint, b: &ModelCheckpoint) -> Result<()> {
    if a.arch.arch_id != b.arch.arch_id {
        return Err(Error::Validation(format!(
            "architecture mismatch: {} vs {}",
            a.arch.arch_id, b.arch.arch_id
        )));
    }
    Ok(())
}

/// Element-wise mean of every tensor. Batch-norm buffers are averaged too,
/// but callers re-derive them by conditioning before evaluation.
pub fn soup(models: &[ModelCheckpoint]) -> Result<ModelCheckpoint> {
    let first = models
        .first()
        .ok_or_else(|| Error::Validation("soup needs at least one model".into()))?;
    for m in &models[1..] {
        same_arch(first, m)?;
    }
    if models.len() == 1 {
        return Ok(first.clone());
    }
    let k = models.len() as f64;
    let mut out = first.clone();
    for (name, t) in out.tensors.iter_mut() {
        let mut acc = t.mapv(f64::from);
        for m in &models[1..] {
            acc.zip_mut_with(&m.tensors[name], |a, &b| *a += f64::from(b));
        }
        *t = acc.mapv(|v| (v / k) as f32);
    }
    for (name, st) in out.buffers.iter_mut() {
        for (i, (mean, var)) in st.mean.iter_mut().zip(st.var.iter_mut()).enumerate() {
            *mean = (models.iter().map(|m| f64::from(m.buffers[name].mean[i])).sum::<f64>() / k) as f32;
            *var = (models.iter().map(|m| f64::from(m.buffers[name].var[i])).sum::<f64>() / k) as f32;
        }
    }
    Ok(out)
}

/// Channel spaces of a network and how each layer touches them.
#[derive(Clone, Debug)]
pub struct PermutationGroups {
    /// Width of each group.
    pub sizes: Vec<usize>,
    /// Groups tied to input or output, never permuted.
    pub fixed: Vec<bool>,
    /// Per layer: group of the rows (outputs), if any.
    pub out_group: Vec<Option<usize>>,
    /// Per conv/linear layer: group of the input channels and the number of
    /// consecutive weight columns per channel.
    pub in_group: Vec<Option<(usize, usize)>>,
}

struct Walker {
    parent: Vec<usize>,
    sizes: Vec<usize>,
    layer_in: Vec<Option<usize>>,
    layer_out: Vec<Option<usize>>,
}

impl Walker {
    fn space(&mut self, n: usize) -> usize {
        self.parent.push(self.parent.len());
        self.sizes.push(n);
        self.parent.len() - 1
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn walk(&mut self, arch: &ArchitectureDescriptor, ops: &[Op], mut cur: usize) -> usize {
        for op in ops {
            match op {
                Op::Conv { layer, .. } | Op::Linear { layer } => {
                    self.layer_in[*layer] = Some(cur);
                    cur = self.space(arch.layers[*layer].out_dim);
                    self.layer_out[*layer] = Some(cur);
                }
                Op::BatchNorm { layer } => self.layer_out[*layer] = Some(cur),
                Op::Residual { body, shortcut } => {
                    let b = self.walk(arch, body, cur);
                    let s = self.walk(arch, shortcut, cur);
                    let (rb, rs) = (self.find(b), self.find(s));
                    self.parent[rs] = rb;
                    cur = b;
                }
                Op::Relu | Op::MaxPool { .. } | Op::GlobalAvgPool | Op::Flatten => {}
            }
        }
        cur
    }
}

impl PermutationGroups {
    /// Derives groups from the topology: every conv/linear output opens a
    /// space, batch norm acts on the current one, and the two branches of a
    /// residual block share one.
    pub fn from_arch(arch: &ArchitectureDescriptor) -> Result<Self> {
        if arch.topology.is_empty() {
            return Err(Error::Structure("alignment needs an architecture with a topology".into()));
        }
        let n = arch.layers.len();
        let mut w = Walker {
            parent: Vec::new(),
            sizes: Vec::new(),
            layer_in: vec![None; n],
            layer_out: vec![None; n],
        };
        let input = w.space(arch.input_shape[0]);
        let output = w.walk(arch, &arch.topology, input);
        let roots: Vec<usize> = (0..w.parent.len()).map(|i| w.find(i)).collect();
        let mut index = BTreeMap::new();
        let mut sizes = Vec::new();
        for (i, &r) in roots.iter().enumerate() {
            index.entry(r).or_insert_with(|| {
                sizes.push(w.sizes[i]);
                sizes.len() - 1
            });
        }
        let mut fixed = vec![false; sizes.len()];
        fixed[index[&roots[input]]] = true;
        fixed[index[&roots[output]]] = true;
        let out_group = w.layer_out.iter().map(|o| o.map(|s| index[&roots[s]])).collect();
        let mut in_group = vec![None; n];
        for (l, spec) in arch.layers.iter().enumerate() {
            if let Some(s) = w.layer_in[l] {
                let g = index[&roots[s]];
                if spec.fan_in % sizes[g] != 0 {
                    return Err(Error::Structure(format!(
                        "layer {} fan-in {} is not a multiple of {} channels",
                        spec.name, spec.fan_in, sizes[g]
                    )));
                }
                in_group[l] = Some((g, spec.fan_in / sizes[g]));
            }
        }
        Ok(PermutationGroups {
            sizes,
            fixed,
            out_group,
            in_group,
        })
    }

    pub fn identity(&self) -> Vec<Vec<usize>> {
        self.sizes.iter().map(|&n| (0..n).collect()).collect()
    }
}

/// Applies `perms` to `ckpt`: output channel `i` of the result is channel
/// `perms[g][i]` of the input. Batch-norm buffers follow their channels.
pub fn apply_permutations(ckpt: &ModelCheckpoint, groups: &PermutationGroups, perms: &[Vec<usize>]) -> ModelCheckpoint {
    let mut out = ckpt.clone();
    for (l, spec) in ckpt.arch.layers.iter().enumerate() {
        let src = &ckpt.tensors[&spec.name];
        let dst = out.tensors.get_mut(&spec.name).expect("validated checkpoint");
        let rows = groups.out_group[l].map(|g| &perms[g]);
        match spec.kind {
            LayerKind::Batchnorm => {
                if let Some(p) = rows {
                    for r in 0..2 {
                        for (i, &j) in p.iter().enumerate() {
                            dst[[r, i]] = src[[r, j]];
                        }
                    }
                    let st = &ckpt.buffers[&spec.name];
                    out.buffers.insert(
                        spec.name.clone(),
                        BnStats {
                            mean: p.iter().map(|&j| st.mean[j]).collect(),
                            var: p.iter().map(|&j| st.var[j]).collect(),
                        },
                    );
                }
            }
            LayerKind::Linear | LayerKind::Conv2d => {
                let cols = groups.in_group[l].map(|(g, rep)| (&perms[g], rep));
                for i in 0..spec.out_dim {
                    let si = rows.map_or(i, |p| p[i]);
                    if let Some((p, rep)) = cols {
                        for (c, &sc) in p.iter().enumerate() {
                            for t in 0..rep {
                                dst[[i, c * rep + t]] = src[[si, sc * rep + t]];
                            }
                        }
                    } else {
                        for c in 0..spec.fan_in {
                            dst[[i, c]] = src[[si, c]];
                        }
                    }
                    if spec.has_bias {
                        dst[[i, spec.fan_in]] = src[[si, spec.fan_in]];
                    }
                }
            }
        }
    }
    out
}

/// Squared L2 distance over all learned tensors.
pub fn weight_distance_sq(a: &ModelCheckpoint, b: &ModelCheckpoint) -> f64 {
    a.tensors
        .iter()
        .map(|(k, t)| {
            t.iter()
                .zip(b.tensors[k].iter())
                .map(|(x, y)| f64::from(x - y).powi(2))
                .sum::<f64>()
        })
        .sum()
}

#[derive(Clone, Debug)]
pub struct Alignment {
    pub aligned: ModelCheckpoint,
    /// One permutation per group; fixed groups are the identity.
    pub permutations: Vec<Vec<usize>>,
    pub groups: PermutationGroups,
    /// Squared distance to the reference before alignment and after each sweep.
    pub distances: Vec<f64>,
    pub sweeps: usize,
}

/// Score of placing target channel `j` at reference channel `i` for group `g`,
/// with every other group already permuted in `tgt`.
fn group_score(
    reference: &ModelCheckpoint,
    tgt: &ModelCheckpoint,
    groups: &PermutationGroups,
    g: usize,
) -> Vec<Vec<f64>> {
    let n = groups.sizes[g];
    let mut s = vec![vec![0.0f64; n]; n];
    for (l, spec) in reference.arch.layers.iter().enumerate() {
        let a = &reference.tensors[&spec.name];
        let b = &tgt.tensors[&spec.name];
        if groups.out_group[l] == Some(g) {
            row_scores(a, b, spec.kind == LayerKind::Batchnorm, &mut s);
        }
        if let Some((gi, rep)) = groups.in_group[l] {
            if gi == g {
                for i in 0..n {
                    for j in 0..n {
                        let mut acc = 0.0f64;
                        for r in 0..a.nrows() {
                            for t in 0..rep {
                                acc += f64::from(a[[r, i * rep + t]]) * f64::from(b[[r, j * rep + t]]);
                            }
                        }
                        s[i][j] += acc;
                    }
                }
            }
        }
    }
    s
}

fn row_scores(a: &Array2<f32>, b: &Array2<f32>, batchnorm: bool, s: &mut [Vec<f64>]) {
    if batchnorm {
        // Batch norm: channels are columns of the [gamma; beta] tensor.
        for (i, row) in s.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += (0..2).map(|r| f64::from(a[[r, i]]) * f64::from(b[[r, j]])).sum::<f64>();
            }
        }
    } else {
        for (i, row) in s.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += a.row(i).iter().zip(b.row(j)).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum::<f64>();
            }
        }
    }
}

/// Weight matching by coordinate descent: each sweep solves one assignment
/// problem per permutable group, until a sweep changes nothing or
/// `max_iters` sweeps have run. The aligned model computes the same function
/// as `target`.
pub fn rebasin_align(reference: &ModelCheckpoint, target: &ModelCheckpoint, max_iters: usize) -> Result<Alignment> {
    same_arch(reference, target)?;
    let groups = PermutationGroups::from_arch(&reference.arch)?;
    let mut perms = groups.identity();
    let mut distances = vec![weight_distance_sq(reference, target)];
    let mut sweeps = 0;
    for _ in 0..max_iters {
        sweeps += 1;
        let mut changed = false;
        for g in 0..groups.sizes.len() {
            if groups.fixed[g] {
                continue;
            }
            let mut partial = perms.clone();
            partial[g] = (0..groups.sizes[g]).collect();
            let tgt = apply_permutations(target, &groups, &partial);
            let s = group_score(reference, &tgt, &groups, g);
            let assign = lap::maximize(&s);
            let current: f64 = perms[g].iter().enumerate().map(|(i, &j)| s[i][j]).sum();
            let best: f64 = assign.iter().enumerate().map(|(i, &j)| s[i][j]).sum();
            if assign != perms[g] && best > current {
                perms[g] = assign;
                changed = true;
            }
        }
        distances.push(weight_distance_sq(reference, &apply_permutations(target, &groups, &perms)));
        if !changed {
            break;
        }
    }
    Ok(Alignment {
        aligned: apply_permutations(target, &groups, &perms),
        permutations: perms,
        groups,
        distances,
        sweeps,
    })
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default)]
pub struct SoupOptions {
    pub ks: Vec<usize>,
    pub repeats: usize,
    pub aligned: bool,
    pub max_iters: usize,
    pub seed: u64,
    /// Batches used for batch-norm conditioning of each soup.
    pub condition_batches: usize,
}

impl Default for SoupOptions {
    fn default() -> Self {
        SoupOptions {
            ks: vec![1, 2, 4, 8],
            repeats: 5,
            aligned: false,
            max_iters: 50,
            seed: 0,
            condition_batches: 8,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct SoupPoint {
    pub k: usize,
    pub mean: f32,
    pub std: f32,
    pub accuracies: Vec<f32>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct SoupCurve {
    pub aligned: bool,
    /// Accuracy of every individual model.
    pub single_mean: f32,
    pub single_std: f32,
    pub points: Vec<SoupPoint>,
}

fn evaluate(ckpt: &ModelCheckpoint, data: &TaskData, batches: usize) -> Result<f32> {
    let c = condition_batchnorm(ckpt, &data.train, batches, 64)?;
    net::checkpoint_accuracy(&c, &data.test)
}

/// Soup accuracy against the number of averaged models. Subsets depend only
/// on `seed`, so aligned and unaligned runs see the same models.
pub fn soup_curve(models: &[ModelCheckpoint], data: &TaskData, opts: &SoupOptions) -> Result<SoupCurve> {
    if models.is_empty() {
        return Err(Error::Config("soup curve needs at least one model".into()));
    }
    if let Some(&k) = opts.ks.iter().find(|&&k| k == 0 || k > models.len()) {
        return Err(Error::Config(format!("k = {k} is outside 1..={}", models.len())));
    }
    let singles = models
        .iter()
        .map(|m| evaluate(m, data, opts.condition_batches))
        .collect::<Result<Vec<_>>>()?;
    let (single_mean, single_std) = mean_std(&singles);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut points = Vec::new();
    for &k in &opts.ks {
        let mut accs = Vec::with_capacity(opts.repeats);
        for _ in 0..opts.repeats {
            let mut idx = index::sample(&mut rng, models.len(), k).into_vec();
            idx.sort_unstable();
            let chosen: Vec<ModelCheckpoint> = if opts.aligned {
                let reference = &models[idx[0]];
                let mut v = vec![reference.clone()];
                for &i in &idx[1..] {
                    v.push(rebasin_align(reference, &models[i], opts.max_iters)?.aligned);
                }
                v
            } else {
                idx.iter().map(|&i| models[i].clone()).collect()
            };
            accs.push(evaluate(&soup(&chosen)?, data, opts.condition_batches)?);
        }
        let (mean, std) = mean_std(&accs);
        points.push(SoupPoint {
            k,
            mean,
            std,
            accuracies: accs,
        });
    }
    Ok(SoupCurve {
        aligned: opts.aligned,
        single_mean,
        single_std,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch;
    use crate::checkpoint::CheckpointMeta;
    use crate::net::{BnMode, InitScheme, NetParams};
    use ndarray::Array4;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use std::sync::Arc;

    fn init(a: &Arc<ArchitectureDescriptor>, seed: u64) -> ModelCheckpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = NetParams::init(a.clone(), InitScheme::KaimingUniform, &mut rng)
            .unwrap()
            .to_checkpoint(CheckpointMeta::new("t", 25, seed));
        for (name, st) in c.buffers.iter_mut() {
            let n = st.mean.len();
            st.mean = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
            st.var = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
            let bn = c.tensors.get_mut(name).unwrap();
            bn.mapv_inplace(|_| rng.random_range(0.5..1.5));
        }
        c
    }

    fn random_perms(groups: &PermutationGroups, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        groups
            .sizes
            .iter()
            .zip(&groups.fixed)
            .map(|(&n, &f)| {
                let mut p: Vec<usize> = (0..n).collect();
                if !f {
                    p.shuffle(rng);
                }
                p
            })
            .collect()
    }

    fn max_output_diff(a: &ModelCheckpoint, b: &ModelCheckpoint, seed: u64) -> f32 {
        let [c, h, w] = a.arch.input_shape;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array4::from_shape_simple_fn((16, c, h, w), || rng.random_range(-1.0f32..1.0));
        let ya = NetParams::from_checkpoint(a).unwrap().forward(x.clone(), BnMode::Eval).unwrap();
        let yb = NetParams::from_checkpoint(b).unwrap().forward(x, BnMode::Eval).unwrap();
        ya.iter().zip(yb.iter()).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn soup_arithmetic() {
        let a = Arc::new(arch::mlp(&[1, 1]).unwrap());
        let mk = |v: f32| ModelCheckpoint::from_flat(a.clone(), &[v, 0.0], CheckpointMeta::new("t", 1, 0)).unwrap();
        let s = soup(&[mk(1.0), mk(3.0)]).unwrap();
        assert_eq!(s.tensor("fc1")[[0, 0]], 2.0);
        let m = init(&Arc::new(arch::small_cnn([1, 28, 28], 10).unwrap()), 1);
        assert!(soup(&[m.clone()]).unwrap().bit_eq(&m));
        assert!(soup(&[m.clone(), m.clone()]).unwrap().bit_eq(&m));
        let other = init(&Arc::new(arch::mlp(&[2, 2]).unwrap()), 1);
        assert!(soup(&[m, other]).is_err());
    }

    #[test]
    fn groups_for_reference_architectures() {
        let g = PermutationGroups::from_arch(&arch::mlp(&[4, 5, 6, 3]).unwrap()).unwrap();
        assert_eq!(g.sizes, vec![4, 5, 6, 3]);
        assert_eq!(g.fixed, vec![true, false, false, true]);
        let cnn = arch::small_cnn([1, 28, 28], 10).unwrap();
        let g = PermutationGroups::from_arch(&cnn).unwrap();
        let fc1 = cnn.layers.iter().position(|l| l.name == "fc1").unwrap();
        assert_eq!(g.in_group[fc1].unwrap().1, 9);
        let res = arch::mini_resnet([1, 12, 12], [4, 6], 3).unwrap();
        let g = PermutationGroups::from_arch(&res).unwrap();
        let id = |n: &str| res.layers.iter().position(|l| l.name == n).unwrap();
        assert_eq!(g.out_group[id("stem.conv")], g.out_group[id("block1.bn2")]);
        assert_eq!(g.out_group[id("block2.bn2")], g.out_group[id("block2.shortcut_bn")]);
        assert_ne!(g.out_group[id("block1.conv1")], g.out_group[id("stem.conv")]);
    }

    #[test]
    fn permutation_preserves_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for a in [
            arch::small_cnn([1, 20, 20], 4).unwrap(),
            arch::mini_resnet([2, 8, 8], [3, 5], 3).unwrap(),
            arch::mlp_bn(&[4, 6, 5, 2]).unwrap(),
        ] {
            let a = Arc::new(a);
            let m = init(&a, 7);
            let g = PermutationGroups::from_arch(&a).unwrap();
            let p = random_perms(&g, &mut rng);
            let pm = apply_permutations(&m, &g, &p);
            assert!(!pm.bit_eq(&m));
            assert!(max_output_diff(&m, &pm, 1) <= 1e-5, "{}", a.arch_id);
        }
    }

    #[test]
    fn identical_models_align_to_identity() {
        let a = Arc::new(arch::small_cnn([1, 20, 20], 4).unwrap());
        let m = init(&a, 2);
        let al = rebasin_align(&m, &m, 10).unwrap();
        assert_eq!(al.permutations, al.groups.identity());
        assert_eq!(al.sweeps, 1);
    }

    #[test]
    fn recovers_planted_permutations_in_resnet() {
        let a = Arc::new(arch::mini_resnet([2, 8, 8], [4, 6], 3).unwrap());
        let m = init(&a, 4);
        let g = PermutationGroups::from_arch(&a).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_perms(&g, &mut rng);
        let scrambled = apply_permutations(&m, &g, &p);
        let al = rebasin_align(&m, &scrambled, 20).unwrap();
        assert!(al.aligned.bit_eq(&m) || weight_distance_sq(&al.aligned, &m) == 0.0);
        assert!(max_output_diff(&scrambled, &al.aligned, 2) <= 1e-5);
        assert!(al.distances.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }

    #[test]
    fn alignment_distance_never_increases() {
        let a = Arc::new(arch::small_cnn([1, 20, 20], 4).unwrap());
        for s in 0..3 {
            let al = rebasin_align(&init(&a, s), &init(&a, s + 10), 30).unwrap();
            assert!(al.distances.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{:?}", al.distances);
            assert!(al.distances.last() < al.distances.first());
            for (p, &n) in al.permutations.iter().zip(&al.groups.sizes) {
                let mut q = p.clone();
                q.sort_unstable();
                assert_eq!(q, (0..n).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn soup_curve_rejects_oversized_k() {
        let a = Arc::new(arch::small_cnn([1, 28, 28], 10).unwrap());
        let data = crate::data::synth_task("synth-mnist", &crate::data::DataConfig { n_train: 10, n_val: 10, n_test: 10, seed: 0 });
        let models = vec![init(&a, 0), init(&a, 1)];
        let opts = SoupOptions { ks: vec![1, 3], ..SoupOptions::default() };
        assert!(matches!(soup_curve(&models, &data, &opts), Err(Error::Config(_))));
        let opts = SoupOptions { ks: vec![1, 2], repeats: 2, ..SoupOptions::default() };
        let c = soup_curve(&models, &data, &opts).unwrap();
        assert_eq!(c.points.len(), 2);
        assert_eq!(c.points[1].std, 0.0);
    }
}
