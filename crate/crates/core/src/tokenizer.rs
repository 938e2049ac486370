//! Invertible mapping between checkpoints and padded token sequences.
//!
//! Every layer tensor is viewed as rows (one per output neuron; batch-norm
//! layers contribute a gamma row and a beta row). Each row is cut into
//! `ceil(row_len / d_t)` tokens of width `d_t`, the final slice zero-padded
//! with mask 0. Tokens are ordered layer-major, then row-major, then
//! slice-major, and carry the position triple `[n, l, k]`: global index,
//! layer index, and token index within the layer.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};

use crate::arch::ArchitectureDescriptor;
use crate::checkpoint::{default_buffers, CheckpointMeta, ModelCheckpoint};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub layer_index: usize,
    pub name: String,
    pub rows: usize,
    pub row_len: usize,
    pub tokens_per_row: usize,
    /// Index of the layer's first token in the sequence.
    pub offset: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub d_t: usize,
    pub layers: Vec<LayerLayout>,
    pub total: usize,
}

impl SequenceLayout {
    /// Position triples `[n, l, k]` for the whole sequence.
    pub fn positions(&self) -> Array2<usize> {
        let mut p = Array2::zeros((self.total, 3));
        for ll in &self.layers {
            for k in 0..ll.count {
                let n = ll.offset + k;
                p[[n, 0]] = n;
                p[[n, 1]] = ll.layer_index;
                p[[n, 2]] = k;
            }
        }
        p
    }

    /// Signal mask implied by the layout alone.
    pub fn mask(&self) -> Array2<u8> {
        let mut m = Array2::zeros((self.total, self.d_t));
        for ll in &self.layers {
            for k in 0..ll.count {
                let width = self.slice_width(ll, k);
                m.row_mut(ll.offset + k).iter_mut().take(width).for_each(|v| *v = 1);
            }
        }
        m
    }

    /// Signal entries in the `k`-th token of a layer.
    fn slice_width(&self, ll: &LayerLayout, k: usize) -> usize {
        let slice = k % ll.tokens_per_row;
        (ll.row_len - slice * self.d_t).min(self.d_t)
    }

    pub fn max_tokens_per_layer(&self) -> usize {
        self.layers.iter().map(|l| l.count).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedModel {
    /// `N x d_t` token matrix.
    pub tokens: Array2<f32>,
    /// `N x 3` position triples `[n, l, k]`.
    pub positions: Array2<usize>,
    /// `N x d_t`, 1 on signal entries, 0 on padding.
    pub mask: Array2<u8>,
    pub arch: Arc<ArchitectureDescriptor>,
}

impl TokenizedModel {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn d_t(&self) -> usize {
        self.tokens.ncols()
    }
}

pub fn sequence_layout(arch: &ArchitectureDescriptor, d_t: usize) -> Result<SequenceLayout> {
    if d_t == 0 {
        return Err(Error::Validation("token size must be at least 1".into()));
    }
    let mut offset = 0;
    let mut layers = Vec::with_capacity(arch.layers.len());
    for l in &arch.layers {
        let [rows, row_len] = l.tensor_shape();
        if row_len == 0 {
            return Err(Error::Validation(format!("layer {} has empty rows", l.name)));
        }
        let tokens_per_row = row_len.div_ceil(d_t);
        let count = rows * tokens_per_row;
        layers.push(LayerLayout {
            layer_index: l.layer_index,
            name: l.name.clone(),
            rows,
            row_len,
            tokens_per_row,
            offset,
            count,
        });
        offset += count;
    }
    Ok(SequenceLayout {
        d_t,
        layers,
        total: offset,
    })
}

pub fn tokenize(ckpt: &ModelCheckpoint, d_t: usize) -> Result<TokenizedModel> {
    let layout = sequence_layout(&ckpt.arch, d_t)?;
    let mut tokens = Array2::zeros((layout.total, d_t));
    for ll in &layout.layers {
        let t = ckpt
            .tensors
            .get(&ll.name)
            .ok_or_else(|| Error::Validation(format!("missing tensor for layer {}", ll.name)))?;
        if t.dim() != (ll.rows, ll.row_len) {
            return Err(Error::Validation(format!(
                "layer {}: tensor shape {:?}, descriptor expects ({}, {})",
                ll.name,
                t.dim(),
                ll.rows,
                ll.row_len
            )));
        }
        for (r, row) in t.rows().into_iter().enumerate() {
            for (s, chunk) in row.as_slice().expect("standard layout").chunks(d_t).enumerate() {
                let n = ll.offset + r * ll.tokens_per_row + s;
                tokens.row_mut(n).iter_mut().zip(chunk).for_each(|(d, v)| *d = *v);
            }
        }
    }
    Ok(TokenizedModel {
        tokens,
        positions: layout.positions(),
        mask: layout.mask(),
        arch: ckpt.arch.clone(),
    })
}

/// Inverse of [`tokenize`]. Positions and mask are checked against the
/// layout; padding entries are ignored whatever their value.
pub fn detokenize(tm: &TokenizedModel) -> Result<ModelCheckpoint> {
    let layout = sequence_layout(&tm.arch, tm.d_t())?;
    if tm.len() != layout.total || tm.positions.dim() != (layout.total, 3) || tm.mask.dim() != tm.tokens.dim() {
        return Err(Error::Structure(format!(
            "sequence has {} tokens, layout expects {}",
            tm.len(),
            layout.total
        )));
    }
    let expected = layout.positions();
    if let Some(n) = (0..layout.total).find(|&n| expected.row(n) != tm.positions.row(n)) {
        return Err(Error::Structure(format!(
            "position triple at row {n} is {:?}, layout expects {:?}",
            tm.positions.row(n).to_vec(),
            expected.row(n).to_vec()
        )));
    }
    if tm.mask != layout.mask() {
        return Err(Error::Structure("mask disagrees with the layout".into()));
    }
    let mut ckpt = detokenize_with_layout(&tm.arch, &layout, tm.tokens.view())?;
    ckpt.meta = CheckpointMeta::new("", 0, 0);
    Ok(ckpt)
}

/// Rebuilds learned tensors from a token matrix that follows `layout`.
/// Batch-norm buffers are reset to identity statistics.
pub fn detokenize_with_layout(
    arch: &Arc<ArchitectureDescriptor>,
    layout: &SequenceLayout,
    tokens: ArrayView2<f32>,
) -> Result<ModelCheckpoint> {
    if tokens.dim() != (layout.total, layout.d_t) {
        return Err(Error::shape(
            format!("({}, {})", layout.total, layout.d_t),
            format!("{:?}", tokens.dim()),
        ));
    }
    let d_t = layout.d_t;
    let mut tensors = BTreeMap::new();
    for ll in &layout.layers {
        let mut t = Array2::zeros((ll.rows, ll.row_len));
        for r in 0..ll.rows {
            for s in 0..ll.tokens_per_row {
                let n = ll.offset + r * ll.tokens_per_row + s;
                let start = s * d_t;
                let width = (ll.row_len - start).min(d_t);
                for j in 0..width {
                    t[[r, start + j]] = tokens[[n, j]];
                }
            }
        }
        tensors.insert(ll.name.clone(), t);
    }
    Ok(ModelCheckpoint {
        arch: arch.clone(),
        tensors,
        buffers: default_buffers(arch),
        meta: CheckpointMeta::new("", 0, 0),
    })
}
