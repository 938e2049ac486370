//! Training objective: masked reconstruction, NT-Xent, and per-token loss
//! normalization.
//!
//! All reconstruction modes reduce to
//! `mean over signal entries of ((T - T̂) / σ)²`, where `σ = 1` for
//! [`NormalizationMode::None`] and otherwise the target token's standard
//! deviation (plus ε). The target's mean cancels in the difference, but the
//! standardized tokens are still computed explicitly by
//! [`standardize_token`] for diagnostics.

use ndarray::{Array2, ArrayView2, Axis};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    None,
    PerToken,
    #[default]
    MaskedPerToken,
}

pub const DEFAULT_EPSILON: f64 = 1e-6;

fn cast<F: Float>(v: f64) -> F {
    F::from(v).expect("representable constant")
}

/// Mean and standard deviation over the signal entries of one token:
/// `μ = Σ M·T / Σ M`, `σ = sqrt(Σ M·(T − μ)² / Σ M) + ε`.
pub fn masked_token_stats<F: Float>(token: &[F], mask: &[u8], eps: F) -> Result<(F, F)> {
    if token.len() != mask.len() {
        return Err(Error::shape(token.len(), mask.len()));
    }
    let count = mask.iter().filter(|&&m| m != 0).count();
    if count == 0 {
        return Err(Error::DegenerateToken { row: 0 });
    }
    let n: F = cast(count as f64);
    let mut sum = F::zero();
    for (&t, &m) in token.iter().zip(mask) {
        if m != 0 {
            sum = sum + t;
        }
    }
    let mu = sum / n;
    let mut ss = F::zero();
    for (&t, &m) in token.iter().zip(mask) {
        if m != 0 {
            ss = ss + (t - mu) * (t - mu);
        }
    }
    Ok((mu, (ss / n).sqrt() + eps))
}

/// Mean and standard deviation over every entry, padding included.
pub fn token_stats<F: Float>(token: &[F], eps: F) -> (F, F) {
    let n: F = cast(token.len().max(1) as f64);
    let mu = token.iter().fold(F::zero(), |a, &t| a + t) / n;
    let var = token.iter().fold(F::zero(), |a, &t| a + (t - mu) * (t - mu)) / n;
    (mu, var.sqrt() + eps)
}

/// Per-token standardization statistics of the target under `mode`.
/// Unmasked statistics read padding entries as zero.
/// Rows without signal entries get `None` in the unmasked modes and are an
/// error in masked mode.
fn row_stats<F: Float>(
    target: ArrayView2<F>,
    mask: ArrayView2<u8>,
    mode: NormalizationMode,
    eps: F,
) -> Result<Vec<Option<(F, F)>>> {
    target
        .rows()
        .into_iter()
        .zip(mask.rows())
        .enumerate()
        .map(|(r, (t, m))| {
            let t = t.to_vec();
            let m = m.to_vec();
            let has_signal = m.iter().any(|&v| v != 0);
            match mode {
                NormalizationMode::None => Ok(has_signal.then_some((F::zero(), F::one()))),
                NormalizationMode::PerToken => Ok(has_signal.then(|| {
                    // padding counts with its defined value, zero, whatever is stored there
                    let padded: Vec<F> = t.iter().zip(&m).map(|(&x, &k)| if k != 0 { x } else { F::zero() }).collect();
                    token_stats(&padded, eps)
                })),
                NormalizationMode::MaskedPerToken => masked_token_stats(&t, &m, eps)
                    .map(Some)
                    .map_err(|e| match e {
                        Error::DegenerateToken { .. } => Error::DegenerateToken { row: r },
                        other => other,
                    }),
            }
        })
        .collect()
}

/// Standardizes `token` with externally supplied statistics.
pub fn standardize_token<F: Float>(token: &[F], mu: F, sigma: F) -> Vec<F> {
    token.iter().map(|&t| (t - mu) / sigma).collect()
}

fn check_shapes<F>(target: &ArrayView2<F>, pred: &ArrayView2<F>, mask: &ArrayView2<u8>) -> Result<()> {
    if target.dim() != pred.dim() || target.dim() != mask.dim() {
        return Err(Error::shape(
            format!("{:?} for target, prediction and mask", target.dim()),
            format!("{:?} / {:?}", pred.dim(), mask.dim()),
        ));
    }
    Ok(())
}

/// Masked reconstruction loss after per-token standardization, averaged over
/// signal entries.
pub fn normalized_reconstruction_loss<F: Float>(
    target: ArrayView2<F>,
    pred: ArrayView2<F>,
    mask: ArrayView2<u8>,
    mode: NormalizationMode,
    eps: F,
) -> Result<F> {
    Ok(normalized_reconstruction_loss_grad(target, pred, mask, mode, eps)?.0)
}

/// Loss and its gradient with respect to the prediction. The target
/// statistics are constants.
pub fn normalized_reconstruction_loss_grad<F: Float>(
    target: ArrayView2<F>,
    pred: ArrayView2<F>,
    mask: ArrayView2<u8>,
    mode: NormalizationMode,
    eps: F,
) -> Result<(F, Array2<F>)> {
    check_shapes(&target, &pred, &mask)?;
    let stats = row_stats(target, mask, mode, eps)?;
    let count = mask.iter().filter(|&&m| m != 0).count();
    let mut grad = Array2::zeros(pred.dim());
    if count == 0 {
        return Ok((F::zero(), grad));
    }
    let n: F = cast(count as f64);
    let two: F = cast(2.0);
    let mut total = F::zero();
    for (r, st) in stats.iter().enumerate() {
        let Some((mu, sigma)) = *st else { continue };
        for c in 0..target.ncols() {
            if mask[[r, c]] == 0 {
                continue;
            }
            let t = (target[[r, c]] - mu) / sigma;
            let p = (pred[[r, c]] - mu) / sigma;
            let d = p - t;
            total = total + d * d;
            grad[[r, c]] = two * d / (sigma * n);
        }
    }
    Ok((total / n, grad))
}

/// NT-Xent value and gradients with respect to both views.
#[derive(Clone, Debug)]
pub struct NtXent<F> {
    pub loss: F,
    pub grad_i: Array2<F>,
    pub grad_j: Array2<F>,
}

pub fn ntxent_loss<F: Float>(z_i: ArrayView2<F>, z_j: ArrayView2<F>, tau: F) -> Result<F> {
    Ok(ntxent_loss_grad(z_i, z_j, tau)?.loss)
}

/// Normalized-temperature cross-entropy over cosine similarities. Row `b` of
/// `z_i` and row `b` of `z_j` are positives; the other `2B − 2` rows are
/// negatives. Averaged over the `2B` anchors.
pub fn ntxent_loss_grad<F: Float>(z_i: ArrayView2<F>, z_j: ArrayView2<F>, tau: F) -> Result<NtXent<F>> {
    if z_i.dim() != z_j.dim() {
        return Err(Error::shape(format!("{:?}", z_i.dim()), format!("{:?}", z_j.dim())));
    }
    let b = z_i.nrows();
    if b < 2 {
        return Err(Error::InsufficientNegatives(b));
    }
    let tiny: F = cast(1e-12);
    let z = ndarray::concatenate(Axis(0), &[z_i, z_j]).expect("same width");
    let m = 2 * b;
    let norms: Vec<F> = z.rows().into_iter().map(|r| r.dot_generic().sqrt().max(tiny)).collect();
    let mut u = z.clone();
    for (mut row, &nrm) in u.rows_mut().into_iter().zip(&norms) {
        row.mapv_inplace(|v| v / nrm);
    }
    let mut s = Array2::<F>::zeros((m, m));
    for a in 0..m {
        for c in 0..m {
            let dot = u.row(a).iter().zip(u.row(c).iter()).fold(F::zero(), |acc, (&x, &y)| acc + x * y);
            s[[a, c]] = dot / tau;
        }
    }
    let pos = |a: usize| if a < b { a + b } else { a - b };
    let mut g = Array2::<F>::zeros((m, m));
    let inv_m: F = cast(1.0 / m as f64);
    // Sums run over (k, k + B) pairs so that swapping the views gives a
    // bitwise identical loss.
    let mut per_anchor = vec![F::zero(); m];
    for a in 0..m {
        let mx = (0..m).filter(|&c| c != a).map(|c| s[[a, c]]).fold(F::neg_infinity(), F::max);
        let term = |c: usize| if c == a { F::zero() } else { (s[[a, c]] - mx).exp() };
        let denom = (0..b).fold(F::zero(), |acc, k| acc + (term(k) + term(k + b)));
        let lse = mx + denom.ln();
        per_anchor[a] = lse - s[[a, pos(a)]];
        for c in (0..m).filter(|&c| c != a) {
            let p = (s[[a, c]] - lse).exp();
            let ind = if c == pos(a) { F::one() } else { F::zero() };
            g[[a, c]] = (p - ind) * inv_m;
        }
    }
    let loss = (0..b).fold(F::zero(), |acc, k| acc + (per_anchor[k] + per_anchor[k + b])) * inv_m;
    // dL/du_a = Σ_c (g_ac + g_ca) u_c / τ
    let mut du = Array2::<F>::zeros(u.dim());
    for a in 0..m {
        for c in 0..m {
            let w = (g[[a, c]] + g[[c, a]]) / tau;
            if w == F::zero() {
                continue;
            }
            for d in 0..u.ncols() {
                du[[a, d]] = du[[a, d]] + w * u[[c, d]];
            }
        }
    }
    let mut dz = Array2::<F>::zeros(z.dim());
    for a in 0..m {
        let proj = u.row(a).iter().zip(du.row(a).iter()).fold(F::zero(), |acc, (&x, &y)| acc + x * y);
        for d in 0..u.ncols() {
            dz[[a, d]] = (du[[a, d]] - u[[a, d]] * proj) / norms[a];
        }
    }
    let grad_j = dz.slice(ndarray::s![b.., ..]).to_owned();
    let grad_i = dz.slice(ndarray::s![..b, ..]).to_owned();
    Ok(NtXent { loss, grad_i, grad_j })
}

trait DotSelf<F> {
    fn dot_generic(&self) -> F;
}

impl<F: Float> DotSelf<F> for ndarray::ArrayView1<'_, F> {
    fn dot_generic(&self) -> F {
        self.iter().fold(F::zero(), |a, &v| a + v * v)
    }
}

/// `(1 − γ)·L_rec + γ·L_c`.
pub fn combine<F: Float>(l_rec: F, l_c: F, gamma: F) -> Result<F> {
    if !(F::zero()..=F::one()).contains(&gamma) {
        return Err(Error::Config(format!(
            "gamma must lie in [0, 1], got {}",
            gamma.to_f64().unwrap_or(f64::NAN)
        )));
    }
    Ok((F::one() - gamma) * l_rec + gamma * l_c)
}

#[allow(clippy::too_many_arguments)]
pub fn total_loss<F: Float>(
    target: ArrayView2<F>,
    pred: ArrayView2<F>,
    mask: ArrayView2<u8>,
    z_i: ArrayView2<F>,
    z_j: ArrayView2<F>,
    gamma: F,
    tau: F,
    mode: NormalizationMode,
    eps: F,
) -> Result<F> {
    let l_rec = normalized_reconstruction_loss(target, pred, mask, mode, eps)?;
    let l_c = ntxent_loss(z_i, z_j, tau)?;
    combine(l_rec, l_c, gamma)
}
