//! Scaled dot-product attention on the autodiff graph, plus the head
//! reshaping helpers every attention site shares.

use crate::autodiff::{Graph, Var};
use crate::error::{shape_str, Error, Result};
use crate::ops::KeyMask;
use crate::tensor::Real;

/// `softmax(Q Kᵀ / √d) V` with one output row per query.
///
/// `q` is `[.., Nq, d]`, `k` is `[.., Nk, d]`, `v` is `[.., Nk, dv]`; leading
/// dimensions broadcast. Rows of the weight matrix normalize over keys.
pub fn sdpa<T: Real>(g: &Graph<T>, q: Var, k: Var, v: Var, mask: Option<&KeyMask>) -> Result<Var> {
    let weights = attention_weights(g, q, k, mask)?;
    let (sk, sv) = (g.shape(k), g.shape(v));
    if sk[sk.len() - 2] != sv[sv.len() - 2] {
        return Err(Error::dim(format!(
            "keys {} and values {} disagree on the key count",
            shape_str(&sk),
            shape_str(&sv)
        )));
    }
    g.matmul(weights, v)
}

/// The normalized attention map `softmax(Q Kᵀ / √d)`.
pub fn attention_weights<T: Real>(g: &Graph<T>, q: Var, k: Var, mask: Option<&KeyMask>) -> Result<Var> {
    let (sq, sk) = (g.shape(q), g.shape(k));
    let d = *sq.last().ok_or_else(|| Error::dim("rank-0 query"))?;
    if sk.last() != Some(&d) {
        return Err(Error::dim(format!(
            "query {} and key {} widths differ",
            shape_str(&sq),
            shape_str(&sk)
        )));
    }
    let kt = g.transpose_last2(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::of(1.0 / (d as f64).sqrt()))?;
    g.softmax_lastdim(scores, mask)
}

/// `[.., N, h*d]` -> `[.., h, N, d]`.
pub fn split_heads<T: Real>(g: &Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x);
    let r = s.len();
    let c = s[r - 1];
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::dim(format!("{c} channels do not split into {heads} heads")));
    }
    let mut shape = s[..r - 1].to_vec();
    shape.extend([heads, c / heads]);
    let x = g.reshape(x, &shape)?;
    // [.., N, h, d] -> [.., h, N, d]
    let mut axes: Vec<usize> = (0..r + 1).collect();
    axes.swap(r - 2, r - 1);
    g.permute(x, &axes)
}

/// Inverse of [`split_heads`].
pub fn merge_heads<T: Real>(g: &Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x);
    let r = s.len();
    let mut axes: Vec<usize> = (0..r).collect();
    axes.swap(r - 3, r - 2);
    let x = g.permute(x, &axes)?;
    let mut shape = s[..r - 3].to_vec();
    shape.extend([s[r - 2], s[r - 3] * s[r - 1]]);
    g.reshape(x, &shape)
}
