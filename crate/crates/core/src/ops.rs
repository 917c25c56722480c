//! Forward kernels shared by plain tensors and the autodiff graph.
//!
//! Everything here is a direct loop implementation over row-major buffers.
//! The graph in [`crate::autodiff`] calls the same kernels and adds the
//! matching adjoint kernels defined alongside them.

use std::sync::Arc;

use crate::error::{shape_str, Error, Result};
use crate::tensor::{numel, strides, Real, Tensor};

/// Numpy-style broadcast of two shapes (right aligned, extent 1 stretches).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(format!(
                    "shapes {} and {} do not broadcast",
                    shape_str(a),
                    shape_str(b)
                )))
            }
        };
    }
    Ok(out)
}

/// Strides that read `src_shape` as if it were broadcast to `out_shape`.
fn broadcast_strides(src_shape: &[usize], out_shape: &[usize]) -> Result<Vec<usize>> {
    if src_shape.len() > out_shape.len() {
        return Err(Error::dim(format!(
            "cannot broadcast {} to {}",
            shape_str(src_shape),
            shape_str(out_shape)
        )));
    }
    let lead = out_shape.len() - src_shape.len();
    let src_st = strides(src_shape);
    let mut st = vec![0; out_shape.len()];
    for (i, (&s, &o)) in src_shape.iter().zip(&out_shape[lead..]).enumerate() {
        if s == o {
            st[lead + i] = src_st[i];
        } else if s != 1 {
            return Err(Error::dim(format!(
                "cannot broadcast {} to {}",
                shape_str(src_shape),
                shape_str(out_shape)
            )));
        }
    }
    Ok(st)
}

/// Visits every multi-index of `shape` in row-major order, yielding the
/// offset under `src_strides` for each output position.
fn for_each_strided(shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(shape);
    if n == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let inner = shape[rank - 1];
    let inner_st = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let mut out = 0usize;
    loop {
        for j in 0..inner {
            f(out + j, base + j * inner_st);
        }
        out += inner;
        if out >= n {
            break;
        }
        // increment the outer multi-index
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            base -= src_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

pub fn broadcast_to<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if x.shape() == shape {
        return Ok(x.clone());
    }
    let st = broadcast_strides(x.shape(), shape)?;
    let src = x.data();
    let mut out = vec![T::zero(); numel(shape)];
    for_each_strided(shape, &st, |o, s| out[o] = src[s]);
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Adjoint of `broadcast_to`: sums `g` (shaped like the broadcast result) back to `shape`.
pub fn sum_to_shape<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    let st = broadcast_strides(shape, g.shape())?;
    let src = g.data();
    let mut out = vec![T::zero(); numel(shape)];
    for_each_strided(g.shape(), &st, |o, s| out[s] += src[o]);
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

pub fn permute<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::dim(format!(
            "invalid permutation {axes:?} for shape {}",
            shape_str(x.shape())
        )));
    }
    let in_st = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let st: Vec<usize> = axes.iter().map(|&a| in_st[a]).collect();
    let src = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for_each_strided(&out_shape, &st, |o, s| out[o] = src[s]);
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub fn transpose_last2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::dim(format!("transpose needs rank >= 2, got {}", shape_str(x.shape()))));
    }
    let mut axes: Vec<usize> = (0..r).collect();
    axes.swap(r - 2, r - 1);
    permute(x, &axes)
}

pub fn concat<T: Real>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::dim(format!("concat axis {axis} out of range for rank {rank}")));
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = 0;
    for x in xs {
        let ok = x.rank() == rank
            && x.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::dim(format!(
                "cannot concat {} with {} along axis {axis}",
                shape_str(first.shape()),
                shape_str(x.shape())
            )));
        }
        out_shape[axis] += x.shape()[axis];
    }
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(numel(&out_shape));
    for o in 0..outer {
        for x in xs {
            let chunk = x.shape()[axis] * inner;
            out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn narrow<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || start + len > x.shape()[axis] {
        return Err(Error::dim(format!(
            "narrow(axis {axis}, {start}..{}) out of range for {}",
            start + len,
            shape_str(x.shape())
        )));
    }
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let full = x.shape()[axis] * inner;
    let mut out = Vec::with_capacity(numel(&out_shape));
    for o in 0..outer {
        let base = o * full + start * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// `out[m, n] += a[m, k] * b[k, n]` for row-major slices.
#[inline]
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm([m, k, n], a, [k, 1], b, [n, 1], T::one(), out, [n, 1]);
}

/// Batched matrix product with broadcast over leading (batch) dimensions.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ra, rb) = (a.rank(), b.rank());
    let mismatch = || {
        Error::dim(format!(
            "matmul shape mismatch: {} x {}",
            shape_str(a.shape()),
            shape_str(b.shape())
        ))
    };
    if ra < 2 || rb < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let batch = broadcast_shape(&a.shape()[..ra - 2], &b.shape()[..rb - 2]).map_err(|_| mismatch())?;
    let nb = numel(&batch);
    let a_off = batch_offsets(&a.shape()[..ra - 2], &batch, m * k);
    let b_off = batch_offsets(&b.shape()[..rb - 2], &batch, k * n);
    let mut out = vec![T::zero(); nb * m * n];
    for bi in 0..nb {
        gemm_acc(
            &a.data()[a_off[bi]..a_off[bi] + m * k],
            &b.data()[b_off[bi]..b_off[bi] + k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    let mut shape = batch;
    shape.extend([m, n]);
    Ok(Tensor::from_parts(shape, out))
}

fn batch_offsets(src_batch: &[usize], out_batch: &[usize], mat: usize) -> Vec<usize> {
    let st = broadcast_strides(src_batch, out_batch).expect("checked by broadcast_shape");
    let mut offs = vec![0; numel(out_batch)];
    for_each_strided(out_batch, &st, |o, s| offs[o] = s * mat);
    offs
}

/// Per-(batch, key) keep mask for softmax over the last dimension.
///
/// For an input viewed as `[rows, keys]`, row `r` belongs to batch entry
/// `r / (rows / batch)`; masked keys receive exactly zero weight.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyMask {
    pub batch: usize,
    pub keys: usize,
    pub keep: Arc<Vec<bool>>,
}

impl KeyMask {
    pub fn new(batch: usize, keys: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != batch * keys {
            return Err(Error::dim(format!(
                "key mask needs {} flags, got {}",
                batch * keys,
                keep.len()
            )));
        }
        Ok(KeyMask {
            batch,
            keys,
            keep: Arc::new(keep),
        })
    }
}

pub fn softmax_lastdim<T: Real>(x: &Tensor<T>, mask: Option<&KeyMask>) -> Result<Tensor<T>> {
    let l = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("softmax of a rank-0 tensor"))?;
    if l == 0 {
        return Err(Error::dim("softmax over an empty last dimension"));
    }
    let rows = x.numel() / l;
    let per_batch = match mask {
        Some(mk) => {
            if mk.keys != l || mk.batch == 0 || !rows.is_multiple_of(mk.batch) {
                return Err(Error::dim(format!(
                    "mask ({} x {}) incompatible with scores {}",
                    mk.batch,
                    mk.keys,
                    shape_str(x.shape())
                )));
            }
            rows / mk.batch
        }
        None => rows,
    };
    let mut out = vec![T::zero(); x.numel()];
    for r in 0..rows {
        let row = &x.data()[r * l..(r + 1) * l];
        let orow = &mut out[r * l..(r + 1) * l];
        let keep: Option<&[bool]> = mask.map(|mk| {
            let b = r / per_batch;
            &mk.keep[b * l..(b + 1) * l]
        });
        let kept = |j: usize| keep.is_none_or(|k| k[j]);
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if kept(j) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            return Err(Error::Contract("softmax row with every key masked".into()));
        }
        let max = max.as_f64();
        let mut e = vec![0.0f64; l];
        let mut sum = 0.0f64;
        for (j, (ej, &v)) in e.iter_mut().zip(row).enumerate() {
            if kept(j) {
                *ej = (v.as_f64() - max).exp();
                sum += *ej;
            }
        }
        for (o, ej) in orow.iter_mut().zip(&e) {
            *o = T::of(ej / sum);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Adjoint of softmax given its output `y`: `dx = y * (dy - <dy, y>)` per row.
pub fn softmax_backward<T: Real>(y: &Tensor<T>, dy: &[T]) -> Vec<T> {
    let l = *y.shape().last().unwrap();
    let mut dx = vec![T::zero(); y.numel()];
    for ((yr, gr), dr) in y
        .data()
        .chunks_exact(l)
        .zip(dy.chunks_exact(l))
        .zip(dx.chunks_exact_mut(l))
    {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    dx
}

/// Geometry of a 3D convolution over `[B, C, F, H, W]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3dSpec {
    /// Stride 1 with "same" padding for an odd kernel.
    pub fn same(kernel: [usize; 3]) -> Self {
        Conv3dSpec {
            stride: [1, 1, 1],
            pad: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        }
    }
}

struct ConvGeom {
    b: usize,
    ci: usize,
    co: usize,
    inp: [usize; 3],
    k: [usize; 3],
    out: [usize; 3],
}

fn conv_geom(xs: &[usize], ws: &[usize], spec: &Conv3dSpec) -> Result<ConvGeom> {
    if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[1] {
        return Err(Error::dim(format!(
            "conv3d expects x [B,C,F,H,W] and w [Co,C,kf,kh,kw] with matching C, got {} and {}",
            shape_str(xs),
            shape_str(ws)
        )));
    }
    let mut out = [0; 3];
    for d in 0..3 {
        let padded = xs[2 + d] + 2 * spec.pad[d];
        if ws[2 + d] > padded || spec.stride[d] == 0 {
            return Err(Error::dim(format!(
                "conv3d kernel {} larger than padded input {}",
                shape_str(&ws[2..]),
                shape_str(&xs[2..])
            )));
        }
        out[d] = (padded - ws[2 + d]) / spec.stride[d] + 1;
    }
    Ok(ConvGeom {
        b: xs[0],
        ci: xs[1],
        co: ws[0],
        inp: [xs[2], xs[3], xs[4]],
        k: [ws[2], ws[3], ws[4]],
        out,
    })
}

/// Input index for output index `o` at kernel tap `k`, or `None` when it lands in padding.
#[inline]
fn src_index(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    (i >= 0 && (i as usize) < extent).then_some(i as usize)
}

/// Walks every (output row, input row) pair touched by one kernel tap and
/// hands the callback the matching contiguous runs along W.
#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_rows(
    g: &ConvGeom,
    spec: &Conv3dSpec,
    kf: usize,
    kh: usize,
    kw: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    let [_, h, w] = g.inp;
    let [fo_n, ho_n, wo_n] = g.out;
    // valid output w range for this tap
    let mut wo_lo = wo_n;
    let mut wo_hi = 0;
    for wo in 0..wo_n {
        if src_index(wo, kw, spec.stride[2], spec.pad[2], w).is_some() {
            wo_lo = wo_lo.min(wo);
            wo_hi = wo + 1;
        }
    }
    if wo_lo >= wo_hi {
        return;
    }
    let wi_lo = src_index(wo_lo, kw, spec.stride[2], spec.pad[2], w).unwrap();
    for fo in 0..fo_n {
        let Some(fi) = src_index(fo, kf, spec.stride[0], spec.pad[0], g.inp[0]) else {
            continue;
        };
        for ho in 0..ho_n {
            let Some(hi) = src_index(ho, kh, spec.stride[1], spec.pad[1], h) else {
                continue;
            };
            f((fo * ho_n + ho) * wo_n + wo_lo, (fi * h + hi) * w + wi_lo, wo_hi - wo_lo, fi, hi);
        }
    }
}

/// Unfolds one batch entry into `[C * kf * kh * kw, F' * H' * W']` columns.
fn im2col<T: Real>(g: &ConvGeom, spec: &Conv3dSpec, x: &[T], col: &mut [T]) {
    let in_plane = numel(&g.inp);
    let out_plane = numel(&g.out);
    let sw = spec.stride[2];
    col.fill(T::zero());
    for ci in 0..g.ci {
        let xplane = &x[ci * in_plane..(ci + 1) * in_plane];
        let mut tap = 0;
        for kf in 0..g.k[0] {
            for kh in 0..g.k[1] {
                for kw in 0..g.k[2] {
                    let row = (ci * numel(&g.k) + tap) * out_plane;
                    let crow = &mut col[row..row + out_plane];
                    conv_rows(g, spec, kf, kh, kw, |o, i, len, _, _| {
                        if sw == 1 {
                            crow[o..o + len].copy_from_slice(&xplane[i..i + len]);
                        } else {
                            for (j, c) in crow[o..o + len].iter_mut().enumerate() {
                                *c = xplane[i + j * sw];
                            }
                        }
                    });
                    tap += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto one batch entry.
fn col2im<T: Real>(g: &ConvGeom, spec: &Conv3dSpec, col: &[T], dx: &mut [T]) {
    let in_plane = numel(&g.inp);
    let out_plane = numel(&g.out);
    let sw = spec.stride[2];
    for ci in 0..g.ci {
        let dplane = &mut dx[ci * in_plane..(ci + 1) * in_plane];
        let mut tap = 0;
        for kf in 0..g.k[0] {
            for kh in 0..g.k[1] {
                for kw in 0..g.k[2] {
                    let row = (ci * numel(&g.k) + tap) * out_plane;
                    let crow = &col[row..row + out_plane];
                    conv_rows(g, spec, kf, kh, kw, |o, i, len, _, _| {
                        if sw == 1 {
                            for (d, &c) in dplane[i..i + len].iter_mut().zip(&crow[o..o + len]) {
                                *d += c;
                            }
                        } else {
                            for (j, &c) in crow[o..o + len].iter().enumerate() {
                                dplane[i + j * sw] += c;
                            }
                        }
                    });
                    tap += 1;
                }
            }
        }
    }
}

/// 3D convolution (cross-correlation) with optional per-channel bias.
pub fn conv3d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &Conv3dSpec,
) -> Result<Tensor<T>> {
    let g = conv_geom(x.shape(), w.shape(), spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.co] {
            return Err(Error::dim(format!(
                "conv3d bias {} does not match {} output channels",
                shape_str(b.shape()),
                g.co
            )));
        }
    }
    let in_plane = numel(&g.inp);
    let out_plane = numel(&g.out);
    let rows = g.ci * numel(&g.k);
    let mut col = vec![T::zero(); rows * out_plane];
    let mut out = vec![T::zero(); g.b * g.co * out_plane];
    for b in 0..g.b {
        im2col(&g, spec, &x.data()[b * g.ci * in_plane..(b + 1) * g.ci * in_plane], &mut col);
        let ob = &mut out[b * g.co * out_plane..(b + 1) * g.co * out_plane];
        if let Some(bias) = bias {
            for (co, plane) in ob.chunks_mut(out_plane).enumerate() {
                plane.fill(bias.data()[co]);
            }
        }
        T::gemm([g.co, rows, out_plane], w.data(), [rows, 1], &col, [out_plane, 1], T::one(), ob, [out_plane, 1]);
    }
    let shape = vec![g.b, g.co, g.out[0], g.out[1], g.out[2]];
    Ok(Tensor::from_parts(shape, out))
}

/// Gradients of `conv3d` with respect to input, weight and bias.
pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &[T],
    spec: &Conv3dSpec,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let g = conv_geom(x.shape(), w.shape(), spec).expect("validated in forward");
    let in_plane = numel(&g.inp);
    let out_plane = numel(&g.out);
    let rows = g.ci * numel(&g.k);
    let mut dx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut dw = need_w.then(|| vec![T::zero(); w.numel()]);
    let mut db = vec![T::zero(); g.co];
    let mut col = vec![T::zero(); rows * out_plane];
    for b in 0..g.b {
        let gb = &gout[b * g.co * out_plane..(b + 1) * g.co * out_plane];
        for (co, plane) in gb.chunks(out_plane).enumerate() {
            db[co] += plane.iter().copied().sum();
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&g, spec, &x.data()[b * g.ci * in_plane..(b + 1) * g.ci * in_plane], &mut col);
            T::gemm([g.co, out_plane, rows], gb, [out_plane, 1], &col, [1, out_plane], T::one(), dw, [rows, 1]);
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm([rows, g.co, out_plane], w.data(), [1, rows], gb, [out_plane, 1], T::zero(), &mut col, [out_plane, 1]);
            col2im(&g, spec, &col, &mut dx[b * g.ci * in_plane..(b + 1) * g.ci * in_plane]);
        }
    }
    (dx, dw, db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Resample {
    Down,
    Up,
}

/// 2x resampling over the last two axes: 2x2 mean pooling or nearest doubling.
pub fn resample2x<T: Real>(x: &Tensor<T>, dir: Resample) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::dim(format!("resample2x needs rank >= 2, got {}", shape_str(x.shape()))));
    }
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let planes = x.numel() / (h * w).max(1);
    let mut shape = x.shape().to_vec();
    match dir {
        Resample::Down => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::dim(format!(
                    "cannot downsample odd extents {h}x{w}"
                )));
            }
            let (ho, wo) = (h / 2, w / 2);
            shape[r - 2] = ho;
            shape[r - 1] = wo;
            let quarter = T::of(0.25);
            let mut out = vec![T::zero(); planes * ho * wo];
            for p in 0..planes {
                let src = &x.data()[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
                for i in 0..ho {
                    for j in 0..wo {
                        let s = src[2 * i * w + 2 * j]
                            + src[2 * i * w + 2 * j + 1]
                            + src[(2 * i + 1) * w + 2 * j]
                            + src[(2 * i + 1) * w + 2 * j + 1];
                        dst[i * wo + j] = s * quarter;
                    }
                }
            }
            Ok(Tensor::from_parts(shape, out))
        }
        Resample::Up => {
            let (ho, wo) = (h * 2, w * 2);
            shape[r - 2] = ho;
            shape[r - 1] = wo;
            let mut out = vec![T::zero(); planes * ho * wo];
            for p in 0..planes {
                let src = &x.data()[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
                for i in 0..ho {
                    for j in 0..wo {
                        dst[i * wo + j] = src[(i / 2) * w + j / 2];
                    }
                }
            }
            Ok(Tensor::from_parts(shape, out))
        }
    }
}

/// Adjoint of `resample2x`; `in_shape` is the forward input shape.
pub fn resample2x_backward<T: Real>(gout: &[T], in_shape: &[usize], dir: Resample) -> Vec<T> {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let planes = numel(in_shape) / (h * w).max(1);
    let mut dx = vec![T::zero(); numel(in_shape)];
    match dir {
        Resample::Down => {
            let (ho, wo) = (h / 2, w / 2);
            let quarter = T::of(0.25);
            for p in 0..planes {
                let g = &gout[p * ho * wo..(p + 1) * ho * wo];
                let d = &mut dx[p * h * w..(p + 1) * h * w];
                for i in 0..h {
                    for j in 0..w {
                        d[i * w + j] = g[(i / 2) * wo + j / 2] * quarter;
                    }
                }
            }
        }
        Resample::Up => {
            let wo = w * 2;
            let ho = h * 2;
            for p in 0..planes {
                let g = &gout[p * ho * wo..(p + 1) * ho * wo];
                let d = &mut dx[p * h * w..(p + 1) * h * w];
                for i in 0..ho {
                    for j in 0..wo {
                        d[(i / 2) * w + j / 2] += g[i * wo + j];
                    }
                }
            }
        }
    }
    dx
}

/// Zero-mean, unit-variance normalization of each last-axis row.
/// Returns the normalized values and each row's inverse standard deviation.
pub fn normalize_lastdim<T: Real>(x: &Tensor<T>, eps: f64) -> Result<(Tensor<T>, Vec<T>)> {
    let l = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("normalize of a rank-0 tensor"))?;
    if l == 0 {
        return Err(Error::dim("normalize over an empty last dimension"));
    }
    let inv_l = T::of(1.0 / l as f64);
    let eps = T::of(eps);
    let mut out = vec![T::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(x.numel() / l);
    for (row, orow) in x.data().chunks_exact(l).zip(out.chunks_exact_mut(l)) {
        let mean = row.iter().copied().sum::<T>() * inv_l;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_l;
        let is = T::one() / (var + eps).sqrt();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), inv_std))
}

/// Adjoint of `normalize_lastdim`: `dx = s * (dy - mean(dy) - y * mean(dy * y))`.
pub fn normalize_backward<T: Real>(y: &Tensor<T>, inv_std: &[T], dy: &[T]) -> Vec<T> {
    let l = *y.shape().last().unwrap();
    let inv_l = T::of(1.0 / l as f64);
    let mut dx = vec![T::zero(); y.numel()];
    for (((yr, gr), dr), &s) in y
        .data()
        .chunks_exact(l)
        .zip(dy.chunks_exact(l))
        .zip(dx.chunks_exact_mut(l))
        .zip(inv_std)
    {
        let mg = gr.iter().copied().sum::<T>() * inv_l;
        let mgy = gr.iter().zip(yr).map(|(&g, &v)| g * v).sum::<T>() * inv_l;
        for ((d, &g), &v) in dr.iter_mut().zip(gr).zip(yr) {
            *d = s * (g - mg - v * mgy);
        }
    }
    dx
}
