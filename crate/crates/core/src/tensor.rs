//! Dense row-major tensors and their binary serialization.
//!
//! Values are immutable once built: the payload sits behind an `Arc`, so
//! reshapes and clones share storage. Gradients live in the autodiff graph
//! and the parameter store, never inside the tensor itself.

use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::Float;
use sha2::{Digest, Sha256};

use crate::error::{shape_str, Error, Result};

/// Magic prefix of a serialized tensor blob. The trailing digit is the format version.
pub const TENSOR_MAGIC: &[u8; 4] = b"VBT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Element type of every tensor: `f32` at runtime, `f64` for oracle and gradient checks.
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    const DTYPE: DType;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn put_le(self, out: &mut Vec<u8>);

    fn take_le(bytes: &[u8]) -> Self;

    /// `c = a · b + beta · c` for strided `a: [m, k]`, `b: [k, n]`, `c: [m, n]`.
    fn gemm(dims: [usize; 3], a: &[Self], sa: [usize; 2], b: &[Self], sb: [usize; 2], beta: Self, c: &mut [Self], sc: [usize; 2]);
}

fn check_gemm_bounds(dims: [usize; 3], la: usize, sa: [usize; 2], lb: usize, sb: [usize; 2], lc: usize, sc: [usize; 2]) {
    let [m, k, n] = dims;
    let last = |rows: usize, cols: usize, s: [usize; 2]| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * s[0] + (cols - 1) * s[1] + 1
        }
    };
    assert!(last(m, k, sa) <= la && last(k, n, sb) <= lb && last(m, n, sc) <= lc, "gemm operand out of bounds");
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn take_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }

    fn gemm(dims: [usize; 3], a: &[Self], sa: [usize; 2], b: &[Self], sb: [usize; 2], beta: Self, c: &mut [Self], sc: [usize; 2]) {
        check_gemm_bounds(dims, a.len(), sa, b.len(), sb, c.len(), sc);
        let [m, k, n] = dims;
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: every strided access stays inside the slices (checked above).
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0,
                a.as_ptr(), sa[0] as isize, sa[1] as isize,
                b.as_ptr(), sb[0] as isize, sb[1] as isize,
                beta,
                c.as_mut_ptr(), sc[0] as isize, sc[1] as isize,
            );
        }
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn take_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }

    fn gemm(dims: [usize; 3], a: &[Self], sa: [usize; 2], b: &[Self], sb: [usize; 2], beta: Self, c: &mut [Self], sc: [usize; 2]) {
        check_gemm_bounds(dims, a.len(), sa, b.len(), sb, c.len(), sc);
        let [m, k, n] = dims;
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: every strided access stays inside the slices (checked above).
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0,
                a.as_ptr(), sa[0] as isize, sa[1] as isize,
                b.as_ptr(), sb[0] as isize, sb[1] as isize,
                beta,
                c.as_mut_ptr(), sc[0] as isize, sc[1] as isize,
            );
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {} needs {} values, got {}",
                shape_str(&shape),
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor::from_parts(shape, vec![T::zero(); n])
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor::from_parts(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Tensor::from_parts(vec![], vec![value])
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Tensor::from_parts(shape, data)
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Single element at a multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let st = strides(&self.shape);
        let off: usize = index.iter().zip(&st).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    /// The scalar held by a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {}",
                shape_str(&self.shape)
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(Error::dim(format!(
                "cannot reshape {} into {}",
                shape_str(&self.shape),
                shape_str(&shape)
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.numel().max(1) as f64)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        // x * 0 is NaN exactly for non-finite x; lane-wise sums vectorize
        let mut lanes = [T::zero(); 8];
        let chunks = self.data.chunks_exact(8);
        let tail = chunks.remainder();
        for c in chunks {
            for (l, &v) in lanes.iter_mut().zip(c) {
                *l += v * T::zero();
            }
        }
        lanes.iter().all(|l| *l == T::zero()) && tail.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn bitwise_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "shape mismatch: {} vs {}",
                shape_str(&self.shape),
                shape_str(&other.shape)
            )));
        }
        Ok(())
    }

    /// Serialize as: magic, dtype code, rank, u64 extents, little-endian payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 8 * self.rank() + T::DTYPE.size() * self.numel());
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(T::DTYPE.code());
        out.push(self.rank() as u8);
        for &e in &self.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in self.data.iter() {
            v.put_le(&mut out);
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    /// Reads one blob; a payload stored in the other precision is converted.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |msg: &str| Error::Format {
            path: "<tensor blob>".into(),
            msg: msg.to_string(),
        };
        let io = |e| Error::io("<tensor blob>", e);
        let mut head = [0u8; 6];
        r.read_exact(&mut head).map_err(io)?;
        if &head[..4] != TENSOR_MAGIC {
            return Err(Error::Version(format!(
                "unrecognized tensor magic {:?}",
                &head[..4]
            )));
        }
        let dtype = DType::from_code(head[4]).ok_or_else(|| bad("unknown dtype code"))?;
        let rank = head[5] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut e = [0u8; 8];
            r.read_exact(&mut e).map_err(io)?;
            shape.push(u64::from_le_bytes(e) as usize);
        }
        let n = numel(&shape);
        let mut payload = vec![0u8; n * dtype.size()];
        r.read_exact(&mut payload).map_err(io)?;
        let data = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| T::of(f32::take_le(c) as f64))
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| T::of(f64::take_le(c)))
                .collect(),
        };
        Tensor::new(shape, data)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        Tensor::read_from(&mut cursor)
    }

    /// SHA-256 of the serialized blob, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

trait ToBits {
    fn to_bits_u64(self) -> u64;
}

impl<T: Real> ToBits for T {
    fn to_bits_u64(self) -> u64 {
        // f32 -> f64 widening is exact and injective, so comparing widened bits is bitwise.
        self.as_f64().to_bits()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[]), Vec::<usize>::new());
    }

    #[test]
    fn serialization_layout() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, -2.0]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"VBT1");
        assert_eq!(b[4], 0);
        assert_eq!(b[5], 1);
        assert_eq!(u64::from_le_bytes(b[6..14].try_into().unwrap()), 2);
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 22);
    }

    #[test]
    fn bad_magic_is_version_error() {
        let mut b = Tensor::<f64>::zeros(vec![1]).to_bytes();
        b[0] = b'X';
        assert!(matches!(Tensor::<f64>::from_bytes(&b), Err(Error::Version(_))));
    }

    #[test]
    fn reshape_shares_storage() {
        let t = Tensor::<f64>::from_fn(vec![2, 3], |i| i as f64);
        let r = t.reshape(vec![3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(vec![4]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn blob_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
            let n = values.len();
            let t = Tensor::<f64>::new(vec![1, n], values).unwrap();
            let back = Tensor::<f64>::from_bytes(&t.to_bytes()).unwrap();
            proptest::prop_assert!(t.bitwise_eq(&back));
        }
    }
}
