//! Dense 4-D tensor in batch x channel x height x width layout.
//!
//! Data is always contiguous row-major (w fastest), which keeps oracle
//! comparisons and cost accounting straightforward. Two element types are
//! supported: `f32` for inference/training paths and `f64` for gradient
//! checking.

use std::fmt;
use std::io::{Read, Write};

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type code used by the LPT1/LPNW1 file formats.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

/// Numeric element trait: everything the kernels need from f32/f64.
pub trait Scalar:
    Float + std::ops::AddAssign + std::iter::Sum + fmt::Debug + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("f64 conversion")
    }

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    const BYTE_WIDTH: usize;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const BYTE_WIDTH: usize = 4;

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const BYTE_WIDTH: usize = 8;

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Shorthand for converting an f64 literal into the working scalar type.
pub fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}

/// 4-tuple shape (n, c, h, w).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense contiguous 4-D array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut T {
        let i = self.offset(n, c, y, x);
        &mut self.data[i]
    }

    /// The contiguous h*w plane for one (sample, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape.h * self.shape.w;
        let start = (n * self.shape.c + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let hw = self.shape.h * self.shape.w;
        let start = (n * self.shape.c + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Horizontal mirror (x -> w-1-x). Pure data movement.
    pub fn mirror_w(&self) -> Self {
        let s = self.shape;
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let src = self.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..s.h {
                    for x in 0..s.w {
                        dst[y * s.w + x] = src[y * s.w + (s.w - 1 - x)];
                    }
                }
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Largest |a-b| / max(|a|, |b|, 1) over all elements.
    pub fn max_rel_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let (a, b) = (a.as_f64(), b.as_f64());
                (a - b).abs() / a.abs().max(b.abs()).max(1.0)
            })
            .fold(0.0, f64::max)
    }
}

const LPT1_MAGIC: &[u8; 4] = b"LPT1";

/// Write a tensor in the LPT1 format: magic, dtype code, 4 little-endian u64
/// dims, raw little-endian elements.
pub fn write_lpt1<T: Scalar, W: Write>(t: &Tensor<T>, mut out: W) -> Result<()> {
    out.write_all(LPT1_MAGIC)?;
    out.write_all(&[T::DTYPE as u8])?;
    for d in t.shape().dims() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * T::BYTE_WIDTH);
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

/// A tensor read from disk; dtype chosen by the file header.
#[derive(Debug)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> Shape {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Widen to f64 regardless of storage type.
    pub fn into_f64(self) -> Tensor<f64> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t,
        }
    }
}

pub fn read_lpt1<R: Read>(mut input: R) -> Result<AnyTensor> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != LPT1_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected LPT1",
            magic
        )));
    }
    let mut code = [0u8; 1];
    input.read_exact(&mut code)?;
    let dtype = Dtype::from_code(code[0])?;
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        let mut b = [0u8; 8];
        input.read_exact(&mut b)?;
        *d = u64::from_le_bytes(b) as usize;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let count = shape.numel();
    match dtype {
        Dtype::F32 => Ok(AnyTensor::F32(read_elements::<f32, R>(input, shape, count)?)),
        Dtype::F64 => Ok(AnyTensor::F64(read_elements::<f64, R>(input, shape, count)?)),
    }
}

fn read_elements<T: Scalar, R: Read>(mut input: R, shape: Shape, count: usize) -> Result<Tensor<T>> {
    let mut raw = vec![0u8; count * T::BYTE_WIDTH];
    input.read_exact(&mut raw).map_err(|e| {
        Error::Format(format!(
            "truncated LPT1 payload (wanted {} elements): {e}",
            count
        ))
    })?;
    let data = raw.chunks_exact(T::BYTE_WIDTH).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Tensor::<f32>::from_vec(Shape::new(1, 2, 2, 2), vec![0.0; 7]).unwrap_err();
        assert!(err.to_string().contains("does not match"));
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::<f32>::from_fn(Shape::new(2, 3, 4, 5), |n, c, y, x| {
            (n * 1000 + c * 100 + y * 10 + x) as f32
        });
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.plane(1, 2)[3 * 5 + 4], 1234.0);
    }

    #[test]
    fn mirror_is_involutive() {
        let t = Tensor::<f64>::from_fn(Shape::new(1, 2, 3, 4), |_, c, y, x| {
            (c * 100 + y * 10 + x) as f64
        });
        assert_eq!(t.mirror_w().mirror_w(), t);
        assert_eq!(t.mirror_w().at(0, 1, 2, 0), t.at(0, 1, 2, 3));
    }

    #[test]
    fn lpt1_truncated_payload_is_reported() {
        let t = Tensor::<f32>::full(Shape::new(1, 1, 2, 2), 3.5);
        let mut bytes = Vec::new();
        write_lpt1(&t, &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = read_lpt1(&bytes[..]).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn lpt1_rejects_bad_magic() {
        let err = read_lpt1(&b"NOPE....."[..]).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }
}
