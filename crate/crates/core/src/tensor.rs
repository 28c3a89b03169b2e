//! Dense row-major tensors.
//!
//! Feature maps are stored as `(channels, height, width)`. Viewing a map as
//! an `n_p x n_c` matrix (pixels by channels) is a convention of the
//! statistics code and never requires a copy.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tiling::Rect;

/// Element types the kernels run in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
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

impl std::str::FromStr for DType {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(format!("unknown dtype {other:?} (expected f32 or f64)")),
        }
    }
}

impl Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

/// Floating point scalar usable by every kernel.
pub trait Real:
    Copy
    + Default
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const DTYPE: DType;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;

    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one value from the first `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_real {
    ($t:ty, $dt:expr, $n:expr) => {
        impl Real for $t {
            const DTYPE: DType = $dt;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                let mut b = [0u8; $n];
                b.copy_from_slice(&bytes[..$n]);
                <$t>::from_le_bytes(b)
            }
        }
    };
}

impl_real!(f32, DType::F32, 4);
impl_real!(f64, DType::F64, 8);

/// Dense tensor with a dynamic shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!("shape {:?} needs {} values, got {}", shape, n, data.len()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn nbytes(&self) -> usize {
        self.data.len() * T::DTYPE.size()
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            s => shape_err(format!("expected rank-3 (c,h,w) tensor, got shape {s:?}")),
        }
    }

    /// Channel plane `c` of a rank-3 tensor.
    pub fn plane(&self, c: usize) -> &[T] {
        let (h, w) = (self.shape[1], self.shape[2]);
        &self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let (h, w) = (self.shape[1], self.shape[2]);
        &mut self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("cannot add {:?} to {:?}", other.shape, self.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Inner product accumulated in f64.
    pub fn dot(&self, other: &Tensor<T>) -> Result<f64> {
        if self.shape != other.shape {
            return shape_err(format!("cannot dot {:?} with {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.to_f64() * b.to_f64())
            .sum())
    }

    pub fn norm_l2(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| {
                let v = v.to_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Spatial crop of a rank-3 tensor. The rectangle must lie inside.
    pub fn crop(&self, r: Rect) -> Result<Self> {
        let (c, h, w) = self.dims3()?;
        if r.x + r.w > w || r.y + r.h > h {
            return shape_err(format!("crop {r:?} outside {h}x{w} map"));
        }
        let mut data = Vec::with_capacity(c * r.h * r.w);
        for ch in 0..c {
            let plane = self.plane(ch);
            for y in r.y..r.y + r.h {
                data.extend_from_slice(&plane[y * w + r.x..y * w + r.x + r.w]);
            }
        }
        Ok(Tensor {
            shape: vec![c, r.h, r.w],
            data,
        })
    }

    /// Writes `src` into this rank-3 tensor with its top-left at `(x, y)`.
    pub fn paste(&mut self, src: &Tensor<T>, x: usize, y: usize) -> Result<()> {
        let (c, h, w) = self.dims3()?;
        let (sc, sh, sw) = src.dims3()?;
        if sc != c || x + sw > w || y + sh > h {
            return shape_err(format!(
                "cannot paste {:?} at ({x},{y}) into {:?}",
                src.shape, self.shape
            ));
        }
        for ch in 0..c {
            let sp = src.plane(ch);
            let dp = self.plane_mut(ch);
            for row in 0..sh {
                dp[(y + row) * w + x..(y + row) * w + x + sw].copy_from_slice(&sp[row * sw..(row + 1) * sw]);
            }
        }
        Ok(())
    }

    /// Pads right/bottom edges of a rank-3 tensor by replicating the last
    /// row and column.
    pub fn pad_replicate(&self, new_h: usize, new_w: usize) -> Result<Self> {
        let (c, h, w) = self.dims3()?;
        if new_h < h || new_w < w || h == 0 || w == 0 {
            return shape_err(format!("cannot pad {h}x{w} to {new_h}x{new_w}"));
        }
        if new_h == h && new_w == w {
            return Ok(self.clone());
        }
        let mut out = Tensor::zeros(&[c, new_h, new_w]);
        for ch in 0..c {
            let sp = self.plane(ch);
            let dp = out.plane_mut(ch);
            for y in 0..new_h {
                let sy = y.min(h - 1);
                let src = &sp[sy * w..(sy + 1) * w];
                let dst = &mut dp[y * new_w..(y + 1) * new_w];
                dst[..w].copy_from_slice(src);
                let last = src[w - 1];
                dst[w..].iter_mut().for_each(|v| *v = last);
            }
        }
        Ok(out)
    }

    /// Adjoint of [`Tensor::pad_replicate`]: folds the gradient of the
    /// replicated pixels back onto the edge they were copied from, then crops.
    pub fn unpad_replicate_adjoint(&self, h: usize, w: usize) -> Result<Self> {
        let (c, ph, pw) = self.dims3()?;
        if ph < h || pw < w || h == 0 || w == 0 {
            return shape_err(format!("cannot fold {ph}x{pw} onto {h}x{w}"));
        }
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            let sp = self.plane(ch);
            let dp = out.plane_mut(ch);
            for y in 0..ph {
                let dy = y.min(h - 1);
                for x in 0..pw {
                    dp[dy * w + x.min(w - 1)] += sp[y * pw + x];
                }
            }
        }
        Ok(out)
    }
}

/// Relative L2 distance `|a - b| / |b|` accumulated in f64.
pub fn rel_l2<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let d = x.to_f64() - y.to_f64();
        num += d * d;
        den += y.to_f64() * y.to_f64();
    }
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    }
}
