//! Dense row-major tensors over f32 (default) or f64.
//!
//! The f64 instantiation exists for gradient checking; everything that ships
//! runs in f32. Buffer allocations are tracked per thread so inference peak
//! memory can be measured reproducibly (see [`alloc`]).

use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Element type the engine can run on.
pub trait Scalar:
    Copy
    + PartialOrd
    + PartialEq
    + std::fmt::Debug
    + std::fmt::Display
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
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn from_f32(v: f32) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite_scalar(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite_scalar(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn from_f32(v: f32) -> Self {
        f64::from(v)
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite_scalar(self) -> bool {
        self.is_finite()
    }
}

/// Per-thread accounting of live tensor buffer bytes.
///
/// The current count and its high-water mark are thread local, which keeps
/// benchmark measurements immune to whatever other threads (or parallel
/// tests) are allocating. Counts can momentarily go negative on threads that
/// drop tensors created elsewhere; the benchmark path never does that.
pub mod alloc {
    use std::cell::Cell;

    thread_local! {
        static LIVE: Cell<i64> = const { Cell::new(0) };
        static PEAK: Cell<i64> = const { Cell::new(0) };
    }

    pub(super) fn record_alloc(bytes: usize) {
        LIVE.with(|l| {
            let now = l.get() + bytes as i64;
            l.set(now);
            PEAK.with(|p| {
                if now > p.get() {
                    p.set(now);
                }
            });
        });
    }

    pub(super) fn record_free(bytes: usize) {
        LIVE.with(|l| l.set(l.get() - bytes as i64));
    }

    /// Bytes currently held by tensors created on this thread.
    pub fn live_bytes() -> i64 {
        LIVE.with(Cell::get)
    }

    /// High-water mark since the last [`reset_peak`] on this thread.
    pub fn peak_bytes() -> i64 {
        PEAK.with(Cell::get)
    }

    /// Reset the high-water mark to the current live count.
    pub fn reset_peak() {
        let live = live_bytes();
        PEAK.with(|p| p.set(live));
    }
}

/// Dense N-dimensional array, row-major.
#[derive(Debug)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len: usize = shape.iter().product();
        alloc::record_alloc(len * std::mem::size_of::<S>());
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::ZERO; len],
        }
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::from_vec",
                expected: format!("{expected} elements for shape {shape:?}"),
                got: format!("{}", data.len()),
            });
        }
        alloc::record_alloc(data.len() * std::mem::size_of::<S>());
        Ok(Tensor { shape, data })
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor<S>> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::reshaped",
                expected: format!("{} elements", self.data.len()),
                got: format!("shape {shape:?} ({expected} elements)"),
            });
        }
        let mut out = Tensor::zeros(shape);
        out.data.copy_from_slice(&self.data);
        Ok(out)
    }

    pub fn convert<T: Scalar>(&self) -> Tensor<T> {
        let mut out = Tensor::<T>::zeros(&self.shape);
        for (o, v) in out.data.iter_mut().zip(self.data.iter()) {
            *o = T::from_f64(v.to_f64());
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite_scalar())
    }

    /// Index into an NCHW tensor.
    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> S {
        debug_assert_eq!(self.shape.len(), 4);
        let (cc, hh, ww) = (self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    #[inline]
    pub fn at4_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut S {
        debug_assert_eq!(self.shape.len(), 4);
        let (cc, hh, ww) = (self.shape[1], self.shape[2], self.shape[3]);
        &mut self.data[((n * cc + c) * hh + h) * ww + w]
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> S {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn at2_mut(&mut self, r: usize, c: usize) -> &mut S {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        &mut self.data[r * cols + c]
    }
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        alloc::record_alloc(self.data.len() * std::mem::size_of::<S>());
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
        }
    }
}

impl<S: Scalar> Drop for Tensor<S> {
    fn drop(&mut self) {
        alloc::record_free(self.data.len() * std::mem::size_of::<S>());
    }
}

impl<S: Scalar> PartialEq for Tensor<S> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}
