//! Dense row-major tensors used throughout the pipeline.
//!
//! Everything in the model is expressed over a 4-axis grid
//! (temporal × height × width × channel). Layers that act per token treat the
//! grid as a `[tokens × channels]` matrix, which is free because the channel
//! axis is innermost.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating point element type. Training runs in `f32`; gradient checks run in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn erf(self) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Real for f32 {
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Real for f64 {
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// A 4-axis tensor `[T × H × W × C]`, row-major with the channel axis innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<S> {
    dims: [usize; 4],
    data: Vec<S>,
}

/// Raw or preprocessed video frames, `[T × H × W × 3]`.
pub type Video<S = f32> = TokenGrid<S>;

impl<S: Copy + Default> TokenGrid<S> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![S::default(); dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<S>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "grid {:?} needs {} elements, got {}",
                dims,
                expected,
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for t in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    for c in 0..dims[3] {
                        data.push(f(t, h, w, c));
                    }
                }
            }
        }
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn frames(&self) -> usize {
        self.dims[0]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.dims[1]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.dims[2]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.dims[3]
    }

    /// Number of tokens, i.e. `T·H·W`.
    #[inline]
    pub fn tokens(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn offset(&self, t: usize, h: usize, w: usize) -> usize {
        ((t * self.dims[1] + h) * self.dims[2] + w) * self.dims[3]
    }

    #[inline]
    pub fn get(&self, t: usize, h: usize, w: usize, c: usize) -> S {
        self.data[self.offset(t, h, w) + c]
    }

    #[inline]
    pub fn set(&mut self, t: usize, h: usize, w: usize, c: usize, v: S) {
        let o = self.offset(t, h, w) + c;
        self.data[o] = v;
    }

    /// Channel vector of one token.
    #[inline]
    pub fn token(&self, t: usize, h: usize, w: usize) -> &[S] {
        let o = self.offset(t, h, w);
        &self.data[o..o + self.dims[3]]
    }

    /// One frame as a `[1 × H × W × C]` grid.
    pub fn frame(&self, t: usize) -> TokenGrid<S> {
        let len = self.dims[1] * self.dims[2] * self.dims[3];
        TokenGrid {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[t * len..(t + 1) * len].to_vec(),
        }
    }

    /// Concatenate frames along the temporal axis. All frames must share `H × W × C`.
    pub fn stack_frames(frames: &[TokenGrid<S>]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero frames".into()))?;
        let [_, h, w, c] = first.dims;
        let mut data = Vec::with_capacity(frames.len() * h * w * c);
        let mut t = 0;
        for f in frames {
            if f.dims[1..] != first.dims[1..] {
                return Err(Error::Shape(format!(
                    "frame dims {:?} differ from {:?}",
                    f.dims, first.dims
                )));
            }
            data.extend_from_slice(&f.data);
            t += f.dims[0];
        }
        Ok(Self {
            dims: [t, h, w, c],
            data,
        })
    }

    pub fn map<U>(&self, f: impl Fn(S) -> U) -> TokenGrid<U> {
        TokenGrid {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Reinterpret with new dims of equal element count.
    pub fn reshape(self, dims: [usize; 4]) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }
}

impl<S: Real> TokenGrid<S> {
    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        assert_eq!(self.dims, other.dims, "max_abs_diff on mismatched grids");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(S::zero(), S::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> TokenGrid<U> {
        self.map(|v| U::from(v).expect("finite cast"))
    }
}
