//! Dense 4-D tensors in (batch, channel, height, width) layout.
//!
//! All numeric state in the crate flows through this type: images, feature
//! maps, depth maps, and every learnable parameter. Data is stored row-major
//! in a shared buffer so cloning a tensor (e.g. binding a parameter into a
//! compute graph) is O(1).

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};

/// Shape of a 4-D tensor, (batch, channels, height, width).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape { batch, channels, height, width }
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    /// Linear index of element (b, c, y, x) in row-major order.
    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.channels + c) * self.height + y) * self.width + x
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.batch, self.channels, self.height, self.width)
    }
}

/// Dense 64-bit tensor. Immutable once built except through [`Tensor::data_mut`],
/// which copies on write if the buffer is shared.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![0.0; shape.numel()]),
            requires_grad: false,
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![value; shape.numel()]),
            requires_grad: false,
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("{} elements for shape {shape}", shape.numel()),
                format!("{}", data.len()),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data), requires_grad: false })
    }

    /// Uniform values in [lo, hi).
    pub fn uniform<R: Rng>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape, data: Arc::new(data), requires_grad: false }
    }

    /// Kaiming-style fan-in scaled uniform init, U(-sqrt(6/fan_in), sqrt(6/fan_in)).
    pub fn kaiming<R: Rng>(shape: Shape, fan_in: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        Self::uniform(shape, -bound, bound, rng)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; copies the buffer if shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.index(b, c, y, x)]
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: Shape) -> Result<Tensor> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::shape(
                "Tensor::reshaped",
                format!("{} elements", self.shape.numel()),
                format!("{} elements for {shape}", shape.numel()),
            ));
        }
        Ok(Tensor { shape, data: Arc::clone(&self.data), requires_grad: self.requires_grad })
    }

    /// Horizontal roll by `s` columns (positive shifts content rightward).
    pub fn roll_width(&self, s: i64) -> Tensor {
        let sh = self.shape;
        let w = sh.width as i64;
        let mut out = vec![0.0; sh.numel()];
        for b in 0..sh.batch {
            for c in 0..sh.channels {
                for y in 0..sh.height {
                    for x in 0..sh.width {
                        let src = (x as i64 - s).rem_euclid(w) as usize;
                        out[sh.index(b, c, y, x)] = self.at(b, c, y, src);
                    }
                }
            }
        }
        Tensor { shape: sh, data: Arc::new(out), requires_grad: false }
    }
}
