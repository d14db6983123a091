//! Boundary padding for equirectangular feature maps.
//!
//! Three modes: plain zeros, horizontal wrap only, and full spherical
//! (circular) padding. Circular padding wraps left/right columns and fills
//! the top/bottom rows with rows mirrored across the pole, rolled by half
//! the width so that crossing the pole lands on the antipodal meridian.
//! Padding is materialized explicitly so convolution never needs to know
//! which mode produced its input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Zero,
    LeftRight,
    Circular,
}

impl std::fmt::Display for PadMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PadMode::Zero => "zero",
            PadMode::LeftRight => "leftright",
            PadMode::Circular => "circular",
        };
        f.write_str(s)
    }
}

/// Padding amounts per side plus the fill mode.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct PadSpec {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
    pub mode: PadMode,
}

impl PadSpec {
    pub fn uniform(vertical: usize, horizontal: usize, mode: PadMode) -> Self {
        PadSpec { top: vertical, bottom: vertical, left: horizontal, right: horizontal, mode }
    }

    /// Padding that keeps a 3x3 convolution with the given dilation
    /// size-preserving: (k-1)/2 * d per axis.
    pub fn for_branch(dilation: (usize, usize), mode: PadMode) -> Self {
        PadSpec::uniform(dilation.0, dilation.1, mode)
    }

    pub fn validate(&self, shape: Shape) -> Result<()> {
        if self.top >= shape.height.max(1) || self.bottom >= shape.height.max(1) {
            return Err(Error::invalid(format!(
                "vertical padding ({}, {}) must be smaller than the input height {}",
                self.top, self.bottom, shape.height
            )));
        }
        if self.left >= shape.width.max(1) || self.right >= shape.width.max(1) {
            return Err(Error::invalid(format!(
                "horizontal padding ({}, {}) must be smaller than the input width {}",
                self.left, self.right, shape.width
            )));
        }
        if self.mode == PadMode::Circular && shape.width % 2 != 0 {
            return Err(Error::invalid(format!(
                "circular padding needs an even width for the half-width pole roll, got {}",
                shape.width
            )));
        }
        Ok(())
    }

    pub fn padded_shape(&self, shape: Shape) -> Shape {
        Shape::new(
            shape.batch,
            shape.channels,
            shape.height + self.top + self.bottom,
            shape.width + self.left + self.right,
        )
    }

    /// Source coordinate in the unpadded input for padded cell (py, px), or
    /// `None` where the mode fills zeros. The pole rule is applied before the
    /// horizontal wrap so corner cells are well-defined.
    fn source(&self, shape: Shape, py: usize, px: usize) -> Option<(usize, usize)> {
        let h = shape.height as i64;
        let w = shape.width as i64;
        let yi = py as i64 - self.top as i64;
        let xi = px as i64 - self.left as i64;
        match self.mode {
            PadMode::Zero => {
                if yi >= 0 && yi < h && xi >= 0 && xi < w {
                    Some((yi as usize, xi as usize))
                } else {
                    None
                }
            }
            PadMode::LeftRight => {
                if yi >= 0 && yi < h {
                    Some((yi as usize, xi.rem_euclid(w) as usize))
                } else {
                    None
                }
            }
            PadMode::Circular => {
                let (row, shift) = if yi < 0 {
                    // pad row j = 1..=top outward copies input row j-1
                    let j = -yi;
                    (j - 1, w / 2)
                } else if yi >= h {
                    let j = yi - h + 1;
                    (h - j, w / 2)
                } else {
                    (yi, 0)
                };
                Some((row as usize, (xi + shift).rem_euclid(w) as usize))
            }
        }
    }
}

/// Materialize the padded tensor.
pub fn pad(input: &Tensor, spec: &PadSpec) -> Result<Tensor> {
    let ish = input.shape();
    spec.validate(ish)?;
    let osh = spec.padded_shape(ish);
    let mut out = vec![0.0; osh.numel()];
    for py in 0..osh.height {
        for px in 0..osh.width {
            if let Some((sy, sx)) = spec.source(ish, py, px) {
                for b in 0..ish.batch {
                    for c in 0..ish.channels {
                        out[osh.index(b, c, py, px)] = input.at(b, c, sy, sx);
                    }
                }
            }
        }
    }
    Tensor::from_vec(osh, out)
}

/// Reverse of [`pad`]: fold the gradient of the padded tensor back onto the
/// source cells, accumulating wherever a source cell was replicated.
pub fn pad_backward(grad_out: &Tensor, spec: &PadSpec, in_shape: Shape) -> Tensor {
    let osh = grad_out.shape();
    let mut grad_in = vec![0.0; in_shape.numel()];
    for py in 0..osh.height {
        for px in 0..osh.width {
            if let Some((sy, sx)) = spec.source(in_shape, py, px) {
                for b in 0..in_shape.batch {
                    for c in 0..in_shape.channels {
                        grad_in[in_shape.index(b, c, sy, sx)] += grad_out.at(b, c, py, px);
                    }
                }
            }
        }
    }
    Tensor::from_vec(in_shape, grad_in).expect("grad sized from in_shape")
}
