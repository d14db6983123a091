//! Reverse-Huber (BerHu) training loss with the per-image adaptive threshold.
//!
//! For each image the threshold is c = max|pred - gt| / 5 over valid pixels.
//! Errors at or below c contribute |delta|, larger errors the scaled
//! quadratic (delta^2 + c^2) / (2c); the two branches agree at |delta| = c.
//! The threshold is treated as a constant during backpropagation.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Per-pixel validity; true where ground truth is usable. Shape mirrors a
/// single-channel depth map (B, 1, H, W).
#[derive(Clone, Debug)]
pub struct ValidMask {
    shape: Shape,
    data: Vec<bool>,
}

impl ValidMask {
    pub fn from_vec(shape: Shape, data: Vec<bool>) -> Result<Self> {
        if shape.channels != 1 {
            return Err(Error::shape("ValidMask", "single channel", format!("{shape}")));
        }
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "ValidMask",
                format!("{} entries", shape.numel()),
                format!("{}", data.len()),
            ));
        }
        Ok(ValidMask { shape, data })
    }

    pub fn all_valid(batch: usize, height: usize, width: usize) -> Self {
        let shape = Shape::new(batch, 1, height, width);
        ValidMask { shape, data: vec![true; shape.numel()] }
    }

    /// Valid wherever the stored flag holds and the depth is strictly positive
    /// (zeros mark missing ground truth).
    pub fn and_positive(&self, depth: &Tensor) -> Result<ValidMask> {
        if depth.shape() != self.shape {
            return Err(Error::shape("ValidMask::and_positive", format!("{}", self.shape), format!("{}", depth.shape())));
        }
        let data = self.data.iter().zip(depth.data()).map(|(&m, &d)| m && d > 0.0).collect();
        Ok(ValidMask { shape: self.shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn get(&self, b: usize, y: usize, x: usize) -> bool {
        self.data[self.shape.index(b, 0, y, x)]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }
}

fn check_loss_shapes(pred: &Tensor, gt: &Tensor, mask: &ValidMask) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("berhu", format!("{}", gt.shape()), format!("{}", pred.shape())));
    }
    if pred.shape().channels != 1 || pred.shape() != mask.shape() {
        return Err(Error::shape(
            "berhu",
            format!("single-channel maps matching mask {}", mask.shape()),
            format!("{}", pred.shape()),
        ));
    }
    Ok(())
}

/// Per-image threshold c = max over valid pixels of |pred - gt|, divided by 5.
pub fn berhu_c(pred: &Tensor, gt: &Tensor, mask: &ValidMask) -> Result<Vec<f64>> {
    check_loss_shapes(pred, gt, mask)?;
    let sh = pred.shape();
    let mut cs = Vec::with_capacity(sh.batch);
    for b in 0..sh.batch {
        let mut max_abs: Option<f64> = None;
        for y in 0..sh.height {
            for x in 0..sh.width {
                if mask.get(b, y, x) {
                    let d = (pred.at(b, 0, y, x) - gt.at(b, 0, y, x)).abs();
                    max_abs = Some(max_abs.map_or(d, |m| m.max(d)));
                }
            }
        }
        match max_abs {
            Some(m) => cs.push(m / 5.0),
            None => return Err(Error::EmptyMask),
        }
    }
    Ok(cs)
}

/// Piecewise BerHu penalty of a single residual.
pub fn berhu_value(delta: f64, c: f64) -> f64 {
    let a = delta.abs();
    if a <= c {
        a
    } else {
        (delta * delta + c * c) / (2.0 * c)
    }
}

fn berhu_ddelta(delta: f64, c: f64) -> f64 {
    let a = delta.abs();
    if a <= c {
        delta.signum() * if a == 0.0 { 0.0 } else { 1.0 }
    } else {
        delta / c
    }
}

/// Mean BerHu penalty over valid pixels using precomputed per-image
/// thresholds. Returns the loss and the number of pixels averaged.
pub fn berhu_loss_with_c(pred: &Tensor, gt: &Tensor, mask: &ValidMask, c: &[f64]) -> (f64, usize) {
    let sh = pred.shape();
    let mut total = 0.0;
    let mut count = 0usize;
    for b in 0..sh.batch {
        for y in 0..sh.height {
            for x in 0..sh.width {
                if mask.get(b, y, x) {
                    total += berhu_value(pred.at(b, 0, y, x) - gt.at(b, 0, y, x), c[b]);
                    count += 1;
                }
            }
        }
    }
    (if count == 0 { 0.0 } else { total / count as f64 }, count)
}

/// BerHu loss of a batch: per-image adaptive threshold, mean over all valid
/// pixels.
pub fn berhu_loss(pred: &Tensor, gt: &Tensor, mask: &ValidMask) -> Result<f64> {
    let c = berhu_c(pred, gt, mask)?;
    Ok(berhu_loss_with_c(pred, gt, mask, &c).0)
}

/// Gradient of `upstream * berhu_loss` w.r.t. the prediction; the threshold
/// carries no gradient.
pub fn berhu_grad(
    pred: &Tensor,
    gt: &Tensor,
    mask: &ValidMask,
    c: &[f64],
    count: usize,
    upstream: f64,
) -> Tensor {
    let sh = pred.shape();
    let scale = if count == 0 { 0.0 } else { upstream / count as f64 };
    let mut grad = vec![0.0; sh.numel()];
    for b in 0..sh.batch {
        for y in 0..sh.height {
            for x in 0..sh.width {
                if mask.get(b, y, x) {
                    let delta = pred.at(b, 0, y, x) - gt.at(b, 0, y, x);
                    grad[sh.index(b, 0, y, x)] = scale * berhu_ddelta(delta, c[b]);
                }
            }
        }
    }
    Tensor::from_vec(sh, grad).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(values: &[f64], h: usize, w: usize) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, h, w), values.to_vec()).unwrap()
    }

    #[test]
    fn threshold_is_fifth_of_max_error() {
        let pred = map(&[0.5, 1.0, 2.5], 1, 3);
        let gt = map(&[0.0, 0.0, 0.0], 1, 3);
        let mask = ValidMask::all_valid(1, 1, 3);
        let c = berhu_c(&pred, &gt, &mask).unwrap();
        assert_eq!(c, vec![0.5]);
    }

    #[test]
    fn exact_prediction_gives_zero() {
        let pred = map(&[1.0, 2.0, 3.0, 4.0], 2, 2);
        let mask = ValidMask::all_valid(1, 2, 2);
        assert_eq!(berhu_c(&pred, &pred, &mask).unwrap(), vec![0.0]);
        assert_eq!(berhu_loss(&pred, &pred, &mask).unwrap(), 0.0);
    }

    #[test]
    fn threshold_matches_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let sh = Shape::new(3, 1, 6, 9);
        let pred = Tensor::uniform(sh, 0.0, 8.0, &mut rng);
        let gt = Tensor::uniform(sh, 0.0, 8.0, &mut rng);
        let mask_data: Vec<bool> = (0..sh.numel()).map(|_| rng.gen_bool(0.8)).collect();
        let mask = ValidMask::from_vec(sh, mask_data).unwrap();
        let c = berhu_c(&pred, &gt, &mask).unwrap();
        for b in 0..3 {
            let mut m = 0.0f64;
            for y in 0..6 {
                for x in 0..9 {
                    if mask.get(b, y, x) {
                        m = m.max((pred.at(b, 0, y, x) - gt.at(b, 0, y, x)).abs());
                    }
                }
            }
            assert!((c[b] - m / 5.0).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_branch_worked_example() {
        // delta = 2.5, c = 0.5 -> (6.25 + 0.25) / 1.0 = 6.5
        assert!((berhu_value(2.5, 0.5) - 6.5).abs() < 1e-15);
    }

    #[test]
    fn linear_branch_worked_example() {
        // delta = 0.3, c = 0.5 -> 0.3
        assert!((berhu_value(0.3, 0.5) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_rejected() {
        let pred = map(&[1.0], 1, 1);
        let mask = ValidMask::from_vec(Shape::new(1, 1, 1, 1), vec![false]).unwrap();
        assert!(matches!(berhu_c(&pred, &pred, &mask), Err(Error::EmptyMask)));
    }

    #[test]
    fn per_image_thresholds_are_independent() {
        let sh = Shape::new(2, 1, 1, 2);
        let pred = Tensor::from_vec(sh, vec![1.0, 2.0, 10.0, 0.0]).unwrap();
        let gt = Tensor::from_vec(sh, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let mask = ValidMask::all_valid(2, 1, 2);
        let c = berhu_c(&pred, &gt, &mask).unwrap();
        assert_eq!(c, vec![0.4, 2.0]);
    }

    #[test]
    fn gradient_matches_finite_differences_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let sh = Shape::new(2, 1, 4, 6);
        let pred = Tensor::uniform(sh, 0.5, 6.0, &mut rng);
        let gt = Tensor::uniform(sh, 0.5, 6.0, &mut rng);
        let mask = ValidMask::all_valid(2, 4, 6);
        let c = berhu_c(&pred, &gt, &mask).unwrap();
        let (_, count) = berhu_loss_with_c(&pred, &gt, &mask, &c);
        let grad = berhu_grad(&pred, &gt, &mask, &c, count, 1.0);
        let h = 1e-6;
        for idx in 0..sh.numel() {
            let b = idx / (sh.height * sh.width);
            let delta = (pred.data()[idx] - gt.data()[idx]).abs();
            if (delta - c[b]).abs() < 1e-4 || delta.abs() < 1e-4 {
                continue; // kink of |.| or of the branch switch
            }
            // hold c fixed, like the implementation does
            let mut plus = pred.clone();
            plus.data_mut()[idx] += h;
            let mut minus = pred.clone();
            minus.data_mut()[idx] -= h;
            let fp = berhu_loss_with_c(&plus, &gt, &mask, &c).0;
            let fm = berhu_loss_with_c(&minus, &gt, &mask, &c).0;
            let fd = (fp - fm) / (2.0 * h);
            let a = grad.data()[idx];
            assert!(
                (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-4,
                "idx {idx}: {a} vs {fd}"
            );
        }
    }

    proptest! {
        #[test]
        fn continuous_at_threshold(c in 1e-6f64..1e3) {
            let low = berhu_value(c, c);
            let high = berhu_value(c + 1e-12 * c, c);
            prop_assert!((low - c).abs() < 1e-12 * c.max(1.0));
            prop_assert!((high - low).abs() < 1e-9 * c.max(1.0));
        }

        #[test]
        fn monotone_in_abs_delta(c in 1e-6f64..100.0, d1 in 0.0f64..50.0, d2 in 0.0f64..50.0) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(berhu_value(lo, c) <= berhu_value(hi, c) + 1e-12);
        }
    }
}
