//! Forward kernels and gradients for the non-convolution tensor ops.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Horizontal boundary handling for bilinear upsampling. The azimuth axis of
/// an equirectangular image is periodic, so networks padded with a wrapping
/// mode interpolate across the seam; the plain op clamps like any image
/// resize. Vertical neighbors always clamp (the poles are not periodic).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SeamMode {
    Clamp,
    Wrap,
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

pub(crate) fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Tensor {
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

/// Mean over the spatial extent per (batch, channel); output is (B, C, 1, 1).
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let sh = input.shape();
    let hw = sh.height * sh.width;
    if hw == 0 {
        return Err(Error::invalid("global_avg_pool needs a non-empty spatial extent"));
    }
    let mut out = vec![0.0; sh.batch * sh.channels];
    for b in 0..sh.batch {
        for c in 0..sh.channels {
            let start = sh.index(b, c, 0, 0);
            out[b * sh.channels + c] =
                input.data()[start..start + hw].iter().sum::<f64>() / hw as f64;
        }
    }
    Tensor::from_vec(Shape::new(sh.batch, sh.channels, 1, 1), out)
}

pub(crate) fn global_avg_pool_backward(grad_out: &Tensor, in_shape: Shape) -> Tensor {
    let hw = (in_shape.height * in_shape.width) as f64;
    let mut grad = vec![0.0; in_shape.numel()];
    for b in 0..in_shape.batch {
        for c in 0..in_shape.channels {
            let g = grad_out.at(b, c, 0, 0) / hw;
            let start = in_shape.index(b, c, 0, 0);
            for v in &mut grad[start..start + in_shape.height * in_shape.width] {
                *v = g;
            }
        }
    }
    Tensor::from_vec(in_shape, grad).expect("same shape")
}

/// Mean over channels and width per row; output is (B, H, 1, 1).
pub fn row_mean(input: &Tensor) -> Result<Tensor> {
    let sh = input.shape();
    if sh.channels * sh.width == 0 {
        return Err(Error::invalid("row_mean needs non-empty channels and width"));
    }
    let denom = (sh.channels * sh.width) as f64;
    let mut out = vec![0.0; sh.batch * sh.height];
    for b in 0..sh.batch {
        for c in 0..sh.channels {
            for y in 0..sh.height {
                let start = sh.index(b, c, y, 0);
                out[b * sh.height + y] +=
                    input.data()[start..start + sh.width].iter().sum::<f64>();
            }
        }
    }
    for v in &mut out {
        *v /= denom;
    }
    Tensor::from_vec(Shape::new(sh.batch, sh.height, 1, 1), out)
}

pub(crate) fn row_mean_backward(grad_out: &Tensor, in_shape: Shape) -> Tensor {
    let denom = (in_shape.channels * in_shape.width) as f64;
    let mut grad = vec![0.0; in_shape.numel()];
    for b in 0..in_shape.batch {
        for y in 0..in_shape.height {
            let g = grad_out.at(b, y, 0, 0) / denom;
            for c in 0..in_shape.channels {
                let start = in_shape.index(b, c, y, 0);
                for v in &mut grad[start..start + in_shape.width] {
                    *v = g;
                }
            }
        }
    }
    Tensor::from_vec(in_shape, grad).expect("same shape")
}

/// Fully connected map on per-batch vectors: input (B, C, 1, 1) with weight
/// (O, C, 1, 1) and optional per-output bias.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&[f64]>) -> Result<Tensor> {
    let ish = input.shape();
    let wsh = weight.shape();
    if ish.height != 1 || ish.width != 1 {
        return Err(Error::shape("linear", "(B, C, 1, 1) input", format!("{ish}")));
    }
    if wsh.channels != ish.channels {
        return Err(Error::shape(
            "linear",
            format!("weight with {} columns", ish.channels),
            format!("{}", wsh.channels),
        ));
    }
    if let Some(bias) = bias {
        if bias.len() != wsh.batch {
            return Err(Error::shape("linear bias", format!("{}", wsh.batch), format!("{}", bias.len())));
        }
    }
    let (b_n, c_in, c_out) = (ish.batch, ish.channels, wsh.batch);
    let mut out = vec![0.0; b_n * c_out];
    for b in 0..b_n {
        let x = &input.data()[b * c_in..(b + 1) * c_in];
        for o in 0..c_out {
            let w = &weight.data()[o * c_in..(o + 1) * c_in];
            let mut acc = bias.map_or(0.0, |bv| bv[o]);
            for (wi, xi) in w.iter().zip(x) {
                acc += wi * xi;
            }
            out[b * c_out + o] = acc;
        }
    }
    Tensor::from_vec(Shape::new(b_n, c_out, 1, 1), out)
}

pub(crate) struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

pub(crate) fn linear_backward(grad_out: &Tensor, input: &Tensor, weight: &Tensor) -> LinearGrads {
    let ish = input.shape();
    let wsh = weight.shape();
    let (b_n, c_in, c_out) = (ish.batch, ish.channels, wsh.batch);
    let mut gx = vec![0.0; b_n * c_in];
    let mut gw = vec![0.0; c_out * c_in];
    let mut gb = vec![0.0; c_out];
    for b in 0..b_n {
        let x = &input.data()[b * c_in..(b + 1) * c_in];
        for o in 0..c_out {
            let g = grad_out.data()[b * c_out + o];
            gb[o] += g;
            let w = &weight.data()[o * c_in..(o + 1) * c_in];
            for c in 0..c_in {
                gx[b * c_in + c] += g * w[c];
                gw[o * c_in + c] += g * x[c];
            }
        }
    }
    LinearGrads {
        input: Tensor::from_vec(ish, gx).expect("same shape"),
        weight: Tensor::from_vec(wsh, gw).expect("same shape"),
        bias: gb,
    }
}

/// Softmax across `groups` equally sized channel blocks; entry (b, c, y, x)
/// of block j is normalized against the same (b, c, y, x) of every other
/// block. Max-subtraction keeps large logits finite.
pub fn softmax_groups(input: &Tensor, groups: usize) -> Result<Tensor> {
    let sh = input.shape();
    if groups == 0 || sh.channels % groups != 0 {
        return Err(Error::invalid(format!(
            "softmax_groups: {} channels not divisible into {groups} groups",
            sh.channels
        )));
    }
    let block = sh.channels / groups;
    let mut out = vec![0.0; sh.numel()];
    let mut vals = vec![0.0; groups];
    for b in 0..sh.batch {
        for c in 0..block {
            for y in 0..sh.height {
                for x in 0..sh.width {
                    for (j, v) in vals.iter_mut().enumerate() {
                        *v = input.at(b, j * block + c, y, x);
                    }
                    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in vals.iter_mut() {
                        *v = (*v - m).exp();
                        sum += *v;
                    }
                    for (j, v) in vals.iter().enumerate() {
                        out[sh.index(b, j * block + c, y, x)] = v / sum;
                    }
                }
            }
        }
    }
    Tensor::from_vec(sh, out)
}

pub(crate) fn softmax_groups_backward(grad_out: &Tensor, output: &Tensor, groups: usize) -> Tensor {
    let sh = output.shape();
    let block = sh.channels / groups;
    let mut grad = vec![0.0; sh.numel()];
    for b in 0..sh.batch {
        for c in 0..block {
            for y in 0..sh.height {
                for x in 0..sh.width {
                    let mut dot = 0.0;
                    for j in 0..groups {
                        let i = sh.index(b, j * block + c, y, x);
                        dot += grad_out.data()[i] * output.data()[i];
                    }
                    for j in 0..groups {
                        let i = sh.index(b, j * block + c, y, x);
                        grad[i] = output.data()[i] * (grad_out.data()[i] - dot);
                    }
                }
            }
        }
    }
    Tensor::from_vec(sh, grad).expect("same shape")
}

/// Interpolation taps along one axis for a 2x half-pixel-center upsample:
/// output i samples source coordinate i/2 - 0.25.
fn axis_taps(n_out: usize, n_in: usize, seam: SeamMode) -> Vec<(usize, usize, f64)> {
    let n = n_in as i64;
    (0..n_out)
        .map(|i| {
            let s = (i as f64 + 0.5) / 2.0 - 0.5;
            let i0 = s.floor() as i64;
            let w = s - i0 as f64;
            let (a, b) = match seam {
                SeamMode::Clamp => (i0.clamp(0, n - 1), (i0 + 1).clamp(0, n - 1)),
                SeamMode::Wrap => (i0.rem_euclid(n), (i0 + 1).rem_euclid(n)),
            };
            (a as usize, b as usize, w)
        })
        .collect()
}

/// Bilinear 2x upsample with half-pixel-center alignment. Constant inputs map
/// to constant outputs; values never leave the local convex hull.
pub fn bilinear_upsample2x(input: &Tensor, seam: SeamMode) -> Tensor {
    let sh = input.shape();
    let osh = Shape::new(sh.batch, sh.channels, sh.height * 2, sh.width * 2);
    let ytaps = axis_taps(osh.height, sh.height, SeamMode::Clamp);
    let xtaps = axis_taps(osh.width, sh.width, seam);
    let mut out = vec![0.0; osh.numel()];
    for b in 0..sh.batch {
        for c in 0..sh.channels {
            for (oy, &(y0, y1, wy)) in ytaps.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in xtaps.iter().enumerate() {
                    let v = (1.0 - wy) * (1.0 - wx) * input.at(b, c, y0, x0)
                        + (1.0 - wy) * wx * input.at(b, c, y0, x1)
                        + wy * (1.0 - wx) * input.at(b, c, y1, x0)
                        + wy * wx * input.at(b, c, y1, x1);
                    out[osh.index(b, c, oy, ox)] = v;
                }
            }
        }
    }
    Tensor::from_vec(osh, out).expect("doubled shape")
}

pub(crate) fn bilinear_upsample2x_backward(
    grad_out: &Tensor,
    in_shape: Shape,
    seam: SeamMode,
) -> Tensor {
    let osh = grad_out.shape();
    let ytaps = axis_taps(osh.height, in_shape.height, SeamMode::Clamp);
    let xtaps = axis_taps(osh.width, in_shape.width, seam);
    let mut grad = vec![0.0; in_shape.numel()];
    for b in 0..in_shape.batch {
        for c in 0..in_shape.channels {
            for (oy, &(y0, y1, wy)) in ytaps.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in xtaps.iter().enumerate() {
                    let g = grad_out.at(b, c, oy, ox);
                    grad[in_shape.index(b, c, y0, x0)] += (1.0 - wy) * (1.0 - wx) * g;
                    grad[in_shape.index(b, c, y0, x1)] += (1.0 - wy) * wx * g;
                    grad[in_shape.index(b, c, y1, x0)] += wy * (1.0 - wx) * g;
                    grad[in_shape.index(b, c, y1, x1)] += wy * wx * g;
                }
            }
        }
    }
    Tensor::from_vec(in_shape, grad).expect("same shape")
}

/// Elementwise product where each `rhs` dimension either matches `lhs` or is
/// 1 and broadcasts. This is the only broadcasting op in the crate.
pub fn mul_broadcast(lhs: &Tensor, rhs: &Tensor) -> Result<Tensor> {
    let lsh = lhs.shape();
    let rsh = rhs.shape();
    let ok = |l: usize, r: usize| r == l || r == 1;
    if !(ok(lsh.batch, rsh.batch)
        && ok(lsh.channels, rsh.channels)
        && ok(lsh.height, rsh.height)
        && ok(lsh.width, rsh.width))
    {
        return Err(Error::shape("mul_broadcast", format!("{lsh} or 1 per dim"), format!("{rsh}")));
    }
    let mut out = vec![0.0; lsh.numel()];
    for b in 0..lsh.batch {
        for c in 0..lsh.channels {
            for y in 0..lsh.height {
                for x in 0..lsh.width {
                    let r = rhs.at(
                        if rsh.batch > 1 { b } else { 0 },
                        if rsh.channels > 1 { c } else { 0 },
                        if rsh.height > 1 { y } else { 0 },
                        if rsh.width > 1 { x } else { 0 },
                    );
                    out[lsh.index(b, c, y, x)] = lhs.at(b, c, y, x) * r;
                }
            }
        }
    }
    Tensor::from_vec(lsh, out)
}

pub(crate) fn mul_broadcast_backward(
    grad_out: &Tensor,
    lhs: &Tensor,
    rhs: &Tensor,
) -> (Tensor, Tensor) {
    let lsh = lhs.shape();
    let rsh = rhs.shape();
    let mut gl = vec![0.0; lsh.numel()];
    let mut gr = vec![0.0; rsh.numel()];
    for b in 0..lsh.batch {
        for c in 0..lsh.channels {
            for y in 0..lsh.height {
                for x in 0..lsh.width {
                    let ri = rsh.index(
                        if rsh.batch > 1 { b } else { 0 },
                        if rsh.channels > 1 { c } else { 0 },
                        if rsh.height > 1 { y } else { 0 },
                        if rsh.width > 1 { x } else { 0 },
                    );
                    let li = lsh.index(b, c, y, x);
                    let g = grad_out.data()[li];
                    gl[li] = g * rhs.data()[ri];
                    gr[ri] += g * lhs.data()[li];
                }
            }
        }
    }
    (
        Tensor::from_vec(lsh, gl).expect("same shape"),
        Tensor::from_vec(rsh, gr).expect("same shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let t = Tensor::zeros(Shape::new(1, 4, 1, 1));
        let s = softmax_groups(&t, 4).unwrap();
        for &v in s.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_dominant_logit() {
        let t = Tensor::from_vec(Shape::new(1, 4, 1, 1), vec![1000.0, 0.0, 0.0, 0.0]).unwrap();
        let s = softmax_groups(&t, 4).unwrap();
        assert!(s.data()[0] > 1.0 - 1e-9);
        assert!(s.is_finite());
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = Tensor::uniform(Shape::new(2, 8, 3, 4), -5.0, 5.0, &mut rng);
        let s = softmax_groups(&t, 4).unwrap();
        let sh = t.shape();
        for b in 0..2 {
            for c in 0..2 {
                for y in 0..3 {
                    for x in 0..4 {
                        // independent oracle: plain exp / sum(exp)
                        let logits: Vec<f64> =
                            (0..4).map(|j| t.at(b, j * 2 + c, y, x)).collect();
                        let exps: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for j in 0..4 {
                            let got = s.at(b, j * 2 + c, y, x);
                            assert!((got - exps[j] / sum).abs() < 1e-12);
                        }
                        let _ = sh;
                    }
                }
            }
        }
    }

    #[test]
    fn gap_constant_and_mean() {
        let t = Tensor::full(Shape::new(2, 3, 4, 4), 1.5);
        let p = global_avg_pool(&t).unwrap();
        assert_eq!(p.shape(), Shape::new(2, 3, 1, 1));
        assert!(p.data().iter().all(|&v| v == 1.5));

        let t = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&t).unwrap().data(), &[2.5]);
    }

    #[test]
    fn gap_matches_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = Tensor::uniform(Shape::new(2, 5, 6, 7), -2.0, 2.0, &mut rng);
        let p = global_avg_pool(&t).unwrap();
        for b in 0..2 {
            for c in 0..5 {
                let mut s = 0.0;
                for y in 0..6 {
                    for x in 0..7 {
                        s += t.at(b, c, y, x);
                    }
                }
                assert!((p.at(b, c, 0, 0) - s / 42.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_identity_and_bias() {
        let x = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![1.0, -2.0, 3.0]).unwrap();
        let mut id = vec![0.0; 9];
        for i in 0..3 {
            id[i * 3 + i] = 1.0;
        }
        let w = Tensor::from_vec(Shape::new(3, 3, 1, 1), id).unwrap();
        let out = linear(&x, &w, None).unwrap();
        assert_eq!(out.data(), x.data());

        let zero_w = Tensor::zeros(Shape::new(3, 3, 1, 1));
        let bias = [0.5, -0.25, 4.0];
        let out = linear(&x, &zero_w, Some(&bias)).unwrap();
        assert_eq!(out.data(), &bias);
    }

    #[test]
    fn linear_matches_matvec_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::uniform(Shape::new(2, 8, 1, 1), -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(Shape::new(4, 8, 1, 1), -1.0, 1.0, &mut rng);
        let bias: Vec<f64> = (0..4).map(|i| i as f64 * 0.1).collect();
        let out = linear(&x, &w, Some(&bias)).unwrap();
        for b in 0..2 {
            for o in 0..4 {
                let mut acc = bias[o];
                for c in 0..8 {
                    acc += w.at(o, c, 0, 0) * x.at(b, c, 0, 0);
                }
                assert!((out.at(b, o, 0, 0) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_rejects_mismatch() {
        let x = Tensor::zeros(Shape::new(1, 3, 1, 1));
        let w = Tensor::zeros(Shape::new(2, 4, 1, 1));
        assert!(linear(&x, &w, None).is_err());
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let t = Tensor::full(Shape::new(1, 1, 4, 8), 3.0);
        let u = bilinear_upsample2x(&t, SeamMode::Clamp);
        assert_eq!(u.shape(), Shape::new(1, 1, 8, 16));
        assert!(u.data().iter().all(|&v| v == 3.0));
        let u = bilinear_upsample2x(&t, SeamMode::Wrap);
        assert!(u.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn upsample_half_pixel_row() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 2.0]).unwrap();
        let u = bilinear_upsample2x(&t, SeamMode::Clamp);
        let want = [0.0, 0.5, 1.5, 2.0];
        for (got, want) in u.data()[0..4].iter().zip(&want) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn upsample_wrap_crosses_seam() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let u = bilinear_upsample2x(&t, SeamMode::Wrap);
        // first output column interpolates between the last and first source
        assert!((u.data()[0] - (0.75 * 0.0 + 0.25 * 3.0)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..500, scale in 1.0f64..1000.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::uniform(Shape::new(1, 12, 2, 2), -scale, scale, &mut rng);
            let s = softmax_groups(&t, 4).unwrap();
            prop_assert!(s.is_finite());
            let sh = s.shape();
            for c in 0..3 {
                for y in 0..2 {
                    for x in 0..2 {
                        let sum: f64 = (0..4).map(|j| s.at(0, j * 3 + c, y, x)).sum();
                        prop_assert!((sum - 1.0).abs() < 1e-9);
                        let _ = sh;
                    }
                }
            }
        }

        #[test]
        fn upsample_then_mean_pool_is_bounded(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::uniform(Shape::new(1, 2, 4, 6), -3.0, 3.0, &mut rng);
            let u = bilinear_upsample2x(&t, SeamMode::Clamp);
            let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let bound = 0.5 * (hi - lo);
            for b in 0..1 {
                for c in 0..2 {
                    for y in 0..4 {
                        for x in 0..6 {
                            let pooled = (u.at(b, c, 2 * y, 2 * x)
                                + u.at(b, c, 2 * y, 2 * x + 1)
                                + u.at(b, c, 2 * y + 1, 2 * x)
                                + u.at(b, c, 2 * y + 1, 2 * x + 1))
                                / 4.0;
                            prop_assert!((pooled - t.at(b, c, y, x)).abs() <= bound + 1e-12);
                        }
                    }
                }
            }
        }
    }
}
