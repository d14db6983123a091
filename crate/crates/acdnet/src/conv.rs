//! Direct dilated 2-D convolution (cross-correlation) and its gradients.
//!
//! Lowered to im2col + GEMM. No implicit padding: callers pre-pad through
//! the panorama padding module so boundary semantics stay in one place.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Output spatial size: floor((in - (k-1)*d - 1)/s) + 1 per axis.
pub fn out_spatial(
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    dilation: (usize, usize),
) -> Result<(usize, usize)> {
    let (sy, sx) = stride;
    let (dy, dx) = dilation;
    if sy == 0 || sx == 0 || dy == 0 || dx == 0 {
        return Err(Error::invalid("conv2d stride and dilation must be >= 1"));
    }
    let span_h = (kh - 1) * dy + 1;
    let span_w = (kw - 1) * dx + 1;
    if span_h > in_h || span_w > in_w {
        return Err(Error::invalid(format!(
            "conv2d produces empty output: kernel span {span_h}x{span_w} exceeds input {in_h}x{in_w}"
        )));
    }
    Ok(((in_h - span_h) / sy + 1, (in_w - span_w) / sx + 1))
}

fn check_channels(input: Shape, kernel: Shape) -> Result<()> {
    if input.channels != kernel.channels {
        return Err(Error::shape(
            "conv2d",
            format!("input with {} channels", kernel.channels),
            format!("{} channels", input.channels),
        ));
    }
    Ok(())
}

/// Gather the dilated 3x3 (or general) patches of one batch item into a
/// (out_h*out_w) x (in_c*kh*kw) row-major matrix.
fn im2col(
    input: &Tensor,
    b: usize,
    kernel: Shape,
    stride: (usize, usize),
    dilation: (usize, usize),
    out_h: usize,
    out_w: usize,
    patches: &mut [f64],
) {
    let ish = input.shape();
    let data = input.data();
    let (sy, sx) = stride;
    let (dy, dx) = dilation;
    let k = kernel.channels * kernel.height * kernel.width;
    let mut row = 0;
    for oy in 0..out_h {
        for ox in 0..out_w {
            let base_y = oy * sy;
            let base_x = ox * sx;
            let mut col = 0;
            for ci in 0..kernel.channels {
                for ky in 0..kernel.height {
                    let iy = base_y + ky * dy;
                    let row_off = ish.index(b, ci, iy, base_x);
                    for kx in 0..kernel.width {
                        patches[row * k + col] = data[row_off + kx * dx];
                        col += 1;
                    }
                }
            }
            row += 1;
        }
    }
}

/// Dilated cross-correlation. `kernel` has shape (out_c, in_c, kh, kw) and
/// `bias`, when present, one value per output channel.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&[f64]>,
    stride: (usize, usize),
    dilation: (usize, usize),
) -> Result<Tensor> {
    let ish = input.shape();
    let ksh = kernel.shape();
    check_channels(ish, ksh)?;
    if let Some(bias) = bias {
        if bias.len() != ksh.batch {
            return Err(Error::shape("conv2d bias", format!("{}", ksh.batch), format!("{}", bias.len())));
        }
    }
    let (out_h, out_w) = out_spatial(ish.height, ish.width, ksh.height, ksh.width, stride, dilation)?;
    let out_shape = Shape::new(ish.batch, ksh.batch, out_h, out_w);
    let mut out = vec![0.0; out_shape.numel()];

    let m = out_h * out_w;
    let k = ksh.channels * ksh.height * ksh.width;
    let n = ksh.batch;
    let mut patches = vec![0.0; m * k];
    for b in 0..ish.batch {
        im2col(input, b, ksh, stride, dilation, out_h, out_w, &mut patches);
        let c_ptr = out[out_shape.index(b, 0, 0, 0)..].as_mut_ptr();
        // out[b, o, p] = sum_k patches[p, k] * kernel[o, k]
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                patches.as_ptr(),
                k as isize,
                1,
                kernel.data().as_ptr(),
                1,
                k as isize,
                0.0,
                c_ptr,
                1,
                m as isize,
            );
        }
    }
    if let Some(bias) = bias {
        for b in 0..ish.batch {
            for o in 0..n {
                let start = out_shape.index(b, o, 0, 0);
                for v in &mut out[start..start + m] {
                    *v += bias[o];
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Gradient of the loss w.r.t. the convolution input.
pub fn conv2d_grad_input(
    grad_out: &Tensor,
    kernel: &Tensor,
    in_shape: Shape,
    stride: (usize, usize),
    dilation: (usize, usize),
) -> Tensor {
    let gsh = grad_out.shape();
    let ksh = kernel.shape();
    let (out_h, out_w) = (gsh.height, gsh.width);
    let m = out_h * out_w;
    let k = ksh.channels * ksh.height * ksh.width;
    let n = ksh.batch;
    let (sy, sx) = stride;
    let (dy, dx) = dilation;

    let mut grad_in = vec![0.0; in_shape.numel()];
    let mut dpatches = vec![0.0; m * k];
    for b in 0..gsh.batch {
        let g_ptr = grad_out.data()[gsh.index(b, 0, 0, 0)..].as_ptr();
        // dpatches[p, k] = sum_o g[o, p] * kernel[o, k]
        unsafe {
            matrixmultiply::dgemm(
                m,
                n,
                k,
                1.0,
                g_ptr,
                1,
                m as isize,
                kernel.data().as_ptr(),
                k as isize,
                1,
                0.0,
                dpatches.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        // col2im: scatter-add patch gradients back to input cells.
        let mut row = 0;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let base_y = oy * sy;
                let base_x = ox * sx;
                let mut col = 0;
                for ci in 0..ksh.channels {
                    for ky in 0..ksh.height {
                        let iy = base_y + ky * dy;
                        let row_off = in_shape.index(b, ci, iy, base_x);
                        for kx in 0..ksh.width {
                            grad_in[row_off + kx * dx] += dpatches[row * k + col];
                            col += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Tensor::from_vec(in_shape, grad_in).expect("grad_in sized from in_shape")
}

/// Gradient of the loss w.r.t. the kernel.
pub fn conv2d_grad_kernel(
    grad_out: &Tensor,
    input: &Tensor,
    kernel_shape: Shape,
    stride: (usize, usize),
    dilation: (usize, usize),
) -> Tensor {
    let gsh = grad_out.shape();
    let (out_h, out_w) = (gsh.height, gsh.width);
    let m = out_h * out_w;
    let k = kernel_shape.channels * kernel_shape.height * kernel_shape.width;
    let n = kernel_shape.batch;

    let mut grad_k = vec![0.0; kernel_shape.numel()];
    let mut patches = vec![0.0; m * k];
    for b in 0..gsh.batch {
        im2col(input, b, kernel_shape, stride, dilation, out_h, out_w, &mut patches);
        let g_ptr = grad_out.data()[gsh.index(b, 0, 0, 0)..].as_ptr();
        // dK[o, k] += sum_p g[o, p] * patches[p, k]
        unsafe {
            matrixmultiply::dgemm(
                n,
                m,
                k,
                1.0,
                g_ptr,
                m as isize,
                1,
                patches.as_ptr(),
                k as isize,
                1,
                1.0,
                grad_k.as_mut_ptr(),
                k as isize,
                1,
            );
        }
    }
    Tensor::from_vec(kernel_shape, grad_k).expect("grad_k sized from kernel_shape")
}

/// Gradient of the loss w.r.t. the per-output-channel bias.
pub fn conv2d_grad_bias(grad_out: &Tensor) -> Vec<f64> {
    let gsh = grad_out.shape();
    let m = gsh.height * gsh.width;
    let mut grad_b = vec![0.0; gsh.channels];
    for b in 0..gsh.batch {
        for o in 0..gsh.channels {
            let start = gsh.index(b, o, 0, 0);
            grad_b[o] += grad_out.data()[start..start + m].iter().sum::<f64>();
        }
    }
    grad_b
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: the direct seven-nested-loop definition.
    pub(crate) fn conv2d_naive(
        input: &Tensor,
        kernel: &Tensor,
        bias: Option<&[f64]>,
        stride: (usize, usize),
        dilation: (usize, usize),
    ) -> Tensor {
        let ish = input.shape();
        let ksh = kernel.shape();
        let (out_h, out_w) =
            out_spatial(ish.height, ish.width, ksh.height, ksh.width, stride, dilation).unwrap();
        let osh = Shape::new(ish.batch, ksh.batch, out_h, out_w);
        let mut out = vec![0.0; osh.numel()];
        for b in 0..ish.batch {
            for o in 0..ksh.batch {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut acc = bias.map_or(0.0, |bv| bv[o]);
                        for ci in 0..ksh.channels {
                            for ky in 0..ksh.height {
                                for kx in 0..ksh.width {
                                    let iy = oy * stride.0 + ky * dilation.0;
                                    let ix = ox * stride.1 + kx * dilation.1;
                                    acc += input.at(b, ci, iy, ix) * kernel.at(o, ci, ky, kx);
                                }
                            }
                        }
                        out[osh.index(b, o, oy, ox)] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(osh, out).unwrap()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
            .fold(0.0, f64::max)
    }

    #[test]
    fn all_ones_three_by_three() {
        let input = Tensor::full(Shape::new(1, 1, 3, 3), 2.0);
        let kernel = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let out = conv2d(&input, &kernel, None, (1, 1), (1, 1)).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(out.data(), &[18.0]);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = Tensor::uniform(Shape::new(1, 1, 6, 8), -2.0, 2.0, &mut rng);
        // Pre-pad by one with zeros, identity kernel picks the center back out.
        let padded = crate::pad::pad(
            &input,
            &crate::pad::PadSpec::uniform(1, 1, crate::pad::PadMode::Zero),
        )
        .unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let kernel = Tensor::from_vec(Shape::new(1, 1, 3, 3), k).unwrap();
        let out = conv2d(&padded, &kernel, None, (1, 1), (1, 1)).unwrap();
        assert_eq!(out.shape(), input.shape());
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn matches_naive_oracle_dilated() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = Tensor::uniform(Shape::new(2, 3, 8, 16), -1.0, 1.0, &mut rng);
        let kernel = Tensor::uniform(Shape::new(4, 3, 3, 3), -1.0, 1.0, &mut rng);
        let got = conv2d(&input, &kernel, None, (1, 1), (1, 4)).unwrap();
        let want = conv2d_naive(&input, &kernel, None, (1, 1), (1, 4));
        assert_eq!(got.shape(), want.shape());
        assert!(max_rel_err(got.data(), want.data()) < 1e-12);
    }

    #[test]
    fn matches_naive_oracle_strided_with_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = Tensor::uniform(Shape::new(2, 4, 9, 11), -1.0, 1.0, &mut rng);
        let kernel = Tensor::uniform(Shape::new(5, 4, 3, 3), -1.0, 1.0, &mut rng);
        let bias: Vec<f64> = (0..5).map(|i| i as f64 * 0.3 - 0.7).collect();
        let got = conv2d(&input, &kernel, Some(&bias), (2, 2), (2, 1)).unwrap();
        let want = conv2d_naive(&input, &kernel, Some(&bias), (2, 2), (2, 1));
        assert_eq!(got.shape(), want.shape());
        assert!(max_rel_err(got.data(), want.data()) < 1e-12);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let input = Tensor::zeros(Shape::new(1, 2, 5, 5));
        let kernel = Tensor::zeros(Shape::new(1, 3, 3, 3));
        assert!(conv2d(&input, &kernel, None, (1, 1), (1, 1)).is_err());
    }

    #[test]
    fn rejects_empty_output() {
        let input = Tensor::zeros(Shape::new(1, 1, 4, 4));
        let kernel = Tensor::zeros(Shape::new(1, 1, 3, 3));
        // span = (3-1)*3 + 1 = 7 > 4
        assert!(conv2d(&input, &kernel, None, (1, 1), (3, 3)).is_err());
    }

    #[test]
    fn linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(Shape::new(1, 2, 6, 10), -1.0, 1.0, &mut rng);
        let y = Tensor::uniform(Shape::new(1, 2, 6, 10), -1.0, 1.0, &mut rng);
        let kernel = Tensor::uniform(Shape::new(3, 2, 3, 3), -1.0, 1.0, &mut rng);
        let (a, b) = (0.7, -1.3);
        let mixed = Tensor::from_vec(
            x.shape(),
            x.data().iter().zip(y.data()).map(|(u, v)| a * u + b * v).collect(),
        )
        .unwrap();
        let lhs = conv2d(&mixed, &kernel, None, (1, 1), (1, 2)).unwrap();
        let cx = conv2d(&x, &kernel, None, (1, 1), (1, 2)).unwrap();
        let cy = conv2d(&y, &kernel, None, (1, 1), (1, 2)).unwrap();
        for i in 0..lhs.numel() {
            let want = a * cx.data()[i] + b * cy.data()[i];
            assert!((lhs.data()[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = Tensor::uniform(Shape::new(2, 2, 5, 7), -1.0, 1.0, &mut rng);
        let kernel = Tensor::uniform(Shape::new(3, 2, 3, 3), -1.0, 1.0, &mut rng);
        let bias: Vec<f64> = vec![0.1, -0.2, 0.3];
        let stride = (1, 1);
        let dilation = (1, 2);

        // Scalar objective: weighted sum of outputs with fixed weights.
        let out = conv2d(&input, &kernel, Some(&bias), stride, dilation).unwrap();
        let weights: Vec<f64> = (0..out.numel()).map(|i| ((i % 7) as f64) * 0.25 - 0.75).collect();
        let loss = |t: &Tensor| -> f64 { t.data().iter().zip(&weights).map(|(a, w)| a * w).sum() };

        let grad_out = Tensor::from_vec(out.shape(), weights.clone()).unwrap();
        let gi = conv2d_grad_input(&grad_out, &kernel, input.shape(), stride, dilation);
        let gk = conv2d_grad_kernel(&grad_out, &input, kernel.shape(), stride, dilation);
        let gb = conv2d_grad_bias(&grad_out);

        let h = 1e-5;
        let fd = |base: &Tensor, idx: usize, apply: &dyn Fn(&Tensor) -> f64| -> f64 {
            let mut plus = base.clone();
            plus.data_mut()[idx] += h;
            let mut minus = base.clone();
            minus.data_mut()[idx] -= h;
            (apply(&plus) - apply(&minus)) / (2.0 * h)
        };

        for idx in [0usize, 3, 17, 41, input.numel() - 1] {
            let n = fd(&input, idx, &|t| {
                loss(&conv2d(t, &kernel, Some(&bias), stride, dilation).unwrap())
            });
            let a = gi.data()[idx];
            assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-6) < 1e-6, "input grad {idx}: {a} vs {n}");
        }
        for idx in [0usize, 7, 25, kernel.numel() - 1] {
            let n = fd(&kernel, idx, &|t| {
                loss(&conv2d(&input, t, Some(&bias), stride, dilation).unwrap())
            });
            let a = gk.data()[idx];
            assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-6) < 1e-6, "kernel grad {idx}: {a} vs {n}");
        }
        for (o, a) in gb.iter().enumerate() {
            let mut bp = bias.clone();
            bp[o] += h;
            let mut bm = bias.clone();
            bm[o] -= h;
            let fp = loss(&conv2d(&input, &kernel, Some(&bp), stride, dilation).unwrap());
            let fm = loss(&conv2d(&input, &kernel, Some(&bm), stride, dilation).unwrap());
            let n = (fp - fm) / (2.0 * h);
            assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-6) < 1e-6, "bias grad {o}: {a} vs {n}");
        }
    }
}
