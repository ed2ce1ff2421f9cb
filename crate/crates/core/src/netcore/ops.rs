//! Forward and backward kernels for the layer types.
//!
//! All spatial tensors are `[height, width, channels]`. Convolution weights
//! are `[kernel_h, kernel_w, in_channels, out_channels]`, dense weights are
//! `[in_features, out_features]`.

use rand::Rng;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub out_c: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[in_h, in_w, in_c], &[kernel_h, kernel_w, w_in, out_c]) = (input, weight) else {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: weight.to_vec(),
            });
        };
        if w_in != in_c || stride == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: weight.to_vec(),
            });
        }
        if in_h + 2 * padding < kernel_h || in_w + 2 * padding < kernel_w {
            return Err(Error::ShapeMismatch {
                op: "conv2d (kernel larger than padded input)",
                lhs: input.to_vec(),
                rhs: weight.to_vec(),
            });
        }
        Ok(Self {
            in_h,
            in_w,
            in_c,
            kernel_h,
            kernel_w,
            out_c,
            stride,
            padding,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_c
    }

    /// Calls `f(patch_row, tap_offset_in_patch, input_offset)` for every
    /// in-bounds kernel tap; each tap covers `in_c` contiguous values.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let pad = self.padding as isize;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = oy * ow + ox;
                for ky in 0..self.kernel_h {
                    let iy = (oy * self.stride + ky) as isize - pad;
                    if iy < 0 || iy >= self.in_h as isize {
                        continue;
                    }
                    for kx in 0..self.kernel_w {
                        let ix = (ox * self.stride + kx) as isize - pad;
                        if ix < 0 || ix >= self.in_w as isize {
                            continue;
                        }
                        let tap = (ky * self.kernel_w + kx) * self.in_c;
                        let src = (iy as usize * self.in_w + ix as usize) * self.in_c;
                        f(row, tap, src);
                    }
                }
            }
        }
    }
}

fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let k = g.patch_len();
    let mut cols = vec![T::zero(); g.out_h() * g.out_w() * k];
    g.for_each_tap(|row, tap, src| {
        let dst = row * k + tap;
        cols[dst..dst + g.in_c].copy_from_slice(&input[src..src + g.in_c]);
    });
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let k = g.patch_len();
    let mut out = vec![T::zero(); g.in_h * g.in_w * g.in_c];
    g.for_each_tap(|row, tap, dst| {
        let src = row * k + tap;
        for (o, &c) in out[dst..dst + g.in_c].iter_mut().zip(&cols[src..src + g.in_c]) {
            *o = *o + c;
        }
    });
    out
}

/// Output of [`conv2d`]; `cols` is the unfolded input kept for the backward pass.
pub struct ConvForward<T> {
    pub output: Tensor<T>,
    pub cols: Vec<T>,
    pub geometry: ConvGeometry,
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<ConvForward<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    if let Some(b) = bias {
        b.ensure_shape("conv2d bias", &[g.out_c])?;
    }
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let cols = im2col(input.data(), &g);
    let mut out = vec![T::zero(); p * g.out_c];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(g.out_c) {
            row.copy_from_slice(b.data());
        }
    }
    T::gemm(
        p,
        g.patch_len(),
        g.out_c,
        &cols,
        false,
        weight.data(),
        false,
        &mut out,
        bias.is_some(),
    );
    Ok(ConvForward {
        output: Tensor::from_vec(&[oh, ow, g.out_c], out)?,
        cols,
        geometry: g,
    })
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn conv2d_backward<T: Scalar>(
    fwd_cols: &[T],
    g: &ConvGeometry,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_weight: &mut [T],
    grad_bias: Option<&mut [T]>,
) -> Result<Tensor<T>> {
    let (oh, ow) = (g.out_h(), g.out_w());
    grad_out.ensure_shape("conv2d backward", &[oh, ow, g.out_c])?;
    let p = oh * ow;
    let k = g.patch_len();
    let dy = grad_out.data();
    T::gemm(k, p, g.out_c, fwd_cols, true, dy, false, grad_weight, true);
    if let Some(gb) = grad_bias {
        for row in dy.chunks_exact(g.out_c) {
            for (b, &d) in gb.iter_mut().zip(row) {
                *b = *b + d;
            }
        }
    }
    let mut dcols = vec![T::zero(); p * k];
    T::gemm(p, g.out_c, k, dy, false, weight.data(), true, &mut dcols, false);
    Tensor::from_vec(&[g.in_h, g.in_w, g.in_c], col2im(&dcols, g))
}

/// Max pooling; returns the output and, per output element, the flat index
/// of the winning input element (first maximum in scan order).
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (h, w, c) = input.hwc("maxpool2d")?;
    if window == 0 || stride == 0 || h < window || w < window {
        return Err(Error::invalid(format!(
            "maxpool2d: window {window} stride {stride} on input {:?}",
            input.shape()
        )));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let x = input.data();
    let mut out = vec![T::zero(); oh * ow * c];
    let mut arg = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = usize::MAX;
                let mut best_v = T::neg_infinity();
                for ky in 0..window {
                    for kx in 0..window {
                        let idx = ((oy * stride + ky) * w + ox * stride + kx) * c + ch;
                        if best == usize::MAX || x[idx] > best_v {
                            best = idx;
                            best_v = x[idx];
                        }
                    }
                }
                let o = (oy * ow + ox) * c + ch;
                out[o] = best_v;
                arg[o] = best;
            }
        }
    }
    Ok((Tensor::from_vec(&[oh, ow, c], out)?, arg))
}

pub fn maxpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::ShapeMismatch {
            op: "maxpool2d backward",
            lhs: vec![argmax.len()],
            rhs: grad_out.shape().to_vec(),
        });
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] = d[i] + g;
    }
    Ok(dx)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its forward output.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.ensure_shape("relu backward", output.shape())?;
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(output.shape(), data)
}

/// `y = x·W + b` over the rows of `x` (`len / in_features` rows).
pub fn dense<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, fan_in, fan_out) = dense_dims(input, weight, bias)?;
    let mut out = Vec::with_capacity(rows * fan_out);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    T::gemm(rows, fan_in, fan_out, input.data(), false, weight.data(), false, &mut out, true);
    Tensor::from_vec(&[rows, fan_out], out)
}

fn dense_dims<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let &[fan_in, fan_out] = weight.shape() else {
        return Err(Error::ShapeMismatch {
            op: "dense weight",
            lhs: weight.shape().to_vec(),
            rhs: vec![0, 0],
        });
    };
    bias.ensure_shape("dense bias", &[fan_out])?;
    if fan_in == 0 || !input.len().is_multiple_of(fan_in) || input.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "dense",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    Ok((input.len() / fan_in, fan_in, fan_out))
}

pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
) -> Result<Tensor<T>> {
    let &[fan_in, fan_out] = weight.shape() else {
        return Err(Error::ShapeMismatch {
            op: "dense backward",
            lhs: weight.shape().to_vec(),
            rhs: vec![0, 0],
        });
    };
    let rows = input.len() / fan_in;
    grad_out.ensure_shape("dense backward", &[rows, fan_out])?;
    let dy = grad_out.data();
    T::gemm(fan_in, rows, fan_out, input.data(), true, dy, false, grad_weight, true);
    for row in dy.chunks_exact(fan_out) {
        for (b, &d) in grad_bias.iter_mut().zip(row) {
            *b = *b + d;
        }
    }
    let mut dx = vec![T::zero(); rows * fan_in];
    T::gemm(rows, fan_out, fan_in, dy, false, weight.data(), true, &mut dx, false);
    Tensor::from_vec(input.shape(), dx)
}

/// Inverted dropout: kept activations are scaled by `1/(1-p)`. Returns the
/// output and the per-element multiplier used.
pub fn dropout<T: Scalar, R: Rng>(input: &Tensor<T>, p: f64, rng: &mut R) -> Result<(Tensor<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} not in [0, 1)")));
    }
    let keep = T::of(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..input.len())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    let out = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    Ok((Tensor::from_vec(input.shape(), out)?, mask))
}

pub fn dropout_backward<T: Scalar>(mask: &[T], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if mask.len() != grad_out.len() {
        return Err(Error::ShapeMismatch {
            op: "dropout backward",
            lhs: vec![mask.len()],
            rhs: grad_out.shape().to_vec(),
        });
    }
    let data = grad_out.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
    Tensor::from_vec(grad_out.shape(), data)
}

pub fn flatten<T: Scalar>(input: Tensor<T>) -> Tensor<T> {
    let n = input.len();
    input.reshape(&[1, n]).expect("flatten preserves length")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernel_is_noop() {
        let input = Tensor::<f64>::full(&[3, 3, 1], 1.0);
        let kernel = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let out = conv2d(&input, &kernel, None, 1, 0).unwrap().output;
        assert_eq!(out, input);
    }

    #[test]
    fn conv_output_shape_and_values() {
        // 4x4 ramp, 3x3 box filter, padding 1, stride 2 -> 2x2
        let input = Tensor::from_vec(&[4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
        let kernel = Tensor::full(&[3, 3, 1, 1], 1.0);
        let out = conv2d(&input, &kernel, None, 2, 1).unwrap().output;
        assert_eq!(out.shape(), &[2, 2, 1]);
        // top-left window covers rows 0..=1, cols 0..=1 of the padded input
        assert_eq!(out.data()[0], 0.0 + 1.0 + 4.0 + 5.0);
        // (1,1) window centered at (2,2): rows 1..=3, cols 1..=3
        let expect: f64 = [5, 6, 7, 9, 10, 11, 13, 14, 15].iter().map(|&v| f64::from(v)).sum();
        assert_eq!(out.data()[3], expect);
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let input = Tensor::<f32>::zeros(&[4, 4, 2]);
        let kernel = Tensor::<f32>::zeros(&[3, 3, 3, 1]);
        let msg = conv2d(&input, &kernel, None, 1, 1).err().unwrap().to_string();
        assert!(msg.contains("[4, 4, 2]") && msg.contains("[3, 3, 3, 1]"), "{msg}");
    }

    #[test]
    fn maxpool_on_constant_halves_extent() {
        let input = Tensor::<f32>::full(&[6, 4, 2], 3.5);
        let (out, _) = maxpool2d(&input, 2, 2).unwrap();
        assert_eq!(out, Tensor::full(&[3, 2, 2], 3.5));
    }

    #[test]
    fn dropout_eval_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = Tensor::<f64>::full(&[1000], 1.0);
        let (out, _) = dropout(&input, 0.5, &mut rng).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = out.data().iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
        assert!(dropout(&input, 1.0, &mut rng).is_err());
    }

    #[test]
    fn dense_rows() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[2, 1], vec![1.0, -1.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let y = dense(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[-0.5, -0.5]);
    }
}
