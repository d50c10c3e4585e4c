//! 3x3 convolution, stride 1, zero padding 1, via patch-matrix expansion
//! and one GEMM per sample.

use crate::error::{Error, Result};
use crate::nn::scalar::{gemm, Op};
use crate::nn::{Scalar, Tensor};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<S> {
    /// `[out_ch, in_ch, 3, 3]`
    pub weight: Tensor<S>,
    /// `[out_ch]`
    pub bias: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct ConvCache<S> {
    input_shape: [usize; 4],
    /// `[N, in_ch * 9, H * W]`
    cols: Vec<S>,
}

impl<S: Scalar> Conv2d<S> {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Conv2d {
            weight: Tensor::zeros(&[out_ch, in_ch, KERNEL, KERNEL]),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<[usize; 4]> {
        match *x.shape() {
            [n, c, h, w] if c == self.in_channels() => Ok([n, c, h, w]),
            [n, _, h, w] => Err(Error::ShapeMismatch {
                expected: vec![n, self.in_channels(), h, w],
                found: x.shape().to_vec(),
            }),
            _ => Err(Error::ShapeMismatch {
                expected: vec![0, self.in_channels(), 0, 0],
                found: x.shape().to_vec(),
            }),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, ConvCache<S>)> {
        let shape = self.check_input(x)?;
        let cols = im2col(x.data(), shape);
        let y = self.apply(&cols, shape);
        Ok((
            y,
            ConvCache {
                input_shape: shape,
                cols,
            },
        ))
    }

    pub fn forward_eval(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let [n, c, h, w] = self.check_input(x)?;
        let hw = h * w;
        let k = c * TAPS;
        let oc = self.out_channels();
        let mut y = Tensor::zeros(&[n, oc, h, w]);
        let mut cols = vec![S::zero(); k * hw];
        for (xs, ys) in x
            .data()
            .chunks_exact(c * hw)
            .zip(y.data_mut().chunks_exact_mut(oc * hw))
        {
            im2col_single(xs, c, h, w, &mut cols);
            self.apply_single(&cols, hw, ys);
        }
        Ok(y)
    }

    /// `out[oc, hw] = W * cols[k, hw] + bias`
    fn apply_single(&self, cols: &[S], hw: usize, out: &mut [S]) {
        let oc = self.out_channels();
        let k = self.in_channels() * TAPS;
        for (row, &b) in out.chunks_exact_mut(hw).zip(self.bias.data()) {
            row.fill(b);
        }
        gemm(oc, k, hw, self.weight.data(), Op::N, cols, Op::N, S::one(), out);
    }

    fn apply(&self, cols: &[S], [n, c, h, w]: [usize; 4]) -> Tensor<S> {
        let oc = self.out_channels();
        let hw = h * w;
        let k = c * TAPS;
        let mut y = Tensor::zeros(&[n, oc, h, w]);
        for (cs, ys) in cols
            .chunks_exact(k * hw)
            .zip(y.data_mut().chunks_exact_mut(oc * hw))
        {
            self.apply_single(cs, hw, ys);
        }
        y
    }

    /// Returns `(grad_input, grad_weight, grad_bias)`; `grad_input` is
    /// skipped when `need_input_grad` is false.
    pub fn backward(
        &self,
        grad_out: &Tensor<S>,
        cache: &ConvCache<S>,
        need_input_grad: bool,
    ) -> Result<(Option<Tensor<S>>, Tensor<S>, Tensor<S>)> {
        let [n, c, h, w] = cache.input_shape;
        let oc = self.out_channels();
        grad_out.expect_shape(&[n, oc, h, w])?;
        let hw = h * w;
        let k = c * TAPS;

        let mut grad_bias = Tensor::zeros(&[oc]);
        let mut grad_weight = Tensor::zeros(self.weight.shape());
        let mut grad_input = need_input_grad.then(|| Tensor::zeros(&[n, c, h, w]));
        let mut grad_cols = vec![S::zero(); if need_input_grad { k * hw } else { 0 }];
        for (s, (g, cs)) in grad_out
            .data()
            .chunks_exact(oc * hw)
            .zip(cache.cols.chunks_exact(k * hw))
            .enumerate()
        {
            for (b, row) in grad_bias.data_mut().iter_mut().zip(g.chunks_exact(hw)) {
                *b += row.iter().copied().sum();
            }
            gemm(oc, hw, k, g, Op::N, cs, Op::T, S::one(), grad_weight.data_mut());
            if let Some(gi) = grad_input.as_mut() {
                gemm(k, oc, hw, self.weight.data(), Op::T, g, Op::N, S::zero(), &mut grad_cols);
                col2im_single(&grad_cols, c, h, w, &mut gi.data_mut()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        Ok((grad_input, grad_weight, grad_bias))
    }
}

/// Expands one `[c, h, w]` sample into the `[c*9, h*w]` patch matrix; row
/// `c*9 + ky*3 + kx` holds the input shifted by `(ky-1, kx-1)`.
fn im2col_single<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, cols: &mut [S]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ch * TAPS + ky * KERNEL + kx) * hw;
                let dst_plane = &mut cols[row..row + hw];
                let dx = kx as isize - 1;
                // valid output columns: 0 <= col + dx < w
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize) as usize;
                let src_lo = (x_lo as isize + dx) as usize;
                for oy in 0..h {
                    let dst = &mut dst_plane[oy * w..(oy + 1) * w];
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    dst[..x_lo].fill(S::zero());
                    dst[x_hi..].fill(S::zero());
                    dst[x_lo..x_hi].copy_from_slice(&src[src_lo..src_lo + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adds the adjoint of [`im2col_single`] applied to `cols` into `out`.
fn col2im_single<S: Scalar>(cols: &[S], c: usize, h: usize, w: usize, out: &mut [S]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ch * TAPS + ky * KERNEL + kx) * hw;
                let src_plane = &cols[row..row + hw];
                let dx = kx as isize - 1;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize) as usize;
                let dst_lo = (x_lo as isize + dx) as usize;
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &src_plane[oy * w..(oy + 1) * w];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (d, &v) in dst[dst_lo..dst_lo + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&src[x_lo..x_hi])
                    {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Per-sample patch matrices of a `[n, c, h, w]` batch, concatenated.
fn im2col<S: Scalar>(x: &[S], [n, c, h, w]: [usize; 4]) -> Vec<S> {
    let hw = h * w;
    let mut cols = vec![S::zero(); n * c * TAPS * hw];
    for (xs, cs) in x.chunks_exact(c * hw).zip(cols.chunks_exact_mut(c * TAPS * hw)) {
        im2col_single(xs, c, h, w, cs);
    }
    cols
}

/// Adjoint of [`im2col`].
#[cfg(test)]
fn col2im<S: Scalar>(cols: &[S], [n, c, h, w]: [usize; 4]) -> Tensor<S> {
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for (cs, os) in cols
        .chunks_exact(c * TAPS * hw)
        .zip(out.data_mut().chunks_exact_mut(c * hw))
    {
        col2im_single(cs, c, h, w, os);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as a reference.
    fn direct(x: &Tensor<f64>, conv: &Conv2d<f64>) -> Tensor<f64> {
        let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let oc = conv.out_channels();
        let mut y = Tensor::zeros(&[n, oc, h, w]);
        for s in 0..n {
            for o in 0..oc {
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = conv.bias.data()[o];
                        for ch in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (yy, xx) = (i as isize + ky - 1, j as isize + kx - 1);
                                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((s * c + ch) * h + yy as usize) * w + xx as usize];
                                    let wv = conv.weight.data()[((o * c + ch) * 3 + ky as usize) * 3 + kx as usize];
                                    acc += xv * wv;
                                }
                            }
                        }
                        y.data_mut()[((s * oc + o) * h + i) * w + j] = acc;
                    }
                }
            }
        }
        y
    }

    fn pseudo(len: usize, phase: f64) -> Vec<f64> {
        (0..len).map(|v| ((v as f64 + phase) * 0.731).sin()).collect()
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut conv = Conv2d::<f64>::zeros(2, 3);
        conv.bias = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::from_vec(&[1, 2, 4, 5], pseudo(40, 0.0)).unwrap();
        let y = conv.forward_eval(&x).unwrap();
        for o in 0..3 {
            assert!(y.data()[o * 20..(o + 1) * 20]
                .iter()
                .all(|&v| v == conv.bias.data()[o]));
        }
    }

    #[test]
    fn ones_kernel_counts_window_overlap() {
        let mut conv = Conv2d::<f64>::zeros(1, 1);
        conv.weight = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let x = Tensor::filled(&[1, 1, 4, 4], 1.0);
        let y = conv.forward_eval(&x).unwrap();
        #[rustfmt::skip]
        let expect = [
            4.0, 6.0, 6.0, 4.0,
            6.0, 9.0, 9.0, 6.0,
            6.0, 9.0, 9.0, 6.0,
            4.0, 6.0, 6.0, 4.0,
        ];
        assert_eq!(y.data(), &expect);
    }

    #[test]
    fn matches_direct_convolution() {
        let mut conv = Conv2d::<f64>::zeros(3, 4);
        conv.weight = Tensor::from_vec(&[4, 3, 3, 3], pseudo(108, 1.0)).unwrap();
        conv.bias = Tensor::from_vec(&[4], pseudo(4, 7.0)).unwrap();
        let x = Tensor::from_vec(&[2, 3, 5, 6], pseudo(180, 3.0)).unwrap();
        let y = conv.forward_eval(&x).unwrap();
        let r = direct(&x, &conv);
        for (a, b) in y.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_size_first_block_shape() {
        let conv = Conv2d::<f32>::zeros(2, 24);
        let x = Tensor::zeros(&[1, 2, 40, 40]);
        assert_eq!(conv.forward_eval(&x).unwrap().shape(), &[1, 24, 40, 40]);
    }

    #[test]
    fn channel_mismatch() {
        let conv = Conv2d::<f64>::zeros(2, 4);
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        assert!(matches!(conv.forward(&x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_upstream_gradient_and_bias_identity() {
        let mut conv = Conv2d::<f64>::zeros(2, 3);
        conv.weight = Tensor::from_vec(&[3, 2, 3, 3], pseudo(54, 2.0)).unwrap();
        let x = Tensor::from_vec(&[2, 2, 4, 4], pseudo(64, 5.0)).unwrap();
        let (y, cache) = conv.forward(&x).unwrap();
        let (gi, gw, gb) = conv
            .backward(&Tensor::zeros(y.shape()), &cache, true)
            .unwrap();
        assert!(gi.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
        assert!(gb.data().iter().all(|&v| v == 0.0));

        let g = Tensor::from_vec(y.shape(), pseudo(y.len(), 9.0)).unwrap();
        let (_, _, gb) = conv.backward(&g, &cache, false).unwrap();
        for o in 0..3 {
            let mut sum = 0.0;
            for s in 0..2 {
                sum += g.data()[(s * 3 + o) * 16..(s * 3 + o + 1) * 16].iter().sum::<f64>();
            }
            assert!((gb.data()[o] - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let shape = [2, 3, 4, 5];
        let x = pseudo(120, 0.3);
        let c = pseudo(3 * 9 * 40, 4.2);
        let lhs: f64 = im2col(&x, shape).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&c, shape).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
