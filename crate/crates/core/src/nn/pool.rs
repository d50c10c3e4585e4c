use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

/// 2x2 max pooling with stride 2. `argmax` holds, per output element, the
/// flat input index of the selected value; ties go to the first element in
/// scan order.
pub fn maxpool2_forward<S: Scalar>(x: &Tensor<S>) -> Result<(Tensor<S>, Vec<u32>)> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::ShapeMismatch {
            expected: vec![0, 0, 0, 0],
            found: x.shape().to_vec(),
        });
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddPoolExtent(h, w));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let xd = x.data();
    let yd = y.data_mut();
    for p in 0..n * c {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let top = base + 2 * i * w + 2 * j;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if xd[cand] > xd[best] {
                        best = cand;
                    }
                }
                let o = (p * oh + i) * ow + j;
                yd[o] = xd[best];
                argmax[o] = best as u32;
            }
        }
    }
    Ok((y, argmax))
}

pub fn maxpool2_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    argmax: &[u32],
    input_shape: &[usize],
) -> Result<Tensor<S>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![argmax.len()],
            found: grad_out.shape().to_vec(),
        });
    }
    let mut grad_in = Tensor::zeros(input_shape);
    let gi = grad_in.data_mut();
    for (&g, &idx) in grad_out.data().iter().zip(argmax) {
        gi[idx as usize] += g;
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_block_maximum() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 3.0, 2.0, 0.0]).unwrap();
        let (y, arg) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[3.0]);
        assert_eq!(arg, vec![1]);
        let g = maxpool2_backward(&Tensor::from_vec(&[1, 1, 1, 1], vec![5.0]).unwrap(), &arg, x.shape()).unwrap();
        assert_eq!(g.data(), &[0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn ties_route_to_first_element() {
        let x = Tensor::filled(&[1, 1, 2, 2], 7.0f64);
        let (y, arg) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[7.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn halves_spatial_extent() {
        let x = Tensor::<f32>::zeros(&[2, 24, 40, 40]);
        let (y, _) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 24, 20, 20]);
    }

    #[test]
    fn odd_extent_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 5, 4]);
        assert!(matches!(maxpool2_forward(&x), Err(Error::OddPoolExtent(5, 4))));
    }
}
