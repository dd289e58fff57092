//! Non-differentiable conveniences over [`Graph`] for one-off evaluation.
//!
//! Video ops accept either a single clip `[C, T, H, W]` or a batch
//! `[B, C, T, H, W]`; the output keeps the input's rank.

use super::graph::{Graph, PoolKind, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::Result;

fn batched<T: Scalar>(g: &mut Graph<T>, x: &Tensor<T>) -> Result<(Var, bool)> {
    if x.rank() == 4 {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        Ok((g.constant(x.clone().reshape(&shape)?), true))
    } else {
        Ok((g.constant(x.clone()), false))
    }
}

fn unbatched<T: Scalar>(t: Tensor<T>, squeeze: bool) -> Result<Tensor<T>> {
    if squeeze {
        let shape = t.shape()[1..].to_vec();
        t.reshape(&shape)
    } else {
        Ok(t)
    }
}

pub fn conv3d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (x, squeeze) = batched(&mut g, input)?;
    let w = g.constant(weight.clone());
    let b = g.constant(bias.clone());
    let y = g.conv3d(x, w, b, stride, pad)?;
    unbatched(g.value(y).clone(), squeeze)
}

pub fn pool3d<T: Scalar>(input: &Tensor<T>, kind: PoolKind, kernel: [usize; 3], stride: [usize; 3]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (x, squeeze) = batched(&mut g, input)?;
    let y = g.pool3d(x, kind, kernel, stride)?;
    unbatched(g.value(y).clone(), squeeze)
}

pub fn upsample_nearest2d<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let y = g.upsample_nearest2d(x, factor)?;
    Ok(g.value(y).clone())
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
    let y = g.matmul(a, b)?;
    Ok(g.value(y).clone())
}

pub fn softmax<T: Scalar>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let y = g.softmax(x, axis)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv3d_identity_kernel() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = conv3d(&x, &t(&[1, 1, 1, 1, 1], &[1.0]), &t(&[1], &[0.0]), [1, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv3d_pair_sum() {
        let x = t(&[1, 1, 1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let y = conv3d(&x, &t(&[1, 1, 1, 1, 2], &[1.0, 1.0]), &t(&[1], &[0.0]), [1, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 3]);
        assert_eq!(y.data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn conv3d_output_extent_formula() {
        let x = Tensor::<f32>::zeros(&[3, 16, 32, 32]);
        let w = Tensor::<f32>::zeros(&[16, 3, 3, 3, 3]);
        let y = conv3d(&x, &w, &Tensor::zeros(&[16]), [1, 2, 2], [1, 1, 1]).unwrap();
        assert_eq!(y.shape(), &[16, 16, 16, 16]);
    }

    #[test]
    fn conv3d_channel_mismatch_is_error() {
        let x = Tensor::<f32>::zeros(&[2, 4, 8, 8]);
        let w = Tensor::<f32>::zeros(&[4, 3, 1, 1, 1]);
        let err = conv3d(&x, &w, &Tensor::zeros(&[4]), [1, 1, 1], [0, 0, 0]).unwrap_err();
        assert!(err.to_string().contains("C_in"), "{err}");
    }

    #[test]
    fn pooling_examples() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mx = pool3d(&x, PoolKind::Max, [1, 2, 2], [1, 2, 2]).unwrap();
        assert_eq!(mx.data(), &[4.0]);
        let avg = pool3d(&x, PoolKind::Avg, [1, 2, 2], [1, 2, 2]).unwrap();
        assert_eq!(avg.data(), &[2.5]);
        let c = Tensor::<f64>::full(&[2, 2, 4, 4], 0.75);
        let p = pool3d(&c, PoolKind::Avg, [2, 2, 2], [2, 2, 2]).unwrap();
        assert_eq!(p.shape(), &[2, 1, 2, 2]);
        assert!(p.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn upsample_examples() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(upsample_nearest2d(&x, 1).unwrap(), x);
        let y = upsample_nearest2d(&x, 2).unwrap();
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn matmul_examples() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[0.3, -1.0, 2.0, 7.0]);
        assert_eq!(matmul(&id, &b).unwrap(), b);
        let y = matmul(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), &t(&[2, 1], &[5.0, 6.0])).unwrap();
        assert_eq!(y.data(), &[17.0, 39.0]);
        let y = matmul(&Tensor::<f64>::zeros(&[3, 2, 4]), &Tensor::zeros(&[3, 4, 5])).unwrap();
        assert_eq!(y.shape(), &[3, 2, 5]);
        assert!(matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn softmax_examples() {
        let y = softmax(&Tensor::<f64>::full(&[4], 3.0), 0).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let y = softmax(&t(&[2], &[0.0, 2f64.ln()]), 0).unwrap();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-15 && (y.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let x = t(&[3], &[0.25, -2.0, 1.5]);
        let shifted = x.map(|v| v + 1000.0);
        assert_eq!(softmax(&x, 0).unwrap(), softmax(&shifted, 0).unwrap());
    }
}
