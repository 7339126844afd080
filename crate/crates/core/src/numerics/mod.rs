//! Dense `f64` tensors, a reverse-mode tape, and the SVD used by the analyses.

mod kernels;
mod svd;
mod tape;
mod tensor;

use thiserror::Error;

pub use kernels::{dot, gelu, layer_norm_row, sigmoid, softmax_in_place, vec_mat};
pub use svd::{svd, Svd};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use kernels::MatRef;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("rows have differing lengths")]
    RaggedRows,
    #[error("{op}: empty axis")]
    EmptyAxis { op: &'static str },
    #[error("{op}: axis length {len} is too short to normalize")]
    DegenerateAxis { op: &'static str, len: usize },
    #[error("axis {axis} out of range for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("{op}: iteration did not converge")]
    NoConvergence { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("reverse sweep requested before any forward pass on this tape")]
    NoForwardPass,
    #[error("tape has already been swept; record a new forward pass")]
    AlreadySwept,
}

/// Matrix product `a · b` without recording.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if k != k2 || a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Tensor::new(
        &[m, n],
        kernels::matmul_new(MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n)),
    )
}

/// Softmax along `axis` of a 1-D or 2-D tensor.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor, NumericsError> {
    let shape = x.shape().to_vec();
    if axis >= shape.len() || shape.len() > 2 {
        return Err(NumericsError::InvalidAxis { axis, shape });
    }
    if shape[axis] == 0 {
        return Err(NumericsError::EmptyAxis { op: "softmax" });
    }
    if shape.len() == 2 && axis == 0 {
        let t = softmax(&x.transpose(), 1)?;
        return Ok(t.transpose());
    }
    let (m, n) = x.dims2();
    let mut data = x.data().to_vec();
    for i in 0..m {
        kernels::softmax_in_place(&mut data[i * n..(i + 1) * n]);
    }
    Tensor::new(&shape, data)
}

/// Row-wise layer normalization over the last axis.
pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<Tensor, NumericsError> {
    let (m, n) = x.dims2();
    if n < 2 {
        return Err(NumericsError::DegenerateAxis {
            op: "layer_norm",
            len: n,
        });
    }
    if gain.len() != n || bias.len() != n {
        return Err(NumericsError::ShapeMismatch {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        kernels::layer_norm_row(
            x.row_slice(i),
            gain.data(),
            bias.data(),
            eps,
            &mut out[i * n..(i + 1) * n],
        );
    }
    Tensor::new(x.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_examples() {
        let b = Tensor::new(&[2, 2], vec![5., 6., 7., 8.]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
        let a = Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19., 22., 43., 50.]);
        let bad = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            matmul(&bad, &bad),
            Err(NumericsError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::row(vec![0.0; 4]), 1).unwrap();
        assert!(s.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let s = softmax(&Tensor::row(vec![1000.0, 0.0]), 1).unwrap();
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] < 1e-300);
        let s = softmax(&Tensor::row(vec![0.0, 2f64.ln()]), 1).unwrap();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_axis_zero() {
        let x = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!(s.data().iter().all(|&p| (p - 0.5).abs() < 1e-15));
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::row(vec![1.0; 4]);
        let zeros = Tensor::row(vec![0.0; 4]);
        let y = layer_norm(&Tensor::row(vec![1.0; 4]), &ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let g2 = Tensor::row(vec![1.0; 2]);
        let b2 = Tensor::row(vec![0.0; 2]);
        let y = layer_norm(&Tensor::row(vec![1.0, -1.0]), &g2, &b2, LAYER_NORM_EPS).unwrap();
        // variance 1 → scale 1/sqrt(1 + eps)
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-15 && (y.data()[1] + expect).abs() < 1e-15);

        let one = Tensor::row(vec![3.0]);
        assert!(matches!(
            layer_norm(
                &one,
                &Tensor::scalar(1.0),
                &Tensor::scalar(0.0),
                LAYER_NORM_EPS
            ),
            Err(NumericsError::DegenerateAxis { .. })
        ));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(xs in proptest::collection::vec(-700.0f64..700.0, 1..32)) {
            let s = softmax(&Tensor::row(xs), 1).unwrap();
            let total: f64 = s.data().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(s.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn layer_norm_rows_are_standardized(xs in proptest::collection::vec(-50.0f64..50.0, 2..24)) {
            let n = xs.len();
            let spread = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1.0);
            let y = layer_norm(&Tensor::row(xs), &Tensor::row(vec![1.0; n]), &Tensor::row(vec![0.0; n]), 1e-12).unwrap();
            let mean = y.data().iter().sum::<f64>() / n as f64;
            let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-10);
        }
    }
}
