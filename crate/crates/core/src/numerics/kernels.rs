//! Thin safe wrappers over `matrixmultiply::dgemm` plus a few row-wise helpers
//! shared by the tape and the incremental decoder.

/// Row-major operand of logical shape `rows × cols`, optionally read transposed
/// from a buffer laid out as `cols × rows`.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// Logical `rows × cols` view of a buffer stored as `cols × rows`.
    pub fn t(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = alpha * a·b + beta * c`, with `c` row-major `a.rows × b.cols`.
pub fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(a.data.len() >= a.rows * a.cols);
    assert!(b.data.len() >= b.rows * b.cols);
    assert_eq!(c.len(), a.rows * b.cols);
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above bound every index dgemm touches by the slice lengths.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

pub fn matmul_new(a: MatRef<'_>, b: MatRef<'_>) -> Vec<f64> {
    let mut c = vec![0.0; a.rows * b.cols];
    gemm(1.0, a, b, 0.0, &mut c);
    c
}

/// `y = x·W (+ bias)` for a single row `x` of length `W.rows`; `W` row-major `in × out`.
pub fn vec_mat(x: &[f64], w: &[f64], out: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let mut y = match bias {
        Some(b) => b.to_vec(),
        None => vec![0.0; out],
    };
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * out..(i + 1) * out];
        for (yj, &wj) in y.iter_mut().zip(row) {
            *yj += xi * wj;
        }
    }
    y
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place max-subtracted softmax over one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Normalizes `row` to zero mean / unit variance, then applies `gain`/`bias`.
/// Returns `(x_hat, inv_std)` for the backward rule.
pub fn layer_norm_row(row: &[f64], gain: &[f64], bias: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    for (j, o) in out.iter_mut().enumerate() {
        *o = (row[j] - mean) * inv_std * gain[j] + bias[j];
    }
    inv_std
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(
            matmul_new(MatRef::new(&a, 2, 2), MatRef::new(&b, 2, 2)),
            vec![19.0, 22.0, 43.0, 50.0]
        );
        // aᵀ·b
        assert_eq!(
            matmul_new(MatRef::t(&a, 2, 2), MatRef::new(&b, 2, 2)),
            vec![26.0, 30.0, 38.0, 44.0]
        );
        // a·bᵀ
        assert_eq!(
            matmul_new(MatRef::new(&a, 2, 2), MatRef::t(&b, 2, 2)),
            vec![17.0, 23.0, 39.0, 53.0]
        );
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
