//! Thin SVD by one-sided (Hestenes) Jacobi rotations.

use super::{NumericsError, Tensor};

/// `m = u · diag(sigma) · vᵀ` with `u: r×p`, `v: c×p`, `p = min(r, c)`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Tensor,
    pub sigma: Vec<f64>,
    pub v: Tensor,
}

const MAX_SWEEPS: usize = 100;

pub fn svd(m: &Tensor) -> Result<Svd, NumericsError> {
    if !m.is_finite() {
        return Err(NumericsError::NonFinite { op: "svd" });
    }
    let (r, c) = m.dims2();
    if r < c {
        // Decompose the transpose and swap the factors.
        let Svd { u, sigma, v } = jacobi(&m.transpose())?;
        return Ok(Svd { u: v, sigma, v: u });
    }
    jacobi(m)
}

/// Requires `rows ≥ cols`.
fn jacobi(m: &Tensor) -> Result<Svd, NumericsError> {
    let (r, c) = m.dims2();
    // Column-major working copy: col j at a[j*r..(j+1)*r].
    let mut a = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            a[j * r + i] = m.data()[i * c + j];
        }
    }
    let mut v = vec![0.0; c * c];
    for j in 0..c {
        v[j * c + j] = 1.0;
    }

    let tol = f64::EPSILON;
    // Columns below this squared norm are numerically zero and never rotated.
    let floor = (tol * m.frobenius()).powi(2);
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..c {
            for q in p + 1..c {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..r {
                    let (x, y) = (a[p * r + i], a[q * r + i]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0
                    || alpha.min(beta) <= floor
                    || gamma.abs() <= tol * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for i in 0..r {
                    let (x, y) = (a[p * r + i], a[q * r + i]);
                    a[p * r + i] = cs * x - sn * y;
                    a[q * r + i] = sn * x + cs * y;
                }
                for i in 0..c {
                    let (x, y) = (v[p * c + i], v[q * c + i]);
                    v[p * c + i] = cs * x - sn * y;
                    v[q * c + i] = sn * x + cs * y;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(NumericsError::NoConvergence { op: "svd" });
    }

    let norms: Vec<f64> = (0..c)
        .map(|j| {
            a[j * r..(j + 1) * r]
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));

    let mut u = vec![0.0; r * c];
    let mut vt = vec![0.0; c * c];
    let mut sigma = Vec::with_capacity(c);
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        if s > 0.0 {
            for i in 0..r {
                u[i * c + k] = a[j * r + i] / s;
            }
        }
        for i in 0..c {
            vt[i * c + k] = v[j * c + i];
        }
    }
    Ok(Svd {
        u: Tensor::new(&[r, c], u)?,
        sigma,
        v: Tensor::new(&[c, c], vt)?,
    })
}

impl Svd {
    pub fn reconstruct(&self) -> Tensor {
        let (r, p) = self.u.dims2();
        let c = self.v.rows();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = (0..p)
                    .map(|k| self.u.get2(i, k) * self.sigma[k] * self.v.get2(j, k))
                    .sum();
            }
        }
        Tensor::new(&[r, c], out).expect("svd factor shapes are consistent")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(r: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            &[r, c],
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_and_diagonal() {
        let s = svd(&Tensor::eye(3)).unwrap();
        assert_eq!(s.sigma, vec![1.0, 1.0, 1.0]);
        let d = Tensor::new(&[3, 3], vec![1., 0., 0., 0., 3., 0., 0., 0., 2.]).unwrap();
        let s = svd(&d).unwrap();
        assert_eq!(s.sigma, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [0.3, 1.1, -0.7];
        let m = Tensor::new(
            &[4, 3],
            u.iter()
                .flat_map(|a| v.iter().map(move |b| a * b))
                .collect(),
        )
        .unwrap();
        let s = svd(&m).unwrap();
        assert_eq!(s.sigma.iter().filter(|&&x| x > 1e-10).count(), 1);
    }

    #[test]
    fn reconstruction_wide_and_tall() {
        for (r, c, seed) in [(64, 64, 1), (7, 3, 2), (3, 9, 3), (1, 5, 4), (33, 17, 5)] {
            let m = random(r, c, seed);
            let s = svd(&m).unwrap();
            let err = s.reconstruct();
            let diff: f64 = err
                .data()
                .iter()
                .zip(m.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(diff <= 1e-8, "{r}x{c}: {diff}");
            assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
            assert!(s.sigma.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn rejects_nan() {
        let m = Tensor::new(&[2, 2], vec![1.0, f64::NAN, 0.0, 1.0]).unwrap();
        assert!(svd(&m).is_err());
    }
}
