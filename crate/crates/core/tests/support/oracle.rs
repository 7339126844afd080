/// Eigenvalues of the sample covariance (times n) by cyclic Jacobi rotations,
/// descending. Independent of the SVD route used by the library.
pub fn covariance_eigenvalues(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    let c = rows[0].len();
    let mean: Vec<f64> = (0..c)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let mut a = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in 0..c {
            a[i][j] = rows
                .iter()
                .map(|r| (r[i] - mean[i]) * (r[j] - mean[j]))
                .sum();
        }
    }
    for _ in 0..100 {
        let mut off = 0.0;
        for i in 0..c {
            for j in 0..c {
                if i != j {
                    off += a[i][j] * a[i][j];
                }
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..c {
            for q in p + 1..c {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for row in a.iter_mut() {
                    let (kp, kq) = (row[p], row[q]);
                    row[p] = cs * kp - sn * kq;
                    row[q] = sn * kp + cs * kq;
                }
                for k in 0..c {
                    let (pk, qk) = (a[p][k], a[q][k]);
                    a[p][k] = cs * pk - sn * qk;
                    a[q][k] = sn * pk + cs * qk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..c).map(|i| a[i][i].max(0.0)).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}
