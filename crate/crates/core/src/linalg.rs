//! Small dense-matrix helpers for the n x n Jacobian samples that ride along
//! trajectories. Dimensions here are tiny (n is the spatial dimension of a
//! field, almost always 1 or 2), so everything is row-major `Vec<f64>` and
//! closed forms are used where they exist.

/// A sampled n x n matrix together with the derived quantities the estimates
/// need: operator norm and trace.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSample {
    pub n: usize,
    /// Row-major entries, length n*n.
    pub entries: Vec<f64>,
    /// Spectral operator norm sup { |Mv| : |v| = 1 }.
    pub op_norm: f64,
    /// trace(M); for a Jacobian sample this is the divergence.
    pub trace: f64,
}

impl MatrixSample {
    pub fn from_entries(n: usize, entries: Vec<f64>) -> Self {
        assert_eq!(entries.len(), n * n, "matrix entry count");
        let op_norm = operator_norm(n, &entries);
        let trace = (0..n).map(|i| entries[i * n + i]).sum();
        MatrixSample { n, entries, op_norm, trace }
    }

    pub fn zeros(n: usize) -> Self {
        MatrixSample { n, entries: vec![0.0; n * n], op_norm: 0.0, trace: 0.0 }
    }

    pub fn identity(n: usize) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        MatrixSample { n, entries, op_norm: 1.0, trace: n as f64 }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn det(&self) -> f64 {
        det(self.n, &self.entries)
    }
}

/// Spectral norm of a row-major n x n matrix. Exact for n <= 2, power
/// iteration on M^T M otherwise (deterministic start vector).
pub fn operator_norm(n: usize, m: &[f64]) -> f64 {
    match n {
        0 => 0.0,
        1 => m[0].abs(),
        2 => {
            // Largest singular value of [[a,b],[c,d]] in closed form.
            let (a, b, c, d) = (m[0], m[1], m[2], m[3]);
            let q = a * a + b * b + c * c + d * d;
            let det = a * d - b * c;
            let disc = (q * q - 4.0 * det * det).max(0.0).sqrt();
            (0.5 * (q + disc)).sqrt()
        }
        _ => {
            // Power iteration on M^T M.
            let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64) * 0.25).collect();
            let norm0 = (v.iter().map(|x| x * x).sum::<f64>()).sqrt();
            v.iter_mut().for_each(|x| *x /= norm0);
            let mut w = vec![0.0; n];
            let mut u = vec![0.0; n];
            let mut sigma2 = 0.0;
            for _ in 0..200 {
                // w = M v
                for i in 0..n {
                    w[i] = (0..n).map(|j| m[i * n + j] * v[j]).sum();
                }
                // u = M^T w
                for j in 0..n {
                    u[j] = (0..n).map(|i| m[i * n + j] * w[i]).sum();
                }
                let nu = (u.iter().map(|x| x * x).sum::<f64>()).sqrt();
                if nu == 0.0 {
                    return 0.0;
                }
                for j in 0..n {
                    v[j] = u[j] / nu;
                }
                if (nu - sigma2).abs() <= 1e-14 * nu.max(1.0) {
                    sigma2 = nu;
                    break;
                }
                sigma2 = nu;
            }
            sigma2.sqrt()
        }
    }
}

/// Determinant of a row-major n x n matrix; closed form for n <= 3,
/// partial-pivot elimination otherwise.
pub fn det(n: usize, m: &[f64]) -> f64 {
    match n {
        0 => 1.0,
        1 => m[0],
        2 => m[0] * m[3] - m[1] * m[2],
        3 => {
            m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                + m[2] * (m[3] * m[7] - m[4] * m[6])
        }
        _ => {
            let mut a = m.to_vec();
            let mut sign = 1.0;
            let mut d = 1.0;
            for col in 0..n {
                let mut piv = col;
                for r in col + 1..n {
                    if a[r * n + col].abs() > a[piv * n + col].abs() {
                        piv = r;
                    }
                }
                if a[piv * n + col] == 0.0 {
                    return 0.0;
                }
                if piv != col {
                    for j in 0..n {
                        a.swap(col * n + j, piv * n + j);
                    }
                    sign = -sign;
                }
                let p = a[col * n + col];
                d *= p;
                for r in col + 1..n {
                    let f = a[r * n + col] / p;
                    for j in col..n {
                        a[r * n + j] -= f * a[col * n + j];
                    }
                }
            }
            sign * d
        }
    }
}

/// c = a * b for row-major n x n matrices.
pub fn matmul(n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += a[i * n + k] * b[k * n + j];
            }
            c[i * n + j] = s;
        }
    }
}
