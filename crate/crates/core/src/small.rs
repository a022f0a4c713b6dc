//! Stack-allocated dense helpers for dimension ≤ 4. The geodesic right-hand
//! side runs millions of times per table, so nothing here allocates.

use nalgebra::DMatrix;

pub const MAXD: usize = 4;
pub type Mat = [[f64; MAXD]; MAXD];
pub type Vect = [f64; MAXD];

pub const ZERO_MAT: Mat = [[0.0; MAXD]; MAXD];

/// Solve `a x = b` for the leading `n×n` block by partial-pivot elimination.
/// Returns `None` when a pivot collapses relative to the matrix scale.
pub fn solve(a: &Mat, b: &Vect, n: usize) -> Option<Vect> {
    let mut m = *a;
    let mut x = *b;
    let scale = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .fold(0.0f64, |s, (i, j)| s.max(a[i][j].abs()));
    if scale == 0.0 {
        return None;
    }
    for c in 0..n {
        let mut p = c;
        for r in c + 1..n {
            if m[r][c].abs() > m[p][c].abs() {
                p = r;
            }
        }
        if m[p][c].abs() <= 1e-14 * scale {
            return None;
        }
        m.swap(c, p);
        x.swap(c, p);
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            if f != 0.0 {
                for k in c..n {
                    m[r][k] -= f * m[c][k];
                }
                x[r] -= f * x[c];
            }
        }
    }
    for c in (0..n).rev() {
        let mut s = x[c];
        for k in c + 1..n {
            s -= m[c][k] * x[k];
        }
        x[c] = s / m[c][c];
    }
    Some(x)
}

pub fn inverse(a: &Mat, n: usize) -> Option<Mat> {
    let mut inv = ZERO_MAT;
    for j in 0..n {
        let mut e = [0.0; MAXD];
        e[j] = 1.0;
        let col = solve(a, &e, n)?;
        for i in 0..n {
            inv[i][j] = col[i];
        }
    }
    Some(inv)
}

pub fn det(a: &Mat, n: usize) -> f64 {
    let mut m = *a;
    let mut d = 1.0;
    for c in 0..n {
        let mut p = c;
        for r in c + 1..n {
            if m[r][c].abs() > m[p][c].abs() {
                p = r;
            }
        }
        if m[p][c] == 0.0 {
            return 0.0;
        }
        if p != c {
            m.swap(c, p);
            d = -d;
        }
        d *= m[c][c];
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    d
}

pub fn quad(a: &Mat, v: &[f64], w: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        let mut r = 0.0;
        for j in 0..n {
            r += a[i][j] * w[j];
        }
        s += v[i] * r;
    }
    s
}

pub fn to_dmatrix(a: &Mat, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| a[i][j])
}

pub fn from_slice(v: &[f64]) -> Vect {
    let mut out = [0.0; MAXD];
    out[..v.len()].copy_from_slice(v);
    out
}

/// Number of (negative, positive) eigenvalues of a symmetric matrix;
/// eigenvalues within `tol·max|λ|` of zero count toward neither.
pub fn inertia(a: &DMatrix<f64>, tol: f64) -> (usize, usize) {
    let eig = a.clone().symmetric_eigen();
    let big = eig.eigenvalues.iter().fold(0.0f64, |s, e| s.max(e.abs()));
    let neg = eig.eigenvalues.iter().filter(|&&e| e < -tol * big).count();
    let pos = eig.eigenvalues.iter().filter(|&&e| e > tol * big).count();
    (neg, pos)
}
