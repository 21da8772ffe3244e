//! Independent reference implementations used by the integration tests.
//! Nothing here calls into the library's numerics.

#![allow(dead_code)]

use trendeq::BinaryLabel;

/// Gaussian elimination with partial pivoting. Returns the solution and
/// log|det A|, or None if a pivot vanishes.
pub fn solve(a: &[Vec<f64>], b: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(row, &bi)| {
        let mut r = row.clone();
        r.push(bi);
        r
    }).collect();
    let mut logdet = 0.0;
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col] == 0.0 {
            return None;
        }
        m.swap(col, piv);
        logdet += m[col][col].abs().ln();
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..=n {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| m[r][c] * x[c]).sum();
        x[r] = (m[r][n] - s) / m[r][r];
    }
    Some((x, logdet))
}

/// Explicit inverse by Gauss-Jordan elimination.
pub fn invert(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        assert!(p != 0.0, "singular matrix");
        for c in 0..2 * n {
            m[col][c] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

pub fn se(x: f64, y: f64, l: f64) -> f64 {
    (-(x - y) * (x - y) / (2.0 * l * l)).exp()
}

/// `sf2 * k(xi, xj) + diag * I`.
pub fn gram(xs: &[f64], l: f64, sf2: f64, diag: f64) -> Vec<Vec<f64>> {
    xs.iter()
        .enumerate()
        .map(|(i, &a)| {
            xs.iter()
                .enumerate()
                .map(|(j, &b)| sf2 * se(a, b, l) + if i == j { diag } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Posterior mean and latent variance at `x` by explicit inversion.
pub fn gp_posterior(xs: &[f64], ys: &[f64], m: f64, l: f64, sf2: f64, diag: f64, x: f64) -> (f64, f64) {
    let inv = invert(&gram(xs, l, sf2, diag));
    let k: Vec<f64> = xs.iter().map(|&xi| sf2 * se(x, xi, l)).collect();
    let n = xs.len();
    let mut mean = m;
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            mean += k[i] * inv[i][j] * (ys[j] - m);
            quad += k[i] * inv[i][j] * k[j];
        }
    }
    (mean, (sf2 - quad).max(0.0))
}

/// Log evidence by explicit inversion and elimination determinant.
pub fn gp_evidence(xs: &[f64], ys: &[f64], m: f64, l: f64, sf2: f64, diag: f64) -> f64 {
    let a = gram(xs, l, sf2, diag);
    let inv = invert(&a);
    let r: Vec<f64> = ys.iter().map(|y| y - m).collect();
    let n = xs.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += r[i] * inv[i][j] * r[j];
        }
    }
    let (_, logdet) = solve(&a, &vec![0.0; n]).expect("nonsingular");
    -0.5 * quad - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Per-dimension z-score with population sd; constant dimensions keep sd 1.
pub fn standardize(train: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = train.len() as f64;
    let d = train[0].len();
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| {
            let v = train.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 0.0 { v.sqrt() } else { 1.0 }
        })
        .collect();
    (mean, sd)
}

pub fn apply(x: &[f64], mean: &[f64], sd: &[f64]) -> Vec<f64> {
    x.iter().zip(mean).zip(sd).map(|((v, m), s)| (v - m) / s).collect()
}

/// Exhaustive k-nearest search: all distances, stable sort by (distance, index).
pub fn knn_brute(train: &[Vec<f64>], labels: &[BinaryLabel], k: usize, x: &[f64]) -> (Vec<usize>, BinaryLabel) {
    let mut d: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, t)| (t.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let nearest: Vec<usize> = d[..k].iter().map(|p| p.1).collect();
    let stable = nearest.iter().filter(|&&i| labels[i] == BinaryLabel::Stable).count();
    let label = if 2 * stable > k { BinaryLabel::Stable } else { BinaryLabel::Unstable };
    (nearest, label)
}

pub fn dual_value(q: &[Vec<f64>], alpha: &[f64]) -> f64 {
    let n = alpha.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += alpha[i] * alpha[j] * q[i][j];
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

/// Maximizes the soft-margin dual by enumerating every assignment of each
/// multiplier to {0, C, free}. On each face the free multipliers solve the
/// equality-constrained stationarity system; feasible faces are compared by
/// objective. The dual is concave, so the best feasible face holds the optimum.
pub fn svm_dual_brute(k: &[Vec<f64>], y: &[f64], c: f64) -> (f64, Vec<f64>) {
    let n = y.len();
    let q: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| y[i] * y[j] * k[i][j]).collect()).collect();
    let mut best = (f64::NEG_INFINITY, vec![0.0; n]);
    let mut state = vec![0u8; n];
    loop {
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
        let mut alpha: Vec<f64> = state.iter().map(|&s| if s == 1 { c } else { 0.0 }).collect();
        let fixed_sum: f64 = (0..n).filter(|&i| state[i] != 2).map(|i| y[i] * alpha[i]).sum();
        let feasible = if free.is_empty() {
            fixed_sum.abs() < 1e-12
        } else {
            let m = free.len();
            let mut a = vec![vec![0.0; m + 1]; m + 1];
            let mut b = vec![0.0; m + 1];
            for (r, &i) in free.iter().enumerate() {
                for (s, &j) in free.iter().enumerate() {
                    a[r][s] = q[i][j];
                }
                a[r][m] = y[i];
                a[m][r] = y[i];
                b[r] = 1.0 - (0..n).filter(|&j| state[j] == 1).map(|j| q[i][j] * c).sum::<f64>();
            }
            b[m] = -fixed_sum;
            match solve(&a, &b) {
                Some((sol, _)) => {
                    for (r, &i) in free.iter().enumerate() {
                        alpha[i] = sol[r];
                    }
                    free.iter().all(|&i| alpha[i] >= -1e-12 && alpha[i] <= c + 1e-12)
                }
                None => false,
            }
        };
        if feasible {
            let v = dual_value(&q, &alpha);
            if v > best.0 {
                best = (v, alpha);
            }
        }
        let mut pos = 0;
        loop {
            if pos == n {
                return best;
            }
            state[pos] += 1;
            if state[pos] < 3 {
                break;
            }
            state[pos] = 0;
            pos += 1;
        }
    }
}

/// Bias from a dual solution: mean over free multipliers of `y_i - sum_j a_j y_j K_ij`,
/// or the midpoint of the feasible interval when none are free.
pub fn svm_bias(k: &[Vec<f64>], y: &[f64], alpha: &[f64], c: f64) -> f64 {
    let n = y.len();
    let resid = |i: usize| y[i] - (0..n).map(|j| alpha[j] * y[j] * k[i][j]).sum::<f64>();
    let tol = 1e-9 * c;
    let free: Vec<usize> = (0..n).filter(|&i| alpha[i] > tol && alpha[i] < c - tol).collect();
    if !free.is_empty() {
        return free.iter().map(|&i| resid(i)).sum::<f64>() / free.len() as f64;
    }
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..n {
        let r = resid(i);
        let at_zero = alpha[i] <= tol;
        // y_i f_i >= 1 at zero, <= 1 at C.
        if (at_zero && y[i] > 0.0) || (!at_zero && y[i] < 0.0) {
            lo = lo.max(r);
        } else {
            hi = hi.min(r);
        }
    }
    (lo + hi) / 2.0
}
