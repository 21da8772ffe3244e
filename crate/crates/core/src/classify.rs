//! Binary trend classifiers: exhaustive K-NN and an RBF soft-margin SVM
//! trained by sequential minimal optimization.
//!
//! Both classifiers standardize features with a [`Scaler`] fitted on their
//! training rows only, unless scaling is disabled.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeseries::BinaryLabel;

/// Per-dimension z-score transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Scaler {
    /// Fit on `rows`. Constant dimensions get unit scale.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = check_rows(rows)?;
        let n = rows.len() as f64;
        let mut means = vec![0.0; dim];
        for r in rows {
            for (m, v) in means.iter_mut().zip(r) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut sds = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in sds.iter_mut().zip(r).zip(&means) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut sds {
            *s = (*s / n).sqrt();
            if !(*s > 1e-12) {
                *s = 1.0;
            }
        }
        Ok(Self { means, sds })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            means: vec![0.0; dim],
            sds: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(x
            .iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let dim = rows.first().map(Vec::len).ok_or(Error::TooFewPoints { needed: 1, got: 0 })?;
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    Ok(dim)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    k: usize,
    scaler: Scaler,
    points: Vec<Vec<f64>>,
    labels: Vec<BinaryLabel>,
}

impl KnnModel {
    /// Store the training set. `k` must be odd so binary votes cannot tie.
    pub fn fit(rows: &[Vec<f64>], labels: &[BinaryLabel], k: usize, scaling: bool) -> Result<Self> {
        let scaler = if scaling {
            Scaler::fit(rows)?
        } else {
            Scaler::identity(check_rows(rows)?)
        };
        Self::with_scaler(rows, labels, k, scaler)
    }

    pub fn with_scaler(rows: &[Vec<f64>], labels: &[BinaryLabel], k: usize, scaler: Scaler) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(Error::InvalidClassifier(format!("k must be odd and positive, got {k}")));
        }
        if rows.len() != labels.len() {
            return Err(Error::LengthMismatch(rows.len(), labels.len()));
        }
        if rows.len() < k {
            return Err(Error::TooFewPoints {
                needed: k,
                got: rows.len(),
            });
        }
        check_rows(rows)?;
        let points = rows.iter().map(|r| scaler.transform(r)).collect::<Result<_>>()?;
        Ok(Self {
            k,
            scaler,
            points,
            labels: labels.to_vec(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Indices of the `k` nearest training points, nearest first. Equal
    /// distances go to the lower training index.
    pub fn neighbors(&self, x: &[f64]) -> Result<Vec<usize>> {
        let q = self.scaler.transform(x)?;
        let mut d: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (squared_distance(p, &q), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(d.into_iter().take(self.k).map(|(_, i)| i).collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<BinaryLabel> {
        let stable = self
            .neighbors(x)?
            .into_iter()
            .filter(|&i| self.labels[i] == BinaryLabel::Stable)
            .count();
        Ok(if 2 * stable > self.k {
            BinaryLabel::Stable
        } else {
            BinaryLabel::Unstable
        })
    }
}

pub fn knn_predict(model: &KnnModel, x: &[f64]) -> Result<BinaryLabel> {
    model.predict(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    /// RBF width in `exp(-|u - v|^2 / (2 sigma^2))`.
    pub sigma: f64,
    /// Box constraint.
    pub c: f64,
    /// Stop when the maximal KKT violation falls below this.
    pub tol: f64,
    /// Iteration cap is `max_iter_per_point * n`.
    pub max_iter_per_point: usize,
    pub scaling: bool,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            c: 1.0,
            tol: 1e-3,
            max_iter_per_point: 100,
            scaling: true,
        }
    }
}

pub fn rbf_kernel(u: &[f64], v: &[f64], sigma: f64) -> f64 {
    (-squared_distance(u, v) / (2.0 * sigma * sigma)).exp()
}

/// Dense symmetric kernel matrix, row-major.
#[derive(Clone, Debug)]
pub struct KernelMatrix {
    n: usize,
    data: Vec<f64>,
}

impl KernelMatrix {
    pub fn rbf(points: &[Vec<f64>], sigma: f64) -> Self {
        let n = points.len();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
            for j in 0..i {
                let k = rbf_kernel(&points[i], &points[j], sigma);
                data[i * n + j] = k;
                data[j * n + i] = k;
            }
        }
        Self { n, data }
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..n * n).map(|idx| f(idx / n, idx % n)).collect();
        Self { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

/// Solution of the soft-margin dual.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoSolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    /// Final maximal-violating-pair gap.
    pub gap: f64,
}

/// `sum(alpha) - 1/2 sum_ij alpha_i alpha_j y_i y_j K_ij`.
pub fn dual_objective(kernel: &KernelMatrix, y: &[f64], alpha: &[f64]) -> f64 {
    let n = alpha.len();
    let mut quad = 0.0;
    for i in 0..n {
        if alpha[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            quad += alpha[i] * alpha[j] * y[i] * y[j] * kernel.get(i, j);
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

/// Maximize the dual `sum(a) - 1/2 a'Qa` subject to `0 <= a <= c` and
/// `y'a = 0`, with `Q_ij = y_i y_j K_ij` and `y` in `{-1, +1}`.
///
/// Each step optimizes the maximal violating pair analytically.
pub fn smo_solve(kernel: &KernelMatrix, y: &[f64], c: f64, tol: f64, max_iter: usize) -> Result<SmoSolution> {
    const TAU: f64 = 1e-12;
    let n = kernel.len();
    let mut alpha = vec![0.0; n];
    // Gradient of the minimized form 1/2 a'Qa - sum(a).
    let mut grad = vec![-1.0; n];

    let in_up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
    let in_low = |a: f64, yt: f64| (yt > 0.0 && a > 0.0) || (yt < 0.0 && a < c);

    let mut iterations = 0;
    let gap = loop {
        let mut i = usize::MAX;
        let mut j = usize::MAX;
        let mut g_max = f64::NEG_INFINITY;
        let mut g_min = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            if in_up(alpha[t], y[t]) && v > g_max {
                g_max = v;
                i = t;
            }
            if in_low(alpha[t], y[t]) && v < g_min {
                g_min = v;
                j = t;
            }
        }
        let gap = g_max - g_min;
        if i == usize::MAX || j == usize::MAX || gap < tol {
            break gap.max(0.0);
        }
        if iterations >= max_iter {
            return Err(Error::NotConverged {
                iterations,
                violation: gap,
            });
        }
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let (kii, kjj, kij) = (kernel.get(i, i), kernel.get(j, j), kernel.get(i, j));
        if y[i] != y[j] {
            let quad = (kii + kjj - 2.0 * kij).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (kii + kjj - 2.0 * kij).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }

        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        let (ri, rj) = (kernel.row(i), kernel.row(j));
        for t in 0..n {
            grad[t] += y[t] * (y[i] * ri[t] * di + y[j] * rj[t] * dj);
        }
    };

    // Bias from free vectors, or the midpoint of the feasible interval.
    let mut free_sum = 0.0;
    let mut free = 0usize;
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            free_sum += yg;
        }
    }
    let rho = if free > 0 { free_sum / free as f64 } else { (ub + lb) / 2.0 };
    Ok(SmoSolution {
        alpha,
        bias: -rho,
        iterations,
        gap,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    /// Standardized support vectors.
    pub support_vectors: Vec<Vec<f64>>,
    /// `alpha_i * y_i` for each support vector.
    pub dual_coeffs: Vec<f64>,
    pub bias: f64,
    pub kernel_sigma: f64,
    pub c: f64,
    pub scaler: Scaler,
    pub iterations: usize,
}

fn signs(labels: &[BinaryLabel]) -> Vec<f64> {
    labels.iter().map(|l| l.sign()).collect()
}

/// Train an RBF SVM; stable is the `+1` class.
pub fn svm_train(rows: &[Vec<f64>], labels: &[BinaryLabel], params: &SvmParams) -> Result<SvmModel> {
    let scaler = if params.scaling {
        Scaler::fit(rows)?
    } else {
        Scaler::identity(check_rows(rows)?)
    };
    svm_train_with_scaler(rows, labels, scaler, params)
}

pub fn svm_train_with_scaler(
    rows: &[Vec<f64>],
    labels: &[BinaryLabel],
    scaler: Scaler,
    params: &SvmParams,
) -> Result<SvmModel> {
    if rows.len() != labels.len() {
        return Err(Error::LengthMismatch(rows.len(), labels.len()));
    }
    check_rows(rows)?;
    if !(params.sigma > 0.0 && params.c > 0.0) {
        return Err(Error::InvalidClassifier(format!(
            "sigma and c must be positive (sigma={}, c={})",
            params.sigma, params.c
        )));
    }
    let first = labels[0];
    if labels.iter().all(|l| *l == first) {
        return Err(Error::SingleClass);
    }
    let points: Vec<Vec<f64>> = rows.iter().map(|r| scaler.transform(r)).collect::<Result<_>>()?;
    let y = signs(labels);
    let kernel = KernelMatrix::rbf(&points, params.sigma);
    let sol = smo_solve(
        &kernel,
        &y,
        params.c,
        params.tol,
        params.max_iter_per_point * points.len(),
    )?;

    let mut support_vectors = Vec::new();
    let mut dual_coeffs = Vec::new();
    for ((p, a), yi) in points.into_iter().zip(&sol.alpha).zip(&y) {
        if *a > 0.0 {
            support_vectors.push(p);
            dual_coeffs.push(a * yi);
        }
    }
    Ok(SvmModel {
        support_vectors,
        dual_coeffs,
        bias: sol.bias,
        kernel_sigma: params.sigma,
        c: params.c,
        scaler,
        iterations: sol.iterations,
    })
}

impl SvmModel {
    /// `f(x) = sum_i coeff_i k(sv_i, x) + b` on the standardized input.
    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        let q = self.scaler.transform(x)?;
        Ok(self
            .support_vectors
            .iter()
            .zip(&self.dual_coeffs)
            .map(|(sv, a)| a * rbf_kernel(sv, &q, self.kernel_sigma))
            .sum::<f64>()
            + self.bias)
    }

    /// Stable when `f(x) >= 0`.
    pub fn predict(&self, x: &[f64]) -> Result<BinaryLabel> {
        Ok(BinaryLabel::from_sign(self.decision(x)?))
    }
}

pub fn svm_predict(model: &SvmModel, x: &[f64]) -> Result<BinaryLabel> {
    model.predict(x)
}

impl fmt::Display for SvmModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "svm rbf")?;
        writeln!(f, "support_vectors: {}", self.support_vectors.len())?;
        writeln!(f, "bias: {}", self.bias)?;
        writeln!(f, "sigma: {}", self.kernel_sigma)?;
        writeln!(f, "c: {}", self.c)?;
        writeln!(f, "dim: {}", self.scaler.dim())?;
        write!(f, "smo_iterations: {}", self.iterations)
    }
}
