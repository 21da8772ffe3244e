//! Per-patient Gaussian-process regression with a squared-exponential kernel.
//!
//! The model is `y = f(x) + e`, `f ~ GP(m, sf2 * exp(-(x - x')^2 / (2 l^2)))`,
//! `e ~ N(0, sn2)`, where `m` is the patient's empirical mean eGFR. The three
//! hyperparameters `(l, sf2, sn2)` are set to a local maximum of the log
//! marginal likelihood plus log-normal priors, optimized in log space.

use std::f64::consts::PI;
use std::io::Write;

use log::{debug, trace};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::timeseries::PatientSeries;

/// Number of points in every resampled vector.
pub const GRID_LEN: usize = 50;
pub const FIXED_RANGE: (f64, f64) = (30.0, 90.0);

const JITTER_START: f64 = 1e-9;
const JITTER_MAX: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Kernel length scale, years.
    pub length_scale: f64,
    /// Kernel amplitude, (eGFR units)^2.
    pub signal_variance: f64,
    /// Observation noise, (eGFR units)^2.
    pub noise_variance: f64,
}

impl Hyperparams {
    pub fn new(length_scale: f64, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        let hp = Self {
            length_scale,
            signal_variance,
            noise_variance,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("length_scale", self.length_scale),
            ("signal_variance", self.signal_variance),
            ("noise_variance", self.noise_variance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidHyperparams(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    /// `[ln l, ln sf2, ln sn2]`
    pub fn to_log(&self) -> [f64; 3] {
        [
            self.length_scale.ln(),
            self.signal_variance.ln(),
            self.noise_variance.ln(),
        ]
    }

    pub fn from_log(theta: [f64; 3]) -> Result<Self> {
        Self::new(theta[0].exp(), theta[1].exp(), theta[2].exp())
    }
}

/// Unit-amplitude squared-exponential kernel.
pub fn se_kernel(x: f64, x_prime: f64, length_scale: f64) -> f64 {
    let d = x - x_prime;
    (-(d * d) / (2.0 * length_scale * length_scale)).exp()
}

/// Entry `(i, j)` is `sf2 * se_kernel(xs[i], ys[j], l)`.
pub fn kernel_matrix(xs: &[f64], ys: &[f64], hp: &Hyperparams) -> DMatrix<f64> {
    DMatrix::from_fn(xs.len(), ys.len(), |i, j| {
        hp.signal_variance * se_kernel(xs[i], ys[j], hp.length_scale)
    })
}

/// Cholesky factor of `K + sn2 I + jitter I` with the jitter that succeeded.
struct Factored {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

fn factorize(xs: &[f64], hp: &Hyperparams) -> Result<Factored> {
    let n = xs.len();
    let base = kernel_matrix(xs, xs, hp) + DMatrix::identity(n, n) * hp.noise_variance;
    let mut rel = JITTER_START;
    loop {
        let jitter = rel * hp.signal_variance;
        let mut m = base.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = m.cholesky() {
            if chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Ok(Factored { chol, jitter });
            }
        }
        if rel >= JITTER_MAX {
            return Err(Error::IllConditioned { jitter });
        }
        rel = (rel * 2.0).min(JITTER_MAX);
    }
}

fn residuals(ys: &[f64], prior_mean: f64) -> DVector<f64> {
    DVector::from_iterator(ys.len(), ys.iter().map(|y| y - prior_mean))
}

fn check_xy(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::InvalidSeries(format!(
            "need matching non-empty inputs, got {} ages and {} values",
            xs.len(),
            ys.len()
        )));
    }
    Ok(())
}

/// `log N(ys | prior_mean, K + sn2 I)`.
pub fn log_marginal_likelihood(hp: &Hyperparams, xs: &[f64], ys: &[f64], prior_mean: f64) -> Result<f64> {
    check_xy(xs, ys)?;
    let f = factorize(xs, hp)?;
    let r = residuals(ys, prior_mean);
    let alpha = f.chol.solve(&r);
    Ok(lml_from_parts(&f.chol, &r, &alpha))
}

fn lml_from_parts(chol: &Cholesky<f64, Dyn>, r: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
    let n = r.len() as f64;
    let half_log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
    -0.5 * r.dot(alpha) - half_log_det - 0.5 * n * (2.0 * PI).ln()
}

/// Log marginal likelihood and its gradient with respect to
/// `[ln l, ln sf2, ln sn2]`.
pub fn log_marginal_likelihood_grad(
    hp: &Hyperparams,
    xs: &[f64],
    ys: &[f64],
    prior_mean: f64,
) -> Result<(f64, [f64; 3])> {
    check_xy(xs, ys)?;
    let n = xs.len();
    let f = factorize(xs, hp)?;
    let r = residuals(ys, prior_mean);
    let alpha = f.chol.solve(&r);
    let value = lml_from_parts(&f.chol, &r, &alpha);

    // W = alpha alpha^T - (K + sn2 I)^-1; dL/dtheta = tr(W dK/dtheta) / 2.
    let mut w = &alpha * alpha.transpose();
    w -= f.chol.inverse();

    let l2 = hp.length_scale * hp.length_scale;
    let mut g_len = 0.0;
    let mut g_sig = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = xs[i] - xs[j];
            let k = hp.signal_variance * (-(d * d) / (2.0 * l2)).exp();
            g_len += w[(i, j)] * k * d * d / l2;
            g_sig += w[(i, j)] * k;
        }
    }
    let trace_w = w.trace();
    // The jitter scales with sf2, so it moves with ln sf2.
    g_sig += f.jitter * trace_w;
    let g_noise = hp.noise_variance * trace_w;
    Ok((value, [0.5 * g_len, 0.5 * g_sig, 0.5 * g_noise]))
}

/// Normal prior on a log-hyperparameter, i.e. a log-normal prior on the
/// hyperparameter itself.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogNormalPrior {
    pub median: f64,
    pub log_sd: f64,
}

impl LogNormalPrior {
    pub fn new(median: f64, log_sd: f64) -> Self {
        Self { median, log_sd }
    }

    fn mu(&self) -> f64 {
        self.median.ln()
    }

    /// Log density in log space and its derivative.
    pub fn log_density(&self, theta: f64) -> (f64, f64) {
        let z = (theta - self.mu()) / self.log_sd;
        let value = -0.5 * z * z - (self.log_sd * (2.0 * PI).sqrt()).ln();
        (value, -z / self.log_sd)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub length_scale_prior: LogNormalPrior,
    /// Median is the series' sample variance, floored at `signal_variance_floor`.
    pub signal_variance_log_sd: f64,
    pub signal_variance_floor: f64,
    pub noise_variance_prior: LogNormalPrior,
    pub restarts: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            length_scale_prior: LogNormalPrior::new(5.0, 1.0),
            signal_variance_log_sd: 1.0,
            signal_variance_floor: 1.0,
            noise_variance_prior: LogNormalPrior::new(10.0, 1.0),
            restarts: 5,
            max_iter: 200,
            grad_tol: 1e-5,
            seed: 0,
        }
    }
}

impl FitConfig {
    /// Priors for one series, in `[ln l, ln sf2, ln sn2]` order.
    pub fn priors_for(&self, ys: &[f64]) -> [LogNormalPrior; 3] {
        let sf2 = sample_variance(ys).max(self.signal_variance_floor);
        [
            self.length_scale_prior,
            LogNormalPrior::new(sf2, self.signal_variance_log_sd),
            self.noise_variance_prior,
        ]
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

/// Log marginal likelihood plus log prior density, with gradient, in log space.
pub fn log_posterior_grad(
    theta: [f64; 3],
    priors: &[LogNormalPrior; 3],
    xs: &[f64],
    ys: &[f64],
    prior_mean: f64,
) -> Result<(f64, [f64; 3])> {
    let hp = Hyperparams::from_log(theta)?;
    let (mut value, mut grad) = log_marginal_likelihood_grad(&hp, xs, ys, prior_mean)?;
    for k in 0..3 {
        let (lp, dlp) = priors[k].log_density(theta[k]);
        value += lp;
        grad[k] += dlp;
    }
    Ok((value, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub log_posterior: f64,
    pub converged_restarts: usize,
    pub iterations: usize,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug)]
struct Ascent {
    theta: [f64; 3],
    value: f64,
    grad_norm: f64,
    iterations: usize,
    converged: bool,
}

fn inf_norm(g: &[f64; 3]) -> f64 {
    g.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Quasi-Newton ascent with an Armijo backtracking line search. Falls back to
/// the plain gradient direction whenever the curvature model stops
/// producing ascent directions.
fn ascend<F>(objective: F, start: [f64; 3], max_iter: usize, grad_tol: f64) -> Option<Ascent>
where
    F: Fn([f64; 3]) -> Result<(f64, [f64; 3])>,
{
    const MAX_STEP: f64 = 2.0;
    const ARMIJO: f64 = 1e-4;
    // Gradient level at which a failed line search counts as round-off stall.
    const STALL_TOL: f64 = 1e-3;
    const MAX_FLAT_STEPS: usize = 5;

    let identity = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let (mut value, mut grad) = objective(start).ok()?;
    if !value.is_finite() {
        return None;
    }
    let mut theta = start;
    let mut h = identity;
    let mut iterations = 0;
    let mut flat_steps = 0;

    while iterations < max_iter {
        let gnorm = inf_norm(&grad);
        if gnorm < grad_tol {
            return Some(Ascent { theta, value, grad_norm: gnorm, iterations, converged: true });
        }
        iterations += 1;

        let mut accepted = None;
        for attempt in 0..2 {
            let mut dir = [0.0; 3];
            for (i, d) in dir.iter_mut().enumerate() {
                *d = (0..3).map(|j| h[i][j] * grad[j]).sum();
            }
            if attempt == 1 || dot3(&dir, &grad) <= 0.0 {
                h = identity;
                dir = grad;
            }
            let longest = inf_norm(&dir);
            if longest > MAX_STEP {
                dir.iter_mut().for_each(|d| *d *= MAX_STEP / longest);
            }
            let slope = dot3(&dir, &grad);
            let mut step = 1.0;
            for _ in 0..50 {
                let cand = [
                    theta[0] + step * dir[0],
                    theta[1] + step * dir[1],
                    theta[2] + step * dir[2],
                ];
                if let Ok((v, g)) = objective(cand) {
                    if v.is_finite() && v >= value + ARMIJO * step * slope {
                        accepted = Some((cand, v, g));
                        break;
                    }
                }
                step *= 0.5;
            }
            if accepted.is_some() || h == identity {
                break;
            }
        }

        let Some((cand, v, g)) = accepted else {
            return Some(Ascent {
                theta,
                value,
                grad_norm: gnorm,
                iterations,
                converged: gnorm < STALL_TOL,
            });
        };

        // Round-off stall: accepted steps that no longer change the value.
        if v - value <= 1e-12 * (1.0 + value.abs()) {
            flat_steps += 1;
            if gnorm < STALL_TOL || flat_steps >= MAX_FLAT_STEPS {
                return Some(Ascent {
                    theta: cand,
                    value: v,
                    grad_norm: inf_norm(&g),
                    iterations,
                    converged: gnorm < STALL_TOL,
                });
            }
        } else {
            flat_steps = 0;
        }

        // BFGS update of the inverse Hessian of the negated objective.
        let s = [cand[0] - theta[0], cand[1] - theta[1], cand[2] - theta[2]];
        let y = [grad[0] - g[0], grad[1] - g[1], grad[2] - g[2]];
        let sy = dot3(&s, &y);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let mut hy = [0.0; 3];
            for (i, v) in hy.iter_mut().enumerate() {
                *v = (0..3).map(|j| h[i][j] * y[j]).sum();
            }
            let yhy = dot3(&y, &hy);
            for i in 0..3 {
                for j in 0..3 {
                    h[i][j] += (1.0 + rho * yhy) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
        }
        theta = cand;
        value = v;
        grad = g;
    }
    let gnorm = inf_norm(&grad);
    Some(Ascent {
        theta,
        value,
        grad_norm: gnorm,
        iterations,
        converged: gnorm < grad_tol,
    })
}

/// A fitted, immutable GP conditioned on one patient's observations.
#[derive(Clone, Debug)]
pub struct GprModel {
    train_x: Vec<f64>,
    train_y: Vec<f64>,
    prior_mean: f64,
    hp: Hyperparams,
    jitter: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    diagnostics: Option<FitDiagnostics>,
}

impl GprModel {
    /// Condition a GP with fixed hyperparameters on `(xs, ys)`.
    pub fn condition(xs: Vec<f64>, ys: Vec<f64>, prior_mean: f64, hp: Hyperparams) -> Result<Self> {
        check_xy(&xs, &ys)?;
        hp.validate()?;
        if !xs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidSeries("training ages must be strictly increasing".into()));
        }
        let f = factorize(&xs, &hp)?;
        let alpha = f.chol.solve(&residuals(&ys, prior_mean));
        Ok(Self {
            train_x: xs,
            train_y: ys,
            prior_mean,
            hp,
            jitter: f.jitter,
            chol: f.chol,
            alpha,
            diagnostics: None,
        })
    }

    pub fn train_x(&self) -> &[f64] {
        &self.train_x
    }

    pub fn train_y(&self) -> &[f64] {
        &self.train_y
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    /// Diagonal jitter that was added to `K + sn2 I` before factorization.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower-triangular factor `L` with `L L^T = K + (sn2 + jitter) I`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn diagnostics(&self) -> Option<&FitDiagnostics> {
        self.diagnostics.as_ref()
    }

    pub fn predict(&self, x: f64) -> Posterior {
        let sf2 = self.hp.signal_variance;
        let k = DVector::from_iterator(
            self.train_x.len(),
            self.train_x.iter().map(|&xi| sf2 * se_kernel(x, xi, self.hp.length_scale)),
        );
        let mean = self.prior_mean + k.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&k)
            .expect("cholesky factor has a positive diagonal");
        let variance = (sf2 - v.norm_squared()).max(0.0);
        Posterior { mean, variance }
    }

    pub fn predict_many(&self, xs: &[f64]) -> Vec<Posterior> {
        xs.iter().map(|&x| self.predict(x)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub mean: f64,
    pub variance: f64,
}

/// Fit a GP to `series` at MAP hyperparameters.
///
/// Restarts from the prior medians and from `config.restarts - 1` draws of
/// the prior, then keeps the best converged optimum. A single-observation
/// series is not optimized; it gets the prior medians.
pub fn fit(series: &PatientSeries, config: &FitConfig) -> Result<GprModel> {
    let xs = series.ages();
    let ys = series.values();
    let prior_mean = mean(&ys);
    let priors = config.priors_for(&ys);
    let medians = [priors[0].mu(), priors[1].mu(), priors[2].mu()];

    if xs.len() == 1 {
        let hp = Hyperparams::from_log(medians)?;
        return GprModel::condition(xs, ys, prior_mean, hp);
    }

    let mut rng = seed::indexed_substream(
        seed::keyed_seed(config.seed, "gpr-restarts", series.id()),
        "draws",
        0,
    );
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut starts = vec![medians];
    for _ in 1..config.restarts.max(1) {
        let mut t = medians;
        for (k, v) in t.iter_mut().enumerate() {
            *v += priors[k].log_sd * unit.sample(&mut rng);
        }
        starts.push(t);
    }

    let objective = |theta: [f64; 3]| log_posterior_grad(theta, &priors, &xs, &ys, prior_mean);
    let mut best: Option<Ascent> = None;
    let mut best_unconverged: Option<Ascent> = None;
    let mut converged = 0;
    for start in starts {
        let Some(run) = ascend(objective, start, config.max_iter, config.grad_tol) else {
            trace!("fit {}: restart from {start:?} could not be evaluated", series.id());
            continue;
        };
        trace!(
            "fit {}: restart from {start:?} -> {:?} value={:.6} iters={} grad={:.3e} converged={}",
            series.id(),
            run.theta,
            run.value,
            run.iterations,
            run.grad_norm,
            run.converged
        );
        let slot = if run.converged {
            converged += 1;
            &mut best
        } else {
            &mut best_unconverged
        };
        if slot.is_none_or(|b| run.value > b.value) {
            *slot = Some(run);
        }
    }

    let Some(best) = best else {
        let diagnostics = match best_unconverged {
            Some(b) => format!(
                "no restart converged; best log posterior {:.6} with gradient norm {:.3e} after {} iterations",
                b.value, b.grad_norm, b.iterations
            ),
            None => "every restart failed to evaluate".to_string(),
        };
        return Err(Error::FitDiverged {
            id: series.id().to_string(),
            diagnostics,
        });
    };
    debug!(
        "fit {}: theta={:?} logpost={:.4} iters={} converged={}/{}",
        series.id(),
        best.theta,
        best.value,
        best.iterations,
        converged,
        config.restarts
    );
    let hp = Hyperparams::from_log(best.theta)?;
    let mut model = GprModel::condition(xs, ys, prior_mean, hp)?;
    model.diagnostics = Some(FitDiagnostics {
        log_posterior: best.value,
        converged_restarts: converged,
        iterations: best.iterations,
        grad_norm: best.grad_norm,
    });
    Ok(model)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[serde(rename = "fixed_30_90")]
    Fixed30To90,
    InRange,
    LinearInRange,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Fixed30To90 => "fixed_30_90",
            Regime::InRange => "in_range",
            Regime::LinearInRange => "linear_in_range",
        }
    }
}

/// A fixed-length vector of values on a uniform age grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resampled {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub variances: Vec<f64>,
    pub regime: Regime,
}

/// `GRID_LEN` evenly spaced ages on the closed interval `[lo, hi]`.
pub fn uniform_grid(lo: f64, hi: f64) -> Vec<f64> {
    let last = (GRID_LEN - 1) as f64;
    let step = (hi - lo) / last;
    let mut grid: Vec<f64> = (0..GRID_LEN).map(|i| lo + step * i as f64).collect();
    grid[GRID_LEN - 1] = hi;
    grid
}

fn resample_on(model: &GprModel, grid: Vec<f64>, regime: Regime) -> Resampled {
    let (values, variances) = model
        .predict_many(&grid)
        .into_iter()
        .map(|p| (p.mean, p.variance))
        .unzip();
    Resampled {
        grid,
        values,
        variances,
        regime,
    }
}

pub fn resample_fixed_range(model: &GprModel) -> Resampled {
    resample_on(model, uniform_grid(FIXED_RANGE.0, FIXED_RANGE.1), Regime::Fixed30To90)
}

pub fn resample_in_range(model: &GprModel, series: &PatientSeries) -> Result<Resampled> {
    if !series.has_range() {
        return Err(Error::DegenerateRange(series.id().to_string()));
    }
    let grid = uniform_grid(series.min_age(), series.max_age());
    Ok(resample_on(model, grid, Regime::InRange))
}

impl Resampled {
    /// Plot data: the band `mean -/+ 1.96 sd` on the grid, then the raw
    /// observations under their own header.
    pub fn write_plot_data<W: Write>(&self, mut w: W, series: &PatientSeries, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "age,mean,lower95,upper95")?;
        for ((age, mean), var) in self.grid.iter().zip(&self.values).zip(&self.variances) {
            let half = 1.96 * var.sqrt();
            writeln!(w, "{age},{mean},{},{}", mean - half, mean + half)?;
        }
        writeln!(w, "obs_age,obs_egfr")?;
        for o in series.observations() {
            writeln!(w, "{},{}", o.age, o.egfr)?;
        }
        Ok(())
    }
}
