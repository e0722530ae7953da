//! Exact Gaussian process regression per series: rational-quadratic kernel,
//! Cholesky-based posterior, log marginal likelihood, grid-search
//! hyperparameter selection, and regular-grid interpolation with padding.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::cohort::LabSeries;
use crate::error::{Error, Result};
use crate::preprocess::{self, Standardization, TimeWarp, WarpParams};

/// Hyperparameters of the rational-quadratic covariance plus observation
/// noise. The kernel prefactor (signal variance) and the noise added to the
/// diagonal are kept as independent parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RqHyperparams {
    /// Signal variance, standardized value units squared.
    pub amplitude2: f64,
    /// Scale-mixture exponent of the rational quadratic.
    pub alpha: f64,
    /// Time scale in warped days.
    pub tau: f64,
    /// Observation noise variance, standardized value units squared.
    pub noise2: f64,
}

impl RqHyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("amplitude2", self.amplitude2),
            ("alpha", self.alpha),
            ("tau", self.tau),
            ("noise2", self.noise2),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "hyperparameter {name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Rational-quadratic covariance between two (warped) times.
pub fn rq_kernel(t: f64, t_prime: f64, h: &RqHyperparams) -> f64 {
    let d2 = (t - t_prime) * (t - t_prime);
    h.amplitude2 * (1.0 + d2 / (2.0 * h.alpha * h.tau * h.tau)).powf(-h.alpha)
}

/// Diagonal jitter escalation, relative to the signal variance, tried when
/// the plain Cholesky fails (near-duplicate warped times).
const JITTER_STEPS: [f64; 3] = [1e-10, 1e-8, 1e-6];

/// A fitted GP posterior for one series. Immutable after [`fit`]; the
/// Cholesky factor and weight vector are all that is needed for prediction
/// at arbitrary test inputs.
#[derive(Debug, Clone)]
pub struct GpModel {
    train_times: Vec<f64>,
    chol_l: DMatrix<f64>,
    weights: DVector<f64>,
    pub hyper: RqHyperparams,
    pub standardization: Standardization,
    /// Diagonal jitter that was needed to factor the kernel matrix (0 when
    /// the first attempt succeeded).
    pub jitter: f64,
}

/// Fit the exact GP: factor `K + noise2·I` and solve for the weight vector.
pub fn fit(x: &[f64], y: &[f64], h: &RqHyperparams) -> Result<GpModel> {
    h.validate()?;
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Data(format!(
            "fit requires equal-length non-empty inputs, got |X|={} |y|={}",
            x.len(),
            y.len()
        )));
    }
    if x.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Data(
            "fit requires strictly ascending training times".to_string(),
        ));
    }
    let n = x.len();
    let k = DMatrix::from_fn(n, n, |i, j| rq_kernel(x[i], x[j], h));

    let mut chol: Option<Cholesky<f64, nalgebra::Dyn>> = None;
    let mut used_jitter = 0.0;
    for jitter in std::iter::once(0.0).chain(JITTER_STEPS.iter().map(|j| j * h.amplitude2)) {
        let mut a = k.clone();
        for i in 0..n {
            a[(i, i)] += h.noise2 + jitter;
        }
        if let Some(c) = Cholesky::new(a) {
            chol = Some(c);
            used_jitter = jitter;
            break;
        }
    }
    let chol = chol.ok_or_else(|| {
        Error::Numerical(format!(
            "Cholesky factorization failed after jitter escalation (n={n})"
        ))
    })?;

    let weights = chol.solve(&DVector::from_column_slice(y));
    Ok(GpModel {
        train_times: x.to_vec(),
        chol_l: chol.unpack(),
        weights,
        hyper: *h,
        standardization: Standardization { mean: 0.0, std: 1.0 },
        jitter: used_jitter,
    })
}

impl GpModel {
    pub fn train_times(&self) -> &[f64] {
        &self.train_times
    }

    pub fn chol_l(&self) -> &DMatrix<f64> {
        &self.chol_l
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// Predictive mean and variance at each test input, in standardized
    /// units: `mean = k*ᵀ·weights`, `var = k(x*,x*) − vᵀv` with `v = L \ k*`.
    pub fn predict(&self, x_star: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.train_times.len();
        let m = x_star.len();
        let k_star = DMatrix::from_fn(n, m, |i, j| {
            rq_kernel(self.train_times[i], x_star[j], &self.hyper)
        });
        let means: Vec<f64> = (k_star.transpose() * &self.weights).iter().copied().collect();
        let v = self
            .chol_l
            .solve_lower_triangular(&k_star)
            .ok_or_else(|| Error::Numerical("triangular solve failed".to_string()))?;
        let mut variances = Vec::with_capacity(m);
        for j in 0..m {
            let vtv: f64 = v.column(j).iter().map(|e| e * e).sum();
            let var = self.hyper.amplitude2 - vtv;
            if var < -1e-10 {
                return Err(Error::Numerical(format!(
                    "negative predictive variance {var} at test input {}",
                    x_star[j]
                )));
            }
            variances.push(var.max(0.0));
        }
        Ok((means, variances))
    }

    /// Log marginal likelihood of the training targets:
    /// `−½·yᵀ·weights − Σᵢ log Lᵢᵢ − (n/2)·log 2π`.
    pub fn log_marginal_likelihood(&self, y: &[f64]) -> f64 {
        let n = y.len();
        debug_assert_eq!(n, self.train_times.len());
        let fit_term: f64 = y
            .iter()
            .zip(self.weights.iter())
            .map(|(yi, ai)| yi * ai)
            .sum();
        let log_det_half: f64 = (0..n).map(|i| self.chol_l[(i, i)].ln()).sum();
        -0.5 * fit_term - log_det_half - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Hyperparameter search grid; the product of the four axes is evaluated in
/// nested order (amplitude2 outermost, then alpha, tau, noise2), which also
/// defines the first-in-grid-order tie break.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub amplitude2: Vec<f64>,
    pub alpha: Vec<f64>,
    pub tau: Vec<f64>,
    pub noise2: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        let tau = (0..7)
            .map(|i| 0.1 * 300f64.powf(i as f64 / 6.0))
            .collect();
        GridSpec {
            amplitude2: vec![0.25, 0.5, 1.0, 2.0],
            alpha: vec![0.5, 1.0, 2.0, 5.0],
            tau,
            noise2: vec![0.01, 0.05, 0.1, 0.25],
        }
    }
}

impl GridSpec {
    pub fn is_empty(&self) -> bool {
        self.amplitude2.is_empty()
            || self.alpha.is_empty()
            || self.tau.is_empty()
            || self.noise2.is_empty()
    }

    pub fn len(&self) -> usize {
        self.amplitude2.len() * self.alpha.len() * self.tau.len() * self.noise2.len()
    }

    pub fn points(&self) -> Vec<RqHyperparams> {
        let mut out = Vec::with_capacity(self.len());
        for &amplitude2 in &self.amplitude2 {
            for &alpha in &self.alpha {
                for &tau in &self.tau {
                    for &noise2 in &self.noise2 {
                        out.push(RqHyperparams { amplitude2, alpha, tau, noise2 });
                    }
                }
            }
        }
        out
    }
}

/// Sum of per-series log marginal likelihoods at one grid point, or None if
/// any series fails numerically there (which disqualifies the point).
fn grid_objective(train: &[(Vec<f64>, Vec<f64>)], h: &RqHyperparams) -> Option<f64> {
    let mut total = 0.0;
    for (x, y) in train {
        let model = fit(x, y, h).ok()?;
        let lml = model.log_marginal_likelihood(y);
        if !lml.is_finite() {
            return None;
        }
        total += lml;
    }
    Some(total)
}

/// Exhaustive grid search maximizing the summed log marginal likelihood over
/// the training series. Grid points are evaluated in parallel but scored in
/// fixed grid order, so results do not depend on thread count.
pub fn grid_search(
    train: &[(Vec<f64>, Vec<f64>)],
    grid: &GridSpec,
) -> Result<(RqHyperparams, f64)> {
    if grid.is_empty() {
        return Err(Error::Config("hyperparameter grid is empty".to_string()));
    }
    if train.is_empty() {
        return Err(Error::Data("grid search needs at least one series".to_string()));
    }
    let points = grid.points();
    let scores: Vec<Option<f64>> = points
        .par_iter()
        .map(|h| grid_objective(train, h))
        .collect();

    let mut best: Option<(usize, f64)> = None;
    for (i, score) in scores.iter().enumerate() {
        if let Some(s) = score {
            if best.map_or(true, |(_, b)| *s > b) {
                best = Some((i, *s));
            }
        }
    }
    match best {
        Some((i, s)) => Ok((points[i], s)),
        None => Err(Error::Numerical(
            "every grid point failed on at least one series".to_string(),
        )),
    }
}

/// One series after GP interpolation onto a regular grid, padded on both
/// sides, with predictions mapped back to the original value units.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolatedSeries {
    pub hadm_id: u64,
    pub label: u8,
    /// Regular grid on the original (un-warped) day axis, starting at
    /// `−pad·interval`.
    pub grid_times: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

/// Standardize and warp one series, fit the GP, and evaluate it on a regular
/// padded grid laid out on the original day axis. Grid length is
/// `floor(span/interval) + 1 + 2·pad_samples`.
pub fn interpolate(
    series: &LabSeries,
    h: &RqHyperparams,
    warp: &WarpParams,
    interval_days: f64,
    pad_samples: usize,
) -> Result<InterpolatedSeries> {
    if !(interval_days > 0.0 && interval_days.is_finite()) {
        return Err(Error::Config(format!(
            "interval_days must be positive, got {interval_days}"
        )));
    }
    let span = *series.times.last().expect("series is never empty");
    let inside = (span / interval_days).floor() as usize + 1;
    let total = inside + 2 * pad_samples;
    let grid_times: Vec<f64> = (0..total)
        .map(|i| (i as f64 - pad_samples as f64) * interval_days)
        .collect();

    let (y, standardization) = preprocess::standardize(&series.values);
    let time_warp = TimeWarp::new(&series.times, warp)?;
    let x = time_warp.warped_knots().to_vec();

    let mut model = fit(&x, &y, h)
        .map_err(|e| Error::Numerical(format!("series hadm_id={}: {e}", series.hadm_id)))?;
    model.standardization = standardization;

    let x_star: Vec<f64> = grid_times.iter().map(|&t| time_warp.warp(t)).collect();
    let (means_std, vars_std) = model
        .predict(&x_star)
        .map_err(|e| Error::Numerical(format!("series hadm_id={}: {e}", series.hadm_id)))?;
    let (means, variances) =
        preprocess::unstandardize_mean_var(&means_std, &vars_std, &model.standardization)?;

    Ok(InterpolatedSeries {
        hadm_id: series.hadm_id,
        label: series.label,
        grid_times,
        means,
        variances,
    })
}

/// Write interpolated series as CSV rows
/// `hadm_id,label,grid_index,t_days,mean,variance`, ordered by
/// (hadm_id, grid_index).
pub fn write_interpolated_csv(path: &Path, series: &[InterpolatedSeries]) -> Result<()> {
    let mut sorted: Vec<&InterpolatedSeries> = series.iter().collect();
    sorted.sort_by_key(|s| s.hadm_id);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["hadm_id", "label", "grid_index", "t_days", "mean", "variance"])
        .map_err(|e| csv_err(path, e))?;
    for s in sorted {
        for i in 0..s.grid_times.len() {
            w.write_record(&[
                s.hadm_id.to_string(),
                s.label.to_string(),
                i.to_string(),
                s.grid_times[i].to_string(),
                s.means[i].to_string(),
                s.variances[i].to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_interpolated_csv(path: &Path) -> Result<Vec<InterpolatedSeries>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out: Vec<InterpolatedSeries> = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let field = |i: usize| -> Result<&str> {
            record
                .get(i)
                .ok_or_else(|| Error::Data(format!("{}: short row", path.display())))
        };
        let hadm_id: u64 = parse_field(path, field(0)?)?;
        let label: u8 = parse_field(path, field(1)?)?;
        let t: f64 = parse_field(path, field(3)?)?;
        let mean: f64 = parse_field(path, field(4)?)?;
        let var: f64 = parse_field(path, field(5)?)?;
        match out.last_mut() {
            Some(s) if s.hadm_id == hadm_id => {
                s.grid_times.push(t);
                s.means.push(mean);
                s.variances.push(var);
            }
            _ => out.push(InterpolatedSeries {
                hadm_id,
                label,
                grid_times: vec![t],
                means: vec![mean],
                variances: vec![var],
            }),
        }
    }
    Ok(out)
}

/// Flat key-value report with the selected hyperparameters and total LML.
pub fn write_hyperparam_report(path: &Path, h: &RqHyperparams, total_lml: f64) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "amplitude2 = {}", h.amplitude2);
    let _ = writeln!(s, "alpha = {}", h.alpha);
    let _ = writeln!(s, "tau = {}", h.tau);
    let _ = writeln!(s, "noise2 = {}", h.noise2);
    let _ = writeln!(s, "total_lml = {total_lml}");
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_hyperparam_report(path: &Path) -> Result<(RqHyperparams, f64)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut h = RqHyperparams { amplitude2: 0.0, alpha: 0.0, tau: 0.0, noise2: 0.0 };
    let mut lml = f64::NAN;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("{}: malformed line {line:?}", path.display())))?;
        let v: f64 = parse_field(path, value.trim())?;
        match key.trim() {
            "amplitude2" => h.amplitude2 = v,
            "alpha" => h.alpha = v,
            "tau" => h.tau = v,
            "noise2" => h.noise2 = v,
            "total_lml" => lml = v,
            other => {
                return Err(Error::Data(format!(
                    "{}: unknown hyperparameter key {other:?}",
                    path.display()
                )))
            }
        }
    }
    h.validate()?;
    Ok((h, lml))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

fn parse_field<T: std::str::FromStr>(path: &Path, s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse()
        .map_err(|e| Error::Data(format!("{}: cannot parse {s:?}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn h(amplitude2: f64, alpha: f64, tau: f64, noise2: f64) -> RqHyperparams {
        RqHyperparams { amplitude2, alpha, tau, noise2 }
    }

    /// Dense Gauss-Jordan inverse, independent of the Cholesky path.
    fn invert(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut aug: Vec<Vec<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut r = row.clone();
                r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                r
            })
            .collect();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs()))
                .unwrap();
            aug.swap(col, pivot);
            let p = aug[col][col];
            assert!(p.abs() > 1e-300, "singular matrix in oracle");
            for v in aug[col].iter_mut() {
                *v /= p;
            }
            for row in 0..n {
                if row != col {
                    let f = aug[row][col];
                    for k in 0..2 * n {
                        aug[row][k] -= f * aug[col][k];
                    }
                }
            }
        }
        aug.into_iter().map(|r| r[n..].to_vec()).collect()
    }

    /// log-determinant via Gaussian elimination pivots (positive definite input).
    fn log_det(a: &[Vec<f64>]) -> f64 {
        let n = a.len();
        let mut m = a.to_vec();
        let mut acc = 0.0;
        for col in 0..n {
            let p = m[col][col];
            assert!(p > 0.0);
            acc += p.ln();
            for row in col + 1..n {
                let f = m[row][col] / p;
                for k in col..n {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
        acc
    }

    fn kernel_matrix(x: &[f64], hp: &RqHyperparams, noise: bool) -> Vec<Vec<f64>> {
        let n = x.len();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        rq_kernel(x[i], x[j], hp)
                            + if noise && i == j { hp.noise2 } else { 0.0 }
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn kernel_zero_distance_is_amplitude() {
        let hp = h(1.7, 2.0, 0.5, 0.1);
        assert_eq!(rq_kernel(3.2, 3.2, &hp), 1.7);
    }

    #[test]
    fn kernel_half_amplitude_point() {
        // (t−t')² = 2ατ² with α = 1 halves the kernel
        let hp = h(2.0, 1.0, 1.5, 0.1);
        let d = (2.0 * hp.alpha * hp.tau * hp.tau).sqrt();
        assert!((rq_kernel(0.0, d, &hp) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_symmetry() {
        let hp = h(1.0, 0.7, 2.0, 0.1);
        assert_eq!(rq_kernel(1.0, 3.0, &hp), rq_kernel(3.0, 1.0, &hp));
    }

    #[test]
    fn fit_scalar_closed_form() {
        let hp = h(1.5, 1.0, 1.0, 0.5);
        let model = fit(&[0.0], &[2.0], &hp).unwrap();
        let expected = 2.0 / (hp.amplitude2 + hp.noise2);
        assert!((model.weights()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn fit_solves_the_linear_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = [0.0, 0.8, 2.5];
        let y: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let hp = h(1.0, 1.0, 1.0, 0.1);
        let model = fit(&x, &y, &hp).unwrap();
        let a = kernel_matrix(&x, &hp, true);
        // (K + noise²I)·weights ≈ y, checked against the dense matrix
        for i in 0..3 {
            let lhs: f64 = (0..3).map(|j| a[i][j] * model.weights()[j]).sum();
            assert!((lhs - y[i]).abs() < 1e-8 * y[i].abs().max(1.0));
        }
    }

    #[test]
    fn fit_rejects_duplicate_times() {
        let hp = h(1.0, 1.0, 1.0, 0.1);
        assert!(fit(&[0.0, 1.0, 1.0], &[0.0, 1.0, 2.0], &hp).is_err());
    }

    #[test]
    fn predict_near_interpolation_limit() {
        let hp = h(1.0, 1.0, 1.0, 1e-12);
        let x = [0.0, 1.0, 2.0, 3.5];
        let y = [0.3, -1.0, 0.8, 0.1];
        let model = fit(&x, &y, &hp).unwrap();
        let (means, vars) = model.predict(&x).unwrap();
        for i in 0..x.len() {
            assert!((means[i] - y[i]).abs() < 1e-4);
            assert!(vars[i] < 1e-4);
        }
    }

    #[test]
    fn predict_reverts_to_prior_far_from_data() {
        let hp = h(1.3, 1.0, 1.0, 0.05);
        let x = [0.0, 0.5, 1.0];
        let y = [1.0, -1.0, 1.0];
        let model = fit(&x, &y, &hp).unwrap();
        let (means, vars) = model.predict(&[2000.0]).unwrap();
        assert!(means[0].abs() < 1e-3);
        assert!((vars[0] - hp.amplitude2).abs() < 1e-3);
    }

    #[test]
    fn predict_matches_dense_inverse_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = [0.0, 0.7, 1.1, 2.9];
        let y: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
        let hp = h(0.8, 2.0, 0.6, 0.05);
        let model = fit(&x, &y, &hp).unwrap();
        let x_star = [-0.5, 0.2, 1.0, 1.5, 4.0];
        let (means, vars) = model.predict(&x_star).unwrap();

        let inv = invert(&kernel_matrix(&x, &hp, true));
        for (j, &xs) in x_star.iter().enumerate() {
            let k_star: Vec<f64> = x.iter().map(|&xi| rq_kernel(xi, xs, &hp)).collect();
            let mut mean = 0.0;
            let mut quad = 0.0;
            for i in 0..x.len() {
                let mut invy = 0.0;
                let mut invk = 0.0;
                for l in 0..x.len() {
                    invy += inv[i][l] * y[l];
                    invk += inv[i][l] * k_star[l];
                }
                mean += k_star[i] * invy;
                quad += k_star[i] * invk;
            }
            let var = rq_kernel(xs, xs, &hp) - quad;
            assert!((means[j] - mean).abs() <= 1e-8 * mean.abs().max(1.0));
            assert!((vars[j] - var).abs() <= 1e-8 * var.abs().max(1.0));
        }
    }

    #[test]
    fn lml_scalar_closed_form() {
        let hp = h(1.5, 1.0, 1.0, 0.5);
        let model = fit(&[0.0], &[0.0], &hp).unwrap();
        let expected = -0.5 * (hp.amplitude2 + hp.noise2).ln()
            - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((model.log_marginal_likelihood(&[0.0]) - expected).abs() < 1e-12);
    }

    #[test]
    fn lml_matches_determinant_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = [0.0, 1.2, 2.0];
        let y: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hp = h(1.0, 0.5, 0.8, 0.2);
        let model = fit(&x, &y, &hp).unwrap();
        let a = kernel_matrix(&x, &hp, true);
        let inv = invert(&a);
        let mut quad = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                quad += y[i] * inv[i][j] * y[j];
            }
        }
        let expected =
            -0.5 * quad - 0.5 * log_det(&a) - 1.5 * (2.0 * std::f64::consts::PI).ln();
        let got = model.log_marginal_likelihood(&y);
        assert!((got - expected).abs() <= 1e-8 * expected.abs().max(1.0));
    }

    #[test]
    fn lml_increases_toward_noise_only_optimum_on_white_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 30;
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let raw: Vec<f64> = (0..n)
            .map(|_| {
                let (u1, u2): (f64, f64) = (rng.random(), rng.random());
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let (y, _) = crate::preprocess::standardize(&raw);
        // signal variance pinned small so the noise term has to explain the data
        let sweep = [0.1, 0.3, 0.6, 0.9];
        let lmls: Vec<f64> = sweep
            .iter()
            .map(|&noise2| {
                let model = fit(&x, &y, &h(0.01, 1.0, 1.0, noise2)).unwrap();
                model.log_marginal_likelihood(&y)
            })
            .collect();
        for w in lmls.windows(2) {
            assert!(w[1] > w[0], "LML sweep not increasing: {lmls:?}");
        }
    }

    #[test]
    fn grid_search_singleton() {
        let grid = GridSpec {
            amplitude2: vec![1.0],
            alpha: vec![2.0],
            tau: vec![0.5],
            noise2: vec![0.1],
        };
        let train = vec![(vec![0.0, 1.0, 2.0], vec![0.1, -0.2, 0.3])];
        let (best, _) = grid_search(&train, &grid).unwrap();
        assert_eq!(best, h(1.0, 2.0, 0.5, 0.1));
    }

    #[test]
    fn grid_search_invariant_to_series_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut train = Vec::new();
        for _ in 0..6 {
            let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.5).collect();
            let y: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            train.push((x, y));
        }
        let grid = GridSpec {
            amplitude2: vec![0.5, 1.0],
            alpha: vec![1.0, 2.0],
            tau: vec![0.3, 1.0, 3.0],
            noise2: vec![0.05, 0.2],
        };
        let (a, _) = grid_search(&train, &grid).unwrap();
        train.reverse();
        let (b, _) = grid_search(&train, &grid).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn winning_grid_point_beats_every_other() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let train: Vec<(Vec<f64>, Vec<f64>)> = (0..3)
            .map(|_| {
                let x: Vec<f64> = (0..7).map(|i| i as f64 * 0.7).collect();
                let y: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
                (x, y)
            })
            .collect();
        let grid = GridSpec {
            amplitude2: vec![0.5, 1.0],
            alpha: vec![1.0],
            tau: vec![0.3, 1.0],
            noise2: vec![0.05, 0.2],
        };
        let (best, best_score) = grid_search(&train, &grid).unwrap();
        for p in grid.points() {
            let score = grid_objective(&train, &p).unwrap();
            assert!(score <= best_score + 1e-12, "{p:?} beats winner");
        }
        assert!(grid.points().contains(&best));
    }

    fn toy_series(times: Vec<f64>, values: Vec<f64>) -> LabSeries {
        LabSeries {
            hadm_id: 1,
            subject_id: 1,
            times,
            values,
            label: 0,
        }
    }

    #[test]
    fn interpolation_grid_padding_arithmetic() {
        let s = toy_series(vec![0.0, 2.0, 5.0], vec![1.0, 2.0, 3.0]);
        let hp = h(1.0, 1.0, 1.0, 0.1);
        let out = interpolate(&s, &hp, &WarpParams::default(), 0.25, 10).unwrap();
        // 2.5 days of padding on each side at 0.25-day spacing
        assert_eq!(out.grid_times.len(), 21 + 20);
        assert!((out.grid_times[0] + 2.5).abs() < 1e-12);
        assert!((out.grid_times.last().unwrap() - 7.5).abs() < 1e-12);
    }

    #[test]
    fn interpolation_grid_length_without_padding() {
        let s = toy_series(vec![0.0, 0.4, 1.0], vec![1.0, 2.0, 3.0]);
        let hp = h(1.0, 1.0, 1.0, 0.1);
        let out = interpolate(&s, &hp, &WarpParams::default(), 0.25, 0).unwrap();
        assert_eq!(out.grid_times.len(), 5);
        assert_eq!(out.grid_times[0], 0.0);
    }

    #[test]
    fn constant_series_interpolates_flat() {
        let s = toy_series(vec![0.0, 1.0, 3.0], vec![7.0, 7.0, 7.0]);
        let hp = h(1.0, 1.0, 1.0, 0.1);
        let out = interpolate(&s, &hp, &WarpParams::default(), 0.5, 2).unwrap();
        for (t, m) in out.grid_times.iter().zip(&out.means) {
            if *t >= 0.0 && *t <= 3.0 {
                assert!((m - 7.0).abs() < 1e-6, "mean {m} at t={t}");
            }
        }
        assert!(out.variances.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn interpolated_csv_round_trip() {
        let s = toy_series(vec![0.0, 1.0, 2.0], vec![1.0, 4.0, 2.0]);
        let hp = h(1.0, 1.0, 1.0, 0.1);
        let out = vec![interpolate(&s, &hp, &WarpParams::default(), 0.5, 1).unwrap()];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("interp.csv");
        write_interpolated_csv(&path, &out).unwrap();
        let back = read_interpolated_csv(&path).unwrap();
        assert_eq!(back, out);
    }

    #[test]
    fn hyperparam_report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hyper.txt");
        let hp = h(0.5, 2.0, 1.7320508075688772, 0.05);
        write_hyperparam_report(&path, &hp, -123.456).unwrap();
        let (back, lml) = read_hyperparam_report(&path).unwrap();
        assert_eq!(back, hp);
        assert_eq!(lml, -123.456);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cholesky_succeeds_for_valid_hyperparams(
            gaps in proptest::collection::vec(1e-3f64..5.0, 1..12),
            amplitude2 in 0.1f64..4.0,
            alpha in 0.3f64..6.0,
            tau in 0.05f64..20.0,
            noise2 in 1e-8f64..0.5,
        ) {
            let mut x = vec![0.0];
            for g in &gaps {
                x.push(x.last().unwrap() + g);
            }
            let y: Vec<f64> = x.iter().map(|t| (t * 0.7).sin()).collect();
            let hp = h(amplitude2, alpha, tau, noise2);
            prop_assert!(fit(&x, &y, &hp).is_ok());
        }

        #[test]
        fn predictive_variance_bounded(
            gaps in proptest::collection::vec(0.05f64..3.0, 2..10),
            queries in proptest::collection::vec(-5.0f64..25.0, 1..8),
            amplitude2 in 0.2f64..3.0,
            noise2 in 1e-4f64..0.3,
        ) {
            let mut x = vec![0.0];
            for g in &gaps {
                x.push(x.last().unwrap() + g);
            }
            let y: Vec<f64> = x.iter().map(|t| (t * 1.3).cos()).collect();
            let hp = h(amplitude2, 1.0, 1.0, noise2);
            let model = fit(&x, &y, &hp).unwrap();
            let (_, vars) = model.predict(&queries).unwrap();
            for v in vars {
                prop_assert!(v >= 0.0);
                prop_assert!(v <= amplitude2 + noise2 + 1e-9);
            }
        }

        #[test]
        fn predictions_invariant_to_time_shift(
            shift in -50.0f64..50.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..6).map(|i| i as f64 * 0.8).collect();
            let y: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let hp = h(1.0, 1.5, 1.2, 0.05);
            let q = [0.3, 2.1, 7.0];

            let base = fit(&x, &y, &hp).unwrap();
            let (m0, v0) = base.predict(&q).unwrap();

            let xs: Vec<f64> = x.iter().map(|t| t + shift).collect();
            let qs: Vec<f64> = q.iter().map(|t| t + shift).collect();
            let shifted = fit(&xs, &y, &hp).unwrap();
            let (m1, v1) = shifted.predict(&qs).unwrap();

            for i in 0..q.len() {
                prop_assert!((m0[i] - m1[i]).abs() < 1e-9);
                prop_assert!((v0[i] - v1[i]).abs() < 1e-9);
            }
        }
    }
}
