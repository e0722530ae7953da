//! Per-series conditioning before GP regression: a monotone time warp that
//! compresses long inter-sample gaps and stretches short ones, and value
//! standardization (reversible, with the variance rescaled on the way back).

use crate::error::{Error, Result};

/// Parameters of the gap warp `d' = d^(1/a) + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpParams {
    /// Gap exponent, `a >= 1`. `a = 1` together with `b = 0` is the identity.
    pub a: f64,
    /// Additive offset per gap in warped days, `b >= 0`.
    pub b: f64,
}

impl Default for WarpParams {
    fn default() -> Self {
        WarpParams { a: 3.0, b: 0.0 }
    }
}

impl WarpParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.a >= 1.0 && self.a.is_finite()) {
            return Err(Error::Config(format!("warp exponent a must be >= 1, got {}", self.a)));
        }
        if !(self.b >= 0.0 && self.b.is_finite()) {
            return Err(Error::Config(format!("warp offset b must be >= 0, got {}", self.b)));
        }
        Ok(())
    }
}

/// Mean/std pair saved when a series is standardized so the transform can be
/// reversed after interpolation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

fn check_ascending(times: &[f64]) -> Result<()> {
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Data(
            "times must be strictly ascending".to_string(),
        ));
    }
    Ok(())
}

/// Warp a strictly ascending, zero-based time vector gap by gap.
///
/// Each inter-sample distance `d` becomes `d^(1/a) + b`; the output starts at
/// zero and stays strictly ascending.
pub fn warp_times(times: &[f64], params: &WarpParams) -> Result<Vec<f64>> {
    params.validate()?;
    check_ascending(times)?;
    if let Some(&first) = times.first() {
        if first != 0.0 {
            return Err(Error::Data(format!(
                "times must start at 0, got {first}"
            )));
        }
    }
    let mut out = Vec::with_capacity(times.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in times.windows(2) {
        acc += warp_gap(w[1] - w[0], params);
        out.push(acc);
    }
    if out.len() > 1 {
        out[0] = 0.0;
    }
    Ok(out)
}

fn warp_gap(d: f64, params: &WarpParams) -> f64 {
    root(d, params.a) + params.b
}

/// `d^(1/a)`, using the exactly rounded sqrt/cbrt for the common exponents.
fn root(d: f64, a: f64) -> f64 {
    if a == 1.0 {
        d
    } else if a == 2.0 {
        d.sqrt()
    } else if a == 3.0 {
        d.cbrt()
    } else {
        d.powf(1.0 / a)
    }
}

/// Continuous monotone extension of the gap warp, used to map interpolation
/// grid times (including padding outside the observed span) onto the same
/// warped axis as the training times.
///
/// Inside a training gap the power law is applied to the distance from the
/// gap's left knot, with the `b` offset accrued linearly across the gap so
/// the knots map exactly to their [`warp_times`] images. Beyond the first or
/// last sample the power law is applied to the distance from the nearest
/// knot, with `b` accrued at the series' mean per-gap rate.
#[derive(Debug, Clone)]
pub struct TimeWarp {
    knots: Vec<f64>,
    warped: Vec<f64>,
    params: WarpParams,
    edge_b_rate: f64,
}

impl TimeWarp {
    pub fn new(times: &[f64], params: &WarpParams) -> Result<Self> {
        let warped = warp_times(times, &params.clone())?;
        let span = times.last().copied().unwrap_or(0.0);
        let edge_b_rate = if times.len() >= 2 && span > 0.0 {
            (times.len() - 1) as f64 / span
        } else {
            0.0
        };
        Ok(TimeWarp {
            knots: times.to_vec(),
            warped,
            params: *params,
            edge_b_rate,
        })
    }

    /// Warped images of the training times themselves.
    pub fn warped_knots(&self) -> &[f64] {
        &self.warped
    }

    pub fn warp(&self, t: f64) -> f64 {
        let first = self.knots[0];
        let last = *self.knots.last().unwrap();
        if t <= first {
            let d = first - t;
            return self.warped[0] - root(d, self.params.a) - self.params.b * d * self.edge_b_rate;
        }
        if t >= last {
            let d = t - last;
            return self.warped.last().unwrap()
                + root(d, self.params.a)
                + self.params.b * d * self.edge_b_rate;
        }
        // partition_point returns the first knot > t, so i >= 1 here
        let i = self.knots.partition_point(|&k| k <= t) - 1;
        let d = t - self.knots[i];
        let gap = self.knots[i + 1] - self.knots[i];
        self.warped[i] + root(d, self.params.a) + self.params.b * d / gap
    }
}

/// Shift/scale a value vector to sample mean 0 and population standard
/// deviation 1, returning the constants needed to undo it.
///
/// An all-equal series has zero variance; its std is stored as 1 so the
/// transform degenerates to a pure shift.
pub fn standardize(values: &[f64]) -> (Vec<f64>, Standardization) {
    assert!(!values.is_empty(), "standardize requires at least one value");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let degenerate = values.iter().all(|&v| v == values[0]);
    let std = if degenerate || var == 0.0 { 1.0 } else { var.sqrt() };
    let standardized = values.iter().map(|v| (v - mean) / std).collect();
    (standardized, Standardization { mean, std })
}

/// Reverse [`standardize`] on a value vector.
pub fn unstandardize(values: &[f64], s: &Standardization) -> Vec<f64> {
    values.iter().map(|v| v * s.std + s.mean).collect()
}

/// Map predictive means and variances from standardized units back to the
/// original units: the mean is an affine transform, the variance scales by
/// the squared std.
pub fn unstandardize_mean_var(
    means: &[f64],
    variances: &[f64],
    s: &Standardization,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if let Some(v) = variances.iter().find(|v| **v < 0.0) {
        return Err(Error::Data(format!("negative variance {v}")));
    }
    let m = means.iter().map(|m| m * s.std + s.mean).collect();
    let v = variances.iter().map(|v| v * s.std * s.std).collect();
    Ok((m, v))
}
