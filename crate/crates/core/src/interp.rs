//! Piecewise-linear baseline for equalizing series onto the in-range grid.

use crate::error::{Error, Result};
use crate::gpr::{uniform_grid, Regime, Resampled, GRID_LEN};
use crate::timeseries::PatientSeries;

/// Piecewise-linear interpolant of `series` at `age`, or `None` outside the
/// observed range.
pub fn linear_at(series: &PatientSeries, age: f64) -> Option<f64> {
    let obs = series.observations();
    if age < series.min_age() || age > series.max_age() {
        return None;
    }
    // First knot with knot.age >= age.
    let k = obs.partition_point(|o| o.age < age);
    let right = obs[k];
    if right.age == age || k == 0 {
        return Some(right.egfr);
    }
    let left = obs[k - 1];
    let t = (age - left.age) / (right.age - left.age);
    let v = left.egfr + (right.egfr - left.egfr) * t;
    let (lo, hi) = if left.egfr <= right.egfr {
        (left.egfr, right.egfr)
    } else {
        (right.egfr, left.egfr)
    };
    Some(v.clamp(lo, hi))
}

/// Resample `series` onto `GRID_LEN` evenly spaced ages spanning its own
/// observed range. Never extrapolates.
pub fn linear_resample(series: &PatientSeries) -> Result<Resampled> {
    if !series.has_range() {
        return Err(Error::DegenerateRange(series.id().to_string()));
    }
    let grid = uniform_grid(series.min_age(), series.max_age());
    let values = grid
        .iter()
        .map(|&a| linear_at(series, a).expect("grid lies within the observed range"))
        .collect();
    Ok(Resampled {
        grid,
        values,
        variances: vec![0.0; GRID_LEN],
        regime: Regime::LinearInRange,
    })
}
