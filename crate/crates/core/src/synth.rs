//! Seeded synthetic cohorts with stable, linear-decline and step-change
//! eGFR trends, plus five noisy expert annotations per patient.
//!
//! Every distribution below is a calibration knob, not a measured fact.
//! Defaults target 488 patients, 260 stable, about 22 measurements each,
//! mostly aged 60-90 with eGFR 25-95.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp, Geometric, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::timeseries::{LabelSet, Observation, PatientSeries, TrendAnnotation, N_EXPERTS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n_patients: usize,
    pub stable_fraction: f64,
    pub seed: u64,

    /// Measurements per patient: `min_measurements` + geometric extra with
    /// overall mean `mean_measurements`.
    pub min_measurements: usize,
    pub mean_measurements: f64,

    pub start_age_mean: f64,
    pub start_age_sd: f64,
    pub start_age_range: (f64, f64),
    /// Observation window length, exponential with this mean, then clamped.
    pub span_mean: f64,
    pub span_range: (f64, f64),

    /// Baseline eGFR, uniform.
    pub level_range: (f64, f64),
    /// Shift of the baseline per year of window start above `start_age_mean`.
    pub level_age_slope: f64,
    pub noise_sd: f64,

    /// Share of unstable patients with a linear decline; the rest step down.
    pub linear_fraction: f64,
    /// Decline rate, eGFR units per year (negative).
    pub linear_slope: (f64, f64),
    /// When set, linear declines lose this total amount over the window
    /// instead of following `linear_slope`.
    pub linear_drop: Option<(f64, f64)>,
    pub step_drop: (f64, f64),
    /// Share of an unstable patient's total drop that sits above the
    /// baseline level: 0 starts the decline at the baseline, 0.5 centres it.
    pub decline_anchor: f64,
    pub egfr_clamp: (f64, f64),

    /// Per-expert probability of flipping the stable/unstable call.
    pub expert_flip: [f64; N_EXPERTS],
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_patients: 488,
            stable_fraction: 0.533,
            seed: 0,
            min_measurements: 5,
            mean_measurements: 10873.0 / 488.0,
            start_age_mean: 65.0,
            start_age_sd: 8.0,
            start_age_range: (30.0, 88.0),
            span_mean: 10.0,
            span_range: (3.0, 20.0),
            level_range: (40.0, 90.0),
            level_age_slope: -0.8,
            noise_sd: 8.0,
            linear_fraction: 0.5,
            linear_slope: (-8.0, -3.0),
            linear_drop: None,
            step_drop: (30.0, 60.0),
            decline_anchor: 0.4,
            egfr_clamp: (5.0, 130.0),
            expert_flip: [0.08, 0.02, 0.02, 0.02, 0.02],
        }
    }
}

impl CohortConfig {
    /// Noise-free cohort whose classes are separable by construction: stable
    /// patients sit at 80, unstable patients decline linearly by 30.
    pub fn separable(seed: u64) -> Self {
        Self {
            seed,
            level_range: (80.0, 80.0),
            level_age_slope: 0.0,
            noise_sd: 0.0,
            linear_fraction: 1.0,
            linear_drop: Some((30.0, 30.0)),
            expert_flip: [0.0; N_EXPERTS],
            ..Self::default()
        }
    }

    pub fn n_stable(&self) -> usize {
        (self.n_patients as f64 * self.stable_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let ordered = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 <= r.1;
        if self.n_patients < 10 {
            return bad(format!("n_patients must be at least 10, got {}", self.n_patients));
        }
        for (name, p) in [
            ("stable_fraction", self.stable_fraction),
            ("linear_fraction", self.linear_fraction),
            ("decline_anchor", self.decline_anchor),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if let Some(p) = self.expert_flip.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return bad(format!("expert flip probability must lie in [0, 1], got {p}"));
        }
        if self.min_measurements < 1 || !(self.mean_measurements >= self.min_measurements as f64) {
            return bad("mean_measurements must be at least min_measurements >= 1".into());
        }
        if !(self.noise_sd >= 0.0) || !(self.start_age_sd >= 0.0) || !(self.span_mean > 0.0) {
            return bad("noise_sd and start_age_sd must be non-negative, span_mean positive".into());
        }
        let ranges = [
            ("start_age_range", self.start_age_range),
            ("span_range", self.span_range),
            ("level_range", self.level_range),
            ("linear_slope", self.linear_slope),
            ("step_drop", self.step_drop),
            ("egfr_clamp", self.egfr_clamp),
        ];
        for (name, r) in ranges.into_iter().chain(self.linear_drop.map(|d| ("linear_drop", d))) {
            if !ordered(r) {
                return bad(format!("{name} must be an ordered finite range, got {r:?}"));
            }
        }
        if self.start_age_range.0 <= 0.0 || self.start_age_range.1 + self.span_range.1 >= 120.0 {
            return bad("age windows must stay within (0, 120)".into());
        }
        if self.span_range.0 <= 0.0 {
            return bad("span_range must be positive".into());
        }
        if self.egfr_clamp.0 <= 0.0 {
            return bad("egfr_clamp lower bound must be positive".into());
        }
        Ok(())
    }
}

/// A generated cohort. `trends` holds each patient's true trend family.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub series: Vec<PatientSeries>,
    pub labels: BTreeMap<String, LabelSet>,
    pub trends: BTreeMap<String, TrendAnnotation>,
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn patient_id(i: usize) -> String {
    format!("p{:04}", i + 1)
}

pub fn generate_cohort(config: &CohortConfig) -> Result<Cohort> {
    config.validate()?;
    let n = config.n_patients;
    let mut stable_flags: Vec<bool> = (0..n).map(|i| i < config.n_stable()).collect();
    stable_flags.shuffle(&mut seed::substream(config.seed, "classes"));

    let extra_mean = config.mean_measurements - config.min_measurements as f64;
    let extra = Geometric::new(1.0 / (1.0 + extra_mean)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let start_age = Normal::new(config.start_age_mean, config.start_age_sd)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let span = Exp::new(1.0 / config.span_mean).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let noise = Normal::new(0.0, config.noise_sd).map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let mut cohort = Cohort {
        series: Vec::with_capacity(n),
        labels: BTreeMap::new(),
        trends: BTreeMap::new(),
    };
    for (i, stable) in stable_flags.into_iter().enumerate() {
        let mut rng = seed::indexed_substream(config.seed, "patient", i as u64);
        let id = patient_id(i);

        let trend = if stable {
            TrendAnnotation::Stable
        } else if rng.random_bool(config.linear_fraction) {
            TrendAnnotation::Linear
        } else {
            TrendAnnotation::Step
        };

        let start = start_age
            .sample(&mut rng)
            .clamp(config.start_age_range.0, config.start_age_range.1);
        let width = span.sample(&mut rng).clamp(config.span_range.0, config.span_range.1);
        let count = config.min_measurements + extra.sample(&mut rng) as usize;
        let mut ages: Vec<f64> = (0..count).map(|_| start + width * rng.random::<f64>()).collect();
        ages.sort_by(f64::total_cmp);

        let level = uniform(&mut rng, config.level_range)
            + config.level_age_slope * (start - config.start_age_mean);
        let trend_at: Box<dyn Fn(f64) -> f64> = match trend {
            TrendAnnotation::Stable => Box::new(move |_| level),
            TrendAnnotation::Linear => {
                let slope = match config.linear_drop {
                    Some(d) => -uniform(&mut rng, d) / width,
                    None => uniform(&mut rng, config.linear_slope),
                };
                let top = level - slope * width * config.decline_anchor;
                Box::new(move |a| top + slope * (a - start))
            }
            TrendAnnotation::Step => {
                let drop = uniform(&mut rng, config.step_drop);
                let change = start + width * rng.random::<f64>();
                let top = level + drop * config.decline_anchor;
                Box::new(move |a| if a >= change { top - drop } else { top })
            }
        };
        let observations = ages
            .iter()
            .map(|&a| {
                let v = (trend_at(a) + noise.sample(&mut rng)).clamp(config.egfr_clamp.0, config.egfr_clamp.1);
                Observation::new(a, v)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut annotations = [trend; N_EXPERTS];
        for (slot, p) in annotations.iter_mut().zip(config.expert_flip) {
            if rng.random_bool(p) {
                *slot = match trend {
                    TrendAnnotation::Stable if rng.random_bool(0.5) => TrendAnnotation::Linear,
                    TrendAnnotation::Stable => TrendAnnotation::Step,
                    _ => TrendAnnotation::Stable,
                };
            }
        }

        cohort.series.push(PatientSeries::new(id.clone(), observations)?);
        cohort.labels.insert(id.clone(), LabelSet::new(id.clone(), annotations));
        cohort.trends.insert(id, trend);
    }
    Ok(cohort)
}
