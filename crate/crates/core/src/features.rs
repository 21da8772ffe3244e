//! Derived series statistics and the six featurization variants.
//!
//! Combined variants place the four statistics first, followed by the 50
//! resampled values: `[da, dg, mu_a, mu_g, v0, .., v49]`. Posterior
//! variances never enter a feature vector.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpr::{Regime, Resampled, GRID_LEN};
use crate::timeseries::PatientSeries;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedStats {
    /// Observed age span, years.
    pub delta_a: f64,
    /// eGFR value range.
    pub delta_g: f64,
    /// Mean measurement age.
    pub mu_a: f64,
    /// Mean eGFR.
    pub mu_g: f64,
}

impl DerivedStats {
    pub fn to_array(&self) -> [f64; 4] {
        [self.delta_a, self.delta_g, self.mu_a, self.mu_g]
    }
}

pub fn derive_stats(series: &PatientSeries) -> DerivedStats {
    let obs = series.observations();
    let n = obs.len() as f64;
    let (min_g, max_g) = obs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), o| (lo.min(o.egfr), hi.max(o.egfr)));
    let mu_a = obs.iter().map(|o| o.age).sum::<f64>() / n;
    let mu_g = obs.iter().map(|o| o.egfr).sum::<f64>() / n;
    DerivedStats {
        delta_a: series.max_age() - series.min_age(),
        delta_g: max_g - min_g,
        mu_a: mu_a.clamp(series.min_age(), series.max_age()),
        mu_g: mu_g.clamp(min_g, max_g),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "stats4")]
    Stats4,
    #[serde(rename = "gpr_30_90")]
    Gpr30To90,
    #[serde(rename = "gpr_in_range")]
    GprInRange,
    #[serde(rename = "stats_plus_gpr")]
    StatsPlusGpr,
    #[serde(rename = "interp")]
    Interp,
    #[serde(rename = "stats_plus_interp")]
    StatsPlusInterp,
}

impl Variant {
    /// Table order: 30-90 GPR, statistics, GPR, statistics + GPR,
    /// interpolation, statistics + interpolation.
    pub const ALL: [Variant; 6] = [
        Variant::Gpr30To90,
        Variant::Stats4,
        Variant::GprInRange,
        Variant::StatsPlusGpr,
        Variant::Interp,
        Variant::StatsPlusInterp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Stats4 => "stats4",
            Variant::Gpr30To90 => "gpr_30_90",
            Variant::GprInRange => "gpr_in_range",
            Variant::StatsPlusGpr => "stats_plus_gpr",
            Variant::Interp => "interp",
            Variant::StatsPlusInterp => "stats_plus_interp",
        }
    }

    pub fn len(self) -> usize {
        match self {
            Variant::Stats4 => 4,
            Variant::Gpr30To90 | Variant::GprInRange | Variant::Interp => GRID_LEN,
            Variant::StatsPlusGpr | Variant::StatsPlusInterp => 4 + GRID_LEN,
        }
    }

    pub fn uses_stats(self) -> bool {
        matches!(self, Variant::Stats4 | Variant::StatsPlusGpr | Variant::StatsPlusInterp)
    }

    /// The resampling regime this variant consumes, if any.
    pub fn regime(self) -> Option<Regime> {
        match self {
            Variant::Stats4 => None,
            Variant::Gpr30To90 => Some(Regime::Fixed30To90),
            Variant::GprInRange | Variant::StatsPlusGpr => Some(Regime::InRange),
            Variant::Interp | Variant::StatsPlusInterp => Some(Regime::LinearInRange),
        }
    }

    /// Whether the variant needs a non-degenerate observed age range.
    pub fn needs_range(self) -> bool {
        matches!(self.regime(), Some(Regime::InRange | Regime::LinearInRange))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Ok(match norm.as_str() {
            "stats4" | "stats" | "statistics" => Variant::Stats4,
            "gpr_30_90" | "gpr_fixed" | "fixed" => Variant::Gpr30To90,
            "gpr_in_range" | "gpr" => Variant::GprInRange,
            "stats_plus_gpr" | "stats_gpr" => Variant::StatsPlusGpr,
            "interp" | "linear" | "interpolation" => Variant::Interp,
            "stats_plus_interp" | "stats_interp" => Variant::StatsPlusInterp,
            _ => {
                return Err(Error::Unknown {
                    kind: "variant",
                    value: s.to_string(),
                })
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub id: String,
    pub variant: Variant,
    pub values: Vec<f64>,
}

pub fn assemble(
    id: &str,
    variant: Variant,
    stats: Option<&DerivedStats>,
    resampled: Option<&Resampled>,
) -> Result<FeatureVector> {
    let missing = |what: &str| Error::MissingInput {
        variant: variant.to_string(),
        what: what.to_string(),
    };
    let mut values = Vec::with_capacity(variant.len());
    if variant.uses_stats() {
        values.extend(stats.ok_or_else(|| missing("derived statistics"))?.to_array());
    }
    if let Some(regime) = variant.regime() {
        let r = resampled.ok_or_else(|| missing("resampled vector"))?;
        if r.regime != regime {
            return Err(Error::RegimeMismatch {
                variant: variant.to_string(),
                got: r.regime.as_str().to_string(),
            });
        }
        if r.values.len() != GRID_LEN {
            return Err(Error::DimensionMismatch {
                expected: GRID_LEN,
                got: r.values.len(),
            });
        }
        values.extend_from_slice(&r.values);
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidSeries(format!("non-finite feature {bad} for {id}")));
    }
    debug_assert_eq!(values.len(), variant.len());
    Ok(FeatureVector {
        id: id.to_string(),
        variant,
        values,
    })
}

/// Feature matrix CSV: `patient_id,variant,f0,f1,...`.
pub fn write_feature_matrix<W: Write>(mut w: W, rows: &[FeatureVector], comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    let width = rows.first().map_or(0, |r| r.values.len());
    let mut writer = csv::Writer::from_writer(w);
    let mut header = vec!["patient_id".to_string(), "variant".to_string()];
    header.extend((0..width).map(|i| format!("f{i}")));
    writer.write_record(&header)?;
    for r in rows {
        if r.values.len() != width {
            return Err(Error::DimensionMismatch {
                expected: width,
                got: r.values.len(),
            });
        }
        let mut rec = vec![r.id.clone(), r.variant.to_string()];
        rec.extend(r.values.iter().map(f64::to_string));
        writer.write_record(&rec)?;
    }
    writer.flush()?;
    Ok(())
}

/// Pearson correlation of two equal-length samples.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpr::uniform_grid;
    use crate::timeseries::Observation;
    use proptest::prelude::*;

    fn series(pts: &[(f64, f64)]) -> PatientSeries {
        PatientSeries::new(
            "p",
            pts.iter().map(|&(a, g)| Observation::new(a, g).unwrap()).collect(),
        )
        .unwrap()
    }

    fn resampled(regime: Regime) -> Resampled {
        Resampled {
            grid: uniform_grid(60.0, 70.0),
            values: (0..GRID_LEN).map(|i| 80.0 - i as f64 * 0.4).collect(),
            variances: vec![1.0; GRID_LEN],
            regime,
        }
    }

    #[test]
    fn two_point_stats() {
        let st = derive_stats(&series(&[(60.0, 80.0), (70.0, 60.0)]));
        assert_eq!(st, DerivedStats { delta_a: 10.0, delta_g: 20.0, mu_a: 65.0, mu_g: 70.0 });
        let fv = assemble("p", Variant::Stats4, Some(&st), None).unwrap();
        assert_eq!(fv.values, [10.0, 20.0, 65.0, 70.0]);
    }

    #[test]
    fn single_point_stats() {
        let st = derive_stats(&series(&[(62.0, 75.0)]));
        assert_eq!(st, DerivedStats { delta_a: 0.0, delta_g: 0.0, mu_a: 62.0, mu_g: 75.0 });
    }

    #[test]
    fn stats_match_brute_force_recount() {
        let pts = [(61.3, 44.0), (62.9, 51.5), (60.2, 48.25), (66.0, 39.0), (64.4, 58.0), (65.1, 47.0), (63.7, 50.0)];
        let st = derive_stats(&series(&pts));
        // Independent recount over the unsorted input.
        let mut max_a = f64::MIN;
        let mut min_a = f64::MAX;
        let mut max_g = f64::MIN;
        let mut min_g = f64::MAX;
        let mut sa = 0.0;
        let mut sg = 0.0;
        for (a, g) in pts {
            max_a = max_a.max(a);
            min_a = min_a.min(a);
            max_g = max_g.max(g);
            min_g = min_g.min(g);
        }
        let mut sorted = pts.to_vec();
        sorted.sort_by(|x, y| x.0.total_cmp(&y.0));
        for (a, g) in &sorted {
            sa += a;
            sg += g;
        }
        assert_eq!(st.delta_a, max_a - min_a);
        assert_eq!(st.delta_g, max_g - min_g);
        assert_eq!(st.mu_a, sa / 7.0);
        assert_eq!(st.mu_g, sg / 7.0);
    }

    #[test]
    fn combined_variant_puts_stats_first() {
        let st = derive_stats(&series(&[(60.0, 80.0), (70.0, 60.0)]));
        let r = resampled(Regime::InRange);
        let fv = assemble("p", Variant::StatsPlusGpr, Some(&st), Some(&r)).unwrap();
        assert_eq!(fv.values.len(), 54);
        assert_eq!(&fv.values[..4], &st.to_array());
        assert_eq!(&fv.values[4..], r.values.as_slice());

        let fv = assemble("p", Variant::GprInRange, None, Some(&r)).unwrap();
        assert_eq!(fv.values, r.values);
        assert!(fv.values.iter().all(|v| !r.variances.contains(v)));
    }

    #[test]
    fn assemble_errors() {
        let st = derive_stats(&series(&[(60.0, 80.0), (70.0, 60.0)]));
        assert!(matches!(
            assemble("p", Variant::GprInRange, Some(&st), None),
            Err(Error::MissingInput { .. })
        ));
        assert!(matches!(
            assemble("p", Variant::StatsPlusInterp, None, Some(&resampled(Regime::LinearInRange))),
            Err(Error::MissingInput { .. })
        ));
        assert!(matches!(
            assemble("p", Variant::GprInRange, None, Some(&resampled(Regime::LinearInRange))),
            Err(Error::RegimeMismatch { .. })
        ));
        assert!(matches!(
            assemble("p", Variant::Gpr30To90, None, Some(&resampled(Regime::InRange))),
            Err(Error::RegimeMismatch { .. })
        ));
    }

    #[test]
    fn variant_lengths_and_names() {
        let lens: Vec<_> = Variant::ALL.iter().map(|v| v.len()).collect();
        assert_eq!(lens, [50, 4, 50, 54, 50, 54]);
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("gpr-in-range".parse::<Variant>().unwrap(), Variant::GprInRange);
        assert_eq!("gpr-fixed".parse::<Variant>().unwrap(), Variant::Gpr30To90);
        assert!("spline".parse::<Variant>().is_err());
    }

    #[test]
    fn feature_matrix_csv() {
        let st = derive_stats(&series(&[(60.0, 80.0), (70.0, 60.0)]));
        let fv = assemble("p1", Variant::Stats4, Some(&st), None).unwrap();
        let mut buf = Vec::new();
        write_feature_matrix(&mut buf, &[fv], None).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "patient_id,variant,f0,f1,f2,f3\np1,stats4,10,20,65,70\n"
        );
    }

    #[test]
    fn pearson_signs() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn stats_invariants_hold(pts in proptest::collection::vec((30.0f64..95.0, 5.0f64..130.0), 1..30)) {
            let s = PatientSeries::new(
                "p",
                pts.iter().map(|&(a, g)| Observation::new(a, g).unwrap()).collect(),
            ).unwrap();
            let st = derive_stats(&s);
            let vals = s.values();
            prop_assert!(st.delta_a >= 0.0 && st.delta_g >= 0.0);
            prop_assert!(st.mu_a >= s.min_age() && st.mu_a <= s.max_age());
            prop_assert!(vals.iter().any(|v| *v <= st.mu_g) && vals.iter().any(|v| *v >= st.mu_g));
            let a = assemble("p", Variant::Stats4, Some(&st), None).unwrap();
            let b = assemble("p", Variant::Stats4, Some(&st), None).unwrap();
            prop_assert_eq!(a.values.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                            b.values.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }
}
