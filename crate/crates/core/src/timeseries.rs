//! Per-patient observation series and expert trend labels.
//!
//! Series CSV: `patient_id,age_years,egfr`, rows in any order. Labels CSV:
//! `patient_id,e1,e2,e3,e4,e5` with tokens `stable|linear|step`. Lines
//! starting with `#` are comments in both formats.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SERIES_HEADER: [&str; 3] = ["patient_id", "age_years", "egfr"];
pub const LABELS_HEADER: [&str; 6] = ["patient_id", "e1", "e2", "e3", "e4", "e5"];
pub const N_EXPERTS: usize = 5;

/// One eGFR measurement at a given age (fractional years).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub age: f64,
    pub egfr: f64,
}

impl Observation {
    pub fn new(age: f64, egfr: f64) -> Result<Self> {
        check_age(age).map_err(Error::InvalidObservation)?;
        check_egfr(egfr).map_err(Error::InvalidObservation)?;
        Ok(Self { age, egfr })
    }
}

fn check_age(age: f64) -> std::result::Result<(), String> {
    if !age.is_finite() || age <= 0.0 || age >= 120.0 {
        return Err(format!("age out of range ({age})"));
    }
    Ok(())
}

fn check_egfr(egfr: f64) -> std::result::Result<(), String> {
    if !egfr.is_finite() || egfr <= 0.0 {
        return Err(format!("egfr out of range ({egfr})"));
    }
    Ok(())
}

/// A patient's observations, sorted by strictly increasing age.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientSeries {
    id: String,
    observations: Vec<Observation>,
}

impl PatientSeries {
    /// Build a series from observations in any order. Observations sharing
    /// an age are merged into one whose eGFR is their arithmetic mean.
    pub fn new(id: impl Into<String>, mut observations: Vec<Observation>) -> Result<Self> {
        let id = id.into();
        if observations.is_empty() {
            return Err(Error::InvalidSeries(format!("series {id} has no observations")));
        }
        for o in &observations {
            check_age(o.age).map_err(Error::InvalidObservation)?;
            check_egfr(o.egfr).map_err(Error::InvalidObservation)?;
        }
        // Sorting on both keys makes the merged mean independent of input order.
        observations.sort_by(|a, b| a.age.total_cmp(&b.age).then(a.egfr.total_cmp(&b.egfr)));

        let mut merged: Vec<Observation> = Vec::with_capacity(observations.len());
        let mut start = 0;
        while start < observations.len() {
            let age = observations[start].age;
            let end = start
                + observations[start..]
                    .iter()
                    .take_while(|o| o.age == age)
                    .count();
            let group = &observations[start..end];
            let egfr = group.iter().map(|o| o.egfr).sum::<f64>() / group.len() as f64;
            merged.push(Observation { age, egfr });
            start = end;
        }
        Ok(Self {
            id,
            observations: merged,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn ages(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.age).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.egfr).collect()
    }

    pub fn min_age(&self) -> f64 {
        self.observations[0].age
    }

    pub fn max_age(&self) -> f64 {
        self.observations[self.observations.len() - 1].age
    }

    /// True when the series spans a non-empty age interval.
    pub fn has_range(&self) -> bool {
        self.observations.len() >= 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrendAnnotation {
    Stable,
    Linear,
    Step,
}

impl TrendAnnotation {
    pub fn as_str(self) -> &'static str {
        match self {
            TrendAnnotation::Stable => "stable",
            TrendAnnotation::Linear => "linear",
            TrendAnnotation::Step => "step",
        }
    }

    pub fn binarize(self) -> BinaryLabel {
        binarize(self)
    }
}

impl fmt::Display for TrendAnnotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrendAnnotation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "stable" => Ok(TrendAnnotation::Stable),
            "linear" => Ok(TrendAnnotation::Linear),
            "step" => Ok(TrendAnnotation::Step),
            _ => Err(Error::Unknown {
                kind: "annotation token",
                value: s.to_string(),
            }),
        }
    }
}

/// Stable is the positive class (y = 1); unstable is y = 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryLabel {
    Stable,
    Unstable,
}

impl BinaryLabel {
    pub fn y(self) -> u8 {
        match self {
            BinaryLabel::Stable => 1,
            BinaryLabel::Unstable => 0,
        }
    }

    /// +1 for stable, -1 for unstable.
    pub fn sign(self) -> f64 {
        match self {
            BinaryLabel::Stable => 1.0,
            BinaryLabel::Unstable => -1.0,
        }
    }

    pub fn from_sign(v: f64) -> Self {
        if v >= 0.0 {
            BinaryLabel::Stable
        } else {
            BinaryLabel::Unstable
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            BinaryLabel::Stable => BinaryLabel::Unstable,
            BinaryLabel::Unstable => BinaryLabel::Stable,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BinaryLabel::Stable => "stable",
            BinaryLabel::Unstable => "unstable",
        }
    }
}

impl fmt::Display for BinaryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Linear and step-change trends are both unstable.
pub fn binarize(a: TrendAnnotation) -> BinaryLabel {
    match a {
        TrendAnnotation::Stable => BinaryLabel::Stable,
        TrendAnnotation::Linear | TrendAnnotation::Step => BinaryLabel::Unstable,
    }
}

/// Five expert annotations for one patient, ordered E1..E5.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub id: String,
    pub annotations: [TrendAnnotation; N_EXPERTS],
}

impl LabelSet {
    pub fn new(id: impl Into<String>, annotations: [TrendAnnotation; N_EXPERTS]) -> Self {
        Self {
            id: id.into(),
            annotations,
        }
    }

    pub fn consensus(&self) -> BinaryLabel {
        consensus(self)
    }
}

/// Majority of the five binarized votes. Five binary voters cannot tie.
pub fn consensus(ls: &LabelSet) -> BinaryLabel {
    let stable = ls
        .annotations
        .iter()
        .filter(|a| binarize(**a) == BinaryLabel::Stable)
        .count();
    if 2 * stable > N_EXPERTS {
        BinaryLabel::Stable
    } else {
        BinaryLabel::Unstable
    }
}

fn csv_reader<R: Read>(rdr: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(rdr)
}

fn check_header(path: &Path, found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let ok = found.len() == expected.len()
        && found
            .iter()
            .zip(expected)
            .all(|(f, e)| f.eq_ignore_ascii_case(e));
    if ok {
        Ok(())
    } else {
        Err(Error::MalformedRow {
            path: path.to_path_buf(),
            row: 0,
            message: format!("expected header `{}`", expected.join(",")),
        })
    }
}

/// Load a series CSV. Returns one series per distinct id in first-seen order.
pub fn load_series(path: impl AsRef<Path>) -> Result<Vec<PatientSeries>> {
    let path = path.as_ref();
    read_series(File::open(path)?, path)
}

pub fn read_series<R: Read>(rdr: R, path: &Path) -> Result<Vec<PatientSeries>> {
    let mut reader = csv_reader(rdr);
    check_header(path, reader.headers()?, &SERIES_HEADER)?;

    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, Vec<Observation>> = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let bad = |message: String| Error::MalformedRow {
            path: path.to_path_buf(),
            row,
            message,
        };
        if record.len() != SERIES_HEADER.len() {
            return Err(bad(format!(
                "expected {} columns, found {}",
                SERIES_HEADER.len(),
                record.len()
            )));
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(bad("empty patient_id".into()));
        }
        let age: f64 = record[1]
            .parse()
            .map_err(|_| bad(format!("unparseable age `{}`", &record[1])))?;
        let egfr: f64 = record[2]
            .parse()
            .map_err(|_| bad(format!("unparseable egfr `{}`", &record[2])))?;
        check_age(age).map_err(bad)?;
        check_egfr(egfr).map_err(bad)?;

        grouped
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push(Observation { age, egfr });
    }
    if order.is_empty() {
        return Err(Error::EmptyFile {
            path: path.to_path_buf(),
        });
    }
    order
        .into_iter()
        .map(|id| {
            let obs = grouped.remove(&id).unwrap_or_default();
            PatientSeries::new(id, obs)
        })
        .collect()
}

/// Load a labels CSV keyed by patient id.
pub fn load_labels(path: impl AsRef<Path>) -> Result<BTreeMap<String, LabelSet>> {
    let path = path.as_ref();
    read_labels(File::open(path)?, path)
}

pub fn read_labels<R: Read>(rdr: R, path: &Path) -> Result<BTreeMap<String, LabelSet>> {
    let mut reader = csv_reader(rdr);
    check_header(path, reader.headers()?, &LABELS_HEADER)?;

    let mut out = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let bad = |message: String| Error::MalformedRow {
            path: path.to_path_buf(),
            row,
            message,
        };
        if record.len() != LABELS_HEADER.len() {
            return Err(bad(format!(
                "expected {N_EXPERTS} expert columns, found {}",
                record.len().saturating_sub(1)
            )));
        }
        let id = record[0].to_string();
        let mut annotations = [TrendAnnotation::Stable; N_EXPERTS];
        for (slot, token) in annotations.iter_mut().zip(record.iter().skip(1)) {
            *slot = token
                .parse()
                .map_err(|_| bad(format!("unknown annotation token `{token}`")))?;
        }
        if out.contains_key(&id) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                id,
            });
        }
        out.insert(id.clone(), LabelSet { id, annotations });
    }
    if out.is_empty() {
        return Err(Error::EmptyFile {
            path: path.to_path_buf(),
        });
    }
    Ok(out)
}

/// Write series in the series CSV format. `comment` becomes a leading `#` line.
pub fn write_series<W: Write>(w: W, series: &[PatientSeries], comment: Option<&str>) -> Result<()> {
    let mut w = w;
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    let mut writer = csv::Writer::from_writer(w);
    writer.write_record(SERIES_HEADER)?;
    for s in series {
        for o in s.observations() {
            writer.write_record([s.id().to_string(), o.age.to_string(), o.egfr.to_string()])?;
        }
    }
    writer.flush()?;
    Ok(())
}

pub fn write_labels<'a, W, I>(w: W, labels: I, comment: Option<&str>) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a LabelSet>,
{
    let mut w = w;
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    let mut writer = csv::Writer::from_writer(w);
    writer.write_record(LABELS_HEADER)?;
    for ls in labels {
        let mut row = vec![ls.id.clone()];
        row.extend(ls.annotations.iter().map(|a| a.as_str().to_string()));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use TrendAnnotation::*;

    fn parse_series(text: &str) -> Result<Vec<PatientSeries>> {
        read_series(text.as_bytes(), Path::new("series.csv"))
    }

    fn parse_labels(text: &str) -> Result<BTreeMap<String, LabelSet>> {
        read_labels(text.as_bytes(), Path::new("labels.csv"))
    }

    #[test]
    fn loads_and_sorts_by_age() {
        let s = parse_series("patient_id,age_years,egfr\np1,70,60\np1,60,80\n").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(
            s[0].observations(),
            &[
                Observation { age: 60.0, egfr: 80.0 },
                Observation { age: 70.0, egfr: 60.0 }
            ]
        );
    }

    #[test]
    fn duplicate_ages_are_averaged() {
        let s = parse_series("patient_id,age_years,egfr\np1,60,80\np1,60,90\n").unwrap();
        assert_eq!(s[0].observations(), &[Observation { age: 60.0, egfr: 85.0 }]);
    }

    #[test]
    fn negative_egfr_names_the_row() {
        let err = parse_series("patient_id,age_years,egfr\np1,60,-5\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::MalformedRow { row: 1, .. }));
        assert!(msg.contains("egfr out of range"), "{msg}");
    }

    #[test]
    fn rejects_bad_rows_and_empty_files() {
        assert!(matches!(
            parse_series("patient_id,age_years,egfr\n"),
            Err(Error::EmptyFile { .. })
        ));
        assert!(matches!(
            parse_series("patient_id,age_years,egfr\np1,60,80\np1,abc,80\n"),
            Err(Error::MalformedRow { row: 2, .. })
        ));
        assert!(matches!(
            parse_series("patient_id,age_years,egfr\np1,60\n"),
            Err(Error::MalformedRow { row: 1, .. })
        ));
        assert!(parse_series("patient_id,age_years,egfr\np1,130,80\n").is_err());
        assert!(parse_series("patient_id,age_years,egfr\np1,60,NaN\n").is_err());
        assert!(parse_series("id,age,value\np1,60,80\n").is_err());
    }

    #[test]
    fn comments_are_skipped_and_ids_keep_first_seen_order() {
        let s = parse_series("# generated\npatient_id,age_years,egfr\np2,50,70\np1,60,80\np2,51,71\n")
            .unwrap();
        let ids: Vec<_> = s.iter().map(|s| s.id()).collect();
        assert_eq!(ids, ["p2", "p1"]);
        assert_eq!(s[0].len(), 2);
    }

    #[test]
    fn parses_labels() {
        let l = parse_labels("patient_id,e1,e2,e3,e4,e5\np1,stable,stable,linear,stable,STABLE\n").unwrap();
        assert_eq!(l["p1"].annotations[2], Linear);
        assert_eq!(l["p1"].annotations[4], Stable);
    }

    #[test]
    fn label_errors() {
        let short = parse_labels("patient_id,e1,e2,e3,e4,e5\np1,stable,stable\n").unwrap_err();
        assert!(short.to_string().contains("expected 5 expert columns"), "{short}");
        let dup = parse_labels(
            "patient_id,e1,e2,e3,e4,e5\np1,stable,stable,stable,stable,stable\np1,step,step,step,step,step\n",
        )
        .unwrap_err();
        assert!(dup.to_string().contains("duplicate id"), "{dup}");
        let unknown =
            parse_labels("patient_id,e1,e2,e3,e4,e5\np1,stable,flat,stable,stable,stable\n").unwrap_err();
        assert!(unknown.to_string().contains("unknown annotation token"), "{unknown}");
    }

    #[test]
    fn binarize_collapses_unstable_trends() {
        assert_eq!(binarize(Stable), BinaryLabel::Stable);
        assert_eq!(binarize(Stable).y(), 1);
        assert_eq!(binarize(Linear), BinaryLabel::Unstable);
        assert_eq!(binarize(Step), BinaryLabel::Unstable);
    }

    #[test]
    fn consensus_examples() {
        let ls = |a| LabelSet::new("p", a);
        assert_eq!(consensus(&ls([Stable; 5])), BinaryLabel::Stable);
        assert_eq!(
            consensus(&ls([Linear, Step, Stable, Stable, Linear])),
            BinaryLabel::Unstable
        );
        assert_eq!(
            consensus(&ls([Stable, Stable, Stable, Linear, Step])),
            BinaryLabel::Stable
        );
    }

    fn annotation() -> impl Strategy<Value = TrendAnnotation> {
        prop_oneof![Just(Stable), Just(Linear), Just(Step)]
    }

    fn observation() -> impl Strategy<Value = Observation> {
        // Coarse ages so duplicates actually occur.
        (300u32..900, 1.0f64..150.0).prop_map(|(a, egfr)| Observation {
            age: f64::from(a) / 10.0,
            egfr,
        })
    }

    proptest! {
        #[test]
        fn consensus_is_permutation_invariant(
            a in proptest::array::uniform5(annotation()),
            perm in Just([0usize, 1, 2, 3, 4]).prop_shuffle(),
        ) {
            let mut b = a;
            for (i, &p) in perm.iter().enumerate() {
                b[i] = a[p];
            }
            prop_assert_eq!(consensus(&LabelSet::new("p", a)), consensus(&LabelSet::new("p", b)));
        }

        #[test]
        fn consensus_commutes_with_binarize(a in proptest::array::uniform5(annotation())) {
            // Replace each annotation by a canonical representative of its binary class.
            let canonical = a.map(|x| match binarize(x) {
                BinaryLabel::Stable => Stable,
                BinaryLabel::Unstable => Linear,
            });
            prop_assert_eq!(consensus(&LabelSet::new("p", a)), consensus(&LabelSet::new("p", canonical)));
        }

        #[test]
        fn loaded_series_are_strictly_increasing_and_reload_identically(
            obs in proptest::collection::vec(observation(), 1..40),
            shuffled in any::<u64>(),
        ) {
            let s = PatientSeries::new("p1", obs.clone()).unwrap();
            prop_assert!(s.observations().windows(2).all(|w| w[0].age < w[1].age));

            // Merge result does not depend on input order.
            let mut rev = obs.clone();
            rev.rotate_left((shuffled % obs.len() as u64) as usize);
            rev.reverse();
            prop_assert_eq!(&PatientSeries::new("p1", rev).unwrap(), &s);

            let mut buf = Vec::new();
            write_series(&mut buf, std::slice::from_ref(&s), Some("test")).unwrap();
            let back = read_series(buf.as_slice(), Path::new("x")).unwrap();
            prop_assert_eq!(back, vec![s]);
        }
    }
}
