//! Cross-validation harness, precision/recall/F-score, and expert agreement.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classify::{svm_train_with_scaler, KnnModel, Scaler, SvmParams};
use crate::error::{Error, Result};
use crate::features::{assemble, derive_stats, DerivedStats, FeatureVector, Variant};
use crate::gpr::{fit, resample_fixed_range, resample_in_range, FitConfig, GprModel, Resampled};
use crate::interp::linear_resample;
use crate::seed;
use crate::timeseries::{binarize, BinaryLabel, LabelSet, PatientSeries, N_EXPERTS};

pub const N_FOLDS: usize = 5;

/// Outcome counts with stable as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, pred: BinaryLabel, truth: BinaryLabel) {
        match (pred, truth) {
            (BinaryLabel::Stable, BinaryLabel::Stable) => self.tp += 1,
            (BinaryLabel::Stable, BinaryLabel::Unstable) => self.fp += 1,
            (BinaryLabel::Unstable, BinaryLabel::Unstable) => self.tn += 1,
            (BinaryLabel::Unstable, BinaryLabel::Stable) => self.fn_ += 1,
        }
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }
}

pub fn confusion(preds: &[BinaryLabel], truths: &[BinaryLabel]) -> Result<ConfusionCounts> {
    if preds.len() != truths.len() {
        return Err(Error::LengthMismatch(preds.len(), truths.len()));
    }
    let mut c = ConfusionCounts::default();
    for (p, t) in preds.iter().zip(truths) {
        c.record(*p, *t);
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

/// Zero denominators yield 0 for the affected score.
pub fn f_score(c: &ConfusionCounts) -> Scores {
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f_score = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Scores {
        precision,
        recall,
        f_score,
    }
}

/// Assignment of patients to folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    pub fn fold_sizes(&self) -> [usize; N_FOLDS] {
        let mut sizes = [0; N_FOLDS];
        for f in self.assignments.values() {
            sizes[*f] += 1;
        }
        sizes
    }

    pub fn test_ids(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, f)| **f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

fn round_robin(order: impl IntoIterator<Item = String>, seed: u64) -> FoldPlan {
    let assignments = order
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i % N_FOLDS))
        .collect();
    FoldPlan { seed, assignments }
}

fn shuffled(ids: &[String], seed: u64, stream: &str) -> Vec<String> {
    let mut v = ids.to_vec();
    // Shuffle from a canonical order so the plan does not depend on input order.
    v.sort();
    v.shuffle(&mut seed::substream(seed, stream));
    v
}

fn check_ids(ids: &[String]) -> Result<()> {
    if ids.len() < N_FOLDS {
        return Err(Error::TooFewPatients {
            folds: N_FOLDS,
            got: ids.len(),
        });
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(*id)) {
        return Err(Error::InvalidSeries(format!("duplicate id {dup} in fold split")));
    }
    Ok(())
}

/// Seeded shuffle, then round-robin assignment to five folds.
pub fn kfold_split(ids: &[String], seed: u64) -> Result<FoldPlan> {
    check_ids(ids)?;
    Ok(round_robin(shuffled(ids, seed, "folds"), seed))
}

/// Like [`kfold_split`], but deals each class round-robin in turn so class
/// proportions are balanced across folds.
pub fn kfold_split_stratified(ids: &[String], labels: &HashMap<String, BinaryLabel>, seed: u64) -> Result<FoldPlan> {
    check_ids(ids)?;
    let mut order = Vec::with_capacity(ids.len());
    for class in [BinaryLabel::Stable, BinaryLabel::Unstable] {
        let members: Vec<String> = ids
            .iter()
            .filter(|id| labels.get(*id) == Some(&class))
            .cloned()
            .collect();
        order.extend(shuffled(&members, seed, &format!("folds-{class}")));
    }
    if order.len() != ids.len() {
        let missing = ids.iter().find(|id| !labels.contains_key(*id)).cloned().unwrap_or_default();
        return Err(Error::MissingLabel(missing));
    }
    Ok(round_robin(order, seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Knn,
    Svm,
}

impl ClassifierKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::Knn => "knn",
            ClassifierKind::Svm => "svm",
        }
    }
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "").as_str() {
            "knn" => Ok(ClassifierKind::Knn),
            "svm" => Ok(ClassifierKind::Svm),
            _ => Err(Error::Unknown {
                kind: "classifier",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub k: usize,
    pub svm: SvmParams,
    /// Standardize features (fit on training folds only) before either classifier.
    pub scaling: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            k: 3,
            svm: SvmParams::default(),
            scaling: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seed: u64,
    pub fit: FitConfig,
    pub classifier: ClassifierConfig,
    pub stratified: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            fit: FitConfig::default(),
            classifier: ClassifierConfig::default(),
            stratified: false,
        }
    }
}

/// Short stable digest of any serializable configuration.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("configuration serializes");
    let digest = Sha256::digest(&json);
    hex::encode(&digest[..8])
}

/// GPR fits keyed by `(patient id, fit config hash)`.
#[derive(Debug, Default)]
pub struct GprCache {
    models: Mutex<HashMap<(String, String), Arc<GprModel>>>,
}

impl GprCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_fit(&self, series: &PatientSeries, config: &FitConfig) -> Result<Arc<GprModel>> {
        let key = (series.id().to_string(), config_hash(config));
        if let Some(m) = self.models.lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(m));
        }
        let model = Arc::new(fit(series, config)?);
        self.models
            .lock()
            .expect("cache lock")
            .entry(key)
            .or_insert_with(|| Arc::clone(&model));
        Ok(model)
    }

    pub fn len(&self) -> usize {
        self.models.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Why a patient is missing from a variant's feature set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub patient_id: String,
    pub variant: Variant,
    pub reason: String,
}

/// Everything the six variants need for one patient.
#[derive(Clone, Debug)]
pub struct Equalized {
    pub id: String,
    pub stats: DerivedStats,
    pub gpr: std::result::Result<Arc<GprModel>, String>,
    pub fixed: Option<Resampled>,
    pub in_range: Option<Resampled>,
    pub linear: Option<Resampled>,
}

impl Equalized {
    pub fn compute(series: &PatientSeries, config: &FitConfig, cache: &GprCache) -> Self {
        let gpr = cache.get_or_fit(series, config).map_err(|e| e.to_string());
        let (fixed, in_range) = match &gpr {
            Ok(m) => (Some(resample_fixed_range(m)), resample_in_range(m, series).ok()),
            Err(_) => (None, None),
        };
        Self {
            id: series.id().to_string(),
            stats: derive_stats(series),
            gpr,
            fixed,
            in_range,
            linear: linear_resample(series).ok(),
        }
    }

    pub fn resampled(&self, variant: Variant) -> Option<&Resampled> {
        match variant {
            Variant::Stats4 => None,
            Variant::Gpr30To90 => self.fixed.as_ref(),
            Variant::GprInRange | Variant::StatsPlusGpr => self.in_range.as_ref(),
            Variant::Interp | Variant::StatsPlusInterp => self.linear.as_ref(),
        }
    }

    pub fn features(&self, variant: Variant) -> std::result::Result<FeatureVector, String> {
        if variant.regime().is_some() && self.resampled(variant).is_none() {
            return Err(match (&self.gpr, variant.needs_range()) {
                (Err(e), _) if !matches!(variant, Variant::Interp | Variant::StatsPlusInterp) => {
                    format!("gpr fit failed: {e}")
                }
                (_, true) => "degenerate range".to_string(),
                _ => "no resampled vector".to_string(),
            });
        }
        assemble(&self.id, variant, Some(&self.stats), self.resampled(variant)).map_err(|e| e.to_string())
    }
}

/// Equalize every series, fitting GPs in parallel. Output order matches input.
pub fn equalize_cohort(series: &[PatientSeries], config: &FitConfig, cache: &GprCache) -> Vec<Equalized> {
    series
        .par_iter()
        .map(|s| Equalized::compute(s, config, cache))
        .collect()
}

/// Feature vectors for `variant` plus the patients that had to be left out.
pub fn variant_features(cohort: &[Equalized], variant: Variant) -> (Vec<FeatureVector>, Vec<Exclusion>) {
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for p in cohort {
        match p.features(variant) {
            Ok(f) => rows.push(f),
            Err(reason) => excluded.push(Exclusion {
                patient_id: p.id.clone(),
                variant,
                reason,
            }),
        }
    }
    (rows, excluded)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditStage {
    Standardization,
    Training,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub variant: Variant,
    pub classifier: ClassifierKind,
    pub fold: usize,
    pub stage: AuditStage,
    pub patient_ids: Vec<String>,
}

/// Records which patients each scaler fit and training call sees.
#[derive(Debug, Default)]
pub struct AuditLog {
    events: Mutex<Vec<AuditEvent>>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&self, event: AuditEvent) {
        self.events.lock().expect("audit lock").push(event);
    }

    pub fn events(&self) -> Vec<AuditEvent> {
        self.events.lock().expect("audit lock").clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub patient_id: String,
    pub fold: usize,
    pub truth: BinaryLabel,
    pub predicted: BinaryLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub variant: Variant,
    pub classifier: ClassifierKind,
    pub per_fold: Vec<FoldScore>,
    pub mean_f: f64,
    pub excluded: Vec<Exclusion>,
    pub predictions: Vec<Prediction>,
}

/// A cohort prepared for cross-validation: equalized features, consensus
/// labels, and one fold plan shared by every variant.
pub struct Evaluation {
    pub config: EvalConfig,
    pub cohort: Vec<Equalized>,
    pub truths: HashMap<String, BinaryLabel>,
    pub plan: FoldPlan,
    pub audit: Option<Arc<AuditLog>>,
}

impl Evaluation {
    pub fn prepare(
        series: &[PatientSeries],
        labels: &BTreeMap<String, LabelSet>,
        config: EvalConfig,
        cache: &GprCache,
    ) -> Result<Self> {
        let truths: HashMap<String, BinaryLabel> = series
            .iter()
            .map(|s| {
                labels
                    .get(s.id())
                    .map(|ls| (s.id().to_string(), ls.consensus()))
                    .ok_or_else(|| Error::MissingLabel(s.id().to_string()))
            })
            .collect::<Result<_>>()?;
        let ids: Vec<String> = series.iter().map(|s| s.id().to_string()).collect();
        let plan = if config.stratified {
            kfold_split_stratified(&ids, &truths, config.seed)?
        } else {
            kfold_split(&ids, config.seed)?
        };
        let cohort = equalize_cohort(series, &config.fit, cache);
        let failed = cohort.iter().filter(|p| p.gpr.is_err()).count();
        if failed > 0 {
            warn!("{failed} of {} GPR fits failed", cohort.len());
        }
        Ok(Self {
            config,
            cohort,
            truths,
            plan,
            audit: None,
        })
    }

    pub fn with_audit(mut self, audit: Arc<AuditLog>) -> Self {
        self.audit = Some(audit);
        self
    }

    pub fn run(&self, variant: Variant, classifier: ClassifierKind) -> Result<ExperimentReport> {
        let (rows, excluded) = variant_features(&self.cohort, variant);
        if !excluded.is_empty() {
            info!("{variant}: excluded {} patients", excluded.len());
        }
        let folds: Vec<usize> = rows
            .iter()
            .map(|r| {
                self.plan
                    .fold_of(&r.id)
                    .ok_or_else(|| Error::MissingLabel(r.id.clone()))
            })
            .collect::<Result<_>>()?;
        let truth_of = |id: &str| self.truths.get(id).copied().ok_or_else(|| Error::MissingLabel(id.to_string()));

        let mut per_fold = Vec::with_capacity(N_FOLDS);
        let mut predictions = Vec::new();
        for fold in 0..N_FOLDS {
            let train: Vec<&FeatureVector> = rows.iter().zip(&folds).filter(|(_, f)| **f != fold).map(|(r, _)| r).collect();
            let test: Vec<&FeatureVector> = rows.iter().zip(&folds).filter(|(_, f)| **f == fold).map(|(r, _)| r).collect();
            let x: Vec<Vec<f64>> = train.iter().map(|r| r.values.clone()).collect();
            let y: Vec<BinaryLabel> = train.iter().map(|r| truth_of(&r.id)).collect::<Result<_>>()?;
            let train_ids = || train.iter().map(|r| r.id.clone()).collect::<Vec<_>>();
            let audit = |stage| {
                if let Some(log) = &self.audit {
                    log.record(AuditEvent {
                        variant,
                        classifier,
                        fold,
                        stage,
                        patient_ids: train_ids(),
                    });
                }
            };

            let scaler = if self.config.classifier.scaling {
                audit(AuditStage::Standardization);
                Scaler::fit(&x)?
            } else {
                Scaler::identity(variant.len())
            };
            audit(AuditStage::Training);
            let predict: Box<dyn Fn(&[f64]) -> Result<BinaryLabel>> = match classifier {
                ClassifierKind::Knn => {
                    let m = KnnModel::with_scaler(&x, &y, self.config.classifier.k, scaler)?;
                    Box::new(move |v| m.predict(v))
                }
                ClassifierKind::Svm => {
                    let m = svm_train_with_scaler(&x, &y, scaler, &self.config.classifier.svm)?;
                    Box::new(move |v| m.predict(v))
                }
            };

            let mut counts = ConfusionCounts::default();
            for r in &test {
                let truth = truth_of(&r.id)?;
                let predicted = predict(&r.values)?;
                counts.record(predicted, truth);
                predictions.push(Prediction {
                    patient_id: r.id.clone(),
                    fold,
                    truth,
                    predicted,
                });
            }
            let s = f_score(&counts);
            per_fold.push(FoldScore {
                fold,
                counts,
                precision: s.precision,
                recall: s.recall,
                f_score: s.f_score,
            });
        }
        let mean_f = per_fold.iter().map(|f| f.f_score).sum::<f64>() / N_FOLDS as f64;
        Ok(ExperimentReport {
            variant,
            classifier,
            per_fold,
            mean_f,
            excluded,
            predictions,
        })
    }

    /// Every requested (variant, classifier) cell, in the order given.
    pub fn run_matrix(&self, variants: &[Variant], classifiers: &[ClassifierKind]) -> Result<Vec<ExperimentReport>> {
        let cells: Vec<(Variant, ClassifierKind)> = variants
            .iter()
            .flat_map(|v| classifiers.iter().map(move |c| (*v, *c)))
            .collect();
        cells.into_par_iter().map(|(v, c)| self.run(v, c)).collect()
    }
}

/// Run one cross-validated experiment with default settings and `seed`.
pub fn run_experiment(
    series: &[PatientSeries],
    labels: &BTreeMap<String, LabelSet>,
    variant: Variant,
    classifier: ClassifierKind,
    seed: u64,
) -> Result<ExperimentReport> {
    let config = EvalConfig {
        seed,
        ..EvalConfig::default()
    };
    Evaluation::prepare(series, labels, config, &GprCache::new())?.run(variant, classifier)
}

fn fmt_score(v: f64) -> String {
    format!("{v:.4}")
}

/// Table-shaped report: rows `Fold-1..Fold-5, Average`, one column per
/// `<variant>_<classifier>`.
pub fn write_fold_table<W: Write>(mut w: W, reports: &[ExperimentReport], comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    let mut writer = csv::Writer::from_writer(w);
    let mut header = vec!["fold".to_string()];
    header.extend(reports.iter().map(|r| format!("{}_{}", r.variant, r.classifier.as_str())));
    writer.write_record(&header)?;
    for fold in 0..N_FOLDS {
        let mut row = vec![format!("Fold-{}", fold + 1)];
        row.extend(reports.iter().map(|r| fmt_score(r.per_fold[fold].f_score)));
        writer.write_record(&row)?;
    }
    let mut avg = vec!["Average".to_string()];
    avg.extend(reports.iter().map(|r| fmt_score(r.mean_f)));
    writer.write_record(&avg)?;
    writer.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementMode {
    /// Each expert against the majority of the other four; 2-2 ties skipped.
    MajorityOfRest,
    /// Each expert against every other expert, F-scores averaged.
    Pairwise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertScore {
    pub expert: usize,
    pub counts: ConfusionCounts,
    pub f_score: f64,
    pub ties_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub mode: AgreementMode,
    pub experts: Vec<ExpertScore>,
    pub mean_f: f64,
}

pub fn expert_agreement(labels: &BTreeMap<String, LabelSet>, mode: AgreementMode) -> AgreementReport {
    let votes: Vec<[BinaryLabel; N_EXPERTS]> = labels
        .values()
        .map(|ls| ls.annotations.map(binarize))
        .collect();
    let experts: Vec<ExpertScore> = (0..N_EXPERTS)
        .map(|e| match mode {
            AgreementMode::MajorityOfRest => {
                let mut counts = ConfusionCounts::default();
                let mut ties = 0;
                for v in &votes {
                    let stable = (0..N_EXPERTS)
                        .filter(|&o| o != e && v[o] == BinaryLabel::Stable)
                        .count();
                    let truth = match stable {
                        3 | 4 => BinaryLabel::Stable,
                        0 | 1 => BinaryLabel::Unstable,
                        _ => {
                            ties += 1;
                            continue;
                        }
                    };
                    counts.record(v[e], truth);
                }
                ExpertScore {
                    expert: e + 1,
                    counts,
                    f_score: f_score(&counts).f_score,
                    ties_excluded: ties,
                }
            }
            AgreementMode::Pairwise => {
                let mut total = ConfusionCounts::default();
                let mut f_sum = 0.0;
                for o in (0..N_EXPERTS).filter(|&o| o != e) {
                    let mut c = ConfusionCounts::default();
                    for v in &votes {
                        c.record(v[e], v[o]);
                    }
                    f_sum += f_score(&c).f_score;
                    total = total.merge(&c);
                }
                ExpertScore {
                    expert: e + 1,
                    counts: total,
                    f_score: f_sum / (N_EXPERTS - 1) as f64,
                    ties_excluded: 0,
                }
            }
        })
        .collect();
    let mean_f = experts.iter().map(|e| e.f_score).sum::<f64>() / N_EXPERTS as f64;
    AgreementReport { mode, experts, mean_f }
}

/// Expert table: `metric,E1..E5,Mean` with F-score and tie-count rows.
pub fn write_agreement_table<W: Write>(mut w: W, report: &AgreementReport, comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    let mut writer = csv::Writer::from_writer(w);
    let mut header = vec!["metric".to_string()];
    header.extend((1..=N_EXPERTS).map(|e| format!("E{e}")));
    header.push("Mean".into());
    writer.write_record(&header)?;
    let mut f = vec!["f_score".to_string()];
    f.extend(report.experts.iter().map(|e| fmt_score(e.f_score)));
    f.push(fmt_score(report.mean_f));
    writer.write_record(&f)?;
    let mut ties = vec!["ties_excluded".to_string()];
    ties.extend(report.experts.iter().map(|e| e.ties_excluded.to_string()));
    ties.push(report.experts.iter().map(|e| e.ties_excluded).sum::<usize>().to_string());
    writer.write_record(&ties)?;
    writer.flush()?;
    Ok(())
}
