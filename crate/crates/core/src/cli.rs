//! Command-line front end.
//!
//! Every output file starts with a `#` line carrying the run's config hash
//! and seed. Reruns with the same flags rewrite identical bytes.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::eval::{
    config_hash, expert_agreement, write_agreement_table, write_fold_table, AgreementMode, ClassifierConfig,
    ClassifierKind, EvalConfig, Evaluation, GprCache,
};
use crate::features::{assemble, derive_stats, write_feature_matrix, Variant};
use crate::gpr::{fit, resample_fixed_range, resample_in_range, FitConfig, Resampled};
use crate::interp::linear_resample;
use crate::synth::{generate_cohort, CohortConfig};
use crate::timeseries::{load_labels, load_series, write_labels, write_series, PatientSeries};

#[derive(Debug, Parser)]
#[command(name = "trendeq", version, about = "Equalize irregular eGFR series and classify their trends")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort (series.csv, labels.csv).
    Generate(GenerateArgs),
    /// Resample every series to 50 points and write the feature matrix.
    Equalize(EqualizeArgs),
    /// Cross-validated out-of-fold predictions for one variant.
    Classify(ClassifyArgs),
    /// Full variant x classifier matrix plus expert agreement.
    Evaluate(EvaluateArgs),
    /// Score each expert against the others.
    Agreement(AgreementArgs),
    /// Per-patient mean and 95% band on the resampling grid.
    PlotData(PlotDataArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 488)]
    pub n_patients: usize,
    #[arg(long, default_value_t = 0.533)]
    pub stable_fraction: f64,
    #[arg(long, default_value_t = 8.0)]
    pub noise_sd: f64,
    /// Noise-free cohort with classes separable by construction.
    #[arg(long)]
    pub separable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    GprInRange,
    GprFixed,
    Linear,
}

impl Method {
    fn variant(self) -> Variant {
        match self {
            Method::GprInRange => Variant::GprInRange,
            Method::GprFixed => Variant::Gpr30To90,
            Method::Linear => Variant::Interp,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Method::GprInRange => "gpr-in-range",
            Method::GprFixed => "gpr-fixed",
            Method::Linear => "linear",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClassifierChoice {
    Knn,
    Svm,
    Both,
}

impl ClassifierChoice {
    fn kinds(self) -> Vec<ClassifierKind> {
        match self {
            ClassifierChoice::Knn => vec![ClassifierKind::Knn],
            ClassifierChoice::Svm => vec![ClassifierKind::Svm],
            ClassifierChoice::Both => vec![ClassifierKind::Knn, ClassifierKind::Svm],
        }
    }
}

#[derive(Debug, Args)]
pub struct EqualizeArgs {
    #[arg(long)]
    pub series: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "gpr-in-range")]
    pub method: Method,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip the per-patient plot files.
    #[arg(long)]
    pub no_plots: bool,
}

#[derive(Debug, Args)]
pub struct ClassifierFlags {
    #[arg(long, default_value_t = 1.0)]
    pub svm_c: f64,
    #[arg(long, default_value_t = 10.0)]
    pub svm_sigma: f64,
    #[arg(long, default_value_t = 3)]
    pub knn_k: usize,
    #[arg(long)]
    pub stratified: bool,
    #[arg(long)]
    pub no_scaling: bool,
}

impl ClassifierFlags {
    fn config(&self) -> ClassifierConfig {
        let mut c = ClassifierConfig::default();
        c.k = self.knn_k;
        c.svm.c = self.svm_c;
        c.svm.sigma = self.svm_sigma;
        c.svm.scaling = !self.no_scaling;
        c.scaling = !self.no_scaling;
        c
    }
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub series: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "gpr-in-range")]
    pub variant: String,
    #[arg(long, value_enum, default_value = "both")]
    pub classifier: ClassifierChoice,
    #[command(flatten)]
    pub flags: ClassifierFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub series: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated subset of variants (default: all six).
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    #[arg(long, value_enum, default_value = "both")]
    pub classifier: ClassifierChoice,
    #[command(flatten)]
    pub flags: ClassifierFlags,
    /// Score experts by mean pairwise F instead of majority of the rest.
    #[arg(long)]
    pub pairwise: bool,
}

#[derive(Debug, Args)]
pub struct AgreementArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub pairwise: bool,
}

#[derive(Debug, Args)]
pub struct PlotDataArgs {
    #[arg(long)]
    pub series: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "gpr-in-range")]
    pub method: Method,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Patients to emit (repeatable); all when omitted.
    #[arg(long = "patient")]
    pub patients: Vec<String>,
}

/// Serializable description of a run; its hash tags every output.
#[derive(Debug, Serialize)]
pub struct RunConfig {
    pub command: &'static str,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cohort: Option<CohortConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classifier: Option<ClassifierConfig>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub classifiers: Vec<ClassifierKind>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<Variant>,
    pub stratified: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agreement: Option<AgreementMode>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub patients: Vec<String>,
}

impl RunConfig {
    fn new(command: &'static str, seed: u64) -> Self {
        Self {
            command,
            seed,
            cohort: None,
            fit: None,
            method: None,
            classifier: None,
            classifiers: Vec::new(),
            variants: Vec::new(),
            stratified: false,
            agreement: None,
            patients: Vec::new(),
        }
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    fn stamp(&self) -> String {
        format!("trendeq {} config_hash={} seed={}", self.command, self.hash(), self.seed)
    }
}

fn fit_config(seed: u64) -> FitConfig {
    FitConfig {
        seed,
        ..FitConfig::default()
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Serialized JSON-lines log.
struct JsonLog {
    out: BufWriter<File>,
}

impl JsonLog {
    fn create(path: &Path, run: &RunConfig) -> Result<Self> {
        let mut log = Self { out: create(path)? };
        log.write(&json!({
            "event": "run",
            "command": run.command,
            "config_hash": run.hash(),
            "seed": run.seed,
            "config": run,
        }))?;
        Ok(log)
    }

    fn write(&mut self, value: &serde_json::Value) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn parse_variants(raw: &[String]) -> Result<Vec<Variant>> {
    if raw.is_empty() {
        return Ok(Variant::ALL.to_vec());
    }
    raw.iter().filter(|s| !s.trim().is_empty()).map(|s| s.parse()).collect()
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let base = if args.separable {
        CohortConfig::separable(args.seed)
    } else {
        CohortConfig {
            seed: args.seed,
            noise_sd: args.noise_sd,
            ..CohortConfig::default()
        }
    };
    let cohort_cfg = CohortConfig {
        n_patients: args.n_patients,
        stable_fraction: args.stable_fraction,
        ..base
    };
    let mut run = RunConfig::new("generate", args.seed);
    run.cohort = Some(cohort_cfg.clone());
    let stamp = run.stamp();

    let cohort = generate_cohort(&cohort_cfg)?;
    write_series(create(&args.out.join("series.csv"))?, &cohort.series, Some(&stamp))?;
    write_labels(create(&args.out.join("labels.csv"))?, cohort.labels.values(), Some(&stamp))?;
    info!("wrote {} patients to {}", cohort.series.len(), args.out.display());
    Ok(())
}

fn equalize_one(series: &PatientSeries, method: Method, config: &FitConfig) -> Result<Resampled> {
    match method {
        Method::Linear => linear_resample(series),
        Method::GprFixed => Ok(resample_fixed_range(&fit(series, config)?)),
        Method::GprInRange => {
            if !series.has_range() {
                return Err(Error::DegenerateRange(series.id().to_string()));
            }
            resample_in_range(&fit(series, config)?, series)
        }
    }
}

fn equalize_all(series: &[PatientSeries], method: Method, config: &FitConfig) -> Vec<Result<Resampled>> {
    use rayon::prelude::*;
    series.par_iter().map(|s| equalize_one(s, method, config)).collect()
}

/// Returns the number of patients that failed.
pub fn cmd_equalize(args: &EqualizeArgs) -> Result<usize> {
    let series = load_series(&args.series)?;
    let fit_cfg = fit_config(args.seed);
    let mut run = RunConfig::new("equalize", args.seed);
    run.method = Some(args.method);
    run.fit = Some(fit_cfg.clone());
    let stamp = run.stamp();
    let mut log = JsonLog::create(&args.out.join(format!("equalize_{}.jsonl", args.method.name())), &run)?;

    let variant = args.method.variant();
    let results = equalize_all(&series, args.method, &fit_cfg);
    let mut rows = Vec::new();
    let mut failed = 0;
    for (s, res) in series.iter().zip(results) {
        match res.and_then(|r| {
            let fv = assemble(s.id(), variant, Some(&derive_stats(s)), Some(&r))?;
            Ok((r, fv))
        }) {
            Ok((r, fv)) => {
                if !args.no_plots {
                    let path = args
                        .out
                        .join("plots")
                        .join(format!("{}_{}.csv", safe_name(s.id()), args.method.name()));
                    let mut w = create(&path)?;
                    r.write_plot_data(&mut w, s, Some(&stamp))?;
                    w.flush()?;
                }
                rows.push(fv);
            }
            Err(e) => {
                failed += 1;
                warn!("{}: {e}", s.id());
                let kind = if matches!(e, Error::DegenerateRange(_)) { "exclusion" } else { "fit_failure" };
                log.write(&json!({"event": kind, "patient_id": s.id(), "reason": e.to_string()}))?;
            }
        }
    }
    let mut w = create(&args.out.join(format!("features_{}.csv", args.method.name())))?;
    write_feature_matrix(&mut w, &rows, Some(&stamp))?;
    w.flush()?;
    log.write(&json!({"event": "summary", "patients": series.len(), "written": rows.len(), "failed": failed}))?;
    log.finish()?;
    if failed == series.len() {
        return Err(Error::InvalidSeries(format!("all {failed} patients failed to equalize")));
    }
    Ok(failed)
}

pub fn cmd_classify(args: &ClassifyArgs) -> Result<()> {
    let series = load_series(&args.series)?;
    let labels = load_labels(&args.labels)?;
    let variant: Variant = args.variant.parse()?;
    let kinds = args.classifier.kinds();
    let config = EvalConfig {
        seed: args.seed,
        fit: fit_config(args.seed),
        classifier: args.flags.config(),
        stratified: args.flags.stratified,
    };
    let mut run = RunConfig::new("classify", args.seed);
    run.fit = Some(config.fit.clone());
    run.classifier = Some(config.classifier.clone());
    run.classifiers = kinds.clone();
    run.variants = vec![variant];
    run.stratified = config.stratified;
    let stamp = run.stamp();

    let eval = Evaluation::prepare(&series, &labels, config, &GprCache::new())?;
    let reports = eval.run_matrix(&[variant], &kinds)?;

    let mut w = create(&args.out.join(format!("predictions_{variant}.csv")))?;
    writeln!(w, "# {stamp}")?;
    let mut writer = csv::Writer::from_writer(&mut w);
    let mut header = vec!["patient_id".to_string(), "fold".into(), "truth".into()];
    header.extend(kinds.iter().map(|k| k.as_str().to_string()));
    writer.write_record(&header)?;
    let first = &reports[0].predictions;
    for (i, p) in first.iter().enumerate() {
        let mut row = vec![p.patient_id.clone(), (p.fold + 1).to_string(), p.truth.to_string()];
        row.extend(reports.iter().map(|r| r.predictions[i].predicted.to_string()));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    drop(writer);
    w.flush()?;
    for r in &reports {
        println!("{}_{}: mean F = {:.4}", r.variant, r.classifier.as_str(), r.mean_f);
    }
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let series = load_series(&args.series)?;
    let labels = load_labels(&args.labels)?;
    let variants = parse_variants(&args.variants)?;
    let kinds = args.classifier.kinds();
    let mode = if args.pairwise { AgreementMode::Pairwise } else { AgreementMode::MajorityOfRest };
    let config = EvalConfig {
        seed: args.seed,
        fit: fit_config(args.seed),
        classifier: args.flags.config(),
        stratified: args.flags.stratified,
    };
    let mut run = RunConfig::new("evaluate", args.seed);
    run.fit = Some(config.fit.clone());
    run.classifier = Some(config.classifier.clone());
    run.classifiers = kinds.clone();
    run.variants = variants.clone();
    run.stratified = config.stratified;
    run.agreement = Some(mode);
    let stamp = run.stamp();

    let mut log = JsonLog::create(&args.out.join("evaluate.jsonl"), &run)?;
    let eval = Evaluation::prepare(&series, &labels, config, &GprCache::new())?;
    for p in &eval.cohort {
        if let Err(e) = &p.gpr {
            log.write(&json!({"event": "fit_failure", "patient_id": p.id, "reason": e}))?;
        }
    }
    log.write(&json!({"event": "folds", "seed": eval.plan.seed, "sizes": eval.plan.fold_sizes()}))?;

    let reports = eval.run_matrix(&variants, &kinds)?;
    for r in reports.iter().filter(|r| r.classifier == kinds[0]) {
        for x in &r.excluded {
            log.write(&json!({"event": "exclusion", "variant": x.variant, "patient_id": x.patient_id, "reason": x.reason}))?;
        }
    }
    for r in &reports {
        log.write(&json!({
            "event": "result",
            "variant": r.variant,
            "classifier": r.classifier,
            "mean_f": r.mean_f,
            "per_fold": r.per_fold,
            "excluded": r.excluded.len(),
        }))?;
        println!("{}_{}: mean F = {:.4}", r.variant, r.classifier.as_str(), r.mean_f);
    }
    let mut w = create(&args.out.join("report.csv"))?;
    write_fold_table(&mut w, &reports, Some(&stamp))?;
    w.flush()?;

    let agreement = expert_agreement(&labels, mode);
    log.write(&json!({"event": "agreement", "report": agreement}))?;
    let mut w = create(&args.out.join("experts.csv"))?;
    write_agreement_table(&mut w, &agreement, Some(&stamp))?;
    w.flush()?;
    log.finish()
}

pub fn cmd_agreement(args: &AgreementArgs) -> Result<()> {
    let labels = load_labels(&args.labels)?;
    let mode = if args.pairwise { AgreementMode::Pairwise } else { AgreementMode::MajorityOfRest };
    let mut run = RunConfig::new("agreement", 0);
    run.agreement = Some(mode);
    let report = expert_agreement(&labels, mode);
    let mut w = create(&args.out.join("experts.csv"))?;
    write_agreement_table(&mut w, &report, Some(&run.stamp()))?;
    w.flush()?;
    for e in &report.experts {
        println!("E{}: F = {:.4} (ties excluded: {})", e.expert, e.f_score, e.ties_excluded);
    }
    println!("mean: {:.4}", report.mean_f);
    Ok(())
}

pub fn cmd_plot_data(args: &PlotDataArgs) -> Result<()> {
    let mut series = load_series(&args.series)?;
    if !args.patients.is_empty() {
        if let Some(missing) = args.patients.iter().find(|p| !series.iter().any(|s| s.id() == p.as_str())) {
            return Err(Error::Unknown {
                kind: "patient",
                value: missing.clone(),
            });
        }
        series.retain(|s| args.patients.iter().any(|p| p == s.id()));
    }
    let fit_cfg = fit_config(args.seed);
    let mut run = RunConfig::new("plot-data", args.seed);
    run.method = Some(args.method);
    run.fit = Some(fit_cfg.clone());
    run.patients = args.patients.clone();
    let stamp = run.stamp();
    let mut written = 0;
    for (s, res) in series.iter().zip(equalize_all(&series, args.method, &fit_cfg)) {
        match res {
            Ok(r) => {
                let path = args.out.join(format!("{}_{}.csv", safe_name(s.id()), args.method.name()));
                let mut w = create(&path)?;
                r.write_plot_data(&mut w, s, Some(&stamp))?;
                w.flush()?;
                written += 1;
            }
            Err(e) => warn!("{}: {e}", s.id()),
        }
    }
    if written == 0 {
        return Err(Error::InvalidSeries("no plot data could be produced".into()));
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Equalize(a) => cmd_equalize(a).map(|failed| {
            if failed > 0 {
                warn!("{failed} patients could not be equalized; see the log");
            }
        }),
        Command::Classify(a) => cmd_classify(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Agreement(a) => cmd_agreement(a),
        Command::PlotData(a) => cmd_plot_data(a),
    }
}

/// Parse arguments, run, and map the outcome to an exit status.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TRENDEQ_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
