//! Command-line dispatcher: configuration merging, subcommands, and report emission.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::combinatorics::check_khintchine_bound;
use crate::dyson::{choose_krm_phi, choose_krm_sigma, choose_krm_sqrt, covariance_error_check, dyson_error_bound_check, eigen_containment, ErrorReport};
use crate::em::{assemble_em_system, em_min_steps, em_norm_report, strong_convergence};
use crate::error::{Error, Result};
use crate::estimator::{plan_for, Accuracy, Algorithm, EstimateReport, Estimator, ObservableTensor, OverlapMode};
use crate::history::{assemble, norm_bound_report, DysonHistory, HistoryConfig, QlssMode, SystemKind};
use crate::model::{exact_phi, load_model, validate_bounds, SdeProblem, TimeGrid};
use crate::prng::{choose_usn, PcgStream};

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "QSDE_SEED";

#[derive(Parser, Debug)]
#[command(name = "qsde", version, about = "Emulate and validate history-state estimators for linear SDEs")]
pub struct Cli {
    /// JSON run configuration; flags take precedence over its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check the declared model bounds on a time grid.
    ValidateBounds(ModelArgs),
    /// Measure truncated-propagator error against the requested accuracy.
    DysonError(AccuracyArgs),
    /// Measure approximate step-covariance error against the requested accuracy.
    CovarianceError(AccuracyArgs),
    /// Build history states and check their pathwise deviation.
    History(HistoryArgs),
    /// Strong convergence of Euler-Maruyama against a fine reference.
    EmConvergence(EmArgs),
    /// Run one of the expectation estimators.
    Estimate(EstimateArgs),
    /// Compare even-tuple counts with the (2k-1)!! l^k bound.
    CheckKhintchine(KhintchineArgs),
    /// Run every deterministic bound check on one model.
    Report(ModelArgs),
}

#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    /// Built-in model name or path to a model JSON document.
    #[arg(long)]
    pub model: Option<String>,
    /// Time points for bound sampling.
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AccuracyArgs {
    #[arg(long)]
    pub model: Option<String>,
    /// Comma-separated accuracies.
    #[arg(long, value_delimiter = ',')]
    pub eps: Vec<f64>,
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long = "M")]
    pub m: Option<usize>,
}

#[derive(Args, Debug)]
pub struct HistoryArgs {
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub samples: Option<u64>,
    #[arg(long, value_enum)]
    pub qlss_mode: Option<QlssArg>,
    /// Append `R` copies of the terminal block.
    #[arg(long)]
    pub padded: bool,
    #[arg(long = "R")]
    pub pad: Option<usize>,
    #[arg(long)]
    pub stream_id: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EmArgs {
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub r_list: Vec<usize>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub stream_id: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[arg(long, value_enum)]
    pub algorithm: Option<AlgorithmArg>,
    #[arg(long)]
    pub model: Option<String>,
    /// Observable JSON (inline or path); defaults to the first terminal component to the power `d`.
    #[arg(long)]
    pub observable: Option<String>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Absolute accuracy.
    #[arg(long, conflicts_with = "eps_rel")]
    pub eps: Option<f64>,
    /// Accuracy relative to the typical size of `Y`, in (0, 1).
    #[arg(long)]
    pub eps_rel: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub stream_id: Option<u64>,
    #[arg(long, value_enum)]
    pub qlss_mode: Option<QlssArg>,
    #[arg(long, value_enum)]
    pub overlap_mode: Option<OverlapArg>,
    /// Strong-error constant for the EM plan; estimated when absent.
    #[arg(long)]
    pub c_st: Option<f64>,
}

#[derive(Args, Debug)]
pub struct KhintchineArgs {
    #[arg(long)]
    pub kmax: Option<u32>,
    #[arg(long)]
    pub lmax: Option<u32>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmArg {
    Multi,
    Terminal,
    Em,
}

#[derive(Clone, Copy, Debug, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QlssArg {
    Honest,
    Adversarial,
}

#[derive(Clone, Copy, Debug, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverlapArg {
    Exact,
    Shot,
}

impl From<AlgorithmArg> for Algorithm {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::Multi => Algorithm::Multi,
            AlgorithmArg::Terminal => Algorithm::Terminal,
            AlgorithmArg::Em => Algorithm::Em,
        }
    }
}

impl From<QlssArg> for QlssMode {
    fn from(a: QlssArg) -> Self {
        match a {
            QlssArg::Honest => QlssMode::Honest,
            QlssArg::Adversarial => QlssMode::Adversarial,
        }
    }
}

impl From<OverlapArg> for OverlapMode {
    fn from(a: OverlapArg) -> Self {
        match a {
            OverlapArg::Exact => OverlapMode::Exact,
            OverlapArg::Shot => OverlapMode::Shot,
        }
    }
}

/// JSON run configuration. Every field is optional; unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<String>,
    pub eps: Option<Vec<f64>>,
    pub eps_rel: Option<f64>,
    pub delta: Option<f64>,
    pub r: Option<usize>,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[serde(rename = "M")]
    pub m: Option<usize>,
    #[serde(rename = "R")]
    pub pad: Option<usize>,
    pub seed: Option<u64>,
    pub stream_id: Option<u64>,
    pub repeats: Option<usize>,
    pub samples: Option<u64>,
    pub paths: Option<usize>,
    pub r_list: Option<Vec<usize>>,
    pub qlss_mode: Option<QlssArg>,
    pub overlap_mode: Option<OverlapArg>,
    pub algorithm: Option<AlgorithmArg>,
    pub observable: Option<String>,
    pub d: Option<usize>,
    pub c_st: Option<f64>,
    pub kmax: Option<u32>,
    pub lmax: Option<u32>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

const DEFAULT_MODEL: &str = "ou";

/// Seed precedence: flag, then environment, then configuration, then 0.
fn resolve_seed(flag: Option<u64>, cfg: &RunConfig) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        return v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")));
    }
    Ok(cfg.seed.unwrap_or(0))
}

fn in_unit(name: &str, v: f64, closed: bool) -> Result<f64> {
    let ok = v > 0.0 && if closed { v <= 1.0 } else { v < 1.0 };
    if ok {
        Ok(v)
    } else {
        Err(Error::Config(format!("{name} = {v} outside its admissible range")))
    }
}

fn positive<T: PartialOrd + Default + std::fmt::Display + Copy>(name: &str, v: T) -> Result<T> {
    if v > T::default() {
        Ok(v)
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

/// Full round-trip float formatting used in every CSV cell.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&'static str]) -> Self {
        Table { header: header.to_vec(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

fn emit(out: &Option<PathBuf>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, bytes)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
        }
    }
    Ok(())
}

/// Outcome of a subcommand: bytes to write and whether all enabled checks passed.
pub struct Outcome {
    pub bytes: Vec<u8>,
    pub pass: bool,
}

fn model_of(flag: &Option<String>, cfg: &RunConfig) -> Result<SdeProblem> {
    let name = flag.clone().or_else(|| cfg.model.clone()).unwrap_or_else(|| DEFAULT_MODEL.into());
    load_model(&name).map_err(|e| match e {
        Error::InvalidInput(s) => Error::Config(s),
        other => other,
    })
}

fn bool_cell(b: bool) -> String {
    b.to_string()
}

fn cmd_validate(a: &ModelArgs, cfg: &RunConfig) -> Result<Outcome> {
    let p = model_of(&a.model, cfg)?;
    let samples = a.samples.or(cfg.samples.map(|v| v as usize)).unwrap_or(101);
    let rep = validate_bounds(&p, samples).map_err(|e| Error::Config(e.to_string()))?;
    for v in &rep.violations {
        eprintln!("violation: {v}");
    }
    let mut t = Table::new(&[
        "model",
        "samples",
        "max_norm_a",
        "max_log_norm_a",
        "max_norm_da",
        "min_eig_bbt",
        "max_eig_bbt",
        "max_norm_dbbt",
        "violations",
        "pass",
    ]);
    t.push(vec![
        rep.model.clone(),
        rep.samples.to_string(),
        fmt_f64(rep.max_norm_a),
        fmt_f64(rep.max_log_norm_a),
        fmt_f64(rep.max_norm_da),
        fmt_f64(rep.min_eig_bbt),
        fmt_f64(rep.max_eig_bbt),
        fmt_f64(rep.max_norm_dbbt),
        rep.violations.len().to_string(),
        bool_cell(rep.pass),
    ]);
    Ok(Outcome { bytes: t.to_bytes()?, pass: rep.pass })
}

fn error_table(reports: &[ErrorReport]) -> Result<Vec<u8>> {
    let mut t = Table::new(&["model", "eps", "K", "r", "M", "measured_error", "bound", "pass"]);
    for r in reports {
        t.push(vec![
            r.model.clone(),
            fmt_f64(r.eps_target),
            r.k.to_string(),
            r.r.to_string(),
            r.m.to_string(),
            fmt_f64(r.measured_error),
            fmt_f64(r.bound),
            bool_cell(r.pass),
        ]);
    }
    t.to_bytes()
}

/// Largest fine grid the error subcommands will evaluate.
pub const MAX_CHECK_FINE_STEPS: u64 = 1 << 16;

fn cmd_accuracy(a: &AccuracyArgs, cfg: &RunConfig, covariance: bool) -> Result<Outcome> {
    let p = model_of(&a.model, cfg)?;
    let eps_list = if a.eps.is_empty() { cfg.eps.clone().unwrap_or_else(|| vec![1e-2]) } else { a.eps.clone() };
    let mut reports = Vec::new();
    for &eps in &eps_list {
        let krm = if covariance { choose_krm_sigma(&p, eps) } else { choose_krm_phi(&p, eps) }
            .map_err(|e| Error::Config(e.to_string()))?;
        let k = a.k.or(cfg.k).unwrap_or(krm.k);
        let r = positive("r", a.r.or(cfg.r).unwrap_or(krm.r))?;
        let m = a.m.or(cfg.m).map(|m| m as u64).unwrap_or(krm.m);
        if m > MAX_CHECK_FINE_STEPS {
            return Err(Error::TooLarge(m as usize));
        }
        let grid = TimeGrid::new(p.t_end, r, positive("M", m as usize)?);
        reports.push(if covariance {
            covariance_error_check(&p, grid, k, eps)?
        } else {
            dyson_error_bound_check(&p, grid, k, eps)?
        });
    }
    let pass = reports.iter().all(|r| r.pass);
    Ok(Outcome { bytes: error_table(&reports)?, pass })
}

#[derive(Serialize)]
struct HistoryRow {
    sample: u64,
    deviation: f64,
    bound: f64,
    eps1: f64,
    noise_error: f64,
    pass: bool,
}

#[derive(Serialize)]
struct HistoryOutput<'a> {
    model: &'a str,
    qlss_mode: QlssMode,
    seed: u64,
    stream_id: u64,
    plan: &'a crate::history::HistoryPlan,
    samples: Vec<HistoryRow>,
    pass: bool,
}

fn cmd_history(a: &HistoryArgs, cfg: &RunConfig, seed: u64) -> Result<Outcome> {
    let p = model_of(&a.model, cfg)?;
    let eps = in_unit("eps", a.eps.or(cfg.eps.as_ref().and_then(|v| v.first().copied())).unwrap_or(0.25), true)?;
    let samples = positive("samples", a.samples.or(cfg.samples).unwrap_or(20))?;
    let mode: QlssMode = a.qlss_mode.or(cfg.qlss_mode).unwrap_or(QlssArg::Honest).into();
    let stream_id = a.stream_id.or(cfg.stream_id).unwrap_or(1);
    let r_c = choose_krm_sqrt(&p, 1.0)?.r;
    let pad = a.pad.or(cfg.pad).unwrap_or_else(|| (r_c as f64 / p.max_one_eta_t()).round() as usize);
    let hcfg = HistoryConfig {
        eps,
        padded: a.padded,
        pad: if a.padded { pad } else { 0 },
        qlss_mode: mode,
        clip: choose_usn(r_c as u64, p.n, samples, 0.1),
        fine_cap: None,
        varepsilon: None,
        aux_seed: seed,
        aux_stream: stream_id,
    };
    let h = DysonHistory::build(&p, hcfg)?;
    let stream = PcgStream::new(seed, stream_id);
    let bound = h.plan.u_b * eps;
    let mut rows = Vec::new();
    for i in 1..=samples {
        // A failed pathwise check is a bound failure; report it and stop.
        let s = h.sample(&stream, i)?;
        rows.push(HistoryRow {
            sample: i,
            deviation: s.deviation,
            bound,
            eps1: s.eps1,
            noise_error: s.noise_error,
            pass: s.deviation <= bound,
        });
    }
    let pass = rows.iter().all(|r| r.pass);
    let out = HistoryOutput { model: &p.name, qlss_mode: mode, seed, stream_id, plan: &h.plan, samples: rows, pass };
    Ok(Outcome { bytes: json_bytes(&out)?, pass })
}

fn cmd_em(a: &EmArgs, cfg: &RunConfig, seed: u64) -> Result<Outcome> {
    let p = model_of(&a.model, cfg)?;
    let r_list = if a.r_list.is_empty() { cfg.r_list.clone().unwrap_or_else(|| vec![8, 16, 32, 64, 128]) } else { a.r_list.clone() };
    if r_list.len() < 2 || r_list.contains(&0) {
        return Err(Error::Config("r-list needs at least two positive step counts".into()));
    }
    let paths = positive("paths", a.paths.or(cfg.paths).unwrap_or(200))?;
    let stream = PcgStream::new(seed, a.stream_id.or(cfg.stream_id).unwrap_or(1));
    let rep = strong_convergence(&p, &r_list, paths, &stream)?;
    let mut t = Table::new(&["model", "r", "rms_error", "paths", "r_fine", "slope", "c_st"]);
    for row in &rep.rows {
        t.push(vec![
            rep.model.clone(),
            row.r.to_string(),
            fmt_f64(row.rms_error),
            rep.paths.to_string(),
            rep.r_fine.to_string(),
            fmt_f64(rep.slope),
            fmt_f64(rep.c_st),
        ]);
    }
    Ok(Outcome { bytes: t.to_bytes()?, pass: true })
}

fn observable_of(a: &EstimateArgs, cfg: &RunConfig) -> Result<ObservableTensor> {
    match a.observable.clone().or_else(|| cfg.observable.clone()) {
        Some(text) if text.trim_start().starts_with('{') => ObservableTensor::from_json(&text),
        Some(path) => ObservableTensor::load(&path).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("observable {path}: {io}")),
            other => other,
        }),
        None => {
            let d = positive("d", a.d.or(cfg.d).unwrap_or(1))?;
            Ok(ObservableTensor::terminal_power(d, 0))
        }
    }
}

#[derive(Serialize)]
struct RepeatSummary {
    repeats: usize,
    within_eps: usize,
    success_rate: Option<f64>,
    runs: Vec<EstimateReport>,
}

fn cmd_estimate(a: &EstimateArgs, cfg: &RunConfig, seed: u64) -> Result<Outcome> {
    let p = model_of(&a.model, cfg)?;
    let c = observable_of(a, cfg)?;
    let algorithm: Algorithm = a.algorithm.or(cfg.algorithm).unwrap_or(AlgorithmArg::Multi).into();
    let acc = match (a.eps, a.eps_rel.or(cfg.eps_rel), cfg.eps.as_ref().and_then(|v| v.first().copied())) {
        (Some(e), _, _) => Accuracy::Absolute(positive("eps", e)?),
        (None, Some(er), _) => Accuracy::Relative(in_unit("eps-rel", er, false)?),
        (None, None, Some(e)) => Accuracy::Absolute(positive("eps", e)?),
        (None, None, None) => Accuracy::Relative(0.5),
    };
    let delta = in_unit("delta", a.delta.or(cfg.delta).unwrap_or(0.2), false)?;
    let repeats = positive("repeats", a.repeats.or(cfg.repeats).unwrap_or(1))?;
    let stream_id = a.stream_id.or(cfg.stream_id).unwrap_or(1);
    let qlss: QlssMode = a.qlss_mode.or(cfg.qlss_mode).unwrap_or(QlssArg::Honest).into();
    let overlap: OverlapMode = a.overlap_mode.or(cfg.overlap_mode).unwrap_or(OverlapArg::Shot).into();
    let plan_stream = PcgStream::new(seed, stream_id);
    let plan = plan_for(algorithm, &p, &c, acc, delta, a.c_st.or(cfg.c_st), &plan_stream)?;
    let est = Estimator::new(&p, &c, plan, qlss, overlap)?;
    let mut runs = Vec::with_capacity(repeats);
    for k in 0..repeats as u64 {
        runs.push(est.run(&PcgStream::new(seed, stream_id + k))?);
    }
    if repeats == 1 {
        let run = runs.pop().expect("one run");
        return Ok(Outcome { bytes: json_bytes(&run)?, pass: true });
    }
    let within = runs.iter().filter(|r| r.within_eps == Some(true)).count();
    let success_rate = runs[0].truth.map(|_| within as f64 / repeats as f64);
    let summary = RepeatSummary { repeats, within_eps: within, success_rate, runs };
    Ok(Outcome { bytes: json_bytes(&summary)?, pass: true })
}

fn cmd_khintchine(a: &KhintchineArgs, cfg: &RunConfig) -> Result<Outcome> {
    let kmax = a.kmax.or(cfg.kmax).unwrap_or(3);
    let lmax = a.lmax.or(cfg.lmax).unwrap_or(5);
    let rows = check_khintchine_bound(kmax, lmax).map_err(|e| Error::Config(e.to_string()))?;
    let mut t = Table::new(&["k", "l", "count", "enumerated", "bound", "pass"]);
    for r in &rows {
        t.push(vec![
            r.k.to_string(),
            r.l.to_string(),
            r.count.to_string(),
            r.enumerated.map(|v| v.to_string()).unwrap_or_default(),
            r.bound.to_string(),
            bool_cell(r.pass),
        ]);
    }
    Ok(Outcome { bytes: t.to_bytes()?, pass: rows.iter().all(|r| r.pass) })
}

#[derive(Serialize)]
struct CheckEntry {
    check: String,
    pass: Option<bool>,
    detail: serde_json::Value,
}

fn entry<T: Serialize>(check: impl Into<String>, pass: Option<bool>, v: &T) -> Result<CheckEntry> {
    Ok(CheckEntry { check: check.into(), pass, detail: serde_json::to_value(v)? })
}

fn cmd_report(a: &ModelArgs, cfg: &RunConfig) -> Result<Outcome> {
    let p = model_of(&a.model, cfg)?;
    let mut checks = Vec::new();
    let b = validate_bounds(&p, a.samples.unwrap_or(101))?;
    checks.push(entry("validate_bounds", Some(b.pass), &b)?);
    for eps in [1e-2, 1e-4] {
        let krm = choose_krm_phi(&p, eps)?;
        if krm.m <= MAX_CHECK_FINE_STEPS {
            let rep = dyson_error_bound_check(&p, TimeGrid::new(p.t_end, krm.r, krm.m as usize), krm.k, eps)?;
            checks.push(entry(format!("dyson_error eps={eps}"), Some(rep.pass), &rep)?);
        }
    }
    for eps in [1e-1, 1e-3] {
        let krm = choose_krm_sigma(&p, eps)?;
        if krm.m <= MAX_CHECK_FINE_STEPS {
            let rep = covariance_error_check(&p, TimeGrid::new(p.t_end, krm.r, krm.m as usize), krm.k, eps)?;
            checks.push(entry(format!("covariance_error eps={eps}"), Some(rep.pass), &rep)?);
        }
    }
    let dyson_ok = p.require_dyson().is_ok();
    if dyson_ok {
        let r_c = choose_krm_sqrt(&p, 1.0)?.r;
        let rep = eigen_containment(&p, r_c)?;
        checks.push(entry("eigen_containment", Some(rep.pass), &rep)?);
    }
    for r in [8usize, 32] {
        for pad in [0usize, 8] {
            let grid = TimeGrid::new(p.t_end, r, 1);
            let blocks = (0..r)
                .map(|n| exact_phi(&p, grid.t(n), grid.t(n + 1), crate::dyson::reference_steps(grid.dt)))
                .collect::<Result<Vec<_>>>()?;
            let kind = if pad > 0 { SystemKind::DysonPadded } else { SystemKind::Dyson };
            let sys = assemble(kind, blocks, pad)?;
            if sys.dim() <= crate::history::DENSE_LIMIT {
                let rep = norm_bound_report(&sys, p.bounds.eta, p.t_end, true)?;
                checks.push(entry(format!("inverse_norm r={r} R={pad}"), Some(rep.pass), &rep)?);
            }
        }
    }
    let r0 = em_min_steps(&p);
    for r in [r0.max(16), r0.max(64)] {
        let grid = TimeGrid::new(p.t_end, r, 1);
        let rep = em_norm_report(&p, &grid)?;
        let pass = if rep.skipped.is_some() { None } else { Some(rep.pass) };
        checks.push(entry(format!("em_system r={r}"), pass, &rep)?);
        if assemble_em_system(&p, &grid)?.dim() > crate::history::DENSE_LIMIT {
            break;
        }
    }
    let kh = check_khintchine_bound(3, 5)?;
    checks.push(entry("khintchine", Some(kh.iter().all(|r| r.pass)), &kh)?);
    let pass = checks.iter().all(|c| c.pass != Some(false));
    #[derive(Serialize)]
    struct Summary<'a> {
        model: &'a str,
        pass: bool,
        checks: Vec<CheckEntry>,
    }
    Ok(Outcome { bytes: json_bytes(&Summary { model: &p.name, pass, checks })?, pass })
}

/// Executes a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let seed = resolve_seed(cli.seed, &cfg)?;
    let out = cli.out.clone().or_else(|| cfg.out.clone());
    let outcome = match &cli.command {
        Command::ValidateBounds(a) => cmd_validate(a, &cfg)?,
        Command::DysonError(a) => cmd_accuracy(a, &cfg, false)?,
        Command::CovarianceError(a) => cmd_accuracy(a, &cfg, true)?,
        Command::History(a) => cmd_history(a, &cfg, seed)?,
        Command::EmConvergence(a) => cmd_em(a, &cfg, seed)?,
        Command::Estimate(a) => cmd_estimate(a, &cfg, seed)?,
        Command::CheckKhintchine(a) => cmd_khintchine(a, &cfg)?,
        Command::Report(a) => cmd_report(a, &cfg)?,
    };
    emit(&out, &outcome.bytes)?;
    Ok(if outcome.pass { 0 } else { 2 })
}

/// Parses `args` and runs them, printing errors to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_cells_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"model":"ou","bogus":1}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"model":"ou","eps":[0.1],"K":3,"qlss_mode":"adversarial"}"#).unwrap();
        assert_eq!(c.k, Some(3));
    }

    #[test]
    fn seed_flag_wins() {
        let cfg = RunConfig { seed: Some(5), ..Default::default() };
        assert_eq!(resolve_seed(Some(9), &cfg).unwrap(), 9);
    }

    #[test]
    fn parse_errors_are_config_errors() {
        assert_eq!(main_with_args(["qsde", "no-such-command"]), 1);
        assert_eq!(main_with_args(["qsde", "estimate", "--eps", "0.1", "--eps-rel", "0.5"]), 1);
    }
}
