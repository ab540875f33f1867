mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use survsmooth::boostsel::{select_model, SelectConfig};
use survsmooth::breakpoint::{estimate_breakpoint_from, BreakpointOptions, DEFAULT_B, DEFAULT_GRID_POINTS};
use survsmooth::coxpois::expand_pseudo;
use survsmooth::kmcurve::{km_fit, write_km_csv};
use survsmooth::pirls::{fit_terms, FitResult, OuterConfig};
use survsmooth::report::{compare_table, write_compare_csv, write_curves_csv, FitReport};
use survsmooth::simgen::{simulate_cohort, SimSpec};
use survsmooth::smooths::{DesignOptions, ModelSpec, TermKind};
use survsmooth::survdata::{load_cohort_with, write_cohort, CohortTable, LoadOptions};
use survsmooth::{Error, Result};

use manifest::Run;

const CURVE_POINTS: usize = 101;

/// Smooth additive Cox models with frailty, fitted through Poisson pseudo-data.
///
/// Parallel sections honor RAYON_NUM_THREADS; results do not depend on it.
#[derive(Debug, Parser)]
#[command(name = "survsmooth", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a cohort CSV and write a normalized copy with a summary.
    Ingest(IngestArgs),
    /// Kaplan-Meier curves with delayed entry.
    Km(KmArgs),
    /// Fit one model spec, or compare several.
    Fit(FitArgs),
    /// Boost-forward / penalise-backward term selection.
    Select(SelectArgs),
    /// Breakpoint of a fitted smooth with a credible interval.
    Threshold(ThresholdArgs),
    /// Simulate a yearly cohort from a simulation spec.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args, Serialize)]
struct InputArgs {
    /// Cohort CSV (subject_id, location_id, t_start, t_stop, event, covariates...).
    #[arg(long)]
    #[serde(skip)]
    input: PathBuf,
    /// Fill empty covariate cells from the subject's preceding interval.
    #[arg(long)]
    carry_forward: bool,
}

#[derive(Debug, Args, Serialize)]
struct IngestArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: InputArgs,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Also write the Poisson pseudo-data.
    #[arg(long)]
    pseudo: bool,
}

#[derive(Debug, Args, Serialize)]
struct KmArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: InputArgs,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Covariate, location_id or subject_id to stratify the curves by.
    #[arg(long)]
    group: Option<String>,
}

#[derive(Debug, Args, Serialize)]
struct FitTuning {
    /// Basis dimension for every spline term.
    #[arg(long)]
    k: Option<usize>,
    /// Sup-norm of the LAML gradient declaring convergence.
    #[arg(long)]
    grad_tol: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct FitArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: InputArgs,
    /// Model spec JSON.
    #[arg(long, required_unless_present = "compare")]
    #[serde(skip)]
    spec: Option<PathBuf>,
    /// Model specs to fit and tabulate side by side.
    #[arg(long, num_args = 1..)]
    #[serde(skip)]
    compare: Vec<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    tuning: FitTuning,
}

#[derive(Debug, Args, Serialize)]
struct SelectArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: InputArgs,
    /// Model spec JSON with candidate terms and `min_model`.
    #[arg(long)]
    #[serde(skip)]
    spec: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Boosting steps per forward phase.
    #[arg(long, default_value_t = 5)]
    m_forward: usize,
    /// AIC change below which selection stops.
    #[arg(long)]
    aic_tol: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    tuning: FitTuning,
}

#[derive(Debug, Args, Serialize)]
struct ThresholdArgs {
    /// Fit JSON written by `fit` or `select`.
    #[arg(long, conflicts_with_all = ["input", "spec"])]
    #[serde(skip)]
    fit: Option<PathBuf>,
    /// Cohort CSV to fit first (with --spec).
    #[arg(long, requires = "spec")]
    #[serde(skip)]
    input: Option<PathBuf>,
    #[arg(long, requires = "input")]
    #[serde(skip)]
    spec: Option<PathBuf>,
    #[arg(long)]
    carry_forward: bool,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Spline term to analyse; may be omitted when the fit has one spline.
    #[arg(long)]
    term: Option<String>,
    #[arg(long)]
    seed: u64,
    /// Posterior draws.
    #[arg(long, default_value_t = DEFAULT_B)]
    b_samples: usize,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    grid_points: usize,
    /// Let the maximum fall where the fitted slope is not positive.
    #[arg(long)]
    any_slope: bool,
    #[command(flatten)]
    #[serde(flatten)]
    tuning: FitTuning,
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    /// Simulation spec JSON.
    #[arg(long)]
    #[serde(skip)]
    spec: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Replaces the seed stored in the spec.
    #[arg(long)]
    seed: u64,
}

#[derive(Serialize)]
struct CohortSummary {
    n_intervals: usize,
    n_subjects: usize,
    n_locations: usize,
    n_events: usize,
    n_event_times: usize,
    t_min: f64,
    t_max: f64,
    covariates: Vec<String>,
}

#[derive(Serialize)]
struct KmGroup<'a> {
    group: &'a str,
    #[serde(flatten)]
    curve: &'a survsmooth::kmcurve::KMCurve,
}

fn config_value<T: Serialize>(args: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(args)?)
}

fn load(data: &InputArgs) -> Result<CohortTable> {
    load_cohort_with(
        &data.input,
        &LoadOptions {
            carry_forward: data.carry_forward,
        },
    )
}

fn load_spec(path: &Path, k: Option<usize>) -> Result<ModelSpec> {
    let spec = ModelSpec::load(path)?;
    Ok(match k {
        Some(k) => spec.with_k(k),
        None => spec,
    })
}

fn outer_config(t: &FitTuning) -> OuterConfig {
    let mut c = OuterConfig::default();
    if let Some(g) = t.grad_tol {
        c.grad_tol = g;
    }
    c
}

fn model_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn write_fit(run: &mut Run, fit: &FitResult, json: &str, csv: &str) -> Result<FitReport> {
    let report = FitReport::from_fit(fit);
    run.write_json(json, &report)?;
    run.write_csv(csv, |b| write_curves_csv(&report, CURVE_POINTS, b))?;
    Ok(report)
}

fn ingest(a: &IngestArgs) -> Result<()> {
    let cohort = load(&a.data)?;
    let mut run = Run::start("ingest", config_value(a)?, &[("input", &a.data.input)], &a.out)?;
    let ivs = cohort.intervals();
    let mut locations: Vec<&str> = ivs.iter().map(|i| i.location_id.as_str()).collect();
    locations.sort_unstable();
    locations.dedup();
    let summary = CohortSummary {
        n_intervals: ivs.len(),
        n_subjects: cohort.n_subjects(),
        n_locations: locations.len(),
        n_events: cohort.n_events(),
        n_event_times: cohort.distinct_event_times().len(),
        t_min: ivs.iter().map(|i| i.t_start).fold(f64::INFINITY, f64::min),
        t_max: ivs.iter().map(|i| i.t_stop).fold(f64::NEG_INFINITY, f64::max),
        covariates: cohort.covariate_names().to_vec(),
    };
    run.write_json("cohort_summary.json", &summary)?;
    run.write_csv("cohort.csv", |b| write_cohort(&cohort, b))?;
    if a.pseudo {
        let pseudo = expand_pseudo(&cohort)?;
        run.write_csv("pseudo.csv", |b| pseudo.write_csv(b))?;
    }
    run.finish()?;
    Ok(())
}

fn km(a: &KmArgs) -> Result<()> {
    let cohort = load(&a.data)?;
    let curves = km_fit(&cohort, a.group.as_deref())?;
    let mut run = Run::start("km", config_value(a)?, &[("input", &a.data.input)], &a.out)?;
    run.write_csv("km.csv", |b| write_km_csv(&curves, b))?;
    let groups: Vec<KmGroup> = curves
        .iter()
        .map(|(g, c)| KmGroup { group: g, curve: c })
        .collect();
    run.write_json("km.json", &serde_json::json!({ "curves": groups }))?;
    run.finish()?;
    Ok(())
}

fn fit(a: &FitArgs) -> Result<()> {
    let cohort = load(&a.data)?;
    let mut paths: Vec<&PathBuf> = a.spec.iter().collect();
    paths.extend(&a.compare);
    let specs: Vec<(String, ModelSpec)> = paths
        .iter()
        .map(|p| Ok((model_name(p), load_spec(p, a.tuning.k)?)))
        .collect::<Result<_>>()?;
    let mut names: Vec<&str> = specs.iter().map(|(n, _)| n.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Spec("model spec files must have distinct names".into()));
    }
    let mut inputs: Vec<(&str, &Path)> = vec![("input", &a.data.input)];
    inputs.extend(paths.iter().map(|p| ("spec", p.as_path())));
    let mut run = Run::start("fit", config_value(a)?, &inputs, &a.out)?;

    let pseudo = expand_pseudo(&cohort)?;
    let config = outer_config(&a.tuning);
    if a.compare.is_empty() {
        let (_, f) = fit_terms(&pseudo, &specs[0].1.terms, DesignOptions::default(), &config)?;
        write_fit(&mut run, &f, "fit.json", "curves.csv")?;
    } else {
        let mut fits = Vec::with_capacity(specs.len());
        for (name, spec) in &specs {
            log::info!("fitting `{name}`");
            let (_, f) = fit_terms(&pseudo, &spec.terms, DesignOptions::default(), &config)?;
            write_fit(&mut run, &f, &format!("fit_{name}.json"), &format!("curves_{name}.csv"))?;
            fits.push((name.clone(), f));
        }
        let refs: Vec<(String, &FitResult)> = fits.iter().map(|(n, f)| (n.clone(), f)).collect();
        let rows = compare_table(&refs, pseudo.n_events());
        run.write_json("compare.json", &serde_json::json!({ "models": rows }))?;
        run.write_csv("compare.csv", |b| write_compare_csv(&rows, b))?;
    }
    run.finish()?;
    Ok(())
}

fn select(a: &SelectArgs) -> Result<()> {
    let cohort = load(&a.data)?;
    let spec = load_spec(&a.spec, a.tuning.k)?;
    let mut run = Run::start(
        "select",
        config_value(a)?,
        &[("input", &a.data.input), ("spec", &a.spec)],
        &a.out,
    )?;
    let mut config = SelectConfig {
        m_forward: a.m_forward,
        outer: outer_config(&a.tuning),
        ..SelectConfig::default()
    };
    if let Some(t) = a.aic_tol {
        config.aic_tol = t;
    }
    let (_, f, trace) = select_model(&cohort, &spec, &config)?;
    run.write_json("selection_trace.json", &trace)?;
    write_fit(&mut run, &f, "fit.json", "curves.csv")?;
    run.finish()?;
    Ok(())
}

fn threshold(a: &ThresholdArgs) -> Result<()> {
    let mut inputs: Vec<(&str, &Path)> = Vec::new();
    let fitted = match (&a.fit, &a.input, &a.spec) {
        (Some(p), _, _) => {
            inputs.push(("fit", p));
            None
        }
        (None, Some(i), Some(s)) => {
            inputs.push(("input", i));
            inputs.push(("spec", s));
            let cohort = load_cohort_with(
                i,
                &LoadOptions {
                    carry_forward: a.carry_forward,
                },
            )?;
            let spec = load_spec(s, a.tuning.k)?;
            let pseudo = expand_pseudo(&cohort)?;
            let (_, f) = fit_terms(&pseudo, &spec.terms, DesignOptions::default(), &outer_config(&a.tuning))?;
            Some(f)
        }
        _ => return Err(Error::Spec("threshold needs --fit, or --input with --spec".into())),
    };
    let report = match (&fitted, &a.fit) {
        (Some(f), _) => FitReport::from_fit(f),
        (None, Some(p)) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        _ => unreachable!(),
    };
    let splines: Vec<&str> = report
        .terms
        .iter()
        .filter(|t| t.kind == TermKind::Spline)
        .map(|t| t.name.as_str())
        .collect();
    let name = match (&a.term, splines.as_slice()) {
        (Some(t), _) => t.as_str(),
        (None, [only]) => only,
        (None, _) => {
            return Err(Error::Spec(format!(
                "--term is required; spline terms in the fit: {}",
                splines.join(", ")
            )))
        }
    };
    let term = report
        .term(name)
        .ok_or_else(|| Error::Spec(format!("term `{name}` not in the fit")))?;

    let mut run = Run::start("threshold", config_value(a)?, &inputs, &a.out)?;
    if let Some(f) = &fitted {
        write_fit(&mut run, f, "fit.json", "curves.csv")?;
    }
    let opts = BreakpointOptions {
        b_samples: a.b_samples,
        seed: a.seed,
        grid_points: a.grid_points,
        positive_slope: !a.any_slope,
    };
    let bp = estimate_breakpoint_from(
        &term.name,
        &term.covariate,
        &term.basis,
        &term.coefficient_vector(),
        &term.covariance_matrix()?,
        &opts,
    )?;
    run.write_json("breakpoint.json", &bp)?;
    run.write_csv("breakpoint.csv", |b| bp.write_csv(b))?;
    run.finish()?;
    Ok(())
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let mut spec = SimSpec::load(&a.spec)?;
    spec.seed = a.seed;
    let (cohort, truth) = simulate_cohort(&spec)?;
    let mut run = Run::start("simulate", config_value(a)?, &[("spec", &a.spec)], &a.out)?;
    run.write_csv("cohort.csv", |b| write_cohort(&cohort, b))?;
    run.write_json("truth.json", &truth)?;
    run.finish()?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Km(a) => km(a),
        Command::Fit(a) => fit(a),
        Command::Select(a) => select(a),
        Command::Threshold(a) => threshold(a),
        Command::Simulate(a) => simulate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
