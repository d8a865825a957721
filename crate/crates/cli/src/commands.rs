//! Subcommands: synth, detect, explain, evaluate, tune, render.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use cfens_core::data::{
    generate_synthetic, load_csv, split_points, write_csv, AnomalyKind, BaseKind, GroundTruth, SyntheticSpec,
};
use cfens_core::detect::{Detector, DetectorState, LinearReconDetector, ZScoreDetector};
use cfens_core::evaluate::{detect_windows, references, run_method, Detection, Setup};
use cfens_core::metrics::render_table;
use cfens_core::sample::{fit_forecaster, Forecaster};
use cfens_core::tune::{grid_search, write_leaderboard_csv};
use cfens_core::{make_window, Error, Method, Result, TimeSeries, Window};
use clap::{Args, Parser, Subcommand};

use crate::config::{truth_sidecar, CommonArgs, DetectorKind, FileConfig, RunConfig};
use crate::ext::{external_detector, serve};
use crate::render::{render_map_svg, render_pages};
use crate::report::{AnomalyEntry, DetectorInfo, EnumerationCounts, Report, SeriesInfo, SCHEMA};

#[derive(Debug, Parser)]
#[command(name = "cfens", version, about = "Counterfactual ensemble explanations for time-series anomaly detectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic series with injected anomalies
    Synth(SynthArgs),
    /// Score every timestamp and write the detections
    Detect(CommonArgs),
    /// Explain detected anomalies, keeping loss traces
    Explain(ExplainArgs),
    /// Run the evaluation protocol and write the metric report
    Evaluate(CommonArgs),
    /// Grid-search the hyperparameters of gradient methods
    Tune(CommonArgs),
    /// Render an ensemble stored in a report as SVG
    Render(RenderArgs),
    /// Serve the z-score detector over the external-detector protocol
    #[command(hide = true)]
    ZscoreServer,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// JSON configuration file; its `synth` key seeds the settings
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output CSV; the ground truth goes to `<stem>.truth.json` beside it
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub dims: Option<usize>,
    /// Number of injected events
    #[arg(long)]
    pub count: Option<usize>,
    /// Channels perturbed per event
    #[arg(long)]
    pub channels: Option<usize>,
    /// sine|ar-noise|mixed
    #[arg(long)]
    pub base: Option<BaseKind>,
    /// Comma-separated subset of spike,level-shift,drift
    #[arg(long, value_delimiter = ',')]
    pub kinds: Option<Vec<AnomalyKind>>,
    /// Amplitude range in base standard deviations, `LO,HI`
    #[arg(long, value_delimiter = ',')]
    pub amplitude: Option<Vec<f64>>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long = "S")]
    pub suspect_len: Option<usize>,
    #[arg(long)]
    pub context: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Explain only the window whose suspect part starts here
    #[arg(long)]
    pub start: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    /// Report written by explain or evaluate
    #[arg(long)]
    pub report: PathBuf,
    /// Method whose ensemble is drawn (defaults to the first run)
    #[arg(long)]
    pub method: Option<Method>,
    /// Position of the anomaly in the report
    #[arg(long, default_value_t = 0)]
    pub anomaly: usize,
    /// Comma-separated dimensions to draw (default: all, paginated)
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    /// Also export the perturbation map of the member at this position as a heat map
    #[arg(long)]
    pub heatmap: Option<usize>,
    /// Output SVG path
    #[arg(long)]
    pub out: PathBuf,
}

/// Run `cli` inside a worker pool capped by `CFENS_THREADS`.
pub fn run(cli: Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("CFENS_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::invalid("CFENS_THREADS", format!("expected a positive integer, got `{v}`")))?;
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::invalid("CFENS_THREADS", e.to_string()))?;
    pool.install(|| dispatch(cli.command))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Detect(a) => cmd_detect(&RunConfig::resolve(&a)?),
        Command::Explain(a) => cmd_explain(&RunConfig::resolve(&a.common)?, a.start),
        Command::Evaluate(a) => cmd_evaluate(&RunConfig::resolve(&a)?),
        Command::Tune(a) => cmd_tune(&RunConfig::resolve(&a)?),
        Command::Render(a) => cmd_render(&a),
        Command::ZscoreServer => serve(
            &ZScoreDetector::default(),
            std::io::stdin().lock(),
            std::io::stdout().lock(),
        ),
    }
}

/// Read a file, naming it in the error.
pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(p) => FileConfig::load(p)?.synth.unwrap_or_default(),
        None => SyntheticSpec::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = args.$field.clone() {
                spec.$field = v;
            }
        )*};
    }
    set!(seed, length, dims, count, channels, base, kinds, noise);
    if let Some(v) = args.suspect_len {
        spec.suspect_len = v;
    }
    if let Some(v) = args.context {
        spec.context_len = v;
    }
    if let Some(a) = &args.amplitude {
        let [lo, hi] = a[..] else {
            return Err(Error::invalid("amplitude", "expected LO,HI"));
        };
        spec.amplitude = (lo, hi);
    }
    let (series, truth) = generate_synthetic(&spec)?;
    if let Some(parent) = args.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_csv(&series, &args.output)?;
    let sidecar = truth_sidecar(&args.output);
    write_file(&sidecar, &to_json(&truth)?)?;
    println!(
        "wrote {} ({} x {}, {} events) and {}",
        args.output.display(),
        series.len(),
        series.dims(),
        truth.events.len(),
        sidecar.display()
    );
    Ok(())
}

/// Inputs shared by the computing subcommands.
pub struct Prepared {
    pub series: TimeSeries,
    pub truth: Option<GroundTruth>,
    pub train_end: usize,
    pub val_end: usize,
    pub detector: Box<dyn Detector>,
    pub info: DetectorInfo,
    pub forecaster: Forecaster,
}

impl Prepared {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let input = cfg.input()?;
        if !input.is_file() {
            return Err(Error::invalid("input", format!("{} is not a readable file", input.display())));
        }
        let series = load_csv(input)?;
        let truth = match cfg.truth_path() {
            Some(p) => Some(serde_json::from_str::<GroundTruth>(&read_text(&p)?)?),
            None => None,
        };
        let (train_end, val_end) = split_points(series.len())?;
        let train = series.slice(0, train_end);
        let (detector, info): (Box<dyn Detector>, DetectorInfo) = match cfg.detector {
            DetectorKind::Zscore => {
                let d = ZScoreDetector::default();
                (Box::new(d.clone()), DetectorInfo::Builtin(DetectorState::Zscore(d)))
            }
            DetectorKind::Recon => {
                let r = &cfg.recon;
                let d = LinearReconDetector::fit(&train, cfg.suspect_len, r.components, r.quantile, r.gain)?;
                (Box::new(d.clone()), DetectorInfo::Builtin(DetectorState::LinearRecon(d)))
            }
            DetectorKind::Ext => {
                let command = cfg.ext_command.clone().unwrap_or_default();
                (Box::new(external_detector(&command)?), DetectorInfo::External { command })
            }
        };
        let forecaster = fit_forecaster(&train, cfg.ar_order)?;
        Ok(Self {
            series,
            truth,
            train_end,
            val_end,
            detector,
            info,
            forecaster,
        })
    }

    pub fn detect(&self, cfg: &RunConfig) -> Result<Detection> {
        detect_windows(
            self.detector.as_ref(),
            &cfg.rule()?,
            &self.series,
            cfg.mode,
            cfg.suspect_len,
            cfg.context,
            self.val_end,
        )
    }

    pub fn setup(&self, cfg: &RunConfig, keep_traces: bool) -> Result<Setup<'_>> {
        Ok(Setup {
            detector: self.detector.as_ref(),
            rule: cfg.rule()?,
            forecaster: Some(&self.forecaster),
            truth: self.truth.as_ref(),
            samples: cfg.samples,
            seed: cfg.seed,
            keep_traces,
        })
    }

    fn true_dims(&self, w: &Window) -> Option<Vec<usize>> {
        self.truth
            .as_ref()
            .and_then(|t| t.event_overlapping(w.origin.start, w.suspect_len()))
            .map(|e| e.channels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect())
    }
}

pub fn cmd_detect(cfg: &RunConfig) -> Result<()> {
    let prep = Prepared::load(cfg)?;
    let detection = prep.detect(cfg)?;
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("detections.csv");
    let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
    let labels = prep.series.labels.as_ref();
    writeln!(w, "timestamp,score,predicted{}", if labels.is_some() { ",label" } else { "" })?;
    for (t, (s, p)) in detection.scores.iter().zip(&detection.predicted).enumerate() {
        match labels {
            Some(l) => writeln!(w, "{t},{s},{p},{}", l[t])?,
            None => writeln!(w, "{t},{s},{p}")?,
        }
    }
    w.flush()?;
    write_file(&cfg.out.join("detector.json"), &to_json(&prep.info)?)?;
    let counts = EnumerationCounts::from(&detection.enumeration);
    println!(
        "wrote {}: {} flagged timestamps, {} windows after t={} ({} skipped, {} truncated)",
        path.display(),
        detection.predicted.iter().filter(|&&p| p == 1).count(),
        counts.windows,
        prep.val_end,
        counts.skipped,
        counts.truncated
    );
    Ok(())
}

/// Detect, enumerate and run every configured method on the same windows.
pub fn build_report(cfg: &RunConfig, command: &str, keep_traces: bool, start: Option<usize>) -> Result<Report> {
    let prep = Prepared::load(cfg)?;
    let detection = prep.detect(cfg)?;
    let windows = match start {
        Some(t) => vec![make_window(&prep.series, t, cfg.suspect_len, cfg.context)?],
        None => detection.enumeration.windows.clone(),
    };
    if windows.is_empty() {
        return Err(Error::NoAnomalies);
    }
    let setup = prep.setup(cfg, keep_traces)?;
    let refs = references(&setup, &windows)?;
    let runs = cfg
        .methods
        .iter()
        .map(|&m| run_method(&setup, &windows, &refs, m, &cfg.hyperparams(m)))
        .collect::<Result<Vec<_>>>()?;
    let anomalies = windows
        .iter()
        .zip(refs)
        .map(|(w, reference)| AnomalyEntry {
            true_dims: prep.true_dims(w),
            window: w.clone(),
            reference,
        })
        .collect();
    Ok(Report {
        schema: SCHEMA.to_string(),
        command: command.to_string(),
        config: cfg.clone(),
        series: SeriesInfo {
            name: prep.series.name.clone(),
            length: prep.series.len(),
            dims: prep.series.dims(),
            train_end: prep.train_end,
            val_end: prep.val_end,
        },
        detector: prep.info.clone(),
        forecaster: Some(prep.forecaster.clone()),
        enumeration: EnumerationCounts::from(&detection.enumeration),
        anomalies,
        runs,
    })
}

pub fn cmd_explain(cfg: &RunConfig, start: Option<usize>) -> Result<()> {
    let report = build_report(cfg, "explain", true, start)?;
    let path = cfg.out.join("explain.json");
    write_file(&path, &report.to_json()?)?;
    for run in &report.runs {
        let sizes: Vec<String> = run.results.iter().map(|r| r.ensemble.len().to_string()).collect();
        println!("{}: ensemble sizes [{}]", run.method, sizes.join(", "));
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn summary_text(report: &Report) -> String {
    let e = &report.enumeration;
    let reports: Vec<_> = report.runs.iter().map(|r| r.report.clone()).collect();
    format!(
        "series {} ({} x {}), anomalies after t={}: {} windows from {} events ({} skipped, {} truncated, {} overlapping)\n\n{}",
        report.series.name,
        report.series.length,
        report.series.dims,
        report.series.val_end,
        e.windows,
        e.events,
        e.skipped,
        e.truncated,
        e.overlapping,
        render_table(&reports)
    )
}

/// File name of page `k` of `pages`: `base.svg` or `base-p{k}.svg`.
fn page_path(base: &Path, k: usize, pages: usize) -> PathBuf {
    if pages == 1 {
        return base.to_path_buf();
    }
    let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    base.with_file_name(format!("{stem}-p{k}.svg"))
}

fn write_pages(base: &Path, pages: &[String]) -> Result<()> {
    for (k, page) in pages.iter().enumerate() {
        write_file(&page_path(base, k, pages.len()), page)?;
    }
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let report = build_report(cfg, "evaluate", false, None)?;
    write_file(&cfg.out.join("report.json"), &report.to_json()?)?;
    let text = summary_text(&report);
    write_file(&cfg.out.join("report.txt"), &text)?;
    let rule = cfg.rule()?;
    for run in &report.runs {
        for (a, r) in report.anomalies.iter().zip(&run.results) {
            let pages = render_pages(&a.window, &r.ensemble, &rule, None)?;
            let base = cfg
                .out
                .join("svg")
                .join(format!("{}-{}.svg", run.method, a.window.origin.start));
            write_pages(&base, &pages)?;
        }
    }
    print!("{text}");
    Ok(())
}

pub fn cmd_tune(cfg: &RunConfig) -> Result<()> {
    if let Some(m) = cfg.methods.iter().find(|m| !m.is_gradient()) {
        return Err(Error::invalid("method", format!("{m} has no tunable hyperparameters")));
    }
    let prep = Prepared::load(cfg)?;
    let windows = prep.detect(cfg)?.enumeration.windows;
    if windows.is_empty() {
        return Err(Error::NoAnomalies);
    }
    let setup = prep.setup(cfg, false)?;
    let refs = references(&setup, &windows)?;
    for &m in &cfg.methods {
        let outcome = grid_search(&setup, &windows, &refs, m, &cfg.hyperparams(m), &cfg.grid)?;
        let dir = cfg.out.join(format!("tune-{m}"));
        fs::create_dir_all(&dir)?;
        write_leaderboard_csv(dir.join("leaderboard.csv"), &outcome.leaderboard)?;
        write_file(&dir.join("leaderboard.json"), &to_json(&outcome)?)?;
        write_file(&dir.join("best.json"), &to_json(&outcome.best)?)?;
        let row = &outcome.leaderboard[outcome.selected];
        println!(
            "{m}: selected #{} of {} (lambda {} lambdaT {} sigma_max {} lr {}; failure {:.1}%, feasible {}) -> {}",
            row.index,
            outcome.leaderboard.len(),
            row.point.lambda_joint,
            row.point.lambda_t,
            row.point.sigma_max,
            row.point.learning_rate,
            100.0 * row.failure_rate,
            row.feasible,
            dir.join("best.json").display()
        );
    }
    Ok(())
}

pub fn cmd_render(args: &RenderArgs) -> Result<()> {
    let report = Report::load(&args.report)?;
    let run = match args.method {
        Some(m) => report.run(m)?,
        None => report
            .runs
            .first()
            .ok_or_else(|| Error::invalid("report", "contains no method runs"))?,
    };
    let anomaly = report.anomalies.get(args.anomaly).ok_or_else(|| {
        Error::invalid(
            "anomaly",
            format!("index {} out of range for {} anomalies", args.anomaly, report.anomalies.len()),
        )
    })?;
    let result = &run.results[args.anomaly];
    let rule = report.config.rule()?;
    let pages = render_pages(&anomaly.window, &result.ensemble, &rule, args.dims.as_deref())?;
    write_pages(&args.out, &pages)?;
    println!("wrote {} page(s) to {}", pages.len(), args.out.display());
    if let Some(pos) = args.heatmap {
        let member = result.ensemble.members.get(pos).ok_or_else(|| {
            Error::invalid(
                "heatmap",
                format!("position {pos} out of range for {} members", result.ensemble.len()),
            )
        })?;
        let rank = member.rank;
        let map = member
            .map
            .as_ref()
            .ok_or_else(|| Error::invalid("heatmap", format!("{} members carry no perturbation map", run.method)))?;
        let title = format!("{} · suspect at {} · rank {rank}", run.method, anomaly.window.origin.start);
        let stem = args.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let path = args.out.with_file_name(format!("{stem}-map.svg"));
        write_file(&path, &render_map_svg(map, &title))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
