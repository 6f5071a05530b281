//! Command-line front end: `estimate`, `synth`, `eval` and `recover-demo`.
//!
//! Every command loads a [`PipelineConfig`] from an optional TOML file,
//! applies flag overrides on top, and writes its outputs atomically.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rppg_core::eval::{
    ablation_run, error_histogram, uniform_edges, AblationConfig, AblationRow, EvalError, EvalSource, SourceFailure,
};
use rppg_core::hr::HrEstimate;
use rppg_core::ingest::{
    load_ground_truth, load_landmark_track, load_rgb_traces, synth_scenario, write_ground_truth,
    write_landmark_track, write_rgb_traces, DropoutEvent, IngestError, SynthScenario,
};
use rppg_core::pipeline::{estimate, PipelineConfig, PipelineError, Segment, SourceInput};
use rppg_core::recovery::{run_recovery, write_recovery_log, RecoveryError, RecoveryState, ReplayTracker};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_PIPELINE: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

/// Error bins for the eval histogram: 1 bpm wide over [-20, 20].
pub const HISTOGRAM_RANGE: (f64, f64, f64) = (-20.0, 20.0, 1.0);
/// The batch fails when more than this fraction of sources fail.
pub const MAX_FAILED_FRACTION: f64 = 0.5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Input { path: String, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Pipeline(#[from] PipelineError),
    #[error("recovery: {0}")]
    Recovery(#[from] RecoveryError),
    #[error("eval: {0}")]
    Eval(#[from] EvalError),
    #[error("{failed} of {total} sources failed")]
    PartialBatch { failed: usize, total: usize },
}

impl CliError {
    fn input(path: &Path, message: impl ToString) -> Self {
        CliError::Input { path: path.display().to_string(), message: message.to_string() }
    }

    fn ingest(path: &Path, e: IngestError) -> Self {
        match e {
            IngestError::Io { source, .. } => CliError::input(path, source),
            other => CliError::input(path, other),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input { .. } | CliError::Usage(_) => EXIT_INPUT,
            CliError::Pipeline(_) | CliError::Recovery(_) | CliError::Eval(_) => EXIT_PIPELINE,
            CliError::PartialBatch { .. } => EXIT_PARTIAL,
        }
    }

    pub fn record(&self) -> ErrorRecord {
        let (kind, stage, path) = match self {
            CliError::Input { path, .. } => ("input", None, Some(path.clone())),
            CliError::Usage(_) => ("input", None, None),
            CliError::Pipeline(e) => ("pipeline", Some(e.stage().to_string()), None),
            CliError::Recovery(_) => ("pipeline", Some("recovery".to_string()), None),
            CliError::Eval(_) => ("pipeline", Some("eval".to_string()), None),
            CliError::PartialBatch { .. } => ("partial_batch", Some("eval".to_string()), None),
        };
        ErrorRecord { kind, stage, path, message: self.to_string(), exit_code: self.exit_code() }
    }
}

/// Written to stderr as one JSON line when a command fails.
#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub message: String,
    pub exit_code: i32,
}

#[derive(Debug, Parser)]
#[command(name = "rppg", version, about = "Remote heart-rate estimation from facial feature-point traces")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML pipeline config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub fps: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// RLS forgetting factor.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// RLS initial inverse-correlation value.
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    #[arg(long = "warmup-s", global = true)]
    pub warmup_s: Option<f64>,
    #[arg(long, global = true)]
    pub no_recovery: bool,
    #[arg(long, global = true)]
    pub no_rectify: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the heart rate of one source and write a JSON report.
    Estimate(EstimateArgs),
    /// Generate synthetic sources with known heart rate.
    Synth(SynthArgs),
    /// Score a manifest of sources under every stage configuration.
    Eval(EvalArgs),
    /// Replay tracking recovery and write the event log.
    RecoverDemo(RecoverDemoArgs),
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    /// Landmark track CSV (`frame,point_id,x,y`).
    #[arg(long)]
    pub track: PathBuf,
    /// Intensity CSV (`frame,point_id,r,g,b`).
    #[arg(long)]
    pub traces: PathBuf,
    /// Candidate point sets served on reacquisition, in track format.
    #[arg(long)]
    pub reacquire: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub recovery_log: Option<PathBuf>,
    #[arg(long)]
    pub dump_components: Option<PathBuf>,
    #[arg(long)]
    pub dump_rectified: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Scenario TOML; defaults to a clean 30 s, 72 bpm scenario at 61 fps.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Generate this many sources in numbered subdirectories plus a manifest.
    #[arg(long)]
    pub count: Option<usize>,
    /// With `--count`, spread true heart rates evenly over this range.
    #[arg(long, num_args = 2, value_names = ["LOW", "HIGH"])]
    pub hr_range: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// CSV with columns `source_id,track,traces,truth[,reacquire]`; relative
    /// paths resolve against the manifest's directory.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RecoverDemoArgs {
    /// Landmark track; a dropout scenario is synthesized when omitted.
    #[arg(long)]
    pub track: Option<PathBuf>,
    #[arg(long)]
    pub reacquire: Option<PathBuf>,
    /// Event log CSV (`kind,frame,epsilon`).
    #[arg(long)]
    pub out: PathBuf,
}

/// Loads the config file (if any) and applies flag overrides.
pub fn resolve_config(common: &CommonArgs) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
            toml::from_str::<PipelineConfig>(&text).map_err(|e| CliError::input(path, e.message()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(fps) = common.fps {
        cfg.fps = fps;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(alpha) = common.alpha {
        cfg.rls.alpha = alpha;
    }
    if let Some(delta) = common.delta {
        cfg.rls.delta = delta;
    }
    if let Some(w) = common.warmup_s {
        cfg.rls.warmup_s = w;
    }
    if common.no_recovery {
        cfg.stages.recovery = false;
    }
    if common.no_rectify {
        cfg.stages.rectify = false;
    }
    cfg.validate().map_err(|e| match &common.config {
        Some(path) => CliError::input(path, e),
        None => CliError::Usage(e.to_string()),
    })?;
    Ok(cfg)
}

/// Writes `bytes` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| CliError::input(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::input(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::input(path, e))?;
    tmp.persist(path).map_err(|e| CliError::input(path, e.error))?;
    Ok(())
}

fn render_csv(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<(), IngestError>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| CliError::input(path, e))?;
    Ok(buf)
}

#[derive(Debug, Serialize)]
pub struct EstimateReport<'a> {
    pub average_bpm: f64,
    pub n_points_used: usize,
    pub region: Option<&'a str>,
    pub per_point: &'a [HrEstimate],
    pub segments: &'a [Segment],
    pub flags: &'a [String],
    pub config_echo: &'a PipelineConfig,
}

fn load_source(
    cfg: &PipelineConfig,
    track: &Path,
    traces: &Path,
    reacquire: Option<&Path>,
) -> Result<SourceInput, CliError> {
    let track_frames = load_landmark_track(track).map_err(|e| CliError::ingest(track, e))?;
    let trace_set = load_rgb_traces(traces, cfg.fps).map_err(|e| CliError::ingest(traces, e))?;
    let reacquisition = reacquire
        .map(|p| load_landmark_track(p).map_err(|e| CliError::ingest(p, e)))
        .transpose()?;
    Ok(SourceInput { track: track_frames, traces: trace_set, reacquisition })
}

fn series_csv(header: &str, start: usize, cols: &[&[f64]]) -> Vec<u8> {
    let mut s = String::new();
    s.push_str(header);
    s.push('\n');
    for i in 0..cols[0].len() {
        let _ = write!(s, "{}", start + i);
        for c in cols {
            let _ = write!(s, ",{}", c[i]);
        }
        s.push('\n');
    }
    s.into_bytes()
}

fn point_file(dir: &Path, point_id: u32, start_frame: usize) -> PathBuf {
    dir.join(format!("point_{point_id}_{start_frame}.csv"))
}

pub fn cmd_estimate(cfg: &PipelineConfig, args: &EstimateArgs) -> Result<(), CliError> {
    let input = load_source(cfg, &args.track, &args.traces, args.reacquire.as_deref())?;
    let out = estimate(&input, cfg)?;

    if let Some(path) = &args.recovery_log {
        let mut buf = Vec::new();
        let events = out.recovery.as_ref().map_or(&[][..], |r| &r.events[..]);
        write_recovery_log(&mut buf, events)?;
        write_atomic(path, &buf)?;
    }
    for p in &out.points {
        if let (Some(dir), Some(sep)) = (&args.dump_components, &p.separated) {
            let body = series_csv(
                "frame,blood,pigment,residual",
                sep.start_frame,
                &[&sep.blood_flow_impure, &sep.pigmentation_impure, &sep.residual],
            );
            write_atomic(&point_file(dir, sep.point_id, sep.start_frame), &body)?;
        }
        if let (Some(dir), Some(rect)) = (&args.dump_rectified, &p.rectified) {
            let body = series_csv(
                "frame,pure,interference,weight",
                p.estimate.start_frame,
                &[&rect.blood_flow_pure, &rect.interference_estimate, &rect.weight_history],
            );
            write_atomic(&point_file(dir, p.estimate.point_id, p.estimate.start_frame), &body)?;
        }
    }

    let report = EstimateReport {
        average_bpm: out.report.average_bpm,
        n_points_used: out.report.n_points_used,
        region: out.report.region.as_deref(),
        per_point: &out.report.per_point,
        segments: &out.segments,
        flags: &out.flags,
        config_echo: cfg,
    };
    let mut json = serde_json::to_vec_pretty(&report).map_err(|e| CliError::input(&args.out, e))?;
    json.push(b'\n');
    write_atomic(&args.out, &json)
}

const SYNTH_FILES: [&str; 4] = ["track.csv", "traces.csv", "reacquire.csv", "truth.csv"];

fn write_synth(s: &SynthScenario, dir: &Path) -> Result<(), CliError> {
    let out = synth_scenario(s).map_err(|e| CliError::Usage(e.to_string()))?;
    let [track, traces, reacq, truth] = SYNTH_FILES.map(|f| dir.join(f));
    write_atomic(&track, &render_csv(&track, |b| write_landmark_track(b, &out.track))?)?;
    write_atomic(&traces, &render_csv(&traces, |b| write_rgb_traces(b, &out.traces))?)?;
    write_atomic(&reacq, &render_csv(&reacq, |b| write_landmark_track(b, &out.reacquisition))?)?;
    write_atomic(&truth, &render_csv(&truth, |b| write_ground_truth(b, std::slice::from_ref(&out.truth)))?)?;
    let scenario_path = dir.join("scenario.toml");
    let text = toml::to_string(s).map_err(|e| CliError::input(&scenario_path, e))?;
    write_atomic(&scenario_path, text.as_bytes())
}

fn load_scenario(args: &SynthArgs, common: &CommonArgs) -> Result<SynthScenario, CliError> {
    let mut s = match &args.scenario {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
            let s: SynthScenario = toml::from_str(&text).map_err(|e| CliError::input(path, e.message()))?;
            s.validate().map_err(|e| CliError::input(path, e))?;
            s
        }
        None => SynthScenario::new(72.0, 61.0, 30.0, 1),
    };
    if let Some(fps) = common.fps {
        s.fps = fps;
    }
    if let Some(seed) = common.seed {
        s.seed = seed;
    }
    s.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(s)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    source_id: String,
    track: String,
    traces: String,
    truth: String,
    #[serde(default)]
    reacquire: Option<String>,
}

pub fn cmd_synth(common: &CommonArgs, args: &SynthArgs) -> Result<(), CliError> {
    let base = load_scenario(args, common)?;
    let Some(count) = args.count else {
        return write_synth(&base, &args.out_dir);
    };
    if count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let scenarios: Vec<SynthScenario> = (0..count)
        .map(|i| {
            let mut s = base.clone();
            s.source_id = format!("{}_{i:03}", base.source_id);
            s.seed = base.seed.wrapping_add(i as u64);
            if let Some(range) = &args.hr_range {
                let t = if count > 1 { i as f64 / (count - 1) as f64 } else { 0.0 };
                s.true_hr_bpm = range[0] + t * (range[1] - range[0]);
            }
            s
        })
        .collect();
    {
        use rayon::prelude::*;
        scenarios.par_iter().try_for_each(|s| write_synth(s, &args.out_dir.join(&s.source_id)))?;
    }
    let manifest_path = args.out_dir.join("manifest.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in &scenarios {
        let rel = |f: &str| format!("{}/{f}", s.source_id);
        w.serialize(ManifestRow {
            source_id: s.source_id.clone(),
            track: rel("track.csv"),
            traces: rel("traces.csv"),
            truth: rel("truth.csv"),
            reacquire: Some(rel("reacquire.csv")),
        })
        .map_err(|e| CliError::input(&manifest_path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::input(&manifest_path, e.error()))?;
    write_atomic(&manifest_path, &bytes)
}

fn load_eval_source(cfg: &PipelineConfig, base: &Path, row: &ManifestRow) -> Result<EvalSource, CliError> {
    let resolve = |p: &str| base.join(p);
    let reacquire = row.reacquire.as_deref().filter(|s| !s.is_empty()).map(resolve);
    let input = load_source(cfg, &resolve(&row.track), &resolve(&row.traces), reacquire.as_deref())?;
    let truth_path = resolve(&row.truth);
    let truths = load_ground_truth(&truth_path).map_err(|e| CliError::ingest(&truth_path, e))?;
    let truth = match truths.iter().find(|t| t.source_id == row.source_id) {
        Some(t) => t,
        None if truths.len() == 1 => &truths[0],
        None => return Err(CliError::input(&truth_path, format!("no ground truth for `{}`", row.source_id))),
    };
    Ok(EvalSource { source_id: row.source_id.clone(), input, truth_bpm: truth.mean_bpm() })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn ablation_csv(rows: &[AblationRow]) -> Vec<u8> {
    let mut s = String::from("config,rmse_pct,mae_bpm,pct_lt_5bpm,pearson_r,n\n");
    for r in rows {
        let m = r.metrics.as_ref();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.config.label(),
            fmt_opt(m.map(|m| m.rmse_pct)),
            fmt_opt(m.map(|m| m.mae_bpm)),
            fmt_opt(m.map(|m| m.pct_within_5bpm)),
            fmt_opt(m.and_then(|m| m.pearson_r)),
            r.results.len()
        );
    }
    s.into_bytes()
}

fn csv_field(v: &str) -> String {
    if v.contains([',', '"', '\n']) {
        format!("\"{}\"", v.replace('"', "\"\""))
    } else {
        v.to_string()
    }
}

/// Runs the ablation over a manifest and writes `ablation.csv`,
/// `histogram.csv` (all-steps errors, with open-ended first and last rows
/// for under- and overflow) and `failures.csv`.
pub fn cmd_eval(cfg: &PipelineConfig, args: &EvalArgs) -> Result<(), CliError> {
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(&args.manifest)
        .map_err(|e| CliError::input(&args.manifest, e))?;
    let rows: Vec<ManifestRow> = rdr
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::input(&args.manifest, e))?;
    if rows.is_empty() {
        return Err(CliError::input(&args.manifest, "manifest lists no sources"));
    }
    let total = rows.len();

    let mut sources = Vec::new();
    let mut load_failures = Vec::new();
    for row in &rows {
        match load_eval_source(cfg, base, row) {
            Ok(s) => sources.push(s),
            Err(e) => load_failures.push(SourceFailure { source_id: row.source_id.clone(), error: e.to_string() }),
        }
    }
    let mut table = if sources.is_empty() {
        AblationConfig::ALL
            .iter()
            .map(|&config| AblationRow { config, results: Default::default(), metrics: None, failures: Vec::new() })
            .collect()
    } else {
        ablation_run(&sources, cfg, &AblationConfig::ALL)?
    };
    for row in &mut table {
        row.failures.extend(load_failures.iter().cloned());
        row.failures.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    }

    let mut failures = String::from("config,source_id,error\n");
    for row in &table {
        for f in &row.failures {
            eprintln!("{}: {} failed: {}", row.config.label(), f.source_id, f.error);
            let _ = writeln!(failures, "{},{},{}", row.config.label(), csv_field(&f.source_id), csv_field(&f.error));
        }
    }
    write_atomic(&args.out_dir.join("failures.csv"), failures.as_bytes())?;
    write_atomic(&args.out_dir.join("ablation.csv"), &ablation_csv(&table))?;

    let (lo, hi, width) = HISTOGRAM_RANGE;
    let edges = uniform_edges(lo, hi, width);
    let mut hist = String::from("bin_low,bin_high,count\n");
    if let Some(all) = table.iter().find(|r| r.config == AblationConfig::AllSteps && !r.results.is_empty()) {
        let h = error_histogram(&all.results, &edges)?;
        let _ = writeln!(hist, "-inf,{lo},{}", h.underflow);
        for (i, c) in h.counts.iter().enumerate() {
            let _ = writeln!(hist, "{},{},{c}", h.edges[i], h.edges[i + 1]);
        }
        let _ = writeln!(hist, "{hi},inf,{}", h.overflow);
    } else {
        let _ = writeln!(hist, "-inf,{lo},0");
        for w in edges.windows(2) {
            let _ = writeln!(hist, "{},{},0", w[0], w[1]);
        }
        let _ = writeln!(hist, "{hi},inf,0");
    }
    write_atomic(&args.out_dir.join("histogram.csv"), hist.as_bytes())?;

    let failed = table.iter().map(|r| r.failures.len()).max().unwrap_or(0);
    if failed as f64 > MAX_FAILED_FRACTION * total as f64 {
        return Err(CliError::PartialBatch { failed, total });
    }
    Ok(())
}

/// The replayed scenario when no track is given: half of the points drop
/// out over frames 150 to 190.
pub fn demo_scenario(seed: u64) -> SynthScenario {
    let mut s = SynthScenario::new(72.0, 61.0, 30.0, seed);
    s.dropout_events.push(DropoutEvent { start_frame: 150, end_frame: 190, fraction: 0.5 });
    s
}

pub fn cmd_recover_demo(cfg: &PipelineConfig, args: &RecoverDemoArgs) -> Result<String, CliError> {
    let (track, reacquisition) = match &args.track {
        Some(path) => {
            let track = load_landmark_track(path).map_err(|e| CliError::ingest(path, e))?;
            let reacq = args
                .reacquire
                .as_deref()
                .map(|p| load_landmark_track(p).map_err(|e| CliError::ingest(p, e)))
                .transpose()?
                .unwrap_or_default();
            (track, reacq)
        }
        None => {
            let out = synth_scenario(&demo_scenario(cfg.seed)).map_err(|e| CliError::Usage(e.to_string()))?;
            (out.track, out.reacquisition)
        }
    };
    let state = RecoveryState::new(cfg.recovery.threshold_fraction, cfg.recovery.reacquire_interval_frames)?;
    let outcome = run_recovery(&mut ReplayTracker::new(reacquisition), &track, state)?;
    let mut buf = Vec::new();
    write_recovery_log(&mut buf, &outcome.events)?;
    write_atomic(&args.out, &buf)?;

    let s = &outcome.state;
    Ok(match (s.failure_frame, s.settle_frame) {
        (Some(f), Some(settle)) => format!(
            "failure at frame {f}, settled at frame {settle} ({} frames, {:.1} s later)",
            settle - f,
            (settle - f) as f64 / cfg.fps
        ),
        (Some(f), None) => format!("failure at frame {f}, not settled by the end of the track"),
        _ => "no tracking failure detected".to_string(),
    })
}

/// Runs a parsed command on a thread pool sized by `--jobs`.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.common.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        pool = pool.num_threads(jobs);
    }
    let pool = pool.build().map_err(|e| CliError::Usage(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Estimate(args) => cmd_estimate(&resolve_config(&cli.common)?, args),
        Command::Synth(args) => cmd_synth(&cli.common, args),
        Command::Eval(args) => cmd_eval(&resolve_config(&cli.common)?, args),
        Command::RecoverDemo(args) => {
            let summary = cmd_recover_demo(&resolve_config(&cli.common)?, args)?;
            println!("{summary}");
            Ok(())
        }
    })
}
