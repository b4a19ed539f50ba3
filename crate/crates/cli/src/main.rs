use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use windformer_core::config::HORIZONS;
use windformer_core::data::{load_csv_dataset, synthesize_frames, synthesize_wake_dataset, write_frames};
use windformer_core::eval::{evaluate, export_prediction_curve, fit_forecaster, run_ablation, write_curve_csv};
use windformer_core::spatial::stack_batch;
use windformer_core::training::{gradient_check, warm_batch_norm, GradCheckConfig};
use windformer_core::{
    Error, Forecaster, MetricsReport, ParamStore, Persistence, Predictor, PreparedData, RunConfig,
    SceneSequence, TurbineLayout, Windformer,
};

#[derive(Parser)]
#[command(name = "windformer", version, about = "Spatio-temporal wind-speed forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic wake dataset as CSV plus its turbine layout.
    Synthesize(SynthesizeArgs),
    /// Train one model and write its checkpoint, history and test metrics.
    Train(TrainArgs),
    /// Score a checkpoint and the persistence baseline on the test split.
    Evaluate(EvaluateArgs),
    /// Write test-split forecasts of a checkpoint.
    Predict(PredictArgs),
    /// Finite-difference check of the model gradient.
    Gradcheck(GradcheckArgs),
    /// Train every spec of the ablation grid and write one table.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct Common {
    /// Run config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DataArgs {
    /// Measurement CSV; overrides the config and disables synthesis.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Layout TOML; overrides the config.
    #[arg(long)]
    layout: Option<PathBuf>,
    /// Forecast horizon in minutes: 30, 60 or 90.
    #[arg(long, value_parser = parse_horizon)]
    horizon: Option<u32>,
}

#[derive(Args)]
struct SynthesizeArgs {
    #[command(flatten)]
    common: Common,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    /// Layout TOML written next to the data; defaults to `<out>.layout.toml`.
    #[arg(long)]
    layout_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Metrics CSV.
    #[arg(long)]
    out: PathBuf,
    /// Also export the prediction curve of this turbine.
    #[arg(long, requires = "curve_out")]
    turbine: Option<String>,
    /// Curve range `START:END` in minutes, inclusive, on forecast timestamps.
    #[arg(long, value_parser = parse_range)]
    range: Option<(i64, i64)>,
    /// Curve CSV of the `--turbine` forecasts.
    #[arg(long, requires = "turbine")]
    curve_out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Forecast CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Share of trainable coordinates to check.
    #[arg(long, default_value_t = 0.01)]
    fraction: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-4)]
    h: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Per-coordinate CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn parse_horizon(s: &str) -> Result<u32, String> {
    let h: u32 = s.parse().map_err(|e| format!("{e}"))?;
    if HORIZONS.contains(&h) {
        Ok(h)
    } else {
        Err(format!("horizon must be one of 30, 60, 90, got {h}"))
    }
}

fn parse_range(s: &str) -> Result<(i64, i64), String> {
    let (a, b) = s.split_once(':').ok_or("expected START:END")?;
    let a: i64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: i64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    if a > b {
        return Err(format!("empty range {a}:{b}"));
    }
    Ok((a, b))
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    /// The command ran but its check did not pass.
    Check(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Check(_) => "check",
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Check(m) => f.write_str(m),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    Ok(match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

/// Config with the `--seed`, `--horizon`, `--data` and `--layout`
/// overrides applied.
fn resolve(common: &Common, data: &DataArgs) -> CliResult<RunConfig> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(h) = data.horizon {
        cfg.train.horizon_minutes = h;
    }
    if let Some(p) = &data.data {
        cfg.data.csv = Some(p.clone());
    }
    if let Some(p) = &data.layout {
        cfg.data.layout = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn layout_of(cfg: &RunConfig) -> CliResult<TurbineLayout> {
    let d = &cfg.data;
    Ok(match &d.layout {
        Some(p) => TurbineLayout::load(p)?,
        None => TurbineLayout::random(d.grid_height, d.grid_width, d.turbines, d.layout_seed)?,
    })
}

fn sequences(cfg: &RunConfig, layout: &TurbineLayout) -> CliResult<Vec<SceneSequence>> {
    let (h, t) = (cfg.train.horizon_minutes, cfg.model.seq_len);
    Ok(match &cfg.data.csv {
        Some(p) => {
            let (seqs, report) = load_csv_dataset(p, layout, h, t)?;
            log::info!("ingest: {report:?}");
            seqs
        }
        None => synthesize_wake_dataset(layout, &cfg.data.synthetic, h, t)?,
    })
}

fn prepare(cfg: &RunConfig) -> CliResult<(TurbineLayout, PreparedData)> {
    let layout = layout_of(cfg)?;
    let data = PreparedData::new(&sequences(cfg, &layout)?)?;
    log::info!(
        "data: {} train, {} val, {} test sequences",
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    Ok((layout, data))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn save_report(report: &MetricsReport, path: &Path) -> CliResult {
    report.write_csv(create(path)?)?;
    println!("{}", report.render_table());
    Ok(())
}

fn synthesize(args: SynthesizeArgs) -> CliResult {
    let mut cfg = load_config(&args.common)?;
    if let Some(s) = args.common.seed {
        cfg.data.synthetic.seed = s;
    }
    let layout = layout_of(&cfg)?;
    let frames = synthesize_frames(&layout, &cfg.data.synthetic)?;
    write_frames(create(&args.out)?, &frames)?;
    let layout_path = args.layout_out.unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".layout.toml");
        p.into()
    });
    layout.save(&layout_path)?;
    println!(
        "wrote {} frames of {} turbines to {} and the layout to {}",
        frames.len(),
        layout.num_turbines(),
        args.out.display(),
        layout_path.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> CliResult {
    let cfg = resolve(&args.common, &args.data)?;
    let (layout, data) = prepare(&cfg)?;
    let (forecaster, outcome) =
        fit_forecaster(cfg.ablation.spec, &cfg.model, &cfg.train, &layout, &data)?;
    std::fs::create_dir_all(&args.out)?;
    forecaster.save(args.out.join("model.ckpt"))?;
    outcome.history.save_csv(args.out.join("history.csv"))?;
    std::fs::write(args.out.join("config.toml"), cfg.to_toml_string())?;
    println!(
        "best epoch {} of {} (val mse {:.6}), {} steps, stopped by {:?}",
        outcome.best_epoch,
        outcome.history.records.len(),
        outcome.best_val_mse,
        outcome.steps,
        outcome.stop
    );
    let name = dataset_name(&cfg);
    let mut report = evaluate(&Persistence { layout }, &data.test, &name)?;
    report.extend(evaluate(&forecaster, &data.test, &name)?);
    save_report(&report, &args.out.join("metrics.csv"))
}

/// Dataset id used in reports.
fn dataset_name(cfg: &RunConfig) -> String {
    cfg.data
        .csv
        .as_ref()
        .and_then(|p| p.file_stem())
        .map_or_else(|| "synthetic".into(), |s| s.to_string_lossy().into_owned())
}

/// Test split rebuilt with the checkpoint's layout, horizon and sequence
/// length; the forecaster carries its own normalization.
fn test_split(forecaster: &Forecaster, cfg: &RunConfig) -> CliResult<Vec<SceneSequence>> {
    let mut cfg = cfg.clone();
    cfg.train.horizon_minutes = forecaster.horizon_minutes;
    cfg.model.seq_len = forecaster.model.cfg.seq_len;
    let seqs = sequences(&cfg, &forecaster.layout)?;
    Ok(PreparedData::new(&seqs)?.test)
}

fn evaluate_cmd(args: EvaluateArgs) -> CliResult {
    let cfg = resolve(&args.common, &args.data)?;
    let forecaster = Forecaster::load(&args.checkpoint)?;
    let test = test_split(&forecaster, &cfg)?;
    let name = dataset_name(&cfg);
    let persistence = Persistence {
        layout: forecaster.layout.clone(),
    };
    let mut report = evaluate(&persistence, &test, &name)?;
    report.extend(evaluate(&forecaster, &test, &name)?);
    save_report(&report, &args.out)?;
    if let (Some(id), Some(path)) = (&args.turbine, &args.curve_out) {
        let (a, b) = args.range.unwrap_or((i64::MIN, i64::MAX));
        let points = export_prediction_curve(&forecaster, &test, &forecaster.layout, id, a..=b)?;
        write_curve_csv(&points, create(path)?)?;
        println!("wrote {} curve points to {}", points.len(), path.display());
    }
    Ok(())
}

fn predict(args: PredictArgs) -> CliResult {
    let cfg = resolve(&args.common, &args.data)?;
    let forecaster = Forecaster::load(&args.checkpoint)?;
    let test = test_split(&forecaster, &cfg)?;
    let preds = forecaster.predict(&test)?;
    let mut w = csv::Writer::from_writer(create(&args.out)?);
    w.write_record(["timestamp", "turbine_id", "predicted", "actual"])?;
    for (s, p) in test.iter().zip(&preds) {
        for ((t, v), a) in forecaster.layout.turbines.iter().zip(p).zip(s.target.data()) {
            w.write_record([
                s.target_timestamp().to_string(),
                t.id.clone(),
                v.to_string(),
                a.to_string(),
            ])?;
        }
    }
    w.flush()?;
    println!("wrote {} forecasts to {}", preds.len(), args.out.display());
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> CliResult {
    let cfg = resolve(&args.common, &args.data)?;
    let (layout, data) = prepare(&cfg)?;
    let mut params = ParamStore::<f64>::new();
    let model = Windformer::new(
        &cfg.model,
        cfg.ablation.spec,
        &layout,
        &mut params,
        &mut ChaCha8Rng::seed_from_u64(cfg.train.seed),
    )?;
    let (x, y) = stack_batch::<f64>(&[&data.train_norm[0]])?;
    warm_batch_norm(&model, &mut params, &x)?;
    let gc = GradCheckConfig {
        fraction: args.fraction,
        h: args.h,
        seed: cfg.train.seed,
        ..GradCheckConfig::default()
    };
    let r = gradient_check(&model, &params, &x, &y, &gc)?;
    println!(
        "checked {} of {} coordinates in {:.1} s at h = {:e}",
        r.checked, r.total, r.seconds, r.h
    );
    println!(
        "relu kink crossings: {} ({} refined, {} one-sided, {} unresolved)",
        r.kinks, r.refined, r.one_sided, r.unresolved
    );
    println!("max rel. err at h before kink handling: {:e}", r.max_rel_err_raw);
    println!("max rel. err: {:e}", r.max_rel_err);
    println!("max abs. err: {:e}", r.max_abs_err);
    if let Some(w) = &r.worst {
        println!("worst: {}[{}] analytic {:e} numeric {:e}", w.param, w.index, w.analytic, w.numeric);
    }
    if let Some(path) = &args.out {
        let mut w = csv::Writer::from_writer(create(path)?);
        w.write_record(["param", "index", "analytic", "numeric", "rel_err", "h", "scheme"])?;
        for c in &r.coordinates {
            w.write_record([
                c.param.clone(),
                c.index.to_string(),
                c.analytic.to_string(),
                c.numeric.to_string(),
                c.rel_err.to_string(),
                c.h.to_string(),
                format!("{:?}", c.scheme).to_lowercase(),
            ])?;
        }
        w.flush()?;
    }
    if r.passes(args.tolerance) {
        println!("PASS (threshold {:e})", args.tolerance);
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "max rel. err {:e} is not below {:e}",
            r.max_rel_err, args.tolerance
        )))
    }
}

fn ablate(args: AblateArgs) -> CliResult {
    let cfg = resolve(&args.common, &args.data)?;
    let (layout, data) = prepare(&cfg)?;
    let (report, runs) = run_ablation(
        &cfg.ablation.grid,
        &data,
        &layout,
        &cfg.model,
        &cfg.train,
        &dataset_name(&cfg),
    )?;
    std::fs::create_dir_all(&args.out)?;
    let mut summary = create(&args.out.join("runs.csv"))?;
    writeln!(summary, "model,best_epoch,best_val_mse,steps")?;
    for run in &runs {
        writeln!(
            summary,
            "{},{},{},{}",
            run.spec.label(),
            run.outcome.best_epoch,
            run.outcome.best_val_mse,
            run.outcome.steps
        )?;
    }
    summary.flush()?;
    save_report(&report, &args.out.join("metrics.csv"))
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synthesize(a) => synthesize(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
