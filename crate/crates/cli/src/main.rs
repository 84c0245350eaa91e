use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use gfts::domain::{FunctionalSeries, GroupedDataset, SeriesKey};
use gfts::evaluate::{
    forecast_window, run_backtest, BacktestPlan, EvaluateError, IntervalSettings, MedianRule, Method, ScoringScale,
    DEFAULT_H_MAX,
};
use gfts::fpca::{fit_fpca, FpcaError, DEFAULT_DELTA};
use gfts::ingest::{format_grouping_config, load_panel, write_panel, IngestError};
use gfts::intervals::{IntervalKind, DEFAULT_ALPHA, DEFAULT_REPLICATES};
use gfts::simulate::{generate, write_latent, SimConfig, SimError};
use gfts::smoothing::{smooth_dataset, Lambda, SmoothingConfig, SmoothingError};

const EXIT_VALIDATION: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "gfts", version, about = "Grouped functional time series forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Nominal non-coverage of prediction intervals.
    #[arg(long, global = true, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Share of variance the retained principal components must explain.
    #[arg(long, global = true, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    #[arg(long = "h-max", global = true, default_value_t = DEFAULT_H_MAX)]
    h_max: usize,
    /// Forecast method(s), comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    method: Vec<MethodArg>,
    #[arg(long = "out-dir", global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Independent,
    BottomUp,
    OptimalCombination,
    Fmedian,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Independent => Method::Independent,
            MethodArg::BottomUp => Method::BottomUp,
            MethodArg::OptimalCombination => Method::OptimalCombination,
            MethodArg::Fmedian => Method::FMedian,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Pointwise,
    Uniform,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ScaleArg {
    Log,
    Rate,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum MedianArg {
    Ranked,
    Horizon,
}

#[derive(Args, Debug, Clone)]
struct Input {
    /// Panel CSV: year,age,<bottom attributes>,deaths,exposure.
    #[arg(long)]
    data: PathBuf,
    /// Grouping configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Smoothing penalty: a positive number or `auto`.
    #[arg(long, default_value = "auto")]
    lambda: String,
}

#[derive(Args, Debug, Clone)]
struct IntervalArgs {
    #[arg(long, value_enum, default_value_t = KindArg::Pointwise)]
    kind: KindArg,
    /// Bootstrap replicates.
    #[arg(long, default_value_t = DEFAULT_REPLICATES)]
    replicates: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic panel, its grouping configuration and the latent rates.
    Simulate {
        #[arg(long, default_value_t = 30)]
        years: usize,
        /// Eight regions and 47 prefectures instead of the small default layout.
        #[arg(long)]
        japan: bool,
    },
    /// Smooth every series; writes smoothed.csv.
    Smooth(Input),
    /// Principal components of every smoothed series; writes fpca_components.csv and fpca_scores.csv.
    Fpca(Input),
    /// Independent forecasts of every series; writes forecasts.csv.
    Forecast(Input),
    /// Reconciled forecasts; writes reconciled.csv.
    Reconcile(Input),
    /// Prediction intervals; writes intervals.csv.
    Intervals {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        intervals: IntervalArgs,
    },
    /// Expanding-window backtest; writes report.csv and report.md.
    Evaluate {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        intervals: IntervalArgs,
        /// Skip interval forecasts and interval scores.
        #[arg(long)]
        no_intervals: bool,
        /// First training year (default: first year of data).
        #[arg(long)]
        train_start: Option<i32>,
        /// Last year of the first training window (default: last year minus h-max).
        #[arg(long)]
        train_end: Option<i32>,
        #[arg(long, value_enum, default_value_t = ScaleArg::Log)]
        scale: ScaleArg,
        #[arg(long, value_enum, default_value_t = MedianArg::Ranked)]
        median: MedianArg,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Smooth(_) => "smooth",
            Command::Fpca(_) => "fpca",
            Command::Forecast(_) => "forecast",
            Command::Reconcile(_) => "reconcile",
            Command::Intervals { .. } => "intervals",
            Command::Evaluate { .. } => "evaluate",
        }
    }
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(message: impl ToString) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.to_string(),
        }
    }

    fn numerical(message: impl ToString) -> Self {
        Self {
            code: EXIT_NUMERICAL,
            message: message.to_string(),
        }
    }
}

impl From<IngestError> for Failure {
    fn from(e: IngestError) -> Self {
        Failure::validation(e)
    }
}

impl From<SmoothingError> for Failure {
    fn from(e: SmoothingError) -> Self {
        match e {
            SmoothingError::Series { .. } => Failure::numerical(e),
            _ => Failure::validation(e),
        }
    }
}

impl From<EvaluateError> for Failure {
    fn from(e: EvaluateError) -> Self {
        if let EvaluateError::Smoothing(s) = e {
            return s.into();
        }
        if e.is_validation() {
            Failure::validation(e)
        } else {
            Failure::numerical(e)
        }
    }
}

impl From<FpcaError> for Failure {
    fn from(e: FpcaError) -> Self {
        match e {
            FpcaError::InvalidDelta(_) | FpcaError::TooFewCurves(_) | FpcaError::WrongScale => Failure::validation(e),
            _ => Failure::numerical(e),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        Failure::validation(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::validation(format!("io error: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = cli.common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// Resolved settings and outputs of one run, written to manifest.txt.
struct Manifest {
    started: Instant,
    lines: Vec<(String, String)>,
}

impl Manifest {
    fn new(cli: &Cli) -> Self {
        let c = &cli.common;
        let mut m = Self {
            started: Instant::now(),
            lines: Vec::new(),
        };
        m.push("tool", format!("gfts {}", env!("CARGO_PKG_VERSION")));
        m.push("subcommand", cli.command.name());
        m.push("seed", c.seed);
        m.push("alpha", c.alpha);
        m.push("delta", c.delta);
        m.push("h_max", c.h_max);
        m.push("methods", methods(c).iter().map(|m| m.name()).collect::<Vec<_>>().join(","));
        m.push("threads", c.threads.map_or("default".to_string(), |t| t.to_string()));
        m
    }

    fn push(&mut self, key: &str, value: impl ToString) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    fn digest(&mut self, label: &str, path: &Path) -> Result<(), Failure> {
        let bytes = fs::read(path).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
        self.push(label, format!("{} sha256:{}", path.display(), hex(&Sha256::digest(&bytes))));
        Ok(())
    }

    fn write(mut self, dir: &Path) -> Result<(), Failure> {
        let wall = self.started.elapsed().as_secs_f64();
        self.push("wall_clock_seconds", format!("{wall:.3}"));
        let mut text = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(text, "{k} = {v}");
        }
        fs::write(dir.join("manifest.txt"), text)?;
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn methods(c: &Common) -> Vec<Method> {
    if c.method.is_empty() {
        Method::ALL.to_vec()
    } else {
        let mut out: Vec<Method> = Vec::new();
        for m in &c.method {
            let m = Method::from(*m);
            if !out.contains(&m) {
                out.push(m);
            }
        }
        out
    }
}

fn smoothing_config(input: &Input) -> Result<SmoothingConfig, Failure> {
    let lambda = if input.lambda.eq_ignore_ascii_case("auto") {
        Lambda::Auto
    } else {
        match input.lambda.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Lambda::Fixed(v),
            _ => return Err(Failure::validation(format!("invalid --lambda `{}`", input.lambda))),
        }
    };
    Ok(SmoothingConfig {
        lambda,
        ..SmoothingConfig::default()
    })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<fs::File>, Failure> {
    Ok(BufWriter::new(fs::File::create(dir.join(name))?))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let c = &cli.common;
    if !(c.alpha > 0.0 && c.alpha < 1.0) {
        return Err(Failure::validation(format!("--alpha {} outside (0, 1)", c.alpha)));
    }
    if !(c.delta > 0.0 && c.delta < 1.0) {
        return Err(Failure::validation(format!("--delta {} outside (0, 1)", c.delta)));
    }
    if c.h_max == 0 {
        return Err(Failure::validation("--h-max must be positive"));
    }
    fs::create_dir_all(&c.out_dir)?;
    let mut manifest = Manifest::new(cli);
    match &cli.command {
        Command::Simulate { years, japan } => {
            let base = if *japan { SimConfig::japan_shape() } else { SimConfig::default() };
            let config = SimConfig {
                n_years: *years,
                seed: c.seed,
                ..base
            };
            let sim = generate(&config)?;
            write_panel(&sim.dataset, create(&c.out_dir, "panel.csv")?)?;
            fs::write(c.out_dir.join("groups.cfg"), format_grouping_config(sim.dataset.scheme()))?;
            write_latent(&sim, create(&c.out_dir, "latent.csv")?)?;
            manifest.push("years", years);
            manifest.push("layout", if *japan { "japan" } else { "default" });
        }
        Command::Smooth(input) => {
            let (ds, smoothed) = load_and_smooth(input, &mut manifest)?;
            let mut out = create(&c.out_dir, "smoothed.csv")?;
            writeln!(out, "series,year,age,log_rate")?;
            for (key, s) in ds.all_keys().iter().zip(&smoothed) {
                write_curves(&mut out, &key_label(key), s)?;
            }
            out.flush()?;
        }
        Command::Fpca(input) => {
            let (ds, smoothed) = load_and_smooth(input, &mut manifest)?;
            let mut comp = create(&c.out_dir, "fpca_components.csv")?;
            let mut scores = create(&c.out_dir, "fpca_scores.csv")?;
            writeln!(comp, "series,component,eigenvalue,age,value")?;
            writeln!(scores, "series,year,component,score")?;
            for (key, s) in ds.all_keys().iter().zip(&smoothed) {
                let label = key_label(key);
                let model = fit_fpca(s, c.delta)?;
                for (j, age) in ds.grid().ages().iter().enumerate() {
                    writeln!(comp, "{label},mean,,{age},{}", model.mean[j])?;
                }
                for k in 0..model.k() {
                    for (j, age) in ds.grid().ages().iter().enumerate() {
                        writeln!(
                            comp,
                            "{label},{},{},{age},{}",
                            k + 1,
                            model.eigenvalues[k],
                            model.eigenfunctions[(k, j)]
                        )?;
                    }
                    for (t, year) in s.years().iter().enumerate() {
                        writeln!(scores, "{label},{year},{},{}", k + 1, model.scores[(t, k)])?;
                    }
                }
            }
            comp.flush()?;
            scores.flush()?;
        }
        Command::Forecast(input) => {
            let f = forecast_full(cli, input, vec![Method::Independent], None, &mut manifest)?;
            write_forecasts(&c.out_dir.join("forecasts.csv"), &f, false)?;
        }
        Command::Reconcile(input) => {
            let mut chosen = methods(c);
            chosen.retain(|m| matches!(m, Method::BottomUp | Method::OptimalCombination));
            if chosen.is_empty() {
                chosen = vec![Method::BottomUp, Method::OptimalCombination];
            }
            let f = forecast_full(cli, input, chosen, None, &mut manifest)?;
            write_forecasts(&c.out_dir.join("reconciled.csv"), &f, false)?;
        }
        Command::Intervals { input, intervals } => {
            let mut chosen = methods(c);
            chosen.retain(|m| *m != Method::FMedian);
            if chosen.is_empty() {
                chosen = vec![Method::Independent];
            }
            let f = forecast_full(cli, input, chosen, Some(interval_settings(intervals)), &mut manifest)?;
            write_forecasts(&c.out_dir.join("intervals.csv"), &f, true)?;
        }
        Command::Evaluate {
            input,
            intervals,
            no_intervals,
            train_start,
            train_end,
            scale,
            median,
        } => {
            let ds = load(input, &mut manifest)?;
            let mut plan = BacktestPlan::for_dataset(&ds, c.h_max);
            plan.methods = methods(c);
            plan.alpha = c.alpha;
            plan.delta = c.delta;
            plan.seed = c.seed;
            plan.smoothing = smoothing_config(input)?;
            plan.intervals = (!no_intervals).then(|| interval_settings(intervals));
            if let Some(y) = train_start {
                plan.train_start = *y;
            }
            if let Some(y) = train_end {
                plan.train_end_initial = *y;
            }
            plan.scale = match scale {
                ScaleArg::Log => ScoringScale::LogRate,
                ScaleArg::Rate => ScoringScale::Rate,
            };
            plan.median_rule = match median {
                MedianArg::Ranked => MedianRule::Ranked,
                MedianArg::Horizon => MedianRule::HorizonIndexed,
            };
            manifest.push("train_start", plan.train_start);
            manifest.push("train_end_initial", plan.train_end_initial);
            manifest.push("data_end", plan.data_end);
            manifest.push("config_hash", plan.config_hash());
            let report = run_backtest(&ds, &plan)?;
            let mut csv = create(&c.out_dir, "report.csv")?;
            report.write_csv(&mut csv)?;
            csv.flush()?;
            fs::write(c.out_dir.join("report.md"), report.to_markdown())?;
        }
    }
    manifest.write(&c.out_dir)
}

fn interval_settings(args: &IntervalArgs) -> IntervalSettings {
    IntervalSettings {
        kind: match args.kind {
            KindArg::Pointwise => IntervalKind::Pointwise,
            KindArg::Uniform => IntervalKind::Uniform,
        },
        replicates: args.replicates,
    }
}

fn load(input: &Input, manifest: &mut Manifest) -> Result<GroupedDataset, Failure> {
    manifest.digest("data", &input.data)?;
    manifest.digest("config", &input.config)?;
    manifest.push("lambda", &input.lambda);
    Ok(load_panel(&input.data, &input.config)?)
}

fn load_and_smooth(input: &Input, manifest: &mut Manifest) -> Result<(GroupedDataset, Vec<FunctionalSeries>), Failure> {
    let ds = load(input, manifest)?;
    let smoothed = smooth_dataset(&ds, &smoothing_config(input)?)?;
    let ordered = ds.all_keys().iter().map(|k| smoothed[k].clone()).collect();
    Ok((ds, ordered))
}

struct FullForecast {
    labels: Vec<String>,
    last_year: i32,
    ages: Vec<f64>,
    forecasts: gfts::evaluate::WindowForecasts,
}

/// Forecasts past the end of the data with every requested method.
fn forecast_full(
    cli: &Cli,
    input: &Input,
    chosen: Vec<Method>,
    intervals: Option<IntervalSettings>,
    manifest: &mut Manifest,
) -> Result<FullForecast, Failure> {
    let c = &cli.common;
    let (ds, smoothed) = load_and_smooth(input, manifest)?;
    let mut plan = BacktestPlan::for_dataset(&ds, c.h_max);
    plan.methods = chosen;
    plan.alpha = c.alpha;
    plan.delta = c.delta;
    plan.seed = c.seed;
    plan.smoothing = smoothing_config(input)?;
    plan.intervals = intervals;
    let n = ds.n_years();
    let last_year = ds.years()[n - 1];
    let forecasts = forecast_window(&ds, &smoothed, &plan, 0, last_year, n, c.h_max)?;
    Ok(FullForecast {
        labels: ds.all_keys().iter().map(key_label).collect(),
        last_year,
        ages: ds.grid().ages().to_vec(),
        forecasts,
    })
}

fn write_forecasts(path: &Path, f: &FullForecast, with_bounds: bool) -> Result<(), Failure> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    if with_bounds {
        writeln!(out, "method,series,year,age,log_rate,lower,upper")?;
    } else {
        writeln!(out, "method,series,year,age,log_rate")?;
    }
    for (method, rows) in &f.forecasts.points {
        let bounds = f.forecasts.bounds.get(method);
        for (r, per_h) in rows.iter().enumerate() {
            for (step, curve) in per_h.iter().enumerate() {
                let year = f.last_year + step as i32 + 1;
                for (j, age) in f.ages.iter().enumerate() {
                    write!(out, "{},{},{year},{age},{}", method.name(), f.labels[r], curve[j])?;
                    if with_bounds {
                        match bounds {
                            Some(b) => write!(out, ",{},{}", b[r][step].0[j], b[r][step].1[j])?,
                            None => write!(out, ",,")?,
                        }
                    }
                    writeln!(out)?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn write_curves(out: &mut impl Write, label: &str, s: &FunctionalSeries) -> std::io::Result<()> {
    for (t, year) in s.years().iter().enumerate() {
        for (j, age) in s.grid().ages().iter().enumerate() {
            writeln!(out, "{label},{year},{age},{}", s.values()[(t, j)])?;
        }
    }
    Ok(())
}

/// `total` or `attr=value;attr=value`, safe inside a CSV field.
fn key_label(key: &SeriesKey) -> String {
    if key.is_total() {
        "total".to_string()
    } else {
        key.to_string()
    }
}
