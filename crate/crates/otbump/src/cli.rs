//! Command-line front end: CSV events in, JSON reports out.
//!
//! Subcommands cover the whole pipeline: `simulate` (synthetic events),
//! `decorrelate` (fit/apply a transport map), `test` (censored-MLE or
//! counting test), `calibrate` (Bernstein-order selection), `metrics`
//! (R50 / 1/JSD across the morphing geodesic) and `power` (Monte Carlo
//! power study). Every report embeds the schema version, the tool version
//! and the effective configuration; rerunning a command from the embedded
//! configuration reproduces its outputs byte for byte.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::bumphunt::{
    bin_data, censored_mle_em, counting_test, delta_method_test, EmOptions, SignalRegion,
};
use crate::calibration::{cut_quantile, select_k, select_signal_region, CalibrationConfig};
use crate::error::{Error, Result};
use crate::estimators::ks_distance;
use crate::events::{read_events, write_events};
use crate::simulate::{
    power_analysis, sample_events_stream, BackgroundFamily, GeneratorSpec, PowerConfig,
    PowerReport, ScoreModel,
};
use crate::transport::{
    clamp_unit_scores, fit_locscale, fit_split, independence_diagnostic, load_transport_map,
    one_over_jsd, r50, save_transport_map, BandwidthGrids,
};
use crate::{SCHEMA_VERSION, TOOL_VERSION};

#[derive(Parser)]
#[command(
    name = "otbump",
    version,
    about = "Optimal-transport score decorrelation and semi-parametric bump-hunt testing"
)]
pub struct Cli {
    /// Cap the worker thread count (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic events as CSV.
    Simulate(SimulateArgs),
    /// Fit (or load) a transport map and append a transformed-score column.
    Decorrelate(DecorrelateArgs),
    /// Run the signal-detection test on (optionally cut) events.
    Test(TestArgs),
    /// Select the Bernstein order by empirical type-I error.
    Calibrate(CalibrateArgs),
    /// Decorrelation/separation metrics across the morphing geodesic.
    Metrics(MetricsArgs),
    /// Monte Carlo power analysis over (lambda, cut, pipeline) cells.
    Power(PowerArgs),
}

pub fn run() -> Result<()> {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // ignore the error when a pool already exists (tests, repeated calls)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Decorrelate(args) => cmd_decorrelate(args),
        Command::Test(args) => cmd_test(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Metrics(args) => cmd_metrics(args),
        Command::Power(args) => cmd_power(args),
    }
}

fn load_config<C: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<C> {
    match path {
        Some(p) => {
            let file = std::fs::File::open(p)?;
            Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
        }
        None => Ok(C::default()),
    }
}

fn write_json<T: Serialize>(path: &Option<PathBuf>, value: &T) -> Result<()> {
    let payload = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, payload + "\n")?,
        None => println!("{payload}"),
    }
    Ok(())
}

macro_rules! override_field {
    ($cfg:expr, $arg:expr) => {
        if let Some(v) = $arg {
            $cfg = v;
        }
    };
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

/// Generator configuration as exposed on the command line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub n: usize,
    pub lambda: f64,
    pub seed: u64,
    pub stream: u64,
    pub background_rate: f64,
    pub signal_mean: f64,
    pub signal_sigma: f64,
    /// "correlated" or "independent".
    pub score_model: String,
    pub slope: f64,
    pub peak_boost: f64,
    pub peak_width: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let spec = GeneratorSpec::default();
        let BackgroundFamily::TruncatedExponential { rate } = spec.background else {
            unreachable!("default background family is truncated exponential");
        };
        let ScoreModel::Correlated { slope, peak_boost, peak_width } = spec.score_model else {
            unreachable!("default score model is correlated");
        };
        SimulateConfig {
            n: 20_000,
            lambda: spec.lambda,
            seed: spec.seed,
            stream: 0,
            background_rate: rate,
            signal_mean: spec.signal_mean,
            signal_sigma: spec.signal_sigma,
            score_model: "correlated".into(),
            slope,
            peak_boost,
            peak_width,
        }
    }
}

impl SimulateConfig {
    pub fn generator_spec(&self) -> Result<GeneratorSpec> {
        let score_model = match self.score_model.as_str() {
            "correlated" => ScoreModel::Correlated {
                slope: self.slope,
                peak_boost: self.peak_boost,
                peak_width: self.peak_width,
            },
            "independent" => ScoreModel::Independent,
            other => {
                return Err(Error::InvalidConfiguration(format!(
                    "unknown score model {other:?} (expected \"correlated\" or \"independent\")"
                )))
            }
        };
        Ok(GeneratorSpec {
            background: BackgroundFamily::TruncatedExponential { rate: self.background_rate },
            signal_mean: self.signal_mean,
            signal_sigma: self.signal_sigma,
            score_model,
            lambda: self.lambda,
            seed: self.seed,
        })
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON configuration file (flags override its fields).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long, short)]
    output: PathBuf,
    /// Optional JSON sidecar with the effective configuration.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    stream: Option<u64>,
    #[arg(long)]
    background_rate: Option<f64>,
    #[arg(long)]
    signal_mean: Option<f64>,
    #[arg(long)]
    signal_sigma: Option<f64>,
    #[arg(long)]
    score_model: Option<String>,
    #[arg(long)]
    slope: Option<f64>,
    #[arg(long)]
    peak_boost: Option<f64>,
    #[arg(long)]
    peak_width: Option<f64>,
}

#[derive(Serialize)]
struct SimulateReport {
    schema_version: u32,
    tool_version: &'static str,
    config: SimulateConfig,
    n_signal: usize,
    n_background: usize,
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let mut cfg: SimulateConfig = load_config(&args.config)?;
    override_field!(cfg.n, args.n);
    override_field!(cfg.lambda, args.lambda);
    override_field!(cfg.seed, args.seed);
    override_field!(cfg.stream, args.stream);
    override_field!(cfg.background_rate, args.background_rate);
    override_field!(cfg.signal_mean, args.signal_mean);
    override_field!(cfg.signal_sigma, args.signal_sigma);
    override_field!(cfg.score_model, args.score_model);
    override_field!(cfg.slope, args.slope);
    override_field!(cfg.peak_boost, args.peak_boost);
    override_field!(cfg.peak_width, args.peak_width);

    let spec = cfg.generator_spec()?;
    let events = sample_events_stream(&spec, cfg.n, cfg.stream)?;
    write_events(&args.output, &events)?;
    let n_signal = events.iter().filter(|e| e.label == Some(1)).count();
    eprintln!("wrote {} events ({n_signal} signal) to {}", events.len(), args.output.display());
    if args.report.is_some() {
        write_json(
            &args.report,
            &SimulateReport {
                schema_version: SCHEMA_VERSION,
                tool_version: TOOL_VERSION,
                config: cfg,
                n_signal,
                n_background: events.len() - n_signal,
            },
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// decorrelate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DecorrelateConfig {
    /// "split" or "locscale".
    pub approach: String,
    pub splits: Vec<f64>,
    pub h_z_grid: Vec<f64>,
    pub h_m_grid: Vec<f64>,
    /// Interpret the grids as factors on the rule-of-thumb bandwidth.
    pub relative_grids: bool,
    pub lscv_subsample: Option<usize>,
    pub regression_bandwidth: Option<f64>,
    /// Fit only on rows with label 0 when a label column is present.
    pub fit_on_background_labels: bool,
    /// Mass slices for the post-fit independence diagnostic.
    pub diagnostic_slices: usize,
}

impl Default for DecorrelateConfig {
    fn default() -> Self {
        let grids = BandwidthGrids::default();
        DecorrelateConfig {
            approach: "split".into(),
            splits: vec![],
            h_z_grid: grids.h_z,
            h_m_grid: grids.h_m,
            relative_grids: grids.relative,
            lscv_subsample: grids.lscv_subsample,
            regression_bandwidth: None,
            fit_on_background_labels: true,
            diagnostic_slices: 10,
        }
    }
}

impl DecorrelateConfig {
    fn grids(&self) -> BandwidthGrids {
        BandwidthGrids {
            h_z: self.h_z_grid.clone(),
            h_m: self.h_m_grid.clone(),
            relative: self.relative_grids,
            lscv_subsample: self.lscv_subsample,
        }
    }
}

#[derive(Args)]
struct DecorrelateArgs {
    /// Input CSV with mass and score columns.
    #[arg(long, short)]
    input: PathBuf,
    /// Output CSV (input columns plus `transformed_score`).
    #[arg(long, short)]
    output: PathBuf,
    /// Where to persist the fitted transport map.
    #[arg(long)]
    map_out: Option<PathBuf>,
    /// Reuse a persisted map instead of fitting.
    #[arg(long)]
    load_map: Option<PathBuf>,
    /// JSON diagnostics sidecar.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    approach: Option<String>,
    /// Interior mass split points, comma separated.
    #[arg(long, value_delimiter = ',')]
    splits: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    h_z_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    h_m_grid: Option<Vec<f64>>,
    #[arg(long)]
    regression_bandwidth: Option<f64>,
}

#[derive(Serialize)]
struct DecorrelateReport {
    schema_version: u32,
    tool_version: &'static str,
    config: DecorrelateConfig,
    approach: String,
    n_fit: usize,
    n_applied: usize,
    clamped_scores: u64,
    map_fallbacks: u64,
    /// KS distance between transported background scores and the map's
    /// training marginal.
    marginal_ks: Option<f64>,
    /// Max-over-slices KS distance of transported background scores against
    /// the pooled distribution.
    independence_statistic: Option<f64>,
    lscv: Vec<crate::estimators::LscvSelection>,
    regression_bandwidth: Option<f64>,
}

fn cmd_decorrelate(args: DecorrelateArgs) -> Result<()> {
    let mut cfg: DecorrelateConfig = load_config(&args.config)?;
    override_field!(cfg.approach, args.approach);
    override_field!(cfg.splits, args.splits);
    override_field!(cfg.h_z_grid, args.h_z_grid);
    override_field!(cfg.h_m_grid, args.h_m_grid);
    if args.regression_bandwidth.is_some() {
        cfg.regression_bandwidth = args.regression_bandwidth;
    }

    let mut table = read_events(&args.input)?;
    let scores = table.scores()?.to_vec();
    let masses = table.masses().to_vec();

    // fit sample: background rows when labels are available
    let background_rows: Vec<usize> = match table.labels() {
        Ok(labels) if cfg.fit_on_background_labels => (0..table.len())
            .filter(|&i| labels[i] == Some(0))
            .collect(),
        _ => (0..table.len()).collect(),
    };

    let mut clamped_scores = 0u64;
    let (map, n_fit) = match &args.load_map {
        Some(path) => (load_transport_map(path)?, 0),
        None => {
            let mut fit_events: Vec<(f64, f64)> =
                background_rows.iter().map(|&i| (scores[i], masses[i])).collect();
            let map = match cfg.approach.as_str() {
                "split" => fit_split(&fit_events, &cfg.splits, &cfg.grids())?,
                "locscale" => {
                    let mut fit_scores: Vec<f64> = fit_events.iter().map(|e| e.0).collect();
                    clamped_scores = clamp_unit_scores(&mut fit_scores);
                    for (event, s) in fit_events.iter_mut().zip(&fit_scores) {
                        event.0 = *s;
                    }
                    fit_locscale(&fit_events, &cfg.grids(), cfg.regression_bandwidth)?
                }
                other => {
                    return Err(Error::InvalidConfiguration(format!(
                        "unknown approach {other:?} (expected \"split\" or \"locscale\")"
                    )))
                }
            };
            (map, fit_events.len())
        }
    };

    if let Some(path) = &args.map_out {
        save_transport_map(&map, path)?;
    }

    let pairs: Vec<(f64, f64)> = scores.iter().zip(&masses).map(|(&s, &m)| (s, m)).collect();
    let (transported, map_fallbacks) = map.transport_batch(&pairs);
    table.add_column(
        "transformed_score",
        transported.iter().map(|t| format!("{t}")).collect(),
    )?;
    table.write(&args.output)?;

    // diagnostics on the background rows of this input
    let bg_transported: Vec<f64> = background_rows.iter().map(|&i| transported[i]).collect();
    let bg_masses: Vec<f64> = background_rows.iter().map(|&i| masses[i]).collect();
    let marginal_ks = (!bg_transported.is_empty())
        .then(|| ks_distance(&bg_transported, |x| map.marginal().eval(x)));
    let independence_statistic =
        independence_diagnostic(&bg_transported, &bg_masses, cfg.diagnostic_slices).ok();
    eprintln!(
        "decorrelated {} events (marginal KS {:?}, independence {:?}, {} fallbacks)",
        table.len(),
        marginal_ks,
        independence_statistic,
        map_fallbacks
    );

    if args.report.is_some() {
        write_json(
            &args.report,
            &DecorrelateReport {
                schema_version: SCHEMA_VERSION,
                tool_version: TOOL_VERSION,
                config: cfg,
                approach: map.fit_info.approach.clone(),
                n_fit,
                n_applied: table.len(),
                clamped_scores,
                map_fallbacks,
                marginal_ks,
                independence_statistic,
                lscv: map.fit_info.lscv.clone(),
                regression_bandwidth: map.fit_info.regression_bandwidth,
            },
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// test
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TestConfig {
    pub order: Option<usize>,
    pub region: Option<(f64, f64)>,
    /// Classifier cut level in [0, 1); 0 disables filtering.
    pub cut_level: f64,
    pub alpha: f64,
    pub bins_per_side: usize,
    pub em_max_iter: usize,
    pub em_tol: f64,
    pub fd_step: f64,
    /// Known-background mode: B(S), the background mass in the signal region.
    pub known_background_signal_mass: Option<f64>,
}

impl Default for TestConfig {
    fn default() -> Self {
        let em = EmOptions::default();
        TestConfig {
            order: None,
            region: None,
            cut_level: 0.0,
            alpha: 0.05,
            bins_per_side: 50,
            em_max_iter: em.max_iter,
            em_tol: em.tol,
            fd_step: 1e-4,
            known_background_signal_mass: None,
        }
    }
}

#[derive(Args)]
struct TestArgs {
    #[arg(long, short)]
    input: PathBuf,
    /// Calibration report supplying the region and selected order.
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    order: Option<usize>,
    /// Signal region as `lower,upper`.
    #[arg(long, value_delimiter = ',')]
    region: Option<Vec<f64>>,
    #[arg(long)]
    cut_level: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    bins_per_side: Option<usize>,
    #[arg(long)]
    known_background: Option<f64>,
}

#[derive(Serialize)]
struct TestReport {
    schema_version: u32,
    tool_version: &'static str,
    config: TestConfig,
    mode: &'static str,
    n_input: usize,
    n_surviving: usize,
    cut_value: Option<f64>,
    lambda: f64,
    statistic: f64,
    p_value: f64,
    rejected: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    fit: Option<crate::bumphunt::FitResult>,
}

#[derive(Deserialize)]
struct CalibrationReportFile {
    report: crate::calibration::SelectionReport,
}

fn cmd_test(args: TestArgs) -> Result<()> {
    let mut cfg: TestConfig = load_config(&args.config)?;
    override_field!(cfg.order, args.order.map(Some));
    if let Some(region) = &args.region {
        if region.len() != 2 {
            return Err(Error::InvalidConfiguration("--region expects lower,upper".into()));
        }
        cfg.region = Some((region[0], region[1]));
    }
    override_field!(cfg.cut_level, args.cut_level);
    override_field!(cfg.alpha, args.alpha);
    override_field!(cfg.bins_per_side, args.bins_per_side);
    override_field!(cfg.known_background_signal_mass, args.known_background.map(Some));

    if let Some(path) = &args.calibration {
        let file = std::fs::File::open(path)?;
        let parsed: CalibrationReportFile =
            serde_json::from_reader(std::io::BufReader::new(file))?;
        if cfg.order.is_none() {
            cfg.order = Some(parsed.report.selected_order);
        }
        if cfg.region.is_none() {
            cfg.region = Some((parsed.report.region_lower, parsed.report.region_upper));
        }
    }
    let (lower, upper) = cfg.region.ok_or_else(|| {
        Error::InvalidConfiguration(
            "signal region required: pass --region or --calibration".into(),
        )
    })?;
    let region = SignalRegion::new(lower, upper)?;

    let table = read_events(&args.input)?;
    let mut masses = table.masses().to_vec();
    let mut cut_value = None;
    if cfg.cut_level > 0.0 {
        let scores = table.scores()?;
        let cut = cut_quantile(scores, cfg.cut_level)?;
        masses = masses
            .iter()
            .zip(scores)
            .filter(|(_, &s)| s >= cut)
            .map(|(&m, _)| m)
            .collect();
        cut_value = Some(cut);
    }
    if masses.len() < 100 {
        return Err(Error::LowStatistics(format!(
            "only {} events survive the cut; at least 100 required",
            masses.len()
        )));
    }

    let report = if let Some(b_s) = cfg.known_background_signal_mass {
        let n_signal = masses.iter().filter(|&&m| region.contains(m)).count() as u64;
        let result = counting_test(n_signal, masses.len() as u64, b_s)?;
        TestReport {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION,
            mode: "counting",
            n_input: table.len(),
            n_surviving: masses.len(),
            cut_value,
            lambda: result.lambda_hat,
            statistic: result.statistic,
            p_value: result.p_value,
            rejected: result.p_value < cfg.alpha,
            fit: None,
            config: cfg,
        }
    } else {
        let order = cfg.order.ok_or_else(|| {
            Error::InvalidConfiguration(
                "Bernstein order required: pass --order or --calibration".into(),
            )
        })?;
        let em = EmOptions { max_iter: cfg.em_max_iter, tol: cfg.em_tol };
        let counts = bin_data(&masses, &region, cfg.bins_per_side)?;
        let fit = censored_mle_em(&counts, order, &em)?;
        let result = delta_method_test(&counts, &fit, &em, cfg.fd_step)?;
        TestReport {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION,
            mode: "censored_mle",
            n_input: table.len(),
            n_surviving: masses.len(),
            cut_value,
            lambda: result.lambda,
            statistic: result.statistic,
            p_value: result.p_value,
            rejected: result.p_value < cfg.alpha,
            fit: Some(result),
            config: cfg,
        }
    };
    eprintln!(
        "{}: lambda = {:.5}, T = {:.3}, p = {:.4}",
        report.mode, report.lambda, report.statistic, report.p_value
    );
    write_json(&args.output, &report)
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrateConfig {
    pub alpha: f64,
    pub n_replicates: usize,
    pub replicate_size: usize,
    pub k_grid: Vec<usize>,
    pub bins_per_side: usize,
    pub em_max_iter: usize,
    pub em_tol: f64,
    pub fd_step: f64,
    pub seed: u64,
    pub region: Option<(f64, f64)>,
    pub region_quantiles: (f64, f64),
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        let base = CalibrationConfig::default();
        CalibrateConfig {
            alpha: base.alpha,
            n_replicates: base.n_replicates,
            replicate_size: base.replicate_size,
            k_grid: base.k_grid,
            bins_per_side: base.bins_per_side,
            em_max_iter: base.em.max_iter,
            em_tol: base.em.tol,
            fd_step: base.fd_step,
            seed: base.seed,
            region: None,
            region_quantiles: (0.1, 0.9),
        }
    }
}

#[derive(Args)]
struct CalibrateArgs {
    /// Validation background CSV (mass column).
    #[arg(long, short)]
    input: PathBuf,
    /// Signal CSV used to place the signal region from its mass quantiles.
    #[arg(long)]
    signal: Option<PathBuf>,
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    n_replicates: Option<usize>,
    #[arg(long)]
    replicate_size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    k_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    region: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    bins_per_side: Option<usize>,
}

#[derive(Serialize)]
struct CalibrateReport {
    schema_version: u32,
    tool_version: &'static str,
    config: CalibrateConfig,
    report: crate::calibration::SelectionReport,
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let mut cfg: CalibrateConfig = load_config(&args.config)?;
    override_field!(cfg.alpha, args.alpha);
    override_field!(cfg.n_replicates, args.n_replicates);
    override_field!(cfg.replicate_size, args.replicate_size);
    override_field!(cfg.k_grid, args.k_grid);
    override_field!(cfg.seed, args.seed);
    override_field!(cfg.bins_per_side, args.bins_per_side);
    if let Some(region) = &args.region {
        if region.len() != 2 {
            return Err(Error::InvalidConfiguration("--region expects lower,upper".into()));
        }
        cfg.region = Some((region[0], region[1]));
    }

    let region = match (cfg.region, &args.signal) {
        (Some((lo, hi)), _) => SignalRegion::new(lo, hi)?,
        (None, Some(signal_path)) => {
            let signal = read_events(signal_path)?;
            select_signal_region(
                signal.masses(),
                cfg.region_quantiles.0,
                cfg.region_quantiles.1,
            )?
        }
        (None, None) => {
            return Err(Error::InvalidConfiguration(
                "signal region required: pass --region or --signal".into(),
            ))
        }
    };

    let table = read_events(&args.input)?;
    let calibration = CalibrationConfig {
        alpha: cfg.alpha,
        n_replicates: cfg.n_replicates,
        replicate_size: cfg.replicate_size,
        k_grid: cfg.k_grid.clone(),
        bins_per_side: cfg.bins_per_side,
        em: EmOptions { max_iter: cfg.em_max_iter, tol: cfg.em_tol },
        fd_step: cfg.fd_step,
        seed: cfg.seed,
    };
    let report = select_k(table.masses(), &region, &calibration)?;
    eprintln!(
        "selected order {} (rejection {:.3})",
        report.selected_order,
        report
            .entries
            .iter()
            .find(|e| e.order == report.selected_order)
            .map(|e| e.rejection_rate)
            .unwrap_or(f64::NAN)
    );
    write_json(
        &args.output,
        &CalibrateReport {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION,
            config: cfg,
            report,
        },
    )
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Geodesic interpolation levels; 1 = raw classifier, 0 = decorrelated.
    pub thetas: Vec<f64>,
    /// Equal-width mass bins over the observed range (used when explicit
    /// edges are absent).
    pub mass_bins: usize,
    pub bin_edges: Option<Vec<f64>>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { thetas: vec![0.0, 0.25, 0.5, 0.75, 1.0], mass_bins: 20, bin_edges: None }
    }
}

#[derive(Args)]
struct MetricsArgs {
    /// Labeled CSV (mass, score, label).
    #[arg(long, short)]
    input: PathBuf,
    /// Persisted transport map.
    #[arg(long)]
    map: PathBuf,
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Geodesic curve CSV (theta, r50, one_over_jsd, cut).
    #[arg(long)]
    curve: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    thetas: Option<Vec<f64>>,
    #[arg(long)]
    mass_bins: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    bin_edges: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct ThetaMetrics {
    theta: f64,
    r50: f64,
    one_over_jsd: f64,
    cut: f64,
}

#[derive(Serialize)]
struct MetricsReport {
    schema_version: u32,
    tool_version: &'static str,
    config: MetricsConfig,
    bin_edges: Vec<f64>,
    rows: Vec<ThetaMetrics>,
}

fn cmd_metrics(args: MetricsArgs) -> Result<()> {
    let mut cfg: MetricsConfig = load_config(&args.config)?;
    override_field!(cfg.thetas, args.thetas);
    override_field!(cfg.mass_bins, args.mass_bins);
    if args.bin_edges.is_some() {
        cfg.bin_edges = args.bin_edges;
    }

    let table = read_events(&args.input)?;
    let labels = table.labels()?;
    if labels.iter().any(|l| l.is_none()) {
        return Err(Error::Schema("metrics: every event needs a 0/1 label".into()));
    }
    let scores = table.scores()?;
    let masses = table.masses();
    let map = load_transport_map(&args.map)?;

    let edges = match &cfg.bin_edges {
        Some(edges) => edges.clone(),
        None => {
            if cfg.mass_bins < 1 {
                return Err(Error::InvalidConfiguration("metrics: need at least one bin".into()));
            }
            let lo = masses.iter().fold(f64::INFINITY, |a, &b| a.min(b));
            let hi = masses.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            (0..=cfg.mass_bins)
                .map(|i| lo + (hi - lo) * i as f64 / cfg.mass_bins as f64)
                .collect()
        }
    };

    let mut rows = Vec::with_capacity(cfg.thetas.len());
    for &theta in &cfg.thetas {
        let mut bg_scores = Vec::new();
        let mut bg_masses = Vec::new();
        let mut sig_scores = Vec::new();
        for i in 0..table.len() {
            let morphed = map.morph(scores[i], masses[i], theta)?;
            if labels[i] == Some(1) {
                sig_scores.push(morphed);
            } else {
                bg_scores.push(morphed);
                bg_masses.push(masses[i]);
            }
        }
        rows.push(ThetaMetrics {
            theta,
            r50: r50(&sig_scores, &bg_scores)?,
            one_over_jsd: one_over_jsd(&bg_scores, &bg_masses, &sig_scores, &edges)?,
            cut: crate::estimators::empirical_quantile(&sig_scores, 0.5),
        });
    }

    if let Some(curve) = &args.curve {
        let mut writer = csv::Writer::from_path(curve)?;
        writer.write_record(["theta", "r50", "one_over_jsd", "cut"])?;
        for row in &rows {
            writer.write_record([
                format!("{}", row.theta),
                format!("{}", row.r50),
                format!("{}", row.one_over_jsd),
                format!("{}", row.cut),
            ])?;
        }
        writer.flush()?;
    }
    write_json(
        &args.output,
        &MetricsReport {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION,
            config: cfg,
            bin_edges: edges,
            rows,
        },
    )
}

// ---------------------------------------------------------------------------
// power
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerCliConfig {
    pub generator: SimulateConfig,
    pub harness: PowerConfig,
}

#[derive(Args)]
struct PowerArgs {
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Plot-ready CSV (lambda, cut, decorrelated, power, ci_lo, ci_hi, n_reps).
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    cut_levels: Option<Vec<f64>>,
    /// Pipeline variants: comma list of `raw` / `decorrelated`.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    #[arg(long)]
    n_replicates: Option<usize>,
    #[arg(long)]
    replicate_size: Option<usize>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct PowerReportFile {
    schema_version: u32,
    tool_version: &'static str,
    config: PowerCliConfig,
    report: PowerReport,
}

fn cmd_power(args: PowerArgs) -> Result<()> {
    let mut cfg: PowerCliConfig = load_config(&args.config)?;
    override_field!(cfg.harness.lambdas, args.lambdas);
    override_field!(cfg.harness.cut_levels, args.cut_levels);
    override_field!(cfg.harness.n_replicates, args.n_replicates);
    override_field!(cfg.harness.replicate_size, args.replicate_size);
    override_field!(cfg.harness.order, args.order);
    override_field!(cfg.harness.alpha, args.alpha);
    override_field!(cfg.generator.seed, args.seed);
    if let Some(variants) = &args.variants {
        cfg.harness.variants = variants
            .iter()
            .map(|v| match v.as_str() {
                "raw" => Ok(false),
                "decorrelated" => Ok(true),
                other => Err(Error::InvalidConfiguration(format!(
                    "unknown variant {other:?} (expected raw or decorrelated)"
                ))),
            })
            .collect::<Result<_>>()?;
    }

    let spec = cfg.generator.generator_spec()?;
    let report = power_analysis(&spec, &cfg.harness)?;
    if let Some(csv_path) = &args.csv {
        let mut writer = csv::Writer::from_path(csv_path)?;
        writer.write_record(["lambda", "cut", "decorrelated", "power", "ci_lo", "ci_hi", "n_reps"])?;
        for cell in &report.cells {
            writer.write_record([
                format!("{}", cell.lambda),
                format!("{}", cell.cut),
                format!("{}", u8::from(cell.decorrelated)),
                format!("{}", cell.rejection_rate),
                format!("{}", cell.ci.lower),
                format!("{}", cell.ci.upper),
                format!("{}", cell.n_replicates),
            ])?;
        }
        writer.flush()?;
    }
    eprintln!("power study complete: {} cells", report.cells.len());
    write_json(
        &args.output,
        &PowerReportFile {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION,
            config: cfg,
            report,
        },
    )
}
