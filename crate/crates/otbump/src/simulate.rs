//! Synthetic event generation and the Monte Carlo power-analysis harness.
//!
//! The default generator reproduces the statistical setting of a bump hunt
//! at desk scale: a smooth falling background in the protected variable
//! ("mass", scaled to the unit interval), a localized Gaussian signal bump,
//! and a classifier score whose background distribution depends on mass so
//! that cutting on the raw score sculpts a fake bump. Everything is driven
//! by counter-based seed-splittable RNG streams, so parallel runs match
//! serial runs exactly.

use rand::RngCore;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bumphunt::{
    bin_data, censored_mle_em, delta_method_test, BernsteinDensity, EmOptions,
};
use crate::calibration::{cut_quantile, select_signal_region};
use crate::error::{Error, Result};
use crate::estimators::{clopper_pearson, normal_quantile, BinomialInterval};
use crate::rng::{open_unit, stream_rng};
use crate::transport::{fit_locscale, fit_split, BandwidthGrids, TransportMap, SCORE_CLAMP};

// ---------------------------------------------------------------------------
// Generator specification
// ---------------------------------------------------------------------------

/// Background mass families on the unit interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum BackgroundFamily {
    /// Exponential with the given rate, truncated to [0, 1].
    TruncatedExponential { rate: f64 },
    /// Arbitrary Bernstein mixture (weights on the scaled simplex).
    Bernstein { weights: Vec<f64> },
}

/// Classifier score model given (label, mass).
///
/// The correlated background score is `Beta(a(m), 3)` with
/// `a(m) = 1 + slope * m + peak_boost * exp(-(m - 0.5)^2 / (2 peak_width^2))`,
/// so the background score grows with mass and (optionally) near the signal
/// masses; cutting on the raw score then sculpts a background bump around
/// the signal region. Signal scores are `Beta(6, 2)` regardless of mass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ScoreModel {
    Correlated { slope: f64, peak_boost: f64, peak_width: f64 },
    /// Background `Beta(2, 3)` independent of mass; signal `Beta(6, 2)`.
    Independent,
}

impl Default for ScoreModel {
    fn default() -> Self {
        // slope alone sculpts only a gentle dome that the fitted background
        // absorbs; the peak term saturates the score near the signal masses,
        // which is what actually produces the conservative sculpted test
        ScoreModel::Correlated { slope: 4.0, peak_boost: 30.0, peak_width: 0.3 }
    }
}

/// Full synthetic-data specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub background: BackgroundFamily,
    pub signal_mean: f64,
    pub signal_sigma: f64,
    pub score_model: ScoreModel,
    /// Signal strength: probability that an event is signal.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            background: BackgroundFamily::TruncatedExponential { rate: 2.0 },
            signal_mean: 0.5,
            signal_sigma: 0.04,
            score_model: ScoreModel::default(),
            lambda: 0.0,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!(
                "generator: lambda {} outside [0,1]",
                self.lambda
            )));
        }
        if !(self.signal_sigma > 0.0) {
            return Err(Error::InvalidArgument("generator: signal sigma must be > 0".into()));
        }
        match &self.background {
            BackgroundFamily::TruncatedExponential { rate } => {
                if !(rate.is_finite() && *rate > 0.0) {
                    return Err(Error::InvalidArgument(
                        "generator: exponential rate must be positive".into(),
                    ));
                }
            }
            BackgroundFamily::Bernstein { weights } => {
                BernsteinDensity::new(weights.clone())?;
            }
        }
        Ok(())
    }
}

/// One observation: protected-variable value, classifier score, optional
/// truth label, optional weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledEvent {
    pub mass: f64,
    pub score: f64,
    pub label: Option<u8>,
    pub weight: Option<f64>,
}

fn sample_trunc_exp<R: RngCore>(rng: &mut R, rate: f64) -> f64 {
    let u = open_unit(rng);
    -(-u * (1.0 - (-rate).exp())).ln_1p() / rate
}

fn sample_trunc_normal<R: RngCore>(rng: &mut R, mean: f64, sigma: f64) -> f64 {
    let a = crate::estimators::normal_cdf((0.0 - mean) / sigma);
    let b = crate::estimators::normal_cdf((1.0 - mean) / sigma);
    let u = open_unit(rng);
    mean + sigma * normal_quantile(a + u * (b - a))
}

fn sample_bernstein_mixture<R: RngCore>(rng: &mut R, weights: &[f64]) -> f64 {
    let order = weights.len() - 1;
    let mut u = open_unit(rng) * weights.len() as f64;
    let mut k = order;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            k = i;
            break;
        }
        u -= w;
    }
    rand_distr::Beta::new((k + 1) as f64, (order - k + 1) as f64).unwrap().sample(rng)
}

/// Background-score Beta shape parameter at mass `m`.
fn correlated_shape(slope: f64, peak_boost: f64, peak_width: f64, m: f64) -> f64 {
    1.0 + slope * m + peak_boost * (-(m - 0.5) * (m - 0.5) / (2.0 * peak_width * peak_width)).exp()
}

fn sample_score<R: RngCore>(rng: &mut R, model: &ScoreModel, is_signal: bool, mass: f64) -> f64 {
    let (a, b) = if is_signal {
        (6.0, 2.0)
    } else {
        match model {
            ScoreModel::Correlated { slope, peak_boost, peak_width } => {
                (correlated_shape(*slope, *peak_boost, *peak_width, mass), 3.0)
            }
            ScoreModel::Independent => (2.0, 3.0),
        }
    };
    rand_distr::Beta::new(a, b).unwrap().sample(rng)
}

/// Draw `n` events from stream `stream` of the generator.
pub fn sample_events_stream(
    spec: &GeneratorSpec,
    n: usize,
    stream: u64,
) -> Result<Vec<LabeledEvent>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("sample_events: n must be >= 1".into()));
    }
    let mut rng = stream_rng(spec.seed, stream);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let is_signal = open_unit(&mut rng) < spec.lambda;
        let mass = if is_signal {
            sample_trunc_normal(&mut rng, spec.signal_mean, spec.signal_sigma)
        } else {
            match &spec.background {
                BackgroundFamily::TruncatedExponential { rate } => {
                    sample_trunc_exp(&mut rng, *rate)
                }
                BackgroundFamily::Bernstein { weights } => {
                    sample_bernstein_mixture(&mut rng, weights)
                }
            }
        };
        let score = sample_score(&mut rng, &spec.score_model, is_signal, mass);
        out.push(LabeledEvent { mass, score, label: Some(u8::from(is_signal)), weight: None });
    }
    Ok(out)
}

/// Draw `n` events from the generator's default stream.
pub fn sample_events(spec: &GeneratorSpec, n: usize) -> Result<Vec<LabeledEvent>> {
    sample_events_stream(spec, n, 0)
}

// ---------------------------------------------------------------------------
// Mass transform
// ---------------------------------------------------------------------------

/// Map a raw mass onto [0, 1) through the exponential CDF
/// `m -> 1 - exp(-r (m - b))`, where `b` is the lower endpoint of the raw
/// mass range and `r` the fitted exponential rate.
pub fn transform_mass(m: f64, b: f64, r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::InvalidArgument("transform_mass: rate must be positive".into()));
    }
    if m < b {
        return Err(Error::InvalidArgument(format!(
            "transform_mass: mass {m} below the lower endpoint {b}"
        )));
    }
    Ok(-(-r * (m - b)).exp_m1())
}

// ---------------------------------------------------------------------------
// Built-in classifier
// ---------------------------------------------------------------------------

/// Per-feature-binned naive-Bayes scorer: a deterministic stand-in for an
/// externally trained classifier when only raw features are available.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NaiveBayesScorer {
    bins: usize,
    ranges: Vec<(f64, f64)>,
    /// `log_ratio[d][bin]` = log P(bin | signal) - log P(bin | background).
    log_ratio: Vec<Vec<f64>>,
    log_prior_ratio: f64,
}

impl NaiveBayesScorer {
    fn bin_index(&self, d: usize, x: f64) -> usize {
        let (lo, hi) = self.ranges[d];
        if hi <= lo {
            return 0;
        }
        let t = ((x - lo) / (hi - lo) * self.bins as f64).floor();
        (t.max(0.0) as usize).min(self.bins - 1)
    }

    /// Posterior probability of signal given the feature vector.
    pub fn score(&self, features: &[f64]) -> f64 {
        let mut log_odds = self.log_prior_ratio;
        for (d, &x) in features.iter().enumerate() {
            log_odds += self.log_ratio[d][self.bin_index(d, x)];
        }
        1.0 / (1.0 + (-log_odds).exp())
    }
}

/// Train the binned naive-Bayes scorer with Laplace smoothing.
pub fn builtin_classifier(
    features: &[Vec<f64>],
    labels: &[u8],
    bins: usize,
) -> Result<NaiveBayesScorer> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::InvalidArgument(
            "classifier: features/labels mismatch or empty".into(),
        ));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("classifier: need at least one bin".into()));
    }
    let n_signal = labels.iter().filter(|&&l| l == 1).count();
    if n_signal == 0 || n_signal == labels.len() {
        return Err(Error::InvalidArgument("classifier: both classes must be present".into()));
    }
    let dims = features[0].len();
    if dims == 0 || features.iter().any(|f| f.len() != dims) {
        return Err(Error::InvalidArgument("classifier: ragged or empty feature rows".into()));
    }
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); dims];
    for row in features {
        for (d, &x) in row.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::InvalidArgument("classifier: non-finite feature".into()));
            }
            ranges[d].0 = ranges[d].0.min(x);
            ranges[d].1 = ranges[d].1.max(x);
        }
    }
    let mut scorer = NaiveBayesScorer {
        bins,
        ranges,
        log_ratio: vec![vec![0.0; bins]; dims],
        log_prior_ratio: 0.0,
    };
    let n_background = labels.len() - n_signal;
    scorer.log_prior_ratio = (n_signal as f64 / n_background as f64).ln();
    let mut counts = vec![vec![[1.0f64; 2]; bins]; dims]; // Laplace smoothing
    for (row, &label) in features.iter().zip(labels) {
        for (d, &x) in row.iter().enumerate() {
            counts[d][scorer.bin_index(d, x)][usize::from(label == 1)] += 1.0;
        }
    }
    for d in 0..dims {
        let total_b: f64 = counts[d].iter().map(|c| c[0]).sum();
        let total_s: f64 = counts[d].iter().map(|c| c[1]).sum();
        for bin in 0..bins {
            scorer.log_ratio[d][bin] =
                (counts[d][bin][1] / total_s).ln() - (counts[d][bin][0] / total_b).ln();
        }
    }
    Ok(scorer)
}

// ---------------------------------------------------------------------------
// Power analysis
// ---------------------------------------------------------------------------

/// Transport-map approach used inside the power harness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum MapApproach {
    Split { splits: Vec<f64> },
    LocScale,
}

/// Configuration of the power study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerConfig {
    pub lambdas: Vec<f64>,
    pub cut_levels: Vec<f64>,
    /// Pipeline variants: false = raw classifier, true = decorrelated.
    pub variants: Vec<bool>,
    pub n_replicates: usize,
    pub replicate_size: usize,
    pub alpha: f64,
    pub order: usize,
    pub bins_per_side: usize,
    pub em: EmOptions,
    pub fd_step: f64,
    pub region_quantiles: (f64, f64),
    /// Validation sample sizes used to calibrate cuts and the signal region.
    pub validation_background: usize,
    pub validation_signal: usize,
    /// Number of validation events used to fit the transport map.
    pub map_fit_size: usize,
    pub approach: MapApproach,
    pub grids: BandwidthGrids,
}

impl Default for PowerConfig {
    fn default() -> Self {
        PowerConfig {
            lambdas: vec![0.0, 0.01, 0.02, 0.05],
            cut_levels: vec![0.0, 0.5, 0.9],
            variants: vec![false, true],
            n_replicates: 200,
            replicate_size: 20_000,
            alpha: 0.05,
            order: 5,
            bins_per_side: 50,
            em: EmOptions::default(),
            fd_step: 1e-4,
            region_quantiles: (0.1, 0.9),
            validation_background: 20_000,
            validation_signal: 20_000,
            map_fit_size: 10_000,
            approach: MapApproach::Split { splits: vec![0.2, 0.4, 0.6, 0.8] },
            grids: BandwidthGrids::default(),
        }
    }
}

/// One (lambda, cut, variant) cell of the power grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerCell {
    pub lambda: f64,
    pub cut: f64,
    pub decorrelated: bool,
    pub rejection_rate: f64,
    pub ci: BinomialInterval,
    pub mean_lambda_hat: f64,
    pub n_replicates: usize,
    pub failed_replicates: usize,
    /// Set when more than 10% of replicates kept fewer than 500 events.
    pub low_statistics: bool,
}

/// Full power-study output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerReport {
    pub cells: Vec<PowerCell>,
    pub region_lower: f64,
    pub region_upper: f64,
    pub order: usize,
    pub seed: u64,
    pub map_fallbacks: u64,
}

// dedicated streams for the validation draws; replicates use streams 0..N
const STREAM_VALIDATION_BG: u64 = u64::MAX - 1;
const STREAM_VALIDATION_SIG: u64 = u64::MAX - 2;

/// Fit the harness transport map on dedicated validation background events.
pub fn fit_validation_map(spec: &GeneratorSpec, cfg: &PowerConfig) -> Result<TransportMap> {
    let mut bg_spec = spec.clone();
    bg_spec.lambda = 0.0;
    let events = sample_events_stream(&bg_spec, cfg.map_fit_size, STREAM_VALIDATION_BG)?;
    let pairs: Vec<(f64, f64)> = events.iter().map(|e| (e.score, e.mass)).collect();
    match &cfg.approach {
        MapApproach::Split { splits } => fit_split(&pairs, splits, &cfg.grids),
        MapApproach::LocScale => {
            let mut pairs = pairs;
            for p in &mut pairs {
                p.0 = p.0.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
            }
            fit_locscale(&pairs, &cfg.grids, None)
        }
    }
}

/// Monte Carlo power analysis over the (lambda, cut, variant) grid.
///
/// Replicates draw from per-replicate RNG streams shared across cells (so
/// comparisons are paired) and run in parallel; aggregation is
/// order-independent, so reruns reproduce the report bit for bit.
pub fn power_analysis(spec: &GeneratorSpec, cfg: &PowerConfig) -> Result<PowerReport> {
    if cfg.n_replicates == 0 || cfg.replicate_size == 0 {
        return Err(Error::InvalidConfiguration("power: N and n must be positive".into()));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::InvalidConfiguration("power: alpha must be in (0,1)".into()));
    }
    // validation phase: signal region, transport map, cut quantiles
    let mut bg_spec = spec.clone();
    bg_spec.lambda = 0.0;
    let val_bg = sample_events_stream(&bg_spec, cfg.validation_background, STREAM_VALIDATION_BG)?;
    let mut sig_spec = spec.clone();
    sig_spec.lambda = 1.0;
    let val_sig = sample_events_stream(&sig_spec, cfg.validation_signal, STREAM_VALIDATION_SIG)?;
    let sig_masses: Vec<f64> = val_sig.iter().map(|e| e.mass).collect();
    let region = select_signal_region(&sig_masses, cfg.region_quantiles.0, cfg.region_quantiles.1)?;

    let needs_map = cfg.variants.iter().any(|&d| d);
    let map = if needs_map { Some(fit_validation_map(spec, cfg)?) } else { None };
    let raw_scores: Vec<f64> = val_bg.iter().map(|e| e.score).collect();
    let mut map_fallbacks = 0u64;
    let dec_scores: Vec<f64> = if let Some(map) = &map {
        let pairs: Vec<(f64, f64)> = val_bg.iter().map(|e| (e.score, e.mass)).collect();
        let (scores, fb) = map.transport_batch(&pairs);
        map_fallbacks = fb;
        scores
    } else {
        Vec::new()
    };

    // cut values per (variant, cut level); t = 0 keeps everything
    let mut cut_values = vec![vec![f64::NEG_INFINITY; cfg.cut_levels.len()]; 2];
    for (vi, decorrelated) in [false, true].into_iter().enumerate() {
        if decorrelated && !needs_map {
            continue;
        }
        for (ci, &t) in cfg.cut_levels.iter().enumerate() {
            if t > 0.0 {
                let scores = if decorrelated { &dec_scores } else { &raw_scores };
                cut_values[vi][ci] = cut_quantile(scores, t)?;
            }
        }
    }

    let z_alpha = normal_quantile(1.0 - cfg.alpha);
    let n_cells = cfg.cut_levels.len() * cfg.variants.len();
    // per-replicate outcome codes: bit 0 = rejected, bit 1 = under 500
    // events, code 3 = failed replicate
    const FAILED: u8 = 3;
    let mut cells: Vec<PowerCell> = Vec::new();
    for &lambda in &cfg.lambdas {
        let mut rep_spec = spec.clone();
        rep_spec.lambda = lambda;
        let per_rep: Vec<Vec<(u8, f64)>> = (0..cfg.n_replicates)
            .into_par_iter()
            .map(|rep| {
                let events = match sample_events_stream(&rep_spec, cfg.replicate_size, rep as u64)
                {
                    Ok(e) => e,
                    Err(_) => return vec![(FAILED, 0.0); n_cells],
                };
                let raw: Vec<f64> = events.iter().map(|e| e.score).collect();
                let dec: Vec<f64> = if let Some(map) = &map {
                    events.iter().map(|e| map.transport(e.score, e.mass)).collect()
                } else {
                    Vec::new()
                };
                let mut out = Vec::with_capacity(n_cells);
                for &decorrelated in &cfg.variants {
                    let scores = if decorrelated { &dec } else { &raw };
                    let vi = usize::from(decorrelated);
                    for ci in 0..cfg.cut_levels.len() {
                        let cut = cut_values[vi][ci];
                        let masses: Vec<f64> = events
                            .iter()
                            .zip(scores)
                            .filter(|(_, &s)| s >= cut)
                            .map(|(e, _)| e.mass)
                            .collect();
                        let small = masses.len() < 500;
                        if masses.len() < 100 {
                            out.push((FAILED, 0.0));
                            continue;
                        }
                        let outcome = bin_data(&masses, &region, cfg.bins_per_side).and_then(|c| {
                            let fit = censored_mle_em(&c, cfg.order, &cfg.em)?;
                            delta_method_test(&c, &fit, &cfg.em, cfg.fd_step)
                        });
                        match outcome {
                            Ok(r) => {
                                let code =
                                    u8::from(r.statistic > z_alpha) | (u8::from(small) << 1);
                                out.push((code, r.lambda));
                            }
                            Err(_) => out.push((FAILED, 0.0)),
                        }
                    }
                }
                out
            })
            .collect();

        for (vi_pos, &decorrelated) in cfg.variants.iter().enumerate() {
            for (ci, &cut) in cfg.cut_levels.iter().enumerate() {
                let cell_idx = vi_pos * cfg.cut_levels.len() + ci;
                let (mut rejections, mut used, mut failed, mut small) = (0u64, 0u64, 0u64, 0u64);
                let mut lambda_sum = 0.0;
                for rep in &per_rep {
                    let (code, lam) = rep[cell_idx];
                    if code == FAILED {
                        failed += 1;
                        continue;
                    }
                    used += 1;
                    rejections += u64::from(code & 1 == 1);
                    small += u64::from(code & 2 == 2);
                    lambda_sum += lam;
                }
                let rate = if used > 0 { rejections as f64 / used as f64 } else { f64::NAN };
                cells.push(PowerCell {
                    lambda,
                    cut,
                    decorrelated,
                    rejection_rate: rate,
                    ci: clopper_pearson(rejections, used.max(1), 0.95)?,
                    mean_lambda_hat: if used > 0 { lambda_sum / used as f64 } else { f64::NAN },
                    n_replicates: used as usize,
                    failed_replicates: failed as usize,
                    low_statistics: small * 10 > used + failed,
                });
            }
        }
    }
    Ok(PowerReport {
        cells,
        region_lower: region.lower(),
        region_upper: region.upper(),
        order: cfg.order,
        seed: spec.seed,
        map_fallbacks,
    })
}
