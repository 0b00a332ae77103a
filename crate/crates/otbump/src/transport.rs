//! Optimal-transport decorrelation of classifier scores.
//!
//! For background events the fitted map sends a score `z` observed at
//! protected-variable value `m` to `F_z^-1(F_{z|m}(z))`: the conditional
//! quantile is looked up in the marginal score distribution, which removes
//! the dependence on `m` while preserving the marginal. Two conditional
//! models are available: per-cell kernel estimators over a mass partition
//! (`split`), and a location-scale decomposition of the logit score against
//! log mass (`locscale`).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    empirical_quantile, ks_two_sample, lscv_bandwidths, silverman_bandwidth, ConditionalCdf,
    KernelRegression, LscvSelection, StepCdf,
};
use crate::SCHEMA_VERSION;

/// Score clamp bound applied before logit transforms.
pub const SCORE_CLAMP: f64 = 1e-6;

/// Clamp scores into `[SCORE_CLAMP, 1 - SCORE_CLAMP]`, returning how many
/// values moved. Probabilistic classifiers occasionally emit exact 0/1;
/// the logit in the location-scale fit needs them strictly inside (0,1).
pub fn clamp_unit_scores(scores: &mut [f64]) -> u64 {
    let mut clamped = 0;
    for s in scores {
        let c = s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
        if c != *s {
            *s = c;
            clamped += 1;
        }
    }
    clamped
}

fn logit(z: f64) -> f64 {
    (z / (1.0 - z)).ln()
}

// ---------------------------------------------------------------------------
// Bandwidth grid configuration
// ---------------------------------------------------------------------------

/// Candidate bandwidth grids for the conditional-CDF fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandwidthGrids {
    pub h_z: Vec<f64>,
    pub h_m: Vec<f64>,
    /// When true, grid entries are factors applied to the per-axis
    /// rule-of-thumb bandwidth of the fit data.
    pub relative: bool,
    /// Cap on the number of points fed to the cross-validation (evenly
    /// strided after sorting by the conditioning variable). The final fit
    /// always uses every point.
    pub lscv_subsample: Option<usize>,
}

impl Default for BandwidthGrids {
    fn default() -> Self {
        BandwidthGrids {
            h_z: vec![0.25, 0.5, 1.0, 2.0],
            h_m: vec![0.05, 0.1, 0.25, 0.5, 1.0],
            relative: true,
            lscv_subsample: Some(2000),
        }
    }
}

impl BandwidthGrids {
    fn materialize(&self, z: &[f64], m: &[f64]) -> (Vec<f64>, Vec<f64>) {
        if self.relative {
            let (bz, bm) = (silverman_bandwidth(z), silverman_bandwidth(m));
            (self.h_z.iter().map(|f| f * bz).collect(), self.h_m.iter().map(|f| f * bm).collect())
        } else {
            (self.h_z.clone(), self.h_m.clone())
        }
    }

    fn select(&self, z: &[f64], m: &[f64]) -> Result<LscvSelection> {
        let (gz, gm) = self.materialize(z, m);
        let cap = self.lscv_subsample.unwrap_or(usize::MAX).max(2);
        if z.len() > cap {
            // evenly strided subsample after sorting by m keeps the mass
            // coverage of the full sample
            let mut order: Vec<usize> = (0..z.len()).collect();
            order.sort_unstable_by(|&a, &b| m[a].total_cmp(&m[b]).then(z[a].total_cmp(&z[b])));
            let mut zs = Vec::with_capacity(cap);
            let mut ms = Vec::with_capacity(cap);
            for i in 0..cap {
                let idx = order[i * z.len() / cap];
                zs.push(z[idx]);
                ms.push(m[idx]);
            }
            lscv_bandwidths(&zs, &ms, &gz, &gm)
        } else {
            lscv_bandwidths(z, m, &gz, &gm)
        }
    }
}

// ---------------------------------------------------------------------------
// Transport map
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ConditionalModel {
    /// Ordered interior split points partition the mass range; one kernel
    /// conditional CDF per cell.
    Split { splits: Vec<f64>, cells: Vec<ConditionalCdf> },
    /// `logit z = mu(log m) + sigma(log m) * eps` with a kernel conditional
    /// CDF on the standardized residuals. `variance_floor` keeps the scale
    /// curve positive at isolated masses whose local variance estimate
    /// degenerates to zero.
    LocScale {
        mu: KernelRegression,
        sigma2: KernelRegression,
        residual_cdf: ConditionalCdf,
        variance_floor: f64,
    },
}

/// Fit metadata carried for reporting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitInfo {
    pub approach: String,
    pub lscv: Vec<LscvSelection>,
    pub regression_bandwidth: Option<f64>,
    pub n_train: usize,
}

/// Fitted decorrelation transform: marginal score ECDF plus a conditional
/// CDF model indexed by mass. Training data is stored verbatim, so a
/// reloaded map reproduces every evaluation bit for bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransportMap {
    marginal: StepCdf,
    conditional: ConditionalModel,
    mass_min: f64,
    mass_max: f64,
    pub fit_info: FitInfo,
}

fn validate_events(events: &[(f64, f64)]) -> Result<()> {
    if events.iter().any(|(z, m)| !z.is_finite() || !m.is_finite()) {
        return Err(Error::InvalidArgument("transport fit: non-finite score or mass".into()));
    }
    Ok(())
}

/// Fit the split-model transport map. `splits` are the interior mass split
/// points (possibly empty for a single cell); a per-cell bandwidth pair is
/// chosen by cross-validation and the marginal ECDF pools every score.
pub fn fit_split(
    events: &[(f64, f64)],
    splits: &[f64],
    grids: &BandwidthGrids,
) -> Result<TransportMap> {
    if events.len() < 2 {
        return Err(Error::InvalidArgument("transport fit: need at least 2 events".into()));
    }
    validate_events(events)?;
    let mass_min = events.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
    let mass_max = events.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
    if splits.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfiguration("splits must be strictly increasing".into()));
    }
    if splits.iter().any(|s| *s <= mass_min || *s >= mass_max) {
        return Err(Error::InvalidConfiguration(format!(
            "splits must lie inside the observed mass range [{mass_min}, {mass_max}]"
        )));
    }

    let n_cells = splits.len() + 1;
    let mut cell_z: Vec<Vec<f64>> = vec![Vec::new(); n_cells];
    let mut cell_m: Vec<Vec<f64>> = vec![Vec::new(); n_cells];
    for &(z, m) in events {
        let idx = splits.partition_point(|&s| s <= m);
        cell_z[idx].push(z);
        cell_m[idx].push(m);
    }
    for (i, zs) in cell_z.iter().enumerate() {
        if zs.len() < 50 {
            return Err(Error::InvalidConfiguration(format!(
                "split cell {i} holds {} events, need at least 50",
                zs.len()
            )));
        }
    }

    let fits: Vec<Result<(ConditionalCdf, LscvSelection)>> = (0..n_cells)
        .into_par_iter()
        .map(|i| {
            let sel = grids.select(&cell_z[i], &cell_m[i])?;
            let cdf = ConditionalCdf::fit(&cell_z[i], &cell_m[i], sel.h_z, sel.h_m)?;
            Ok((cdf, sel))
        })
        .collect();
    let mut cells = Vec::with_capacity(n_cells);
    let mut lscv = Vec::with_capacity(n_cells);
    for fit in fits {
        let (cdf, sel) = fit?;
        cells.push(cdf);
        lscv.push(sel);
    }

    let scores: Vec<f64> = events.iter().map(|e| e.0).collect();
    Ok(TransportMap {
        marginal: StepCdf::fit(&scores)?,
        conditional: ConditionalModel::Split { splits: splits.to_vec(), cells },
        mass_min,
        mass_max,
        fit_info: FitInfo {
            approach: "split".into(),
            lscv,
            regression_bandwidth: None,
            n_train: events.len(),
        },
    })
}

/// Fit the location-scale transport map: kernel regressions of the logit
/// score (and of its squared residuals) on log mass, then a
/// single-bandwidth conditional CDF on the standardized residuals.
///
/// Scores must lie strictly inside (0,1) — run [`clamp_unit_scores`] first
/// when the classifier can emit exact 0/1 — and masses must be positive.
/// The regression bandwidth defaults to half the rule-of-thumb value on log
/// mass (the location and scale curves need less smoothing than a density).
pub fn fit_locscale(
    events: &[(f64, f64)],
    grids: &BandwidthGrids,
    regression_bandwidth: Option<f64>,
) -> Result<TransportMap> {
    if events.len() < 2 {
        return Err(Error::InvalidArgument("transport fit: need at least 2 events".into()));
    }
    validate_events(events)?;
    if events.iter().any(|(z, _)| *z <= 0.0 || *z >= 1.0) {
        return Err(Error::InvalidArgument(
            "locscale fit: scores must be strictly inside (0,1); clamp them first".into(),
        ));
    }
    if events.iter().any(|(_, m)| *m <= 0.0) {
        return Err(Error::InvalidArgument("locscale fit: masses must be positive".into()));
    }
    let mass_min = events.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
    let mass_max = events.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);

    let log_m: Vec<f64> = events.iter().map(|e| e.1.ln()).collect();
    let logit_z: Vec<f64> = events.iter().map(|e| logit(e.0)).collect();
    let reg_bw = regression_bandwidth.unwrap_or_else(|| 0.5 * silverman_bandwidth(&log_m));
    let mu = KernelRegression::fit(&log_m, &logit_z, reg_bw)?;

    let eta: Vec<f64> = log_m.iter().zip(&logit_z).map(|(&x, &y)| y - mu.eval(x)).collect();
    let eta_sq: Vec<f64> = eta.iter().map(|e| e * e).collect();
    let sigma2 = KernelRegression::fit(&log_m, &eta_sq, reg_bw)?;
    // isolated masses self-fit to a zero local variance; floor the scale
    // curve at a small fraction of the global residual variance
    let global_var = eta_sq.iter().sum::<f64>() / eta_sq.len() as f64;
    if !(global_var > 0.0) {
        return Err(Error::FitFailure(
            "locscale fit: residuals have zero variance overall".into(),
        ));
    }
    let variance_floor = 1e-4 * global_var;
    let sd: Vec<f64> =
        log_m.iter().map(|&x| sigma2.eval(x).max(variance_floor).sqrt()).collect();
    let eps: Vec<f64> = eta.iter().zip(&sd).map(|(e, s)| e / s).collect();

    let sel = grids.select(&eps, &log_m)?;
    let residual_cdf = ConditionalCdf::fit(&eps, &log_m, sel.h_z, sel.h_m)?;

    let scores: Vec<f64> = events.iter().map(|e| e.0).collect();
    Ok(TransportMap {
        marginal: StepCdf::fit(&scores)?,
        conditional: ConditionalModel::LocScale { mu, sigma2, residual_cdf, variance_floor },
        mass_min,
        mass_max,
        fit_info: FitInfo {
            approach: "locscale".into(),
            lscv: vec![sel],
            regression_bandwidth: Some(reg_bw),
            n_train: events.len(),
        },
    })
}

impl TransportMap {
    pub fn mass_range(&self) -> (f64, f64) {
        (self.mass_min, self.mass_max)
    }

    pub fn marginal(&self) -> &StepCdf {
        &self.marginal
    }

    pub fn conditional(&self) -> &ConditionalModel {
        &self.conditional
    }

    /// Conditional CDF `F(z|m)` under the fitted model; the flag reports a
    /// nearest-neighbor fallback (mass far outside the training range).
    pub fn conditional_cdf(&self, score: f64, mass: f64) -> (f64, bool) {
        match &self.conditional {
            ConditionalModel::Split { splits, cells } => {
                let idx = splits.partition_point(|&s| s <= mass);
                cells[idx].eval_checked(score, mass)
            }
            ConditionalModel::LocScale { mu, sigma2, residual_cdf, variance_floor } => {
                // nonpositive mass cannot be logged; treat it like a mass far
                // below the training range
                let mut fallback = mass <= 0.0;
                let lm = if mass > 0.0 { mass.ln() } else { self.mass_min.ln() };
                let (loc, f1) = mu.eval_checked(lm);
                let (var, f2) = sigma2.eval_checked(lm);
                let sd = var.max(*variance_floor).sqrt();
                let standardized = (logit(score) - loc) / sd;
                let (u, f3) = residual_cdf.eval_checked(standardized, lm);
                fallback |= f1 || f2 || f3;
                (u, fallback)
            }
        }
    }

    /// Decorrelated score `F_z^-1(F(z|m))`, with the out-of-range flag.
    pub fn transport_checked(&self, score: f64, mass: f64) -> (f64, bool) {
        let (u, fallback) = self.conditional_cdf(score, mass);
        (self.marginal.quantile(u), fallback)
    }

    pub fn transport(&self, score: f64, mass: f64) -> f64 {
        self.transport_checked(score, mass).0
    }

    /// Geodesic interpolation `theta * score + (1 - theta) * transport`:
    /// `theta = 1` reproduces the raw score exactly and `theta = 0` the
    /// fully decorrelated one.
    pub fn morph(&self, score: f64, mass: f64, theta: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::InvalidArgument(format!("morph: theta {theta} outside [0,1]")));
        }
        Ok(theta * score + (1.0 - theta) * self.transport(score, mass))
    }

    /// Transport a batch in parallel; returns the transported scores and the
    /// number of out-of-range fallbacks.
    pub fn transport_batch(&self, events: &[(f64, f64)]) -> (Vec<f64>, u64) {
        let out: Vec<(f64, bool)> =
            events.par_iter().map(|&(z, m)| self.transport_checked(z, m)).collect();
        let fallbacks = out.iter().filter(|(_, f)| *f).count() as u64;
        (out.into_iter().map(|(t, _)| t).collect(), fallbacks)
    }
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TransportMapFile {
    schema_version: u32,
    map: TransportMap,
}

pub fn save_transport_map(map: &TransportMap, path: &std::path::Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(
        std::io::BufWriter::new(file),
        &TransportMapFile { schema_version: SCHEMA_VERSION, map: map.clone() },
    )?;
    Ok(())
}

pub fn load_transport_map(path: &std::path::Path) -> Result<TransportMap> {
    let file = std::fs::File::open(path)?;
    let parsed: TransportMapFile = serde_json::from_reader(std::io::BufReader::new(file))?;
    if parsed.schema_version != SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "transport map schema version {} (expected {})",
            parsed.schema_version, SCHEMA_VERSION
        )));
    }
    Ok(parsed.map)
}

// ---------------------------------------------------------------------------
// Decorrelation metrics
// ---------------------------------------------------------------------------

/// Separation/decorrelation summary at one operating point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecorrelationMetrics {
    /// Reciprocal Jensen-Shannon divergence (infinite when the above/below
    /// histograms coincide; JSON renders that as null).
    pub one_over_jsd: f64,
    /// Inverse background false-positive rate at 50% signal efficiency.
    pub r50: f64,
    /// The cut used by both metrics: the signal-score median.
    pub cut: f64,
    /// Mass-histogram bin edges used for the JSD.
    pub mass_bins: Vec<f64>,
}

/// Max-over-slices Kolmogorov-Smirnov distance between per-slice score
/// distributions and the pooled one; slices are equal-count in mass order.
pub fn independence_diagnostic(scores: &[f64], masses: &[f64], n_slices: usize) -> Result<f64> {
    if n_slices < 2 {
        return Err(Error::InvalidConfiguration(
            "independence diagnostic needs at least 2 mass slices".into(),
        ));
    }
    if scores.len() != masses.len() {
        return Err(Error::InvalidArgument("independence diagnostic: mismatched lengths".into()));
    }
    let n = scores.len();
    if n / n_slices < 20 {
        return Err(Error::InvalidConfiguration(format!(
            "independence diagnostic: {n} events over {n_slices} slices leaves fewer than 20 per slice"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| masses[a].total_cmp(&masses[b]));
    let mut max_ks: f64 = 0.0;
    let base = n / n_slices;
    let rem = n % n_slices;
    let mut start = 0;
    for s in 0..n_slices {
        let len = base + usize::from(s < rem);
        let slice: Vec<f64> = order[start..start + len].iter().map(|&i| scores[i]).collect();
        max_ks = max_ks.max(ks_two_sample(&slice, scores));
        start += len;
    }
    Ok(max_ks)
}

/// Background rejection at 50% signal efficiency: the reciprocal of the
/// background fraction above the signal-score median (infinite when no
/// background passes).
pub fn r50(signal_scores: &[f64], background_scores: &[f64]) -> Result<f64> {
    if signal_scores.is_empty() || background_scores.is_empty() {
        return Err(Error::InvalidArgument("r50: empty score list".into()));
    }
    let cut = empirical_quantile(signal_scores, 0.5);
    let above = background_scores.iter().filter(|&&s| s > cut).count();
    if above == 0 {
        return Ok(f64::INFINITY);
    }
    Ok(background_scores.len() as f64 / above as f64)
}

fn histogram(values: &[f64], edges: &[f64]) -> Vec<f64> {
    let mut hist = vec![0.0; edges.len() - 1];
    for &v in values {
        if v < edges[0] || v > *edges.last().unwrap() {
            continue;
        }
        let idx = edges[1..edges.len() - 1].partition_point(|&e| e <= v);
        hist[idx] += 1.0;
    }
    hist
}

/// Reciprocal base-2 Jensen-Shannon divergence between the background mass
/// histograms above and below the 50%-signal-efficiency cut. The binning is
/// an explicit input because the metric is sensitive to it.
pub fn one_over_jsd(
    background_scores: &[f64],
    background_masses: &[f64],
    signal_scores: &[f64],
    mass_bins: &[f64],
) -> Result<f64> {
    if signal_scores.is_empty() {
        return Err(Error::InvalidArgument("one_over_jsd: empty signal score list".into()));
    }
    let cut = empirical_quantile(signal_scores, 0.5);
    one_over_jsd_at_cut(background_scores, background_masses, cut, mass_bins)
}

/// As [`one_over_jsd`] but with an explicit cut value instead of the
/// signal-median convention.
pub fn one_over_jsd_at_cut(
    background_scores: &[f64],
    background_masses: &[f64],
    cut: f64,
    mass_bins: &[f64],
) -> Result<f64> {
    if background_scores.len() != background_masses.len() {
        return Err(Error::InvalidArgument("one_over_jsd: mismatched lengths".into()));
    }
    if background_scores.is_empty() {
        return Err(Error::InvalidArgument("one_over_jsd: empty score list".into()));
    }
    if mass_bins.len() < 2 || mass_bins.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "one_over_jsd: mass_bins must be a strictly increasing edge list".into(),
        ));
    }
    let mut above = Vec::new();
    let mut below = Vec::new();
    for (&s, &m) in background_scores.iter().zip(background_masses) {
        if s >= cut {
            above.push(m);
        } else {
            below.push(m);
        }
    }
    if above.is_empty() || below.is_empty() {
        return Err(Error::UndefinedMetric(
            "one_over_jsd: no background events on one side of the cut".into(),
        ));
    }
    let mut p = histogram(&above, mass_bins);
    let mut q = histogram(&below, mass_bins);
    let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    if sp == 0.0 || sq == 0.0 {
        return Err(Error::UndefinedMetric(
            "one_over_jsd: a histogram side is empty within the binning".into(),
        ));
    }
    p.iter_mut().for_each(|v| *v /= sp);
    q.iter_mut().for_each(|v| *v /= sq);
    let mut jsd = 0.0;
    for (a, b) in p.iter().zip(&q) {
        let m = 0.5 * (a + b);
        if *a > 0.0 {
            jsd += 0.5 * a * (a / m).log2();
        }
        if *b > 0.0 {
            jsd += 0.5 * b * (b / m).log2();
        }
    }
    if jsd <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(1.0 / jsd)
}

/// Both metrics at the common 50%-signal-efficiency operating point.
pub fn compute_metrics(
    background_scores: &[f64],
    background_masses: &[f64],
    signal_scores: &[f64],
    mass_bins: &[f64],
) -> Result<DecorrelationMetrics> {
    Ok(DecorrelationMetrics {
        one_over_jsd: one_over_jsd(background_scores, background_masses, signal_scores, mass_bins)?,
        r50: r50(signal_scores, background_scores)?,
        cut: empirical_quantile(signal_scores, 0.5),
        mass_bins: mass_bins.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{ks_distance, normal_quantile};
    use crate::rng::{open_unit, stream_rng};
    use approx::assert_abs_diff_eq;

    fn small_grids() -> BandwidthGrids {
        BandwidthGrids {
            h_z: vec![0.5, 1.0, 2.0],
            h_m: vec![0.5, 1.0, 2.0],
            relative: true,
            lscv_subsample: Some(1000),
        }
    }

    fn independent_events(n: usize, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = stream_rng(seed, 0);
        (0..n).map(|_| (open_unit(&mut rng), open_unit(&mut rng))).collect()
    }

    #[test]
    fn split_fit_structure_and_errors() {
        let events = independent_events(2000, 100);
        let map = fit_split(&events, &[0.2, 0.4, 0.6], &small_grids()).unwrap();
        match map.conditional() {
            ConditionalModel::Split { splits, cells } => {
                assert_eq!(splits, &[0.2, 0.4, 0.6]);
                assert_eq!(cells.len(), 4);
            }
            _ => panic!("expected split model"),
        }
        // a split outside the data range is rejected
        assert!(fit_split(&events, &[1.5], &small_grids()).is_err());
        // decreasing splits are rejected
        assert!(fit_split(&events, &[0.4, 0.2], &small_grids()).is_err());
        // starving a cell is rejected with the cell named
        let err = fit_split(&events[..120], &[0.01], &small_grids()).unwrap_err();
        assert!(matches!(err, Error::InvalidConfiguration(_)), "{err}");
        assert!(err.to_string().contains("cell 0"), "{err}");
    }

    #[test]
    fn independence_gives_identity_map() {
        let events = independent_events(20_000, 101);
        let map = fit_split(&events, &[], &small_grids()).unwrap();
        for i in 0..15 {
            for j in 0..5 {
                let z = 0.1 + 0.8 * i as f64 / 14.0;
                let m = 0.1 + 0.8 * j as f64 / 4.0;
                let t = map.transport(z, m);
                assert!((t - z).abs() <= 0.03, "T({z}|{m}) = {t}");
            }
        }
    }

    #[test]
    fn split_matches_sorting_oracle_on_shifted_cells() {
        // two mass cells whose scores differ by a constant shift
        let mut rng = stream_rng(102, 0);
        let n = 4000;
        let mut events = Vec::with_capacity(n);
        for i in 0..n {
            let low_cell = i % 2 == 0;
            let z = 0.3 + 0.2 * open_unit(&mut rng) + if low_cell { 0.0 } else { 0.2 };
            let m = if low_cell { 0.25 } else { 0.75 };
            events.push((z, m));
        }
        let grids = BandwidthGrids {
            h_z: vec![0.02],
            h_m: vec![0.05],
            relative: false,
            lscv_subsample: None,
        };
        let map = fit_split(&events, &[0.5], &grids).unwrap();

        // oracle: within a cell, empirical OT aligns cell quantiles with
        // pooled quantiles through plain sorting
        let pooled_cdf = StepCdf::fit(&events.iter().map(|e| e.0).collect::<Vec<_>>()).unwrap();
        for cell in [0usize, 1] {
            let mut zs: Vec<f64> =
                events.iter().filter(|e| (e.1 < 0.5) == (cell == 0)).map(|e| e.0).collect();
            zs.sort_unstable_by(f64::total_cmp);
            let nc = zs.len();
            let mass = if cell == 0 { 0.25 } else { 0.75 };
            for idx in (nc / 10..nc * 9 / 10).step_by(nc / 20) {
                let z = zs[idx];
                let oracle = pooled_cdf.quantile((idx as f64 + 0.5) / nc as f64);
                let fitted = map.transport(z, mass);
                assert!(
                    (fitted - oracle).abs() <= 0.02,
                    "cell {cell} z={z}: fitted {fitted} vs oracle {oracle}"
                );
            }
        }
    }

    /// logit z = a + b log m + sd * eps with eps ~ N(0,1) independent of m.
    fn locscale_events(n: usize, a: f64, b: f64, sd: f64, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = stream_rng(seed, 0);
        (0..n)
            .map(|_| {
                let m = 0.5 + open_unit(&mut rng) * 1.5; // mass in [0.5, 2]
                let y = a + b * m.ln() + sd * normal_quantile(open_unit(&mut rng));
                let z = 1.0 / (1.0 + (-y).exp());
                (z, m)
            })
            .collect()
    }

    #[test]
    fn locscale_recovers_linear_location() {
        let (a, b) = (-0.4, 0.8);
        let events = locscale_events(50_000, a, b, 1.0, 103);
        let map = fit_locscale(&events, &small_grids(), None).unwrap();
        let ConditionalModel::LocScale { mu, .. } = map.conditional() else {
            panic!("expected locscale model");
        };
        for m in [0.7f64, 1.0, 1.4, 1.8] {
            let truth = a + b * m.ln();
            let est = mu.eval(m.ln());
            assert!((est - truth).abs() <= 0.05, "mu({m}): {est} vs {truth}");
        }
    }

    #[test]
    fn locscale_identity_when_independent() {
        let events = locscale_events(20_000, 0.2, 0.0, 1.0, 104);
        let map = fit_locscale(&events, &small_grids(), None).unwrap();
        for i in 0..10 {
            let z = 0.15 + 0.7 * i as f64 / 9.0;
            for m in [0.7, 1.2, 1.8] {
                let t = map.transport(z, m);
                assert!((t - z).abs() <= 0.03, "T({z}|{m}) = {t}");
            }
        }
    }

    #[test]
    fn locscale_recovers_heteroscedastic_scale() {
        // sigma(m) = 1 + log m over masses in [1, e]
        let mut rng = stream_rng(105, 0);
        let events: Vec<(f64, f64)> = (0..50_000)
            .map(|_| {
                let m = (open_unit(&mut rng)).exp(); // [1, e]
                let sd = 1.0 + m.ln();
                let y = sd * normal_quantile(open_unit(&mut rng));
                (1.0 / (1.0 + (-y).exp()), m)
            })
            .collect();
        let map = fit_locscale(&events, &small_grids(), None).unwrap();
        let ConditionalModel::LocScale { sigma2, .. } = map.conditional() else {
            panic!("expected locscale model");
        };
        for lm in [0.2, 0.4, 0.6, 0.8] {
            let truth = (1.0 + lm) * (1.0 + lm);
            let est = sigma2.eval(lm);
            assert!((est - truth).abs() / truth <= 0.10, "sigma2({lm}): {est} vs {truth}");
        }
    }

    #[test]
    fn locscale_rejects_bad_inputs() {
        let events = vec![(0.0, 1.0), (0.5, 1.2)];
        assert!(fit_locscale(&events, &small_grids(), None).is_err());
        let events = vec![(0.4, -1.0), (0.5, 1.2)];
        assert!(fit_locscale(&events, &small_grids(), None).is_err());
        let mut scores = [0.0, 0.5, 1.0];
        assert_eq!(clamp_unit_scores(&mut scores), 2);
        assert_eq!(scores, [SCORE_CLAMP, 0.5, 1.0 - SCORE_CLAMP]);
    }

    #[test]
    fn transport_is_monotone_in_score() {
        let events = locscale_events(5000, 0.1, 0.5, 0.8, 106);
        let map = fit_locscale(&events, &small_grids(), None).unwrap();
        let mut rng = stream_rng(107, 0);
        for _ in 0..1000 {
            let m = 0.5 + 1.5 * open_unit(&mut rng);
            let (z1, z2) = (open_unit(&mut rng), open_unit(&mut rng));
            let (lo, hi) = if z1 <= z2 { (z1, z2) } else { (z2, z1) };
            assert!(map.transport(lo, m) <= map.transport(hi, m) + 1e-12);
        }
    }

    #[test]
    fn morph_endpoints_are_exact() {
        let events = independent_events(1000, 108);
        let map = fit_split(&events, &[], &small_grids()).unwrap();
        let (z, m) = (0.37, 0.62);
        assert_eq!(map.morph(z, m, 1.0).unwrap().to_bits(), z.to_bits());
        assert_eq!(map.morph(z, m, 0.0).unwrap().to_bits(), map.transport(z, m).to_bits());
        let mid = map.morph(z, m, 0.5).unwrap();
        assert_abs_diff_eq!(mid, 0.5 * z + 0.5 * map.transport(z, m), epsilon = 1e-15);
        assert!(map.morph(z, m, 1.5).is_err());
        assert!(map.morph(z, m, -0.1).is_err());
    }

    #[test]
    fn out_of_range_mass_flags_fallback() {
        let grids = BandwidthGrids {
            h_z: vec![0.05],
            h_m: vec![0.02],
            relative: false,
            lscv_subsample: None,
        };
        let events = independent_events(500, 109);
        let map = fit_split(&events, &[], &grids).unwrap();
        let (_, fallback) = map.transport_checked(0.5, 25.0);
        assert!(fallback);
        let (_, fallback) = map.transport_checked(0.5, 0.5);
        assert!(!fallback);
    }

    #[test]
    fn marginal_preserved_on_held_out_sample() {
        let train = locscale_events(20_000, 0.0, 0.7, 1.0, 110);
        let held_out = locscale_events(20_000, 0.0, 0.7, 1.0, 111);
        let map = fit_locscale(&train, &small_grids(), None).unwrap();
        let (transported, _) = map.transport_batch(&held_out);
        let ks = ks_distance(&transported, |x| map.marginal().eval(x));
        assert!(ks <= 0.02, "marginal KS = {ks}");
    }

    #[test]
    fn independence_diagnostic_behaviour() {
        let mut rng = stream_rng(112, 0);
        let n = 20_000;
        let scores: Vec<f64> = (0..n).map(|_| open_unit(&mut rng)).collect();
        let masses: Vec<f64> = (0..n).map(|_| open_unit(&mut rng)).collect();
        let stat = independence_diagnostic(&scores, &masses, 10).unwrap();
        assert!(stat <= 0.03, "independent data diagnostic = {stat}");

        // perfect dependence: scores equal masses
        let stat = independence_diagnostic(&masses, &masses, 10).unwrap();
        assert!(stat > 0.5, "dependent diagnostic = {stat}");

        assert!(independence_diagnostic(&scores, &masses, 1).is_err());
        assert!(independence_diagnostic(&scores[..30], &masses[..30], 2).is_err());
    }

    #[test]
    fn r50_examples() {
        let mut rng = stream_rng(113, 0);
        let n = 200_000;
        let signal: Vec<f64> = (0..n).map(|_| 0.5 + 0.5 * open_unit(&mut rng)).collect();
        let background: Vec<f64> = (0..n).map(|_| open_unit(&mut rng)).collect();
        let v = r50(&signal, &background).unwrap();
        assert!((v - 4.0).abs() <= 0.2, "uniform overlap r50 = {v}");

        let same: Vec<f64> = (0..n).map(|_| open_unit(&mut rng)).collect();
        let v = r50(&same, &same).unwrap();
        assert!((v - 2.0).abs() <= 0.1, "identical r50 = {v}");

        let v = r50(&[0.8, 0.9], &[0.1, 0.2]).unwrap();
        assert!(v.is_infinite());
    }

    #[test]
    fn jsd_sentinels() {
        // identical above/below mass histograms -> JSD 0 -> infinity
        let bg_scores = [0.9, 0.9, 0.1, 0.1];
        let bg_masses = [0.1, 0.3, 0.1, 0.3];
        let sig = [0.5, 0.5];
        let bins = [0.0, 0.2, 0.4];
        let v = one_over_jsd(&bg_scores, &bg_masses, &sig, &bins).unwrap();
        assert!(v.is_infinite());

        // disjoint histograms -> JSD 1 -> metric 1
        let bg_masses = [0.1, 0.1, 0.3, 0.3];
        let v = one_over_jsd(&bg_scores, &bg_masses, &sig, &bins).unwrap();
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);

        // everything above the cut -> undefined
        let err = one_over_jsd(&[0.9, 0.9], &[0.1, 0.2], &sig, &bins).unwrap_err();
        assert!(matches!(err, Error::UndefinedMetric(_)));
    }

    #[test]
    fn serialization_round_trip_is_bitwise() {
        let events = locscale_events(2000, 0.1, 0.5, 0.9, 114);
        let map = fit_locscale(&events, &small_grids(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.json");
        save_transport_map(&map, &path).unwrap();
        let loaded = load_transport_map(&path).unwrap();
        let mut rng = stream_rng(115, 0);
        for _ in 0..500 {
            let z = open_unit(&mut rng);
            let m = 0.5 + 1.5 * open_unit(&mut rng);
            assert_eq!(map.transport(z, m).to_bits(), loaded.transport(z, m).to_bits());
        }
    }

    #[test]
    fn approaches_agree_under_location_scale_model() {
        let events = locscale_events(30_000, -0.2, 0.9, 0.8, 116);
        let loc = fit_locscale(&events, &small_grids(), None).unwrap();
        // fine split partition of the mass range [0.5, 2]
        let splits: Vec<f64> = (1..8).map(|i| 0.5 + 1.5 * i as f64 / 8.0).collect();
        let split = fit_split(&events, &splits, &small_grids()).unwrap();
        for i in 0..8 {
            let z = 0.2 + 0.6 * i as f64 / 7.0;
            for j in 0..5 {
                let m = 0.75 + 1.0 * j as f64 / 4.0;
                let a = loc.transport(z, m);
                let b = split.transport(z, m);
                assert!((a - b).abs() <= 0.05, "T({z}|{m}): locscale {a} vs split {b}");
            }
        }
    }
}
