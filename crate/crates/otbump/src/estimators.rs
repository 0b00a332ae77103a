//! Nonparametric building blocks: empirical CDFs and quantiles, kernel
//! conditional CDF estimation with least-squares cross-validated bandwidths,
//! Nadaraya-Watson regression, and exact binomial confidence intervals.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

/// Empirical quantile with linear interpolation between order statistics
/// (the common "type 7" convention). `q` is clamped to [0, 1].
pub fn empirical_quantile(xs: &[f64], q: f64) -> f64 {
    debug_assert!(!xs.is_empty());
    let mut s = xs.to_vec();
    s.sort_unstable_by(f64::total_cmp);
    sorted_quantile(&s, q)
}

/// As [`empirical_quantile`] but assumes `sorted` is ascending.
pub fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = (h.floor() as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// One-sample Kolmogorov-Smirnov distance between a sample and a reference
/// CDF evaluated through `cdf`.
pub fn ks_distance<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut s = samples.to_vec();
    s.sort_unstable_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max((f - (i as f64 + 1.0) / n).abs());
    }
    d
}

/// Two-sample Kolmogorov-Smirnov distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_unstable_by(f64::total_cmp);
    sb.sort_unstable_by(f64::total_cmp);
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < sa.len() && j < sb.len() {
        let x = sa[i].min(sb[j]);
        while i < sa.len() && sa[i] <= x {
            i += 1;
        }
        while j < sb.len() && sb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Rule-of-thumb Gaussian-kernel bandwidth `1.06 * sd * n^(-1/5)`.
pub fn silverman_bandwidth(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let sd = var.sqrt().max(1e-12);
    1.06 * sd * n.powf(-0.2)
}

fn check_finite(name: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(format!("{name} contains non-finite values")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Empirical CDF
// ---------------------------------------------------------------------------

/// Empirical CDF with jumps `1/n` at each sorted sample (ties accumulate) and
/// a piecewise-linear generalized inverse.
///
/// The inverse interpolates linearly between order statistics rather than
/// stepping, so composed transport maps stay strictly monotone and do not
/// introduce score ties.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepCdf {
    values: Vec<f64>,
    cum: Vec<f64>,
}

impl StepCdf {
    pub fn fit(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empirical_cdf: empty sample".into()));
        }
        check_finite("samples", samples)?;
        let mut s = samples.to_vec();
        s.sort_unstable_by(f64::total_cmp);
        let n = s.len() as f64;
        let mut values = Vec::new();
        let mut cum = Vec::new();
        let mut seen = 0usize;
        let mut i = 0usize;
        while i < s.len() {
            let v = s[i];
            while i < s.len() && s[i] == v {
                i += 1;
                seen += 1;
            }
            values.push(v);
            cum.push(seen as f64 / n);
        }
        *cum.last_mut().unwrap() = 1.0;
        Ok(StepCdf { values, cum })
    }

    /// Right-continuous evaluation: fraction of the sample `<= x`.
    pub fn eval(&self, x: f64) -> f64 {
        let idx = self.values.partition_point(|&v| v <= x);
        if idx == 0 {
            0.0
        } else {
            self.cum[idx - 1]
        }
    }

    /// Generalized inverse with linear interpolation between order
    /// statistics. `p <= 1/n` maps to the minimum sample, `p = 1` to the
    /// maximum.
    pub fn quantile(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0);
        let idx = self.cum.partition_point(|&c| c < p);
        if idx == 0 {
            return self.values[0];
        }
        if idx >= self.values.len() {
            return *self.values.last().unwrap();
        }
        let (c0, c1) = (self.cum[idx - 1], self.cum[idx]);
        let (v0, v1) = (self.values[idx - 1], self.values[idx]);
        v0 + (v1 - v0) * (p - c0) / (c1 - c0)
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// Largest gap between adjacent distinct sample values.
    pub fn max_gap(&self) -> f64 {
        self.values.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Kernel conditional CDF
// ---------------------------------------------------------------------------

/// Kernel conditional distribution estimator
/// `F(z|m) = sum_i K((m - m_i)/h_m) * G((z - z_i)/h_z) / sum_i K((m - m_i)/h_m)`
/// with a Gaussian kernel in `m` and the integrated Gaussian kernel (normal
/// CDF) in `z`.
///
/// Training pairs are stored verbatim (sorted by `m`), so a reloaded
/// estimator reproduces evaluations bit for bit. Kernel sums are truncated at
/// `8 h_m`, where the Gaussian weight is below 1.3e-14 relative; evaluation
/// points farther than that from every training `m` fall back to the nearest
/// training point and are flagged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionalCdf {
    m: Vec<f64>,
    z: Vec<f64>,
    h_z: f64,
    h_m: f64,
}

const KERNEL_REACH: f64 = 8.0;

impl ConditionalCdf {
    pub fn fit(z: &[f64], m: &[f64], h_z: f64, h_m: f64) -> Result<Self> {
        if z.len() != m.len() {
            return Err(Error::InvalidArgument(format!(
                "conditional cdf: {} scores vs {} masses",
                z.len(),
                m.len()
            )));
        }
        if z.len() < 2 {
            return Err(Error::InvalidArgument("conditional cdf: need at least 2 points".into()));
        }
        if !(h_z > 0.0) || !(h_m > 0.0) || !h_z.is_finite() || !h_m.is_finite() {
            return Err(Error::InvalidArgument("conditional cdf: bandwidths must be positive".into()));
        }
        check_finite("z", z)?;
        check_finite("m", m)?;
        let spread = m.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
            - m.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        if spread == 0.0 && h_m < 1e-12 {
            return Err(Error::DegenerateWeights(
                "all conditioning values identical and h_m is vanishingly small".into(),
            ));
        }
        let mut pairs: Vec<(f64, f64)> = m.iter().copied().zip(z.iter().copied()).collect();
        pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        Ok(ConditionalCdf {
            m: pairs.iter().map(|p| p.0).collect(),
            z: pairs.iter().map(|p| p.1).collect(),
            h_z,
            h_m,
        })
    }

    pub fn h_z(&self) -> f64 {
        self.h_z
    }

    pub fn h_m(&self) -> f64 {
        self.h_m
    }

    fn window(&self, m: f64) -> (usize, usize) {
        let lo = self.m.partition_point(|&v| v < m - KERNEL_REACH * self.h_m);
        let hi = self.m.partition_point(|&v| v <= m + KERNEL_REACH * self.h_m);
        (lo, hi)
    }

    fn nearest(&self, m: f64) -> f64 {
        let idx = self.m.partition_point(|&v| v < m);
        let lo = idx.saturating_sub(1);
        let hi = idx.min(self.m.len() - 1);
        if (m - self.m[lo]).abs() <= (m - self.m[hi]).abs() {
            self.m[lo]
        } else {
            self.m[hi]
        }
    }

    /// Evaluate `F(z|m)`; the flag is true when the nearest-neighbor fallback
    /// was used because `m` is farther than `8 h_m` from every training point.
    pub fn eval_checked(&self, z: f64, m: f64) -> (f64, bool) {
        let (lo, hi) = self.window(m);
        let (m_eff, fallback) = if lo == hi { (self.nearest(m), true) } else { (m, false) };
        let (lo, hi) = if fallback { self.window(m_eff) } else { (lo, hi) };
        let mut num = 0.0;
        let mut den = 0.0;
        for i in lo..hi {
            let u = (m_eff - self.m[i]) / self.h_m;
            let w = (-0.5 * u * u).exp();
            num += w * normal_cdf((z - self.z[i]) / self.h_z);
            den += w;
        }
        ((num / den).clamp(0.0, 1.0), fallback)
    }

    pub fn eval(&self, z: f64, m: f64) -> f64 {
        self.eval_checked(z, m).0
    }
}

// ---------------------------------------------------------------------------
// Nadaraya-Watson regression
// ---------------------------------------------------------------------------

/// Local-constant kernel regression with a Gaussian kernel.
///
/// Predictions are kernel-weighted means of the training responses, so they
/// always lie inside `[min y, max y]`. Points farther than `8 h` from every
/// training `x` use the nearest neighbor and are flagged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelRegression {
    x: Vec<f64>,
    y: Vec<f64>,
    bandwidth: f64,
}

impl KernelRegression {
    pub fn fit(x: &[f64], y: &[f64], bandwidth: f64) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::InvalidArgument(format!(
                "regression: {} x values vs {} y values",
                x.len(),
                y.len()
            )));
        }
        if x.len() < 2 {
            return Err(Error::InvalidArgument("regression: need at least 2 points".into()));
        }
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::InvalidArgument("regression: bandwidth must be positive".into()));
        }
        check_finite("x", x)?;
        check_finite("y", y)?;
        let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
        pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        Ok(KernelRegression {
            x: pairs.iter().map(|p| p.0).collect(),
            y: pairs.iter().map(|p| p.1).collect(),
            bandwidth,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn eval_checked(&self, x0: f64) -> (f64, bool) {
        let lo = self.x.partition_point(|&v| v < x0 - KERNEL_REACH * self.bandwidth);
        let hi = self.x.partition_point(|&v| v <= x0 + KERNEL_REACH * self.bandwidth);
        if lo == hi {
            let idx = self.x.partition_point(|&v| v < x0);
            let a = idx.saturating_sub(1);
            let b = idx.min(self.x.len() - 1);
            let nearest = if (x0 - self.x[a]).abs() <= (x0 - self.x[b]).abs() { a } else { b };
            return (self.y[nearest], true);
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for i in lo..hi {
            let u = (x0 - self.x[i]) / self.bandwidth;
            let w = (-0.5 * u * u).exp();
            num += w * self.y[i];
            den += w;
        }
        (num / den, false)
    }

    pub fn eval(&self, x0: f64) -> f64 {
        self.eval_checked(x0).0
    }
}

// ---------------------------------------------------------------------------
// Bandwidth selection
// ---------------------------------------------------------------------------

/// Result of the LSCV bandwidth grid search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LscvSelection {
    pub h_z: f64,
    pub h_m: f64,
    pub criterion: f64,
    /// True when both grids held a single candidate, so no search happened.
    pub single_candidate: bool,
}

const LSCV_GRID_POINTS: usize = 64;

/// Leave-one-out least-squares cross-validation for the conditional CDF
/// bandwidths.
///
/// For each candidate pair the criterion is
/// `sum_j integral (I(z_j <= z) - F_{-j}(z|m_j))^2 dz`, with the integral
/// approximated on a 64-point grid spanning the observed `z` range.
/// The full grid is searched exhaustively; exact ties resolve to the
/// candidate with the smaller bandwidths (ascending `(h_m, h_z)` scan).
pub fn lscv_bandwidths(
    z: &[f64],
    m: &[f64],
    h_z_grid: &[f64],
    h_m_grid: &[f64],
) -> Result<LscvSelection> {
    use rayon::prelude::*;

    if z.len() != m.len() {
        return Err(Error::InvalidArgument("lscv: mismatched input lengths".into()));
    }
    if z.len() < 2 {
        return Err(Error::InvalidArgument("lscv: need at least 2 points".into()));
    }
    if h_z_grid.is_empty() || h_m_grid.is_empty() {
        return Err(Error::InvalidArgument("lscv: empty bandwidth grid".into()));
    }
    for &h in h_z_grid.iter().chain(h_m_grid) {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::InvalidArgument("lscv: bandwidth grids must be positive".into()));
        }
    }
    check_finite("z", z)?;
    check_finite("m", m)?;

    let z_min = z.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let z_max = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if z_max == z_min {
        return Err(Error::InvalidArgument("lscv: all z values identical".into()));
    }
    let dz = (z_max - z_min) / (LSCV_GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..LSCV_GRID_POINTS).map(|g| z_min + g as f64 * dz).collect();

    let mut hz_sorted = h_z_grid.to_vec();
    hz_sorted.sort_unstable_by(f64::total_cmp);
    let mut hm_sorted = h_m_grid.to_vec();
    hm_sorted.sort_unstable_by(f64::total_cmp);

    let n = z.len();
    // G[hz][i * 64 + g] = normal_cdf((grid[g] - z[i]) / hz)
    let g_all: Vec<Vec<f64>> = hz_sorted
        .iter()
        .map(|&hz| {
            let mut g_mat = vec![0.0; n * LSCV_GRID_POINTS];
            for i in 0..n {
                for (g, &zg) in grid.iter().enumerate() {
                    g_mat[i * LSCV_GRID_POINTS + g] = normal_cdf((zg - z[i]) / hz);
                }
            }
            g_mat
        })
        .collect();

    let mut best: Option<(f64, f64, f64)> = None; // (criterion, h_m, h_z)
    for &hm in &hm_sorted {
        // One pass over j computes the criterion for every h_z at this h_m.
        let partials: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|j| {
                let mut w = vec![0.0; n];
                let mut den = 0.0;
                for i in 0..n {
                    let u = (m[j] - m[i]) / hm;
                    w[i] = if u.abs() <= KERNEL_REACH { (-0.5 * u * u).exp() } else { 0.0 };
                    den += w[i];
                }
                den -= w[j];
                let mut ise = vec![0.0; hz_sorted.len()];
                for (hz_idx, g_mat) in g_all.iter().enumerate() {
                    let mut num = [0.0; LSCV_GRID_POINTS];
                    for i in 0..n {
                        if w[i] == 0.0 || i == j {
                            continue;
                        }
                        let row = &g_mat[i * LSCV_GRID_POINTS..(i + 1) * LSCV_GRID_POINTS];
                        for g in 0..LSCV_GRID_POINTS {
                            num[g] += w[i] * row[g];
                        }
                    }
                    let mut acc = 0.0;
                    if den > 0.0 {
                        for g in 0..LSCV_GRID_POINTS {
                            let ind = if z[j] <= grid[g] { 1.0 } else { 0.0 };
                            let d = ind - num[g] / den;
                            acc += d * d;
                        }
                    } else {
                        // isolated point: leave-one-out neighborhood is empty,
                        // fall back to the nearest other training point
                        let mut nearest = usize::MAX;
                        let mut dist = f64::INFINITY;
                        for i in 0..n {
                            if i != j && (m[j] - m[i]).abs() < dist {
                                dist = (m[j] - m[i]).abs();
                                nearest = i;
                            }
                        }
                        let row = &g_mat
                            [nearest * LSCV_GRID_POINTS..(nearest + 1) * LSCV_GRID_POINTS];
                        for g in 0..LSCV_GRID_POINTS {
                            let ind = if z[j] <= grid[g] { 1.0 } else { 0.0 };
                            let d = ind - row[g];
                            acc += d * d;
                        }
                    }
                    ise[hz_idx] = acc * dz;
                }
                ise
            })
            .collect();
        for (hz_idx, &hz) in hz_sorted.iter().enumerate() {
            let crit: f64 = partials.iter().map(|p| p[hz_idx]).sum();
            if best.is_none() || crit < best.unwrap().0 {
                best = Some((crit, hm, hz));
            }
        }
    }
    let (criterion, h_m, h_z) = best.unwrap();
    Ok(LscvSelection {
        h_z,
        h_m,
        criterion,
        single_candidate: h_z_grid.len() == 1 && h_m_grid.len() == 1,
    })
}

// ---------------------------------------------------------------------------
// Clopper-Pearson
// ---------------------------------------------------------------------------

/// Exact binomial confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinomialInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

/// Clopper-Pearson interval via beta-distribution quantiles.
pub fn clopper_pearson(successes: u64, trials: u64, level: f64) -> Result<BinomialInterval> {
    if trials == 0 {
        return Err(Error::InvalidArgument("clopper_pearson: trials must be >= 1".into()));
    }
    if successes > trials {
        return Err(Error::InvalidArgument(format!(
            "clopper_pearson: {successes} successes out of {trials} trials"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument("clopper_pearson: level must be in (0,1)".into()));
    }
    let alpha = 1.0 - level;
    let (s, n) = (successes as f64, trials as f64);
    // Beta(1, n) and Beta(n, 1) quantiles have closed forms; using them keeps
    // the boundary intervals exact instead of inheriting the numeric
    // inversion error of the general quantile.
    let lower = if successes == 0 {
        0.0
    } else if successes == trials {
        (alpha / 2.0).powf(1.0 / n)
    } else {
        Beta::new(s, n - s + 1.0).unwrap().inverse_cdf(alpha / 2.0)
    };
    let upper = if successes == trials {
        1.0
    } else if successes == 0 {
        1.0 - (alpha / 2.0).powf(1.0 / n)
    } else {
        Beta::new(s + 1.0, n - s).unwrap().inverse_cdf(1.0 - alpha / 2.0)
    };
    Ok(BinomialInterval { lower, upper, level })
}
