//! Semi-parametric signal detection on the protected variable: a
//! Bernstein-basis parametric background, a known-background counting test,
//! the censored maximum-likelihood estimator fitted by a normalized
//! multiplicative (D'Agostini-style) EM iteration, and delta-method
//! inference for the signal strength.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::estimators::normal_cdf;

// ---------------------------------------------------------------------------
// Signal region
// ---------------------------------------------------------------------------

/// Signal window `[lower, upper)` inside the unit interval; the control
/// region is its complement `[0, lower) ∪ [upper, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalRegion {
    lower: f64,
    upper: f64,
}

impl SignalRegion {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(0.0 < lower && lower < upper && upper < 1.0) {
            return Err(Error::InvalidConfiguration(format!(
                "signal region must satisfy 0 < lower < upper < 1, got [{lower}, {upper}]"
            )));
        }
        Ok(SignalRegion { lower, upper })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn contains(&self, m: f64) -> bool {
        m >= self.lower && m < self.upper
    }
}

// ---------------------------------------------------------------------------
// Bernstein densities
// ---------------------------------------------------------------------------

/// Mixture of Bernstein basis polynomials on `[0, 1]`.
///
/// `density(x) = sum_k gamma_k * C(K,k) x^k (1-x)^(K-k)` with `gamma_k >= 0`
/// and `sum_k gamma_k = K + 1`, which makes the mixture integrate to one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BernsteinDensity {
    order: usize,
    weights: Vec<f64>,
}

impl BernsteinDensity {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("bernstein: empty weight vector".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(
                "bernstein: weights must be finite and >= 0".into(),
            ));
        }
        let order = weights.len() - 1;
        let sum: f64 = weights.iter().sum();
        let target = (order + 1) as f64;
        if (sum - target).abs() > 1e-6 * target {
            return Err(Error::InvalidArgument(format!(
                "bernstein: weights sum to {sum}, expected {target}"
            )));
        }
        // absorb rounding drift so the density integrates to exactly one
        let weights = weights.iter().map(|w| w * target / sum).collect();
        Ok(BernsteinDensity { order, weights })
    }

    /// Uniform density: every basis weight equal to one.
    pub fn uniform(order: usize) -> Self {
        BernsteinDensity { order, weights: vec![1.0; order + 1] }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Evaluate the density at `x` in [0, 1]. Binomial coefficients go
    /// through log space so orders up to ~100 stay finite.
    pub fn eval(&self, x: f64) -> f64 {
        let basis = basis_values(self.order, x);
        self.weights.iter().zip(&basis).map(|(w, b)| w * b).sum()
    }

    /// Exact mass on `[a, b]` via the regularized incomplete beta function.
    pub fn interval_mass(&self, a: f64, b: f64) -> f64 {
        let k1 = (self.order + 1) as f64;
        self.weights
            .iter()
            .enumerate()
            .map(|(k, w)| {
                let (p, q) = ((k + 1) as f64, (self.order - k + 1) as f64);
                w * (reg_beta(p, q, b) - reg_beta(p, q, a)) / k1
            })
            .sum()
    }
}

fn reg_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        beta_reg(a, b, x)
    }
}

/// All `K+1` Bernstein basis polynomials at `x`.
pub(crate) fn basis_values(order: usize, x: f64) -> Vec<f64> {
    let k_f = order as f64;
    let mut out = vec![0.0; order + 1];
    if x <= 0.0 {
        out[0] = 1.0;
        return out;
    }
    if x >= 1.0 {
        out[order] = 1.0;
        return out;
    }
    let (lx, l1x) = (x.ln(), (-x).ln_1p());
    let lgk = ln_gamma(k_f + 1.0);
    for (k, slot) in out.iter_mut().enumerate() {
        let kf = k as f64;
        let ln_binom = lgk - ln_gamma(kf + 1.0) - ln_gamma(k_f - kf + 1.0);
        *slot = (ln_binom + kf * lx + (k_f - kf) * l1x).exp();
    }
    out
}

/// `Phi[k][j]` = mass of basis element `k` over the `j`-th interval.
pub(crate) fn basis_interval_masses(order: usize, intervals: &[(f64, f64)]) -> Vec<Vec<f64>> {
    let k1 = (order + 1) as f64;
    (0..=order)
        .map(|k| {
            let (p, q) = ((k + 1) as f64, (order - k + 1) as f64);
            intervals.iter().map(|&(a, b)| (reg_beta(p, q, b) - reg_beta(p, q, a)) / k1).collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Binned counts
// ---------------------------------------------------------------------------

/// Event counts discretized over the control region, with the whole signal
/// region kept as a single count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinnedCounts {
    /// Control bins as `(low, high)` intervals: `bins_per_side` equal-width
    /// bins on `[0, lower]` followed by `bins_per_side` on `[upper, 1]`.
    pub bins: Vec<(f64, f64)>,
    pub counts: Vec<u64>,
    pub n_signal: u64,
    pub n: u64,
    pub region: SignalRegion,
}

impl BinnedCounts {
    pub fn control_fractions(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64 / self.n as f64).collect()
    }
}

/// Discretize masses: equal-width bins on `[0, lower]` and `[upper, 1]`,
/// whole signal region as one count.
pub fn bin_data(
    masses: &[f64],
    region: &SignalRegion,
    bins_per_side: usize,
) -> Result<BinnedCounts> {
    if bins_per_side == 0 {
        return Err(Error::InvalidArgument("bin_data: bins_per_side must be >= 1".into()));
    }
    let offenders: Vec<f64> = masses
        .iter()
        .copied()
        .filter(|m| !m.is_finite() || !(0.0..=1.0).contains(m))
        .take(5)
        .collect();
    if !offenders.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "bin_data: masses outside [0,1]: {offenders:?}"
        )));
    }
    let b = bins_per_side;
    let left: Vec<f64> = (0..=b).map(|i| region.lower * i as f64 / b as f64).collect();
    let right: Vec<f64> =
        (0..=b).map(|i| region.upper + (1.0 - region.upper) * i as f64 / b as f64).collect();
    let mut bins = Vec::with_capacity(2 * b);
    for i in 0..b {
        bins.push((left[i], left[i + 1]));
    }
    for i in 0..b {
        bins.push((right[i], right[i + 1]));
    }
    let mut counts = vec![0u64; 2 * b];
    let mut n_signal = 0u64;
    for &m in masses {
        if region.contains(m) {
            n_signal += 1;
        } else if m < region.lower {
            let idx = left[1..b].partition_point(|&e| e <= m);
            counts[idx] += 1;
        } else {
            let idx = right[1..b].partition_point(|&e| e <= m);
            counts[b + idx] += 1;
        }
    }
    Ok(BinnedCounts { bins, counts, n_signal, n: masses.len() as u64, region: *region })
}

// ---------------------------------------------------------------------------
// Known-background counting test
// ---------------------------------------------------------------------------

/// Output of the known-background counting experiment.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CountingTest {
    pub lambda_hat: f64,
    pub statistic: f64,
    pub p_value: f64,
}

/// Plug-in signal-strength estimate and one-sided test with a known
/// background mass `B(S)` in the signal region:
/// `lambda_hat = 1 - F_n(C)/B(C)` and
/// `T = sqrt(n) (F_n(S) - B(S)) / sqrt(F_n(S)(1 - F_n(S)))`.
pub fn counting_test(
    n_signal_region: u64,
    n_total: u64,
    background_signal_mass: f64,
) -> Result<CountingTest> {
    if !(background_signal_mass > 0.0 && background_signal_mass < 1.0) {
        return Err(Error::InvalidArgument(
            "counting_test: background signal mass must be in (0,1)".into(),
        ));
    }
    if n_total == 0 || n_signal_region > n_total {
        return Err(Error::InvalidArgument("counting_test: bad counts".into()));
    }
    if n_signal_region == 0 || n_signal_region == n_total {
        return Err(Error::NumericFailure(format!(
            "counting_test: degenerate variance with {n_signal_region}/{n_total} events in the signal region"
        )));
    }
    let n = n_total as f64;
    let fn_s = n_signal_region as f64 / n;
    let lambda_hat = 1.0 - (1.0 - fn_s) / (1.0 - background_signal_mass);
    let statistic = n.sqrt() * (fn_s - background_signal_mass) / (fn_s * (1.0 - fn_s)).sqrt();
    Ok(CountingTest { lambda_hat, statistic, p_value: 1.0 - normal_cdf(statistic) })
}

// ---------------------------------------------------------------------------
// Censored MLE via normalized multiplicative EM
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions { max_iter: 100_000, tol: 1e-8 }
    }
}

/// Censored-MLE fit with convergence diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmFit {
    pub density: BernsteinDensity,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest per-weight change at the last iteration.
    pub max_step: f64,
    /// First-order-condition residual at the returned weights.
    pub foc_residual: f64,
    /// Censored log-likelihood (per observation) at the returned weights.
    pub log_likelihood: f64,
    /// Largest single-iteration decrease of the censored log-likelihood
    /// observed during the fit (zero when the trajectory is monotone).
    pub ll_max_decrease: f64,
    /// Control cells with predicted mass below 1e-30 but nonzero weight.
    pub zero_mass_cells_with_weight: usize,
}

const ZERO_MASS: f64 = 1e-30;

/// Shared EM core over abstract control "cells": bins (cell weight = bin
/// fraction, basis value = interval mass) or single events (cell weight =
/// 1/n, basis value = basis polynomial at the event).
struct EmProblem<'a> {
    weights: &'a [f64],
    /// `phi[l][k]`: basis value of element `k` on cell `l`
    phi: &'a [Vec<f64>],
    /// basis mass over the whole control region
    phi_c: &'a [f64],
    fn_c: f64,
    fn_s: f64,
}

impl EmProblem<'_> {
    fn predicted(&self, gamma: &[f64], out: &mut [f64]) {
        for (l, row) in self.phi.iter().enumerate() {
            out[l] = gamma.iter().zip(row).map(|(g, p)| g * p).sum();
        }
    }

    fn control_mass(&self, gamma: &[f64]) -> f64 {
        gamma.iter().zip(self.phi_c).map(|(g, p)| g * p).sum()
    }

    /// Censored log-likelihood per observation with the signal strength
    /// profiled out: `F_n(S) ln F_n(S) + F_n(C) ln(F_n(C)/B(C)) +
    /// sum_l w_l ln b(cell_l)`.
    fn log_likelihood(&self, gamma: &[f64], predicted: &[f64]) -> f64 {
        let b_c = self.control_mass(gamma);
        let mut ll = if self.fn_s > 0.0 { self.fn_s * self.fn_s.ln() } else { 0.0 };
        ll += self.fn_c * (self.fn_c / b_c).ln();
        for (l, &w) in self.weights.iter().enumerate() {
            if w > 0.0 {
                ll += w * predicted[l].ln();
            }
        }
        ll
    }

    fn accumulate_a(&self, predicted: &[f64], a: &mut [f64]) -> usize {
        a.iter_mut().for_each(|v| *v = 0.0);
        let mut zero_mass = 0usize;
        for (l, row) in self.phi.iter().enumerate() {
            let w = self.weights[l];
            if w == 0.0 {
                continue;
            }
            if predicted[l] < ZERO_MASS {
                // limit convention: the cell contributes nothing
                zero_mass += 1;
                continue;
            }
            let coef = w / predicted[l];
            for (ak, p) in a.iter_mut().zip(row) {
                *ak += coef * p;
            }
        }
        zero_mass
    }

    /// Stationarity residual: every active weight must satisfy
    /// `a_k = W * phi_k(C) / B(C)` where `W` is the total cell weight;
    /// vanishing weights damp their own residual (complementary slackness).
    fn foc_residual(&self, gamma: &[f64], a: &[f64], total_weight: f64) -> f64 {
        let b_c = self.control_mass(gamma);
        let mut res: f64 = 0.0;
        for k in 0..gamma.len() {
            let target = total_weight * self.phi_c[k] / b_c;
            res = res.max((gamma[k] * (a[k] / target - 1.0)).abs());
        }
        res
    }

    fn run(&self, gamma0: &[f64], opts: &EmOptions) -> EmFit {
        let k1 = gamma0.len();
        let total_weight: f64 = self.weights.iter().sum();
        let mut gamma = gamma0.to_vec();
        let mut predicted = vec![0.0; self.weights.len()];
        let mut a = vec![0.0; k1];
        let mut tilde = vec![0.0; k1];
        let mut zero_mass = 0usize;
        let mut ll_max_decrease: f64 = 0.0;
        self.predicted(&gamma, &mut predicted);
        let mut ll_prev = self.log_likelihood(&gamma, &predicted);
        self.accumulate_a(&predicted, &mut a);
        let mut foc = self.foc_residual(&gamma, &a, total_weight);
        let mut max_step: f64 = 0.0;
        let mut iterations = 0;
        let mut converged = foc <= opts.tol;
        while !converged && iterations < opts.max_iter {
            iterations += 1;
            zero_mass = self.accumulate_a(&predicted, &mut a);
            let mut norm = 0.0;
            for k in 0..k1 {
                tilde[k] = gamma[k] * a[k] / self.phi_c[k];
                norm += tilde[k];
            }
            norm /= k1 as f64; // total mass of the unnormalized update
            max_step = 0.0;
            for k in 0..k1 {
                let next = tilde[k] / norm;
                max_step = max_step.max((next - gamma[k]).abs());
                gamma[k] = next;
            }
            self.predicted(&gamma, &mut predicted);
            let ll = self.log_likelihood(&gamma, &predicted);
            ll_max_decrease = ll_max_decrease.max(ll_prev - ll);
            ll_prev = ll;
            self.accumulate_a(&predicted, &mut a);
            foc = self.foc_residual(&gamma, &a, total_weight);
            if max_step <= opts.tol && foc <= opts.tol {
                converged = true;
            }
        }
        let lambda = 1.0 - self.fn_c / self.control_mass(&gamma);
        EmFit {
            density: BernsteinDensity { order: k1 - 1, weights: gamma },
            lambda,
            iterations,
            converged,
            max_step,
            foc_residual: foc,
            log_likelihood: ll_prev,
            ll_max_decrease,
            zero_mass_cells_with_weight: zero_mass,
        }
    }
}

fn validate_em_inputs(phi_c: &[f64], fn_c: f64) -> Result<()> {
    if let Some(k) = phi_c.iter().position(|&p| p < ZERO_MASS) {
        return Err(Error::InvalidConfiguration(format!(
            "basis element {k} has no mass on the control region"
        )));
    }
    if fn_c <= 0.0 {
        return Err(Error::InvalidConfiguration("no events in the control region".into()));
    }
    Ok(())
}

/// Censored MLE on binned counts via the normalized multiplicative iteration
/// `gamma_k <- gamma_k * a_k / phi_k(C)` (renormalized to unit total mass)
/// with `a_k = sum_l F_n(C_l) phi_k(C_l) / B(C_l)`, then
/// `lambda* = 1 - F_n(C)/B(C)`.
///
/// Starts from the uniform weight vector, the interior point of the scaled
/// simplex; the censored likelihood is concave in the weights, so the
/// iteration heads to the unique maximizer. Hitting `max_iter` yields
/// `converged = false` with the last iterate and residuals preserved.
pub fn censored_mle_em(counts: &BinnedCounts, order: usize, opts: &EmOptions) -> Result<EmFit> {
    censored_mle_em_from(counts, &BernsteinDensity::uniform(order), opts)
}

/// As [`censored_mle_em`] but warm-started from an existing density.
pub fn censored_mle_em_from(
    counts: &BinnedCounts,
    start: &BernsteinDensity,
    opts: &EmOptions,
) -> Result<EmFit> {
    let fractions = counts.control_fractions();
    em_on_fractions(&counts.bins, &fractions, start, opts)
}

/// Binned fit over raw control-bin fractions; the delta method perturbs the
/// fractions directly (the signal-region fraction implicitly absorbs the
/// complement).
pub(crate) fn em_on_fractions(
    bins: &[(f64, f64)],
    fractions: &[f64],
    start: &BernsteinDensity,
    opts: &EmOptions,
) -> Result<EmFit> {
    let phi_by_k = basis_interval_masses(start.order(), bins);
    let k1 = start.order() + 1;
    let mut phi = vec![vec![0.0; k1]; bins.len()];
    for (k, row) in phi_by_k.iter().enumerate() {
        for (l, &v) in row.iter().enumerate() {
            phi[l][k] = v;
        }
    }
    let phi_c: Vec<f64> = phi_by_k.iter().map(|row| row.iter().sum()).collect();
    let fn_c: f64 = fractions.iter().sum();
    validate_em_inputs(&phi_c, fn_c)?;
    let problem =
        EmProblem { weights: fractions, phi: &phi, phi_c: &phi_c, fn_c, fn_s: 1.0 - fn_c };
    Ok(problem.run(start.weights(), opts))
}

/// Censored MLE on raw masses: per-event sums
/// `a_k = sum_{i in C} phi_k(M_i) / b(M_i)` replace the binned sums.
///
/// Masses are sorted internally, so the result depends on the data only
/// through its order statistics (bitwise permutation invariance).
pub fn censored_mle_unbinned(
    masses: &[f64],
    order: usize,
    region: &SignalRegion,
    opts: &EmOptions,
) -> Result<EmFit> {
    if masses.is_empty() {
        return Err(Error::InvalidArgument("censored_mle_unbinned: empty sample".into()));
    }
    if let Some(bad) = masses.iter().find(|m| !(0.0..=1.0).contains(*m)) {
        return Err(Error::InvalidArgument(format!(
            "censored_mle_unbinned: mass {bad} outside [0,1]"
        )));
    }
    let mut control: Vec<f64> = masses.iter().copied().filter(|m| !region.contains(*m)).collect();
    control.sort_unstable_by(f64::total_cmp);
    let n = masses.len() as f64;
    let fn_c = control.len() as f64 / n;

    let phi: Vec<Vec<f64>> = control.iter().map(|&m| basis_values(order, m)).collect();
    let intervals = [(0.0, region.lower()), (region.upper(), 1.0)];
    let phi_masses = basis_interval_masses(order, &intervals);
    let phi_c: Vec<f64> = phi_masses.iter().map(|row| row.iter().sum()).collect();
    validate_em_inputs(&phi_c, fn_c)?;

    // weight 1/n per event keeps the log-likelihood on the same
    // per-observation scale as the binned variant
    let weights = vec![1.0 / n; control.len()];
    let problem =
        EmProblem { weights: &weights, phi: &phi, phi_c: &phi_c, fn_c, fn_s: 1.0 - fn_c };
    Ok(problem.run(BernsteinDensity::uniform(order).weights(), opts))
}

// ---------------------------------------------------------------------------
// Delta-method inference
// ---------------------------------------------------------------------------

/// Full censored-MLE test output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub order: usize,
    pub gamma: Vec<f64>,
    pub lambda: f64,
    /// Delta-method standard error of `lambda` (tau_hat / sqrt(n)).
    pub std_error: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub n: u64,
    pub n_signal_region: u64,
    pub region_lower: f64,
    pub region_upper: f64,
    pub bins_per_side: usize,
    pub fd_step: f64,
    pub em_iterations: usize,
    pub em_converged: bool,
    pub foc_residual: f64,
    /// Perturbed gradient refits that hit `max_iter` before `tol / 10`.
    pub gradient_nonconverged: usize,
}

/// Delta-method test: the gradient of `lambda*` with respect to each
/// control-bin probability is computed by central finite differences with a
/// relative step of `fd_step` per bin (re-running the EM warm-started from
/// the fitted weights at `tol / 10`; the signal-region probability absorbs
/// the perturbation so the full vector stays normalized), and the variance
/// is the multinomial quadratic form
/// `g' D g = sum_l g_l^2 p_l - (sum_l g_l p_l)^2`.
pub fn delta_method_test(
    counts: &BinnedCounts,
    fit: &EmFit,
    opts: &EmOptions,
    fd_step: f64,
) -> Result<FitResult> {
    if !fit.converged {
        return Err(Error::InvalidArgument(
            "delta_method_test: censored MLE did not converge".into(),
        ));
    }
    if !(fd_step > 0.0) {
        return Err(Error::InvalidArgument("delta_method_test: fd_step must be positive".into()));
    }
    let fractions = counts.control_fractions();
    let warm_opts = EmOptions { max_iter: opts.max_iter, tol: opts.tol / 10.0 };
    let mut gradient = vec![0.0; fractions.len()];
    let mut nonconverged = 0usize;
    for l in 0..fractions.len() {
        if fractions[l] == 0.0 {
            // empty bin: its row of the multinomial covariance vanishes, so
            // the gradient value is irrelevant
            continue;
        }
        let delta = fd_step * fractions[l];
        let mut up = fractions.clone();
        up[l] += delta;
        let mut down = fractions.clone();
        down[l] -= delta;
        let fit_up = em_on_fractions(&counts.bins, &up, &fit.density, &warm_opts)?;
        let fit_down = em_on_fractions(&counts.bins, &down, &fit.density, &warm_opts)?;
        nonconverged += usize::from(!fit_up.converged) + usize::from(!fit_down.converged);
        gradient[l] = (fit_up.lambda - fit_down.lambda) / (2.0 * delta);
    }
    let mean_sq: f64 = gradient.iter().zip(&fractions).map(|(g, p)| g * g * p).sum();
    let mean: f64 = gradient.iter().zip(&fractions).map(|(g, p)| g * p).sum();
    let variance = mean_sq - mean * mean;
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::NumericFailure(format!(
            "delta_method_test: nonpositive variance estimate {variance}"
        )));
    }
    let n = counts.n as f64;
    let std_error = (variance / n).sqrt();
    let statistic = fit.lambda / std_error;
    Ok(FitResult {
        order: fit.density.order(),
        gamma: fit.density.weights().to_vec(),
        lambda: fit.lambda,
        std_error,
        statistic,
        p_value: 1.0 - normal_cdf(statistic),
        n: counts.n,
        n_signal_region: counts.n_signal,
        region_lower: counts.region.lower(),
        region_upper: counts.region.upper(),
        bins_per_side: counts.bins.len() / 2,
        fd_step,
        em_iterations: fit.iterations,
        em_converged: fit.converged,
        foc_residual: fit.foc_residual,
        gradient_nonconverged: nonconverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{open_unit, stream_rng};
    use approx::assert_abs_diff_eq;
    use rand_distr::Distribution;

    fn trunc_exp(rng: &mut impl rand::RngCore, rate: f64) -> f64 {
        let u = open_unit(rng);
        -(-u * (1.0 - (-rate).exp())).ln_1p() / rate
    }

    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 0 { 2.0 } else { 4.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn bernstein_eval_basics() {
        let uniform = BernsteinDensity::new(vec![1.0]).unwrap();
        for x in [0.0, 0.3, 1.0] {
            assert_abs_diff_eq!(uniform.eval(x), 1.0, epsilon = 1e-12);
        }
        let spike = BernsteinDensity::new(vec![0.0, 3.0, 0.0]).unwrap();
        // 3 * C(2,1) * 0.5 * 0.5
        assert_abs_diff_eq!(spike.eval(0.5), 1.5, epsilon = 1e-12);
        assert!(BernsteinDensity::new(vec![1.0, -0.5, 2.5]).is_err());
        assert!(BernsteinDensity::new(vec![1.0, 1.0]).is_ok());
        assert!(BernsteinDensity::new(vec![2.0, 1.0]).is_err());
    }

    #[test]
    fn bernstein_integrates_to_one() {
        let mut rng = stream_rng(5, 0);
        for order in [1usize, 4, 9, 40, 100] {
            let mut w: Vec<f64> = (0..=order).map(|_| open_unit(&mut rng)).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v *= (order + 1) as f64 / s);
            let d = BernsteinDensity::new(w).unwrap();
            let integral = simpson(|x| d.eval(x), 0.0, 1.0, 2000);
            assert_abs_diff_eq!(integral, 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn interval_mass_matches_quadrature() {
        assert_abs_diff_eq!(BernsteinDensity::uniform(0).interval_mass(0.4, 0.6), 0.2, epsilon = 1e-12);
        let mut rng = stream_rng(6, 0);
        let mut w: Vec<f64> = (0..=5).map(|_| open_unit(&mut rng)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v *= 6.0 / s);
        let d = BernsteinDensity::new(w).unwrap();
        assert_abs_diff_eq!(d.interval_mass(0.0, 1.0), 1.0, epsilon = 1e-12);
        let quad = simpson(|x| d.eval(x), 0.3, 0.7, 20_000);
        assert_abs_diff_eq!(d.interval_mass(0.3, 0.7), quad, epsilon = 1e-9);
    }

    #[test]
    fn counting_test_closed_forms() {
        // F_n(C) = B(C): no signal
        let t = counting_test(2000, 10_000, 0.2).unwrap();
        assert_abs_diff_eq!(t.lambda_hat, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.statistic, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.p_value, 0.5, epsilon = 1e-12);
        let t = counting_test(2800, 10_000, 0.2).unwrap();
        assert_abs_diff_eq!(t.lambda_hat, 1.0 - 0.72 / 0.8, epsilon = 1e-12);
        assert!(counting_test(0, 100, 0.2).is_err());
        assert!(counting_test(100, 100, 0.2).is_err());
    }

    #[test]
    fn counting_test_null_moments() {
        let mut rng = stream_rng(9, 0);
        let (n, bs) = (5000u64, 0.2);
        let mut stats = Vec::new();
        for _ in 0..500 {
            let hits = (0..n).filter(|_| open_unit(&mut rng) < bs).count() as u64;
            stats.push(counting_test(hits, n, bs).unwrap().statistic);
        }
        let mean = stats.iter().sum::<f64>() / stats.len() as f64;
        let var = stats.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (stats.len() - 1) as f64;
        assert!(mean.abs() < 0.1, "mean {mean}");
        assert!((var - 1.0).abs() < 0.2, "variance {var}");
    }

    #[test]
    fn bin_data_conventions() {
        let region = SignalRegion::new(0.4, 0.6).unwrap();
        let binned = bin_data(&[0.1, 0.3, 0.5, 0.7, 0.9, 1.0], &region, 2).unwrap();
        assert_eq!(binned.bins, vec![(0.0, 0.2), (0.2, 0.4), (0.6, 0.8), (0.8, 1.0)]);
        assert_eq!(binned.counts, vec![1, 1, 1, 2]);
        assert_eq!(binned.n_signal, 1);
        assert_eq!(binned.n, 6);

        let all_signal = bin_data(&[0.45, 0.5, 0.55], &region, 2).unwrap();
        assert_eq!(all_signal.n_signal, 3);
        assert!(all_signal.counts.iter().all(|&c| c == 0));

        assert!(bin_data(&[0.5, 1.2], &region, 2).is_err());
        assert!(bin_data(&[0.5], &region, 0).is_err());
    }

    #[test]
    fn bin_data_multinomial_oracle() {
        let mut rng = stream_rng(10, 0);
        let n = 10_000;
        let masses: Vec<f64> = (0..n).map(|_| open_unit(&mut rng)).collect();
        let region = SignalRegion::new(0.4, 0.6).unwrap();
        let binned = bin_data(&masses, &region, 4).unwrap();
        for (bin, &count) in binned.bins.iter().zip(&binned.counts) {
            let expect = n as f64 * (bin.1 - bin.0);
            assert!(
                (count as f64 - expect).abs() <= 3.0 * expect.sqrt(),
                "bin {bin:?}: {count} vs {expect}"
            );
        }
    }

    #[test]
    fn em_order_zero_closed_form() {
        let region = SignalRegion::new(0.4, 0.6).unwrap();
        // uniform null: F_n(C)/B(C) = 1
        let masses: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        let counts = bin_data(&masses, &region, 5).unwrap();
        let fit = censored_mle_em(&counts, 0, &EmOptions::default()).unwrap();
        assert!(fit.converged);
        assert_abs_diff_eq!(fit.lambda, 0.0, epsilon = 1e-3);

        // 28% of the data in the signal region, uniform elsewhere
        let mut masses = Vec::new();
        for i in 0..720 {
            let u = (i as f64 + 0.5) / 720.0;
            masses.push(if u < 0.5 { u * 0.8 } else { 0.6 + (u - 0.5) * 0.8 });
        }
        masses.extend((0..280).map(|i| 0.4 + 0.2 * (i as f64 + 0.5) / 280.0));
        let counts = bin_data(&masses, &region, 5).unwrap();
        let fit = censored_mle_em(&counts, 0, &EmOptions::default()).unwrap();
        assert_abs_diff_eq!(fit.lambda, 0.1, epsilon = 1e-12);
        assert!(fit.foc_residual <= 1e-8);
    }

    /// Brute-force maximizer of the binned censored likelihood over the
    /// scaled simplex, step 0.01 per weight.
    fn grid_maximizer(counts: &BinnedCounts) -> (Vec<f64>, f64) {
        let fractions = counts.control_fractions();
        let fn_c: f64 = fractions.iter().sum();
        let phi = basis_interval_masses(2, &counts.bins);
        let phi_c: Vec<f64> = phi.iter().map(|row| row.iter().sum()).collect();
        let mut best = (f64::NEG_INFINITY, vec![1.0; 3]);
        let steps = 300usize;
        for i0 in 0..=steps {
            let g0 = 3.0 * i0 as f64 / steps as f64;
            for i1 in 0..=(steps - i0) {
                let g1 = 3.0 * i1 as f64 / steps as f64;
                let g2 = 3.0 - g0 - g1;
                let g = [g0, g1, g2];
                let b_c: f64 = (0..3).map(|k| g[k] * phi_c[k]).sum();
                let mut ll = fn_c * (fn_c / b_c).ln();
                let mut ok = true;
                for (l, &f) in fractions.iter().enumerate() {
                    if f == 0.0 {
                        continue;
                    }
                    let bl: f64 = (0..3).map(|k| g[k] * phi[k][l]).sum();
                    if bl <= 0.0 {
                        ok = false;
                        break;
                    }
                    ll += f * bl.ln();
                }
                if ok && ll > best.0 {
                    best = (ll, g.to_vec());
                }
            }
        }
        let g = &best.1;
        let b_c: f64 = (0..3).map(|k| g[k] * phi_c[k]).sum();
        (best.1.clone(), 1.0 - fn_c / b_c)
    }

    #[test]
    fn em_matches_brute_force_grid() {
        let mut rng = stream_rng(12, 0);
        let masses: Vec<f64> = (0..5000).map(|_| trunc_exp(&mut rng, 2.0)).collect();
        let region = SignalRegion::new(0.4, 0.6).unwrap();
        let counts = bin_data(&masses, &region, 10).unwrap();
        let fit = censored_mle_em(&counts, 2, &EmOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.foc_residual <= 1e-8);
        assert!(
            fit.ll_max_decrease <= 1e-10,
            "log-likelihood decreased: {}",
            fit.ll_max_decrease
        );
        let (gamma_grid, lambda_grid) = grid_maximizer(&counts);
        assert!((fit.lambda - lambda_grid).abs() <= 1e-3, "{} vs {lambda_grid}", fit.lambda);
        for k in 0..3 {
            assert!(
                (fit.density.weights()[k] - gamma_grid[k]).abs() <= 1e-2,
                "gamma_{k}: {} vs {}",
                fit.density.weights()[k],
                gamma_grid[k]
            );
        }
    }

    #[test]
    fn em_simplex_preserved_and_monotone() {
        let mut rng = stream_rng(13, 0);
        let masses: Vec<f64> = (0..8000).map(|_| trunc_exp(&mut rng, 1.5)).collect();
        let region = SignalRegion::new(0.45, 0.55).unwrap();
        let counts = bin_data(&masses, &region, 25).unwrap();
        for order in [1, 3, 5] {
            let fit = censored_mle_em(&counts, order, &EmOptions::default()).unwrap();
            let sum: f64 = fit.density.weights().iter().sum();
            assert_abs_diff_eq!(sum, (order + 1) as f64, epsilon = 1e-10);
            assert!(fit.density.weights().iter().all(|&w| w >= 0.0));
            assert!(fit.ll_max_decrease <= 1e-10);
            assert!(fit.converged, "order {order} not converged");
            assert!(fit.foc_residual <= 1e-8);
        }
    }

    #[test]
    fn em_permutation_invariance() {
        let mut rng = stream_rng(14, 0);
        let mut masses: Vec<f64> = (0..3000).map(|_| trunc_exp(&mut rng, 2.0)).collect();
        let region = SignalRegion::new(0.4, 0.6).unwrap();
        let opts = EmOptions { max_iter: 20_000, tol: 1e-7 };
        let a = censored_mle_unbinned(&masses, 3, &region, &opts).unwrap();
        masses.reverse();
        masses.rotate_left(777);
        let b = censored_mle_unbinned(&masses, 3, &region, &opts).unwrap();
        assert_eq!(a.lambda.to_bits(), b.lambda.to_bits());
        for (x, y) in a.density.weights().iter().zip(b.density.weights()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn unbinned_agrees_with_binned() {
        let mut rng = stream_rng(15, 0);
        let masses: Vec<f64> = (0..20_000).map(|_| trunc_exp(&mut rng, 2.0)).collect();
        let region = SignalRegion::new(0.4, 0.6).unwrap();
        let opts = EmOptions { max_iter: 100_000, tol: 1e-7 };
        let unbinned = censored_mle_unbinned(&masses, 10, &region, &opts).unwrap();
        let counts = bin_data(&masses, &region, 50).unwrap();
        let binned = censored_mle_em(&counts, 10, &opts).unwrap();
        assert!(
            (unbinned.lambda - binned.lambda).abs() <= 0.005,
            "unbinned {} vs binned {}",
            unbinned.lambda,
            binned.lambda
        );
    }

    /// Conditional-likelihood grid maximizer: control-region conditional
    /// density, extended to the full domain by the unit-mass constraint.
    fn conditional_grid_maximizer(masses: &[f64], region: &SignalRegion) -> Vec<f64> {
        let control: Vec<f64> = masses.iter().copied().filter(|m| !region.contains(*m)).collect();
        let intervals = [(0.0, region.lower()), (region.upper(), 1.0)];
        let phi_masses = basis_interval_masses(2, &intervals);
        let phi_c: Vec<f64> = phi_masses.iter().map(|r| r.iter().sum()).collect();
        let phi: Vec<Vec<f64>> = control.iter().map(|&m| basis_values(2, m)).collect();
        let steps = 300usize;
        let mut best = (f64::NEG_INFINITY, vec![1.0; 3]);
        for i0 in 0..=steps {
            let g0 = 3.0 * i0 as f64 / steps as f64;
            for i1 in 0..=(steps - i0) {
                let g1 = 3.0 * i1 as f64 / steps as f64;
                let g2 = 3.0 - g0 - g1;
                let g = [g0, g1, g2];
                let b_c: f64 = (0..3).map(|k| g[k] * phi_c[k]).sum();
                let mut ll = 0.0;
                let mut ok = true;
                for row in &phi {
                    let b: f64 = (0..3).map(|k| g[k] * row[k]).sum();
                    if b <= 0.0 {
                        ok = false;
                        break;
                    }
                    ll += (b / b_c).ln();
                }
                if ok && ll > best.0 {
                    best = (ll, g.to_vec());
                }
            }
        }
        best.1
    }

    #[test]
    fn censored_mle_equals_conditional_mle() {
        let mut rng = stream_rng(16, 0);
        let masses: Vec<f64> = (0..4000).map(|_| trunc_exp(&mut rng, 2.0)).collect();
        let region = SignalRegion::new(0.4, 0.6).unwrap();
        let fit = censored_mle_unbinned(&masses, 2, &region, &EmOptions::default()).unwrap();
        let grid = conditional_grid_maximizer(&masses, &region);
        for k in 0..3 {
            assert!(
                (fit.density.weights()[k] - grid[k]).abs() <= 1e-2,
                "gamma_{k}: {} vs {}",
                fit.density.weights()[k],
                grid[k]
            );
        }
    }

    #[test]
    fn delta_method_order_zero_matches_closed_form() {
        let mut rng = stream_rng(17, 0);
        let n = 20_000;
        let masses: Vec<f64> = (0..n).map(|_| open_unit(&mut rng)).collect();
        let region = SignalRegion::new(0.4, 0.6).unwrap();
        let counts = bin_data(&masses, &region, 50).unwrap();
        let fit = censored_mle_em(&counts, 0, &EmOptions::default()).unwrap();
        let result = delta_method_test(&counts, &fit, &EmOptions::default(), 1e-4).unwrap();
        // tau^2 = (1 - lambda) F(S) / B(C) with B(C) = 0.8
        let fn_s = counts.n_signal as f64 / n as f64;
        let tau2 = (1.0 - fit.lambda) * fn_s / 0.8;
        let se_closed = (tau2 / n as f64).sqrt();
        assert!(
            (result.std_error - se_closed).abs() / se_closed < 0.05,
            "delta {} vs closed form {se_closed}",
            result.std_error
        );
    }

    #[test]
    fn delta_method_scales_with_sqrt_n() {
        let mut rng = stream_rng(18, 0);
        let masses: Vec<f64> = (0..6000).map(|_| trunc_exp(&mut rng, 1.5)).collect();
        let region = SignalRegion::new(0.45, 0.55).unwrap();
        let counts = bin_data(&masses, &region, 20).unwrap();
        let opts = EmOptions::default();
        let fit = censored_mle_em(&counts, 2, &opts).unwrap();
        let base = delta_method_test(&counts, &fit, &opts, 1e-4).unwrap();

        let mut doubled = counts.clone();
        doubled.counts.iter_mut().for_each(|c| *c *= 2);
        doubled.n_signal *= 2;
        doubled.n *= 2;
        let fit2 = censored_mle_em(&doubled, 2, &opts).unwrap();
        let twice = delta_method_test(&doubled, &fit2, &opts, 1e-4).unwrap();
        assert_abs_diff_eq!(twice.lambda, base.lambda, epsilon = 1e-9);
        assert_abs_diff_eq!(twice.statistic, base.statistic * 2f64.sqrt(), epsilon = 1e-6);
    }

    fn sample_bernstein(rng: &mut rand_chacha::ChaCha8Rng, density: &BernsteinDensity) -> f64 {
        // mixture form: component k with probability gamma_k / (K+1), then
        // Beta(k+1, K-k+1)
        let k1 = density.weights().len();
        let mut u = open_unit(rng) * k1 as f64;
        let mut k = k1 - 1;
        for (i, &w) in density.weights().iter().enumerate() {
            if u < w {
                k = i;
                break;
            }
            u -= w;
        }
        let beta = rand_distr::Beta::new((k + 1) as f64, (density.order() - k + 1) as f64).unwrap();
        beta.sample(rng)
    }

    #[test]
    fn delta_method_null_calibration() {
        // well-specified Bernstein background, so T should be close to
        // standard normal: mean 0 +- 0.1, variance 1 +- 0.2 over 500 runs
        let truth = BernsteinDensity::new(vec![1.6, 1.2, 0.8, 0.4]).unwrap();
        let region = SignalRegion::new(0.45, 0.55).unwrap();
        let opts = EmOptions::default();
        let mut rng = stream_rng(19, 0);
        let mut stats = Vec::new();
        for _ in 0..500 {
            let masses: Vec<f64> = (0..4000).map(|_| sample_bernstein(&mut rng, &truth)).collect();
            let counts = bin_data(&masses, &region, 20).unwrap();
            let fit = censored_mle_em(&counts, 3, &opts).unwrap();
            let result = delta_method_test(&counts, &fit, &opts, 1e-4).unwrap();
            stats.push(result.statistic);
        }
        let mean = stats.iter().sum::<f64>() / stats.len() as f64;
        let var = stats.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (stats.len() - 1) as f64;
        assert!(mean.abs() <= 0.1, "mean {mean}");
        assert!((var - 1.0).abs() <= 0.2, "variance {var}");
    }

    #[test]
    fn contamination_bias_of_counting_test() {
        // signal leaking into the control region biases lambda_hat by
        // exactly (1 - eps / B(C))
        let mut rng = stream_rng(20, 0);
        let (b_s, eps, lambda) = (0.2, 0.2, 0.05);
        let region = SignalRegion::new(0.4, 0.6).unwrap();
        let n = 5000;
        let reps = 2000;
        let mut lambdas = Vec::with_capacity(reps);
        for _ in 0..reps {
            let mut n_s = 0u64;
            for _ in 0..n {
                let is_signal = open_unit(&mut rng) < lambda;
                let m = if is_signal {
                    if open_unit(&mut rng) < 1.0 - eps {
                        // inside the signal region
                        region.lower() + 0.2 * open_unit(&mut rng)
                    } else {
                        // leaked: uniform over the control region
                        let u = open_unit(&mut rng) * 0.8;
                        if u < 0.4 {
                            u
                        } else {
                            u + 0.2
                        }
                    }
                } else {
                    open_unit(&mut rng)
                };
                if region.contains(m) {
                    n_s += 1;
                }
            }
            lambdas.push(counting_test(n_s, n, b_s).unwrap().lambda_hat);
        }
        let mean = lambdas.iter().sum::<f64>() / reps as f64;
        let sd =
            (lambdas.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let mc_se = sd / (reps as f64).sqrt();
        let expected = lambda * (1.0 - eps / 0.8);
        assert!(
            (mean - expected).abs() <= 3.0 * mc_se,
            "mean {mean} vs {expected} (3 mc-se = {})",
            3.0 * mc_se
        );
    }
}
