//! Cavity-assisted single-shot spin readout.
//!
//! A bright spin transmits the probe at `rate_bright` detected counts
//! per ms until it flips (exponential lifetime set by the optical
//! cyclicity), after which only the `rate_dark` background remains. A
//! dark spin never couples to the probe inside the window, so its
//! lifetime is taken infinite. Photon counts are Poisson.
//!
//! Monte-Carlo histograms use one counter-derived RNG stream per trial,
//! so results are bit-identical for a fixed seed under any thread
//! count. A quadrature-based semi-analytic distribution serves as the
//! oracle for the Monte Carlo.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Error;
use crate::model::Spin;

/// Simpson panels for the flip-time marginalization; comfortably below
/// the 1e-6 quadrature error budget for physical parameters.
const SIMPSON_PANELS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutParams {
    /// Detected counts per ms while the spin transmits.
    pub rate_bright: f64,
    /// Background counts per ms.
    pub rate_dark: f64,
    /// Exponential lifetime of the bright state under probing, ms.
    /// May be infinite (perfectly cycling transition).
    pub flip_lifetime: f64,
    /// Readout window, ms.
    pub window: f64,
    pub trials: u64,
    pub seed: u64,
}

impl ReadoutParams {
    pub fn validate(&self) -> Result<(), Error> {
        let mut problems = Vec::new();
        if !(self.rate_bright >= 0.0) || !self.rate_bright.is_finite() {
            problems.push(format!(
                "rate_bright must be finite and >= 0 (got {})",
                self.rate_bright
            ));
        }
        if !(self.rate_dark >= 0.0) || !self.rate_dark.is_finite() {
            problems.push(format!(
                "rate_dark must be finite and >= 0 (got {})",
                self.rate_dark
            ));
        }
        if !(self.flip_lifetime > 0.0) {
            problems.push(format!(
                "flip_lifetime must be > 0 (got {})",
                self.flip_lifetime
            ));
        }
        if !(self.window > 0.0) || !self.window.is_finite() {
            problems.push(format!(
                "window must be finite and > 0 (got {})",
                self.window
            ));
        }
        if self.trials < 1 {
            problems.push("trials must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Readout(problems.join("; ")))
        }
    }
}

/// Histograms, threshold and fidelity from one simulated readout run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutResult {
    pub histogram_up: BTreeMap<u64, u64>,
    pub histogram_down: BTreeMap<u64, u64>,
    pub threshold: u64,
    pub fidelity: f64,
    pub mean_up: f64,
    pub mean_down: f64,
}

/// One RNG stream per (seed, spin, trial); trial i sees the same stream
/// no matter how the trial loop is scheduled.
fn trial_rng(seed: u64, spin: Spin, trial: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(
        &(match spin {
            Spin::Up => 1u64,
            Spin::Down => 2u64,
        })
        .to_le_bytes(),
    );
    key[16..24].copy_from_slice(&trial.to_le_bytes());
    key[24..32].copy_from_slice(&0x5245_4144_4f55_5431u64.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn sample_poisson(lambda: f64, rng: &mut impl Rng) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    let poisson = Poisson::new(lambda).expect("positive finite mean");
    poisson.sample(rng) as u64
}

/// One readout trial. A bright initialization draws the flip time from
/// the exponential lifetime and mixes the two rates across the window;
/// a dark initialization sees background only.
pub fn simulate_trial(params: &ReadoutParams, initial_spin: Spin, rng: &mut impl Rng) -> u64 {
    match initial_spin {
        Spin::Up => {
            let t_flip = if params.flip_lifetime.is_finite() {
                let u: f64 = rng.random();
                -params.flip_lifetime * (1.0 - u).ln()
            } else {
                f64::INFINITY
            };
            let bright_time = t_flip.min(params.window);
            let dark_time = (params.window - t_flip).max(0.0);
            sample_poisson(
                params.rate_bright * bright_time + params.rate_dark * dark_time,
                rng,
            )
        }
        Spin::Down => sample_poisson(params.rate_dark * params.window, rng),
    }
}

fn histogram_for(params: &ReadoutParams, spin: Spin) -> BTreeMap<u64, u64> {
    (0..params.trials)
        .into_par_iter()
        .fold(BTreeMap::new, |mut hist: BTreeMap<u64, u64>, trial| {
            let mut rng = trial_rng(params.seed, spin, trial);
            *hist
                .entry(simulate_trial(params, spin, &mut rng))
                .or_insert(0) += 1;
            hist
        })
        .reduce(BTreeMap::new, |mut a, b| {
            for (count, freq) in b {
                *a.entry(count).or_insert(0) += freq;
            }
            a
        })
}

fn histogram_mean(hist: &BTreeMap<u64, u64>) -> f64 {
    let total: u64 = hist.values().sum();
    hist.iter().map(|(&c, &f)| c as f64 * f as f64).sum::<f64>() / total as f64
}

/// `trials` independent trials per initialization; deterministic given
/// the seed regardless of parallelism.
pub fn count_histograms(params: &ReadoutParams) -> Result<ReadoutResult, Error> {
    params.validate()?;
    let histogram_up = histogram_for(params, Spin::Up);
    let histogram_down = histogram_for(params, Spin::Down);
    let (threshold, fidelity) = optimal_threshold(&histogram_up, &histogram_down);
    let mean_up = histogram_mean(&histogram_up);
    let mean_down = histogram_mean(&histogram_down);
    Ok(ReadoutResult {
        histogram_up,
        histogram_down,
        threshold,
        fidelity,
        mean_up,
        mean_down,
    })
}

/// Maximize F(θ) = 1 − ½[P(count < θ | up) + P(count ≥ θ | down)] over
/// integer thresholds, ties broken toward smaller θ. If the histograms
/// are reversed the opposite orientation is reported instead, so the
/// result is always ≥ 0.5.
pub fn optimal_threshold(
    histogram_up: &BTreeMap<u64, u64>,
    histogram_down: &BTreeMap<u64, u64>,
) -> (u64, f64) {
    let max_count = histogram_up
        .keys()
        .chain(histogram_down.keys())
        .max()
        .copied()
        .unwrap_or(0);
    let pmf = |hist: &BTreeMap<u64, u64>| -> Vec<f64> {
        let total: u64 = hist.values().sum();
        let mut out = vec![0.0; max_count as usize + 1];
        for (&c, &f) in hist {
            out[c as usize] = f as f64 / total as f64;
        }
        out
    };
    optimal_threshold_pmf(&pmf(histogram_up), &pmf(histogram_down))
}

/// Same threshold scan over normalized probability mass functions
/// (index = count).
pub fn optimal_threshold_pmf(pmf_up: &[f64], pmf_down: &[f64]) -> (u64, f64) {
    let len = pmf_up.len().max(pmf_down.len());
    let at = |pmf: &[f64], k: usize| pmf.get(k).copied().unwrap_or(0.0);

    let mut best = (0u64, f64::NEG_INFINITY);
    let mut cdf_up = 0.0_f64; // P(count < theta | up)
    let mut cdf_down = 0.0_f64;
    for theta in 0..=len as u64 {
        let tail_down = 1.0 - cdf_down; // P(count >= theta | down)
        let fidelity = 1.0 - 0.5 * (cdf_up + tail_down);
        // Reversed histograms flip the orientation; report whichever
        // side of 0.5 the data supports.
        let oriented = fidelity.max(1.0 - fidelity);
        if oriented > best.1 {
            best = (theta, oriented);
        }
        if (theta as usize) < len {
            cdf_up += at(pmf_up, theta as usize);
            cdf_down += at(pmf_down, theta as usize);
        }
    }
    best
}

/// Natural-log factorial table: lnfact[k] = ln(k!).
fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(0.0);
    for k in 1..=n {
        out.push(out[k - 1] + (k as f64).ln());
    }
    out
}

fn poisson_pmf_into(lambda: f64, lnfact: &[f64], out: &mut [f64]) {
    if lambda <= 0.0 {
        out.fill(0.0);
        out[0] = 1.0;
        return;
    }
    let ln_lambda = lambda.ln();
    for (k, slot) in out.iter_mut().enumerate() {
        *slot = (k as f64 * ln_lambda - lambda - lnfact[k]).exp();
    }
}

/// Poisson probability mass function over counts 0..=k_max.
pub fn poisson_pmf(lambda: f64, k_max: usize) -> Vec<f64> {
    let lnfact = ln_factorials(k_max);
    let mut out = vec![0.0; k_max + 1];
    poisson_pmf_into(lambda, &lnfact, &mut out);
    out
}

fn count_ceiling(params: &ReadoutParams) -> usize {
    let top = (params.rate_bright.max(params.rate_dark) * params.window).max(1.0);
    (top + 12.0 * top.sqrt() + 25.0).ceil() as usize
}

/// Exact count distributions implied by the trial model, with the flip
/// time marginalized by composite-Simpson quadrature over the
/// exponential density. Returns (pmf_up, pmf_down).
pub fn semi_analytic_distributions(params: &ReadoutParams) -> Result<(Vec<f64>, Vec<f64>), Error> {
    semi_analytic_distributions_with_panels(params, SIMPSON_PANELS)
}

fn semi_analytic_distributions_with_panels(
    params: &ReadoutParams,
    panels: usize,
) -> Result<(Vec<f64>, Vec<f64>), Error> {
    params.validate()?;
    let k_max = count_ceiling(params);
    let lnfact = ln_factorials(k_max);

    let mut pmf_down = vec![0.0; k_max + 1];
    poisson_pmf_into(params.rate_dark * params.window, &lnfact, &mut pmf_down);

    let tau = params.flip_lifetime;
    let window = params.window;
    let mut pmf_up = vec![0.0; k_max + 1];

    // Survival term: no flip inside the window.
    let survive = if tau.is_finite() {
        (-window / tau).exp()
    } else {
        1.0
    };
    let mut scratch = vec![0.0; k_max + 1];
    poisson_pmf_into(params.rate_bright * window, &lnfact, &mut scratch);
    for (acc, p) in pmf_up.iter_mut().zip(&scratch) {
        *acc += survive * p;
    }

    // Flip term: integrate the exponential flip density over the window.
    if tau.is_finite() {
        let n = panels; // even
        let h = window / n as f64;
        for node in 0..=n {
            let t = node as f64 * h;
            let weight = match node {
                0 => 1.0,
                _ if node == n => 1.0,
                _ if node % 2 == 1 => 4.0,
                _ => 2.0,
            } * h
                / 3.0;
            let density = (-t / tau).exp() / tau;
            let lambda = params.rate_bright * t + params.rate_dark * (window - t);
            poisson_pmf_into(lambda, &lnfact, &mut scratch);
            for (acc, p) in pmf_up.iter_mut().zip(&scratch) {
                *acc += weight * density * p;
            }
        }
    }

    Ok((pmf_up, pmf_down))
}

/// Deterministic readout fidelity from the semi-analytic distributions.
pub fn semi_analytic_fidelity(params: &ReadoutParams) -> Result<f64, Error> {
    let (pmf_up, pmf_down) = semi_analytic_distributions(params)?;
    Ok(optimal_threshold_pmf(&pmf_up, &pmf_down).1)
}

/// Exact fidelity of two flip-free Poisson distributions, by tail sums.
pub fn exact_two_poisson_fidelity(mean_up: f64, mean_down: f64) -> (u64, f64) {
    let top = mean_up.max(mean_down).max(1.0);
    let k_max = (top + 12.0 * top.sqrt() + 25.0).ceil() as usize;
    let pmf_up = poisson_pmf(mean_up, k_max);
    let pmf_down = poisson_pmf(mean_down, k_max);
    optimal_threshold_pmf(&pmf_up, &pmf_down)
}

/// Bright-state rate that yields `mean_up` expected counts in the
/// window, given the dark rate and the flip lifetime. Inverts
/// E[counts|up] = rate_dark·W + (rate_bright − rate_dark)·τ(1 − e^{−W/τ}).
pub fn calibrated_bright_rate(
    mean_up: f64,
    rate_dark: f64,
    window: f64,
    flip_lifetime: f64,
) -> f64 {
    let effective_bright_time = if flip_lifetime.is_finite() {
        flip_lifetime * (1.0 - (-window / flip_lifetime).exp())
    } else {
        window
    };
    rate_dark + (mean_up - rate_dark * window) / effective_bright_time
}

/// Shortest flip lifetime (ms) at which the semi-analytic fidelity
/// reaches `target`, with the bright rate re-calibrated at each
/// candidate so the mean counts stay fixed. Bisection to 1e-6 ms.
pub fn calibrate_flip_lifetime(
    mean_up: f64,
    mean_down: f64,
    window: f64,
    target: f64,
) -> Result<f64, Error> {
    let rate_dark = mean_down / window;
    let fidelity_at = |tau: f64| -> Result<f64, Error> {
        let params = ReadoutParams {
            rate_bright: calibrated_bright_rate(mean_up, rate_dark, window, tau),
            rate_dark,
            flip_lifetime: tau,
            window,
            trials: 1,
            seed: 0,
        };
        semi_analytic_fidelity(&params)
    };

    let (mut lo, mut hi) = (0.5_f64, 500.0_f64);
    if fidelity_at(lo)? >= target {
        return Ok(lo);
    }
    if fidelity_at(hi)? < target {
        return Err(Error::Readout(format!(
            "target fidelity {target} not reachable below a {hi} ms flip lifetime"
        )));
    }
    while hi - lo > 1e-6 {
        let mid = 0.5 * (lo + hi);
        if fidelity_at(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

#[derive(Serialize)]
struct ReadoutResultJson<'a> {
    params: &'a ReadoutParams,
    threshold: u64,
    fidelity: f64,
    mean_up: f64,
    mean_down: f64,
    fidelity_definition: &'static str,
}

/// JSON export: parameter echo plus threshold, fidelity and means. The
/// fidelity definition is spelled out in the metadata.
pub fn result_to_json(params: &ReadoutParams, result: &ReadoutResult) -> String {
    let doc = ReadoutResultJson {
        params,
        threshold: result.threshold,
        fidelity: result.fidelity,
        mean_up: result.mean_up,
        mean_down: result.mean_down,
        fidelity_definition: "1 - [P(count < threshold | up) + P(count >= threshold | down)] / 2, \
             maximized over integer thresholds",
    };
    let mut json = serde_json::to_string_pretty(&doc).expect("result serializes");
    json.push('\n');
    json
}

/// CSV export of both histograms: `count,freq_up,freq_down`.
pub fn histograms_to_csv(result: &ReadoutResult) -> String {
    let mut out = String::new();
    out.push_str("count,freq_up,freq_down\n");
    let counts: std::collections::BTreeSet<u64> = result
        .histogram_up
        .keys()
        .chain(result.histogram_down.keys())
        .copied()
        .collect();
    for count in counts {
        out.push_str(&format!(
            "{},{},{}\n",
            count,
            result.histogram_up.get(&count).copied().unwrap_or(0),
            result.histogram_down.get(&count).copied().unwrap_or(0),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params(rate_bright: f64, rate_dark: f64, flip_lifetime: f64) -> ReadoutParams {
        ReadoutParams {
            rate_bright,
            rate_dark,
            flip_lifetime,
            window: 7.0,
            trials: 20_000,
            seed: 11,
        }
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        assert!(params(10.0, 1.0, 12.0).validate().is_ok());
        assert!(params(10.0, 1.0, f64::INFINITY).validate().is_ok());
        assert!(params(-1.0, 1.0, 12.0).validate().is_err());
        assert!(params(10.0, 1.0, 0.0).validate().is_err());
        assert!(params(10.0, f64::NAN, 12.0).validate().is_err());
        let mut p = params(10.0, 1.0, 12.0);
        p.trials = 0;
        assert!(p.validate().is_err());
        p = params(10.0, 1.0, 12.0);
        p.window = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn equal_rates_make_the_flip_unobservable() {
        let p = params(5.0, 5.0, 2.0);
        let result = count_histograms(&p).unwrap();
        // Identical distributions: fidelity pinned at one half.
        assert!(result.fidelity < 0.52, "fidelity {}", result.fidelity);
        assert_relative_eq!(result.mean_up, result.mean_down, max_relative = 0.05);
    }

    #[test]
    fn infinite_lifetime_is_pure_poisson() {
        let p = ReadoutParams {
            trials: 200_000,
            ..params(96.0 / 7.0, 16.0 / 7.0, f64::INFINITY)
        };
        let result = count_histograms(&p).unwrap();
        assert_relative_eq!(result.mean_up, 96.0, max_relative = 0.01);
        assert_relative_eq!(result.mean_down, 16.0, max_relative = 0.01);
        // Variance equals the mean for a Poisson distribution.
        let var_up: f64 = result
            .histogram_up
            .iter()
            .map(|(&c, &f)| (c as f64 - result.mean_up).powi(2) * f as f64)
            .sum::<f64>()
            / p.trials as f64;
        assert_relative_eq!(var_up, 96.0, max_relative = 0.05);
    }

    #[test]
    fn histograms_sum_to_trials_and_are_deterministic() {
        let p = params(12.0, 2.0, 9.0);
        let a = count_histograms(&p).unwrap();
        let b = count_histograms(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.histogram_up.values().sum::<u64>(), p.trials);
        assert_eq!(a.histogram_down.values().sum::<u64>(), p.trials);

        let single = ReadoutParams { trials: 1, ..p };
        let r = count_histograms(&single).unwrap();
        assert_eq!(r.histogram_up.len(), 1);
        assert_eq!(r.histogram_down.len(), 1);
    }

    #[test]
    fn determinism_holds_across_thread_counts() {
        let p = params(14.0, 2.0, 10.0);
        let reference = count_histograms(&p).unwrap();
        for threads in [1usize, 4] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            let result = pool.install(|| count_histograms(&p).unwrap());
            assert_eq!(result, reference, "drift at {threads} threads");
        }
    }

    #[test]
    fn threshold_trivial_cases() {
        // Disjoint histograms separate perfectly.
        let up: BTreeMap<u64, u64> = [(50, 10), (52, 5)].into_iter().collect();
        let down: BTreeMap<u64, u64> = [(1, 9), (2, 6)].into_iter().collect();
        let (theta, fidelity) = optimal_threshold(&up, &down);
        assert_eq!(fidelity, 1.0);
        assert!(theta > 2 && theta <= 50);

        // Identical histograms are undecidable.
        let (_, fidelity) = optimal_threshold(&up, &up);
        assert_eq!(fidelity, 0.5);

        // Reversed histograms still report >= 0.5.
        let (_, fidelity) = optimal_threshold(&down, &up);
        assert_eq!(fidelity, 1.0);
    }

    #[test]
    fn threshold_ties_break_toward_smaller_theta() {
        let up: BTreeMap<u64, u64> = [(10, 1)].into_iter().collect();
        let down: BTreeMap<u64, u64> = [(0, 1)].into_iter().collect();
        // Any theta in 1..=10 gives fidelity 1; the scan must pick 1.
        let (theta, fidelity) = optimal_threshold(&up, &down);
        assert_eq!((theta, fidelity), (1, 1.0));
    }

    #[test]
    fn flip_free_poisson_96_16_identifies_spin() {
        let (theta, fidelity) = exact_two_poisson_fidelity(96.0, 16.0);
        assert!(fidelity > 0.999, "fidelity {fidelity}");
        assert!(theta > 16 && theta < 96);
    }

    #[test]
    fn quadrature_converges_to_infinite_lifetime_limit() {
        // tau -> infinity reduces to two flip-free Poissons.
        let p = params(96.0 / 7.0, 16.0 / 7.0, f64::INFINITY);
        let analytic = semi_analytic_fidelity(&p).unwrap();
        let (_, exact) = exact_two_poisson_fidelity(96.0, 16.0);
        assert_relative_eq!(analytic, exact, epsilon = 1e-12);

        // Large-but-finite lifetime approaches the same limit.
        let p = params(96.0 / 7.0, 16.0 / 7.0, 1e9);
        assert_relative_eq!(semi_analytic_fidelity(&p).unwrap(), exact, epsilon = 1e-6);
    }

    #[test]
    fn semi_analytic_distributions_are_normalized() {
        let p = params(17.0, 16.0 / 7.0, 14.0);
        let (pmf_up, pmf_down) = semi_analytic_distributions(&p).unwrap();
        assert_relative_eq!(pmf_up.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(pmf_down.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn quadrature_is_converged_well_below_the_error_budget() {
        // Doubling the panel count moves no pmf entry by more than 1e-9,
        // an order of magnitude under the 1e-6 budget.
        for tau in [0.8, 5.0, 14.0, 90.0] {
            let p = params(17.0, 16.0 / 7.0, tau);
            let (coarse, _) = semi_analytic_distributions_with_panels(&p, SIMPSON_PANELS).unwrap();
            let (fine, _) =
                semi_analytic_distributions_with_panels(&p, 2 * SIMPSON_PANELS).unwrap();
            let worst = coarse
                .iter()
                .zip(&fine)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max);
            assert!(worst < 1e-9, "quadrature drift {worst} at tau {tau}");
        }
    }

    #[test]
    fn paper_scenario_histograms_are_well_resolved() {
        // Calibrated scenario: the misclassified mass at the optimal
        // threshold sits at the calibrated 3% (97% fidelity).
        let tau = calibrate_flip_lifetime(96.0, 16.0, 7.0, 0.97).unwrap();
        let rate_dark = 16.0 / 7.0;
        let p = ReadoutParams {
            rate_bright: calibrated_bright_rate(96.0, rate_dark, 7.0, tau),
            rate_dark,
            flip_lifetime: tau,
            window: 7.0,
            trials: 50_000,
            seed: 5,
        };
        let result = count_histograms(&p).unwrap();
        assert!(
            1.0 - result.fidelity < 0.035,
            "misclassified mass {}",
            1.0 - result.fidelity
        );
        assert!((result.mean_up - 96.0).abs() < 1.0);
        assert!((result.mean_down - 16.0).abs() < 0.5);
    }

    #[test]
    fn fidelity_is_nondecreasing_in_flip_lifetime() {
        let mut last = 0.0;
        for tau in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0] {
            let p = params(17.0, 16.0 / 7.0, tau);
            let f = semi_analytic_fidelity(&p).unwrap();
            assert!(
                f >= last - 1e-12,
                "fidelity decreased: {f} < {last} at tau {tau}"
            );
            last = f;
        }
    }

    #[test]
    fn fidelity_grows_with_rate_separation() {
        let mut last = 0.0;
        for bright in [3.0, 5.0, 9.0, 14.0, 20.0] {
            let p = params(bright, 16.0 / 7.0, 20.0);
            let f = semi_analytic_fidelity(&p).unwrap();
            assert!(f >= last - 1e-12, "{f} < {last} at rate {bright}");
            last = f;
        }
    }

    #[test]
    fn monte_carlo_agrees_with_quadrature_on_a_grid() {
        // Oracle agreement over a 5x5x5 parameter grid.
        let brights = [6.0, 9.0, 13.0, 17.0, 22.0];
        let darks = [0.5, 1.2, 2.3, 3.2, 4.0];
        let taus = [2.0, 5.0, 10.0, 22.0, 50.0];
        for (i, &bright) in brights.iter().enumerate() {
            for (j, &dark) in darks.iter().enumerate() {
                for (k, &tau) in taus.iter().enumerate() {
                    let p = ReadoutParams {
                        rate_bright: bright,
                        rate_dark: dark,
                        flip_lifetime: tau,
                        window: 7.0,
                        trials: 10_000,
                        seed: 1000 + (i * 25 + j * 5 + k) as u64,
                    };
                    let mc = count_histograms(&p).unwrap().fidelity;
                    let analytic = semi_analytic_fidelity(&p).unwrap();
                    let sigma = (analytic * (1.0 - analytic) * 2.0 / p.trials as f64)
                        .sqrt()
                        .max(1e-4);
                    assert!(
                        (mc - analytic).abs() <= 3.0 * sigma,
                        "MC {mc} vs analytic {analytic} at ({bright}, {dark}, {tau}), 3 sigma = {}",
                        3.0 * sigma
                    );
                }
            }
        }
    }

    #[test]
    fn calibrated_bright_rate_hits_target_mean() {
        for tau in [5.0, 12.0, 40.0, f64::INFINITY] {
            let rate_dark = 16.0 / 7.0;
            let bright = calibrated_bright_rate(96.0, rate_dark, 7.0, tau);
            let expected_bright_time = if tau.is_finite() {
                tau * (1.0 - (-7.0 / tau).exp())
            } else {
                7.0
            };
            let mean = rate_dark * 7.0 + (bright - rate_dark) * expected_bright_time;
            assert_relative_eq!(mean, 96.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn csv_lists_union_of_counts() {
        let result = ReadoutResult {
            histogram_up: [(5, 2), (9, 1)].into_iter().collect(),
            histogram_down: [(0, 3)].into_iter().collect(),
            threshold: 3,
            fidelity: 1.0,
            mean_up: 6.33,
            mean_down: 0.0,
        };
        let csv = histograms_to_csv(&result);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "count,freq_up,freq_down");
        assert_eq!(lines[1], "0,0,3");
        assert_eq!(lines[2], "5,2,0");
        assert_eq!(lines[3], "9,1,0");
    }
}
