//! Nonlinear least-squares extraction of cavity-QED parameters from
//! measured transmission spectra.
//!
//! The model is the closed-form transmission with a free overall
//! amplitude and a coherent background added in amplitude,
//! T(ω) = |A|²·|t(ω) + b·e^{iφ}|², so Fano-like asymmetry from
//! interference comes out naturally. The optimizer is a derivative-free
//! Nelder–Mead simplex with deterministic multi-start; strictly
//! positive parameters run in log-space so positivity needs no
//! constraint machinery.

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::{Transition, ValidatedConfig};

/// Default number of uniform restarts on top of the user's start point.
pub const DEFAULT_RESTARTS: usize = 16;
/// Default Nelder-Mead iteration cap per start.
pub const DEFAULT_MAX_ITERS: usize = 4000;
/// Convergence: simplex extent below this fraction of the bound width
/// on every axis.
const SIMPLEX_TOL: f64 = 1e-6;

/// One contributing line of the flattened model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitLine {
    pub g: f64,
    pub omega: f64,
    pub gamma: f64,
}

/// The transmission model with every fittable quantity spelled out.
/// Spin masking has already been applied: each line is one contributing
/// transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatModel {
    pub omega_c: f64,
    pub kappa: f64,
    pub kappa_in: f64,
    pub kappa_out: f64,
    pub lines: Vec<FitLine>,
    /// Overall signal amplitude A.
    pub amplitude: f64,
    /// Coherent background magnitude b.
    pub background_mag: f64,
    /// Coherent background phase φ, radians.
    pub background_phase: f64,
}

impl FlatModel {
    /// Flatten a validated config; every active emitter must carry a
    /// definite spin preparation.
    pub fn from_config(config: &ValidatedConfig) -> Result<Self, Error> {
        let lines = config
            .resolved_transitions()?
            .iter()
            .map(|t: &Transition| FitLine {
                g: t.g,
                omega: t.frequency,
                gamma: t.gamma,
            })
            .collect();
        Ok(FlatModel {
            omega_c: config.cavity.omega_c,
            kappa: config.cavity.kappa,
            kappa_in: config.cavity.kappa_in,
            kappa_out: config.cavity.kappa_out,
            lines,
            amplitude: 1.0,
            background_mag: 0.0,
            background_phase: 0.0,
        })
    }
}

/// Modeled transmitted intensity T(ω_p) = |A|²·|t(ω_p) + b·e^{iφ}|².
pub fn model_transmission(omega_p: f64, m: &FlatModel) -> f64 {
    let mut denom = C64::new(0.5 * m.kappa, m.omega_c - omega_p);
    for line in &m.lines {
        denom += line.g * line.g / C64::new(0.5 * line.gamma, line.omega - omega_p);
    }
    let t = C64::from((m.kappa_in * m.kappa_out).sqrt()) / denom;
    let background =
        m.background_mag * C64::new(m.background_phase.cos(), m.background_phase.sin());
    m.amplitude * m.amplitude * (t + background).norm_sqr()
}

/// Name of one fittable parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    /// Coupling of line j.
    G(usize),
    /// Frequency of line j.
    Omega(usize),
    /// Linewidth of line j.
    Gamma(usize),
    OmegaC,
    Kappa,
    Amplitude,
    BackgroundMag,
    BackgroundPhase,
}

impl ParamId {
    /// Strictly positive parameters are optimized in log-space.
    fn log_space(self) -> bool {
        matches!(
            self,
            ParamId::G(_) | ParamId::Gamma(_) | ParamId::Kappa | ParamId::Amplitude
        )
    }

    fn set(self, m: &mut FlatModel, value: f64) {
        match self {
            ParamId::G(j) => m.lines[j].g = value,
            ParamId::Omega(j) => m.lines[j].omega = value,
            ParamId::Gamma(j) => m.lines[j].gamma = value,
            ParamId::OmegaC => m.omega_c = value,
            ParamId::Kappa => m.kappa = value,
            ParamId::Amplitude => m.amplitude = value,
            ParamId::BackgroundMag => m.background_mag = value,
            ParamId::BackgroundPhase => m.background_phase = value,
        }
    }
}

impl std::fmt::Display for ParamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamId::G(j) => write!(f, "g[{j}]"),
            ParamId::Omega(j) => write!(f, "omega[{j}]"),
            ParamId::Gamma(j) => write!(f, "gamma[{j}]"),
            ParamId::OmegaC => write!(f, "omega_c"),
            ParamId::Kappa => write!(f, "kappa"),
            ParamId::Amplitude => write!(f, "amplitude"),
            ParamId::BackgroundMag => write!(f, "background_mag"),
            ParamId::BackgroundPhase => write!(f, "background_phase"),
        }
    }
}

impl std::str::FromStr for ParamId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        let indexed = |name: &str| -> Option<usize> {
            s.strip_prefix(name)
                .and_then(|rest| rest.strip_prefix('['))
                .and_then(|rest| rest.strip_suffix(']'))
                .and_then(|idx| idx.parse().ok())
        };
        if let Some(j) = indexed("g") {
            return Ok(ParamId::G(j));
        }
        if let Some(j) = indexed("omega") {
            return Ok(ParamId::Omega(j));
        }
        if let Some(j) = indexed("gamma") {
            return Ok(ParamId::Gamma(j));
        }
        match s {
            "omega_c" => Ok(ParamId::OmegaC),
            "kappa" => Ok(ParamId::Kappa),
            "amplitude" => Ok(ParamId::Amplitude),
            "background_mag" => Ok(ParamId::BackgroundMag),
            "background_phase" => Ok(ParamId::BackgroundPhase),
            other => Err(Error::FitSetup(format!("unknown parameter name `{other}`"))),
        }
    }
}

/// One free parameter: identity, closed bounds and start value.
#[derive(Debug, Clone, Copy)]
pub struct FreeParam {
    pub id: ParamId,
    pub bounds: (f64, f64),
    pub initial: f64,
}

/// A least-squares problem over (ω, T) data.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub data: Vec<(f64, f64)>,
    /// Fixed parameters, taken verbatim from the system config.
    pub base: FlatModel,
    pub free: Vec<FreeParam>,
    /// Uniform restarts on top of the supplied start point.
    pub restarts: usize,
    pub seed: u64,
    pub max_iters: usize,
}

impl FitProblem {
    pub fn new(data: Vec<(f64, f64)>, base: FlatModel, free: Vec<FreeParam>) -> Self {
        FitProblem {
            data,
            base,
            free,
            restarts: DEFAULT_RESTARTS,
            seed: 0,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }

    fn check(&self) -> Result<(), Error> {
        if self.free.is_empty() {
            return Err(Error::FitSetup("no free parameters".into()));
        }
        if self.data.len() < 3 * self.free.len() {
            return Err(Error::FitSetup(format!(
                "{} data points cannot constrain {} free parameters (need at least 3x)",
                self.data.len(),
                self.free.len()
            )));
        }
        for p in &self.free {
            let (lo, hi) = p.bounds;
            if !lo.is_finite() || !hi.is_finite() || !(lo < hi) {
                return Err(Error::FitSetup(format!(
                    "parameter {} needs finite bounds with lo < hi (got [{lo}, {hi}])",
                    p.id
                )));
            }
            if p.id.log_space() && lo <= 0.0 {
                return Err(Error::FitSetup(format!(
                    "parameter {} is optimized in log-space and needs a positive lower bound (got {lo})",
                    p.id
                )));
            }
            if !(lo <= p.initial && p.initial <= hi) {
                return Err(Error::FitSetup(format!(
                    "initial value {} for {} lies outside [{lo}, {hi}]; no in-bounds start possible",
                    p.initial, p.id
                )));
            }
            let line_count = self.base.lines.len();
            let line_index = match p.id {
                ParamId::G(j) | ParamId::Omega(j) | ParamId::Gamma(j) => Some(j),
                _ => None,
            };
            if let Some(j) = line_index {
                if j >= line_count {
                    return Err(Error::FitSetup(format!(
                        "parameter {} refers to line {j} but the model has {line_count} lines",
                        p.id
                    )));
                }
            }
        }
        Ok(())
    }

    fn transform(&self, id: usize, natural: f64) -> f64 {
        if self.free[id].id.log_space() {
            natural.ln()
        } else {
            natural
        }
    }

    fn untransform(&self, id: usize, x: f64) -> f64 {
        if self.free[id].id.log_space() {
            x.exp()
        } else {
            x
        }
    }

    fn transformed_bounds(&self, id: usize) -> (f64, f64) {
        let (lo, hi) = self.free[id].bounds;
        (self.transform(id, lo), self.transform(id, hi))
    }

    fn model_with(&self, values: &[f64]) -> FlatModel {
        let mut m = self.base.clone();
        for (p, &v) in self.free.iter().zip(values) {
            p.id.set(&mut m, v);
        }
        m
    }
}

/// Residual sum of squares Σ_k (model_T(ω_k) − T_k)² at the given
/// natural-unit values of the free parameters. Exact and deterministic:
/// a sequential sum in data order.
pub fn residual(problem: &FitProblem, values: &[f64]) -> f64 {
    let m = problem.model_with(values);
    problem
        .data
        .iter()
        .map(|&(omega, t)| {
            let diff = model_transmission(omega, &m) - t;
            diff * diff
        })
        .sum()
}

#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    /// Best-fit values in the order of `problem.free`, natural units.
    pub best: Vec<f64>,
    pub rss: f64,
    /// Iterations spent by the winning start.
    pub iterations: usize,
    pub converged: bool,
    /// Starts actually run (the supplied initial plus the restarts).
    pub restarts_used: usize,
}

impl FitResult {
    /// Best-fit values labeled by parameter name.
    pub fn named(&self, problem: &FitProblem) -> Vec<(String, f64)> {
        problem
            .free
            .iter()
            .zip(&self.best)
            .map(|(p, &v)| (p.id.to_string(), v))
            .collect()
    }
}

struct StartOutcome {
    x: Vec<f64>,
    rss: f64,
    iterations: usize,
    converged: bool,
}

/// Multi-start Nelder-Mead over the transformed coordinates. Start 0 is
/// the user's initial point; the rest are uniform in the transformed
/// bounds with deterministic seeds. The returned best never has an rss
/// above the initial point's.
pub fn fit(problem: &FitProblem) -> Result<FitResult, Error> {
    problem.check()?;
    let n = problem.free.len();

    let initial: Vec<f64> = problem
        .free
        .iter()
        .enumerate()
        .map(|(a, p)| problem.transform(a, p.initial))
        .collect();

    let mut starts = vec![initial];
    for r in 0..problem.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(
            problem
                .seed
                .wrapping_add((r as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        starts.push(
            (0..n)
                .map(|a| {
                    let (lo, hi) = problem.transformed_bounds(a);
                    lo + (hi - lo) * rng.random::<f64>()
                })
                .collect(),
        );
    }

    let outcomes: Vec<StartOutcome> = starts
        .par_iter()
        .map(|x0| nelder_mead(problem, x0))
        .collect();

    // Deterministic argmin with index tie-break.
    let best_index = outcomes
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| {
            a.rss
                .partial_cmp(&b.rss)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(i.cmp(j))
        })
        .map(|(i, _)| i)
        .expect("at least the initial start ran");
    let winner = &outcomes[best_index];

    Ok(FitResult {
        best: winner
            .x
            .iter()
            .enumerate()
            .map(|(a, &x)| problem.untransform(a, x))
            .collect(),
        rss: winner.rss,
        iterations: winner.iterations,
        converged: winner.converged,
        restarts_used: outcomes.len(),
    })
}

fn nelder_mead(problem: &FitProblem, x0: &[f64]) -> StartOutcome {
    let n = x0.len();
    let bounds: Vec<(f64, f64)> = (0..n).map(|a| problem.transformed_bounds(a)).collect();
    let clamp = |x: &mut Vec<f64>| {
        for (v, &(lo, hi)) in x.iter_mut().zip(&bounds) {
            *v = v.clamp(lo, hi);
        }
    };
    let eval = |x: &[f64]| {
        let natural: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(a, &v)| problem.untransform(a, v))
            .collect();
        residual(problem, &natural)
    };

    // Initial simplex: 5% of the bound width along each axis, stepping
    // inward when the start sits on the upper bound.
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), eval(x0)));
    for a in 0..n {
        let (lo, hi) = bounds[a];
        let step = 0.05 * (hi - lo);
        let mut x = x0.to_vec();
        x[a] = if x[a] + step <= hi {
            x[a] + step
        } else {
            x[a] - step
        };
        let f = eval(&x);
        simplex.push((x, f));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < problem.max_iters {
        iterations += 1;
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));

        // Simplex diameter below tolerance on every axis?
        let done = (0..n).all(|a| {
            let (lo, hi) = bounds[a];
            let lo_v = simplex
                .iter()
                .map(|(x, _)| x[a])
                .fold(f64::INFINITY, f64::min);
            let hi_v = simplex
                .iter()
                .map(|(x, _)| x[a])
                .fold(f64::NEG_INFINITY, f64::max);
            hi_v - lo_v < SIMPLEX_TOL * (hi - lo)
        });
        if done {
            converged = true;
            break;
        }

        let centroid: Vec<f64> = (0..n)
            .map(|a| simplex[..n].iter().map(|(x, _)| x[a]).sum::<f64>() / n as f64)
            .collect();
        let worst = simplex[n].clone();

        let mut reflected: Vec<f64> = centroid
            .iter()
            .zip(&worst.0)
            .map(|(c, w)| c + alpha * (c - w))
            .collect();
        clamp(&mut reflected);
        let f_reflected = eval(&reflected);

        if f_reflected < simplex[0].1 {
            let mut expanded: Vec<f64> = centroid
                .iter()
                .zip(&reflected)
                .map(|(c, r)| c + gamma * (r - c))
                .collect();
            clamp(&mut expanded);
            let f_expanded = eval(&expanded);
            simplex[n] = if f_expanded < f_reflected {
                (expanded, f_expanded)
            } else {
                (reflected, f_reflected)
            };
            continue;
        }
        if f_reflected < simplex[n - 1].1 {
            simplex[n] = (reflected, f_reflected);
            continue;
        }

        let mut contracted: Vec<f64> = centroid
            .iter()
            .zip(&worst.0)
            .map(|(c, w)| c + rho * (w - c))
            .collect();
        clamp(&mut contracted);
        let f_contracted = eval(&contracted);
        if f_contracted < worst.1 {
            simplex[n] = (contracted, f_contracted);
            continue;
        }

        // Shrink toward the best vertex.
        let best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            for (v, b) in vertex.0.iter_mut().zip(&best) {
                *v = b + sigma * (*v - b);
            }
            vertex.1 = eval(&vertex.0);
        }
    }

    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    StartOutcome {
        x: simplex[0].0.clone(),
        rss: simplex[0].1,
        iterations,
        converged,
    }
}

/// JSON export of a fit result with named parameters.
pub fn result_to_json(problem: &FitProblem, result: &FitResult) -> String {
    #[derive(Serialize)]
    struct Doc {
        best: std::collections::BTreeMap<String, f64>,
        rss: f64,
        iterations: usize,
        converged: bool,
        restarts_used: usize,
    }
    let doc = Doc {
        best: result.named(problem).into_iter().collect(),
        rss: result.rss,
        iterations: result.iterations,
        converged: result.converged,
        restarts_used: result.restarts_used,
    };
    let mut json = serde_json::to_string_pretty(&doc).expect("fit result serializes");
    json.push('\n');
    json
}

/// Parse `omega_GHz,T` CSV data (header required).
pub fn parse_data_csv(text: &str) -> Result<Vec<(f64, f64)>, Error> {
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header.trim() == "omega_GHz,T" => {}
        other => {
            return Err(Error::FitSetup(format!(
                "expected header `omega_GHz,T`, found {other:?}"
            )))
        }
    }
    let mut data = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let parse = |field: Option<&str>| -> Result<f64, Error> {
            field
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::FitSetup(format!("bad data row {}: `{line}`", k + 2)))
        };
        let omega = parse(cols.next())?;
        let t = parse(cols.next())?;
        data.push((omega, t));
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum;
    use approx::assert_relative_eq;

    fn device1_single() -> FlatModel {
        FlatModel {
            omega_c: 0.0,
            kappa: 48.0,
            kappa_in: 24.0,
            kappa_out: 24.0,
            lines: vec![FitLine {
                g: 7.3,
                omega: 0.0,
                gamma: 0.19,
            }],
            amplitude: 1.0,
            background_mag: 0.0,
            background_phase: 0.0,
        }
    }

    fn synth(m: &FlatModel, grid: &[f64]) -> Vec<(f64, f64)> {
        grid.iter()
            .map(|&w| (w, model_transmission(w, m)))
            .collect()
    }

    #[test]
    fn model_reduces_to_spectrum_intensity_without_background() {
        use crate::model::{CavityParams, EmitterParams, SpinPrep, SystemConfig, ZeemanModel};
        let cfg = SystemConfig {
            cavity: CavityParams::symmetric(0.0, 48.0),
            emitters: vec![EmitterParams {
                g: 7.3,
                gamma: 0.19,
                zeeman: ZeemanModel {
                    omega_zero: 0.0,
                    slope_up: 0.0,
                    slope_down: 0.0,
                    branching_fraction: 1.0,
                },
                active: true,
                prepared_spin: SpinPrep::Up,
            }],
            b_field: 0.0,
            probe_power_note: String::new(),
            provenance: None,
        }
        .validate()
        .unwrap();
        let flat = FlatModel::from_config(&cfg).unwrap();
        for w in [-60.0, -3.0, 0.0, 1.7, 44.0] {
            let direct = crate::spectrum::transmission_intensity(w, &cfg).unwrap();
            assert_relative_eq!(model_transmission(w, &flat), direct, max_relative = 1e-14);
        }
    }

    #[test]
    fn zero_amplitude_kills_the_model() {
        let mut m = device1_single();
        m.amplitude = 0.0;
        for w in [-10.0, 0.0, 25.0] {
            assert_eq!(model_transmission(w, &m), 0.0);
        }
    }

    #[test]
    fn param_names_round_trip() {
        for id in [
            ParamId::G(0),
            ParamId::Omega(3),
            ParamId::Gamma(1),
            ParamId::OmegaC,
            ParamId::Kappa,
            ParamId::Amplitude,
            ParamId::BackgroundMag,
            ParamId::BackgroundPhase,
        ] {
            let parsed: ParamId = id.to_string().parse().unwrap();
            assert_eq!(parsed, id);
        }
        assert!("gamma[x]".parse::<ParamId>().is_err());
        assert!("phi".parse::<ParamId>().is_err());
    }

    #[test]
    fn residual_is_zero_at_generator_and_doubles_with_duplicates() {
        let truth = device1_single();
        let grid = spectrum::linspace(-80.0, 80.0, 101);
        let mut data = synth(&truth, &grid);
        let problem = FitProblem::new(
            data.clone(),
            truth.clone(),
            vec![FreeParam {
                id: ParamId::G(0),
                bounds: (2.0, 20.0),
                initial: 7.3,
            }],
        );
        assert_eq!(residual(&problem, &[7.3]), 0.0);

        // At a perturbed point, duplicating a data row doubles its
        // contribution.
        let single = residual(&problem, &[8.0]);
        data.push(data[50]);
        let doubled_problem = FitProblem::new(data, truth, problem.free.clone());
        let at_dup = residual(&doubled_problem, &[8.0]);
        let m = doubled_problem.model_with(&[8.0]);
        let row_term = {
            let (w, t) = doubled_problem.data[50];
            let d = model_transmission(w, &m) - t;
            d * d
        };
        assert_relative_eq!(at_dup, single + row_term, max_relative = 1e-12);
    }

    #[test]
    fn perturbations_never_beat_the_noiseless_optimum() {
        let truth = device1_single();
        let grid = spectrum::linspace(-80.0, 80.0, 151);
        let problem = FitProblem::new(
            synth(&truth, &grid),
            truth,
            vec![
                FreeParam {
                    id: ParamId::G(0),
                    bounds: (2.0, 20.0),
                    initial: 7.3,
                },
                FreeParam {
                    id: ParamId::Kappa,
                    bounds: (10.0, 150.0),
                    initial: 48.0,
                },
            ],
        );
        let optimum = residual(&problem, &[7.3, 48.0]);
        assert_eq!(optimum, 0.0);
        for dg in [-0.5, -0.05, 0.05, 0.5] {
            for dk in [-2.0, -0.1, 0.1, 2.0] {
                assert!(residual(&problem, &[7.3 + dg, 48.0 + dk]) > optimum);
            }
        }
    }

    #[test]
    fn noiseless_round_trip_recovers_parameters() {
        let truth = device1_single();
        let grid = spectrum::linspace(-80.0, 80.0, 401);
        let data = synth(&truth, &grid);
        let mut problem = FitProblem::new(
            data,
            truth,
            vec![
                FreeParam {
                    id: ParamId::G(0),
                    bounds: (2.0, 20.0),
                    initial: 5.0,
                },
                FreeParam {
                    id: ParamId::Kappa,
                    bounds: (10.0, 150.0),
                    initial: 70.0,
                },
                FreeParam {
                    id: ParamId::Gamma(0),
                    bounds: (0.02, 2.0),
                    initial: 0.5,
                },
            ],
        );
        problem.restarts = 8;
        let result = fit(&problem).unwrap();
        assert!(result.converged);
        assert_eq!(result.restarts_used, 9);
        for (got, want) in result.best.iter().zip([7.3, 48.0, 0.19]) {
            assert_relative_eq!(*got, want, max_relative = 1e-4);
        }
    }

    #[test]
    fn lorentzian_recovers_kappa_exactly_at_zero_noise() {
        let mut truth = device1_single();
        truth.lines[0].g = 0.0;
        let grid = spectrum::linspace(-120.0, 120.0, 201);
        let problem = FitProblem::new(
            synth(&truth, &grid),
            truth,
            vec![FreeParam {
                id: ParamId::Kappa,
                bounds: (10.0, 150.0),
                initial: 30.0,
            }],
        );
        let result = fit(&problem).unwrap();
        assert_relative_eq!(result.best[0], 48.0, max_relative = 1e-6);
    }

    #[test]
    fn fit_never_worsens_the_initial_point() {
        let truth = device1_single();
        let grid = spectrum::linspace(-80.0, 80.0, 120);
        let mut noisy = synth(&truth, &grid);
        // Deterministic corruption so the optimum is nontrivial.
        for (k, point) in noisy.iter_mut().enumerate() {
            point.1 += 0.01 * ((k as f64 * 2.399).sin());
        }
        let mut problem = FitProblem::new(
            noisy,
            truth,
            vec![FreeParam {
                id: ParamId::G(0),
                bounds: (2.0, 20.0),
                initial: 11.0,
            }],
        );
        problem.restarts = 2;
        let initial_rss = residual(&problem, &[11.0]);
        let result = fit(&problem).unwrap();
        assert!(result.rss <= initial_rss);
    }

    #[test]
    fn setup_errors_are_reported() {
        let truth = device1_single();
        let grid = spectrum::linspace(-10.0, 10.0, 4);
        let data = synth(&truth, &grid);
        // Too few points.
        let p = FitProblem::new(
            data.clone(),
            truth.clone(),
            vec![
                FreeParam {
                    id: ParamId::G(0),
                    bounds: (2.0, 20.0),
                    initial: 7.0,
                },
                FreeParam {
                    id: ParamId::Kappa,
                    bounds: (10.0, 150.0),
                    initial: 48.0,
                },
            ],
        );
        assert!(matches!(fit(&p), Err(Error::FitSetup(_))));

        // Out-of-bounds start.
        let p = FitProblem::new(
            data.clone(),
            truth.clone(),
            vec![FreeParam {
                id: ParamId::G(0),
                bounds: (2.0, 5.0),
                initial: 7.3,
            }],
        );
        assert!(matches!(fit(&p), Err(Error::FitSetup(_))));

        // Log-space parameter with a non-positive lower bound.
        let p = FitProblem::new(
            data.clone(),
            truth.clone(),
            vec![FreeParam {
                id: ParamId::Gamma(0),
                bounds: (0.0, 2.0),
                initial: 0.2,
            }],
        );
        assert!(matches!(fit(&p), Err(Error::FitSetup(_))));

        // Line index beyond the model.
        let p = FitProblem::new(
            data,
            truth,
            vec![FreeParam {
                id: ParamId::G(4),
                bounds: (2.0, 5.0),
                initial: 3.0,
            }],
        );
        assert!(matches!(fit(&p), Err(Error::FitSetup(_))));
    }

    #[test]
    fn frequency_translation_leaves_rss_invariant() {
        let truth = device1_single();
        let grid = spectrum::linspace(-80.0, 80.0, 90);
        let data = synth(&truth, &grid);
        let free = vec![FreeParam {
            id: ParamId::Omega(0),
            bounds: (-20.0, 20.0),
            initial: 1.5,
        }];
        let problem = FitProblem::new(data.clone(), truth.clone(), free.clone());
        let rss = residual(&problem, &[1.5]);

        let shift = 64.0;
        let mut shifted_base = truth;
        shifted_base.omega_c += shift;
        let shifted_data: Vec<(f64, f64)> = data.iter().map(|&(w, t)| (w + shift, t)).collect();
        let mut shifted_free = free;
        shifted_free[0].bounds = (-20.0 + shift, 20.0 + shift);
        shifted_free[0].initial += shift;
        let shifted_problem = FitProblem::new(shifted_data, shifted_base, shifted_free);
        let shifted_rss = residual(&shifted_problem, &[1.5 + shift]);
        assert_relative_eq!(rss, shifted_rss, max_relative = 1e-9);
    }

    #[test]
    fn frequency_scaling_leaves_intensity_invariant() {
        // Scaling all rates, frequencies and the grid by s leaves T
        // pointwise unchanged, so the fitted cooperativity is
        // scale-free.
        let m = device1_single();
        for s in [0.25, 3.0, 40.0] {
            let scaled = FlatModel {
                omega_c: s * m.omega_c,
                kappa: s * m.kappa,
                kappa_in: s * m.kappa_in,
                kappa_out: s * m.kappa_out,
                lines: m
                    .lines
                    .iter()
                    .map(|l| FitLine {
                        g: s * l.g,
                        omega: s * l.omega,
                        gamma: s * l.gamma,
                    })
                    .collect(),
                amplitude: m.amplitude,
                background_mag: m.background_mag,
                background_phase: m.background_phase,
            };
            for w in [-35.0, -2.0, 0.0, 0.4, 18.0] {
                assert_relative_eq!(
                    model_transmission(w, &m),
                    model_transmission(s * w, &scaled),
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn fitted_cooperativity_is_scale_invariant() {
        // Scaling all frequencies, rates and the grid by s maps the rss
        // landscape onto itself, so the fitted dimensionless C comes out
        // the same.
        let scale = 3.0;
        let base_truth = device1_single();
        let scaled_truth = FlatModel {
            omega_c: scale * base_truth.omega_c,
            kappa: scale * base_truth.kappa,
            kappa_in: scale * base_truth.kappa_in,
            kappa_out: scale * base_truth.kappa_out,
            lines: vec![FitLine {
                g: scale * 7.3,
                omega: 0.0,
                gamma: scale * 0.19,
            }],
            ..base_truth.clone()
        };

        let fit_c = |truth: &FlatModel, s: f64| -> f64 {
            let grid = spectrum::linspace(-80.0 * s, 80.0 * s, 201);
            let data: Vec<(f64, f64)> = grid
                .iter()
                .map(|&w| (w, model_transmission(w, truth)))
                .collect();
            let mut problem = FitProblem::new(
                data,
                truth.clone(),
                vec![
                    FreeParam {
                        id: ParamId::G(0),
                        bounds: (2.0 * s, 20.0 * s),
                        initial: 5.0 * s,
                    },
                    FreeParam {
                        id: ParamId::Kappa,
                        bounds: (10.0 * s, 150.0 * s),
                        initial: 70.0 * s,
                    },
                    FreeParam {
                        id: ParamId::Gamma(0),
                        bounds: (0.02 * s, 2.0 * s),
                        initial: 0.5 * s,
                    },
                ],
            );
            problem.restarts = 2;
            problem.seed = 17;
            let result = fit(&problem).unwrap();
            4.0 * result.best[0] * result.best[0] / (result.best[1] * result.best[2])
        };

        let c_base = fit_c(&base_truth, 1.0);
        let c_scaled = fit_c(&scaled_truth, scale);
        assert_relative_eq!(c_base, c_scaled, max_relative = 1e-10);
        assert_relative_eq!(c_base, 4.0 * 7.3 * 7.3 / (48.0 * 0.19), max_relative = 1e-3);
    }

    #[test]
    fn background_only_fit_reproduces_a_two_emitter_spectrum() {
        // Physics fixed at the measured pair values; only the signal
        // amplitude and the coherent background float. The fit must pull
        // the rss down to the noise floor.
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};

        let truth = FlatModel {
            omega_c: 79.0,
            kappa: 48.0,
            kappa_in: 24.0,
            kappa_out: 24.0,
            lines: vec![
                FitLine {
                    g: 7.3,
                    omega: 0.0,
                    gamma: 0.19,
                },
                FitLine {
                    g: 7.3,
                    omega: 0.56,
                    gamma: 0.19,
                },
            ],
            amplitude: 0.92,
            background_mag: 0.035,
            background_phase: 2.4,
        };
        let grid = spectrum::linspace(-3.0, 3.5, 240);
        let sigma = 0.005
            * grid
                .iter()
                .map(|&w| model_transmission(w, &truth))
                .fold(0.0_f64, f64::max);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let normal = Normal::new(0.0, sigma).unwrap();
        let data: Vec<(f64, f64)> = grid
            .iter()
            .map(|&w| (w, model_transmission(w, &truth) + normal.sample(&mut rng)))
            .collect();

        let mut base = truth.clone();
        base.amplitude = 1.0;
        base.background_mag = 0.0;
        base.background_phase = 0.0;
        let mut problem = FitProblem::new(
            data,
            base,
            vec![
                FreeParam {
                    id: ParamId::Amplitude,
                    bounds: (0.3, 3.0),
                    initial: 1.0,
                },
                FreeParam {
                    id: ParamId::BackgroundMag,
                    bounds: (0.0, 0.3),
                    initial: 0.0,
                },
                FreeParam {
                    id: ParamId::BackgroundPhase,
                    bounds: (-std::f64::consts::PI, std::f64::consts::PI),
                    initial: 0.0,
                },
            ],
        );
        problem.restarts = 8;
        problem.seed = 4;
        let result = fit(&problem).unwrap();

        let noise_floor = problem.data.len() as f64 * sigma * sigma;
        assert!(
            result.rss <= 1.3 * noise_floor,
            "rss {} above the noise floor {noise_floor}",
            result.rss
        );
        assert_relative_eq!(result.best[0], 0.92, max_relative = 0.05);
    }

    #[test]
    fn data_csv_parses_and_rejects_garbage() {
        let text = "omega_GHz,T\n-1.5,0.25\n0,1\n";
        let data = parse_data_csv(text).unwrap();
        assert_eq!(data, vec![(-1.5, 0.25), (0.0, 1.0)]);
        assert!(parse_data_csv("omega,T\n1,2\n").is_err());
        assert!(parse_data_csv("omega_GHz,T\nfoo,2\n").is_err());
    }
}
