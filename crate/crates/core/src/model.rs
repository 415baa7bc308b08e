//! Domain types, unit conventions, the spin/Zeeman sub-model and the
//! closed-form cavity-QED figures of merit.
//!
//! Unit convention: every frequency and rate in this crate is a *linear*
//! frequency in GHz (the f of ω = 2πf), and magnetic fields are in
//! kilogauss. All formulas downstream (linewidths, cooperativity,
//! exchange rates, transmission denominators) are homogeneous in
//! frequency, so no 2π factor appears anywhere in the code.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Violation};

/// Largest number of unpolarized emitters we will enumerate spin
/// assignments for (2^12 conditioned spectra).
const MAX_UNPOLARIZED: usize = 12;

/// Cavity mode parameters.
///
/// `kappa` is the FWHM energy decay rate of the mode; `kappa_in` and
/// `kappa_out` are the decay rates into the probed input and output
/// ports. Their sum may not exceed `kappa`; the remainder is intrinsic
/// loss. When a config file omits the ports they default to the
/// symmetric lossless split `kappa/2` each, which gives unit peak
/// transmission for the empty cavity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "CavityParamsWire")]
pub struct CavityParams {
    /// Cavity resonance frequency, GHz.
    pub omega_c: f64,
    /// Total energy decay rate (FWHM), GHz.
    pub kappa: f64,
    /// Input-port decay rate, GHz.
    pub kappa_in: f64,
    /// Output-port decay rate, GHz.
    pub kappa_out: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CavityParamsWire {
    omega_c: f64,
    kappa: f64,
    #[serde(default)]
    kappa_in: Option<f64>,
    #[serde(default)]
    kappa_out: Option<f64>,
}

impl From<CavityParamsWire> for CavityParams {
    fn from(w: CavityParamsWire) -> Self {
        CavityParams {
            omega_c: w.omega_c,
            kappa: w.kappa,
            kappa_in: w.kappa_in.unwrap_or(0.5 * w.kappa),
            kappa_out: w.kappa_out.unwrap_or(0.5 * w.kappa),
        }
    }
}

impl CavityParams {
    /// Symmetric lossless two-port cavity: `kappa_in = kappa_out = kappa/2`.
    pub fn symmetric(omega_c: f64, kappa: f64) -> Self {
        CavityParams {
            omega_c,
            kappa,
            kappa_in: 0.5 * kappa,
            kappa_out: 0.5 * kappa,
        }
    }
}

/// A definite electronic spin state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spin {
    Up,
    Down,
}

/// Spin preparation of an emitter before probing.
///
/// `Unpolarized` models the un-pumped steady state: transmission is the
/// equal-weight average of the two spin-conditioned spectra.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SpinPrep {
    Up,
    Down,
    #[default]
    Unpolarized,
}

impl SpinPrep {
    pub fn resolved(self) -> Option<Spin> {
        match self {
            SpinPrep::Up => Some(Spin::Up),
            SpinPrep::Down => Some(Spin::Down),
            SpinPrep::Unpolarized => None,
        }
    }
}

/// Linear Zeeman model of the two spin-selective optical transitions.
///
/// Both transitions start from the common zero-field frequency and
/// shift linearly with |B|, with an independent slope per spin branch.
/// Slopes are user-supplied; the model is exactly linear by
/// construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeemanModel {
    /// Zero-field transition frequency, GHz.
    pub omega_zero: f64,
    /// Frequency shift of the up-spin transition per field unit, GHz/kG.
    pub slope_up: f64,
    /// Frequency shift of the down-spin transition per field unit, GHz/kG.
    pub slope_down: f64,
    /// Probability per optical scattering event of preserving the spin.
    pub branching_fraction: f64,
}

/// One two-level emitter coupled to the cavity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmitterParams {
    /// Single-photon Rabi frequency, GHz.
    pub g: f64,
    /// Total transition FWHM linewidth without the cavity (spontaneous
    /// emission plus spectral diffusion lumped into one Lorentzian), GHz.
    pub gamma: f64,
    pub zeeman: ZeemanModel,
    /// Charge state: optically active, or ionized and invisible.
    #[serde(default = "default_true")]
    pub active: bool,
    #[serde(default)]
    pub prepared_spin: SpinPrep,
}

fn default_true() -> bool {
    true
}

/// The single source of truth for every operation in the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub cavity: CavityParams,
    pub emitters: Vec<EmitterParams>,
    /// Magnetic field magnitude, kG.
    #[serde(default)]
    pub b_field: f64,
    /// Informational only; all spectra are computed in the weak-probe
    /// linear regime.
    #[serde(default)]
    pub probe_power_note: String,
    /// Optional per-field provenance notes carried by bundled configs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<BTreeMap<String, String>>,
}

/// One probe-addressable optical transition after spin masking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    /// Index of the emitter this transition belongs to.
    pub emitter: usize,
    pub spin: Spin,
    /// Transition frequency at the configured field, GHz.
    pub frequency: f64,
    pub g: f64,
    pub gamma: f64,
}

/// Cooperativity C = 4g²/(κγ), the dimensionless figure of merit
/// comparing coherent coupling to dissipation.
pub fn cooperativity(g: f64, kappa: f64, gamma: f64) -> Result<f64, Error> {
    if !(kappa > 0.0) || !(gamma > 0.0) {
        return Err(Error::Validation(vec![Violation {
            path: "cooperativity".into(),
            message: format!("kappa and gamma must be positive (got kappa={kappa}, gamma={gamma})"),
        }]));
    }
    Ok(4.0 * g * g / (kappa * gamma))
}

/// Purcell-broadened FWHM of the emitter-like dressed state at
/// emitter-cavity detuning `delta`:
///
/// Γ(Δ) = γ + (4g²/κ) / (1 + 4Δ²/κ²)
pub fn purcell_linewidth(delta: f64, g: f64, kappa: f64, gamma: f64) -> Result<f64, Error> {
    if !(kappa > 0.0) {
        return Err(Error::Validation(vec![Violation {
            path: "purcell_linewidth".into(),
            message: format!("kappa must be positive (got {kappa})"),
        }]));
    }
    let lorentz = 1.0 + 4.0 * delta * delta / (kappa * kappa);
    Ok(gamma + (4.0 * g * g / kappa) / lorentz)
}

/// Spin-selective transition frequencies (ω_up, ω_down) at field `b`.
pub fn transition_frequencies(zeeman: &ZeemanModel, b: f64) -> (f64, f64) {
    (
        zeeman.omega_zero + zeeman.slope_up * b,
        zeeman.omega_zero + zeeman.slope_down * b,
    )
}

fn check_finite(violations: &mut Vec<Violation>, path: &str, value: f64) -> bool {
    if value.is_finite() {
        true
    } else {
        violations.push(Violation {
            path: path.into(),
            message: format!("must be finite (got {value})"),
        });
        false
    }
}

impl SystemConfig {
    /// Check every invariant and return the full list of violations,
    /// never a partial check. On success the config is wrapped in
    /// [`ValidatedConfig`], which every downstream operation requires.
    pub fn validate(self) -> Result<ValidatedConfig, Error> {
        let mut v: Vec<Violation> = Vec::new();

        check_finite(&mut v, "cavity.omega_c", self.cavity.omega_c);
        if check_finite(&mut v, "cavity.kappa", self.cavity.kappa) && self.cavity.kappa <= 0.0 {
            v.push(Violation {
                path: "cavity.kappa".into(),
                message: format!("must be > 0 (got {})", self.cavity.kappa),
            });
        }
        let kin_ok = check_finite(&mut v, "cavity.kappa_in", self.cavity.kappa_in);
        if kin_ok && self.cavity.kappa_in < 0.0 {
            v.push(Violation {
                path: "cavity.kappa_in".into(),
                message: format!("must be >= 0 (got {})", self.cavity.kappa_in),
            });
        }
        let kout_ok = check_finite(&mut v, "cavity.kappa_out", self.cavity.kappa_out);
        if kout_ok && self.cavity.kappa_out < 0.0 {
            v.push(Violation {
                path: "cavity.kappa_out".into(),
                message: format!("must be >= 0 (got {})", self.cavity.kappa_out),
            });
        }
        if kin_ok
            && kout_ok
            && self.cavity.kappa.is_finite()
            && self.cavity.kappa_in + self.cavity.kappa_out > self.cavity.kappa
        {
            v.push(Violation {
                path: "cavity.kappa_in + cavity.kappa_out".into(),
                message: format!(
                    "port decomposition exceeds the total decay rate ({} + {} > {})",
                    self.cavity.kappa_in, self.cavity.kappa_out, self.cavity.kappa
                ),
            });
        }

        for (i, e) in self.emitters.iter().enumerate() {
            let p = |field: &str| format!("emitters[{i}].{field}");
            if check_finite(&mut v, &p("g"), e.g) && e.g < 0.0 {
                v.push(Violation {
                    path: p("g"),
                    message: format!("must be >= 0 (got {})", e.g),
                });
            }
            if check_finite(&mut v, &p("gamma"), e.gamma) && e.gamma <= 0.0 {
                v.push(Violation {
                    path: p("gamma"),
                    message: format!("must be > 0 (got {})", e.gamma),
                });
            }
            check_finite(&mut v, &p("zeeman.omega_zero"), e.zeeman.omega_zero);
            check_finite(&mut v, &p("zeeman.slope_up"), e.zeeman.slope_up);
            check_finite(&mut v, &p("zeeman.slope_down"), e.zeeman.slope_down);
            if check_finite(
                &mut v,
                &p("zeeman.branching_fraction"),
                e.zeeman.branching_fraction,
            ) && !(0.0..=1.0).contains(&e.zeeman.branching_fraction)
            {
                v.push(Violation {
                    path: p("zeeman.branching_fraction"),
                    message: format!("must lie in [0, 1] (got {})", e.zeeman.branching_fraction),
                });
            }
        }

        if check_finite(&mut v, "b_field", self.b_field) && self.b_field < 0.0 {
            v.push(Violation {
                path: "b_field".into(),
                message: format!("field magnitude must be >= 0 (got {})", self.b_field),
            });
        }

        if v.is_empty() {
            Ok(ValidatedConfig(self))
        } else {
            Err(Error::Validation(v))
        }
    }
}

/// A [`SystemConfig`] that has passed validation. All spectral and
/// eigenvalue operations take this wrapper, so an unvalidated config
/// cannot reach them. Immutable after construction; every operation on
/// it is a pure function.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedConfig(SystemConfig);

impl std::ops::Deref for ValidatedConfig {
    type Target = SystemConfig;
    fn deref(&self) -> &SystemConfig {
        &self.0
    }
}

impl ValidatedConfig {
    pub fn config(&self) -> &SystemConfig {
        &self.0
    }

    /// The transition of emitter `index` addressed when its spin is `spin`.
    pub fn transition(&self, index: usize, spin: Spin) -> Transition {
        let e = &self.0.emitters[index];
        let (up, down) = transition_frequencies(&e.zeeman, self.0.b_field);
        Transition {
            emitter: index,
            spin,
            frequency: match spin {
                Spin::Up => up,
                Spin::Down => down,
            },
            g: e.g,
            gamma: e.gamma,
        }
    }

    /// Probe-coupled transitions when every active emitter has a definite
    /// spin preparation. Fails on the first unpolarized active emitter.
    pub fn resolved_transitions(&self) -> Result<Vec<Transition>, Error> {
        let mut out = Vec::new();
        for (i, e) in self.0.emitters.iter().enumerate() {
            if !e.active {
                continue;
            }
            match e.prepared_spin.resolved() {
                Some(spin) => out.push(self.transition(i, spin)),
                None => return Err(Error::UnresolvedSpin(i)),
            }
        }
        Ok(out)
    }

    /// True when no active emitter is unpolarized.
    pub fn is_resolved(&self) -> bool {
        self.0
            .emitters
            .iter()
            .all(|e| !e.active || e.prepared_spin.resolved().is_some())
    }

    /// Every equal-weight spin assignment: one entry per joint assignment
    /// of the unpolarized active emitters (2^U of them).
    pub fn spin_assignments(&self) -> Result<Vec<Vec<Transition>>, Error> {
        let unpolarized: Vec<usize> = self
            .0
            .emitters
            .iter()
            .enumerate()
            .filter(|(_, e)| e.active && e.prepared_spin.resolved().is_none())
            .map(|(i, _)| i)
            .collect();
        if unpolarized.len() > MAX_UNPOLARIZED {
            return Err(Error::MixtureTooLarge(
                unpolarized.len(),
                1u64 << unpolarized.len(),
            ));
        }

        let mut assignments = Vec::with_capacity(1 << unpolarized.len());
        for mask in 0u64..(1u64 << unpolarized.len()) {
            let mut transitions = Vec::new();
            for (i, e) in self.0.emitters.iter().enumerate() {
                if !e.active {
                    continue;
                }
                let spin = match e.prepared_spin.resolved() {
                    Some(s) => s,
                    None => {
                        let bit = unpolarized.iter().position(|&u| u == i).unwrap();
                        if mask >> bit & 1 == 0 {
                            Spin::Up
                        } else {
                            Spin::Down
                        }
                    }
                };
                transitions.push(self.transition(i, spin));
            }
            assignments.push(transitions);
        }
        Ok(assignments)
    }

    /// Copy with a different field magnitude. Fails if `b` is invalid.
    pub fn with_b_field(&self, b: f64) -> Result<ValidatedConfig, Error> {
        let mut c = self.0.clone();
        c.b_field = b;
        c.validate()
    }

    /// Copy with emitter `index` switched active or inactive.
    pub fn with_emitter_active(
        &self,
        index: usize,
        active: bool,
    ) -> Result<ValidatedConfig, Error> {
        if index >= self.0.emitters.len() {
            return Err(Error::EmitterIndex {
                index,
                len: self.0.emitters.len(),
            });
        }
        let mut c = self.0.clone();
        c.emitters[index].active = active;
        Ok(ValidatedConfig(c))
    }

    /// Copy with emitter `index` prepared in `prep`.
    pub fn with_prepared_spin(
        &self,
        index: usize,
        prep: SpinPrep,
    ) -> Result<ValidatedConfig, Error> {
        if index >= self.0.emitters.len() {
            return Err(Error::EmitterIndex {
                index,
                len: self.0.emitters.len(),
            });
        }
        let mut c = self.0.clone();
        c.emitters[index].prepared_spin = prep;
        Ok(ValidatedConfig(c))
    }
}
