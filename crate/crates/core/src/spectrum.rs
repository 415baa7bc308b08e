//! Weak-probe transmission of the emitter–cavity system.
//!
//! Two independent routes to the same quantity live here: the
//! closed-form input–output amplitude used everywhere, and a direct
//! steady-state solve of the mean-field equations that serves as its
//! correctness oracle. The probe is assumed weak enough that emitter
//! saturation never enters; there is no drive-power parameter.

use num_complex::Complex64 as C64;

use crate::error::Error;
use crate::linalg;
use crate::model::{CavityParams, Transition, ValidatedConfig};

/// Transmission sampled on a probe-frequency grid.
///
/// `amplitude` is present only when every active emitter has a definite
/// spin preparation; a classical spin mixture has a well-defined mean
/// intensity but no single coherent amplitude. When present,
/// `intensity[k] == amplitude[k].norm_sqr()` bitwise.
#[derive(Debug, Clone)]
pub struct TransmissionSpectrum {
    pub probe_grid: Vec<f64>,
    pub amplitude: Option<Vec<C64>>,
    pub intensity: Vec<f64>,
}

fn check_grid(grid: &[f64]) -> Result<(), Error> {
    if grid.is_empty() {
        return Err(Error::Grid("must not be empty".into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Grid("must be strictly increasing".into()));
    }
    Ok(())
}

/// Closed-form amplitude for an explicit transition list:
///
/// t(ω_p) = √(κ_in κ_out) / [ i(ω_c − ω_p) + κ/2 + Σ_j g_j²/(i(ω_j − ω_p) + γ_j/2) ]
pub fn amplitude_for_transitions(
    omega_p: f64,
    cavity: &CavityParams,
    transitions: &[Transition],
) -> C64 {
    let mut denom = C64::new(0.5 * cavity.kappa, cavity.omega_c - omega_p);
    for t in transitions {
        let pole = C64::new(0.5 * t.gamma, t.frequency - omega_p);
        denom += t.g * t.g / pole;
    }
    C64::from((cavity.kappa_in * cavity.kappa_out).sqrt()) / denom
}

/// Complex transmission amplitude at probe frequency `omega_p`.
///
/// Requires every active emitter to carry a definite spin preparation;
/// use [`transmission_intensity`] for unpolarized mixtures.
pub fn transmission_amplitude(omega_p: f64, config: &ValidatedConfig) -> Result<C64, Error> {
    let transitions = config.resolved_transitions()?;
    Ok(amplitude_for_transitions(
        omega_p,
        &config.cavity,
        &transitions,
    ))
}

/// Transmitted intensity at `omega_p`. Unpolarized emitters contribute
/// as an equal-weight average of the conditioned intensities (a
/// classical mixture averages |t|², not t).
pub fn transmission_intensity(omega_p: f64, config: &ValidatedConfig) -> Result<f64, Error> {
    let assignments = config.spin_assignments()?;
    let total: f64 = assignments
        .iter()
        .map(|transitions| {
            amplitude_for_transitions(omega_p, &config.cavity, transitions).norm_sqr()
        })
        .sum();
    Ok(total / assignments.len() as f64)
}

/// Pointwise transmission over a strictly increasing probe grid.
pub fn transmission_spectrum(
    grid: &[f64],
    config: &ValidatedConfig,
) -> Result<TransmissionSpectrum, Error> {
    check_grid(grid)?;
    if config.is_resolved() {
        let transitions = config.resolved_transitions()?;
        let amplitude: Vec<C64> = grid
            .iter()
            .map(|&w| amplitude_for_transitions(w, &config.cavity, &transitions))
            .collect();
        let intensity = amplitude.iter().map(|t| t.norm_sqr()).collect();
        Ok(TransmissionSpectrum {
            probe_grid: grid.to_vec(),
            amplitude: Some(amplitude),
            intensity,
        })
    } else {
        let assignments = config.spin_assignments()?;
        let weight = 1.0 / assignments.len() as f64;
        let intensity = grid
            .iter()
            .map(|&w| {
                assignments
                    .iter()
                    .map(|tr| amplitude_for_transitions(w, &config.cavity, tr).norm_sqr())
                    .sum::<f64>()
                    * weight
            })
            .collect();
        Ok(TransmissionSpectrum {
            probe_grid: grid.to_vec(),
            amplitude: None,
            intensity,
        })
    }
}

/// Steady state of the mean-field equations
///
///   dα/dt  = −(i(ω_c − ω_p) + κ/2) α − i Σ_j g_j s_j + √κ_in
///   ds_j/dt = −(i(ω_j − ω_p) + γ_j/2) s_j − i g_j α
///
/// solved as an (N+1)-dimensional complex linear system by direct
/// elimination, with t = √κ_out · α. Deliberately shares no code with
/// the closed form it cross-checks.
pub fn steady_state_oracle(omega_p: f64, config: &ValidatedConfig) -> Result<C64, Error> {
    let transitions = config.resolved_transitions()?;
    let n = transitions.len();
    let dim = n + 1;
    let i = C64::I;

    let mut a = vec![vec![C64::ZERO; dim]; dim];
    let mut b = vec![C64::ZERO; dim];
    a[0][0] = i * (config.cavity.omega_c - omega_p) + 0.5 * config.cavity.kappa;
    for (j, t) in transitions.iter().enumerate() {
        a[0][j + 1] = i * t.g;
        a[j + 1][0] = i * t.g;
        a[j + 1][j + 1] = i * (t.frequency - omega_p) + 0.5 * t.gamma;
    }
    b[0] = C64::from(config.cavity.kappa_in.sqrt());

    // Row j+1 going singular points at emitter j's pole.
    let x = linalg::solve_linear_indexed(a, b).map_err(|row| {
        Error::SingularSystem(if row == 0 {
            "cavity equation".into()
        } else {
            format!(
                "emitter {} (transition index {})",
                transitions[row - 1].emitter,
                row - 1
            )
        })
    })?;
    Ok(C64::from(config.cavity.kappa_out.sqrt()) * x[0])
}

/// Fractional transmission dip caused by emitter `index` at its own
/// transition frequency: ΔT/T = 1 − T_with(ω₁)/T_without(ω₁), where
/// T_without deactivates only that emitter.
pub fn extinction(config: &ValidatedConfig, index: usize) -> Result<f64, Error> {
    let len = config.emitters.len();
    if index >= len {
        return Err(Error::EmitterIndex { index, len });
    }
    let emitter = &config.emitters[index];
    if !emitter.active {
        return Err(Error::InactiveEmitter(index));
    }
    let spin = emitter
        .prepared_spin
        .resolved()
        .ok_or(Error::UnresolvedSpin(index))?;
    let omega = config.transition(index, spin).frequency;

    let t_with = transmission_intensity(omega, config)?;
    let without = config.with_emitter_active(index, false)?;
    let t_without = transmission_intensity(omega, &without)?;
    Ok(1.0 - t_with / t_without)
}

/// CSV export: header `omega_GHz,re_t,im_t,T`, one row per grid point,
/// full round-trip double formatting. Mixture spectra have no coherent
/// amplitude and write NaN in the `re_t`/`im_t` columns.
pub fn to_csv(spectrum: &TransmissionSpectrum) -> String {
    let mut out = String::with_capacity(32 * spectrum.probe_grid.len() + 24);
    out.push_str("omega_GHz,re_t,im_t,T\n");
    for (k, &omega) in spectrum.probe_grid.iter().enumerate() {
        let (re, im) = match &spectrum.amplitude {
            Some(amp) => (amp[k].re, amp[k].im),
            None => (f64::NAN, f64::NAN),
        };
        out.push_str(&format!(
            "{},{},{},{}\n",
            omega, re, im, spectrum.intensity[k]
        ));
    }
    out
}

/// Evenly spaced inclusive grid from `start` to `stop`.
pub fn linspace(start: f64, stop: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![start],
        _ => {
            let step = (stop - start) / (points - 1) as f64;
            (0..points).map(|k| start + k as f64 * step).collect()
        }
    }
}
