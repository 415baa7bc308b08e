//! Cavity-mediated emitter–emitter interactions.
//!
//! Adiabatic elimination of the cavity mode turns the driven system
//! into an N×N non-Hermitian matrix over the contributing transitions.
//! Its complex eigenvalues are the collective modes: real parts are
//! mode frequencies, −2× imaginary parts their FWHM linewidths. For two
//! resonant emitters these are the superradiant |S⟩ and subradiant |D⟩
//! states; sweeping a magnetic field through the two-transition
//! resonance maps out the (avoided) crossing.

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Error;
use crate::linalg;
use crate::model::{SpinPrep, Transition, ValidatedConfig};
use crate::spectrum;

/// Two modes whose cavity-coupling weights differ by less than this
/// relative margin are labeled `Mixed` rather than bright/dark.
const LABEL_MARGIN: f64 = 0.10;

/// Cavity-photon exchange rate between two transitions at common
/// detuning `delta`, with the finite-κ correction:
///
/// J = g₁ g₂ Δ / (Δ² + κ²/4)
///
/// which reduces to g₁g₂/Δ for Δ ≫ κ. The sign follows sign(Δ).
pub fn exchange_rate(g1: f64, g2: f64, delta: f64, kappa: f64) -> Result<f64, Error> {
    if delta == 0.0 {
        return Err(Error::ZeroDetuning);
    }
    Ok(g1 * g2 * delta / (delta * delta + 0.25 * kappa * kappa))
}

/// g²-weighted mean of the contributing transition frequencies, the
/// default reference for the cavity elimination. Falls back to the
/// plain mean when every coupling is zero.
pub fn reference_frequency(transitions: &[Transition]) -> Result<f64, Error> {
    if transitions.is_empty() {
        return Err(Error::NoTransitions);
    }
    let weight: f64 = transitions.iter().map(|t| t.g * t.g).sum();
    if weight > 0.0 {
        Ok(transitions
            .iter()
            .map(|t| t.g * t.g * t.frequency)
            .sum::<f64>()
            / weight)
    } else {
        Ok(transitions.iter().map(|t| t.frequency).sum::<f64>() / transitions.len() as f64)
    }
}

/// The adiabatically eliminated system: matrix plus the transitions it
/// is written over.
#[derive(Debug, Clone)]
pub struct EffectiveModel {
    /// Frequency the cavity was eliminated at, GHz.
    pub reference: f64,
    /// Cavity detuning from the reference, Δ_r = ω_c − reference.
    pub delta_r: f64,
    pub transitions: Vec<Transition>,
    /// M_jk = (ω_j − iγ_j/2) δ_jk − g_j g_k (Δ_r + iκ/2)/(Δ_r² + κ²/4).
    pub matrix: linalg::Matrix,
}

/// Build the effective matrix for the config's contributing transitions
/// with the cavity eliminated at `reference`.
///
/// Diagonal imaginary parts carry the single-emitter Purcell
/// broadening; off-diagonal elements carry both the coherent exchange J
/// and the collective dissipation.
pub fn effective_matrix(config: &ValidatedConfig, reference: f64) -> Result<EffectiveModel, Error> {
    let transitions = config.resolved_transitions()?;
    if transitions.is_empty() {
        return Err(Error::NoTransitions);
    }
    let delta_r = config.cavity.omega_c - reference;
    let kappa = config.cavity.kappa;
    let pole = C64::new(delta_r, 0.5 * kappa) / (delta_r * delta_r + 0.25 * kappa * kappa);

    let n = transitions.len();
    let mut matrix = vec![vec![C64::ZERO; n]; n];
    for (j, tj) in transitions.iter().enumerate() {
        for (k, tk) in transitions.iter().enumerate() {
            matrix[j][k] = -tj.g * tk.g * pole;
        }
        matrix[j][j] += C64::new(tj.frequency, -0.5 * tj.gamma);
    }
    Ok(EffectiveModel {
        reference,
        delta_r,
        transitions,
        matrix,
    })
}

/// Convenience: effective matrix at the default g²-weighted reference.
pub fn effective_matrix_auto(config: &ValidatedConfig) -> Result<EffectiveModel, Error> {
    let transitions = config.resolved_transitions()?;
    let reference = reference_frequency(&transitions)?;
    effective_matrix(config, reference)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeLabel {
    Superradiant,
    Subradiant,
    Mixed,
}

impl std::fmt::Display for ModeLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModeLabel::Superradiant => write!(f, "superradiant"),
            ModeLabel::Subradiant => write!(f, "subradiant"),
            ModeLabel::Mixed => write!(f, "mixed"),
        }
    }
}

/// One collective mode of the effective matrix.
#[derive(Debug, Clone)]
pub struct Mode {
    pub eigenvalue: C64,
    /// Unit-norm amplitude vector over the contributing transitions.
    pub eigenvector: Vec<C64>,
    /// Cavity-coupling weight |Σ_j g_j v_j|².
    pub cavity_weight: f64,
    pub label: ModeLabel,
}

impl Mode {
    /// Mode frequency, GHz.
    pub fn frequency(&self) -> f64 {
        self.eigenvalue.re
    }

    /// Mode FWHM linewidth, GHz.
    pub fn fwhm(&self) -> f64 {
        -2.0 * self.eigenvalue.im
    }
}

/// Collective modes sorted by frequency.
#[derive(Debug, Clone)]
pub struct CollectiveModes {
    pub modes: Vec<Mode>,
}

impl CollectiveModes {
    pub fn by_label(&self, label: ModeLabel) -> Option<&Mode> {
        self.modes.iter().find(|m| m.label == label)
    }
}

fn weights_within_margin(a: f64, b: f64) -> bool {
    (a - b).abs() <= LABEL_MARGIN * a.max(b)
}

/// Full complex eigendecomposition of the effective matrix, modes
/// sorted by real part. The maximal-coupling mode is superradiant and
/// the minimal one subradiant, unless another mode's weight sits within
/// 10%; then the label degrades to `Mixed` so bright/dark assignments
/// stay stable far from the crossing.
pub fn collective_modes(model: &EffectiveModel) -> Result<CollectiveModes, Error> {
    if model.transitions.is_empty() {
        return Err(Error::NoTransitions);
    }
    let eig = linalg::eigendecompose(&model.matrix)?;

    let weights: Vec<f64> = eig
        .vectors
        .iter()
        .map(|v| {
            model
                .transitions
                .iter()
                .zip(v)
                .map(|(t, vi)| t.g * vi)
                .sum::<C64>()
                .norm_sqr()
        })
        .collect();
    let w_max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w_min = weights.iter().cloned().fold(f64::INFINITY, f64::min);

    let modes = eig
        .values
        .into_iter()
        .zip(eig.vectors)
        .enumerate()
        .map(|(i, (eigenvalue, eigenvector))| Mode {
            eigenvalue,
            eigenvector,
            cavity_weight: weights[i],
            label: assign_label(i, &weights, w_max, w_min),
        })
        .collect();

    Ok(CollectiveModes { modes })
}

fn assign_label(index: usize, weights: &[f64], w_max: f64, w_min: f64) -> ModeLabel {
    if weights.len() == 1 {
        return ModeLabel::Superradiant;
    }
    let w = weights[index];
    let near_other = weights
        .iter()
        .enumerate()
        .any(|(j, &other)| j != index && weights_within_margin(w, other));
    if near_other {
        ModeLabel::Mixed
    } else if w == w_max {
        ModeLabel::Superradiant
    } else if w == w_min {
        ModeLabel::Subradiant
    } else {
        ModeLabel::Mixed
    }
}

/// Per-emitter assignment for a field sweep. `Uncoupled` models an
/// emitter prepared in the spin state whose transition lies outside the
/// probed window: it contributes nothing at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepSpin {
    Up,
    Down,
    Uncoupled,
}

/// One tracked mode branch across the field sweep.
#[derive(Debug, Clone)]
pub struct Branch {
    pub eigenvalues: Vec<C64>,
    pub cavity_weights: Vec<f64>,
    pub labels: Vec<ModeLabel>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GapReport {
    /// Minimum real-part separation between branches, GHz.
    pub gap: f64,
    /// Field at which the minimum occurs, kG.
    pub b_field: f64,
}

/// Stacked transmission map plus tracked mode branches versus field.
#[derive(Debug, Clone)]
pub struct FieldSweep {
    pub b_values: Vec<f64>,
    pub probe_grid: Vec<f64>,
    /// `intensity[i][k]`: transmission at `b_values[i]`, `probe_grid[k]`.
    pub intensity: Vec<Vec<f64>>,
    pub branches: Vec<Branch>,
    /// None when fewer than two branches exist.
    pub min_gap: Option<GapReport>,
}

/// Sweep the field magnitude: at each B, recompute the transition
/// frequencies, the transmission spectrum and the collective modes.
/// Branches are tracked across B by eigenvector overlap, not by
/// sorting, so they stay continuous through crossings.
pub fn field_sweep(
    config: &ValidatedConfig,
    b_values: &[f64],
    spin_prep: &[SweepSpin],
    probe_grid: &[f64],
) -> Result<FieldSweep, Error> {
    if b_values.is_empty() {
        return Err(Error::Sweep("b_values must not be empty".into()));
    }
    if spin_prep.len() != config.emitters.len() {
        return Err(Error::Sweep(format!(
            "spin_prep has {} entries for {} emitters",
            spin_prep.len(),
            config.emitters.len()
        )));
    }

    // Resolve the preparation once; the per-B configs reuse it.
    let mut prepared = config.config().clone();
    for (e, prep) in prepared.emitters.iter_mut().zip(spin_prep) {
        match prep {
            SweepSpin::Up => e.prepared_spin = SpinPrep::Up,
            SweepSpin::Down => e.prepared_spin = SpinPrep::Down,
            SweepSpin::Uncoupled => e.active = false,
        }
    }
    let prepared = prepared.validate()?;

    let per_b: Vec<(Vec<f64>, CollectiveModes)> = b_values
        .par_iter()
        .map(|&b| {
            let at_b = prepared.with_b_field(b)?;
            let spec = spectrum::transmission_spectrum(probe_grid, &at_b)?;
            let modes = collective_modes(&effective_matrix_auto(&at_b)?)?;
            Ok((spec.intensity, modes))
        })
        .collect::<Result<_, Error>>()?;

    let n_modes = per_b[0].1.modes.len();
    let mut intensity = Vec::with_capacity(b_values.len());
    let mut branches: Vec<Branch> = (0..n_modes)
        .map(|_| Branch {
            eigenvalues: Vec::with_capacity(b_values.len()),
            cavity_weights: Vec::with_capacity(b_values.len()),
            labels: Vec::with_capacity(b_values.len()),
        })
        .collect();

    let mut previous_vectors: Vec<Vec<C64>> = Vec::new();
    for (row, modes) in per_b {
        intensity.push(row);
        let order = if previous_vectors.is_empty() {
            (0..n_modes).collect::<Vec<_>>()
        } else {
            match_by_overlap(&previous_vectors, &modes.modes)
        };
        for (branch, &mode_index) in branches.iter_mut().zip(&order) {
            let m = &modes.modes[mode_index];
            branch.eigenvalues.push(m.eigenvalue);
            branch.cavity_weights.push(m.cavity_weight);
            branch.labels.push(m.label);
        }
        previous_vectors = order
            .iter()
            .map(|&i| modes.modes[i].eigenvector.clone())
            .collect();
    }

    let min_gap = if n_modes >= 2 {
        let mut best: Option<GapReport> = None;
        for (i, &b) in b_values.iter().enumerate() {
            for a in 0..n_modes {
                for c in a + 1..n_modes {
                    let gap = (branches[a].eigenvalues[i].re - branches[c].eigenvalues[i].re).abs();
                    if best.map_or(true, |g| gap < g.gap) {
                        best = Some(GapReport { gap, b_field: b });
                    }
                }
            }
        }
        best
    } else {
        None
    };

    Ok(FieldSweep {
        b_values: b_values.to_vec(),
        probe_grid: probe_grid.to_vec(),
        intensity,
        branches,
        min_gap,
    })
}

/// Greedy maximum-overlap assignment: branch i follows the mode whose
/// eigenvector has the largest |⟨prev_i, v⟩|.
fn match_by_overlap(previous: &[Vec<C64>], modes: &[Mode]) -> Vec<usize> {
    let n = previous.len();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
    for (i, prev) in previous.iter().enumerate() {
        for (j, mode) in modes.iter().enumerate() {
            let overlap: C64 = prev
                .iter()
                .zip(&mode.eigenvector)
                .map(|(a, b)| a.conj() * b)
                .sum();
            pairs.push((overlap.norm(), i, j));
        }
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut assignment = vec![usize::MAX; n];
    let mut taken = vec![false; n];
    for (_, i, j) in pairs {
        if assignment[i] == usize::MAX && !taken[j] {
            assignment[i] = j;
            taken[j] = true;
        }
    }
    assignment
}

/// Minimum real-part gap between branches drawn from different sweeps,
/// evaluated pointwise over a shared B grid. Used to overlay
/// single-emitter sweeps into a composite non-interacting map.
pub fn composite_min_gap(sweeps: &[&FieldSweep]) -> Result<GapReport, Error> {
    let b_values = &sweeps
        .first()
        .ok_or_else(|| Error::Sweep("no sweeps given".into()))?
        .b_values;
    for s in sweeps {
        if &s.b_values != b_values {
            return Err(Error::Sweep("sweeps use different B grids".into()));
        }
    }
    let mut best: Option<GapReport> = None;
    for (i, &b) in b_values.iter().enumerate() {
        let frequencies: Vec<f64> = sweeps
            .iter()
            .flat_map(|s| s.branches.iter().map(move |br| br.eigenvalues[i].re))
            .collect();
        for a in 0..frequencies.len() {
            for c in a + 1..frequencies.len() {
                let gap = (frequencies[a] - frequencies[c]).abs();
                if best.map_or(true, |g| gap < g.gap) {
                    best = Some(GapReport { gap, b_field: b });
                }
            }
        }
    }
    best.ok_or_else(|| Error::Sweep("fewer than two branches across the sweeps".into()))
}

/// Long-format CSV export of the sweep intensity map: `B_kG,omega_GHz,T`.
pub fn sweep_to_csv(sweep: &FieldSweep) -> String {
    let mut out = String::with_capacity(24 * sweep.b_values.len() * sweep.probe_grid.len());
    out.push_str("B_kG,omega_GHz,T\n");
    for (i, &b) in sweep.b_values.iter().enumerate() {
        for (k, &w) in sweep.probe_grid.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", b, w, sweep.intensity[i][k]));
        }
    }
    out
}

#[derive(Serialize)]
struct BranchPoint {
    #[serde(rename = "b_kG")]
    b: f64,
    #[serde(rename = "omega_GHz")]
    omega: f64,
    #[serde(rename = "fwhm_GHz")]
    fwhm: f64,
    cavity_weight: f64,
    label: ModeLabel,
}

#[derive(Serialize)]
struct SweepSummary {
    #[serde(rename = "crossing_field_kG")]
    crossing_field: Option<f64>,
    #[serde(rename = "min_gap_GHz")]
    min_gap: Option<f64>,
    branches: Vec<Vec<BranchPoint>>,
}

/// JSON summary of a sweep: crossing field, minimum gap and the branch
/// tables.
pub fn sweep_summary_json(sweep: &FieldSweep) -> String {
    let summary = SweepSummary {
        crossing_field: sweep.min_gap.map(|g| g.b_field),
        min_gap: sweep.min_gap.map(|g| g.gap),
        branches: sweep
            .branches
            .iter()
            .map(|branch| {
                sweep
                    .b_values
                    .iter()
                    .enumerate()
                    .map(|(i, &b)| BranchPoint {
                        b,
                        omega: branch.eigenvalues[i].re,
                        fwhm: -2.0 * branch.eigenvalues[i].im,
                        cavity_weight: branch.cavity_weights[i],
                        label: branch.labels[i],
                    })
                    .collect()
            })
            .collect(),
    };
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    json
}
