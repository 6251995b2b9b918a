//! Exact two-qubit polarization model.
//!
//! Computational basis order is `HH, HV, VH, VV`, with Alice's photon first.
//! Every measurement is a real-plane rotation: outcome 0 projects onto
//! `cos θ·H + sin θ·V` and outcome 1 onto `sin θ·H − cos θ·V`.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, FRAC_PI_4, FRAC_PI_8};

use nalgebra::{Matrix4, Vector4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const STATE_TOL: f64 = 1e-12;
const MIN_NORM: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantumError {
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("fidelity reference state must be pure")]
    ReferenceNotPure,
    #[error("outcome table is not normalized (sum = {0})")]
    Unnormalized(f64),
    #[error("noise parameter {name} = {value} outside [0, 1]")]
    NoiseOutOfRange { name: &'static str, value: f64 },
    #[error("calibration target {0} is unreachable with this noise model")]
    Unreachable(f64),
}

/// State of the photon pair, either a ket or a density operator.
#[derive(Debug, Clone, PartialEq)]
pub enum TwoQubitState {
    Pure(Vector4<Complex64>),
    Mixed(Matrix4<Complex64>),
}

/// Which state to prepare.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateKind {
    /// `(|HV⟩ + |VH⟩)/√2`
    ChshMaximal,
    /// The non-maximally entangled state with Hardy-type zeros.
    MdlNonmaximal,
}

pub fn make_state(kind: StateKind) -> TwoQubitState {
    let zero = Complex64::new(0.0, 0.0);
    let re = |v: f64| Complex64::new(v, 0.0);
    match kind {
        StateKind::ChshMaximal => TwoQubitState::Pure(Vector4::new(
            zero,
            re(FRAC_1_SQRT_2),
            re(FRAC_1_SQRT_2),
            zero,
        )),
        StateKind::MdlNonmaximal => {
            let s5 = 5f64.sqrt();
            let s3 = 3f64.sqrt();
            TwoQubitState::Pure(Vector4::new(
                zero,
                re((s5 - 1.0) / 2.0 / s3),
                re((s5 + 1.0) / 2.0 / s3),
                zero,
            ))
        }
    }
}

/// Measurement angle of the Hardy construction, `arccos √(1/2 + 1/√5)`.
pub fn mdl_angle() -> f64 {
    (0.5 + 1.0 / 5f64.sqrt()).sqrt().acos()
}

impl TwoQubitState {
    /// Builds a pure state from arbitrary amplitudes, normalizing them.
    pub fn from_amplitudes(amps: [Complex64; 4]) -> Result<Self, QuantumError> {
        let v = Vector4::from(amps);
        let norm = v.norm();
        if !norm.is_finite() || norm < MIN_NORM {
            return Err(QuantumError::InvalidState(format!(
                "amplitude norm {norm:e} is below {MIN_NORM:e}"
            )));
        }
        Ok(TwoQubitState::Pure(v.unscale(norm)))
    }

    /// Builds a mixed state after checking trace, hermiticity and positivity.
    pub fn from_density(rho: Matrix4<Complex64>) -> Result<Self, QuantumError> {
        let tr = rho.trace();
        if (tr.re - 1.0).abs() > STATE_TOL || tr.im.abs() > STATE_TOL {
            return Err(QuantumError::InvalidState(format!("trace {tr} != 1")));
        }
        let skew = max_abs(&(rho - rho.adjoint()));
        if skew > STATE_TOL {
            return Err(QuantumError::InvalidState(format!(
                "not Hermitian (max deviation {skew:e})"
            )));
        }
        let min_eig = rho
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -STATE_TOL {
            return Err(QuantumError::InvalidState(format!(
                "negative eigenvalue {min_eig:e}"
            )));
        }
        Ok(TwoQubitState::Mixed(rho))
    }

    pub fn density(&self) -> Matrix4<Complex64> {
        match self {
            TwoQubitState::Pure(v) => v * v.adjoint(),
            TwoQubitState::Mixed(m) => *m,
        }
    }

    pub fn is_pure(&self) -> bool {
        matches!(self, TwoQubitState::Pure(_))
    }
}

/// Largest entry modulus.
pub fn max_abs(m: &Matrix4<Complex64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Projective polarization measurement at angle `θ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementBasis {
    pub angle: f64,
}

impl MeasurementBasis {
    pub const fn new(angle: f64) -> Self {
        MeasurementBasis { angle }
    }

    /// H/V basis.
    pub const fn z() -> Self {
        MeasurementBasis::new(0.0)
    }

    /// Diagonal/anti-diagonal basis.
    pub const fn x() -> Self {
        MeasurementBasis::new(FRAC_PI_4)
    }

    pub fn outcome_vector(&self, outcome: u8) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        if outcome == 0 {
            [c, s]
        } else {
            [s, -c]
        }
    }
}

/// Measurement settings for both parties, indexed by input bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSettings {
    pub alice: [MeasurementBasis; 2],
    pub bob: [MeasurementBasis; 2],
}

impl BasisSettings {
    /// `A0 = Z`, `A1 = X`, `B0 = (X−Z)/√2`, `B1 = (X+Z)/√2` as rotation angles.
    pub fn chsh() -> Self {
        BasisSettings {
            alice: [MeasurementBasis::z(), MeasurementBasis::x()],
            bob: [
                MeasurementBasis::new(3.0 * FRAC_PI_8),
                MeasurementBasis::new(FRAC_PI_8),
            ],
        }
    }

    /// `A0(θ)`, `A1 = A0(θ−π/4)`, `B0 = A0(θ+π/2)`, `B1 = A1(θ+π/2)`.
    pub fn mdl() -> Self {
        BasisSettings::mdl_at(mdl_angle())
    }

    pub fn mdl_at(theta: f64) -> Self {
        BasisSettings {
            alice: [
                MeasurementBasis::new(theta),
                MeasurementBasis::new(theta - FRAC_PI_4),
            ],
            bob: [
                MeasurementBasis::new(theta + FRAC_PI_2),
                MeasurementBasis::new(theta - FRAC_PI_4 + FRAC_PI_2),
            ],
        }
    }

    pub fn for_kind(kind: StateKind) -> Self {
        match kind {
            StateKind::ChshMaximal => BasisSettings::chsh(),
            StateKind::MdlNonmaximal => BasisSettings::mdl(),
        }
    }
}

/// Conditional outcome distribution `P(ab|xy)` for one setting pair, indexed `2a + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTable(pub [f64; 4]);

impl OutcomeTable {
    pub fn get(&self, a: u8, b: u8) -> f64 {
        self.0[(2 * a + b) as usize]
    }

    pub fn marginal_a(&self, a: u8) -> f64 {
        self.get(a, 0) + self.get(a, 1)
    }

    pub fn marginal_b(&self, b: u8) -> f64 {
        self.get(0, b) + self.get(1, b)
    }
}

fn product_vector(va: [f64; 2], vb: [f64; 2]) -> Vector4<Complex64> {
    let re = |v: f64| Complex64::new(v, 0.0);
    Vector4::new(
        re(va[0] * vb[0]),
        re(va[0] * vb[1]),
        re(va[1] * vb[0]),
        re(va[1] * vb[1]),
    )
}

/// Born-rule outcome probabilities for one pair of bases.
pub fn born_probs(
    state: &TwoQubitState,
    basis_a: &MeasurementBasis,
    basis_b: &MeasurementBasis,
) -> OutcomeTable {
    let mut p = [0.0; 4];
    for a in 0..2u8 {
        for b in 0..2u8 {
            let w = product_vector(basis_a.outcome_vector(a), basis_b.outcome_vector(b));
            let value = match state {
                TwoQubitState::Pure(psi) => w.dotc(psi).norm_sqr(),
                TwoQubitState::Mixed(rho) => (w.adjoint() * rho * w)[(0, 0)].re,
            };
            // Round-off can leave exact zeros at -1e-17.
            p[(2 * a + b) as usize] = value.max(0.0);
        }
    }
    OutcomeTable(p)
}

/// All four conditional tables, indexed `2x + y`.
pub fn conditional_tables(state: &TwoQubitState, settings: &BasisSettings) -> [OutcomeTable; 4] {
    let mut out = [OutcomeTable([0.0; 4]); 4];
    for x in 0..2 {
        for y in 0..2 {
            out[2 * x + y] = born_probs(state, &settings.alice[x], &settings.bob[y]);
        }
    }
    out
}

/// `E = P(00) + P(11) − P(01) − P(10)`.
pub fn correlator(table: &OutcomeTable) -> Result<f64, QuantumError> {
    let sum: f64 = table.0.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || table.0.iter().any(|&p| p < -1e-12) {
        return Err(QuantumError::Unnormalized(sum));
    }
    Ok(table.0[0] + table.0[3] - table.0[1] - table.0[2])
}

/// Noise applied to the prepared state, plus per-arm detection efficiency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub white: f64,
    pub dephasing: f64,
    pub eta_a: f64,
    pub eta_b: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::NONE
    }
}

impl NoiseModel {
    pub const NONE: NoiseModel = NoiseModel {
        white: 0.0,
        dephasing: 0.0,
        eta_a: 1.0,
        eta_b: 1.0,
    };

    pub fn new(white: f64, dephasing: f64) -> Result<Self, QuantumError> {
        NoiseModel {
            white,
            dephasing,
            ..NoiseModel::NONE
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self, QuantumError> {
        for (name, value) in [
            ("white", self.white),
            ("dephasing", self.dephasing),
            ("eta_a", self.eta_a),
            ("eta_b", self.eta_b),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(QuantumError::NoiseOutOfRange { name, value });
            }
        }
        Ok(self)
    }
}

/// `ρ' = (1−p_w)·D(ρ) + p_w·I/4`, where `D` scales every off-diagonal
/// element in the H/V product basis by `1−p_d`.
pub fn apply_noise(state: &TwoQubitState, noise: &NoiseModel) -> TwoQubitState {
    let rho = state.density();
    let keep = Complex64::new(1.0 - noise.dephasing, 0.0);
    let mut out = Matrix4::<Complex64>::zeros();
    for i in 0..4 {
        for j in 0..4 {
            let dephased = if i == j { rho[(i, j)] } else { rho[(i, j)] * keep };
            out[(i, j)] = dephased * (1.0 - noise.white);
        }
        out[(i, i)] += Complex64::new(noise.white / 4.0, 0.0);
    }
    TwoQubitState::Mixed(out)
}

/// `⟨ideal|ρ|ideal⟩`.
pub fn fidelity(state: &TwoQubitState, ideal: &TwoQubitState) -> Result<f64, QuantumError> {
    let TwoQubitState::Pure(reference) = ideal else {
        return Err(QuantumError::ReferenceNotPure);
    };
    let f = match state {
        TwoQubitState::Pure(psi) => reference.dotc(psi).norm_sqr(),
        TwoQubitState::Mixed(rho) => (reference.adjoint() * rho * reference)[(0, 0)].re,
    };
    Ok(f.clamp(0.0, 1.0))
}

/// `|E|` with both photons measured in the same basis.
pub fn visibility(state: &TwoQubitState, basis: MeasurementBasis) -> f64 {
    correlator(&born_probs(state, &basis, &basis))
        .expect("Born tables are normalized")
        .abs()
}

/// Solves `f(p) = target` on `[0, 1]` for `f` monotone in `p`.
fn bisect(target: f64, f: impl Fn(f64) -> f64) -> Result<f64, QuantumError> {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let (f_lo, f_hi) = (f(lo), f(hi));
    if (target - f_lo) * (target - f_hi) > 0.0 {
        return Err(QuantumError::Unreachable(target));
    }
    let decreasing = f_hi < f_lo;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let above = f(mid) > target;
        if above == decreasing {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Fits white noise and dephasing so the H/V and D/A visibilities of
/// `state` hit the targets: `p_d` from the D/A visibility at fixed `p_w`,
/// then `p_w` from the H/V visibility, twice over.
pub fn calibrate_visibilities(
    state: &TwoQubitState,
    target_hv: f64,
    target_da: f64,
) -> Result<NoiseModel, QuantumError> {
    let mut noise = NoiseModel::NONE;
    for _ in 0..2 {
        noise.dephasing = bisect(target_da, |pd| {
            let trial = NoiseModel {
                dephasing: pd,
                ..noise
            };
            visibility(&apply_noise(state, &trial), MeasurementBasis::x())
        })?;
        noise.white = bisect(target_hv, |pw| {
            let trial = NoiseModel { white: pw, ..noise };
            visibility(&apply_noise(state, &trial), MeasurementBasis::z())
        })?;
    }
    Ok(noise)
}

/// Scales a noise model's `(p_w, p_d)` direction by a common factor so the
/// fidelity of the noisy `ideal` hits `target`.
pub fn calibrate_fidelity(
    ideal: &TwoQubitState,
    direction: &NoiseModel,
    target: f64,
) -> Result<NoiseModel, QuantumError> {
    let top = direction.white.max(direction.dephasing);
    if top <= 0.0 {
        return Err(QuantumError::Unreachable(target));
    }
    let scaled = |k: f64| NoiseModel {
        white: direction.white / top * k,
        dephasing: direction.dephasing / top * k,
        ..*direction
    };
    let k = bisect(target, |k| {
        fidelity(&apply_noise(ideal, &scaled(k)), ideal).expect("ideal is pure")
    })?;
    Ok(scaled(k))
}

/// Visibilities reported for the maximally entangled source.
pub const CHSH_VISIBILITY_HV: f64 = 0.992;
pub const CHSH_VISIBILITY_DA: f64 = 0.980;
/// Tomographic fidelity reported for the non-maximally entangled source.
pub const MDL_FIDELITY: f64 = 0.987;

/// Noise fitted to the reported visibilities of the maximally entangled source.
pub fn chsh_calibrated_noise() -> NoiseModel {
    calibrate_visibilities(
        &make_state(StateKind::ChshMaximal),
        CHSH_VISIBILITY_HV,
        CHSH_VISIBILITY_DA,
    )
    .expect("reported visibilities are reachable")
}

/// Noise for the Hardy-state source: the white/dephasing mix of
/// [`chsh_calibrated_noise`], rescaled to the reported fidelity.
pub fn mdl_calibrated_noise() -> NoiseModel {
    calibrate_fidelity(
        &make_state(StateKind::MdlNonmaximal),
        &chsh_calibrated_noise(),
        MDL_FIDELITY,
    )
    .expect("reported fidelity is reachable")
}

pub fn calibrated_noise(kind: StateKind) -> NoiseModel {
    match kind {
        StateKind::ChshMaximal => chsh_calibrated_noise(),
        StateKind::MdlNonmaximal => mdl_calibrated_noise(),
    }
}
