//! Hybrid Hamiltonians `H(q,p) = H_C(q,p)·1 + H_I(q)` for a classical degree
//! of freedom coupled to a two-level system, the benchmark instances, and their
//! adiabatic spectral data.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2x2 complex matrix, row major.
pub type Mat2 = [[Complex64; 2]; 2];

/// Coefficients of `h0·1 + h1·σx + h2·σy + h3·σz`.
///
/// Every Hermitian 2x2 matrix has exactly one such representation, so this
/// type doubles as the storage for Hermitian operators throughout the crate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PauliVector {
    pub h0: f64,
    pub h1: f64,
    pub h2: f64,
    pub h3: f64,
}

impl PauliVector {
    pub const ZERO: PauliVector = PauliVector { h0: 0.0, h1: 0.0, h2: 0.0, h3: 0.0 };

    pub const fn new(h0: f64, h1: f64, h2: f64, h3: f64) -> Self {
        Self { h0, h1, h2, h3 }
    }

    pub const fn identity(h0: f64) -> Self {
        Self { h0, h1: 0.0, h2: 0.0, h3: 0.0 }
    }

    pub fn from_parts(h0: f64, v: [f64; 3]) -> Self {
        Self { h0, h1: v[0], h2: v[1], h3: v[2] }
    }

    /// The traceless part `(h1, h2, h3)`.
    pub fn vector(&self) -> [f64; 3] {
        [self.h1, self.h2, self.h3]
    }

    pub fn vector_norm(&self) -> f64 {
        (self.h1 * self.h1 + self.h2 * self.h2 + self.h3 * self.h3).sqrt()
    }

    pub fn matrix(&self) -> Mat2 {
        let c = Complex64::new;
        [
            [c(self.h0 + self.h3, 0.0), c(self.h1, -self.h2)],
            [c(self.h1, self.h2), c(self.h0 - self.h3, 0.0)],
        ]
    }

    /// Pauli coefficients of the Hermitian part of `m`.
    pub fn from_matrix(m: &Mat2) -> Self {
        let h0 = 0.5 * (m[0][0].re + m[1][1].re);
        let h3 = 0.5 * (m[0][0].re - m[1][1].re);
        // off-diagonal of the Hermitian part: (m01 + conj(m10)) / 2 = h1 - i h2
        let off = 0.5 * (m[0][1] + m[1][0].conj());
        Self { h0, h1: off.re, h2: -off.im, h3 }
    }

    /// `Tr(self · other)`, the real pairing of two Hermitian matrices.
    pub fn trace_product(&self, other: &PauliVector) -> f64 {
        2.0 * (self.h0 * other.h0 + self.h1 * other.h1 + self.h2 * other.h2 + self.h3 * other.h3)
    }

    pub fn trace(&self) -> f64 {
        2.0 * self.h0
    }

    pub fn is_finite(&self) -> bool {
        self.h0.is_finite() && self.h1.is_finite() && self.h2.is_finite() && self.h3.is_finite()
    }

    pub fn max_abs(&self) -> f64 {
        self.h0.abs().max(self.h1.abs()).max(self.h2.abs()).max(self.h3.abs())
    }
}

impl Add for PauliVector {
    type Output = PauliVector;
    fn add(self, o: PauliVector) -> PauliVector {
        PauliVector::new(self.h0 + o.h0, self.h1 + o.h1, self.h2 + o.h2, self.h3 + o.h3)
    }
}

impl AddAssign for PauliVector {
    fn add_assign(&mut self, o: PauliVector) {
        *self = *self + o;
    }
}

impl Sub for PauliVector {
    type Output = PauliVector;
    fn sub(self, o: PauliVector) -> PauliVector {
        PauliVector::new(self.h0 - o.h0, self.h1 - o.h1, self.h2 - o.h2, self.h3 - o.h3)
    }
}

impl Neg for PauliVector {
    type Output = PauliVector;
    fn neg(self) -> PauliVector {
        PauliVector::new(-self.h0, -self.h1, -self.h2, -self.h3)
    }
}

impl Mul<f64> for PauliVector {
    type Output = PauliVector;
    fn mul(self, s: f64) -> PauliVector {
        PauliVector::new(self.h0 * s, self.h1 * s, self.h2 * s, self.h3 * s)
    }
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// q-dependent scalar potential `U(q)` entering `H_C = p²/(2M) + U(q)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScalarPotential {
    Zero,
    /// `M ω² q² / 2`
    Harmonic { omega: f64 },
}

/// Classical part of the hybrid Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ClassicalPart {
    /// `H_C = 0`. Only useful for tests of purely quantum dynamics.
    Absent,
    /// `H_C = p²/(2M) + U(q)`.
    Standard(ScalarPotential),
}

/// Closure-backed interaction for user-defined models. The closure returns
/// the interaction and its q-derivative.
#[derive(Clone)]
pub struct CustomInteraction {
    pub name: String,
    pub eval: Arc<dyn Fn(f64) -> (PauliVector, PauliVector) + Send + Sync>,
}

impl fmt::Debug for CustomInteraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomInteraction").field("name", &self.name).finish()
    }
}

/// The q-dependent interaction `H_I(q)` in Pauli form.
#[derive(Debug, Clone)]
pub enum Interaction {
    /// Single avoided crossing.
    TullySingle { a: f64, b: f64, c: f64, d: f64 },
    /// Dual avoided crossing.
    TullyDual { a: f64, b: f64, c: f64, d: f64, e0: f64 },
    /// Extended coupling with reflection.
    TullyExtended { a: f64, b: f64, c: f64 },
    /// `γ q σz + C₀ σx`
    Rabi { gamma: f64, c0: f64 },
    Constant(PauliVector),
    Custom(CustomInteraction),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TullyVariant {
    I,
    II,
    III,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RabiRegime {
    Ultrastrong,
    DeepStrong,
}

/// Names accepted by [`HybridHamiltonian::by_name`].
pub const MODEL_NAMES: [&str; 5] = ["tully1", "tully2", "tully3", "rabi_us", "rabi_ds"];

#[derive(Debug, Clone)]
pub struct HybridHamiltonian {
    pub name: String,
    pub mass: f64,
    pub classical: ClassicalPart,
    pub interaction: Interaction,
}

pub fn make_tully(variant: TullyVariant) -> HybridHamiltonian {
    let (name, interaction) = match variant {
        TullyVariant::I => ("tully1", Interaction::TullySingle { a: 0.01, b: 1.6, c: 0.005, d: 1.0 }),
        TullyVariant::II => (
            "tully2",
            Interaction::TullyDual { a: 0.05, b: 0.28, c: 0.015, d: 0.06, e0: 0.025 },
        ),
        TullyVariant::III => ("tully3", Interaction::TullyExtended { a: 0.0006, b: 0.1, c: 0.9 }),
    };
    HybridHamiltonian {
        name: name.to_string(),
        mass: 2000.0,
        classical: ClassicalPart::Standard(ScalarPotential::Zero),
        interaction,
    }
}

pub fn make_rabi(regime: RabiRegime) -> HybridHamiltonian {
    let (name, gamma, c0) = match regime {
        RabiRegime::Ultrastrong => ("rabi_us", 0.29, 0.35),
        RabiRegime::DeepStrong => ("rabi_ds", 1.85, 0.1),
    };
    HybridHamiltonian {
        name: name.to_string(),
        mass: 1.0,
        classical: ClassicalPart::Standard(ScalarPotential::Harmonic { omega: 1.0 }),
        interaction: Interaction::Rabi { gamma, c0 },
    }
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Interaction {
    /// Value and q-derivative.
    pub fn eval(&self, q: f64) -> (PauliVector, PauliVector) {
        match *self {
            Interaction::TullySingle { a, b, c, d } => {
                let g = (-d * q * q).exp();
                let e = (-b * q.abs()).exp();
                let h1 = c * g;
                let h3 = a * sgn(q) * (1.0 - e);
                let dh1 = -2.0 * d * q * c * g;
                let dh3 = a * b * e;
                (PauliVector::new(0.0, h1, 0.0, h3), PauliVector::new(0.0, dh1, 0.0, dh3))
            }
            Interaction::TullyDual { a, b, c, d, e0 } => {
                let g = (-b * q * q).exp();
                let h0 = e0 - a * g;
                let dh0 = 2.0 * a * b * q * g;
                let gc = (-d * q * q).exp();
                let h1 = c * gc;
                let dh1 = -2.0 * d * q * c * gc;
                (PauliVector::new(h0, h1, 0.0, -h0), PauliVector::new(dh0, dh1, 0.0, -dh0))
            }
            Interaction::TullyExtended { a, b, c } => {
                // the q <= 0 branch owns q = 0; both branches agree to first order there
                let (h1, dh1) = if q > 0.0 {
                    let e = (-c * q).exp();
                    (b * (2.0 - e), b * c * e)
                } else {
                    let e = (c * q).exp();
                    (b * e, b * c * e)
                };
                (PauliVector::new(0.0, h1, 0.0, a), PauliVector::new(0.0, dh1, 0.0, 0.0))
            }
            Interaction::Rabi { gamma, c0 } => {
                (PauliVector::new(0.0, c0, 0.0, gamma * q), PauliVector::new(0.0, 0.0, 0.0, gamma))
            }
            Interaction::Constant(v) => (v, PauliVector::ZERO),
            Interaction::Custom(ref c) => (c.eval)(q),
        }
    }

    fn parameters(&self) -> Vec<(&'static str, f64)> {
        match *self {
            Interaction::TullySingle { a, b, c, d } => vec![("a", a), ("b", b), ("c", c), ("d", d)],
            Interaction::TullyDual { a, b, c, d, e0 } => {
                vec![("a", a), ("b", b), ("c", c), ("d", d), ("e0", e0)]
            }
            Interaction::TullyExtended { a, b, c } => vec![("a", a), ("b", b), ("c", c)],
            Interaction::Rabi { gamma, c0 } => vec![("gamma", gamma), ("c0", c0)],
            Interaction::Constant(_) | Interaction::Custom(_) => vec![],
        }
    }

    fn set_parameter(&mut self, key: &str, value: f64) -> bool {
        let slot = match (self, key) {
            (Interaction::TullySingle { a, .. }, "a")
            | (Interaction::TullyDual { a, .. }, "a")
            | (Interaction::TullyExtended { a, .. }, "a") => a,
            (Interaction::TullySingle { b, .. }, "b")
            | (Interaction::TullyDual { b, .. }, "b")
            | (Interaction::TullyExtended { b, .. }, "b") => b,
            (Interaction::TullySingle { c, .. }, "c")
            | (Interaction::TullyDual { c, .. }, "c")
            | (Interaction::TullyExtended { c, .. }, "c") => c,
            (Interaction::TullySingle { d, .. }, "d") | (Interaction::TullyDual { d, .. }, "d") => d,
            (Interaction::TullyDual { e0, .. }, "e0") => e0,
            (Interaction::Rabi { gamma, .. }, "gamma") => gamma,
            (Interaction::Rabi { c0, .. }, "c0") => c0,
            _ => return false,
        };
        *slot = value;
        true
    }
}

impl HybridHamiltonian {
    /// Looks up a benchmark by name and applies parameter overrides
    /// (`mass`, `omega`, or any interaction constant such as `a`, `gamma`).
    pub fn by_name(name: &str, overrides: &BTreeMap<String, f64>) -> Result<Self> {
        let mut h = match name {
            "tully1" => make_tully(TullyVariant::I),
            "tully2" => make_tully(TullyVariant::II),
            "tully3" => make_tully(TullyVariant::III),
            "rabi_us" => make_rabi(RabiRegime::Ultrastrong),
            "rabi_ds" => make_rabi(RabiRegime::DeepStrong),
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown model '{other}' (expected one of {})",
                    MODEL_NAMES.join(", ")
                )))
            }
        };
        let mut unknown = Vec::new();
        for (key, &value) in overrides {
            let ok = match key.as_str() {
                "mass" => {
                    h.mass = value;
                    value > 0.0
                }
                "omega" => match &mut h.classical {
                    ClassicalPart::Standard(ScalarPotential::Harmonic { omega }) => {
                        *omega = value;
                        true
                    }
                    _ => false,
                },
                k => h.interaction.set_parameter(k, value),
            };
            if !ok {
                unknown.push(format!("model_params.{key}"));
            }
        }
        if !unknown.is_empty() {
            return Err(Error::ConfigValidation { keys: unknown });
        }
        Ok(h)
    }

    /// Named constants of the model, for manifests.
    pub fn parameters(&self) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> =
            self.interaction.parameters().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        out.insert("mass".into(), self.mass);
        if let ClassicalPart::Standard(ScalarPotential::Harmonic { omega }) = self.classical {
            out.insert("omega".into(), omega);
        }
        out
    }

    /// `U(q)` and `U'(q)`.
    pub fn scalar_potential(&self, q: f64) -> (f64, f64) {
        match self.classical {
            ClassicalPart::Absent | ClassicalPart::Standard(ScalarPotential::Zero) => (0.0, 0.0),
            ClassicalPart::Standard(ScalarPotential::Harmonic { omega }) => {
                let k = self.mass * omega * omega;
                (0.5 * k * q * q, k * q)
            }
        }
    }

    pub fn has_kinetic_term(&self) -> bool {
        matches!(self.classical, ClassicalPart::Standard(_))
    }

    /// Kinetic energy `p²/(2M)` (zero when the classical part is absent).
    pub fn kinetic(&self, p: f64) -> f64 {
        if self.has_kinetic_term() {
            0.5 * p * p / self.mass
        } else {
            0.0
        }
    }

    pub fn classical_energy(&self, q: f64, p: f64) -> f64 {
        self.kinetic(p) + self.scalar_potential(q).0
    }

    /// `(∂_q H_C, ∂_p H_C)`
    pub fn classical_gradient(&self, q: f64, p: f64) -> (f64, f64) {
        let dp = if self.has_kinetic_term() { p / self.mass } else { 0.0 };
        (self.scalar_potential(q).1, dp)
    }

    pub fn interaction(&self, q: f64) -> PauliVector {
        self.interaction.eval(q).0
    }

    pub fn interaction_gradient(&self, q: f64) -> PauliVector {
        self.interaction.eval(q).1
    }

    /// The full operator `H(q,p)` in Pauli form.
    pub fn full(&self, q: f64, p: f64) -> PauliVector {
        let mut v = self.interaction(q);
        v.h0 += self.classical_energy(q, p);
        v
    }

    /// `(∂_q H, ∂_p H)` in Pauli form. The interaction never depends on `p`.
    pub fn full_gradient(&self, q: f64, p: f64) -> (PauliVector, PauliVector) {
        let (dq_c, dp_c) = self.classical_gradient(q, p);
        let mut dq = self.interaction_gradient(q);
        dq.h0 += dq_c;
        (dq, PauliVector::identity(dp_c))
    }
}

/// Adiabatic eigen-decomposition of the electronic matrix at one position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralData {
    pub lambda1: f64,
    pub lambda2: f64,
    pub v1: [Complex64; 2],
    pub v2: [Complex64; 2],
    /// Set when `h1 = h2 = h3 = 0`; the basis is then `e1, e2`.
    pub degenerate: bool,
}

fn normalize_phase(mut v: [Complex64; 2]) -> [Complex64; 2] {
    let n = (v[0].norm_sqr() + v[1].norm_sqr()).sqrt();
    let lead = if v[0].norm() >= v[1].norm() { v[0] } else { v[1] };
    let phase = lead.conj() / lead.norm();
    for c in &mut v {
        *c = *c * phase / n;
    }
    v
}

fn eigenvector(h: &PauliVector, lambda: f64) -> [Complex64; 2] {
    let c = Complex64::new;
    let a = [c(h.h1, -h.h2), c(lambda - h.h3, 0.0)];
    let b = [c(lambda + h.h3, 0.0), c(h.h1, h.h2)];
    let na = a[0].norm_sqr() + a[1].norm_sqr();
    let nb = b[0].norm_sqr() + b[1].norm_sqr();
    normalize_phase(if na >= nb { a } else { b })
}

/// Eigen-decomposition of a Hermitian 2x2 matrix in Pauli form, eigenvalues
/// ascending. Each eigenvector is scaled so that its larger-magnitude
/// component is real and positive (the first one on ties).
pub fn eigensystem(h: &PauliVector) -> SpectralData {
    let r = h.vector_norm();
    let c = Complex64::new;
    if r == 0.0 {
        return SpectralData {
            lambda1: h.h0,
            lambda2: h.h0,
            v1: [c(1.0, 0.0), c(0.0, 0.0)],
            v2: [c(0.0, 0.0), c(1.0, 0.0)],
            degenerate: true,
        };
    }
    SpectralData {
        lambda1: h.h0 - r,
        lambda2: h.h0 + r,
        v1: eigenvector(h, -r),
        v2: eigenvector(h, r),
        degenerate: false,
    }
}

/// PESs and adiabatic basis of the electronic matrix `H_I(q)`.
pub fn spectral(h: &HybridHamiltonian, q: f64) -> SpectralData {
    eigensystem(&h.interaction(q))
}

fn mat_vec(m: &Mat2, v: &[Complex64; 2]) -> [Complex64; 2] {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

pub(crate) fn inner(u: &[Complex64; 2], v: &[Complex64; 2]) -> Complex64 {
    u[0].conj() * v[0] + u[1].conj() * v[1]
}

/// Nonadiabatic coupling `⟨v1|∂_q v2⟩ = ⟨v1|∂_q H_I v2⟩ / (λ2 − λ1)` in the gauge of
/// [`eigensystem`]. For real-symmetric interactions the value is real; the
/// real part is returned otherwise.
pub fn nac(h: &HybridHamiltonian, q: f64) -> Result<f64> {
    let s = spectral(h, q);
    // ⟨v1|∂v2⟩ = ⟨v1|∂H v2⟩ / (λ2 − λ1)
    let gap = s.lambda2 - s.lambda1;
    if gap.abs() < 1e-14 {
        return Err(Error::DegeneratePes { q, gap: gap.abs() });
    }
    let mut grad = h.interaction_gradient(q);
    grad.h0 = 0.0;
    let num = inner(&s.v1, &mat_vec(&grad.matrix(), &s.v2));
    Ok(num.re / gap)
}
