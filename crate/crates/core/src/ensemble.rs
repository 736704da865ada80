//! Particle ensembles shared by the koopmon, Ehrenfest and bohmion methods.

use std::io::{BufRead, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Mat2, PauliVector};

/// A 2x2 density matrix stored in Pauli form, `ρ = c0·1 + c⃗·σ⃗`, which keeps
/// it Hermitian by construction. The Bloch vector is `2c⃗`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityMatrix2(pub PauliVector);

impl DensityMatrix2 {
    /// The projector `v v†`; `v` need not be normalized.
    pub fn pure(v: [Complex64; 2]) -> Self {
        let n = v[0].norm_sqr() + v[1].norm_sqr();
        let off = v[0] * v[1].conj() / n;
        let m: Mat2 = [
            [Complex64::new(v[0].norm_sqr() / n, 0.0), off],
            [off.conj(), Complex64::new(v[1].norm_sqr() / n, 0.0)],
        ];
        Self(PauliVector::from_matrix(&m))
    }

    pub fn from_bloch(b: [f64; 3]) -> Self {
        Self(PauliVector::new(0.5, 0.5 * b[0], 0.5 * b[1], 0.5 * b[2]))
    }

    /// `ρ11, ρ12, ρ22`.
    pub fn from_entries(r11: f64, r12: Complex64, r22: f64) -> Self {
        Self(PauliVector::from_matrix(&[[Complex64::new(r11, 0.0), r12], [r12.conj(), Complex64::new(r22, 0.0)]]))
    }

    pub fn ground() -> Self {
        Self::from_bloch([0.0, 0.0, 1.0])
    }

    pub fn maximally_mixed() -> Self {
        Self::from_bloch([0.0; 3])
    }

    pub fn pauli(&self) -> PauliVector {
        self.0
    }

    /// `(b_x, b_y, b_z) = (2 Re ρ12, 2 Im ρ21, ρ11 − ρ22)` for unit trace.
    pub fn bloch(&self) -> [f64; 3] {
        [2.0 * self.0.h1, 2.0 * self.0.h2, 2.0 * self.0.h3]
    }

    pub fn matrix(&self) -> Mat2 {
        self.0.matrix()
    }

    pub fn r11(&self) -> f64 {
        self.0.h0 + self.0.h3
    }

    pub fn r22(&self) -> f64 {
        self.0.h0 - self.0.h3
    }

    pub fn r12(&self) -> Complex64 {
        Complex64::new(self.0.h1, -self.0.h2)
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn purity(&self) -> f64 {
        self.0.trace_product(&self.0)
    }

    /// Ascending eigenvalues.
    pub fn eigenvalues(&self) -> [f64; 2] {
        let r = self.0.vector_norm();
        [self.0.h0 - r, self.0.h0 + r]
    }

    /// `⟨v|ρ v⟩`
    pub fn expectation(&self, v: &[Complex64; 2]) -> f64 {
        let m = self.matrix();
        let mv = [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]];
        crate::models::inner(v, &mv).re
    }

    /// Restores unit trace when it has drifted by more than `1e-12`.
    pub fn renormalize(&mut self) {
        let tr = self.trace();
        if (tr - 1.0).abs() > 1e-12 && tr > 0.0 {
            self.0 = self.0 * (1.0 / tr);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    Trace,
    NegativeEigenvalue,
    Purity,
    WeightSum,
    NonPositiveWeight,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// Particle index, `None` for ensemble-wide checks.
    pub index: Option<usize>,
    pub kind: ViolationKind,
    pub magnitude: f64,
}

/// Default tolerance used by [`ParticleEnsemble::validate`].
pub const DEFAULT_TOLERANCE: f64 = 1e-10;

/// Struct-of-arrays particle state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub rho: Vec<DensityMatrix2>,
    pub w: Vec<f64>,
}

fn check_density(index: Option<usize>, rho: &DensityMatrix2, tol: f64, out: &mut Vec<Violation>) {
    if !rho.0.is_finite() {
        out.push(Violation { index, kind: ViolationKind::NonFinite, magnitude: f64::NAN });
        return;
    }
    let dt = (rho.trace() - 1.0).abs();
    if dt > tol {
        out.push(Violation { index, kind: ViolationKind::Trace, magnitude: dt });
    }
    let lmin = rho.eigenvalues()[0];
    if lmin < -tol {
        out.push(Violation { index, kind: ViolationKind::NegativeEigenvalue, magnitude: -lmin });
    }
    let pur = rho.purity();
    if pur > 1.0 + tol || pur < 0.5 - tol {
        let magnitude = if pur > 1.0 { pur - 1.0 } else { 0.5 - pur };
        out.push(Violation { index, kind: ViolationKind::Purity, magnitude });
    }
}

impl ParticleEnsemble {
    pub fn new(q: Vec<f64>, p: Vec<f64>, rho: Vec<DensityMatrix2>, w: Vec<f64>) -> Result<Self> {
        let n = q.len();
        if n == 0 || p.len() != n || rho.len() != n || w.len() != n {
            return Err(Error::InvalidInput(format!(
                "ensemble arrays must be non-empty and equal length (q {}, p {}, rho {}, w {})",
                q.len(),
                p.len(),
                rho.len(),
                w.len()
            )));
        }
        Ok(Self { q, p, rho, w })
    }

    /// Equal weights `1/N`.
    pub fn uniform(q: Vec<f64>, p: Vec<f64>, rho: Vec<DensityMatrix2>) -> Result<Self> {
        let n = q.len();
        Self::new(q, p, rho, vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// `Σ_a w_a ρ_a`
    pub fn aggregate_density(&self) -> DensityMatrix2 {
        let mut acc = PauliVector::ZERO;
        for (r, &w) in self.rho.iter().zip(&self.w) {
            acc += r.0 * w;
        }
        DensityMatrix2(acc)
    }

    pub fn validate(&self) -> Vec<Violation> {
        self.validate_with(DEFAULT_TOLERANCE)
    }

    /// Lists every invariant violation larger than `tol`.
    pub fn validate_with(&self, tol: f64) -> Vec<Violation> {
        let mut out = Vec::new();
        let wsum: f64 = self.w.iter().sum();
        if (wsum - 1.0).abs() > tol {
            out.push(Violation { index: None, kind: ViolationKind::WeightSum, magnitude: (wsum - 1.0).abs() });
        }
        for a in 0..self.len() {
            if !(self.w[a] > 0.0) {
                out.push(Violation { index: Some(a), kind: ViolationKind::NonPositiveWeight, magnitude: self.w[a] });
            }
            if !self.q[a].is_finite() || !self.p[a].is_finite() {
                out.push(Violation { index: Some(a), kind: ViolationKind::NonFinite, magnitude: f64::NAN });
            }
            check_density(Some(a), &self.rho[a], tol, &mut out);
        }
        out
    }

    /// Post-step repair: unit trace for every density matrix.
    pub fn renormalize(&mut self) {
        for r in &mut self.rho {
            r.renormalize();
        }
    }

    pub fn write_snapshot<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "index,q,p,w,rho11,re_rho12,im_rho12,rho22")?;
        for a in 0..self.len() {
            let r = &self.rho[a];
            let r12 = r.r12();
            writeln!(
                out,
                "{a},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                self.q[a],
                self.p[a],
                self.w[a],
                r.r11(),
                r12.re,
                r12.im,
                r.r22()
            )?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: BufRead>(input: R) -> Result<Self> {
        let (mut q, mut p, mut rho, mut w) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let v: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidInput(format!("snapshot line {}: {e}", lineno + 1)))?;
            if v.len() != 8 {
                return Err(Error::InvalidInput(format!("snapshot line {}: expected 8 fields", lineno + 1)));
            }
            q.push(v[1]);
            p.push(v[2]);
            w.push(v[3]);
            rho.push(DensityMatrix2::from_entries(v[4], Complex64::new(v[5], v[6]), v[7]));
        }
        Self::new(q, p, rho, w)
    }
}

/// Multi-index ensemble for two classical degrees of freedom. Axis-1
/// coordinates are indexed by `a`, axis-2 coordinates by `b`, and the quantum
/// state by the pair `(a, b)` stored row major (`a * n2 + b`).
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble2D {
    pub q1: Vec<f64>,
    pub p1: Vec<f64>,
    pub w1: Vec<f64>,
    pub q2: Vec<f64>,
    pub p2: Vec<f64>,
    pub w2: Vec<f64>,
    pub rho: Vec<DensityMatrix2>,
}

impl Ensemble2D {
    pub fn new(
        axis1: (Vec<f64>, Vec<f64>, Vec<f64>),
        axis2: (Vec<f64>, Vec<f64>, Vec<f64>),
        rho: Vec<DensityMatrix2>,
    ) -> Result<Self> {
        let (q1, p1, w1) = axis1;
        let (q2, p2, w2) = axis2;
        let n1 = q1.len();
        let n2 = q2.len();
        if n1 == 0 || n2 == 0 || p1.len() != n1 || w1.len() != n1 || p2.len() != n2 || w2.len() != n2 {
            return Err(Error::InvalidInput("inconsistent axis arrays".into()));
        }
        if rho.len() != n1 * n2 {
            return Err(Error::InvalidInput(format!("expected {} density matrices, got {}", n1 * n2, rho.len())));
        }
        Ok(Self { q1, p1, w1, q2, p2, w2, rho })
    }

    pub fn n1(&self) -> usize {
        self.q1.len()
    }

    pub fn n2(&self) -> usize {
        self.q2.len()
    }

    pub fn rho_at(&self, a: usize, b: usize) -> &DensityMatrix2 {
        &self.rho[a * self.n2() + b]
    }

    /// `w_(a,b) = w_a w_b`
    pub fn weight(&self, a: usize, b: usize) -> f64 {
        self.w1[a] * self.w2[b]
    }

    pub fn aggregate_density(&self) -> DensityMatrix2 {
        let mut acc = PauliVector::ZERO;
        for a in 0..self.n1() {
            for b in 0..self.n2() {
                acc += self.rho_at(a, b).0 * self.weight(a, b);
            }
        }
        DensityMatrix2(acc)
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (k, r) in self.rho.iter().enumerate() {
            check_density(Some(k), r, DEFAULT_TOLERANCE, &mut out);
        }
        for (ws, label) in [(&self.w1, "axis 1"), (&self.w2, "axis 2")] {
            let s: f64 = ws.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                let _ = label;
                out.push(Violation { index: None, kind: ViolationKind::WeightSum, magnitude: (s - 1.0).abs() });
            }
        }
        out
    }
}
