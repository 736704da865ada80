//! Gaussian regularization kernels and trapezoid quadrature grids over the
//! adaptive truncation box.

use std::f64::consts::PI;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::models::PauliVector;

/// Kernel evaluations are skipped beyond this many `α` from the centre,
/// where `exp(−y²/α²) < 3e-16`.
pub const KERNEL_CUTOFF: f64 = 6.0;

/// Denominator values below this are treated as empty space.
pub const DENOMINATOR_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub alpha: f64,
}

impl KernelSpec {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidInput(format!("kernel width must be positive, got {alpha}")));
        }
        Ok(Self { alpha })
    }

    /// Standard deviation of the 1D kernel, `α/√2`.
    pub fn sigma_k(&self) -> f64 {
        self.alpha / 2f64.sqrt()
    }

    /// Radius outside which the kernel is not evaluated.
    pub fn cutoff(&self) -> f64 {
        KERNEL_CUTOFF * self.alpha
    }

    pub fn value(&self, y: f64) -> f64 {
        let a = self.alpha;
        (-(y * y) / (a * a)).exp() / (a * PI.sqrt())
    }

    pub fn deriv(&self, y: f64) -> f64 {
        -2.0 * y / (self.alpha * self.alpha) * self.value(y)
    }

    pub fn second_deriv(&self, y: f64) -> f64 {
        let a2 = self.alpha * self.alpha;
        (4.0 * y * y / (a2 * a2) - 2.0 / a2) * self.value(y)
    }

    /// `(K, K', K'')` sharing one exponential.
    pub fn triple(&self, y: f64) -> (f64, f64, f64) {
        let a2 = self.alpha * self.alpha;
        let k = (-(y * y) / a2).exp() / (self.alpha * PI.sqrt());
        (k, -2.0 * y / a2 * k, (4.0 * y * y / (a2 * a2) - 2.0 / a2) * k)
    }
}

pub fn kernel_1d(spec: &KernelSpec, y: f64) -> f64 {
    spec.value(y)
}

pub fn kernel_1d_deriv(spec: &KernelSpec, y: f64) -> f64 {
    spec.deriv(y)
}

/// Box padding (`n`, in units of `σ_K`) and resolution (`j`, nodes per `σ_K`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    pub n_q: f64,
    pub n_p: f64,
    pub j_q: u32,
    pub j_p: u32,
}

impl Default for GridParams {
    fn default() -> Self {
        Self { n_q: 2.0, n_p: 2.0, j_q: 2, j_p: 2 }
    }
}

impl GridParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.n_q >= 0.0 && self.n_p >= 0.0) || self.j_q == 0 || self.j_p == 0 {
            return Err(Error::InvalidInput(format!("invalid grid parameters {self:?}")));
        }
        Ok(())
    }
}

/// Uniform 1D node set `min + i·step`, `i < len`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub step: f64,
    pub len: usize,
}

impl Axis {
    /// Nodes anchored at `lo`, extended upward to the first node at or past `hi`.
    pub fn spanning(lo: f64, hi: f64, step: f64) -> Self {
        let extent = (hi - lo).max(0.0);
        let intervals = (extent / step - 1e-9).ceil().max(0.0) as usize;
        Self { min: lo, step, len: intervals + 1 }
    }

    pub fn node(&self, i: usize) -> f64 {
        self.min + i as f64 * self.step
    }

    pub fn max(&self) -> f64 {
        self.node(self.len - 1)
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.node(i)).collect()
    }

    /// Composite trapezoid weight of node `i` (without the `step` factor).
    pub fn weight(&self, i: usize) -> f64 {
        if self.len == 1 {
            1.0
        } else if i == 0 || i + 1 == self.len {
            0.5
        } else {
            1.0
        }
    }

    /// Indices of nodes within `radius` of `center`.
    pub fn window(&self, center: f64, radius: f64) -> Range<usize> {
        let lo = ((center - radius - self.min) / self.step).ceil().max(0.0);
        let hi = ((center + radius - self.min) / self.step).floor() + 1.0;
        let lo = (lo as usize).min(self.len);
        let hi = if hi <= 0.0 { 0 } else { (hi as usize).min(self.len) };
        lo..hi.max(lo)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.min && x <= self.max()
    }
}

fn padded_axis(lo: f64, hi: f64, sigma: f64, n: f64, j: u32) -> Axis {
    Axis::spanning(lo - n * sigma, hi + n * sigma, sigma / j as f64)
}

/// Tensor-product grid; values on it are stored row major with `q` outer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    pub q: Axis,
    pub p: Axis,
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

impl QuadratureGrid {
    pub fn len(&self) -> usize {
        self.q.len * self.p.len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dq(&self) -> f64 {
        self.q.step
    }

    pub fn dp(&self) -> f64 {
        self.p.step
    }

    /// Grid for an arbitrary set of phase-space points.
    pub fn around(q: &[f64], p: &[f64], spec: &KernelSpec, params: &GridParams) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::InvalidInput("cannot build a grid around zero particles".into()));
        }
        params.validate()?;
        let s = spec.sigma_k();
        let (qlo, qhi) = min_max(q);
        let (plo, phi) = min_max(p);
        if !(qlo.is_finite() && qhi.is_finite() && plo.is_finite() && phi.is_finite()) {
            return Err(Error::NonFinite { what: "particle coordinates" });
        }
        Ok(Self { q: padded_axis(qlo, qhi, s, params.n_q, params.j_q), p: padded_axis(plo, phi, s, params.n_p, params.j_p) })
    }

    /// Errors unless every point lies inside the box.
    pub fn check_coverage(&self, q: &[f64], p: &[f64]) -> Result<()> {
        for (index, (&qa, &pa)) in q.iter().zip(p).enumerate() {
            if !(self.q.contains(qa) && self.p.contains(pa)) {
                return Err(Error::GridCoverage { index, q: qa, p: pa });
            }
        }
        Ok(())
    }
}

pub fn build_grid(e: &ParticleEnsemble, spec: &KernelSpec, params: &GridParams) -> Result<QuadratureGrid> {
    QuadratureGrid::around(&e.q, &e.p, spec, params)
}

/// Configuration-space grid following the same padding and spacing rules.
pub fn build_line_grid(q: &[f64], spec: &KernelSpec, n: f64, j: u32) -> Result<Axis> {
    if q.is_empty() || j == 0 || n < 0.0 {
        return Err(Error::InvalidInput("line grid needs particles, j ≥ 1 and n ≥ 0".into()));
    }
    let (lo, hi) = min_max(q);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::NonFinite { what: "particle coordinates" });
    }
    Ok(padded_axis(lo, hi, spec.sigma_k(), n, j))
}

pub fn trapezoid_1d(values: &[f64], axis: &Axis) -> f64 {
    assert_eq!(values.len(), axis.len, "value count does not match axis");
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += axis.weight(i) * v;
    }
    acc * axis.step
}

pub fn trapezoid_2d(values: &[f64], grid: &QuadratureGrid) -> f64 {
    assert_eq!(values.len(), grid.len(), "value count does not match grid");
    let np = grid.p.len;
    let mut acc = 0.0;
    for i in 0..grid.q.len {
        let mut row = 0.0;
        for j in 0..np {
            row += grid.p.weight(j) * values[i * np + j];
        }
        acc += grid.q.weight(i) * row;
    }
    acc * grid.dq() * grid.dp()
}

/// Entrywise trapezoid rule for Pauli-form matrix values.
pub fn trapezoid_2d_pauli(values: &[PauliVector], grid: &QuadratureGrid) -> PauliVector {
    assert_eq!(values.len(), grid.len(), "value count does not match grid");
    let np = grid.p.len;
    let mut acc = PauliVector::ZERO;
    for i in 0..grid.q.len {
        let mut row = PauliVector::ZERO;
        for j in 0..np {
            row += values[i * np + j] * grid.p.weight(j);
        }
        acc += row * grid.q.weight(i);
    }
    acc * (grid.dq() * grid.dp())
}

/// Kernel values of one particle restricted to its window on an axis.
#[derive(Debug, Clone, Default)]
pub(crate) struct KernelStrip {
    pub start: usize,
    pub k: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

impl KernelStrip {
    pub fn new(spec: &KernelSpec, axis: &Axis, center: f64) -> Self {
        let w = axis.window(center, spec.cutoff());
        let n = w.len();
        let (mut k, mut d1, mut d2) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for i in w.clone() {
            let (a, b, c) = spec.triple(axis.node(i) - center);
            k.push(a);
            d1.push(b);
            d2.push(c);
        }
        Self { start: w.start, k, d1, d2 }
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.k.len()
    }
}
