//! Split-operator Fourier (Strang) propagation of a two-component
//! wavefunction `Ψ(r) = (ψ1(r), ψ2(r))` under the quantized hybrid
//! Hamiltonian, with ħ = 1.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::ensemble::DensityMatrix2;
use crate::error::{Error, Result};
use crate::models::{eigensystem, inner, HybridHamiltonian, Mat2, PauliVector};

/// Periodic grid `r_j = r_min + j·dr`, `j = 0..n`, `dr = (r_max − r_min)/n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid1D {
    pub r_min: f64,
    pub r_max: f64,
    pub n_points: usize,
}

impl SpatialGrid1D {
    pub fn new(r_min: f64, r_max: f64, n_points: usize) -> Result<Self> {
        if !(r_max > r_min) || !r_min.is_finite() || !r_max.is_finite() {
            return Err(Error::InvalidInput(format!("bad spatial interval [{r_min}, {r_max}]")));
        }
        if n_points < 2 || !n_points.is_power_of_two() {
            return Err(Error::InvalidInput(format!("n_points must be a power of two, got {n_points}")));
        }
        Ok(Self { r_min, r_max, n_points })
    }

    pub fn dr(&self) -> f64 {
        (self.r_max - self.r_min) / self.n_points as f64
    }

    pub fn r(&self, j: usize) -> f64 {
        self.r_min + j as f64 * self.dr()
    }

    pub fn positions(&self) -> Vec<f64> {
        (0..self.n_points).map(|j| self.r(j)).collect()
    }

    pub fn dk(&self) -> f64 {
        2.0 * PI / (self.n_points as f64 * self.dr())
    }

    /// Momentum of FFT bin `j` in the standard layout (non-negative first).
    pub fn k(&self, j: usize) -> f64 {
        let n = self.n_points as i64;
        let j = j as i64;
        let m = if j < n / 2 { j } else { j - n };
        m as f64 * self.dk()
    }

    pub fn momenta(&self) -> Vec<f64> {
        (0..self.n_points).map(|j| self.k(j)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WavepacketState {
    pub grid: SpatialGrid1D,
    pub psi1: Vec<Complex64>,
    pub psi2: Vec<Complex64>,
    pub t: f64,
}

impl WavepacketState {
    pub fn norm(&self) -> f64 {
        let s: f64 = self.psi1.iter().zip(&self.psi2).map(|(a, b)| a.norm_sqr() + b.norm_sqr()).sum();
        s * self.grid.dr()
    }

    /// `|ψ1(r_j)|² + |ψ2(r_j)|²`.
    pub fn position_density(&self) -> Vec<f64> {
        self.psi1.iter().zip(&self.psi2).map(|(a, b)| a.norm_sqr() + b.norm_sqr()).collect()
    }

    pub fn mean_position(&self) -> f64 {
        let rho = self.position_density();
        let dr = self.grid.dr();
        rho.iter().enumerate().map(|(j, d)| self.grid.r(j) * d).sum::<f64>() * dr / self.norm()
    }

    pub fn mean_momentum(&self) -> f64 {
        let fft = FftPlanner::new().plan_fft_forward(self.grid.n_points);
        let mut total = 0.0;
        let mut weight = 0.0;
        for comp in [&self.psi1, &self.psi2] {
            let mut buf = comp.clone();
            fft.process(&mut buf);
            for (j, c) in buf.iter().enumerate() {
                total += self.grid.k(j) * c.norm_sqr();
                weight += c.norm_sqr();
            }
        }
        total / weight
    }

    /// Probability within `fraction` of the interval from either end.
    pub fn edge_mass(&self, fraction: f64) -> f64 {
        let n = self.grid.n_points;
        let m = ((n as f64 * fraction).ceil() as usize).min(n / 2);
        let rho = self.position_density();
        let s: f64 = rho[..m].iter().chain(&rho[n - m..]).sum();
        s * self.grid.dr()
    }

    /// Rows `r,re_psi1,im_psi1,re_psi2,im_psi2`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "r,re_psi1,im_psi1,re_psi2,im_psi2")?;
        for j in 0..self.grid.n_points {
            let (a, b) = (self.psi1[j], self.psi2[j]);
            writeln!(out, "{:e},{:e},{:e},{:e},{:e}", self.grid.r(j), a.re, a.im, b.re, b.im)?;
        }
        Ok(())
    }
}

/// Fraction of the grid at each end whose mass is watched.
pub const EDGE_FRACTION: f64 = 0.02;

/// Coherent-state Gaussian `(γ/π)^{1/4} exp(i μp (r−μq) − γ (r−μq)²/2) ⊗ v0`
/// with `γ = 1/(2σq²)`, renormalized on the grid. Also returns the edge mass.
pub fn init_wavepacket(
    grid: &SpatialGrid1D,
    mu_q: f64,
    mu_p: f64,
    sigma_q: f64,
    v0: [Complex64; 2],
) -> Result<(WavepacketState, f64)> {
    let nv = (v0[0].norm_sqr() + v0[1].norm_sqr()).sqrt();
    if (nv - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidInput(format!("spinor must have unit norm, got {nv}")));
    }
    if !(sigma_q > 0.0) {
        return Err(Error::InvalidInput(format!("sigma_q must be positive, got {sigma_q}")));
    }
    let gamma = 0.5 / (sigma_q * sigma_q);
    let pref = (gamma / PI).powf(0.25);
    let psi: Vec<Complex64> = grid
        .positions()
        .iter()
        .map(|&r| {
            let y = r - mu_q;
            Complex64::from_polar(pref * (-0.5 * gamma * y * y).exp(), mu_p * y)
        })
        .collect();
    let mut state = WavepacketState {
        grid: *grid,
        psi1: psi.iter().map(|&z| z * v0[0]).collect(),
        psi2: psi.iter().map(|&z| z * v0[1]).collect(),
        t: 0.0,
    };
    let s = 1.0 / state.norm().sqrt();
    for z in state.psi1.iter_mut().chain(state.psi2.iter_mut()) {
        *z *= s;
    }
    let edge = state.edge_mass(EDGE_FRACTION);
    Ok((state, edge))
}

/// `exp(−i τ (h0 + h⃗·σ⃗))` in closed form.
pub fn pauli_exp(h: &PauliVector, tau: f64) -> Mat2 {
    let r = h.vector_norm();
    let phase = Complex64::from_polar(1.0, -tau * h.h0);
    let c = (tau * r).cos();
    // sin(τr)/r → τ as r → 0
    let s = if r > 0.0 { (tau * r).sin() / r } else { tau };
    let i = Complex64::i();
    let one = Complex64::new(1.0, 0.0);
    let m = h.matrix();
    let mut out = [[Complex64::new(0.0, 0.0); 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            let mut hv = m[a][b];
            if a == b {
                hv -= h.h0;
            }
            let id = if a == b { one * c } else { Complex64::new(0.0, 0.0) };
            out[a][b] = phase * (id - i * s * hv);
        }
    }
    out
}

/// Precomputed Strang propagator for one Hamiltonian, grid and step.
pub struct SoftPropagator {
    grid: SpatialGrid1D,
    dt: f64,
    kinetic_half: Vec<Complex64>,
    potential: Vec<Mat2>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl SoftPropagator {
    pub fn new(grid: &SpatialGrid1D, h: &HybridHamiltonian, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidInput(format!("SOFT time step must be positive, got {dt}")));
        }
        let n = grid.n_points;
        let inv_n = 1.0 / n as f64;
        let kinetic_half = grid.momenta().iter().map(|&k| Complex64::from_polar(inv_n, -0.5 * dt * h.kinetic(k))).collect();
        let potential = grid.positions().iter().map(|&r| pauli_exp(&potential_at(h, r), dt)).collect();
        let mut planner = FftPlanner::new();
        Ok(Self {
            grid: *grid,
            dt,
            kinetic_half,
            potential,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn kinetic(&self, psi: &mut [Complex64]) {
        self.forward.process(psi);
        for (z, f) in psi.iter_mut().zip(&self.kinetic_half) {
            *z *= f;
        }
        self.inverse.process(psi);
    }

    pub fn step(&self, state: &mut WavepacketState) -> Result<()> {
        if state.grid != self.grid {
            return Err(Error::InvalidInput("state and propagator grids differ".into()));
        }
        self.kinetic(&mut state.psi1);
        self.kinetic(&mut state.psi2);
        for j in 0..self.grid.n_points {
            let u = &self.potential[j];
            let (a, b) = (state.psi1[j], state.psi2[j]);
            state.psi1[j] = u[0][0] * a + u[0][1] * b;
            state.psi2[j] = u[1][0] * a + u[1][1] * b;
        }
        self.kinetic(&mut state.psi1);
        self.kinetic(&mut state.psi2);
        state.t += self.dt;
        Ok(())
    }
}

/// `U(r)·1 + H_I(r)`; the kinetic part is handled in momentum space.
fn potential_at(h: &HybridHamiltonian, r: f64) -> PauliVector {
    let mut v = h.interaction(r);
    v.h0 += h.scalar_potential(r).0;
    v
}

/// One Strang step `e^{−iTdt/2} e^{−iVdt} e^{−iTdt/2}`.
pub fn strang_step(state: &WavepacketState, h: &HybridHamiltonian, dt: f64) -> Result<WavepacketState> {
    let prop = SoftPropagator::new(&state.grid, h, dt)?;
    let mut out = state.clone();
    prop.step(&mut out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftObservables {
    pub t: f64,
    pub norm: f64,
    pub energy: f64,
    /// `ρ = ∫ΨΨ† dr`, scaled to unit trace.
    pub density: DensityMatrix2,
    pub p1: f64,
    pub p2: f64,
    pub purity: f64,
}

pub fn observables(state: &WavepacketState, h: &HybridHamiltonian) -> SoftObservables {
    let grid = &state.grid;
    let dr = grid.dr();
    let n = grid.n_points;
    let mut r11 = 0.0;
    let mut r22 = 0.0;
    let mut r12 = Complex64::new(0.0, 0.0);
    let mut p1 = 0.0;
    let mut p2 = 0.0;
    let mut pot = 0.0;
    for j in 0..n {
        let psi = [state.psi1[j], state.psi2[j]];
        r11 += psi[0].norm_sqr();
        r22 += psi[1].norm_sqr();
        r12 += psi[0] * psi[1].conj();
        let v = potential_at(h, grid.r(j));
        let s = eigensystem(&h.interaction(grid.r(j)));
        p1 += inner(&s.v1, &psi).norm_sqr();
        p2 += inner(&s.v2, &psi).norm_sqr();
        let m = v.matrix();
        let hv = [m[0][0] * psi[0] + m[0][1] * psi[1], m[1][0] * psi[0] + m[1][1] * psi[1]];
        pot += inner(&psi, &hv).re;
    }
    let norm = (r11 + r22) * dr;
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut kin = 0.0;
    for comp in [&state.psi1, &state.psi2] {
        let mut buf = comp.clone();
        fft.process(&mut buf);
        for (j, c) in buf.iter().enumerate() {
            kin += h.kinetic(grid.k(j)) * c.norm_sqr();
        }
    }
    // Parseval: Σ|φ_k|² = n Σ|ψ_j|²
    kin *= dr / n as f64;
    let tr = r11 + r22;
    let density = DensityMatrix2::from_entries(r11 / tr, r12 / tr, r22 / tr);
    let pt = p1 + p2;
    SoftObservables {
        t: state.t,
        norm,
        energy: kin + pot * dr,
        purity: density.purity(),
        density,
        p1: p1 / pt,
        p2: p2 / pt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{make_rabi, make_tully, ClassicalPart, Interaction, RabiRegime, TullyVariant};
    use approx::assert_abs_diff_eq;

    fn e1() -> [Complex64; 2] {
        [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]
    }

    #[test]
    fn dual_grid_layout() {
        let g = SpatialGrid1D::new(-30.0, 40.0, 4096).unwrap();
        assert_abs_diff_eq!(g.dk() * g.dr() * 4096.0, 2.0 * PI, epsilon = 1e-12);
        assert_eq!(g.k(0), 0.0);
        assert!(g.k(2048) < 0.0);
        assert!(SpatialGrid1D::new(0.0, 1.0, 1000).is_err());
    }

    #[test]
    fn initial_moments() {
        let g = SpatialGrid1D::new(-30.0, 40.0, 4096).unwrap();
        let (s, edge) = init_wavepacket(&g, -8.0, 10.0, 2f64.sqrt(), e1()).unwrap();
        assert_abs_diff_eq!(s.norm(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.mean_position(), -8.0, epsilon = 1e-8);
        assert_abs_diff_eq!(s.mean_momentum(), 10.0, epsilon = 1e-8);
        assert!(edge < 1e-12);
    }

    #[test]
    fn pauli_exp_is_unitary_and_degenerate_safe() {
        for h in [PauliVector::new(0.3, 0.1, -0.2, 0.5), PauliVector::identity(0.7)] {
            let u = pauli_exp(&h, 0.37);
            for a in 0..2 {
                for b in 0..2 {
                    let s = u[0][a].conj() * u[0][b] + u[1][a].conj() * u[1][b];
                    let expect = if a == b { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(s.re, expect, epsilon = 1e-15);
                    assert_abs_diff_eq!(s.im, 0.0, epsilon = 1e-15);
                }
            }
        }
    }

    #[test]
    fn step_preserves_norm() {
        let g = SpatialGrid1D::new(-15.0, 15.0, 2048).unwrap();
        let h = make_rabi(RabiRegime::Ultrastrong);
        let (mut s, _) = init_wavepacket(&g, 0.0, 4.0, 0.5f64.sqrt(), e1()).unwrap();
        let prop = SoftPropagator::new(&g, &h, 0.01).unwrap();
        for _ in 0..10 {
            let before = s.norm();
            prop.step(&mut s).unwrap();
            assert!((s.norm() - before).abs() < 1e-12);
        }
    }

    #[test]
    fn tully1_initial_observables() {
        let g = SpatialGrid1D::new(-30.0, 40.0, 4096).unwrap();
        let h = make_tully(TullyVariant::I);
        let (s, _) = init_wavepacket(&g, -8.0, 10.0, 2f64.sqrt(), e1()).unwrap();
        let o = observables(&s, &h);
        // |⟨e1|v1(r)⟩|² = (1 − h3/|h|)/2 weighted by the Gaussian density
        let oracle: f64 = g
            .positions()
            .iter()
            .zip(s.position_density())
            .map(|(&r, d)| {
                let v = h.interaction(r);
                d * 0.5 * (1.0 - v.h3 / v.vector_norm())
            })
            .sum::<f64>()
            * g.dr();
        assert_abs_diff_eq!(o.p1, oracle, epsilon = 1e-12);
        assert!((o.p1 - 1.0).abs() < 1e-7);
        assert_abs_diff_eq!(o.p1 + o.p2, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(o.purity, 1.0, epsilon = 1e-12);
        // ⟨p²⟩/2M = (μp² + σp²)/2M, σp = 1/(2σq), plus ⟨−a(1−e^{−b|q|})⟩ ≈ −0.01
        let kin = (100.0 + 0.125) / 4000.0;
        assert_abs_diff_eq!(o.energy, kin - 0.01, epsilon = 1e-6);
    }

    #[test]
    fn constant_field_rabi_period() {
        let g = SpatialGrid1D::new(-10.0, 10.0, 256).unwrap();
        let h = HybridHamiltonian {
            name: "spin".into(),
            mass: 1.0,
            classical: ClassicalPart::Absent,
            interaction: Interaction::Constant(PauliVector::new(0.0, 0.35, 0.0, 0.0)),
        };
        let (mut s, _) = init_wavepacket(&g, 0.0, 0.0, 1.0, e1()).unwrap();
        let dt = 0.01;
        let prop = SoftPropagator::new(&g, &h, dt).unwrap();
        let period = PI / 0.35;
        let steps = (0.5 * period / dt).round() as usize;
        for _ in 0..steps {
            prop.step(&mut s).unwrap();
        }
        let o = observables(&s, &h);
        // e1 → e2 at half period: weight on the first component
        let r11 = o.density.r11();
        let expect = (0.35 * steps as f64 * dt).cos().powi(2);
        assert_abs_diff_eq!(r11, expect, epsilon = 1e-10);
        assert!(r11 < 1e-4);
    }
}
