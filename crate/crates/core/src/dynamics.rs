//! Equations of motion, conserved energies and RK4 time stepping for the
//! three particle methods.
//!
//! All methods share the structure `q̇ = w⁻¹ ∂h/∂p`, `ṗ = −w⁻¹ ∂h/∂q`,
//! `iρ̇ = w⁻¹[∂h/∂ρ, ρ]`. In Pauli form with `ρ = c0·1 + c⃗·σ⃗` and
//! `∂h/∂ρ = x⃗·σ⃗` (`x⃗ = ∂h/∂b⃗`, `b⃗ = 2c⃗`) the last one reads
//! `ċ = (2/w) x⃗ × c⃗`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backreaction::{
    bohmion_coupling, bohmion_coupling_2dof, koopmon_coupling, koopmon_coupling_2dof, CouplingGradient, SeparableHamiltonian2,
};
use crate::diagnostics::{particle_diagnostics, DiagnosticsRecord};
use crate::ensemble::{DensityMatrix2, Ensemble2D, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::models::{cross, HybridHamiltonian, PauliVector};
use crate::par::map_range;
use crate::regularization::{build_grid, build_line_grid, GridParams, KernelSpec, QuadratureGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Koopmon,
    Ehrenfest,
    Bohmion,
}

impl MethodKind {
    pub const ALL: [MethodKind; 3] = [MethodKind::Koopmon, MethodKind::Ehrenfest, MethodKind::Bohmion];

    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::Koopmon => "koopmon",
            MethodKind::Ehrenfest => "ehrenfest",
            MethodKind::Bohmion => "bohmion",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "koopmon" => Ok(MethodKind::Koopmon),
            "ehrenfest" => Ok(MethodKind::Ehrenfest),
            "bohmion" => Ok(MethodKind::Bohmion),
            _ => Err(Error::InvalidInput(format!("unknown method '{s}'"))),
        }
    }
}

/// Kernel and grid settings shared by the coupled methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regularization {
    pub kernel: KernelSpec,
    pub grid: GridParams,
}

impl Regularization {
    pub fn new(alpha: f64) -> Result<Self> {
        Ok(Self { kernel: KernelSpec::new(alpha)?, grid: GridParams::default() })
    }
}

/// Time derivative of an ensemble; `drho` entries are traceless.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleDerivative {
    pub dq: Vec<f64>,
    pub dp: Vec<f64>,
    pub drho: Vec<PauliVector>,
}

impl EnsembleDerivative {
    pub fn drho_matrix(&self, a: usize) -> crate::models::Mat2 {
        self.drho[a].matrix()
    }
}

fn mean_field_energy(e: &ParticleEnsemble, h: &HybridHamiltonian) -> f64 {
    let terms = map_range(e.len(), |a| e.w[a] * e.rho[a].0.trace_product(&h.full(e.q[a], e.p[a])));
    terms.iter().sum()
}

fn coupling(
    kind: MethodKind,
    e: &ParticleEnsemble,
    h: &HybridHamiltonian,
    reg: &Regularization,
    grid: Option<&QuadratureGrid>,
    with_gradient: bool,
) -> Result<(f64, Option<CouplingGradient>)> {
    match kind {
        MethodKind::Ehrenfest => Ok((0.0, None)),
        // a single koopmon has Î₁₁ = 0
        MethodKind::Koopmon if e.len() == 1 => Ok((0.0, None)),
        MethodKind::Koopmon => {
            let built;
            let g = match grid {
                Some(g) => g,
                None => {
                    built = build_grid(e, &reg.kernel, &reg.grid)?;
                    &built
                }
            };
            koopmon_coupling(e, h, g, &reg.kernel, with_gradient)
        }
        MethodKind::Bohmion => {
            let axis = match grid {
                Some(g) => g.q,
                None => build_line_grid(&e.q, &reg.kernel, reg.grid.n_q, reg.grid.j_q)?,
            };
            bohmion_coupling(e, h.mass, &axis, &reg.kernel, with_gradient)
        }
    }
}

/// The conserved Hamiltonian of the method. `grid` fixes the quadrature grid;
/// `None` builds the adaptive one from the current state.
pub fn energy(
    kind: MethodKind,
    e: &ParticleEnsemble,
    h: &HybridHamiltonian,
    reg: &Regularization,
    grid: Option<&QuadratureGrid>,
) -> Result<f64> {
    let (b, _) = coupling(kind, e, h, reg, grid, false)?;
    let total = mean_field_energy(e, h) + b;
    if !total.is_finite() {
        return Err(Error::NonFinite { what: "energy" });
    }
    Ok(total)
}

pub fn rhs(
    kind: MethodKind,
    e: &ParticleEnsemble,
    h: &HybridHamiltonian,
    reg: &Regularization,
    grid: Option<&QuadratureGrid>,
) -> Result<EnsembleDerivative> {
    let (_, g) = coupling(kind, e, h, reg, grid, true)?;
    let per = map_range(e.len(), |a| {
        let c = e.rho[a].0;
        let hv = h.full(e.q[a], e.p[a]);
        let (hq, hp) = h.full_gradient(e.q[a], e.p[a]);
        let mut dq = c.trace_product(&hp);
        let mut dp = -c.trace_product(&hq);
        let mut dc = cross(hv.vector(), c.vector());
        dc = [2.0 * dc[0], 2.0 * dc[1], 2.0 * dc[2]];
        if let Some(g) = &g {
            let inv = 1.0 / e.w[a];
            dq += inv * g.dp[a];
            dp -= inv * g.dq[a];
            let extra = cross(g.db[a], c.vector());
            for k in 0..3 {
                dc[k] += 2.0 * inv * extra[k];
            }
        }
        (dq, dp, PauliVector::from_parts(0.0, dc))
    });
    let mut d = EnsembleDerivative { dq: Vec::with_capacity(e.len()), dp: Vec::with_capacity(e.len()), drho: Vec::with_capacity(e.len()) };
    for (dq, dp, dr) in per {
        if !(dq.is_finite() && dp.is_finite() && dr.is_finite()) {
            return Err(Error::NonFinite { what: "ensemble derivative" });
        }
        d.dq.push(dq);
        d.dp.push(dp);
        d.drho.push(dr);
    }
    Ok(d)
}

fn advance(e: &ParticleEnsemble, d: &EnsembleDerivative, s: f64) -> ParticleEnsemble {
    let mut out = e.clone();
    for a in 0..e.len() {
        out.q[a] += s * d.dq[a];
        out.p[a] += s * d.dp[a];
        out.rho[a] = DensityMatrix2(e.rho[a].0 + d.drho[a] * s);
    }
    out
}

/// One classical RK4 step; the quadrature grid is rebuilt for every stage.
pub fn rk4_step(kind: MethodKind, e: &ParticleEnsemble, h: &HybridHamiltonian, reg: &Regularization, dt: f64) -> Result<ParticleEnsemble> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
    }
    let k1 = rhs(kind, e, h, reg, None)?;
    let k2 = rhs(kind, &advance(e, &k1, 0.5 * dt), h, reg, None)?;
    let k3 = rhs(kind, &advance(e, &k2, 0.5 * dt), h, reg, None)?;
    let k4 = rhs(kind, &advance(e, &k3, dt), h, reg, None)?;
    let mut out = e.clone();
    let s = dt / 6.0;
    for a in 0..e.len() {
        out.q[a] += s * (k1.dq[a] + 2.0 * k2.dq[a] + 2.0 * k3.dq[a] + k4.dq[a]);
        out.p[a] += s * (k1.dp[a] + 2.0 * k2.dp[a] + 2.0 * k3.dp[a] + k4.dp[a]);
        let dr = k1.drho[a] + k2.drho[a] * 2.0 + k3.drho[a] * 2.0 + k4.drho[a];
        out.rho[a] = DensityMatrix2(e.rho[a].0 + dr * s);
    }
    out.renormalize();
    Ok(out)
}

/// Time grid and monitoring options for [`propagate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationSettings {
    pub dt: f64,
    pub t_final: f64,
    pub snapshot_times: Vec<f64>,
    /// Relative energy drift tolerance; the run aborts beyond ten times this.
    pub drift_tolerance: f64,
}

impl PropagationSettings {
    pub fn new(dt: f64, t_final: f64) -> Self {
        Self { dt, t_final, snapshot_times: Vec::new(), drift_tolerance: 1e-2 }
    }

    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    /// Step index of the snapshot nearest to `t`; ties go to the earlier step.
    pub fn snapshot_step(&self, t: f64) -> usize {
        let k = (t / self.dt - 0.5).ceil().max(0.0) as usize;
        k.min(self.steps())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidInput(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_final >= 0.0 && self.t_final.is_finite()) {
            return Err(Error::InvalidInput(format!("t_final must be non-negative, got {}", self.t_final)));
        }
        if let Some(t) = self.snapshot_times.iter().find(|&&t| !(0.0..=self.t_final + 1e-9).contains(&t)) {
            return Err(Error::InvalidInput(format!("snapshot time {t} outside [0, {}]", self.t_final)));
        }
        if !(self.drift_tolerance > 0.0) {
            return Err(Error::InvalidInput("drift tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<S> {
    /// Requested time.
    pub requested: f64,
    /// Time of the step actually stored.
    pub t: f64,
    pub state: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<DiagnosticsRecord>,
    pub snapshots: Vec<Snapshot<ParticleEnsemble>>,
    pub final_state: ParticleEnsemble,
}

impl Trajectory {
    pub fn max_drift(&self) -> f64 {
        self.records.iter().map(|r| r.energy_drift_rel).fold(0.0, f64::max)
    }
}

/// A run that stopped early, with everything recorded up to the failure.
#[derive(Debug)]
pub struct PartialRun {
    pub trajectory: Trajectory,
    pub error: Error,
}

impl From<PartialRun> for Error {
    fn from(p: PartialRun) -> Self {
        p.error
    }
}

fn relative_drift(energy: f64, e0: f64) -> f64 {
    (energy - e0).abs() / e0.abs().max(f64::MIN_POSITIVE)
}

/// Fixed-step march from `e0` to `t_final`, recording diagnostics every step
/// and snapshots at the nearest steps to the requested times.
pub fn propagate(
    kind: MethodKind,
    e0: &ParticleEnsemble,
    h: &HybridHamiltonian,
    reg: &Regularization,
    settings: &PropagationSettings,
) -> std::result::Result<Trajectory, PartialRun> {
    let fail = |trajectory: Trajectory, error: Error| PartialRun { trajectory, error };
    let empty = || Trajectory { records: Vec::new(), snapshots: Vec::new(), final_state: e0.clone() };
    if let Err(err) = settings.validate() {
        return Err(fail(empty(), err));
    }
    let mut snaps: Vec<(usize, f64)> = settings.snapshot_times.iter().map(|&t| (settings.snapshot_step(t), t)).collect();
    snaps.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let diagnostics = |e: &ParticleEnsemble, t: f64, energy0: Option<f64>| -> Result<DiagnosticsRecord> {
        let en = energy(kind, e, h, reg, None)?;
        let mut r = particle_diagnostics(e, h)?;
        r.t = t;
        r.energy = en;
        r.energy_drift_rel = energy0.map_or(0.0, |e0| relative_drift(en, e0));
        Ok(r)
    };

    let mut traj = empty();
    let first = match diagnostics(e0, 0.0, None) {
        Ok(r) => r,
        Err(err) => return Err(fail(traj, err)),
    };
    let energy0 = first.energy;
    traj.records.push(first);
    let mut next_snap = 0;
    let take = |traj: &mut Trajectory, next: &mut usize, step: usize, e: &ParticleEnsemble| {
        while *next < snaps.len() && snaps[*next].0 == step {
            traj.snapshots.push(Snapshot { requested: snaps[*next].1, t: step as f64 * settings.dt, state: e.clone() });
            *next += 1;
        }
    };
    take(&mut traj, &mut next_snap, 0, e0);

    let mut state = e0.clone();
    for step in 1..=settings.steps() {
        let t = step as f64 * settings.dt;
        state = match rk4_step(kind, &state, h, reg, settings.dt) {
            Ok(s) => s,
            Err(err) => {
                traj.final_state = state;
                return Err(fail(traj, err));
            }
        };
        let rec = match diagnostics(&state, t, Some(energy0)) {
            Ok(r) => r,
            Err(err) => {
                traj.final_state = state;
                return Err(fail(traj, err));
            }
        };
        let drift = rec.energy_drift_rel;
        traj.records.push(rec);
        take(&mut traj, &mut next_snap, step, &state);
        let limit = 10.0 * settings.drift_tolerance;
        if drift > limit {
            traj.final_state = state;
            return Err(fail(traj, Error::EnergyDrift { t, drift, limit }));
        }
    }
    traj.final_state = state;
    Ok(traj)
}

/// Time derivative of a two-axis ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivative2 {
    pub dq1: Vec<f64>,
    pub dp1: Vec<f64>,
    pub dq2: Vec<f64>,
    pub dp2: Vec<f64>,
    pub drho: Vec<PauliVector>,
}

fn coupling_2dof(
    kind: MethodKind,
    e: &Ensemble2D,
    h: &SeparableHamiltonian2,
    reg: &Regularization,
    with_gradient: bool,
) -> Result<(f64, Option<crate::backreaction::Coupling2Gradient>)> {
    match kind {
        MethodKind::Ehrenfest => Ok((0.0, None)),
        MethodKind::Koopmon => koopmon_coupling_2dof(e, h, &reg.kernel, &reg.grid, with_gradient),
        MethodKind::Bohmion => bohmion_coupling_2dof(e, h.masses, &reg.kernel, reg.grid.n_q, reg.grid.j_q, with_gradient),
    }
}

/// Conserved energy `Σ_ab w_a w_b ⟨ρ_ab, H(ζ1_a, ζ2_b)⟩ + coupling`.
pub fn energy_2dof(kind: MethodKind, e: &Ensemble2D, h: &SeparableHamiltonian2, reg: &Regularization) -> Result<f64> {
    let (b, _) = coupling_2dof(kind, e, h, reg, false)?;
    let mut acc = 0.0;
    for a in 0..e.n1() {
        for bb in 0..e.n2() {
            let z = [e.q1[a], e.p1[a], e.q2[bb], e.p2[bb]];
            acc += e.weight(a, bb) * e.rho_at(a, bb).0.trace_product(&h.value(z));
        }
    }
    Ok(acc + b)
}

pub fn rhs_2dof(kind: MethodKind, e: &Ensemble2D, h: &SeparableHamiltonian2, reg: &Regularization) -> Result<Derivative2> {
    let (n1, n2) = (e.n1(), e.n2());
    let (_, g) = coupling_2dof(kind, e, h, reg, true)?;
    let mut d = Derivative2 { dq1: vec![0.0; n1], dp1: vec![0.0; n1], dq2: vec![0.0; n2], dp2: vec![0.0; n2], drho: Vec::new() };
    for a in 0..n1 {
        for b in 0..n2 {
            let z = [e.q1[a], e.p1[a], e.q2[b], e.p2[b]];
            let c = e.rho_at(a, b).0;
            let gr = h.gradient(z);
            let w = e.weight(a, b);
            // ∂h/∂q1_a = Σ_b w_a w_b ⟨ρ_ab, ∂q1 H⟩, divided by w_a
            d.dq1[a] += e.w2[b] * c.trace_product(&gr[1]);
            d.dp1[a] -= e.w2[b] * c.trace_product(&gr[0]);
            d.dq2[b] += e.w1[a] * c.trace_product(&gr[3]);
            d.dp2[b] -= e.w1[a] * c.trace_product(&gr[2]);
            let mut x = h.value(z).vector();
            if let Some(g) = &g {
                let gb = g.db[a * n2 + b];
                for k in 0..3 {
                    x[k] += gb[k] / w;
                }
            }
            let dc = cross(x, c.vector());
            d.drho.push(PauliVector::from_parts(0.0, [2.0 * dc[0], 2.0 * dc[1], 2.0 * dc[2]]));
        }
    }
    if let Some(g) = g {
        for a in 0..n1 {
            d.dq1[a] += g.dp1[a] / e.w1[a];
            d.dp1[a] -= g.dq1[a] / e.w1[a];
        }
        for b in 0..n2 {
            d.dq2[b] += g.dp2[b] / e.w2[b];
            d.dp2[b] -= g.dq2[b] / e.w2[b];
        }
    }
    Ok(d)
}

fn advance_2dof(e: &Ensemble2D, d: &Derivative2, s: f64) -> Ensemble2D {
    let mut out = e.clone();
    for a in 0..e.n1() {
        out.q1[a] += s * d.dq1[a];
        out.p1[a] += s * d.dp1[a];
    }
    for b in 0..e.n2() {
        out.q2[b] += s * d.dq2[b];
        out.p2[b] += s * d.dp2[b];
    }
    for k in 0..e.rho.len() {
        out.rho[k] = DensityMatrix2(e.rho[k].0 + d.drho[k] * s);
    }
    out
}

pub fn rk4_step_2dof(kind: MethodKind, e: &Ensemble2D, h: &SeparableHamiltonian2, reg: &Regularization, dt: f64) -> Result<Ensemble2D> {
    let k1 = rhs_2dof(kind, e, h, reg)?;
    let k2 = rhs_2dof(kind, &advance_2dof(e, &k1, 0.5 * dt), h, reg)?;
    let k3 = rhs_2dof(kind, &advance_2dof(e, &k2, 0.5 * dt), h, reg)?;
    let k4 = rhs_2dof(kind, &advance_2dof(e, &k3, dt), h, reg)?;
    let mut out = advance_2dof(e, &k1, dt / 6.0);
    out = advance_2dof(&out, &k2, dt / 3.0);
    out = advance_2dof(&out, &k3, dt / 3.0);
    out = advance_2dof(&out, &k4, dt / 6.0);
    for r in &mut out.rho {
        r.renormalize();
    }
    Ok(out)
}
