//! Populations, purity and Bloch vectors over time, and the phase-space and
//! configuration-space densities used for snapshots.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::models::{spectral, HybridHamiltonian};
use crate::par::map_range;
use crate::regularization::{trapezoid_1d, trapezoid_2d, Axis, KernelSpec, QuadratureGrid};
use crate::soft::{SoftObservables, WavepacketState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub p1: f64,
    pub p2: f64,
    pub purity: f64,
    pub bloch: [f64; 3],
    pub energy: f64,
    pub energy_drift_rel: f64,
}

pub const TIMESERIES_HEADER: &str = "t,P1,P2,purity,bx,by,bz,energy,drift";

impl DiagnosticsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.t, self.p1, self.p2, self.purity, self.bloch[0], self.bloch[1], self.bloch[2], self.energy, self.energy_drift_rel
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let v: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidInput(format!("bad time-series row '{line}': {e}")))?;
        if v.len() != 9 {
            return Err(Error::InvalidInput(format!("time-series row has {} columns, expected 9", v.len())));
        }
        Ok(Self { t: v[0], p1: v[1], p2: v[2], purity: v[3], bloch: [v[4], v[5], v[6]], energy: v[7], energy_drift_rel: v[8] })
    }

    /// A record for an SOFT state; `energy0` is the energy at `t = 0`.
    pub fn from_soft(o: &SoftObservables, energy0: f64) -> Self {
        Self {
            t: o.t,
            p1: o.p1,
            p2: o.p2,
            purity: o.purity,
            bloch: o.density.bloch(),
            energy: o.energy,
            energy_drift_rel: (o.energy - energy0).abs() / energy0.abs().max(f64::MIN_POSITIVE),
        }
    }
}

pub fn write_timeseries<W: Write>(records: &[DiagnosticsRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{TIMESERIES_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

pub fn read_timeseries<R: BufRead>(input: R) -> Result<Vec<DiagnosticsRecord>> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim) != Some(TIMESERIES_HEADER) {
        return Err(Error::InvalidInput("missing time-series header".into()));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(DiagnosticsRecord::parse_csv_row(&line)?);
        }
    }
    Ok(out)
}

/// Adiabatic populations from per-particle projections at `q_a`, purity and
/// Bloch vector of `Σ w_a ρ_a`. The energy field holds the mean-field energy
/// `Σ w_a Tr(ρ_a H(ζ_a))`; `t` and the drift are left at zero.
pub fn particle_diagnostics(e: &ParticleEnsemble, h: &HybridHamiltonian) -> Result<DiagnosticsRecord> {
    let mut p1 = 0.0;
    let mut p2 = 0.0;
    let mut energy = 0.0;
    for a in 0..e.len() {
        let s = spectral(h, e.q[a]);
        if s.degenerate {
            return Err(Error::DegeneratePes { q: e.q[a], gap: 0.0 });
        }
        p1 += e.w[a] * e.rho[a].expectation(&s.v1);
        p2 += e.w[a] * e.rho[a].expectation(&s.v2);
        energy += e.w[a] * e.rho[a].0.trace_product(&h.full(e.q[a], e.p[a]));
    }
    let agg = e.aggregate_density();
    Ok(DiagnosticsRecord { t: 0.0, p1, p2, purity: agg.purity(), bloch: agg.bloch(), energy, energy_drift_rel: 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Wigner,
    SmoothedCloud,
    Waterfall,
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FieldKind::Wigner => "wigner",
            FieldKind::SmoothedCloud => "smoothed_cloud",
            FieldKind::Waterfall => "waterfall",
        })
    }
}

/// Values on a phase-space grid (`q` outer, row major) or on a line.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub kind: FieldKind,
    pub delta: Option<f64>,
    pub t: f64,
    pub x: Axis,
    pub y: Option<Axis>,
    pub values: Vec<f64>,
}

impl DensityField {
    pub fn integral(&self) -> f64 {
        match self.y {
            Some(y) => trapezoid_2d(&self.values, &QuadratureGrid { q: self.x, p: y }),
            None => trapezoid_1d(&self.values, &self.x),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        let ny = self.y.map_or(1, |y| y.len);
        self.values[i * ny + j]
    }

    /// `∫ f dp` on each `q` node.
    pub fn q_marginal(&self) -> Vec<f64> {
        let Some(y) = self.y else { return self.values.clone() };
        self.values.chunks(y.len).map(|row| trapezoid_1d(row, &y)).collect()
    }

    /// Header lines `# key value`, then one row of comma-separated values per
    /// `x` node.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# kind {}", self.kind)?;
        writeln!(out, "# t {:e}", self.t)?;
        if let Some(d) = self.delta {
            writeln!(out, "# delta {d:e}")?;
        }
        writeln!(out, "# x {:e} {:e} {}", self.x.min, self.x.step, self.x.len)?;
        if let Some(y) = self.y {
            writeln!(out, "# y {:e} {:e} {}", y.min, y.step, y.len)?;
        }
        let ny = self.y.map_or(1, |y| y.len);
        for row in self.values.chunks(ny) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let bad = |m: &str| Error::InvalidInput(format!("density field: {m}"));
        let mut kind = None;
        let mut t = 0.0;
        let mut delta = None;
        let mut x = None;
        let mut y = None;
        let mut values = Vec::new();
        let axis = |parts: &[&str]| -> Result<Axis> {
            if parts.len() != 3 {
                return Err(bad("axis needs min, step, len"));
            }
            Ok(Axis {
                min: parts[0].parse().map_err(|_| bad("axis min"))?,
                step: parts[1].parse().map_err(|_| bad("axis step"))?,
                len: parts[2].parse().map_err(|_| bad("axis len"))?,
            })
        };
        for line in input.lines() {
            let line = line?;
            if let Some(rest) = line.strip_prefix("# ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                match parts.first() {
                    Some(&"kind") => {
                        kind = Some(match parts.get(1) {
                            Some(&"wigner") => FieldKind::Wigner,
                            Some(&"smoothed_cloud") => FieldKind::SmoothedCloud,
                            Some(&"waterfall") => FieldKind::Waterfall,
                            _ => return Err(bad("unknown kind")),
                        })
                    }
                    Some(&"t") => t = parts.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("t"))?,
                    Some(&"delta") => delta = Some(parts.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("delta"))?),
                    Some(&"x") => x = Some(axis(&parts[1..])?),
                    Some(&"y") => y = Some(axis(&parts[1..])?),
                    _ => return Err(bad("unknown header")),
                }
            } else if !line.trim().is_empty() {
                for c in line.split(',') {
                    values.push(c.trim().parse::<f64>().map_err(|_| bad("value"))?);
                }
            }
        }
        let x = x.ok_or_else(|| bad("missing x axis"))?;
        if values.len() != x.len * y.map_or(1, |a: Axis| a.len) {
            return Err(bad("value count does not match axes"));
        }
        Ok(Self { kind: kind.ok_or_else(|| bad("missing kind"))?, delta, t, x, y, values })
    }
}

/// A phase-space grid whose `q` nodes are every `stride`-th node of the
/// wavefunction grid inside `[q_lo, q_hi]`.
pub fn wigner_grid(state: &WavepacketState, q_lo: f64, q_hi: f64, q_nodes: usize, p_lo: f64, p_hi: f64, p_nodes: usize) -> Result<QuadratureGrid> {
    if q_nodes < 2 || p_nodes < 2 || !(q_hi > q_lo) || !(p_hi > p_lo) {
        return Err(Error::InvalidInput("Wigner grid needs two or more nodes on non-empty ranges".into()));
    }
    let g = &state.grid;
    let dr = g.dr();
    let first = ((q_lo - g.r_min) / dr).ceil().max(0.0) as usize;
    let last = (((q_hi - g.r_min) / dr).floor() as usize).min(g.n_points - 1);
    if last <= first {
        return Err(Error::InvalidInput("Wigner q range misses the wavefunction grid".into()));
    }
    let stride = ((last - first) / (q_nodes - 1)).max(1);
    let len = (last - first) / stride + 1;
    Ok(QuadratureGrid {
        q: Axis { min: g.r(first), step: stride as f64 * dr, len },
        p: Axis { min: p_lo, step: (p_hi - p_lo) / (p_nodes - 1) as f64, len: p_nodes },
    })
}

/// `W(q,p) = Σ_j (1/π) ∫ ψ_j*(q+y) ψ_j(q−y) e^{2ipy} dy` summed over both
/// components, by direct quadrature over the wavefunction nodes `y = m·dr`.
/// The `q` nodes of `grid` must coincide with wavefunction nodes.
pub fn wigner(state: &WavepacketState, grid: &QuadratureGrid) -> Result<DensityField> {
    let g = &state.grid;
    let dr = g.dr();
    let n = g.n_points;
    let mut rows = Vec::with_capacity(grid.q.len);
    for i in 0..grid.q.len {
        let x = (grid.q.node(i) - g.r_min) / dr;
        let j = x.round();
        if (x - j).abs() > 1e-6 || j < 0.0 || j as usize >= n {
            return Err(Error::InvalidInput(format!("Wigner q node {} is not on the wavefunction grid", grid.q.node(i))));
        }
        rows.push(j as usize);
    }
    let np = grid.p.len;
    let per_row = map_range(rows.len(), |i| {
        let j = rows[i];
        let m_max = j.min(n - 1 - j);
        // c_m = Σ_comp ψ*(q+y_m) ψ(q−y_m); c_{−m} = conj(c_m)
        let c: Vec<Complex64> = (0..=m_max)
            .map(|m| state.psi1[j + m].conj() * state.psi1[j - m] + state.psi2[j + m].conj() * state.psi2[j - m])
            .collect();
        (0..np)
            .map(|l| {
                let p = grid.p.node(l);
                let rot = Complex64::from_polar(1.0, 2.0 * p * dr);
                let mut z = rot;
                let mut acc = Complex64::new(0.0, 0.0);
                for cm in &c[1..] {
                    acc += cm * z;
                    z *= rot;
                }
                (c[0].re + 2.0 * acc.re) * dr / PI
            })
            .collect::<Vec<f64>>()
    });
    Ok(DensityField { kind: FieldKind::Wigner, delta: None, t: state.t, x: grid.q, y: Some(grid.p), values: per_row.concat() })
}

/// `D(z) = Σ_a w_a K_Δ(q − q_a) K_Δ(p − p_a)` on the grid.
pub fn smoothed_cloud(e: &ParticleEnsemble, delta: f64, grid: &QuadratureGrid, t: f64) -> Result<DensityField> {
    let k = KernelSpec::new(delta)?;
    let np = grid.p.len;
    let kp: Vec<Vec<f64>> = map_range(e.len(), |a| (0..np).map(|l| k.value(grid.p.node(l) - e.p[a])).collect());
    let rows = map_range(grid.q.len, |i| {
        let q = grid.q.node(i);
        let mut row = vec![0.0; np];
        for a in 0..e.len() {
            let wk = e.w[a] * k.value(q - e.q[a]);
            if wk == 0.0 {
                continue;
            }
            for (r, v) in row.iter_mut().zip(&kp[a]) {
                *r += wk * v;
            }
        }
        row
    });
    Ok(DensityField { kind: FieldKind::SmoothedCloud, delta: Some(delta), t, x: grid.q, y: Some(grid.p), values: rows.concat() })
}

/// `D̃(r) = Σ_a w_a K_Δ(r − q_a)`.
pub fn particle_line_density(e: &ParticleEnsemble, delta: f64, r: &Axis, t: f64) -> Result<DensityField> {
    let k = KernelSpec::new(delta)?;
    let values = map_range(r.len, |i| {
        let x = r.node(i);
        (0..e.len()).map(|a| e.w[a] * k.value(x - e.q[a])).sum()
    });
    Ok(DensityField { kind: FieldKind::Waterfall, delta: Some(delta), t, x: *r, y: None, values })
}

/// `|ψ1(r)|² + |ψ2(r)|²` on the wavefunction grid.
pub fn soft_line_density(state: &WavepacketState) -> DensityField {
    let g = &state.grid;
    DensityField {
        kind: FieldKind::Waterfall,
        delta: None,
        t: state.t,
        x: Axis { min: g.r_min, step: g.dr(), len: g.n_points },
        y: None,
        values: state.position_density(),
    }
}

/// Line densities stacked over time, one row per snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Waterfall {
    pub r: Axis,
    pub delta: Option<f64>,
    pub times: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

impl Waterfall {
    pub fn from_particles<'a>(snapshots: impl IntoIterator<Item = (f64, &'a ParticleEnsemble)>, delta: f64, r: &Axis) -> Result<Self> {
        let mut w = Waterfall { r: *r, delta: Some(delta), times: Vec::new(), rows: Vec::new() };
        for (t, e) in snapshots {
            w.times.push(t);
            w.rows.push(particle_line_density(e, delta, r, t)?.values);
        }
        Ok(w)
    }

    pub fn from_wavefunctions<'a>(states: impl IntoIterator<Item = &'a WavepacketState>) -> Result<Self> {
        let mut it = states.into_iter().peekable();
        let first = it.peek().ok_or_else(|| Error::InvalidInput("waterfall needs at least one state".into()))?;
        let r = soft_line_density(first).x;
        let mut w = Waterfall { r, delta: None, times: Vec::new(), rows: Vec::new() };
        for s in it {
            let d = soft_line_density(s);
            if d.x != r {
                return Err(Error::InvalidInput("wavefunction grids differ".into()));
            }
            w.times.push(s.t);
            w.rows.push(d.values);
        }
        Ok(w)
    }

    /// Header `t,<r nodes…>` followed by one row per time.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let head: Vec<String> = self.r.nodes().iter().map(|x| format!("{x:e}")).collect();
        writeln!(out, "t,{}", head.join(","))?;
        for (t, row) in self.times.iter().zip(&self.rows) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{t:e},{}", cells.join(","))?;
        }
        Ok(())
    }
}
