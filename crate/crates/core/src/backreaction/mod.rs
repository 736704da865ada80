//! Trajectory-coupling integrals for koopmons and bohmions.
//!
//! The pair tables are the literal `N×N` integrals. The dynamics does not
//! use them; it evaluates the same coupling energy through grid fields
//! (`P = Σ w K b`, `S = Σ w K`, ...), which costs `O(N·window)` per
//! evaluation instead of `O(N²·window)`, and differentiates that expression
//! under the integral sign.

mod two_dof;

use std::io::Write;

use serde::Serialize;

use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::models::{cross, dot, HybridHamiltonian, PauliVector};
use crate::par::map_range;
use crate::regularization::{Axis, KernelSpec, KernelStrip, QuadratureGrid, DENOMINATOR_FLOOR};

pub use two_dof::{
    bohmion_coupling_2dof, bohmion_pairs_factorized_2dof, koopmon_coupling_2dof, koopmon_pairs_factorized_2dof,
    AxisFactor, BohmionTables2, Coupling2Gradient, KoopmonTables2, SeparableHamiltonian2,
};

/// Grid an integral table was evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum TableGrid {
    Phase(QuadratureGrid),
    Line(Axis),
}

/// Dense `N×N` table of pair integrals, row major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairIntegralTable<T> {
    pub n: usize,
    pub values: Vec<T>,
    pub grid: TableGrid,
}

impl<T: Copy> PairIntegralTable<T> {
    pub fn get(&self, a: usize, b: usize) -> T {
        self.values[a * self.n + b]
    }
}

impl PairIntegralTable<PauliVector> {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "a,b,h0,h1,h2,h3")?;
        for a in 0..self.n {
            for b in 0..self.n {
                let v = self.get(a, b);
                writeln!(out, "{a},{b},{:e},{:e},{:e},{:e}", v.h0, v.h1, v.h2, v.h3)?;
            }
        }
        Ok(())
    }
}

impl PairIntegralTable<f64> {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "a,b,value")?;
        for a in 0..self.n {
            for b in 0..self.n {
                writeln!(out, "{a},{b},{:e}", self.get(a, b))?;
            }
        }
        Ok(())
    }
}

/// Bloch-type vectors `2c⃗` of each density matrix `c0·1 + c⃗·σ⃗`.
pub(crate) fn bloch_vectors(e: &ParticleEnsemble) -> Vec<[f64; 3]> {
    e.rho.iter().map(|r| r.bloch()).collect()
}

fn strips(spec: &KernelSpec, axis: &Axis, centers: &[f64]) -> Vec<KernelStrip> {
    map_range(centers.len(), |a| KernelStrip::new(spec, axis, centers[a]))
}

fn overlap(a: std::ops::Range<usize>, b: std::ops::Range<usize>) -> std::ops::Range<usize> {
    a.start.max(b.start)..a.end.min(b.end).max(a.start.max(b.start))
}

/// `Σ_c w_c K_c` on the phase-space grid, row major.
fn phase_denominator(grid: &QuadratureGrid, w: &[f64], kq: &[KernelStrip], kp: &[KernelStrip]) -> Vec<f64> {
    let np = grid.p.len;
    let rows = map_range(grid.q.len, |i| {
        let mut row = vec![0.0; np];
        for c in 0..w.len() {
            if !kq[c].range().contains(&i) {
                continue;
            }
            let f = w[c] * kq[c].k[i - kq[c].start];
            for (jj, j) in kp[c].range().enumerate() {
                row[j] += f * kp[c].k[jj];
            }
        }
        row
    });
    rows.concat()
}

/// Koopmon pair integrals `Î_ab = ½∫(K_a{K_b,H} − K_b{K_a,H}) / Σ_c w_c K_c`.
///
/// Only `a < b` is integrated; the lower triangle is its negative and the
/// diagonal is exactly zero.
pub fn koopmon_pairs(
    e: &ParticleEnsemble,
    h: &HybridHamiltonian,
    grid: &QuadratureGrid,
    spec: &KernelSpec,
) -> Result<PairIntegralTable<PauliVector>> {
    grid.check_coverage(&e.q, &e.p)?;
    let n = e.len();
    let np = grid.p.len;
    let kq = strips(spec, &grid.q, &e.q);
    let kp = strips(spec, &grid.p, &e.p);
    let s = phase_denominator(grid, &e.w, &kq, &kp);
    let dh: Vec<(PauliVector, PauliVector)> = map_range(grid.len(), |k| h.full_gradient(grid.q.node(k / np), grid.p.node(k % np)));
    let scale = 0.5 * grid.dq() * grid.dp();

    let upper: Vec<Vec<PauliVector>> = map_range(n, |a| {
        ((a + 1)..n)
            .map(|b| {
                let rq = overlap(kq[a].range(), kq[b].range());
                let rp = overlap(kp[a].range(), kp[b].range());
                let mut acc = PauliVector::ZERO;
                for i in rq {
                    let (ia, ib) = (i - kq[a].start, i - kq[b].start);
                    let mut row = PauliVector::ZERO;
                    for j in rp.clone() {
                        let k = i * np + j;
                        if s[k] < DENOMINATOR_FLOOR {
                            continue;
                        }
                        let (ja, jb) = (j - kp[a].start, j - kp[b].start);
                        let ka = kq[a].k[ia] * kp[a].k[ja];
                        let kb = kq[b].k[ib] * kp[b].k[jb];
                        // {K, H} = ∂_q K ∂_p H − ∂_p K ∂_q H
                        let (hq, hp) = dh[k];
                        let ga = hp * (kq[a].d1[ia] * kp[a].k[ja]) - hq * (kq[a].k[ia] * kp[a].d1[ja]);
                        let gb = hp * (kq[b].d1[ib] * kp[b].k[jb]) - hq * (kq[b].k[ib] * kp[b].d1[jb]);
                        row += (gb * ka - ga * kb) * (grid.p.weight(j) / s[k]);
                    }
                    acc += row * grid.q.weight(i);
                }
                acc * scale
            })
            .collect()
    });

    let mut values = vec![PauliVector::ZERO; n * n];
    for a in 0..n {
        for (off, v) in upper[a].iter().enumerate() {
            let b = a + 1 + off;
            values[a * n + b] = *v;
            values[b * n + a] = -*v;
        }
    }
    Ok(PairIntegralTable { n, values, grid: TableGrid::Phase(*grid) })
}

/// `Σ_c w_c K_c` on a line.
fn line_denominator(axis: &Axis, w: &[f64], k: &[KernelStrip]) -> Vec<f64> {
    let mut s = vec![0.0; axis.len];
    for c in 0..w.len() {
        for (ii, i) in k[c].range().enumerate() {
            s[i] += w[c] * k[c].k[ii];
        }
    }
    s
}

/// Bohmion pair integrals `𝓘_ab = ∫ K'_a K'_b / Σ_c w_c K_c dr` over the
/// configuration-space grid. The table does not depend on the Hamiltonian.
pub fn bohmion_pairs(e: &ParticleEnsemble, axis: &Axis, spec: &KernelSpec) -> Result<PairIntegralTable<f64>> {
    for (index, &q) in e.q.iter().enumerate() {
        if !axis.contains(q) {
            return Err(Error::GridCoverage { index, q, p: e.p[index] });
        }
    }
    let n = e.len();
    let k = strips(spec, axis, &e.q);
    let s = line_denominator(axis, &e.w, &k);
    let upper: Vec<Vec<f64>> = map_range(n, |a| {
        (a..n)
            .map(|b| {
                let mut acc = 0.0;
                for i in overlap(k[a].range(), k[b].range()) {
                    if s[i] < DENOMINATOR_FLOOR {
                        continue;
                    }
                    acc += axis.weight(i) * k[a].d1[i - k[a].start] * k[b].d1[i - k[b].start] / s[i];
                }
                acc * axis.step
            })
            .collect()
    });
    let mut values = vec![0.0; n * n];
    for a in 0..n {
        for (off, v) in upper[a].iter().enumerate() {
            let b = a + off;
            values[a * n + b] = *v;
            values[b * n + a] = *v;
        }
    }
    Ok(PairIntegralTable { n, values, grid: TableGrid::Line(*axis) })
}

/// Koopmon coupling energy from a pair table:
/// `½ Σ_ab w_a w_b ⟨i[ρ_a, ρ_b], Î_ab⟩ = −½ Σ_ab w_a w_b (b_a × b_b)·Î⃗_ab`.
pub fn koopmon_pairing_energy(e: &ParticleEnsemble, table: &PairIntegralTable<PauliVector>) -> f64 {
    let b = bloch_vectors(e);
    let mut acc = 0.0;
    for x in 0..e.len() {
        for y in 0..e.len() {
            acc += e.w[x] * e.w[y] * dot(cross(b[x], b[y]), table.get(x, y).vector());
        }
    }
    -0.5 * acc
}

/// Bohmion coupling energy `(1/8M) Σ_ab w_a w_b (2⟨ρ_a,ρ_b⟩ − 1) 𝓘_ab`
/// for unit-trace states, where `2⟨ρ_a,ρ_b⟩ − 1 = b_a·b_b`.
pub fn bohmion_pairing_energy(e: &ParticleEnsemble, table: &PairIntegralTable<f64>, mass: f64) -> f64 {
    let b = bloch_vectors(e);
    let mut acc = 0.0;
    for x in 0..e.len() {
        for y in 0..e.len() {
            acc += e.w[x] * e.w[y] * dot(b[x], b[y]) * table.get(x, y);
        }
    }
    acc / (8.0 * mass)
}

/// Derivatives of a coupling energy with respect to each particle's
/// position, momentum and Bloch vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CouplingGradient {
    pub dq: Vec<f64>,
    pub dp: Vec<f64>,
    pub db: Vec<[f64; 3]>,
}

impl CouplingGradient {
    pub fn zeros(n: usize) -> Self {
        Self { dq: vec![0.0; n], dp: vec![0.0; n], db: vec![[0.0; 3]; n] }
    }
}

fn add3(a: &mut [f64; 3], b: [f64; 3], s: f64) {
    a[0] += s * b[0];
    a[1] += s * b[1];
    a[2] += s * b[2];
}

/// Koopmon coupling energy `B = −½ ∫ P·Q / S` and, optionally, its gradient.
///
/// With `b_a` the Bloch vectors, `P = Σ w K b`, `P_p = Σ w b ∂_p K`,
/// `S = Σ w K` and `h'(q) = ∂_q h⃗_I(q)`, the vector part of `{K_b, H}` is
/// `−∂_p K_b h'`, so `Q = Σ_b w_b b_b × {K_b, h⃗} = h' × P_p`.
pub fn koopmon_coupling(
    e: &ParticleEnsemble,
    h: &HybridHamiltonian,
    grid: &QuadratureGrid,
    spec: &KernelSpec,
    with_gradient: bool,
) -> Result<(f64, Option<CouplingGradient>)> {
    grid.check_coverage(&e.q, &e.p)?;
    let n = e.len();
    let np = grid.p.len;
    let b = bloch_vectors(e);
    let kq = strips(spec, &grid.q, &e.q);
    let kp = strips(spec, &grid.p, &e.p);
    let cell = grid.dq() * grid.dp();

    // per node: weighted U = Q/S, W = (P/S) × h', E = P·Q/S²
    let rows: Vec<(Vec<[f64; 7]>, f64)> = map_range(grid.q.len, |i| {
        let mut s = vec![0.0; np];
        let mut pf = vec![[0.0; 3]; np];
        let mut pp = vec![[0.0; 3]; np];
        for c in 0..n {
            if !kq[c].range().contains(&i) {
                continue;
            }
            let kqc = kq[c].k[i - kq[c].start];
            for (jj, j) in kp[c].range().enumerate() {
                let kk = e.w[c] * kqc * kp[c].k[jj];
                s[j] += kk;
                add3(&mut pf[j], b[c], kk);
                add3(&mut pp[j], b[c], e.w[c] * kqc * kp[c].d1[jj]);
            }
        }
        let hq = h.interaction_gradient(grid.q.node(i)).vector();
        let wi = grid.q.weight(i) * cell;
        let mut out = vec![[0.0; 7]; np];
        let mut energy = 0.0;
        for j in 0..np {
            if s[j] < DENOMINATOR_FLOOR {
                continue;
            }
            let wt = wi * grid.p.weight(j);
            let q = cross(hq, pp[j]);
            let inv = 1.0 / s[j];
            let v = [pf[j][0] * inv, pf[j][1] * inv, pf[j][2] * inv];
            let pq = dot(pf[j], q);
            energy += wt * pq * inv;
            let wv = cross(v, hq);
            out[j] = [
                wt * q[0] * inv,
                wt * q[1] * inv,
                wt * q[2] * inv,
                wt * wv[0],
                wt * wv[1],
                wt * wv[2],
                wt * pq * inv * inv,
            ];
        }
        (out, energy)
    });

    let energy = -0.5 * rows.iter().map(|r| r.1).sum::<f64>();
    if !energy.is_finite() {
        return Err(Error::NonFinite { what: "koopmon coupling energy" });
    }
    if !with_gradient {
        return Ok((energy, None));
    }

    let per: Vec<(f64, f64, [f64; 3])> = map_range(n, |a| {
        let (mut gq, mut gp, mut gb) = (0.0, 0.0, [0.0; 3]);
        for (ii, i) in kq[a].range().enumerate() {
            let row = &rows[i].0;
            let (k0, k1) = (kq[a].k[ii], kq[a].d1[ii]);
            // Σ_j over the p strip of kp, kp', kp'' times node terms
            let (mut c0, mut c1, mut d1, mut d2) = (0.0, 0.0, 0.0, 0.0);
            let mut u0 = [0.0; 3];
            let mut w1 = [0.0; 3];
            for (jj, j) in kp[a].range().enumerate() {
                let t = &row[j];
                let u = [t[0], t[1], t[2]];
                let wv = [t[3], t[4], t[5]];
                let c = t[6] - dot(b[a], u);
                let d = dot(b[a], wv);
                let (p0, p1, p2) = (kp[a].k[jj], kp[a].d1[jj], kp[a].d2[jj]);
                c0 += p0 * c;
                c1 += p1 * c;
                d1 += p1 * d;
                d2 += p2 * d;
                add3(&mut u0, u, p0);
                add3(&mut w1, wv, p1);
            }
            gq += k1 * (c0 - d1);
            gp += k0 * (c1 - d2);
            add3(&mut gb, u0, k0);
            add3(&mut gb, w1, k0);
        }
        let f = -0.5 * e.w[a];
        (f * gq, f * gp, [f * gb[0], f * gb[1], f * gb[2]])
    });

    let mut g = CouplingGradient::zeros(n);
    for (a, (gq, gp, gb)) in per.into_iter().enumerate() {
        g.dq[a] = gq;
        g.dp[a] = gp;
        g.db[a] = gb;
    }
    Ok((energy, Some(g)))
}

/// Bohmion coupling energy `(1/8M) ∫ R·R / S dr` with `R = Σ w b K'` and,
/// optionally, its gradient (`dp` is identically zero).
pub fn bohmion_coupling(
    e: &ParticleEnsemble,
    mass: f64,
    axis: &Axis,
    spec: &KernelSpec,
    with_gradient: bool,
) -> Result<(f64, Option<CouplingGradient>)> {
    for (index, &q) in e.q.iter().enumerate() {
        if !axis.contains(q) {
            return Err(Error::GridCoverage { index, q, p: e.p[index] });
        }
    }
    let n = e.len();
    let b = bloch_vectors(e);
    let k = strips(spec, axis, &e.q);
    let mut s = vec![0.0; axis.len];
    let mut r = vec![[0.0; 3]; axis.len];
    for c in 0..n {
        for (ii, i) in k[c].range().enumerate() {
            s[i] += e.w[c] * k[c].k[ii];
            add3(&mut r[i], b[c], e.w[c] * k[c].d1[ii]);
        }
    }
    // per node: weighted R/S and |R|²/S²
    let mut node = vec![[0.0; 4]; axis.len];
    let mut energy = 0.0;
    for i in 0..axis.len {
        if s[i] < DENOMINATOR_FLOOR {
            continue;
        }
        let wt = axis.weight(i) * axis.step;
        let inv = 1.0 / s[i];
        let rr = dot(r[i], r[i]);
        energy += wt * rr * inv;
        node[i] = [wt * r[i][0] * inv, wt * r[i][1] * inv, wt * r[i][2] * inv, wt * rr * inv * inv];
    }
    let m8 = 8.0 * mass;
    let energy = energy / m8;
    if !energy.is_finite() {
        return Err(Error::NonFinite { what: "bohmion coupling energy" });
    }
    if !with_gradient {
        return Ok((energy, None));
    }
    let per: Vec<(f64, [f64; 3])> = map_range(n, |a| {
        let (mut gq, mut gb) = (0.0, [0.0; 3]);
        for (ii, i) in k[a].range().enumerate() {
            let t = node[i];
            let rs = [t[0], t[1], t[2]];
            gq += -2.0 * k[a].d2[ii] * dot(b[a], rs) + k[a].d1[ii] * t[3];
            add3(&mut gb, rs, 2.0 * k[a].d1[ii]);
        }
        let f = e.w[a] / m8;
        (f * gq, [f * gb[0], f * gb[1], f * gb[2]])
    });
    let mut g = CouplingGradient::zeros(n);
    for (a, (gq, gb)) in per.into_iter().enumerate() {
        g.dq[a] = gq;
        g.db[a] = gb;
    }
    Ok((energy, Some(g)))
}
