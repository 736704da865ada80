//! Multi-index closure for two classical degrees of freedom.
//!
//! With `w_(a,b) = w_a w_b`, axis-1 particles `a`, axis-2 particles `b` and a
//! separable kernel, the denominator factorizes as `S1(z1)·S2(z2)` and, for
//! Hamiltonians `H_c·1 + H_Q + h1(z1) Ĥ2(z2) + h2(z2) Ĥ1(z1)`, the 4D
//! coupling integrals reduce to products of per-axis 2D tables.

use std::sync::Arc;

use crate::ensemble::Ensemble2D;
use crate::error::{Error, Result};
use crate::models::{cross, dot, PauliVector};
use crate::par::map_range;
use crate::regularization::{Axis, GridParams, KernelSpec, KernelStrip, QuadratureGrid, DENOMINATOR_FLOOR};

type ScalarFn = Arc<dyn Fn(f64, f64) -> [f64; 3] + Send + Sync>;
type OperatorFn = Arc<dyn Fn(f64, f64) -> [PauliVector; 3] + Send + Sync>;
type ClassicalFn = Arc<dyn Fn([f64; 4]) -> (f64, [f64; 4]) + Send + Sync>;

/// The scalar `h_ℓ(z_ℓ)` and operator `Ĥ_ℓ(z_ℓ)` living on one axis, each
/// returning `[value, ∂_q, ∂_p]`.
#[derive(Clone)]
pub struct AxisFactor {
    pub scalar: ScalarFn,
    pub operator: OperatorFn,
}

impl AxisFactor {
    pub fn new(
        scalar: impl Fn(f64, f64) -> [f64; 3] + Send + Sync + 'static,
        operator: impl Fn(f64, f64) -> [PauliVector; 3] + Send + Sync + 'static,
    ) -> Self {
        Self { scalar: Arc::new(scalar), operator: Arc::new(operator) }
    }

    pub fn zero() -> Self {
        Self::new(|_, _| [0.0; 3], |_, _| [PauliVector::ZERO; 3])
    }
}

impl std::fmt::Debug for AxisFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("AxisFactor")
    }
}

/// `H(z1,z2) = H_c(z1,z2)·1 + H_Q + h1(z1) Ĥ2(z2) + h2(z2) Ĥ1(z1)`, where
/// `axis1 = (h1, Ĥ1)` and `axis2 = (h2, Ĥ2)`.
#[derive(Clone, Debug)]
pub struct SeparableHamiltonian2 {
    pub masses: [f64; 2],
    pub classical: ClassicalTerm,
    pub quantum: PauliVector,
    pub axis1: AxisFactor,
    pub axis2: AxisFactor,
}

/// Classical part `H_c(q1,p1,q2,p2) -> (value, [∂q1, ∂p1, ∂q2, ∂p2])`.
#[derive(Clone)]
pub struct ClassicalTerm(pub ClassicalFn);

impl std::fmt::Debug for ClassicalTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ClassicalPart")
    }
}

impl SeparableHamiltonian2 {
    pub fn new(
        masses: [f64; 2],
        classical: impl Fn([f64; 4]) -> (f64, [f64; 4]) + Send + Sync + 'static,
        quantum: PauliVector,
        axis1: AxisFactor,
        axis2: AxisFactor,
    ) -> Self {
        Self { masses, classical: ClassicalTerm(Arc::new(classical)), quantum, axis1, axis2 }
    }

    /// Free particles of the given masses with no quantum coupling.
    pub fn kinetic(masses: [f64; 2]) -> Self {
        Self::new(
            masses,
            move |z| {
                let e = 0.5 * z[1] * z[1] / masses[0] + 0.5 * z[3] * z[3] / masses[1];
                (e, [0.0, z[1] / masses[0], 0.0, z[3] / masses[1]])
            },
            PauliVector::ZERO,
            AxisFactor::zero(),
            AxisFactor::zero(),
        )
    }

    /// `H` at `z = (q1, p1, q2, p2)`.
    pub fn value(&self, z: [f64; 4]) -> PauliVector {
        let (hc, _) = (self.classical.0)(z);
        let s1 = (self.axis1.scalar)(z[0], z[1]);
        let o1 = (self.axis1.operator)(z[0], z[1]);
        let s2 = (self.axis2.scalar)(z[2], z[3]);
        let o2 = (self.axis2.operator)(z[2], z[3]);
        PauliVector::identity(hc) + self.quantum + o2[0] * s1[0] + o1[0] * s2[0]
    }

    /// `[∂q1 H, ∂p1 H, ∂q2 H, ∂p2 H]`.
    pub fn gradient(&self, z: [f64; 4]) -> [PauliVector; 4] {
        let (_, gc) = (self.classical.0)(z);
        let s1 = (self.axis1.scalar)(z[0], z[1]);
        let o1 = (self.axis1.operator)(z[0], z[1]);
        let s2 = (self.axis2.scalar)(z[2], z[3]);
        let o2 = (self.axis2.operator)(z[2], z[3]);
        [
            PauliVector::identity(gc[0]) + o2[0] * s1[1] + o1[1] * s2[0],
            PauliVector::identity(gc[1]) + o2[0] * s1[2] + o1[2] * s2[0],
            PauliVector::identity(gc[2]) + o2[1] * s1[0] + o1[0] * s2[1],
            PauliVector::identity(gc[3]) + o2[2] * s1[0] + o1[0] * s2[2],
        ]
    }

    /// Checks that `full` agrees with the separable form at the sample
    /// points; a mismatch means the operator is not in the supported class.
    pub fn verify_decomposition(&self, full: impl Fn([f64; 4]) -> PauliVector, samples: &[[f64; 4]], tol: f64) -> Result<()> {
        for z in samples {
            let d = (full(*z) - self.value(*z)).max_abs();
            if d > tol {
                return Err(Error::Decomposition(format!("operator differs from its separable form by {d:e} at {z:?}")));
            }
        }
        Ok(())
    }
}

/// Per-axis tables `𝓘, 𝓙` (with `h_ℓ`) and `Î, Ĵ` (with `Ĥ_ℓ`), row major.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisTables {
    pub n: usize,
    pub grid: QuadratureGrid,
    pub i: Vec<f64>,
    pub j: Vec<f64>,
    pub ih: Vec<PauliVector>,
    pub jh: Vec<PauliVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KoopmonTables2 {
    pub axis1: AxisTables,
    pub axis2: AxisTables,
}

impl KoopmonTables2 {
    /// `Î_{aba'b'} = Î1 𝓙2 + 𝓘1 Ĵ2 + 𝓘2 Ĵ1 + Î2 𝓙1`, the identity-free part of
    /// `∫∫ K_(a,b) {K_(a',b'), H} / S`.
    pub fn assembled(&self, a: usize, b: usize, a2: usize, b2: usize) -> PauliVector {
        let (t1, t2) = (&self.axis1, &self.axis2);
        let x = a * t1.n + a2;
        let y = b * t2.n + b2;
        t1.ih[x] * t2.j[y] + t2.jh[y] * t1.i[x] + t1.jh[x] * t2.i[y] + t2.ih[y] * t1.j[x]
    }

    /// `¼ Σ w⁴ ⟨i[ρ_ab, ρ_a'b'], Î_{aba'b'} − Î_{a'b'ab}⟩`.
    pub fn coupling_energy(&self, e: &Ensemble2D) -> f64 {
        let (n1, n2) = (e.n1(), e.n2());
        let b = bloch2(e);
        let mut acc = 0.0;
        for a in 0..n1 {
            for bb in 0..n2 {
                for a2 in 0..n1 {
                    for b2 in 0..n2 {
                        let w = e.weight(a, bb) * e.weight(a2, b2);
                        let d = self.assembled(a, bb, a2, b2) - self.assembled(a2, b2, a, bb);
                        acc += w * dot(cross(b[a * n2 + bb], b[a2 * n2 + b2]), d.vector());
                    }
                }
            }
        }
        -0.25 * acc
    }
}

fn bloch2(e: &Ensemble2D) -> Vec<[f64; 3]> {
    e.rho.iter().map(|r| r.bloch()).collect()
}

struct AxisKernels {
    grid: QuadratureGrid,
    w: Vec<f64>,
    kq: Vec<KernelStrip>,
    kp: Vec<KernelStrip>,
    s: Vec<f64>,
}

fn axis_kernels(q: &[f64], p: &[f64], w: &[f64], spec: &KernelSpec, params: &GridParams) -> Result<AxisKernels> {
    let grid = QuadratureGrid::around(q, p, spec, params)?;
    let kq: Vec<KernelStrip> = map_range(q.len(), |a| KernelStrip::new(spec, &grid.q, q[a]));
    let kp: Vec<KernelStrip> = map_range(p.len(), |a| KernelStrip::new(spec, &grid.p, p[a]));
    let np = grid.p.len;
    let mut s = vec![0.0; grid.len()];
    for c in 0..q.len() {
        for (ii, i) in kq[c].range().enumerate() {
            for (jj, j) in kp[c].range().enumerate() {
                s[i * np + j] += w[c] * kq[c].k[ii] * kp[c].k[jj];
            }
        }
    }
    Ok(AxisKernels { grid, w: w.to_vec(), kq, kp, s })
}

impl AxisKernels {
    /// `(K, ∂_q K, ∂_p K)` of particle `c` at node `(i, j)`, zero outside its window.
    fn at(&self, c: usize, i: usize, j: usize) -> (f64, f64, f64) {
        let (kq, kp) = (&self.kq[c], &self.kp[c]);
        if !kq.range().contains(&i) || !kp.range().contains(&j) {
            return (0.0, 0.0, 0.0);
        }
        let (ii, jj) = (i - kq.start, j - kp.start);
        (kq.k[ii] * kp.k[jj], kq.d1[ii] * kp.k[jj], kq.k[ii] * kp.d1[jj])
    }

    /// `(∂_qq K, ∂_qp K, ∂_pp K)` of particle `c` at node `(i, j)`.
    fn hessian(&self, c: usize, i: usize, j: usize) -> (f64, f64, f64) {
        let (kq, kp) = (&self.kq[c], &self.kp[c]);
        if !kq.range().contains(&i) || !kp.range().contains(&j) {
            return (0.0, 0.0, 0.0);
        }
        let (ii, jj) = (i - kq.start, j - kp.start);
        (kq.d2[ii] * kp.k[jj], kq.d1[ii] * kp.d1[jj], kq.k[ii] * kp.d2[jj])
    }
}

type TableRows = (Vec<f64>, Vec<f64>, Vec<PauliVector>, Vec<PauliVector>);

fn axis_tables(k: &AxisKernels, n: usize, factor: &AxisFactor) -> AxisTables {
    let g = &k.grid;
    let np = g.p.len;
    let cell = g.dq() * g.dp();
    let rows: Vec<TableRows> = map_range(n, |s| {
        let mut ti = vec![0.0; n];
        let mut tj = vec![0.0; n];
        let mut tih = vec![PauliVector::ZERO; n];
        let mut tjh = vec![PauliVector::ZERO; n];
        for i in k.kq[s].range() {
            let q = g.q.node(i);
            for j in k.kp[s].range() {
                let node = i * np + j;
                if k.s[node] < DENOMINATOR_FLOOR {
                    continue;
                }
                let p = g.p.node(j);
                let hs = (factor.scalar)(q, p);
                let ho = (factor.operator)(q, p);
                let (ks, _, _) = k.at(s, i, j);
                let wt = g.q.weight(i) * g.p.weight(j) * cell * ks / k.s[node];
                for s2 in 0..n {
                    let (k2, k2q, k2p) = k.at(s2, i, j);
                    if k2 == 0.0 {
                        continue;
                    }
                    ti[s2] += wt * (k2q * hs[2] - k2p * hs[1]);
                    tj[s2] += wt * k2 * hs[0];
                    tih[s2] += (ho[2] * k2q - ho[1] * k2p) * wt;
                    tjh[s2] += ho[0] * (wt * k2);
                }
            }
        }
        (ti, tj, tih, tjh)
    });
    let mut t = AxisTables { n, grid: k.grid, i: Vec::new(), j: Vec::new(), ih: Vec::new(), jh: Vec::new() };
    for (ti, tj, tih, tjh) in rows {
        t.i.extend(ti);
        t.j.extend(tj);
        t.ih.extend(tih);
        t.jh.extend(tjh);
    }
    t
}

/// Per-axis 2D tables of the factorized koopmon coupling.
pub fn koopmon_pairs_factorized_2dof(
    e: &Ensemble2D,
    h: &SeparableHamiltonian2,
    spec: &KernelSpec,
    params: &GridParams,
) -> Result<KoopmonTables2> {
    let k1 = axis_kernels(&e.q1, &e.p1, &e.w1, spec, params)?;
    let k2 = axis_kernels(&e.q2, &e.p2, &e.w2, spec, params)?;
    Ok(KoopmonTables2 { axis1: axis_tables(&k1, e.n1(), &h.axis1), axis2: axis_tables(&k2, e.n2(), &h.axis2) })
}

/// 1D tables `𝓘_ℓ = ∫ K'K'/S` and `𝓙_ℓ = ∫ KK/S` for both axes.
#[derive(Debug, Clone, PartialEq)]
pub struct BohmionTables2 {
    pub n: [usize; 2],
    pub axes: [Axis; 2],
    pub i: [Vec<f64>; 2],
    pub j: [Vec<f64>; 2],
    pub masses: [f64; 2],
}

impl BohmionTables2 {
    /// `Σ w⁴ (2⟨ρ_ab, ρ_a'b'⟩ − 1) (𝓘1 𝓙2 / 8M1 + 𝓘2 𝓙1 / 8M2)`.
    pub fn coupling_energy(&self, e: &Ensemble2D) -> f64 {
        let (n1, n2) = (e.n1(), e.n2());
        let b = bloch2(e);
        let mut acc = 0.0;
        for a in 0..n1 {
            for bb in 0..n2 {
                for a2 in 0..n1 {
                    for b2 in 0..n2 {
                        acc += e.weight(a, bb) * e.weight(a2, b2) * dot(b[a * n2 + bb], b[a2 * n2 + b2]) * self.factor(a, bb, a2, b2);
                    }
                }
            }
        }
        acc
    }

    fn factor(&self, a: usize, b: usize, a2: usize, b2: usize) -> f64 {
        let x = a * self.n[0] + a2;
        let y = b * self.n[1] + b2;
        self.i[0][x] * self.j[1][y] / (8.0 * self.masses[0]) + self.i[1][y] * self.j[0][x] / (8.0 * self.masses[1])
    }
}

struct LineKernels {
    axis: Axis,
    k: Vec<KernelStrip>,
    s: Vec<f64>,
}

fn line_kernels(q: &[f64], w: &[f64], spec: &KernelSpec, n: f64, j: u32) -> Result<LineKernels> {
    let axis = crate::regularization::build_line_grid(q, spec, n, j)?;
    let k: Vec<KernelStrip> = q.iter().map(|&c| KernelStrip::new(spec, &axis, c)).collect();
    let mut s = vec![0.0; axis.len];
    for c in 0..q.len() {
        for (ii, i) in k[c].range().enumerate() {
            s[i] += w[c] * k[c].k[ii];
        }
    }
    Ok(LineKernels { axis, k, s })
}

fn line_tables(l: &LineKernels) -> (Vec<f64>, Vec<f64>) {
    let n = l.k.len();
    let mut ti = vec![0.0; n * n];
    let mut tj = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            let (mut si, mut sj) = (0.0, 0.0);
            let lo = l.k[a].start.max(l.k[b].start);
            let hi = l.k[a].range().end.min(l.k[b].range().end);
            for i in lo..hi.max(lo) {
                if l.s[i] < DENOMINATOR_FLOOR {
                    continue;
                }
                let wt = l.axis.weight(i) / l.s[i];
                let (ia, ib) = (i - l.k[a].start, i - l.k[b].start);
                si += wt * l.k[a].d1[ia] * l.k[b].d1[ib];
                sj += wt * l.k[a].k[ia] * l.k[b].k[ib];
            }
            ti[a * n + b] = si * l.axis.step;
            tj[a * n + b] = sj * l.axis.step;
        }
    }
    (ti, tj)
}

/// Per-axis 1D tables of the factorized bohmion coupling; `n`, `j` are the
/// padding and resolution of the line grids.
pub fn bohmion_pairs_factorized_2dof(e: &Ensemble2D, masses: [f64; 2], spec: &KernelSpec, n: f64, j: u32) -> Result<BohmionTables2> {
    let l1 = line_kernels(&e.q1, &e.w1, spec, n, j)?;
    let l2 = line_kernels(&e.q2, &e.w2, spec, n, j)?;
    let (i1, j1) = line_tables(&l1);
    let (i2, j2) = line_tables(&l2);
    Ok(BohmionTables2 { n: [e.n1(), e.n2()], axes: [l1.axis, l2.axis], i: [i1, i2], j: [j1, j2], masses })
}

/// Gradient of a 2-DOF coupling energy: per-axis `dq`, `dp`, and per-pair
/// Bloch derivatives `db[a * n2 + b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling2Gradient {
    pub dq1: Vec<f64>,
    pub dp1: Vec<f64>,
    pub dq2: Vec<f64>,
    pub dp2: Vec<f64>,
    pub db: Vec<[f64; 3]>,
}

/// Coefficients of one axis' tables in the coupling energy; the energy's
/// dependence on that axis' particles is
/// `Σ_ss' (Î⃗[ss']·x[ss'] + 𝓘[ss'] y[ss'] + Ĵ⃗[ss']·z[ss'] + 𝓙[ss'] u[ss'])`.
struct Contraction {
    x: Vec<[f64; 3]>,
    y: Vec<f64>,
    z: Vec<[f64; 3]>,
    u: Vec<f64>,
}

/// Derivative of the contracted axis functional with respect to the
/// positions and momenta of that axis' particles.
fn contracted_gradient(k: &AxisKernels, n: usize, factor: &AxisFactor, c: &Contraction) -> (Vec<f64>, Vec<f64>) {
    let g = &k.grid;
    let np = g.p.len;
    let cell = g.dq() * g.dp();
    // each row contributes to every particle; reduced in row order below
    let rows: Vec<Vec<(f64, f64)>> = map_range(g.q.len, |i| {
        let mut out = vec![(0.0, 0.0); n];
        let q = g.q.node(i);
        let mut kv = vec![(0.0, 0.0, 0.0); n];
        let (mut gp, mut gq, mut mm, mut r) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for j in 0..np {
            let node = i * np + j;
            if k.s[node] < DENOMINATOR_FLOOR {
                continue;
            }
            let active: Vec<usize> = (0..n)
                .filter(|&s| {
                    kv[s] = k.at(s, i, j);
                    kv[s].0 != 0.0
                })
                .collect();
            if active.is_empty() {
                continue;
            }
            let p = g.p.node(j);
            let hs = (factor.scalar)(q, p);
            let ho = (factor.operator)(q, p);
            let (hv, hq, hp) = (ho[0].vector(), ho[1].vector(), ho[2].vector());
            for &s in &active {
                gp[s] = 0.0;
                gq[s] = 0.0;
                mm[s] = 0.0;
                r[s] = 0.0;
            }
            let mut fs = 0.0;
            for &s in &active {
                let ks = kv[s].0;
                for &s2 in &active {
                    let t = s * n + s2;
                    let dgp = dot(c.x[t], hp) + c.y[t] * hs[2];
                    let dgq = dot(c.x[t], hq) + c.y[t] * hs[1];
                    let m = dot(c.z[t], hv) + c.u[t] * hs[0];
                    let (k2, k2q, k2p) = kv[s2];
                    gp[s2] += ks * dgp;
                    gq[s2] += ks * dgq;
                    mm[s2] += ks * m;
                    r[s] += k2q * dgp - k2p * dgq + k2 * m;
                }
                fs += ks * r[s];
            }
            let inv = 1.0 / k.s[node];
            let f = fs * inv;
            let wt = g.q.weight(i) * g.p.weight(j) * cell * inv;
            for &s in &active {
                let (_, kq_, kp_) = kv[s];
                let (kqq, kqp, kpp) = k.hessian(s, i, j);
                let dq = -kq_ * r[s] - kqq * gp[s] + kqp * gq[s] - kq_ * mm[s] + f * k.w[s] * kq_;
                let dp = -kp_ * r[s] - kqp * gp[s] + kpp * gq[s] - kp_ * mm[s] + f * k.w[s] * kp_;
                out[s].0 += wt * dq;
                out[s].1 += wt * dp;
            }
        }
        out
    });
    let mut dq = vec![0.0; n];
    let mut dp = vec![0.0; n];
    for row in rows {
        for (s, (a, b)) in row.into_iter().enumerate() {
            dq[s] += a;
            dp[s] += b;
        }
    }
    (dq, dp)
}

/// Factorized koopmon coupling energy and its gradient.
pub fn koopmon_coupling_2dof(
    e: &Ensemble2D,
    h: &SeparableHamiltonian2,
    spec: &KernelSpec,
    params: &GridParams,
    with_gradient: bool,
) -> Result<(f64, Option<Coupling2Gradient>)> {
    let (n1, n2) = (e.n1(), e.n2());
    let k1 = axis_kernels(&e.q1, &e.p1, &e.w1, spec, params)?;
    let k2 = axis_kernels(&e.q2, &e.p2, &e.w2, spec, params)?;
    let tables = KoopmonTables2 { axis1: axis_tables(&k1, n1, &h.axis1), axis2: axis_tables(&k2, n2, &h.axis2) };
    let energy = tables.coupling_energy(e);
    if !energy.is_finite() {
        return Err(Error::NonFinite { what: "2-DOF koopmon coupling energy" });
    }
    if !with_gradient {
        return Ok((energy, None));
    }
    let b = bloch2(e);
    let (t1, t2) = (&tables.axis1, &tables.axis2);

    // C[κκ'] = w_κ w_κ' (b_κ × b_κ'), energy = −½ Σ C·T_{κκ'}
    let cvec = |a: usize, bb: usize, a2: usize, b2: usize| {
        let c = cross(b[a * n2 + bb], b[a2 * n2 + b2]);
        let w = e.weight(a, bb) * e.weight(a2, b2);
        [w * c[0], w * c[1], w * c[2]]
    };
    let mut c1 = Contraction { x: vec![[0.0; 3]; n1 * n1], y: vec![0.0; n1 * n1], z: vec![[0.0; 3]; n1 * n1], u: vec![0.0; n1 * n1] };
    let mut c2 = Contraction { x: vec![[0.0; 3]; n2 * n2], y: vec![0.0; n2 * n2], z: vec![[0.0; 3]; n2 * n2], u: vec![0.0; n2 * n2] };
    for a in 0..n1 {
        for a2 in 0..n1 {
            let x = a * n1 + a2;
            for bb in 0..n2 {
                for b2 in 0..n2 {
                    let y = bb * n2 + b2;
                    let c = cvec(a, bb, a2, b2);
                    let c = [-0.5 * c[0], -0.5 * c[1], -0.5 * c[2]];
                    add3(&mut c1.x[x], c, t2.j[y]);
                    c1.y[x] += dot(c, t2.jh[y].vector());
                    add3(&mut c1.z[x], c, t2.i[y]);
                    c1.u[x] += dot(c, t2.ih[y].vector());
                    add3(&mut c2.x[y], c, t1.j[x]);
                    c2.y[y] += dot(c, t1.jh[x].vector());
                    add3(&mut c2.z[y], c, t1.i[x]);
                    c2.u[y] += dot(c, t1.ih[x].vector());
                }
            }
        }
    }
    let (dq1, dp1) = contracted_gradient(&k1, n1, &h.axis1, &c1);
    let (dq2, dp2) = contracted_gradient(&k2, n2, &h.axis2, &c2);

    // ∂/∂b_κ = −½ Σ_κ' w_κ w_κ' b_κ' × (T_κκ' − T_κ'κ)
    let mut db = vec![[0.0; 3]; n1 * n2];
    for a in 0..n1 {
        for bb in 0..n2 {
            let k = a * n2 + bb;
            for a2 in 0..n1 {
                for b2 in 0..n2 {
                    let d = tables.assembled(a, bb, a2, b2) - tables.assembled(a2, b2, a, bb);
                    let w = e.weight(a, bb) * e.weight(a2, b2);
                    add3(&mut db[k], cross(b[a2 * n2 + b2], d.vector()), -0.5 * w);
                }
            }
        }
    }
    Ok((energy, Some(Coupling2Gradient { dq1, dp1, dq2, dp2, db })))
}

/// Factorized bohmion coupling energy and its gradient (`dp` are zero).
pub fn bohmion_coupling_2dof(
    e: &Ensemble2D,
    masses: [f64; 2],
    spec: &KernelSpec,
    n: f64,
    j: u32,
    with_gradient: bool,
) -> Result<(f64, Option<Coupling2Gradient>)> {
    let (n1, n2) = (e.n1(), e.n2());
    let l1 = line_kernels(&e.q1, &e.w1, spec, n, j)?;
    let l2 = line_kernels(&e.q2, &e.w2, spec, n, j)?;
    let (i1, j1) = line_tables(&l1);
    let (i2, j2) = line_tables(&l2);
    let tables = BohmionTables2 { n: [e.n1(), e.n2()], axes: [l1.axis, l2.axis], i: [i1, i2], j: [j1, j2], masses };
    let energy = tables.coupling_energy(e);
    if !energy.is_finite() {
        return Err(Error::NonFinite { what: "2-DOF bohmion coupling energy" });
    }
    if !with_gradient {
        return Ok((energy, None));
    }
    let b = bloch2(e);
    let (m1, m2) = (8.0 * masses[0], 8.0 * masses[1]);
    // energy = Σ_{aa'} (𝓘1 y1 + 𝓙1 u1) = Σ_{bb'} (𝓘2 y2 + 𝓙2 u2)
    let (mut y1, mut u1) = (vec![0.0; n1 * n1], vec![0.0; n1 * n1]);
    let (mut y2, mut u2) = (vec![0.0; n2 * n2], vec![0.0; n2 * n2]);
    let mut db = vec![[0.0; 3]; n1 * n2];
    for a in 0..n1 {
        for a2 in 0..n1 {
            let x = a * n1 + a2;
            for bb in 0..n2 {
                for b2 in 0..n2 {
                    let y = bb * n2 + b2;
                    let w = e.weight(a, bb) * e.weight(a2, b2);
                    let d = w * dot(b[a * n2 + bb], b[a2 * n2 + b2]);
                    y1[x] += d * tables.j[1][y] / m1;
                    u1[x] += d * tables.i[1][y] / m2;
                    y2[y] += d * tables.j[0][x] / m2;
                    u2[y] += d * tables.i[0][x] / m1;
                    let f = 2.0 * w * (tables.i[0][x] * tables.j[1][y] / m1 + tables.i[1][y] * tables.j[0][x] / m2);
                    add3(&mut db[a * n2 + bb], b[a2 * n2 + b2], f);
                }
            }
        }
    }
    let dq1 = line_contracted_gradient(&l1, &e.w1, &y1, &u1);
    let dq2 = line_contracted_gradient(&l2, &e.w2, &y2, &u2);
    Ok((energy, Some(Coupling2Gradient { dq1, dp1: vec![0.0; n1], dq2, dp2: vec![0.0; n2], db })))
}

/// `∂/∂q_c` of `∫ Σ_ss' (K'_s K'_s' y_ss' + K_s K_s' u_ss') / S` for symmetric `y`, `u`.
fn line_contracted_gradient(l: &LineKernels, w: &[f64], y: &[f64], u: &[f64]) -> Vec<f64> {
    let n = w.len();
    let mut out = vec![0.0; n];
    let at = |s: usize, i: usize| {
        let k = &l.k[s];
        if k.range().contains(&i) {
            let ii = i - k.start;
            (k.k[ii], k.d1[ii], k.d2[ii])
        } else {
            (0.0, 0.0, 0.0)
        }
    };
    for i in 0..l.axis.len {
        if l.s[i] < DENOMINATOR_FLOOR {
            continue;
        }
        let kv: Vec<(f64, f64, f64)> = (0..n).map(|s| at(s, i)).collect();
        let mut av = vec![0.0; n];
        let mut bv = vec![0.0; n];
        let mut fs = 0.0;
        for s in 0..n {
            for s2 in 0..n {
                av[s2] += kv[s].1 * y[s * n + s2];
                bv[s2] += kv[s].0 * u[s * n + s2];
            }
        }
        for s in 0..n {
            fs += kv[s].1 * av[s] + kv[s].0 * bv[s];
        }
        let inv = 1.0 / l.s[i];
        let f = fs * inv;
        let wt = l.axis.weight(i) * l.axis.step * inv;
        for c in 0..n {
            let (_, k1, k2) = kv[c];
            out[c] += wt * (-2.0 * k2 * av[c] - 2.0 * k1 * bv[c] + f * w[c] * k1);
        }
    }
    out
}

fn add3(a: &mut [f64; 3], b: [f64; 3], s: f64) {
    a[0] += s * b[0];
    a[1] += s * b[1];
    a[2] += s * b[2];
}
