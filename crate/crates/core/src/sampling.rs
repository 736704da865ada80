//! Quasi-random ensemble initialization from the Gaussian Wigner function of
//! the initial wavepacket.

use std::f64::consts::SQRT_2;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::ensemble::{DensityMatrix2, ParticleEnsemble};
use crate::error::{Error, Result};

const BITS: u32 = 32;

/// Direction numbers for the first two Sobol dimensions (Joe and Kuo's table:
/// dimension 1 is the van der Corput sequence, dimension 2 uses the primitive
/// polynomial x + 1 with m1 = 1).
fn direction_numbers() -> [[u32; BITS as usize]; 2] {
    let mut v = [[0u32; BITS as usize]; 2];
    for k in 0..BITS as usize {
        v[0][k] = 1u32 << (BITS as usize - 1 - k);
    }
    v[1][0] = 1u32 << (BITS - 1);
    for k in 1..BITS as usize {
        v[1][k] = v[1][k - 1] ^ (v[1][k - 1] >> 1);
    }
    v
}

/// Points `skip..skip+n` of the unscrambled 2D Sobol sequence in Gray-code order.
pub fn sobol_2d(n: usize, skip: usize) -> Vec<[f64; 2]> {
    let v = direction_numbers();
    let scale = 1.0 / (1u64 << BITS) as f64;
    let mut x = [0u32; 2];
    let mut out = Vec::with_capacity(n);
    for i in 0..skip + n {
        if i > 0 {
            let c = (i - 1).trailing_ones() as usize;
            x[0] ^= v[0][c];
            x[1] ^= v[1][c];
        }
        if i >= skip {
            out.push([x[0] as f64 * scale, x[1] as f64 * scale]);
        }
    }
    out
}

/// Standard normal quantile: Acklam's rational approximation refined by one
/// Halley step against `erfc`.
#[allow(clippy::excessive_precision)]
pub fn inverse_normal_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00, 3.754408661907416e+00];
    const P_LOW: f64 = 0.02425;

    if p.is_nan() || p <= 0.0 || p >= 1.0 {
        return if p == 0.0 {
            f64::NEG_INFINITY
        } else if p == 1.0 {
            f64::INFINITY
        } else {
            f64::NAN
        };
    }
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = 0.5 * erfc(-x / SQRT_2) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Named initial electronic states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialSpinor {
    /// `(1, 0)ᵀ`
    Ground,
    /// `(0, 1)ᵀ`
    Excited,
    /// `(1, 1)ᵀ/√2`
    Plus,
}

impl InitialSpinor {
    pub fn name(&self) -> &'static str {
        match self {
            InitialSpinor::Ground => "ground",
            InitialSpinor::Excited => "excited",
            InitialSpinor::Plus => "plus",
        }
    }

    pub fn vector(&self) -> [Complex64; 2] {
        let c = Complex64::new;
        match self {
            InitialSpinor::Ground => [c(1.0, 0.0), c(0.0, 0.0)],
            InitialSpinor::Excited => [c(0.0, 0.0), c(1.0, 0.0)],
            InitialSpinor::Plus => [c(SQRT_2.recip(), 0.0), c(SQRT_2.recip(), 0.0)],
        }
    }

    pub fn density(&self) -> DensityMatrix2 {
        match self {
            InitialSpinor::Ground => DensityMatrix2::from_bloch([0.0, 0.0, 1.0]),
            InitialSpinor::Excited => DensityMatrix2::from_bloch([0.0, 0.0, -1.0]),
            InitialSpinor::Plus => DensityMatrix2::from_bloch([1.0, 0.0, 0.0]),
        }
    }
}

impl fmt::Display for InitialSpinor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitialSpinor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground" => Ok(InitialSpinor::Ground),
            "excited" => Ok(InitialSpinor::Excited),
            "plus" => Ok(InitialSpinor::Plus),
            _ => Err(Error::InvalidInput(format!("unknown initial state '{s}' (ground, excited, plus)"))),
        }
    }
}

/// `σq = 20 / (√2 μp)`, the width tied to the initial momentum for the Tully runs.
pub fn sigma_q_from_momentum(mu_p: f64) -> f64 {
    20.0 / (SQRT_2 * mu_p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub mu_q: f64,
    pub mu_p: f64,
    pub sigma_q: f64,
    pub rho0: InitialSpinor,
    pub n: usize,
    pub sobol_skip: usize,
}

impl InitSpec {
    pub fn sigma_p(&self) -> f64 {
        0.5 / self.sigma_q
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidInput("particle count must be at least 1".into()));
        }
        if !(self.sigma_q > 0.0 && self.sigma_q.is_finite()) {
            return Err(Error::InvalidInput(format!("sigma_q must be positive, got {}", self.sigma_q)));
        }
        if !(self.mu_q.is_finite() && self.mu_p.is_finite()) {
            return Err(Error::InvalidInput("initial centre must be finite".into()));
        }
        if self.sobol_skip == 0 {
            return Err(Error::InvalidInput("sobol_skip must be at least 1 (the origin maps to -inf)".into()));
        }
        Ok(())
    }
}

/// `q_a = μq + σq Φ⁻¹(u_a)`, `p_a = μp + σp Φ⁻¹(v_a)`, `w_a = 1/N`, `ρ_a = ρ0`.
pub fn init_ensemble(spec: &InitSpec) -> Result<ParticleEnsemble> {
    spec.validate()?;
    let pts = sobol_2d(spec.n, spec.sobol_skip);
    let q = pts.iter().map(|u| spec.mu_q + spec.sigma_q * inverse_normal_cdf(u[0])).collect();
    let p = pts.iter().map(|u| spec.mu_p + spec.sigma_p() * inverse_normal_cdf(u[1])).collect();
    ParticleEnsemble::uniform(q, p, vec![spec.rho0.density(); spec.n])
}
