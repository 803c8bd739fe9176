//! Dirac matrix algebra in the Dirac representation and the pointwise
//! bilinears of a single spinor value.
//!
//! Conventions: natural units (c = 1), metric diag(1, -1, -1, -1),
//! `alpha_i = [[0, sigma_i], [sigma_i, 0]]`, `gamma0 = diag(1, 1, -1, -1)`,
//! `gamma5 = [[0, I], [I, 0]]`.
//!
//! The current `j = (psi^dag psi, psi^dag alpha psi)` and the two Lorentz
//! invariants `s = psibar psi`, `p = i psibar gamma5 psi` satisfy
//! `j.j = s^2 + p^2`, so a nonzero spinor drives the particle at speed 1
//! exactly when `(s, p) = (0, 0)`.

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub};
use std::sync::OnceLock;

use nalgebra::Matrix4;
use num_complex::Complex64;
use thiserror::Error;

pub type C64 = Complex64;
pub type Matrix4c = Matrix4<C64>;

/// Spinors with `psi^dag psi` below this are treated as wave-function nodes.
pub const DEFAULT_PSI_FLOOR: f64 = 1e-24;

/// Allowed deviation of `|omega|` from 1.
pub const UNIT_TOL: f64 = 1e-12;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpinorError {
    #[error("spinor density {density:e} below floor {floor:e} (wave-function node)")]
    NearNode { density: f64, floor: f64 },
    #[error("direction has norm {norm}, expected a unit vector")]
    NotUnit { norm: f64 },
    #[error("zero spinor")]
    ZeroSpinor,
}

/// One value of the wave function, an element of C^4.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Spinor(pub [C64; 4]);

impl Spinor {
    pub const ZERO: Spinor = Spinor([ZERO; 4]);

    pub fn new(a: C64, b: C64, c: C64, d: C64) -> Self {
        Spinor([a, b, c, d])
    }

    pub fn from_real(v: [f64; 4]) -> Self {
        Spinor(v.map(|x| C64::new(x, 0.0)))
    }

    /// `psi^dag psi`.
    pub fn norm_sqr(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Inner product `self^dag other`.
    pub fn dot(&self, other: &Spinor) -> C64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    pub fn scale(&self, z: C64) -> Spinor {
        Spinor(self.0.map(|c| c * z))
    }

    pub fn scale_real(&self, x: f64) -> Spinor {
        Spinor(self.0.map(|c| c * x))
    }

    pub fn to_vector(&self) -> nalgebra::Vector4<C64> {
        nalgebra::Vector4::from_column_slice(&self.0)
    }

    pub fn from_vector(v: &nalgebra::Vector4<C64>) -> Self {
        Spinor([v[0], v[1], v[2], v[3]])
    }

    pub fn apply(m: &Matrix4c, psi: &Spinor) -> Spinor {
        Spinor::from_vector(&(m * psi.to_vector()))
    }
}

impl Index<usize> for Spinor {
    type Output = C64;
    fn index(&self, i: usize) -> &C64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for Spinor {
    fn index_mut(&mut self, i: usize) -> &mut C64 {
        &mut self.0[i]
    }
}

impl Add for Spinor {
    type Output = Spinor;
    fn add(self, rhs: Spinor) -> Spinor {
        Spinor([
            self.0[0] + rhs.0[0],
            self.0[1] + rhs.0[1],
            self.0[2] + rhs.0[2],
            self.0[3] + rhs.0[3],
        ])
    }
}

impl AddAssign for Spinor {
    fn add_assign(&mut self, rhs: Spinor) {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a += b;
        }
    }
}

impl Sub for Spinor {
    type Output = Spinor;
    fn sub(self, rhs: Spinor) -> Spinor {
        self + (-rhs)
    }
}

impl Neg for Spinor {
    type Output = Spinor;
    fn neg(self) -> Spinor {
        Spinor(self.0.map(|c| -c))
    }
}

impl Mul<C64> for Spinor {
    type Output = Spinor;
    fn mul(self, z: C64) -> Spinor {
        self.scale(z)
    }
}

impl Mul<f64> for Spinor {
    type Output = Spinor;
    fn mul(self, x: f64) -> Spinor {
        self.scale_real(x)
    }
}

/// A Minkowski vector `(v^0, v^1, v^2, v^3)`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct FourVector(pub [f64; 4]);

impl FourVector {
    pub fn time(&self) -> f64 {
        self.0[0]
    }

    pub fn spatial(&self) -> [f64; 3] {
        [self.0[1], self.0[2], self.0[3]]
    }

    /// `(v^0)^2 - |v|^2`.
    pub fn minkowski_norm_sqr(&self) -> f64 {
        let [t, x, y, z] = self.0;
        t * t - x * x - y * y - z * z
    }
}

/// A unit vector in 3-space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Direction([f64; 3]);

impl Direction {
    pub fn new(v: [f64; 3]) -> Result<Self, SpinorError> {
        let norm = norm3(&v);
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(SpinorError::NotUnit { norm });
        }
        Ok(Direction(v))
    }

    /// Normalizes `v`; fails only for the zero (or non-finite) vector.
    pub fn normalized(v: [f64; 3]) -> Result<Self, SpinorError> {
        let norm = norm3(&v);
        if !(norm.is_finite() && norm > 0.0) {
            return Err(SpinorError::NotUnit { norm });
        }
        Ok(Direction(v.map(|c| c / norm)))
    }

    pub fn components(&self) -> [f64; 3] {
        self.0
    }
}

pub(crate) fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// The constant matrices of the Dirac representation.
///
/// The fields are public so that a deliberately corrupted algebra can be
/// fed to the validation suite as a negative control.
#[derive(Clone, Debug, PartialEq)]
pub struct DiracAlgebra {
    pub alpha: [Matrix4c; 3],
    pub gamma0: Matrix4c,
    pub gamma5: Matrix4c,
}

impl DiracAlgebra {
    pub fn dirac() -> Self {
        let c = |x: f64| C64::new(x, 0.0);
        let sigma = [
            [[ZERO, ONE], [ONE, ZERO]],
            [[ZERO, -I], [I, ZERO]],
            [[ONE, ZERO], [ZERO, -ONE]],
        ];
        let alpha = sigma.map(|s| {
            let mut m = Matrix4c::zeros();
            for r in 0..2 {
                for col in 0..2 {
                    m[(r, col + 2)] = s[r][col];
                    m[(r + 2, col)] = s[r][col];
                }
            }
            m
        });
        let gamma0 = Matrix4c::from_diagonal(&nalgebra::Vector4::new(c(1.0), c(1.0), c(-1.0), c(-1.0)));
        let mut gamma5 = Matrix4c::zeros();
        for r in 0..2 {
            gamma5[(r, r + 2)] = ONE;
            gamma5[(r + 2, r)] = ONE;
        }
        DiracAlgebra {
            alpha,
            gamma0,
            gamma5,
        }
    }

    /// `gamma^mu = gamma0 (I, alpha)`.
    pub fn gamma(&self, mu: usize) -> Matrix4c {
        match mu {
            0 => self.gamma0,
            k @ 1..=3 => self.gamma0 * self.alpha[k - 1],
            _ => panic!("gamma index {mu} out of range"),
        }
    }

    pub fn alpha_omega(&self, omega: &Direction) -> Matrix4c {
        let [x, y, z] = omega.components();
        self.alpha[0] * C64::from(x) + self.alpha[1] * C64::from(y) + self.alpha[2] * C64::from(z)
    }

    /// Current computed directly from the matrices.
    pub fn current(&self, psi: &Spinor) -> FourVector {
        let v = psi.to_vector();
        let j0 = v.dotc(&v).re;
        let mut j = [j0, 0.0, 0.0, 0.0];
        for k in 0..3 {
            j[k + 1] = v.dotc(&(self.alpha[k] * v)).re;
        }
        FourVector(j)
    }

    /// `(psibar psi, i psibar gamma5 psi)` computed directly from the matrices.
    pub fn lorentz_invariants(&self, psi: &Spinor) -> (f64, f64) {
        let v = psi.to_vector();
        let bar = self.gamma0 * v;
        let s = bar.dotc(&v).re;
        let p = (I * bar.dotc(&(self.gamma5 * v))).re;
        (s, p)
    }
}

/// The shared Dirac-representation algebra.
pub fn algebra() -> &'static DiracAlgebra {
    static ALG: OnceLock<DiracAlgebra> = OnceLock::new();
    ALG.get_or_init(DiracAlgebra::dirac)
}

// Fast paths below are written out for psi = (phi, chi) with phi, chi in C^2;
// tests pin them against the matrix forms above.

/// Probability current `(psi^dag psi, psi^dag alpha psi)`.
pub fn current(psi: &Spinor) -> FourVector {
    let [a, b, c, d] = psi.0;
    let j0 = psi.norm_sqr();
    // psi^dag alpha_i psi = 2 Re(phi^dag sigma_i chi)
    let jx = 2.0 * (a.conj() * d + b.conj() * c).re;
    let jy = 2.0 * (a.conj() * (-I * d) + b.conj() * (I * c)).re;
    let jz = 2.0 * (a.conj() * c - b.conj() * d).re;
    FourVector([j0, jx, jy, jz])
}

/// Bohmian velocity `psi^dag alpha psi / psi^dag psi` with the default floor.
pub fn bohm_velocity(psi: &Spinor) -> Result<[f64; 3], SpinorError> {
    bohm_velocity_with_floor(psi, DEFAULT_PSI_FLOOR)
}

pub fn bohm_velocity_with_floor(psi: &Spinor, floor: f64) -> Result<[f64; 3], SpinorError> {
    let j = current(psi);
    let density = j.time();
    if !(density >= floor) || density == 0.0 {
        return Err(SpinorError::NearNode { density, floor });
    }
    let [_, x, y, z] = j.0;
    Ok([x / density, y / density, z / density])
}

/// `(s, p) = (psibar psi, i psibar gamma5 psi)`.
pub fn lorentz_invariants(psi: &Spinor) -> (f64, f64) {
    let [a, b, c, d] = psi.0;
    let s = a.norm_sqr() + b.norm_sqr() - c.norm_sqr() - d.norm_sqr();
    let p = -2.0 * (a.conj() * c + b.conj() * d).im;
    (s, p)
}

/// Real differential of `(s, p)` at `psi` applied to a tangent spinor `dpsi`.
pub fn invariants_differential(psi: &Spinor, dpsi: &Spinor) -> (f64, f64) {
    let [a, b, c, d] = psi.0;
    let [da, db, dc, dd] = dpsi.0;
    let ds = 2.0 * (a.conj() * da + b.conj() * db - c.conj() * dc - d.conj() * dd).re;
    let dp = -2.0 * (a.conj() * dc + b.conj() * dd).im + 2.0 * (c.conj() * da + d.conj() * db).im;
    (ds, dp)
}

/// The 2x8 real Jacobian of `(s, p)` with respect to
/// `(Re psi_0, Im psi_0, ..., Re psi_3, Im psi_3)`.
pub fn invariants_jacobian(psi: &Spinor) -> nalgebra::SMatrix<f64, 2, 8> {
    let mut jac = nalgebra::SMatrix::<f64, 2, 8>::zeros();
    for comp in 0..4 {
        for (part, unit) in [ONE, I].into_iter().enumerate() {
            let mut e = Spinor::ZERO;
            e[comp] = unit;
            let (ds, dp) = invariants_differential(psi, &e);
            jac[(0, 2 * comp + part)] = ds;
            jac[(1, 2 * comp + part)] = dp;
        }
    }
    jac
}

/// `alpha_omega = omega . alpha`.
pub fn alpha_omega(omega: &Direction) -> Matrix4c {
    algebra().alpha_omega(omega)
}

/// Projector `(I + sign alpha_omega) / 2` onto the `sign` eigenspace.
pub fn eigen_projector(omega: &Direction, sign: Sign) -> Matrix4c {
    let a = alpha_omega(omega);
    (Matrix4c::identity() + a * C64::from(sign.value())) * C64::from(0.5)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// Normalized distance from the speed-1 set: `sqrt(s^2 + p^2) / psi^dag psi`.
///
/// Scale invariant, zero exactly on S, and equal to `sqrt(1 - |v|^2)`.
pub fn s_deviation(psi: &Spinor) -> Result<f64, SpinorError> {
    let n = psi.norm_sqr();
    if n == 0.0 {
        return Err(SpinorError::ZeroSpinor);
    }
    let (s, p) = lorentz_invariants(psi);
    Ok(s.hypot(p) / n)
}
