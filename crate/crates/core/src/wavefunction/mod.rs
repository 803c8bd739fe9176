//! Analytic solutions of the free Dirac equation.
//!
//! Every model is an immutable, evaluatable `psi(t, q)` with an analytic
//! spacetime gradient. Plane waves use the phase `exp(i (E t + k . q))`
//! with `E = sqrt(m^2 + |k|^2)`: with the standard positive-energy-looking
//! spinor columns this is the sign choice for which `i gamma^mu d_mu psi = m psi`
//! holds, and it makes the Bohmian velocity of a single wave `-k / E`
//! (the particle moves against `k`). [`dirac_residual`] checks this.

pub mod quadrature;

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spinor::{algebra, eigen_projector, Direction, Sign, Spinor, C64};

const I: C64 = C64::new(0.0, 1.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("plane wave needs a nonzero wave vector")]
    ZeroWaveVector,
    #[error("superposition members have different masses ({0} vs {1})")]
    MixedMass(f64, f64),
    #[error("quadrature grid contains k = 0")]
    NodeAtOrigin,
    #[error("quadrature grid has {nodes} nodes, cap is {cap}")]
    TooManyNodes { nodes: usize, cap: usize },
    #[error("four-wave value matrix is singular")]
    SingularSystem,
    #[error("target spinor is not a nonzero element of the +1 eigenspace of alpha_z")]
    NotInPlusEigenspace,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct SpacetimePoint {
    pub t: f64,
    pub q: [f64; 3],
}

impl SpacetimePoint {
    pub fn new(t: f64, q: [f64; 3]) -> Self {
        SpacetimePoint { t, q }
    }

    pub fn origin() -> Self {
        Self::default()
    }

    /// Coordinates as `(t, x, y, z)`.
    pub fn coords(&self) -> [f64; 4] {
        [self.t, self.q[0], self.q[1], self.q[2]]
    }

    pub fn from_coords(c: [f64; 4]) -> Self {
        SpacetimePoint::new(c[0], [c[1], c[2], c[3]])
    }
}

/// An evaluatable spinor field on Minkowski space.
pub trait WaveFunctionModel: Send + Sync + Debug {
    fn evaluate(&self, x: &SpacetimePoint) -> Spinor;

    /// Value and `(d_t psi, d_x psi, d_y psi, d_z psi)`.
    fn evaluate_with_gradient(&self, x: &SpacetimePoint) -> (Spinor, [Spinor; 4]);

    fn mass(&self) -> f64;

    fn gradient(&self, x: &SpacetimePoint) -> [Spinor; 4] {
        self.evaluate_with_gradient(x).1
    }

    /// Evaluator for a fixed time slice. Models may precompute time phases.
    fn slice_at(&self, t: f64) -> Box<dyn Fn(&[f64; 3]) -> Spinor + Send + Sync + '_> {
        Box::new(move |q| self.evaluate(&SpacetimePoint::new(t, *q)))
    }
}

impl<M: WaveFunctionModel + ?Sized> WaveFunctionModel for Arc<M> {
    fn evaluate(&self, x: &SpacetimePoint) -> Spinor {
        (**self).evaluate(x)
    }
    fn evaluate_with_gradient(&self, x: &SpacetimePoint) -> (Spinor, [Spinor; 4]) {
        (**self).evaluate_with_gradient(x)
    }
    fn mass(&self) -> f64 {
        (**self).mass()
    }
    fn slice_at(&self, t: f64) -> Box<dyn Fn(&[f64; 3]) -> Spinor + Send + Sync + '_> {
        (**self).slice_at(t)
    }
}

impl<M: WaveFunctionModel + ?Sized> WaveFunctionModel for Box<M> {
    fn evaluate(&self, x: &SpacetimePoint) -> Spinor {
        (**self).evaluate(x)
    }
    fn evaluate_with_gradient(&self, x: &SpacetimePoint) -> (Spinor, [Spinor; 4]) {
        (**self).evaluate_with_gradient(x)
    }
    fn mass(&self) -> f64 {
        (**self).mass()
    }
    fn slice_at(&self, t: f64) -> Box<dyn Fn(&[f64; 3]) -> Spinor + Send + Sync + '_> {
        (**self).slice_at(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    One,
    Two,
}

impl TryFrom<u8> for Branch {
    type Error = ModelError;
    fn try_from(b: u8) -> Result<Self, ModelError> {
        match b {
            1 => Ok(Branch::One),
            2 => Ok(Branch::Two),
            other => Err(ModelError::InvalidParameter(format!("branch must be 1 or 2, got {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneWaveSpec {
    pub k: [f64; 3],
    pub branch: Branch,
    pub amplitude: C64,
}

/// `(a_-, a_+)` for mass `m` and wave vector length `|k|`.
pub fn spinor_coefficients(mass: f64, k_norm: f64) -> (f64, f64) {
    let e = (mass * mass + k_norm * k_norm).sqrt();
    let r = mass / e;
    ((1.0 - r).sqrt(), (1.0 + r).sqrt())
}

/// The unphased column spinor of branch 1 or 2.
pub fn plane_wave_spinor(mass: f64, k: [f64; 3], branch: Branch) -> Result<Spinor, ModelError> {
    let kn = crate::spinor::norm3(&k);
    if kn == 0.0 || !kn.is_finite() {
        return Err(ModelError::ZeroWaveVector);
    }
    let (am, ap) = spinor_coefficients(mass, kn);
    let [k1, k2, k3] = k.map(|c| c / kn);
    let c = |x: f64| C64::new(x, 0.0);
    Ok(match branch {
        Branch::One => Spinor::new(c(am), c(0.0), c(-ap * k3), C64::new(k1, k2) * (-ap)),
        Branch::Two => Spinor::new(c(0.0), c(am), C64::new(k1, -k2) * (-ap), c(ap * k3)),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaneWave {
    mass: f64,
    spec: PlaneWaveSpec,
    energy: f64,
    /// Amplitude times the branch column.
    column: Spinor,
}

impl PlaneWave {
    pub fn new(mass: f64, spec: PlaneWaveSpec) -> Result<Self, ModelError> {
        check_mass(mass)?;
        let column = plane_wave_spinor(mass, spec.k, spec.branch)? * spec.amplitude;
        let k2: f64 = spec.k.iter().map(|c| c * c).sum();
        Ok(PlaneWave {
            mass,
            spec,
            energy: (mass * mass + k2).sqrt(),
            column,
        })
    }

    pub fn spec(&self) -> &PlaneWaveSpec {
        &self.spec
    }

    pub fn energy(&self) -> f64 {
        self.energy
    }

    fn phase(&self, x: &SpacetimePoint) -> C64 {
        let k = &self.spec.k;
        let arg = self.energy * x.t + k[0] * x.q[0] + k[1] * x.q[1] + k[2] * x.q[2];
        C64::from_polar(1.0, arg)
    }

    /// Wave vector components of the phase derivative `(E, k)`.
    fn frequencies(&self) -> [f64; 4] {
        [self.energy, self.spec.k[0], self.spec.k[1], self.spec.k[2]]
    }
}

fn check_mass(mass: f64) -> Result<(), ModelError> {
    if mass >= 0.0 && mass.is_finite() {
        Ok(())
    } else {
        Err(ModelError::InvalidParameter(format!("mass must be finite and >= 0, got {mass}")))
    }
}

impl WaveFunctionModel for PlaneWave {
    fn evaluate(&self, x: &SpacetimePoint) -> Spinor {
        self.column * self.phase(x)
    }

    fn evaluate_with_gradient(&self, x: &SpacetimePoint) -> (Spinor, [Spinor; 4]) {
        let v = self.evaluate(x);
        let grad = self.frequencies().map(|w| v * (I * w));
        (v, grad)
    }

    fn mass(&self) -> f64 {
        self.mass
    }
}

/// Finite sum of plane waves sharing one mass.
#[derive(Clone, Debug, PartialEq)]
pub struct Superposition {
    mass: f64,
    waves: Vec<PlaneWave>,
}

impl Superposition {
    pub fn new(mass: f64, specs: &[PlaneWaveSpec]) -> Result<Self, ModelError> {
        check_mass(mass)?;
        let waves = specs
            .iter()
            .map(|s| PlaneWave::new(mass, *s))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Superposition { mass, waves })
    }

    /// Collects already built waves; all must share one mass.
    pub fn from_waves(waves: Vec<PlaneWave>) -> Result<Self, ModelError> {
        let mass = waves.first().map_or(0.0, |w| w.mass);
        if let Some(w) = waves.iter().find(|w| w.mass != mass) {
            return Err(ModelError::MixedMass(mass, w.mass));
        }
        Ok(Superposition { mass, waves })
    }

    pub fn waves(&self) -> &[PlaneWave] {
        &self.waves
    }

    pub fn scaled(&self, factor: C64) -> Superposition {
        let waves = self
            .waves
            .iter()
            .map(|w| {
                let mut spec = w.spec;
                spec.amplitude *= factor;
                PlaneWave::new(self.mass, spec).expect("scaling keeps a valid wave")
            })
            .collect();
        Superposition {
            mass: self.mass,
            waves,
        }
    }
}

impl WaveFunctionModel for Superposition {
    fn evaluate(&self, x: &SpacetimePoint) -> Spinor {
        let mut acc = Spinor::ZERO;
        for w in &self.waves {
            acc += w.evaluate(x);
        }
        acc
    }

    fn evaluate_with_gradient(&self, x: &SpacetimePoint) -> (Spinor, [Spinor; 4]) {
        let mut acc = Spinor::ZERO;
        let mut grad = [Spinor::ZERO; 4];
        for w in &self.waves {
            let (v, g) = w.evaluate_with_gradient(x);
            acc += v;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        (acc, grad)
    }

    fn mass(&self) -> f64 {
        self.mass
    }
}

/// `cos(w t) (1, 1, 1, -1) + sin(w t) (-i, -i, i, -i)`, a solution with mass `w`
/// whose current `4 (1, 0, -sin 2wt, cos 2wt)` is lightlike everywhere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CircularExample {
    omega: f64,
}

impl CircularExample {
    pub fn new(omega: f64) -> Result<Self, ModelError> {
        if !(omega > 0.0 && omega.is_finite()) {
            return Err(ModelError::InvalidParameter(format!("omega must be > 0, got {omega}")));
        }
        Ok(CircularExample { omega })
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    const COS_PART: [C64; 4] = [
        C64::new(1.0, 0.0),
        C64::new(1.0, 0.0),
        C64::new(1.0, 0.0),
        C64::new(-1.0, 0.0),
    ];
    const SIN_PART: [C64; 4] = [
        C64::new(0.0, -1.0),
        C64::new(0.0, -1.0),
        C64::new(0.0, 1.0),
        C64::new(0.0, -1.0),
    ];

    fn at(&self, t: f64) -> Spinor {
        let (s, c) = (self.omega * t).sin_cos();
        Spinor(std::array::from_fn(|i| Self::COS_PART[i] * c + Self::SIN_PART[i] * s))
    }
}

impl WaveFunctionModel for CircularExample {
    fn evaluate(&self, x: &SpacetimePoint) -> Spinor {
        self.at(x.t)
    }

    fn evaluate_with_gradient(&self, x: &SpacetimePoint) -> (Spinor, [Spinor; 4]) {
        let (s, c) = (self.omega * x.t).sin_cos();
        let w = self.omega;
        let dt = Spinor(std::array::from_fn(|i| {
            Self::COS_PART[i] * (-w * s) + Self::SIN_PART[i] * (w * c)
        }));
        (self.at(x.t), [dt, Spinor::ZERO, Spinor::ZERO, Spinor::ZERO])
    }

    fn mass(&self) -> f64 {
        self.omega
    }
}

/// Sum of models sharing one mass.
#[derive(Clone, Debug)]
pub struct SumModel {
    mass: f64,
    parts: Vec<Arc<dyn WaveFunctionModel>>,
}

impl SumModel {
    pub fn new(parts: Vec<Arc<dyn WaveFunctionModel>>) -> Result<Self, ModelError> {
        let mass = parts.first().map_or(0.0, |p| p.mass());
        if let Some(p) = parts.iter().find(|p| p.mass() != mass) {
            return Err(ModelError::MixedMass(mass, p.mass()));
        }
        Ok(SumModel { mass, parts })
    }
}

impl WaveFunctionModel for SumModel {
    fn evaluate(&self, x: &SpacetimePoint) -> Spinor {
        let mut acc = Spinor::ZERO;
        for p in &self.parts {
            acc += p.evaluate(x);
        }
        acc
    }

    fn evaluate_with_gradient(&self, x: &SpacetimePoint) -> (Spinor, [Spinor; 4]) {
        let mut acc = Spinor::ZERO;
        let mut grad = [Spinor::ZERO; 4];
        for p in &self.parts {
            let (v, g) = p.evaluate_with_gradient(x);
            acc += v;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        (acc, grad)
    }

    fn mass(&self) -> f64 {
        self.mass
    }

    fn slice_at(&self, t: f64) -> Box<dyn Fn(&[f64; 3]) -> Spinor + Send + Sync + '_> {
        let slices: Vec<_> = self.parts.iter().map(|p| p.slice_at(t)).collect();
        Box::new(move |q| {
            let mut acc = Spinor::ZERO;
            for s in &slices {
                acc += s(q);
            }
            acc
        })
    }
}

/// `factor * inner`.
#[derive(Clone, Debug)]
pub struct ScaledModel<M> {
    pub inner: M,
    pub factor: C64,
}

impl<M: WaveFunctionModel> WaveFunctionModel for ScaledModel<M> {
    fn evaluate(&self, x: &SpacetimePoint) -> Spinor {
        self.inner.evaluate(x) * self.factor
    }

    fn evaluate_with_gradient(&self, x: &SpacetimePoint) -> (Spinor, [Spinor; 4]) {
        let (v, g) = self.inner.evaluate_with_gradient(x);
        (v * self.factor, g.map(|s| s * self.factor))
    }

    fn mass(&self) -> f64 {
        self.inner.mass()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    /// Gauss-Legendre nodes per k-axis.
    pub nodes_per_axis: usize,
    /// Half-width of the k-space cube around the packet center.
    pub radius: f64,
    /// Cap on the total node count.
    pub max_total_nodes: usize,
}

impl QuadratureSpec {
    pub const DEFAULT_MAX_TOTAL_NODES: usize = 32_768;

    pub fn new(nodes_per_axis: usize, radius: f64) -> Self {
        QuadratureSpec {
            nodes_per_axis,
            radius,
            max_total_nodes: Self::DEFAULT_MAX_TOTAL_NODES,
        }
    }
}

/// Positive-branch Gaussian wave packet: a tensor-product Gauss-Legendre
/// discretization of `int exp(-|k - kc|^2 / (2 width^2)) u(k) e^{i(E t + k.q)} dk`,
/// normalized so that `psi^dag psi = 1` at `t = 0, q = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPacket {
    mass: f64,
    axes: [Vec<f64>; 3],
    /// Distinct node energies; the grid is symmetric so many nodes share one.
    energies: Vec<f64>,
    energy_index: Vec<usize>,
    coefficients: Vec<[C64; 4]>,
}

impl GaussianPacket {
    pub fn build(
        mass: f64,
        center: [f64; 3],
        width: f64,
        branch: Branch,
        quad: QuadratureSpec,
    ) -> Result<Self, ModelError> {
        check_mass(mass)?;
        if !(width > 0.0 && width.is_finite()) {
            return Err(ModelError::InvalidParameter(format!("packet width must be > 0, got {width}")));
        }
        if !(quad.radius > 0.0 && quad.radius.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "quadrature radius must be > 0, got {}",
                quad.radius
            )));
        }
        let n = quad.nodes_per_axis;
        if n == 0 {
            return Err(ModelError::InvalidParameter("quadrature needs at least one node".into()));
        }
        let total = n.pow(3);
        if total > quad.max_total_nodes {
            return Err(ModelError::TooManyNodes {
                nodes: total,
                cap: quad.max_total_nodes,
            });
        }
        let (xi, w) = quadrature::gauss_legendre(n);
        let axes: [Vec<f64>; 3] =
            std::array::from_fn(|a| xi.iter().map(|x| center[a] + quad.radius * x).collect());
        let cell = quad.radius.powi(3);
        let mut energies: Vec<f64> = Vec::new();
        let mut energy_index = Vec::with_capacity(total);
        let mut coefficients = Vec::with_capacity(total);
        for (i, kx) in axes[0].iter().enumerate() {
            for (j, ky) in axes[1].iter().enumerate() {
                for (l, kz) in axes[2].iter().enumerate() {
                    let k = [*kx, *ky, *kz];
                    let k2 = kx * kx + ky * ky + kz * kz;
                    if k2.sqrt() < 1e-9 {
                        return Err(ModelError::NodeAtOrigin);
                    }
                    let d2: f64 = (0..3).map(|a| (k[a] - center[a]).powi(2)).sum();
                    let weight = w[i] * w[j] * w[l] * cell * (-d2 / (2.0 * width * width)).exp();
                    let column = plane_wave_spinor(mass, k, branch)?;
                    let e = (mass * mass + k2).sqrt();
                    let idx = match energies.iter().position(|x| *x == e) {
                        Some(idx) => idx,
                        None => {
                            energies.push(e);
                            energies.len() - 1
                        }
                    };
                    energy_index.push(idx);
                    coefficients.push(column.scale_real(weight).0);
                }
            }
        }
        let mut packet = GaussianPacket {
            mass,
            axes,
            energies,
            energy_index,
            coefficients,
        };
        let norm = packet.evaluate(&SpacetimePoint::origin()).norm();
        if !(norm > 0.0) {
            return Err(ModelError::InvalidParameter("packet vanishes at its center".into()));
        }
        for c in &mut packet.coefficients {
            for z in c.iter_mut() {
                *z /= norm;
            }
        }
        Ok(packet)
    }

    pub fn node_count(&self) -> usize {
        self.coefficients.len()
    }

    /// Wave vector of node `n`.
    pub fn node(&self, n: usize) -> [f64; 3] {
        let m1 = self.axes[1].len();
        let m2 = self.axes[2].len();
        [self.axes[0][n / (m1 * m2)], self.axes[1][(n / m2) % m1], self.axes[2][n % m2]]
    }

    fn time_phases(&self, t: f64) -> Vec<C64> {
        self.energies.iter().map(|e| C64::from_polar(1.0, e * t)).collect()
    }

    fn axis_phases(&self, q: &[f64; 3]) -> [Vec<C64>; 3] {
        std::array::from_fn(|a| self.axes[a].iter().map(|k| C64::from_polar(1.0, k * q[a])).collect())
    }

    fn sum_with(&self, q: &[f64; 3], mut node_factor: impl FnMut(usize) -> C64) -> Spinor {
        let [ex, ey, ez] = self.axis_phases(q);
        let mut acc = [C64::new(0.0, 0.0); 4];
        let mut n = 0;
        for px in &ex {
            for py in &ey {
                let pxy = px * py;
                for pz in &ez {
                    let ph = pxy * pz * node_factor(n);
                    let c = &self.coefficients[n];
                    for s in 0..4 {
                        acc[s] += c[s] * ph;
                    }
                    n += 1;
                }
            }
        }
        Spinor(acc)
    }
}

impl WaveFunctionModel for GaussianPacket {
    fn evaluate(&self, x: &SpacetimePoint) -> Spinor {
        if x.t == 0.0 {
            return self.sum_with(&x.q, |_| C64::new(1.0, 0.0));
        }
        let phases = self.time_phases(x.t);
        self.sum_with(&x.q, |n| phases[self.energy_index[n]])
    }

    fn evaluate_with_gradient(&self, x: &SpacetimePoint) -> (Spinor, [Spinor; 4]) {
        let [ex, ey, ez] = self.axis_phases(&x.q);
        let mut val = Spinor::ZERO;
        let mut grad = [Spinor::ZERO; 4];
        let mut n = 0;
        for (px, kx) in ex.iter().zip(&self.axes[0]) {
            for (py, ky) in ey.iter().zip(&self.axes[1]) {
                for (pz, kz) in ez.iter().zip(&self.axes[2]) {
                    let e = self.energies[self.energy_index[n]];
                    let ph = px * py * pz * C64::from_polar(1.0, e * x.t);
                    let term = Spinor(self.coefficients[n]) * ph;
                    val += term;
                    for (g, w) in grad.iter_mut().zip([e, *kx, *ky, *kz]) {
                        *g += term * (I * w);
                    }
                    n += 1;
                }
            }
        }
        (val, grad)
    }

    fn mass(&self) -> f64 {
        self.mass
    }

    fn slice_at(&self, t: f64) -> Box<dyn Fn(&[f64; 3]) -> Spinor + Send + Sync + '_> {
        let phases = self.time_phases(t);
        Box::new(move |q| self.sum_with(q, |n| phases[self.energy_index[n]]))
    }
}

/// The four waves `psi1_(0,0,k), psi2_(0,0,k), psi1_(k,0,0), psi2_(k,0,0)`
/// with unit amplitude.
pub fn four_waves(mass: f64, k: f64) -> Result<[PlaneWave; 4], ModelError> {
    let one = C64::new(1.0, 0.0);
    let spec = |kv: [f64; 3], branch| PlaneWaveSpec {
        k: kv,
        branch,
        amplitude: one,
    };
    Ok([
        PlaneWave::new(mass, spec([0.0, 0.0, k], Branch::One))?,
        PlaneWave::new(mass, spec([0.0, 0.0, k], Branch::Two))?,
        PlaneWave::new(mass, spec([k, 0.0, 0.0], Branch::One))?,
        PlaneWave::new(mass, spec([k, 0.0, 0.0], Branch::Two))?,
    ])
}

/// Columns are the values of the four waves at `x`.
pub fn four_wave_matrix(mass: f64, k: f64, x: &SpacetimePoint) -> Result<Matrix4<C64>, ModelError> {
    let waves = four_waves(mass, k)?;
    let mut m = Matrix4::<C64>::zeros();
    for (col, w) in waves.iter().enumerate() {
        m.set_column(col, &w.evaluate(x).to_vector());
    }
    Ok(m)
}

/// Coefficients `c` such that `sum_i c_i w_i(x) = target` for the four waves.
pub fn speed_c_coefficients(
    mass: f64,
    k: f64,
    x: &SpacetimePoint,
    target: &Spinor,
) -> Result<[C64; 4], ModelError> {
    if !(k > 0.0) {
        return Err(ModelError::InvalidParameter(format!("k must be > 0, got {k}")));
    }
    let z = Direction::new([0.0, 0.0, 1.0]).expect("unit");
    let projected = Spinor::apply(&eigen_projector(&z, Sign::Plus), target);
    let n = target.norm();
    if n == 0.0 || (projected - *target).norm() > 1e-12 * n {
        return Err(ModelError::NotInPlusEigenspace);
    }
    let m = four_wave_matrix(mass, k, x)?;
    let c: Vector4<C64> = m.lu().solve(&target.to_vector()).ok_or(ModelError::SingularSystem)?;
    Ok([c[0], c[1], c[2], c[3]])
}

/// Superposition of the four waves whose value at `x` is `target`.
pub fn speed_c_model(
    mass: f64,
    k: f64,
    x: &SpacetimePoint,
    target: &Spinor,
) -> Result<Superposition, ModelError> {
    let c = speed_c_coefficients(mass, k, x, target)?;
    let waves = four_waves(mass, k)?;
    let specs: Vec<PlaneWaveSpec> = waves
        .iter()
        .zip(c)
        .map(|(w, c)| PlaneWaveSpec {
            amplitude: c,
            ..*w.spec()
        })
        .collect();
    Superposition::new(mass, &specs)
}

/// `|| i gamma^mu d_mu psi - m psi || / max(||psi||, floor)`.
pub fn dirac_residual(model: &dyn WaveFunctionModel, x: &SpacetimePoint) -> f64 {
    const FLOOR: f64 = 1e-300;
    let alg = algebra();
    let (psi, grad) = model.evaluate_with_gradient(x);
    let mut lhs = Vector4::<C64>::zeros();
    for (mu, g) in grad.iter().enumerate() {
        lhs += alg.gamma(mu) * g.to_vector() * I;
    }
    let r = lhs - psi.to_vector() * C64::from(model.mass());
    r.norm() / psi.norm().max(FLOOR)
}
