//! Seeded invariant sweeps over every module, used by `dirac-bohm validate`.
//!
//! Checks that concern the gamma matrices take the algebra as a parameter so a
//! corrupted representation can be run through the same suite.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{integrate, IntegratorOptions};
use crate::spinor::{
    bohm_velocity, current, eigen_projector, invariants_jacobian, lorentz_invariants, s_deviation, DiracAlgebra,
    Direction, Matrix4c, Sign, Spinor, C64,
};
use crate::transversality::constraint_jacobian;
use crate::wavefunction::{
    dirac_residual, four_wave_matrix, Branch, CircularExample, GaussianPacket, PlaneWave, PlaneWaveSpec, QuadratureSpec,
    SpacetimePoint, Superposition, WaveFunctionModel,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub tolerance: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
}

/// `worst <= tolerance` passes.
fn upper(name: &str, worst: f64, tolerance: f64, samples: usize) -> Check {
    Check {
        name: name.into(),
        passed: worst <= tolerance,
        worst,
        tolerance,
        samples,
    }
}

/// `worst >= tolerance` passes.
fn lower(name: &str, worst: f64, tolerance: f64, samples: usize) -> Check {
    Check {
        name: name.into(),
        passed: worst >= tolerance,
        worst,
        tolerance,
        samples,
    }
}

pub fn random_spinor(rng: &mut impl Rng) -> Spinor {
    Spinor(std::array::from_fn(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))))
}

pub fn random_direction(rng: &mut impl Rng) -> Direction {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = crate::spinor::norm3(&v);
        if n > 0.1 && n <= 1.0 {
            return Direction::normalized(v).expect("nonzero");
        }
    }
}

fn random_event(rng: &mut impl Rng, scale: f64) -> SpacetimePoint {
    SpacetimePoint::new(rng.gen_range(-scale..scale), std::array::from_fn(|_| rng.gen_range(-scale..scale)))
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Runs every check with the given algebra. Spinor sweeps use `n` samples.
pub fn run_suite(alg: &DiracAlgebra, seed: u64, n: usize) -> ValidationReport {
    let mut checks = Vec::new();
    checks.push(clifford(alg));
    checks.extend(current_identity(alg, seed, n));
    checks.push(fast_paths_agree(alg, seed, n));
    checks.extend(speed_c_structure(seed));
    checks.push(submersion(seed));
    checks.extend(model_checks(seed));
    checks.extend(trajectory_checks());
    ValidationReport {
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

fn clifford(alg: &DiracAlgebra) -> Check {
    let eta = [1.0, -1.0, -1.0, -1.0];
    let mut worst: f64 = 0.0;
    for mu in 0..4 {
        for nu in 0..4 {
            let (a, b) = (alg.gamma(mu), alg.gamma(nu));
            let target = if mu == nu { Matrix4c::identity() * C64::from(2.0 * eta[mu]) } else { Matrix4c::zeros() };
            worst = worst.max((a * b + b * a - target).norm());
        }
        let g5 = alg.gamma5;
        worst = worst.max((alg.gamma(mu) * g5 + g5 * alg.gamma(mu)).norm());
    }
    worst = worst.max((alg.gamma5 * alg.gamma5 - Matrix4c::identity()).norm());
    upper("clifford_relations", worst, 1e-14, 21)
}

fn current_identity(alg: &DiracAlgebra, seed: u64, n: usize) -> [Check; 2] {
    let mut r = rng(seed, 1);
    let (mut identity, mut causal): (f64, f64) = (0.0, f64::INFINITY);
    for _ in 0..n {
        let psi = random_spinor(&mut r);
        let rho2 = psi.norm_sqr().powi(2);
        let jj = alg.current(&psi).minkowski_norm_sqr();
        let (s, p) = alg.lorentz_invariants(&psi);
        identity = identity.max((jj - (s * s + p * p)).abs() / rho2);
        causal = causal.min(jj / rho2);
    }
    [
        upper("current_identity", identity, 1e-10, n),
        lower("current_not_spacelike", causal, -1e-12, n),
    ]
}

fn fast_paths_agree(alg: &DiracAlgebra, seed: u64, n: usize) -> Check {
    let mut r = rng(seed, 2);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let psi = random_spinor(&mut r);
        let (j, jm) = (current(&psi), alg.current(&psi));
        let (f, fm) = (lorentz_invariants(&psi), alg.lorentz_invariants(&psi));
        let scale = psi.norm_sqr();
        for k in 0..4 {
            worst = worst.max((j.0[k] - jm.0[k]).abs() / scale);
        }
        worst = worst.max((f.0 - fm.0).abs() / scale).max((f.1 - fm.1).abs() / scale);
    }
    upper("fast_paths_match_matrices", worst, 1e-14, n)
}

fn speed_c_structure(seed: u64) -> Vec<Check> {
    let mut r = rng(seed, 3);
    let (mut vel, mut sdev): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let omega = random_direction(&mut r);
        let psi = Spinor::apply(&eigen_projector(&omega, Sign::Plus), &random_spinor(&mut r));
        let v = bohm_velocity(&psi).expect("projection of a random spinor is nonzero");
        let w = omega.components();
        vel = vel.max((0..3).map(|k| (v[k] - w[k]).abs()).fold(0.0, f64::max));
        sdev = sdev.max(s_deviation(&psi).unwrap());
    }
    let basis = [
        ([1.0, 0.0, 1.0, 0.0], 1.0),
        ([0.0, 1.0, 0.0, -1.0], 1.0),
        ([1.0, 0.0, -1.0, 0.0], -1.0),
        ([0.0, 1.0, 0.0, 1.0], -1.0),
    ];
    let mut eig: f64 = 0.0;
    for (v, sign) in basis {
        let u = bohm_velocity(&Spinor::from_real(v)).unwrap();
        eig = eig.max(u[0].abs()).max(u[1].abs()).max((u[2] - sign).abs());
    }
    let mut min_sv = f64::INFINITY;
    for _ in 0..100 {
        let m = four_wave_matrix(1.0, 1.0, &random_event(&mut r, 10.0)).unwrap();
        min_sv = min_sv.min(m.singular_values().min());
    }
    // Speed bound for arbitrary spinors.
    let mut speed: f64 = 0.0;
    for _ in 0..10_000 {
        let v = bohm_velocity(&random_spinor(&mut r)).unwrap();
        speed = speed.max(crate::spinor::norm3(&v));
    }
    vec![
        upper("projected_velocity_is_omega", vel, 1e-10, 100),
        upper("projected_s_deviation", sdev, 1e-10, 100),
        upper("alpha_z_eigenbasis_velocity", eig, 1e-12, 4),
        lower("four_waves_independent", min_sv, 1e-3, 100),
        upper("speed_at_most_one", speed, 1.0 + 1e-12, 10_000),
    ]
}

fn submersion(seed: u64) -> Check {
    let mut r = rng(seed, 4);
    let mut min_sv = f64::INFINITY;
    for _ in 0..2000 {
        let omega = random_direction(&mut r);
        let psi = Spinor::apply(&eigen_projector(&omega, Sign::Plus), &random_spinor(&mut r));
        let psi = psi.scale_real(1.0 / psi.norm());
        min_sv = min_sv.min(invariants_jacobian(&psi).singular_values().min());
    }
    lower("invariants_submersion_on_s", min_sv, 1e-6, 2000)
}

fn bundled_models() -> Vec<(&'static str, Arc<dyn WaveFunctionModel>)> {
    let one = C64::new(1.0, 0.0);
    let wave = |k, branch| PlaneWaveSpec { k, branch, amplitude: one };
    vec![
        ("plane_wave_branch1", Arc::new(PlaneWave::new(1.0, wave([0.3, -0.4, 1.2], Branch::One)).unwrap())),
        ("plane_wave_branch2", Arc::new(PlaneWave::new(1.0, wave([-0.8, 0.1, 0.5], Branch::Two)).unwrap())),
        (
            "superposition",
            Arc::new(
                Superposition::new(
                    0.7,
                    &[
                        wave([0.0, 0.0, 1.0], Branch::One),
                        PlaneWaveSpec { amplitude: C64::new(0.2, -0.5), ..wave([1.0, 0.0, 0.0], Branch::Two) },
                        PlaneWaveSpec { amplitude: C64::new(-0.3, 0.1), ..wave([0.2, 0.9, -0.4], Branch::One) },
                    ],
                )
                .unwrap(),
            ),
        ),
        ("circular", Arc::new(CircularExample::new(1.3).unwrap())),
        (
            "gaussian_packet",
            Arc::new(GaussianPacket::build(1.0, [0.0, 0.0, 1.0], 0.2, Branch::One, QuadratureSpec::new(5, 0.4)).unwrap()),
        ),
    ]
}

fn model_checks(seed: u64) -> Vec<Check> {
    let mut r = rng(seed, 5);
    let models = bundled_models();
    let (mut residual, mut grad, mut jac): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let h = 1e-5;
    for (_, m) in &models {
        for _ in 0..100 {
            residual = residual.max(dirac_residual(m.as_ref(), &random_event(&mut r, 3.0)));
        }
        for _ in 0..10 {
            let x = random_event(&mut r, 3.0).coords();
            let g = m.gradient(&SpacetimePoint::from_coords(x));
            let j = constraint_jacobian(m.as_ref(), &SpacetimePoint::from_coords(x));
            let scale = m.evaluate(&SpacetimePoint::from_coords(x)).norm().max(1e-300);
            for mu in 0..4 {
                let (mut xp, mut xm) = (x, x);
                xp[mu] += h;
                xm[mu] -= h;
                let (pp, pm) = (m.evaluate(&SpacetimePoint::from_coords(xp)), m.evaluate(&SpacetimePoint::from_coords(xm)));
                let fd = (pp - pm) * (0.5 / h);
                grad = grad.max((fd - g[mu]).norm() / scale);
                let (fp, fm) = (lorentz_invariants(&pp), lorentz_invariants(&pm));
                let fds = (fp.0 - fm.0) / (2.0 * h);
                let fdp = (fp.1 - fm.1) / (2.0 * h);
                jac = jac.max(((fds - j[(0, mu)]).abs() + (fdp - j[(1, mu)]).abs()) / (scale * scale));
            }
        }
    }
    let n = models.len();
    vec![
        upper("dirac_residual", residual, 1e-10, 100 * n),
        upper("gradient_finite_difference", grad, 1e-6, 40 * n),
        upper("constraint_jacobian_finite_difference", jac, 1e-6, 40 * n),
    ]
}

fn trajectory_checks() -> Vec<Check> {
    let omega = 1.0;
    let c = CircularExample::new(omega).unwrap();
    // v = (0, -sin 2wt, cos 2wt): a circle of radius 1/(2w) centred at q0 - (0, 1/(2w), 0).
    let q0 = [0.0, 0.0, 0.0];
    let center = [0.0, -0.5 / omega, 0.0];
    let traj = integrate(&c, q0, 0.0, PI / omega, &IntegratorOptions::default());
    let (radial, speed, closure) = match &traj {
        Ok(t) => {
            let mut radial: f64 = 0.0;
            let mut speed: f64 = 0.0;
            for s in &t.samples {
                let r = ((s.q[1] - center[1]).powi(2) + (s.q[2] - center[2]).powi(2)).sqrt();
                radial = radial.max((r - 0.5 / omega).abs()).max(s.q[0].abs());
                speed = speed.max((s.speed - 1.0).abs());
            }
            let end = t.end().q;
            let closure = (0..3).map(|k| (end[k] - q0[k]).abs()).fold(0.0, f64::max);
            (radial, speed, closure)
        }
        Err(_) => (f64::INFINITY, f64::INFINITY, f64::INFINITY),
    };
    vec![
        upper("circular_orbit_radius", radial, 1e-6, 1),
        upper("circular_orbit_speed", speed, 1e-9, 1),
        upper("circular_orbit_closes", closure, 1e-6, 1),
    ]
}
