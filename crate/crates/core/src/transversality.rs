//! Locating the speed-1 set `Sigma = psi^-1(S)` inside a compact spacetime box
//! and measuring how transversally `psi` meets `S` there.
//!
//! `S` is cut out by `F = (s, p) = 0`. All thresholds act on the normalized
//! map `G = F / psi^dag psi`, whose norm is the s-deviation `sqrt(1 - |v|^2)`,
//! so verdicts do not change when the model is rescaled.

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::{SMatrix, SVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spinor::{invariants_differential, lorentz_invariants, SpinorError, C64, DEFAULT_PSI_FLOOR};
use crate::wavefunction::{four_waves, ModelError, PlaneWaveSpec, SpacetimePoint, SumModel, Superposition, WaveFunctionModel};

pub type Jacobian = SMatrix<f64, 2, 4>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransversalityError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompactBox {
    pub t: [f64; 2],
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    /// Grid points along t, x, y, z.
    pub resolution: [usize; 4],
}

impl CompactBox {
    pub fn validate(&self) -> Result<(), TransversalityError> {
        let lo = self.lower();
        let hi = self.upper();
        for a in 0..4 {
            if !(lo[a] < hi[a]) || !lo[a].is_finite() || !hi[a].is_finite() {
                return Err(TransversalityError::InvalidBox(format!("axis {a}: need lo < hi, got [{}, {}]", lo[a], hi[a])));
            }
            if self.resolution[a] < 2 {
                return Err(TransversalityError::InvalidBox(format!("axis {a}: resolution must be >= 2")));
            }
        }
        Ok(())
    }

    pub fn lower(&self) -> [f64; 4] {
        [self.t[0], self.lo[0], self.lo[1], self.lo[2]]
    }

    pub fn upper(&self) -> [f64; 4] {
        [self.t[1], self.hi[0], self.hi[1], self.hi[2]]
    }

    pub fn grid_len(&self) -> usize {
        self.resolution.iter().product()
    }

    fn spacing(&self) -> [f64; 4] {
        let (lo, hi) = (self.lower(), self.upper());
        std::array::from_fn(|a| (hi[a] - lo[a]) / (self.resolution[a] - 1) as f64)
    }

    fn unflatten(&self, mut i: usize) -> [usize; 4] {
        let mut idx = [0; 4];
        for a in (0..4).rev() {
            idx[a] = i % self.resolution[a];
            i /= self.resolution[a];
        }
        idx
    }

    fn flatten(&self, idx: [usize; 4]) -> usize {
        idx.iter().zip(&self.resolution).fold(0, |acc, (i, r)| acc * r + i)
    }

    fn grid_point(&self, idx: [usize; 4]) -> [f64; 4] {
        let (lo, h) = (self.lower(), self.spacing());
        std::array::from_fn(|a| lo[a] + h[a] * idx[a] as f64)
    }

    fn clamp(&self, x: [f64; 4]) -> [f64; 4] {
        let (lo, hi) = (self.lower(), self.upper());
        std::array::from_fn(|a| x[a].clamp(lo[a], hi[a]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransversalityOptions {
    /// Convergence threshold on the normalized residual.
    pub newton_tol: f64,
    pub max_iter: usize,
    pub margin_tol: f64,
    pub degenerate_tol: f64,
    /// Fraction of grid points below `degenerate_tol` that marks the model degenerate.
    pub degenerate_fraction: f64,
    /// Multiplier on the grid Lipschitz estimate used for the seed threshold.
    pub seed_safety: f64,
    pub dedup_tol: f64,
    pub psi_floor: f64,
    pub max_reported_points: usize,
}

impl Default for TransversalityOptions {
    fn default() -> Self {
        TransversalityOptions {
            newton_tol: 1e-11,
            max_iter: 40,
            margin_tol: 1e-8,
            degenerate_tol: 1e-10,
            degenerate_fraction: 0.01,
            seed_safety: 1.0,
            dedup_tol: 1e-7,
            psi_floor: DEFAULT_PSI_FLOOR,
            max_reported_points: 256,
        }
    }
}

impl TransversalityOptions {
    pub fn validate(&self) -> Result<(), TransversalityError> {
        let positive = [
            ("newton_tol", self.newton_tol),
            ("margin_tol", self.margin_tol),
            ("degenerate_tol", self.degenerate_tol),
            ("seed_safety", self.seed_safety),
            ("dedup_tol", self.dedup_tol),
            ("psi_floor", self.psi_floor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TransversalityError::InvalidOptions(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.degenerate_fraction) || self.max_iter == 0 {
            return Err(TransversalityError::InvalidOptions("degenerate_fraction in [0,1], max_iter >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaPoint {
    pub x: SpacetimePoint,
    /// `|F(psi(x))|`.
    pub residual: f64,
    /// `|F| / psi^dag psi`.
    pub normalized_residual: f64,
    /// Second singular value of the normalized 2x4 Jacobian.
    pub margin: f64,
    /// `psi^dag psi` at `x`.
    pub psi_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Empty,
    TransverseCodim2,
    Degenerate,
    MarginBelowTol,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransversalityReport {
    pub verdict: Verdict,
    /// Smallest margin over all converged points, `None` when there are none.
    pub min_margin: Option<f64>,
    pub seed_count: usize,
    pub converged_count: usize,
    pub failed_count: usize,
    pub grid_points: usize,
    /// Fraction of grid points with normalized residual below `degenerate_tol`.
    pub degenerate_fraction: f64,
    pub seed_threshold: f64,
    /// At most `max_reported_points` points, evenly thinned in seed order.
    pub points: Vec<SigmaPoint>,
    pub points_truncated: bool,
}

/// `F(psi(x)) = (s, p)`.
pub fn constraint_value(model: &dyn WaveFunctionModel, x: &SpacetimePoint, psi_floor: f64) -> Result<(f64, f64), SpinorError> {
    let psi = model.evaluate(x);
    let density = psi.norm_sqr();
    if !(density > psi_floor) {
        return Err(SpinorError::ZeroSpinor);
    }
    Ok(lorentz_invariants(&psi))
}

/// Rows are the spacetime gradients `(d_t, d_x, d_y, d_z)` of `s(psi)` and `p(psi)`.
pub fn constraint_jacobian(model: &dyn WaveFunctionModel, x: &SpacetimePoint) -> Jacobian {
    let (psi, grad) = model.evaluate_with_gradient(x);
    jacobian_from(&psi, &grad)
}

fn jacobian_from(psi: &crate::spinor::Spinor, grad: &[crate::spinor::Spinor; 4]) -> Jacobian {
    let mut j = Jacobian::zeros();
    for (mu, g) in grad.iter().enumerate() {
        let (ds, dp) = invariants_differential(psi, g);
        j[(0, mu)] = ds;
        j[(1, mu)] = dp;
    }
    j
}

struct Local {
    g: SVector<f64, 2>,
    /// Jacobian of the normalized map G.
    jg: Jacobian,
    f_norm: f64,
    density: f64,
}

fn local(model: &dyn WaveFunctionModel, x: [f64; 4], floor: f64) -> Option<Local> {
    let (psi, grad) = model.evaluate_with_gradient(&SpacetimePoint::from_coords(x));
    let density = psi.norm_sqr();
    if !(density > floor) {
        return None;
    }
    let (s, p) = lorentz_invariants(&psi);
    let jf = jacobian_from(&psi, &grad);
    let g = SVector::<f64, 2>::new(s, p) / density;
    let mut drho = SMatrix::<f64, 1, 4>::zeros();
    for (mu, d) in grad.iter().enumerate() {
        drho[mu] = 2.0 * psi.dot(d).re;
    }
    let jg = (jf - g * drho) / density;
    Some(Local {
        g,
        jg,
        f_norm: s.hypot(p),
        density,
    })
}

fn second_singular_value(j: &Jacobian) -> f64 {
    // Squared singular values of a 2xN matrix are the eigenvalues of J J^T;
    // the small one is taken as det / large to avoid cancellation.
    let m = j * j.transpose();
    let (a, b, c) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
    let large = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
    if large > 0.0 {
        ((a * c - b * b).max(0.0) / large).sqrt()
    } else {
        0.0
    }
}

/// Margin at `x`: second singular value of the Jacobian of `F / psi^dag psi`.
pub fn transversality_margin(model: &dyn WaveFunctionModel, x: &SpacetimePoint, psi_floor: f64) -> Option<f64> {
    local(model, x.coords(), psi_floor).map(|l| second_singular_value(&l.jg))
}

enum NewtonOutcome {
    Converged(SigmaPoint),
    Failed,
}

fn newton(model: &dyn WaveFunctionModel, bx: &CompactBox, x0: [f64; 4], opts: &TransversalityOptions) -> NewtonOutcome {
    let mut x = x0;
    let Some(mut cur) = local(model, x, opts.psi_floor) else {
        return NewtonOutcome::Failed;
    };
    for _ in 0..=opts.max_iter {
        let r = cur.g.norm();
        if r < opts.newton_tol {
            return NewtonOutcome::Converged(SigmaPoint {
                x: SpacetimePoint::from_coords(x),
                residual: cur.f_norm,
                normalized_residual: r,
                margin: second_singular_value(&cur.jg),
                psi_norm: cur.density,
            });
        }
        let svd = cur.jg.svd(true, true);
        let Ok(pinv) = svd.pseudo_inverse(1e-14 * svd.singular_values.max().max(1e-300)) else {
            return NewtonOutcome::Failed;
        };
        let step: SVector<f64, 4> = -(pinv * cur.g);
        if !step.iter().all(|v| v.is_finite()) {
            return NewtonOutcome::Failed;
        }
        // Backtrack until the residual decreases; steps are clipped to the box.
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..20 {
            let trial = bx.clamp(std::array::from_fn(|a| x[a] + lambda * step[a]));
            if let Some(l) = local(model, trial, opts.psi_floor) {
                if l.g.norm() < r {
                    accepted = Some((trial, l));
                    break;
                }
            }
            lambda *= 0.5;
        }
        match accepted {
            Some((xn, l)) => {
                x = xn;
                cur = l;
            }
            None => return NewtonOutcome::Failed,
        }
    }
    NewtonOutcome::Failed
}

struct GridScan {
    residual: Vec<f64>,
    degenerate_fraction: f64,
    threshold: f64,
}

fn scan(model: &dyn WaveFunctionModel, bx: &CompactBox, opts: &TransversalityOptions) -> GridScan {
    let residual: Vec<f64> = (0..bx.grid_len())
        .into_par_iter()
        .map(|i| {
            let x = SpacetimePoint::from_coords(bx.grid_point(bx.unflatten(i)));
            let psi = model.evaluate(&x);
            let d = psi.norm_sqr();
            if d > opts.psi_floor {
                let (s, p) = lorentz_invariants(&psi);
                s.hypot(p) / d
            } else {
                f64::NAN
            }
        })
        .collect();
    let below = residual.iter().filter(|r| **r < opts.degenerate_tol).count();

    // Largest change of the residual across a grid edge, per axis. Their sum
    // bounds how far below its corner values the residual can dip in a cell.
    let mut edge = [0.0f64; 4];
    for (i, r) in residual.iter().enumerate() {
        let idx = bx.unflatten(i);
        for a in 0..4 {
            if idx[a] + 1 < bx.resolution[a] {
                let mut n = idx;
                n[a] += 1;
                let d = (residual[bx.flatten(n)] - r).abs();
                if d.is_finite() {
                    edge[a] = edge[a].max(d);
                }
            }
        }
    }
    GridScan {
        degenerate_fraction: below as f64 / residual.len() as f64,
        threshold: opts.seed_safety * edge.iter().sum::<f64>(),
        residual,
    }
}

/// Seeds Newton from every grid cell whose smallest corner residual is below
/// the adaptive threshold, starting at that corner.
fn seeds(bx: &CompactBox, grid: &GridScan) -> Vec<[f64; 4]> {
    let cells: [usize; 4] = std::array::from_fn(|a| bx.resolution[a] - 1);
    let n_cells: usize = cells.iter().product();
    let mut out = Vec::new();
    for c in 0..n_cells {
        let mut rem = c;
        let mut base = [0usize; 4];
        for a in (0..4).rev() {
            base[a] = rem % cells[a];
            rem /= cells[a];
        }
        let mut best: Option<(f64, [usize; 4])> = None;
        for corner in 0..16 {
            let idx: [usize; 4] = std::array::from_fn(|a| base[a] + ((corner >> (3 - a)) & 1));
            let r = grid.residual[bx.flatten(idx)];
            if r.is_finite() && best.is_none_or(|(b, _)| r < b) {
                best = Some((r, idx));
            }
        }
        if let Some((r, idx)) = best {
            if r <= grid.threshold {
                out.push(bx.grid_point(idx));
            }
        }
    }
    out
}

struct Located {
    points: Vec<SigmaPoint>,
    seed_count: usize,
    failed: usize,
}

fn locate(model: &dyn WaveFunctionModel, bx: &CompactBox, grid: &GridScan, opts: &TransversalityOptions) -> Located {
    let seeds = seeds(bx, grid);
    let outcomes: Vec<NewtonOutcome> = seeds.par_iter().map(|x0| newton(model, bx, *x0, opts)).collect();
    let mut seen = BTreeSet::new();
    let mut points = Vec::new();
    let mut failed = 0;
    for o in outcomes {
        match o {
            NewtonOutcome::Converged(p) => {
                let key: [i64; 4] = std::array::from_fn(|a| (p.x.coords()[a] / opts.dedup_tol).round() as i64);
                if seen.insert(key) {
                    points.push(p);
                }
            }
            NewtonOutcome::Failed => failed += 1,
        }
    }
    Located {
        points,
        seed_count: seeds.len(),
        failed,
    }
}

/// Converged, deduplicated points of `Sigma` in the box. Seeds that do not
/// converge are dropped.
pub fn locate_sigma(
    model: &dyn WaveFunctionModel,
    bx: &CompactBox,
    opts: &TransversalityOptions,
) -> Result<Vec<SigmaPoint>, TransversalityError> {
    bx.validate()?;
    opts.validate()?;
    let grid = scan(model, bx, opts);
    Ok(locate(model, bx, &grid, opts).points)
}

pub fn transversality_report(
    model: &dyn WaveFunctionModel,
    bx: &CompactBox,
    opts: &TransversalityOptions,
) -> Result<TransversalityReport, TransversalityError> {
    bx.validate()?;
    opts.validate()?;
    let grid = scan(model, bx, opts);
    let located = locate(model, bx, &grid, opts);
    let pts = &located.points;
    let min_margin = pts.iter().map(|p| p.margin).reduce(f64::min);

    let verdict = if grid.degenerate_fraction > opts.degenerate_fraction {
        Verdict::Degenerate
    } else if pts.is_empty() {
        Verdict::Empty
    } else if pts.iter().all(|p| p.margin > opts.margin_tol && p.psi_norm > opts.psi_floor) {
        Verdict::TransverseCodim2
    } else {
        Verdict::MarginBelowTol
    };

    let cap = opts.max_reported_points;
    let points: Vec<SigmaPoint> = if pts.len() <= cap {
        pts.clone()
    } else {
        (0..cap).map(|i| pts[i * pts.len() / cap]).collect()
    };
    Ok(TransversalityReport {
        verdict,
        min_margin,
        seed_count: located.seed_count,
        converged_count: pts.len(),
        failed_count: located.failed,
        grid_points: bx.grid_len(),
        degenerate_fraction: grid.degenerate_fraction,
        seed_threshold: grid.threshold,
        points_truncated: points.len() < pts.len(),
        points,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub coefficients: [[f64; 2]; 4],
    pub verdict: Verdict,
    pub min_margin: Option<f64>,
    pub converged_count: usize,
    pub degenerate_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationStats {
    pub amplitude: f64,
    pub wave_number: f64,
    pub seed: u64,
    pub base_verdict: Verdict,
    pub base_degenerate_fraction: f64,
    pub transverse_fraction: f64,
    /// Minimum over trials of each trial's smallest margin.
    pub min_margin: Option<f64>,
    pub median_min_margin: Option<f64>,
    pub trials: Vec<TrialOutcome>,
}

/// Adds the four waves of wave number `k` with i.i.d. standard complex
/// Gaussian coefficients times `amplitude` to `base`, once per trial, and
/// classifies every perturbed model. Trial `i` draws from ChaCha stream `i`.
pub fn perturb_and_compare(
    base: Arc<dyn WaveFunctionModel>,
    amplitude: f64,
    trials: usize,
    k: f64,
    bx: &CompactBox,
    seed: u64,
    opts: &TransversalityOptions,
) -> Result<PerturbationStats, TransversalityError> {
    if !(amplitude >= 0.0 && amplitude.is_finite()) {
        return Err(TransversalityError::InvalidOptions(format!("amplitude must be >= 0, got {amplitude}")));
    }
    let waves = four_waves(base.mass(), k)?;
    let base_report = transversality_report(base.as_ref(), bx, opts)?;

    let mut outcomes = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let coefficients: [[f64; 2]; 4] = std::array::from_fn(|_| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            [re * std::f64::consts::FRAC_1_SQRT_2, im * std::f64::consts::FRAC_1_SQRT_2]
        });
        let specs: Vec<PlaneWaveSpec> = waves
            .iter()
            .zip(&coefficients)
            .map(|(w, c)| PlaneWaveSpec {
                amplitude: C64::new(c[0], c[1]) * amplitude,
                ..*w.spec()
            })
            .collect();
        let delta: Arc<dyn WaveFunctionModel> = Arc::new(Superposition::new(base.mass(), &specs)?);
        let model = SumModel::new(vec![base.clone(), delta])?;
        let report = transversality_report(&model, bx, opts)?;
        outcomes.push(TrialOutcome {
            trial,
            coefficients,
            verdict: report.verdict,
            min_margin: report.min_margin,
            converged_count: report.converged_count,
            degenerate_fraction: report.degenerate_fraction,
        });
    }

    let transverse = outcomes.iter().filter(|o| o.verdict == Verdict::TransverseCodim2).count();
    let mut margins: Vec<f64> = outcomes.iter().filter_map(|o| o.min_margin).collect();
    margins.sort_by(f64::total_cmp);
    Ok(PerturbationStats {
        amplitude,
        wave_number: k,
        seed,
        base_verdict: base_report.verdict,
        base_degenerate_fraction: base_report.degenerate_fraction,
        transverse_fraction: if trials == 0 { 0.0 } else { transverse as f64 / trials as f64 },
        min_margin: margins.first().copied(),
        median_min_margin: (!margins.is_empty()).then(|| margins[margins.len() / 2]),
        trials: outcomes,
    })
}
