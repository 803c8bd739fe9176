//! |psi|^2-distributed ensembles: rejection sampling, equivariance checks and
//! the Monte Carlo frequency of near-speed-1 episodes.
//!
//! Randomness is drawn in fixed-size batches, batch `b` from ChaCha stream `b`
//! of the configured seed, so serial and parallel runs produce the same draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{integrate, DynamicsError, IntegratorOptions, Region3, Termination};
use crate::wavefunction::WaveFunctionModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("density is numerically zero on the sampling region (scanned max {max:e})")]
    DegenerateDensity { max: f64 },
    #[error("{excluded} of {total} trajectories were lost (more than 10%)")]
    TooManyLost { excluded: usize, total: usize },
    #[error("invalid ensemble parameters: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingRegion {
    pub region: Region3,
    pub n: usize,
    pub seed: u64,
}

impl SamplingRegion {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.n == 0 {
            return Err(EnsembleError::Invalid("sample count must be >= 1".into()));
        }
        validate_region(&self.region)
    }
}

fn validate_region(r: &Region3) -> Result<(), EnsembleError> {
    if (0..3).any(|a| !(r.lo[a] < r.hi[a]) || !r.lo[a].is_finite() || !r.hi[a].is_finite()) {
        return Err(EnsembleError::Invalid(format!("region needs lo < hi per axis, got {r:?}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    /// Scan points per axis used to bound the density.
    pub scan_resolution: usize,
    pub envelope_factor: f64,
    pub batch_size: usize,
    /// Scanned maxima below this are treated as an identically zero density.
    pub min_density: f64,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        SamplerOptions {
            scan_resolution: 64,
            envelope_factor: 1.2,
            batch_size: 4096,
            min_density: 1e-200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub t: f64,
    pub positions: Vec<[f64; 3]>,
    pub proposals: u64,
    pub envelope: f64,
    /// Proposals whose density exceeded the envelope (should stay 0).
    pub envelope_violations: u64,
}

/// Draws `region.n` i.i.d. positions from `psi^dag psi(t, .)` restricted to the box.
pub fn sample_positions(
    model: &dyn WaveFunctionModel,
    t: f64,
    region: &SamplingRegion,
    opts: &SamplerOptions,
) -> Result<SampleSet, EnsembleError> {
    region.validate()?;
    if opts.scan_resolution < 2 || opts.batch_size == 0 || !(opts.envelope_factor >= 1.0) {
        return Err(EnsembleError::Invalid(format!("bad sampler options {opts:?}")));
    }
    let slice = model.slice_at(t);
    let density = |q: &[f64; 3]| slice(q).norm_sqr();
    let r = &region.region;

    let res = opts.scan_resolution;
    let max = (0..res * res)
        .into_par_iter()
        .map(|ij| {
            let (i, j) = (ij / res, ij % res);
            let mut m: f64 = 0.0;
            for k in 0..res {
                let q = [grid_coord(r, 0, i, res), grid_coord(r, 1, j, res), grid_coord(r, 2, k, res)];
                m = m.max(density(&q));
            }
            m
        })
        .reduce(|| 0.0, f64::max);
    if !(max > opts.min_density) {
        return Err(EnsembleError::DegenerateDensity { max });
    }
    let envelope = opts.envelope_factor * max;

    let threads = rayon::current_num_threads().max(1);
    let mut positions = Vec::with_capacity(region.n);
    let mut proposals = 0u64;
    let mut violations = 0u64;
    let mut next_batch = 0u64;
    while positions.len() < region.n {
        let batches: Vec<(Vec<[f64; 3]>, u64)> = (next_batch..next_batch + threads as u64)
            .into_par_iter()
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(region.seed);
                rng.set_stream(b);
                let mut accepted = Vec::new();
                let mut over = 0u64;
                for _ in 0..opts.batch_size {
                    let q: [f64; 3] = std::array::from_fn(|a| rng.gen_range(r.lo[a]..r.hi[a]));
                    let u: f64 = rng.gen();
                    let d = density(&q);
                    if d > envelope {
                        over += 1;
                    }
                    if u * envelope < d {
                        accepted.push(q);
                    }
                }
                (accepted, over)
            })
            .collect();
        next_batch += threads as u64;
        for (accepted, over) in batches {
            if positions.len() >= region.n {
                break;
            }
            proposals += opts.batch_size as u64;
            violations += over;
            let take = (region.n - positions.len()).min(accepted.len());
            positions.extend_from_slice(&accepted[..take]);
        }
    }
    Ok(SampleSet {
        t,
        positions,
        proposals,
        envelope,
        envelope_violations: violations,
    })
}

fn grid_coord(r: &Region3, axis: usize, i: usize, res: usize) -> f64 {
    r.lo[axis] + (r.hi[axis] - r.lo[axis]) * i as f64 / (res - 1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub region: Region3,
    pub bins: [usize; 3],
    /// Midpoint-rule points per axis inside each bin for the reference density.
    pub sub_resolution: usize,
}

impl HistogramSpec {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        validate_region(&self.region)?;
        if self.bins.iter().any(|b| *b == 0) || self.sub_resolution == 0 {
            return Err(EnsembleError::Invalid("histogram bins and sub_resolution must be >= 1".into()));
        }
        Ok(())
    }

    fn total_bins(&self) -> usize {
        self.bins.iter().product()
    }

    fn bin_of(&self, q: &[f64; 3]) -> Option<usize> {
        let r = &self.region;
        let mut idx = 0;
        for a in 0..3 {
            if !(q[a] >= r.lo[a] && q[a] <= r.hi[a]) {
                return None;
            }
            let f = (q[a] - r.lo[a]) / (r.hi[a] - r.lo[a]);
            let i = ((f * self.bins[a] as f64) as usize).min(self.bins[a] - 1);
            idx = idx * self.bins[a] + i;
        }
        Some(idx)
    }

    /// Normalized bin masses of `psi^dag psi(t, .)`.
    pub fn reference(&self, model: &dyn WaveFunctionModel, t: f64) -> Vec<f64> {
        let slice = model.slice_at(t);
        let r = &self.region;
        let [nx, ny, nz] = self.bins;
        let sub = self.sub_resolution;
        let width: [f64; 3] = std::array::from_fn(|a| (r.hi[a] - r.lo[a]) / self.bins[a] as f64);
        let mut mass: Vec<f64> = (0..nx * ny * nz)
            .into_par_iter()
            .map(|b| {
                let (i, j, k) = (b / (ny * nz), (b / nz) % ny, b % nz);
                let mut acc = 0.0;
                for si in 0..sub {
                    for sj in 0..sub {
                        for sk in 0..sub {
                            let off = |cell: usize, s: usize, a: usize| {
                                r.lo[a] + width[a] * (cell as f64 + (s as f64 + 0.5) / sub as f64)
                            };
                            let q = [off(i, si, 0), off(j, sj, 1), off(k, sk, 2)];
                            acc += slice(&q).norm_sqr();
                        }
                    }
                }
                acc
            })
            .collect();
        let total: f64 = mass.iter().sum();
        if total > 0.0 {
            for m in &mut mass {
                *m /= total;
            }
        }
        mass
    }

    /// `(1/2) sum |empirical - reference|` over bins. Points outside the box are ignored.
    pub fn total_variation(&self, points: &[[f64; 3]], reference: &[f64]) -> f64 {
        let mut counts = vec![0usize; self.total_bins()];
        let mut inside = 0usize;
        for q in points {
            if let Some(b) = self.bin_of(q) {
                counts[b] += 1;
                inside += 1;
            }
        }
        if inside == 0 {
            return 1.0;
        }
        0.5 * counts
            .iter()
            .zip(reference)
            .map(|(c, p)| (*c as f64 / inside as f64 - p).abs())
            .sum::<f64>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transported {
    pub end: [f64; 3],
    pub max_speed: f64,
    pub termination: Termination,
}

/// Integrates every sample from `t1` to `t2`, in input order.
pub fn transport(
    model: &dyn WaveFunctionModel,
    samples: &[[f64; 3]],
    t1: f64,
    t2: f64,
    opts: &IntegratorOptions,
) -> Result<Vec<Transported>, EnsembleError> {
    samples
        .par_iter()
        .map(|q0| {
            if t2 == t1 {
                let v = crate::dynamics::velocity_field(model, t1, q0, opts.psi_floor).ok();
                return Ok(Transported {
                    end: *q0,
                    max_speed: v.map_or(0.0, |v| crate::spinor::norm3(&v)),
                    termination: if v.is_some() { Termination::Completed } else { Termination::NearNode },
                });
            }
            match integrate(model, *q0, t1, t2, opts) {
                Ok(traj) => Ok(Transported {
                    end: traj.end().q,
                    max_speed: traj.max_speed,
                    termination: traj.termination,
                }),
                Err(DynamicsError::NearNode { .. }) => Ok(Transported {
                    end: *q0,
                    max_speed: 0.0,
                    termination: Termination::NearNode,
                }),
                Err(e) => Err(EnsembleError::from(e)),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceResult {
    pub t1: f64,
    pub t2: f64,
    pub distance: f64,
    pub used: usize,
    pub excluded: usize,
    pub excluded_fraction: f64,
}

/// Total-variation distance between transported endpoints and `psi^dag psi(t2, .)`
/// on the histogram. Endpoints outside the histogram box, early terminations
/// and node hits are excluded and counted.
pub fn equivariance_from_transport(
    model: &dyn WaveFunctionModel,
    transported: &[Transported],
    t1: f64,
    t2: f64,
    hist: &HistogramSpec,
) -> Result<EquivarianceResult, EnsembleError> {
    hist.validate()?;
    let total = transported.len();
    let ends: Vec<[f64; 3]> = transported
        .iter()
        .filter(|tr| tr.termination == Termination::Completed && hist.region.contains(&tr.end))
        .map(|tr| tr.end)
        .collect();
    let excluded = total - ends.len();
    if total == 0 || excluded as f64 > 0.1 * total as f64 {
        return Err(EnsembleError::TooManyLost { excluded, total });
    }
    let reference = hist.reference(model, t2);
    Ok(EquivarianceResult {
        t1,
        t2,
        distance: hist.total_variation(&ends, &reference),
        used: ends.len(),
        excluded,
        excluded_fraction: excluded as f64 / total as f64,
    })
}

/// Transports `samples` (drawn at `t1`) to `t2` and measures the distance.
pub fn equivariance_distance(
    model: &dyn WaveFunctionModel,
    samples: &[[f64; 3]],
    t1: f64,
    t2: f64,
    hist: &HistogramSpec,
    opts: &IntegratorOptions,
) -> Result<EquivarianceResult, EnsembleError> {
    let transported = transport(model, samples, t1, t2, opts)?;
    equivariance_from_transport(model, &transported, t1, t2, hist)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedCFraction {
    pub epsilon: f64,
    pub fraction: f64,
}

/// Fraction of trajectories whose maximal speed reaches `1 - epsilon`.
/// Monotone non-decreasing in `epsilon` by construction.
pub fn speed_c_fractions(transported: &[Transported], epsilons: &[f64]) -> Vec<SpeedCFraction> {
    let n = transported.len().max(1) as f64;
    epsilons
        .iter()
        .map(|&epsilon| {
            let hits = transported.iter().filter(|t| t.max_speed >= 1.0 - epsilon).count();
            SpeedCFraction {
                epsilon,
                fraction: hits as f64 / n,
            }
        })
        .collect()
}

/// Samples at `t1`, integrates to `t2`, and reports the speed-1 fractions.
pub fn speed_c_fraction(
    model: &dyn WaveFunctionModel,
    t1: f64,
    t2: f64,
    region: &SamplingRegion,
    epsilons: &[f64],
    sampler: &SamplerOptions,
    opts: &IntegratorOptions,
) -> Result<Vec<SpeedCFraction>, EnsembleError> {
    if epsilons.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
        return Err(EnsembleError::Invalid("epsilons must lie in (0, 1)".into()));
    }
    let samples = sample_positions(model, t1, region, sampler)?;
    let transported = transport(model, &samples.positions, t1, t2, opts)?;
    Ok(speed_c_fractions(&transported, epsilons))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub t1: f64,
    pub t2: f64,
    pub region: SamplingRegion,
    pub epsilons: Vec<f64>,
    pub histogram: Option<HistogramSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub n_requested: usize,
    pub n_accepted: usize,
    pub proposals: u64,
    pub envelope: f64,
    pub envelope_violations: u64,
    pub t1: f64,
    pub t2: f64,
    pub speed_c_fractions: Vec<SpeedCFraction>,
    pub max_speed: f64,
    /// Termination counts; they sum to `n_accepted`.
    pub completed_count: usize,
    pub near_node_count: usize,
    pub left_domain_count: usize,
    pub max_samples_count: usize,
    /// Binning-noise control: distance of the untransported sample at `t1`.
    pub equivariance_control: Option<EquivarianceResult>,
    pub equivariance: Option<EquivarianceResult>,
}

/// One sampling pass and one transport pass feeding every diagnostic.
pub fn run_ensemble(
    model: &dyn WaveFunctionModel,
    spec: &EnsembleSpec,
    sampler: &SamplerOptions,
    opts: &IntegratorOptions,
) -> Result<EnsembleReport, EnsembleError> {
    run_ensemble_detailed(model, spec, sampler, opts).map(|(report, _, _)| report)
}

/// As [`run_ensemble`], also returning the initial positions and transport outcomes.
pub fn run_ensemble_detailed(
    model: &dyn WaveFunctionModel,
    spec: &EnsembleSpec,
    sampler: &SamplerOptions,
    opts: &IntegratorOptions,
) -> Result<(EnsembleReport, Vec<[f64; 3]>, Vec<Transported>), EnsembleError> {
    if !(spec.t1 <= spec.t2) {
        return Err(EnsembleError::Invalid("ensemble needs t1 <= t2".into()));
    }
    if spec.epsilons.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
        return Err(EnsembleError::Invalid("epsilons must lie in (0, 1)".into()));
    }
    if let Some(h) = &spec.histogram {
        h.validate()?;
    }
    let samples = sample_positions(model, spec.t1, &spec.region, sampler)?;
    let transported = transport(model, &samples.positions, spec.t1, spec.t2, opts)?;

    let count = |kind: Termination| transported.iter().filter(|t| t.termination == kind).count();

    let (control, equivariance) = match &spec.histogram {
        Some(h) => {
            let at_start: Vec<Transported> = samples
                .positions
                .iter()
                .map(|q| Transported {
                    end: *q,
                    max_speed: 0.0,
                    termination: Termination::Completed,
                })
                .collect();
            let control = equivariance_from_transport(model, &at_start, spec.t1, spec.t1, h)?;
            let eq = equivariance_from_transport(model, &transported, spec.t1, spec.t2, h)?;
            (Some(control), Some(eq))
        }
        None => (None, None),
    };

    let report = EnsembleReport {
        n_requested: spec.region.n,
        n_accepted: samples.positions.len(),
        proposals: samples.proposals,
        envelope: samples.envelope,
        envelope_violations: samples.envelope_violations,
        t1: spec.t1,
        t2: spec.t2,
        speed_c_fractions: speed_c_fractions(&transported, &spec.epsilons),
        max_speed: transported.iter().map(|t| t.max_speed).fold(0.0, f64::max),
        completed_count: count(Termination::Completed),
        near_node_count: count(Termination::NearNode),
        left_domain_count: count(Termination::LeftDomain),
        max_samples_count: count(Termination::MaxSamples),
        equivariance_control: control,
        equivariance,
    };
    Ok((report, samples.positions, transported))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spinor::C64;
    use crate::wavefunction::{Branch, CircularExample, PlaneWave, PlaneWaveSpec};

    fn unit_box() -> Region3 {
        Region3 { lo: [-1.0; 3], hi: [1.0; 3] }
    }

    /// One-sample KS statistic against the uniform law on [lo, hi].
    fn ks_uniform(mut xs: Vec<f64>, lo: f64, hi: f64) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, x)| {
                let f = (x - lo) / (hi - lo);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn constant_density_samples_uniformly() {
        let model = CircularExample::new(1.0).unwrap();
        let region = SamplingRegion { region: Region3 { lo: [-1.0, 0.0, 2.0], hi: [1.0, 3.0, 2.5] }, n: 20_000, seed: 5 };
        let s = sample_positions(&model, 0.3, &region, &SamplerOptions::default()).unwrap();
        assert_eq!(s.positions.len(), region.n);
        assert_eq!(s.envelope_violations, 0);
        let n = region.n as f64;
        for a in 0..3 {
            let xs = s.positions.iter().map(|q| q[a]).collect();
            let d = ks_uniform(xs, region.region.lo[a], region.region.hi[a]);
            assert!(d < 1.63 / n.sqrt(), "axis {a}: KS {d}");
        }
    }

    #[test]
    fn single_sample_lies_in_region() {
        let model = CircularExample::new(1.0).unwrap();
        let region = SamplingRegion { region: unit_box(), n: 1, seed: 1 };
        let s = sample_positions(&model, 0.0, &region, &SamplerOptions::default()).unwrap();
        assert_eq!(s.positions.len(), 1);
        assert!(region.region.contains(&s.positions[0]));
    }

    #[test]
    fn seed_determinism_and_thread_independence() {
        let model = CircularExample::new(1.0).unwrap();
        let region = SamplingRegion { region: unit_box(), n: 3000, seed: 77 };
        let opts = SamplerOptions { batch_size: 256, ..Default::default() };
        let a = sample_positions(&model, 0.0, &region, &opts).unwrap();
        let b = sample_positions(&model, 0.0, &region, &opts).unwrap();
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pool.install(|| sample_positions(&model, 0.0, &region, &opts).unwrap());
        assert_eq!(a.positions, c.positions);
        let other = SamplingRegion { seed: 78, ..region };
        assert_ne!(a.positions, sample_positions(&model, 0.0, &other, &opts).unwrap().positions);
    }

    #[derive(Debug)]
    struct Vanishing;
    impl WaveFunctionModel for Vanishing {
        fn evaluate(&self, _: &crate::wavefunction::SpacetimePoint) -> crate::spinor::Spinor {
            crate::spinor::Spinor::ZERO
        }
        fn evaluate_with_gradient(
            &self,
            _: &crate::wavefunction::SpacetimePoint,
        ) -> (crate::spinor::Spinor, [crate::spinor::Spinor; 4]) {
            (crate::spinor::Spinor::ZERO, [crate::spinor::Spinor::ZERO; 4])
        }
        fn mass(&self) -> f64 {
            0.0
        }
    }

    #[test]
    fn errors() {
        let region = SamplingRegion { region: unit_box(), n: 10, seed: 1 };
        assert!(matches!(
            sample_positions(&Vanishing, 0.0, &region, &SamplerOptions::default()),
            Err(EnsembleError::DegenerateDensity { .. })
        ));
        let empty = SamplingRegion { n: 0, ..region };
        let c = CircularExample::new(1.0).unwrap();
        assert!(matches!(sample_positions(&c, 0.0, &empty, &SamplerOptions::default()), Err(EnsembleError::Invalid(_))));
        let flat = SamplingRegion { region: Region3 { lo: [0.0; 3], hi: [1.0, 0.0, 1.0] }, ..region };
        assert!(sample_positions(&c, 0.0, &flat, &SamplerOptions::default()).is_err());
    }

    #[test]
    fn circular_fractions_are_one() {
        let c = CircularExample::new(1.0).unwrap();
        let region = SamplingRegion { region: unit_box(), n: 50, seed: 3 };
        let fr = speed_c_fraction(&c, 0.0, 1.0, &region, &[1e-1, 1e-4, 1e-9], &SamplerOptions::default(), &IntegratorOptions::default())
            .unwrap();
        assert!(fr.iter().all(|f| f.fraction == 1.0), "{fr:?}");
    }

    #[test]
    fn massive_plane_wave_fractions_are_zero_below_its_speed() {
        let w = PlaneWave::new(
            1.0,
            PlaneWaveSpec { k: [0.0, 0.0, 1.0], branch: Branch::One, amplitude: C64::new(1.0, 0.0) },
        )
        .unwrap();
        // speed is 1/sqrt(2), so 1 - eps > speed for eps < 0.29
        let region = SamplingRegion { region: unit_box(), n: 50, seed: 3 };
        let fr = speed_c_fraction(&w, 0.0, 1.0, &region, &[1e-3, 0.1, 0.25, 0.5], &SamplerOptions::default(), &IntegratorOptions::default())
            .unwrap();
        assert_eq!(fr.iter().map(|f| f.fraction).collect::<Vec<_>>(), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn plane_wave_density_translates_rigidly() {
        let w = PlaneWave::new(
            1.0,
            PlaneWaveSpec { k: [0.0, 0.0, 1.0], branch: Branch::One, amplitude: C64::new(1.0, 0.0) },
        )
        .unwrap();
        let region = SamplingRegion { region: Region3 { lo: [-2.0; 3], hi: [2.0; 3] }, n: 20_000, seed: 9 };
        // Transported particles cover z in [-2.14, 1.86] uniformly.
        let hist = HistogramSpec { region: Region3 { lo: [-2.0, -2.0, -1.85], hi: [2.0, 2.0, 1.85] }, bins: [4, 4, 4], sub_resolution: 2 };
        let spec = EnsembleSpec { t1: 0.0, t2: 0.2, region, epsilons: vec![0.1], histogram: Some(hist) };
        let report = run_ensemble(&w, &spec, &SamplerOptions { scan_resolution: 8, ..Default::default() }, &IntegratorOptions::default())
            .unwrap();
        let control = report.equivariance_control.unwrap();
        let eq = report.equivariance.unwrap();
        assert!((eq.excluded_fraction - 0.075).abs() < 0.01, "{eq:?}");
        assert_eq!(eq.used + eq.excluded, report.n_accepted);
        assert!(eq.distance < 0.03, "{eq:?} vs control {control:?}");
    }

    #[test]
    fn too_many_lost() {
        let w = PlaneWave::new(
            1.0,
            PlaneWaveSpec { k: [0.0, 0.0, 1.0], branch: Branch::One, amplitude: C64::new(1.0, 0.0) },
        )
        .unwrap();
        let region = SamplingRegion { region: unit_box(), n: 500, seed: 9 };
        let hist = HistogramSpec { region: unit_box(), bins: [2, 2, 2], sub_resolution: 1 };
        let samples = sample_positions(&w, 0.0, &region, &SamplerOptions { scan_resolution: 4, ..Default::default() }).unwrap();
        let err = equivariance_distance(&w, &samples.positions, 0.0, 1.0, &hist, &IntegratorOptions::default()).unwrap_err();
        assert!(matches!(err, EnsembleError::TooManyLost { .. }));
    }

    #[test]
    fn packet_sample_mean_matches_quadrature() {
        use crate::wavefunction::{GaussianPacket, QuadratureSpec};
        let packet = GaussianPacket::build(1.0, [0.0, 0.0, 1.0], 0.2, Branch::One, QuadratureSpec::new(9, 0.4)).unwrap();
        let region = SamplingRegion { region: Region3 { lo: [-12.0; 3], hi: [12.0; 3] }, n: 20_000, seed: 4 };
        let s = sample_positions(&packet, 0.0, &region, &SamplerOptions::default()).unwrap();
        assert_eq!(s.envelope_violations, 0);

        // Oracle: Gauss-Legendre moments of the density on the same box.
        let (x, w) = crate::wavefunction::quadrature::gauss_legendre(48);
        let (mut mass, mut first, mut second) = (0.0, [0.0; 3], [0.0; 3]);
        for (i, wi) in w.iter().enumerate() {
            for (j, wj) in w.iter().enumerate() {
                for (k, wk) in w.iter().enumerate() {
                    let q = [12.0 * x[i], 12.0 * x[j], 12.0 * x[k]];
                    let d = wi * wj * wk * packet.evaluate(&crate::wavefunction::SpacetimePoint::new(0.0, q)).norm_sqr();
                    mass += d;
                    for a in 0..3 {
                        first[a] += d * q[a];
                        second[a] += d * q[a] * q[a];
                    }
                }
            }
        }
        let n = region.n as f64;
        for a in 0..3 {
            let mean = first[a] / mass;
            let sigma = (second[a] / mass - mean * mean).sqrt();
            let emp = s.positions.iter().map(|q| q[a]).sum::<f64>() / n;
            assert!((emp - mean).abs() < 3.0 * sigma / n.sqrt(), "axis {a}: {emp} vs {mean} (sigma {sigma})");
        }
    }

    /// For n draws over B equal-mass bins, E[TV] ~ (1/2) B sqrt(2 p / (pi n)), p = 1/B.
    #[test]
    fn binning_noise_floor_matches_multinomial_estimate() {
        let c = CircularExample::new(1.0).unwrap();
        let region = SamplingRegion { region: unit_box(), n: 100_000, seed: 12 };
        let s = sample_positions(&c, 0.0, &region, &SamplerOptions { scan_resolution: 4, ..Default::default() }).unwrap();
        for bins in [10usize, 20] {
            let hist = HistogramSpec { region: unit_box(), bins: [bins; 3], sub_resolution: 1 };
            let b = (bins * bins * bins) as f64;
            let expected = 0.5 * b * (2.0 / (std::f64::consts::PI * b * region.n as f64)).sqrt();
            let tv = hist.total_variation(&s.positions, &hist.reference(&c, 0.0));
            assert!((tv / expected - 1.0).abs() < 0.1, "{bins}^3 bins: {tv} vs {expected}");
        }
    }

    #[test]
    fn report_counts_are_conserved() {
        let w = PlaneWave::new(
            1.0,
            PlaneWaveSpec { k: [0.0, 0.0, 1.0], branch: Branch::One, amplitude: C64::new(1.0, 0.0) },
        )
        .unwrap();
        let region = SamplingRegion { region: unit_box(), n: 300, seed: 2 };
        let spec = EnsembleSpec { t1: 0.0, t2: 1.0, region, epsilons: vec![0.5, 0.1], histogram: None };
        let opts = IntegratorOptions { domain: Some(Region3 { lo: [-1.0; 3], hi: [1.0; 3] }), ..Default::default() };
        let (r, starts, transported) =
            run_ensemble_detailed(&w, &spec, &SamplerOptions { scan_resolution: 4, ..Default::default() }, &opts).unwrap();
        assert_eq!(starts.len(), 300);
        assert_eq!(transported.len(), 300);
        assert!(r.left_domain_count > 0);
        assert_eq!(r.completed_count + r.near_node_count + r.left_domain_count + r.max_samples_count, r.n_accepted);
        assert_eq!(r.speed_c_fractions.iter().map(|f| f.fraction).collect::<Vec<_>>(), vec![1.0, 0.0]);
    }

    #[test]
    fn histogram_tv_basics() {
        let hist = HistogramSpec { region: unit_box(), bins: [2, 1, 1], sub_resolution: 1 };
        let pts = vec![[-0.5, 0.0, 0.0], [-0.5, 0.0, 0.0], [0.5, 0.0, 0.0], [0.5, 0.0, 0.0]];
        assert_eq!(hist.total_variation(&pts, &[0.5, 0.5]), 0.0);
        assert_eq!(hist.total_variation(&pts, &[1.0, 0.0]), 0.5);
        assert_eq!(hist.bin_of(&[1.0, 1.0, 1.0]), Some(1));
        assert_eq!(hist.bin_of(&[1.5, 0.0, 0.0]), None);
    }
}
