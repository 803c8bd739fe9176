//! Integration of the guidance law `dQ/dt = psi^dag alpha psi / psi^dag psi`.
//!
//! The default integrator is the Dormand-Prince 5(4) pair with its
//! fourth-order continuous extension. Speed-1 episodes are detected with the
//! relaxed threshold `speed >= 1 - epsilon` and localized by bisection on the
//! dense output.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spinor::{bohm_velocity_with_floor, norm3, s_deviation, Spinor, SpinorError, DEFAULT_PSI_FLOOR};
use crate::wavefunction::{SpacetimePoint, WaveFunctionModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("initial position {q:?} at t = {t} sits on a wave-function node (density {density:e})")]
    NearNode { t: f64, q: [f64; 3], density: f64 },
    #[error("step size underflow at t = {t}: tolerance unreachable")]
    StepFailure { t: f64 },
    #[error("invalid integrator options: {0}")]
    InvalidOptions(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Method {
    Dopri5,
    /// Classical fixed-step RK4, for reproducibility comparisons.
    Rk4 { step: f64 },
}

/// Axis-aligned box `lo <= q <= hi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region3 {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Region3 {
    pub fn contains(&self, q: &[f64; 3]) -> bool {
        (0..3).all(|a| q[a] >= self.lo[a] && q[a] <= self.hi[a])
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|a| self.hi[a] - self.lo[a]).product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegratorOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    pub psi_floor: f64,
    pub speed_event_epsilon: f64,
    pub max_samples: usize,
    pub method: Method,
    /// Stop with `LeftDomain` once the position leaves this box.
    pub domain: Option<Region3>,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            max_step: f64::INFINITY,
            psi_floor: DEFAULT_PSI_FLOOR,
            speed_event_epsilon: 1e-6,
            max_samples: 1_000_000,
            method: Method::Dopri5,
            domain: None,
        }
    }
}

impl IntegratorOptions {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |msg: &str| Err(DynamicsError::InvalidOptions(msg.to_string()));
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.max_step > 0.0) {
            return bad("max_step must be positive");
        }
        if !(self.psi_floor > 0.0) {
            return bad("psi_floor must be positive");
        }
        if !(self.speed_event_epsilon > 0.0 && self.speed_event_epsilon < 1.0) {
            return bad("speed_event_epsilon must lie in (0, 1)");
        }
        if self.max_samples < 2 {
            return bad("max_samples must be at least 2");
        }
        if let Method::Rk4 { step } = self.method {
            if !(step > 0.0 && step.is_finite()) {
                return bad("rk4 step must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub q: [f64; 3],
    pub v: [f64; 3],
    pub speed: f64,
    pub s_dev: f64,
    pub density: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    SpeedC,
    NearNode,
    LeftDomain,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    pub t_start: f64,
    pub t_end: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Completed,
    NearNode,
    LeftDomain,
    MaxSamples,
}

/// Continuous extension over one accepted step:
/// `y(s) = r0 + s (r1 + (1-s) (r2 + s (r3 + (1-s) r4)))`, `s = (t - t0) / h`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenseSegment {
    pub t0: f64,
    pub h: f64,
    r: [[f64; 3]; 5],
}

impl DenseSegment {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    pub fn position(&self, t: f64) -> [f64; 3] {
        let s = (t - self.t0) / self.h;
        let s1 = 1.0 - s;
        let r = &self.r;
        std::array::from_fn(|a| r[0][a] + s * (r[1][a] + s1 * (r[2][a] + s * (r[3][a] + s1 * r[4][a]))))
    }

    /// Time derivative of the interpolant.
    pub fn velocity(&self, t: f64) -> [f64; 3] {
        let s = (t - self.t0) / self.h;
        let s1 = 1.0 - s;
        let r = &self.r;
        std::array::from_fn(|a| {
            (r[1][a]
                + (1.0 - 2.0 * s) * r[2][a]
                + (2.0 * s - 3.0 * s * s) * r[3][a]
                + (2.0 * s * s1 * s1 - 2.0 * s * s * s1) * r[4][a])
                / self.h
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<TrajectorySample>,
    pub segments: Vec<DenseSegment>,
    pub events: Vec<Event>,
    pub termination: Termination,
    /// Largest field speed seen at samples and step midpoints.
    pub max_speed: f64,
}

impl Trajectory {
    pub fn start(&self) -> &TrajectorySample {
        &self.samples[0]
    }

    pub fn end(&self) -> &TrajectorySample {
        self.samples.last().expect("trajectory has at least one sample")
    }

    fn segment_at(&self, t: f64) -> Option<&DenseSegment> {
        let idx = self.segments.partition_point(|s| s.t1() < t);
        self.segments.get(idx).filter(|s| t >= s.t0)
    }

    /// Dense-output position, `None` outside the integrated range.
    pub fn position_at(&self, t: f64) -> Option<[f64; 3]> {
        if self.segments.is_empty() {
            return (t == self.start().t).then(|| self.start().q);
        }
        self.segment_at(t).map(|s| s.position(t))
    }

    pub fn speed_c_events(&self) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(|e| e.kind == EventKind::SpeedC)
    }

    /// `t,x,y,z,vx,vy,vz,speed,sdev,density`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,x,y,z,vx,vy,vz,speed,sdev,density")?;
        for s in &self.samples {
            let row = [s.t, s.q[0], s.q[1], s.q[2], s.v[0], s.v[1], s.v[2], s.speed, s.s_dev, s.density];
            let fields: Vec<String> = row.iter().map(|x| crate::output::fmt_f64(*x)).collect();
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

/// Field value with the spinor it came from.
#[derive(Clone, Copy, Debug)]
struct FieldPoint {
    v: [f64; 3],
    psi: Spinor,
}

fn field_point(
    model: &dyn WaveFunctionModel,
    t: f64,
    q: &[f64; 3],
    floor: f64,
) -> Result<FieldPoint, SpinorError> {
    let psi = model.evaluate(&SpacetimePoint::new(t, *q));
    let v = bohm_velocity_with_floor(&psi, floor)?;
    Ok(FieldPoint { v, psi })
}

/// Bohmian velocity field at `(t, q)` in units of c.
pub fn velocity_field(
    model: &dyn WaveFunctionModel,
    t: f64,
    q: &[f64; 3],
    psi_floor: f64,
) -> Result<[f64; 3], SpinorError> {
    field_point(model, t, q, psi_floor).map(|f| f.v)
}

fn make_sample(t: f64, q: [f64; 3], f: &FieldPoint) -> TrajectorySample {
    let speed = norm3(&f.v);
    TrajectorySample {
        t,
        q,
        v: f.v,
        speed,
        s_dev: s_deviation(&f.psi).unwrap_or(f64::NAN),
        density: f.psi.norm_sqr(),
    }
}

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

fn comb(y: &[f64; 3], h: f64, terms: &[(f64, &[f64; 3])]) -> [f64; 3] {
    std::array::from_fn(|a| y[a] + h * terms.iter().map(|(c, k)| c * k[a]).sum::<f64>())
}

struct StepResult {
    y1: [f64; 3],
    f1: FieldPoint,
    err: f64,
    segment: DenseSegment,
}

fn dopri_step(
    model: &dyn WaveFunctionModel,
    t: f64,
    y: &[f64; 3],
    k1: &[f64; 3],
    h: f64,
    opts: &IntegratorOptions,
) -> Result<StepResult, SpinorError> {
    let fl = opts.psi_floor;
    let f = |tt: f64, yy: &[f64; 3]| field_point(model, tt, yy, fl);
    let k2 = f(t + C2 * h, &comb(y, h, &[(A21, k1)]))?.v;
    let k3 = f(t + C3 * h, &comb(y, h, &[(A31, k1), (A32, &k2)]))?.v;
    let k4 = f(t + C4 * h, &comb(y, h, &[(A41, k1), (A42, &k2), (A43, &k3)]))?.v;
    let k5 = f(t + C5 * h, &comb(y, h, &[(A51, k1), (A52, &k2), (A53, &k3), (A54, &k4)]))?.v;
    let k6 = f(
        t + h,
        &comb(y, h, &[(A61, k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]),
    )?
    .v;
    let y1 = comb(y, h, &[(A71, k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)]);
    let f1 = f(t + h, &y1)?;
    let k7 = f1.v;

    let mut acc = 0.0;
    for a in 0..3 {
        let e = h * (E1 * k1[a] + E3 * k3[a] + E4 * k4[a] + E5 * k5[a] + E6 * k6[a] + E7 * k7[a]);
        let sk = opts.abs_tol + opts.rel_tol * y[a].abs().max(y1[a].abs());
        acc += (e / sk).powi(2);
    }
    let err = (acc / 3.0).sqrt();

    let mut r = [[0.0; 3]; 5];
    for a in 0..3 {
        let ydiff = y1[a] - y[a];
        let bspl = h * k1[a] - ydiff;
        r[0][a] = y[a];
        r[1][a] = ydiff;
        r[2][a] = bspl;
        r[3][a] = ydiff - h * k7[a] - bspl;
        r[4][a] = h * (D1 * k1[a] + D3 * k3[a] + D4 * k4[a] + D5 * k5[a] + D6 * k6[a] + D7 * k7[a]);
    }
    Ok(StepResult {
        y1,
        f1,
        err,
        segment: DenseSegment { t0: t, h, r },
    })
}

fn rk4_step(
    model: &dyn WaveFunctionModel,
    t: f64,
    y: &[f64; 3],
    k1: &[f64; 3],
    h: f64,
    opts: &IntegratorOptions,
) -> Result<StepResult, SpinorError> {
    let fl = opts.psi_floor;
    let f = |tt: f64, yy: &[f64; 3]| field_point(model, tt, yy, fl);
    let k2 = f(t + 0.5 * h, &comb(y, h, &[(0.5, k1)]))?.v;
    let k3 = f(t + 0.5 * h, &comb(y, h, &[(0.5, &k2)]))?.v;
    let k4 = f(t + h, &comb(y, h, &[(1.0, &k3)]))?.v;
    let y1 = comb(y, h, &[(1.0 / 6.0, k1), (1.0 / 3.0, &k2), (1.0 / 3.0, &k3), (1.0 / 6.0, &k4)]);
    let f1 = f(t + h, &y1)?;
    // Cubic Hermite interpolant.
    let mut r = [[0.0; 3]; 5];
    for a in 0..3 {
        let ydiff = y1[a] - y[a];
        let bspl = h * k1[a] - ydiff;
        r[0][a] = y[a];
        r[1][a] = ydiff;
        r[2][a] = bspl;
        r[3][a] = ydiff - h * f1.v[a] - bspl;
    }
    Ok(StepResult {
        y1,
        f1,
        err: 0.0,
        segment: DenseSegment { t0: t, h, r },
    })
}

fn initial_step(model: &dyn WaveFunctionModel, t: f64, y: &[f64; 3], f0: &[f64; 3], span: f64, opts: &IntegratorOptions) -> f64 {
    let sk: [f64; 3] = std::array::from_fn(|a| opts.abs_tol + opts.rel_tol * y[a].abs());
    let rms = |v: &[f64; 3]| ((0..3).map(|a| (v[a] / sk[a]).powi(2)).sum::<f64>() / 3.0).sqrt();
    let d0 = rms(y);
    let d1 = rms(f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span).min(opts.max_step);
    let y1 = comb(y, h0, &[(1.0, f0)]);
    let d2 = match field_point(model, t + h0, &y1, opts.psi_floor) {
        Ok(f1) => {
            let diff: [f64; 3] = std::array::from_fn(|a| f1.v[a] - f0[a]);
            rms(&diff) / h0
        }
        Err(_) => return h0 * 1e-3,
    };
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1).min(span).min(opts.max_step)
}

/// Integrates the guidance law from `(t1, q0)` to `t2`.
///
/// Hitting a node or leaving `opts.domain` ends the run early with a partial
/// trajectory and a matching event; only a node at the start is an error.
pub fn integrate(
    model: &dyn WaveFunctionModel,
    q0: [f64; 3],
    t1: f64,
    t2: f64,
    opts: &IntegratorOptions,
) -> Result<Trajectory, DynamicsError> {
    opts.validate()?;
    if !(t1 < t2) {
        return Err(DynamicsError::InvalidOptions(format!("need t1 < t2, got {t1} >= {t2}")));
    }
    let span = t2 - t1;
    let start = field_point(model, t1, &q0, opts.psi_floor).map_err(|_| DynamicsError::NearNode {
        t: t1,
        q: q0,
        density: model.evaluate(&SpacetimePoint::new(t1, q0)).norm_sqr(),
    })?;
    let threshold = 1.0 - opts.speed_event_epsilon;
    let event_tol = 1e-9 * span;
    let speed_at = |t: f64, q: &[f64; 3]| -> f64 {
        velocity_field(model, t, q, opts.psi_floor)
            .map(|v| norm3(&v))
            .unwrap_or(0.0)
    };

    let first = make_sample(t1, q0, &start);
    let mut traj = Trajectory {
        samples: vec![first],
        segments: Vec::new(),
        events: Vec::new(),
        termination: Termination::Completed,
        max_speed: first.speed,
    };
    let mut open_event: Option<f64> = (first.speed >= threshold).then_some(t1);

    let mut t = t1;
    let mut y = q0;
    let mut fy = start;
    let mut h = match opts.method {
        Method::Dopri5 => initial_step(model, t, &y, &start.v, span, opts),
        Method::Rk4 { step } => step.min(span),
    };
    let h_min = 1e-14 * span.max(t1.abs()).max(t2.abs()).max(1.0);
    let mut last_rejected = false;

    while t < t2 {
        if t + h >= t2 || t2 - (t + h) < h_min {
            h = t2 - t;
        }
        let attempt = match opts.method {
            Method::Dopri5 => dopri_step(model, t, &y, &fy.v, h, opts),
            Method::Rk4 { .. } => rk4_step(model, t, &y, &fy.v, h, opts),
        };
        let step = match attempt {
            Ok(s) => s,
            Err(_) => {
                // A stage landed on (or next to) a node: retry smaller, give up
                // once the step is negligible.
                if h <= 1e3 * h_min {
                    traj.termination = Termination::NearNode;
                    traj.events.push(Event {
                        kind: EventKind::NearNode,
                        t_start: t,
                        t_end: t,
                    });
                    break;
                }
                h *= 0.25;
                last_rejected = true;
                continue;
            }
        };

        if opts.method == Method::Dopri5 && step.err > 1.0 {
            let fac = (0.9 * step.err.powf(-0.2)).clamp(0.2, 1.0);
            h *= fac;
            last_rejected = true;
            if h < h_min {
                return Err(DynamicsError::StepFailure { t });
            }
            continue;
        }

        // Accepted.
        let seg = step.segment;
        let t_new = if h == t2 - t { t2 } else { t + h };
        let sample = make_sample(t_new, step.y1, &step.f1);
        let mid_t = t + 0.5 * h;
        let mid_speed = speed_at(mid_t, &seg.position(mid_t));
        traj.max_speed = traj.max_speed.max(sample.speed).max(mid_speed);

        let prev_above = traj.end().speed >= threshold;
        let mid_above = mid_speed >= threshold;
        let new_above = sample.speed >= threshold;
        let f_dense = |tt: f64| speed_at(tt, &seg.position(tt)) - threshold;
        let mut crossings = Vec::new();
        if prev_above != mid_above {
            crossings.push(bisect(&f_dense, t, mid_t, event_tol));
        }
        if mid_above != new_above {
            crossings.push(bisect(&f_dense, mid_t, t_new, event_tol));
        }
        for tc in crossings {
            match open_event.take() {
                Some(ts) => traj.events.push(Event {
                    kind: EventKind::SpeedC,
                    t_start: ts,
                    t_end: tc,
                }),
                None => open_event = Some(tc),
            }
        }

        traj.segments.push(seg);
        traj.samples.push(sample);
        t = t_new;
        y = step.y1;
        fy = step.f1;

        if let Some(domain) = &opts.domain {
            if !domain.contains(&y) {
                traj.termination = Termination::LeftDomain;
                traj.events.push(Event {
                    kind: EventKind::LeftDomain,
                    t_start: t,
                    t_end: t,
                });
                break;
            }
        }
        if traj.samples.len() >= opts.max_samples && t < t2 {
            traj.termination = Termination::MaxSamples;
            break;
        }

        if let Method::Dopri5 = opts.method {
            let mut fac = 0.9 * step.err.max(1e-10).powf(-0.2);
            fac = fac.clamp(0.2, 10.0);
            if last_rejected {
                fac = fac.min(1.0);
            }
            h = (h * fac).min(opts.max_step);
        } else if let Method::Rk4 { step } = opts.method {
            h = step;
        }
        last_rejected = false;
    }

    if let Some(ts) = open_event {
        traj.events.push(Event {
            kind: EventKind::SpeedC,
            t_start: ts,
            t_end: traj.end().t,
        });
    }
    traj.events.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
    Ok(traj)
}

/// Root of `f` on `[a, b]` where `f(a)` and `f(b)` differ in sign (`>= 0` vs `< 0`).
fn bisect(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let fa_above = f(a) >= 0.0;
    while b - a > tol {
        let m = 0.5 * (a + b);
        if (f(m) >= 0.0) == fa_above {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Maximal time intervals with speed `>= 1 - epsilon`, reconstructed from the
/// sample speeds and the dense output of an integrated trajectory.
pub fn detect_speed_c_events(traj: &Trajectory, epsilon: f64) -> Vec<(f64, f64)> {
    assert!(epsilon > 0.0 && epsilon < 1.0, "epsilon must lie in (0, 1)");
    let threshold = 1.0 - epsilon;
    let span = traj.end().t - traj.start().t;
    let tol = 1e-9 * span.max(f64::MIN_POSITIVE);
    let mut intervals = Vec::new();
    let mut open = (traj.start().speed >= threshold).then_some(traj.start().t);
    for (seg, (s0, s1)) in traj.segments.iter().zip(traj.samples.iter().zip(traj.samples.iter().skip(1))) {
        let f = |t: f64| norm3(&seg.velocity(t)) - threshold;
        let mid = 0.5 * (s0.t + s1.t);
        let states = [s0.speed >= threshold, f(mid) >= 0.0, s1.speed >= threshold];
        let bounds = [(s0.t, mid), (mid, s1.t)];
        for i in 0..2 {
            if states[i] != states[i + 1] {
                let tc = bisect(&f, bounds[i].0, bounds[i].1, tol);
                match open.take() {
                    Some(ts) => intervals.push((ts, tc)),
                    None => open = Some(tc),
                }
            }
        }
    }
    if let Some(ts) = open {
        intervals.push((ts, traj.end().t));
    }
    intervals
}
