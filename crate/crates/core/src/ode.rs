//! Mean-trajectory machinery: the learning-rate time partition, piecewise
//! constant interpolation of iterates, per-segment scaling, reference ODE
//! solutions, and the discretization error between them.
//!
//! The iterate sequence is read as an Euler discretization of its mean
//! field on the clock `t(n) = Σ_{i<n} α(i)`. That clock is chopped into
//! windows `[T_n, T_n + T)`; within each window the interpolated path is
//! scaled by `r_n = max(1, ‖x̄(T_n)‖)` and compared against the solution of
//! `dz/dt = h_c(z)` started from the same point, with `h_c(x) = h(cx)/c`.
//! The sup of that deviation over the window is the per-segment
//! discretization error.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::{Schedule, Trajectory};

/// Contraction level the stability probe requires trajectories to reach;
/// the particular value is conventional, not tuned.
pub const CONTRACTION_THRESHOLD: f64 = 0.25;
/// Default local error tolerance of the adaptive integrator; far below the
/// Euler discretization errors being measured.
pub const DEFAULT_ODE_TOL: f64 = 1e-9;
/// Probe trajectories whose norm passes this are treated as escaped.
const PROBE_ESCAPE_NORM: f64 = 1e6;

/// Cumulative learning-rate clock with its window boundaries.
///
/// `knots[n] = t(n)`, and `boundaries[k]` is the knot index of `T_k`, built
/// by `T_{k+1} = t(m(T_k + T) + 1)` so that every window is at least `T`
/// long and only overshoots by one rate.
#[derive(Debug, Clone)]
pub struct TimePartition {
    alphas: Vec<f64>,
    knots: Vec<f64>,
    window: f64,
    boundaries: Vec<usize>,
}

impl TimePartition {
    pub fn from_alphas(alphas: Vec<f64>, window: f64) -> Result<Self> {
        if !(window.is_finite() && window > 0.0) {
            return Err(Error::InvalidValue(format!("window must be positive, got {window}")));
        }
        if alphas.is_empty() {
            return Err(Error::InvalidValue("partition needs at least one rate".into()));
        }
        if alphas.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(Error::InvalidValue("rates must be positive and finite".into()));
        }
        let mut knots = Vec::with_capacity(alphas.len() + 1);
        let mut acc = 0.0;
        knots.push(0.0);
        for &a in &alphas {
            acc += a;
            knots.push(acc);
        }
        let mut partition = Self { alphas, knots, window, boundaries: vec![0] };
        loop {
            let t_n = partition.knots[*partition.boundaries.last().unwrap()];
            let q = t_n + window;
            if q > *partition.knots.last().unwrap() {
                break;
            }
            let next = partition.step_index(q)? + 1;
            if next >= partition.knots.len() {
                break;
            }
            partition.boundaries.push(next);
        }
        Ok(partition)
    }

    pub fn from_schedule(schedule: &Schedule, window: f64, horizon: usize) -> Result<Self> {
        Self::from_alphas(schedule.alphas(horizon), window)
    }

    /// `t(n)`
    pub fn time(&self, n: usize) -> f64 {
        self.knots[n]
    }

    pub fn alpha(&self, n: usize) -> f64 {
        self.alphas[n]
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    pub fn window(&self) -> f64 {
        self.window
    }

    /// `m(t)`: the largest `n` with `t(n) ≤ t`; zero for `t ≤ 0`.
    pub fn step_index(&self, t: f64) -> Result<usize> {
        if t <= 0.0 {
            return Ok(0);
        }
        if t > self.horizon() {
            return Err(Error::OutOfHorizon { t, horizon: self.horizon() });
        }
        Ok(self.knots.partition_point(|&k| k <= t) - 1)
    }

    /// Number of fully covered windows `[T_n, T_n + T)`.
    pub fn num_segments(&self) -> usize {
        self.boundaries.len().saturating_sub(1)
    }

    /// Knot index of `T_n`.
    pub fn boundary_index(&self, segment: usize) -> usize {
        self.boundaries[segment]
    }

    /// `T_n`
    pub fn boundary_time(&self, segment: usize) -> f64 {
        self.knots[self.boundaries[segment]]
    }

    /// Knot indices `i` with `T_n ≤ t(i) < T_n + T`.
    pub fn segment_knots(&self, segment: usize) -> Result<std::ops::Range<usize>> {
        if segment >= self.num_segments() {
            return Err(Error::MissingSegment { segment });
        }
        let start = self.boundaries[segment];
        let q = self.knots[start] + self.window;
        let end = self.knots.partition_point(|&k| k < q);
        Ok(start..end)
    }

    /// `Σ_{i=m(t(n)+t1)}^{m(t(n)+t2)−1} α(i)`, the window sum that tends to
    /// `t2 − t1` as `n` grows.
    pub fn window_sum(&self, n: usize, t1: f64, t2: f64) -> Result<f64> {
        let base = self.time(n);
        let lo = self.step_index(base + t1)?;
        let hi = self.step_index(base + t2)?;
        Ok(self.knots[hi] - self.knots[lo])
    }
}

/// Right-continuous step interpolation `x̄(t) = x_{m(t)}` of recorded iterates.
#[derive(Debug, Clone)]
pub struct InterpolatedPath {
    partition: TimePartition,
    iterates: Vec<DVector<f64>>,
}

impl InterpolatedPath {
    /// `iterates` must hold `x_0 ..= x_N` for a partition over `N` rates.
    pub fn new(partition: TimePartition, iterates: Vec<DVector<f64>>) -> Result<Self> {
        if iterates.len() != partition.len() + 1 {
            return Err(Error::DimensionMismatch {
                axis: "iterate count",
                expected: partition.len() + 1,
                found: iterates.len(),
            });
        }
        Ok(Self { partition, iterates })
    }

    /// Builds the path from a stride-1 trajectory.
    pub fn from_trajectory(
        trajectory: &Trajectory,
        schedule: &Schedule,
        window: f64,
    ) -> Result<Self> {
        let contiguous = trajectory
            .steps
            .iter()
            .enumerate()
            .all(|(i, &s)| s == i as u64);
        if !contiguous {
            return Err(Error::InvalidValue(
                "interpolation needs a stride-1 trajectory".into(),
            ));
        }
        let n = trajectory.steps.len() - 1;
        let partition = TimePartition::from_schedule(schedule, window, n)?;
        Self::new(partition, trajectory.iterates.clone())
    }

    pub fn partition(&self) -> &TimePartition {
        &self.partition
    }

    pub fn iterate(&self, n: usize) -> &DVector<f64> {
        &self.iterates[n]
    }

    /// `x̄(t)`
    pub fn value_at(&self, t: f64) -> Result<&DVector<f64>> {
        Ok(&self.iterates[self.partition.step_index(t)?])
    }

    /// Scaled window `x̂(T_n + ·) = x̄(T_n + ·)/r_n` on the segment's knots.
    pub fn scaled_segment(&self, segment: usize) -> Result<ScaledSegment> {
        let range = self.partition.segment_knots(segment)?;
        let t_n = self.partition.boundary_time(segment);
        let scale = self.iterates[range.start].norm().max(1.0);
        let offsets: Vec<f64> = range.clone().map(|i| self.partition.time(i) - t_n).collect();
        let values: Vec<DVector<f64>> =
            range.clone().map(|i| &self.iterates[i] / scale).collect();
        Ok(ScaledSegment { segment, start_knot: range.start, scale, offsets, values })
    }
}

/// One scaled window of the interpolated path, sampled at its own knots.
#[derive(Debug, Clone)]
pub struct ScaledSegment {
    pub segment: usize,
    pub start_knot: usize,
    /// `r_n = max(1, ‖x̄(T_n)‖)`
    pub scale: f64,
    /// Knot times relative to `T_n`; the first entry is 0.
    pub offsets: Vec<f64>,
    pub values: Vec<DVector<f64>>,
}

/// A time-invariant vector field.
pub trait VectorField {
    fn dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// Affine field `x ↦ Mx + b`.
#[derive(Debug, Clone)]
pub struct LinearField {
    pub matrix: nalgebra::DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl LinearField {
    pub fn new(matrix: nalgebra::DMatrix<f64>, offset: DVector<f64>) -> Self {
        assert_eq!(matrix.nrows(), offset.len());
        Self { matrix, offset }
    }

    /// Exact rescaling: `h_c(x) = Mx + b/c`, and the `c = ∞` limit `Mx`.
    pub fn scaled(&self, scale: Scaling) -> Result<LinearField> {
        match scale {
            Scaling::Finite(c) if c < 1.0 => Err(Error::InvalidValue(format!(
                "scale must be at least 1, got {c}"
            ))),
            Scaling::Finite(c) => Ok(LinearField {
                matrix: self.matrix.clone(),
                offset: &self.offset / c,
            }),
            Scaling::Infinite => Ok(LinearField {
                matrix: self.matrix.clone(),
                offset: DVector::zeros(self.offset.len()),
            }),
        }
    }
}

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.offset.len()
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x + &self.offset
    }
}

/// Scale parameter for field rescaling; the limit case is a tagged variant,
/// never a floating-point infinity inside arithmetic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scaling {
    Finite(f64),
    Infinite,
}

/// Generic rescaled field `h_c(x) = h(cx)/c` for finite `c ≥ 1`.
pub struct ScaledField<'a> {
    inner: &'a dyn VectorField,
    c: f64,
}

impl VectorField for ScaledField<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        self.inner.eval(&(x * self.c)) / self.c
    }
}

pub fn scaled_field(field: &dyn VectorField, c: f64) -> Result<ScaledField<'_>> {
    if !(c.is_finite() && c >= 1.0) {
        return Err(Error::InvalidValue(format!("scale must be finite and at least 1, got {c}")));
    }
    Ok(ScaledField { inner: field, c })
}

/// Closure-backed field.
pub struct FnField<F: Fn(&DVector<f64>) -> DVector<f64>> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&DVector<f64>) -> DVector<f64>> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(x)
    }
}

/// Reference solution values on a fixed grid.
#[derive(Debug, Clone)]
pub struct OdeSolution {
    pub offsets: Vec<f64>,
    pub values: Vec<DVector<f64>>,
}

// Dormand-Prince 5(4) stage coefficients (fields here are autonomous, so
// the stage abscissae are not needed).
const DP_A: [&[f64]; 6] = [
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ],
    &[
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// Difference between the 5th- and embedded 4th-order weights (k7 = FSAL stage).
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

struct Integrator<'a> {
    field: &'a dyn VectorField,
    tol: f64,
    t: f64,
    y: DVector<f64>,
    h: f64,
}

impl<'a> Integrator<'a> {
    fn new(field: &'a dyn VectorField, y0: DVector<f64>, tol: f64) -> Self {
        Self { field, tol, t: 0.0, y: y0, h: 1e-3 }
    }

    /// Advances to exactly `target ≥ self.t`.
    fn advance_to(&mut self, target: f64) -> Result<()> {
        while self.t < target {
            let h = self.h.min(target - self.t);
            let (y_next, err) = self.step(h);
            // Error weighted at unit scale so large transients do not stall
            // the integrator.
            let scale = 1.0 + self.y.amax().max(y_next.amax());
            let ratio = err / (self.tol * scale);
            if ratio <= 1.0 {
                self.t += h;
                self.y = y_next;
                let grow = if ratio > 0.0 { 0.9 * ratio.powf(-0.2) } else { 5.0 };
                self.h = h * grow.clamp(0.2, 5.0);
            } else {
                self.h = h * (0.9 * ratio.powf(-0.2)).clamp(0.1, 1.0);
            }
            if self.h < 1e-14 * self.t.abs().max(1.0) {
                return Err(Error::StepSizeUnderflow { t: self.t, step: self.h });
            }
        }
        Ok(())
    }

    fn step(&self, h: f64) -> (DVector<f64>, f64) {
        let mut k: Vec<DVector<f64>> = Vec::with_capacity(7);
        k.push(self.field.eval(&self.y));
        for stage in 0..6 {
            let mut arg = self.y.clone();
            for (j, &a) in DP_A[stage].iter().enumerate() {
                if a != 0.0 {
                    arg.axpy(h * a, &k[j], 1.0);
                }
            }
            k.push(self.field.eval(&arg));
        }
        // k[6] was evaluated at the 5th-order solution point (FSAL layout),
        // so y_next is the argument of the final stage.
        let mut y_next = self.y.clone();
        for (j, &a) in DP_A[5].iter().enumerate() {
            if a != 0.0 {
                y_next.axpy(h * a, &k[j], 1.0);
            }
        }
        let mut err = DVector::zeros(self.y.len());
        for (j, &e) in DP_E.iter().enumerate() {
            if e != 0.0 {
                err.axpy(h * e, &k[j], 1.0);
            }
        }
        (y_next, err.amax())
    }
}

/// Integrates `dz/dt = field(z)` from `z(0) = x0`, reporting values at the
/// given non-decreasing grid offsets (the first may be 0).
pub fn solve_ode(
    field: &dyn VectorField,
    x0: &DVector<f64>,
    grid: &[f64],
    tol: f64,
) -> Result<OdeSolution> {
    if grid.is_empty() {
        return Err(Error::InvalidValue("ODE grid is empty".into()));
    }
    if grid[0] < 0.0 || grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidValue("ODE grid must be non-decreasing from 0".into()));
    }
    let mut integrator = Integrator::new(field, x0.clone(), tol);
    let mut values = Vec::with_capacity(grid.len());
    for &t in grid {
        integrator.advance_to(t)?;
        values.push(integrator.y.clone());
    }
    Ok(OdeSolution { offsets: grid.to_vec(), values })
}

/// Per-window deviation `f_n(t) = x̂(T_n + t) − z_n(t)` on the shared grid.
#[derive(Debug, Clone)]
pub struct ErrorCurve {
    pub segment: usize,
    pub offsets: Vec<f64>,
    pub deviations: Vec<DVector<f64>>,
    pub sup_norm: f64,
}

pub fn discretization_error(segment: &ScaledSegment, ode: &OdeSolution) -> Result<ErrorCurve> {
    if segment.offsets.len() != ode.offsets.len() {
        return Err(Error::GridMismatch(format!(
            "segment has {} knots, solution has {}",
            segment.offsets.len(),
            ode.offsets.len()
        )));
    }
    for (a, b) in segment.offsets.iter().zip(&ode.offsets) {
        if (a - b).abs() > 1e-12 {
            return Err(Error::GridMismatch(format!("offset {a} vs {b}")));
        }
    }
    let deviations: Vec<DVector<f64>> = segment
        .values
        .iter()
        .zip(&ode.values)
        .map(|(x, z)| x - z)
        .collect();
    let sup_norm = deviations.iter().map(|d| d.norm()).fold(0.0, f64::max);
    Ok(ErrorCurve { segment: segment.segment, offsets: segment.offsets.clone(), deviations, sup_norm })
}

/// Sup discretization error of every covered window of a path, each against
/// the reference ODE of its own scaled field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentErrorSummary {
    pub segment: usize,
    pub start_step: usize,
    pub scale: f64,
    pub sup_error: f64,
}

pub fn discretization_profile(
    path: &InterpolatedPath,
    field: &dyn VectorField,
    tol: f64,
) -> Result<Vec<SegmentErrorSummary>> {
    let mut summaries = Vec::with_capacity(path.partition().num_segments());
    for n in 0..path.partition().num_segments() {
        let segment = path.scaled_segment(n)?;
        let h_c = scaled_field(field, segment.scale)?;
        let ode = solve_ode(&h_c, &segment.values[0], &segment.offsets, tol)?;
        let curve = discretization_error(&segment, &ode)?;
        summaries.push(SegmentErrorSummary {
            segment: n,
            start_step: segment.start_knot,
            scale: segment.scale,
            sup_error: curve.sup_norm,
        });
    }
    Ok(summaries)
}

/// Deterministic mean-path iteration `x_{n+1} = x_n + α(n) field(x_n)`.
pub fn mean_path(field: &dyn VectorField, x0: &DVector<f64>, alphas: &[f64]) -> Vec<DVector<f64>> {
    let mut iterates = Vec::with_capacity(alphas.len() + 1);
    iterates.push(x0.clone());
    let mut x = x0.clone();
    for &a in alphas {
        x += a * field.eval(&x);
        iterates.push(x.clone());
    }
    iterates
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeVerdict {
    Consistent,
    Inconsistent,
    Inconclusive,
}

/// Outcome of the scaling-limit stability probe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub verdict: ProbeVerdict,
    pub n_dirs: usize,
    pub t_probe: f64,
    pub terminal_norms: Vec<f64>,
    /// Earliest probed time after which every trajectory stayed within the
    /// contraction threshold; present only for consistent verdicts.
    pub settle_time: Option<f64>,
}

/// Integrates the field from random unit-sphere starts over `[0, t_probe]` and
/// checks whether every trajectory contracts below [`CONTRACTION_THRESHOLD`].
///
/// Verdicts: `consistent` when all terminal norms are within the threshold,
/// `inconsistent` when some trajectory ends at or beyond its initial norm
/// (or escapes outright), `inconclusive` otherwise.
pub fn ode_at_infinity_probe(
    field: &dyn VectorField,
    n_dirs: usize,
    t_probe: f64,
    seed: u64,
) -> Result<ProbeReport> {
    if !(t_probe.is_finite() && t_probe > 0.0) {
        return Err(Error::InvalidValue(format!("probe horizon must be positive, got {t_probe}")));
    }
    if n_dirs == 0 {
        return Err(Error::InvalidValue("probe needs at least one direction".into()));
    }
    let checkpoints = 64usize;
    let grid: Vec<f64> = (1..=checkpoints)
        .map(|i| t_probe * i as f64 / checkpoints as f64)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = field.dim();

    let mut terminal_norms = Vec::with_capacity(n_dirs);
    let mut escaped = false;
    // norm_history[i][j]: norm of direction i at checkpoint j.
    let mut norm_history: Vec<Vec<f64>> = Vec::with_capacity(n_dirs);
    for _ in 0..n_dirs {
        let mut x0 = DVector::from_fn(dim, |_, _| standard_normal(&mut rng));
        while x0.norm() < 1e-6 {
            x0 = DVector::from_fn(dim, |_, _| standard_normal(&mut rng));
        }
        x0 /= x0.norm();

        let mut integrator = Integrator::new(field, x0, DEFAULT_ODE_TOL);
        let mut norms = Vec::with_capacity(checkpoints);
        for &t in &grid {
            integrator.advance_to(t)?;
            let norm = integrator.y.norm();
            norms.push(norm);
            if norm > PROBE_ESCAPE_NORM {
                escaped = true;
                break;
            }
        }
        terminal_norms.push(*norms.last().unwrap());
        norm_history.push(norms);
        if escaped {
            break;
        }
    }

    let max_terminal = terminal_norms.iter().copied().fold(0.0, f64::max);
    let verdict = if escaped || max_terminal >= 1.0 {
        ProbeVerdict::Inconsistent
    } else if max_terminal <= CONTRACTION_THRESHOLD {
        ProbeVerdict::Consistent
    } else {
        ProbeVerdict::Inconclusive
    };

    let settle_time = (verdict == ProbeVerdict::Consistent).then(|| {
        // Earliest checkpoint from which all later norms stay inside the
        // threshold, across every direction.
        let mut settle_index = 0;
        for norms in &norm_history {
            let mut first_ok = norms.len() - 1;
            while first_ok > 0 && norms[first_ok - 1] <= CONTRACTION_THRESHOLD {
                first_ok -= 1;
            }
            settle_index = settle_index.max(first_ok);
        }
        grid[settle_index]
    });

    Ok(ProbeReport { verdict, n_dirs, t_probe, terminal_norms, settle_time })
}

pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; one value per call keeps the stream layout simple.
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
