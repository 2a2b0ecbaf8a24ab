//! Trace-based temporal-difference learners as pure step functions.
//!
//! Each learner state is a value type: a step consumes a state and a
//! sampled transition and returns the successor state, so independent runs
//! share nothing. The importance ratio of the previous transition, needed
//! by every trace recursion, is carried inside the state (ρ of step -1 is
//! taken to be 1 and traces start at zero, which makes the λ = 0 cases
//! exact).
//!
//! Divergence is a studied outcome here, not a bug: whenever any component
//! would exceed [`OVERFLOW_GUARD`] the state freezes and raises its
//! divergence flag instead of overflowing.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mdp::{FeatureMap, FiniteMdp, Policy};

/// Any iterate or trace component beyond this magnitude freezes the state.
pub const OVERFLOW_GUARD: f64 = 1e12;

/// Name of the generator backing every seeded run, recorded in metadata.
pub const RNG_NAME: &str = "chacha8";

/// Polynomially decaying learning rates `α(n) = B₁ / (n + B₂)^β`.
///
/// `β ∈ (0.5, 1]` keeps the sequence positive, decreasing, non-summable,
/// and with relative decrements of order `α(n)` itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule", into = "RawSchedule")]
pub struct Schedule {
    b1: f64,
    b2: f64,
    beta: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct RawSchedule {
    b1: f64,
    b2: f64,
    beta: f64,
}

impl TryFrom<RawSchedule> for Schedule {
    type Error = Error;

    fn try_from(raw: RawSchedule) -> Result<Self> {
        Schedule::new(raw.b1, raw.b2, raw.beta)
    }
}

impl From<Schedule> for RawSchedule {
    fn from(s: Schedule) -> Self {
        RawSchedule { b1: s.b1, b2: s.b2, beta: s.beta }
    }
}

impl Schedule {
    pub fn new(b1: f64, b2: f64, beta: f64) -> Result<Self> {
        if !(b1.is_finite() && b1 > 0.0) {
            return Err(Error::InvalidValue(format!("schedule B1 must be positive, got {b1}")));
        }
        if !(b2.is_finite() && b2 > 0.0) {
            return Err(Error::InvalidValue(format!("schedule B2 must be positive, got {b2}")));
        }
        if !(beta > 0.5 && beta <= 1.0) {
            return Err(Error::InvalidValue(format!(
                "schedule beta must lie in (0.5, 1], got {beta}"
            )));
        }
        Ok(Self { b1, b2, beta })
    }

    pub fn b1(&self) -> f64 {
        self.b1
    }

    pub fn b2(&self) -> f64 {
        self.b2
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `α(n)`
    pub fn alpha(&self, n: u64) -> f64 {
        self.b1 / (n as f64 + self.b2).powf(self.beta)
    }

    /// The first `n` rates.
    pub fn alphas(&self, n: usize) -> Vec<f64> {
        (0..n as u64).map(|i| self.alpha(i)).collect()
    }

    /// Same decay with both the scale halved; used for step-halving studies.
    pub fn halved(&self) -> Schedule {
        Schedule { b1: self.b1 / 2.0, ..*self }
    }
}

/// One sampled transition with everything the learners need.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
    /// Importance ratio π(a|s)/μ(a|s) for the configured policies.
    pub rho: f64,
    pub reward: f64,
    pub phi: DVector<f64>,
    pub phi_next: DVector<f64>,
}

fn sample_index<R: Rng>(rng: &mut R, weights: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    let mut found = None;
    for (i, w) in weights.enumerate() {
        if w > 0.0 {
            last_positive = i;
            acc += w;
            if found.is_none() && u < acc {
                found = Some(i);
            }
        }
    }
    found.unwrap_or(last_positive)
}

/// Samples `a ~ μ(·|s)`, `s' ~ p(·|s, a)` and fills in ratio, reward, and
/// features. Deterministic given the generator state.
pub fn sample_transition<R: Rng>(
    mdp: &FiniteMdp,
    behavior: &Policy,
    target: &Policy,
    features: &FeatureMap,
    rng: &mut R,
    state: usize,
) -> Result<AugmentedSample> {
    let action = sample_index(rng, (0..mdp.n_actions()).map(|a| behavior.prob(state, a)));
    let next_state = sample_index(rng, (0..mdp.n_states()).map(|s| mdp.transition(state, action, s)));
    let rho = crate::mdp::importance_ratio(target, behavior, state, action)?;
    Ok(AugmentedSample {
        state,
        action,
        next_state,
        rho,
        reward: mdp.reward(state, action),
        phi: features.row(state),
        phi_next: features.row(next_state),
    })
}

/// Walks the behavior chain, producing one [`AugmentedSample`] per step.
pub struct Sampler<'a> {
    mdp: &'a FiniteMdp,
    behavior: &'a Policy,
    target: &'a Policy,
    features: &'a FeatureMap,
    state: usize,
}

impl<'a> Sampler<'a> {
    pub fn start<R: Rng>(
        mdp: &'a FiniteMdp,
        behavior: &'a Policy,
        target: &'a Policy,
        features: &'a FeatureMap,
        rng: &mut R,
    ) -> Self {
        let state = sample_index(rng, mdp.initial_dist().iter().copied());
        Self { mdp, behavior, target, features, state }
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn next_sample<R: Rng>(&mut self, rng: &mut R) -> Result<AugmentedSample> {
        let sample = sample_transition(
            self.mdp,
            self.behavior,
            self.target,
            self.features,
            rng,
            self.state,
        )?;
        self.state = sample.next_state;
        Ok(sample)
    }
}

fn breaches_guard<'a>(values: impl Iterator<Item = &'a f64>) -> bool {
    values.into_iter().any(|x| !x.is_finite() || x.abs() > OVERFLOW_GUARD)
}

/// Plain off-policy TD(λ) state: weights and accumulating trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TdState {
    pub theta: DVector<f64>,
    pub trace: DVector<f64>,
    pub rho_prev: f64,
    pub diverged: bool,
}

impl TdState {
    pub fn zeros(k: usize) -> Self {
        Self { theta: DVector::zeros(k), trace: DVector::zeros(k), rho_prev: 1.0, diverged: false }
    }

    pub fn with_theta(theta: DVector<f64>) -> Self {
        let k = theta.len();
        Self { theta, trace: DVector::zeros(k), rho_prev: 1.0, diverged: false }
    }
}

/// One off-policy TD(λ) update:
/// `e ← λγρ₋e + φ`, `θ ← θ + αρ(R + γφ'ᵀθ − φᵀθ)e`.
pub fn off_policy_td_step(
    state: &TdState,
    sample: &AugmentedSample,
    alpha: f64,
    gamma: f64,
    lambda: f64,
) -> TdState {
    if state.diverged {
        return state.clone();
    }
    let trace = lambda * gamma * state.rho_prev * &state.trace + &sample.phi;
    let delta = sample.reward + gamma * sample.phi_next.dot(&state.theta)
        - sample.phi.dot(&state.theta);
    let theta = &state.theta + (alpha * sample.rho * delta) * &trace;
    if breaches_guard(theta.iter().chain(trace.iter())) {
        return TdState { diverged: true, ..state.clone() };
    }
    TdState { theta, trace, rho_prev: sample.rho, diverged: false }
}

/// Gradient-corrected learner state: the duplicated weight vector ν rides
/// along with θ and the shared trace.
#[derive(Debug, Clone, PartialEq)]
pub struct GtdState {
    pub theta: DVector<f64>,
    pub nu: DVector<f64>,
    pub trace: DVector<f64>,
    pub rho_prev: f64,
    pub diverged: bool,
}

impl GtdState {
    pub fn zeros(k: usize) -> Self {
        Self {
            theta: DVector::zeros(k),
            nu: DVector::zeros(k),
            trace: DVector::zeros(k),
            rho_prev: 1.0,
            diverged: false,
        }
    }

    /// Stacked iterate `[ν; θ]` matching the block expected-update system.
    pub fn stacked(&self) -> DVector<f64> {
        let k = self.theta.len();
        let mut x = DVector::zeros(2 * k);
        x.rows_mut(0, k).copy_from(&self.nu);
        x.rows_mut(k, k).copy_from(&self.theta);
        x
    }
}

/// One gradient-corrected update; both weight vectors advance from the
/// incoming state:
/// `e ← λγρ₋e + φ`, `δ = R + γφ'ᵀθ − φᵀθ`,
/// `ν ← ν + α(ρδe − φφᵀν)`, `θ ← θ + αρ(φ − γφ')eᵀν`.
pub fn gtd_step(
    state: &GtdState,
    sample: &AugmentedSample,
    alpha: f64,
    gamma: f64,
    lambda: f64,
) -> GtdState {
    if state.diverged {
        return state.clone();
    }
    let trace = lambda * gamma * state.rho_prev * &state.trace + &sample.phi;
    let delta = sample.reward + gamma * sample.phi_next.dot(&state.theta)
        - sample.phi.dot(&state.theta);
    let nu = &state.nu
        + alpha * (sample.rho * delta * &trace - &sample.phi * sample.phi.dot(&state.nu));
    let theta = &state.theta
        + (alpha * sample.rho * trace.dot(&state.nu)) * (&sample.phi - gamma * &sample.phi_next);
    if breaches_guard(theta.iter().chain(nu.iter()).chain(trace.iter())) {
        return GtdState { diverged: true, ..state.clone() };
    }
    GtdState { theta, nu, trace, rho_prev: sample.rho, diverged: false }
}

/// Emphasis-weighted learner state: followon scalar F, its emphasis M, and
/// the emphasis-scaled trace.
#[derive(Debug, Clone, PartialEq)]
pub struct EtdState {
    pub theta: DVector<f64>,
    pub trace: DVector<f64>,
    pub followon: f64,
    pub emphasis: f64,
    pub rho_prev: f64,
    pub diverged: bool,
}

impl EtdState {
    pub fn zeros(k: usize) -> Self {
        Self {
            theta: DVector::zeros(k),
            trace: DVector::zeros(k),
            followon: 0.0,
            emphasis: 0.0,
            rho_prev: 1.0,
            diverged: false,
        }
    }
}

/// One emphasis-weighted update:
/// `F ← γρ₋F + i(s)`, `M = λi(s) + (1−λ)F`,
/// `e ← λγρ₋e + Mφ`, `θ ← θ + αρ(R + γφ'ᵀθ − φᵀθ)e`.
pub fn etd_step(
    state: &EtdState,
    sample: &AugmentedSample,
    alpha: f64,
    gamma: f64,
    lambda: f64,
    interest: &DVector<f64>,
) -> EtdState {
    if state.diverged {
        return state.clone();
    }
    let i_s = interest[sample.state];
    let followon = gamma * state.rho_prev * state.followon + i_s;
    let emphasis = lambda * i_s + (1.0 - lambda) * followon;
    let trace = lambda * gamma * state.rho_prev * &state.trace + emphasis * &sample.phi;
    let delta = sample.reward + gamma * sample.phi_next.dot(&state.theta)
        - sample.phi.dot(&state.theta);
    let theta = &state.theta + (alpha * sample.rho * delta) * &trace;
    if breaches_guard(theta.iter().chain(trace.iter()).chain(std::iter::once(&followon))) {
        return EtdState { diverged: true, ..state.clone() };
    }
    EtdState { theta, trace, followon, emphasis, rho_prev: sample.rho, diverged: false }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// On-policy TD(λ): actions are drawn from the target policy itself.
    Td,
    OffpolicyTd,
    Gtd,
    Etd,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Algorithm::Td => "td",
            Algorithm::OffpolicyTd => "offpolicy_td",
            Algorithm::Gtd => "gtd",
            Algorithm::Etd => "etd",
        };
        write!(f, "{name}")
    }
}

/// Everything a single seeded run needs.
pub struct RunParams<'a> {
    pub mdp: &'a FiniteMdp,
    pub target: &'a Policy,
    pub behavior: &'a Policy,
    pub features: &'a FeatureMap,
    pub algorithm: Algorithm,
    pub lambda: f64,
    pub schedule: Schedule,
    pub n_steps: u64,
    pub seed: u64,
    /// Record every `record_stride`-th iterate (plus the initial and final ones).
    pub record_stride: u64,
    /// Interest function for the emphasis-weighted learner; all-ones when absent.
    pub interest: Option<&'a DVector<f64>>,
    /// Initial weight vector θ₀; zero when absent. (The duplicated weight
    /// vector of the gradient learner always starts at zero.)
    pub theta0: Option<&'a DVector<f64>>,
}

/// Recorded run: strided iterates with norms and trace statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub algorithm: Algorithm,
    pub feature_dim: usize,
    /// Iterate indices n of the recorded states (0 is the initial state).
    pub steps: Vec<u64>,
    /// α(n) at each recorded index.
    pub alphas: Vec<f64>,
    /// Recorded iterate x_n: θ for the TD variants, `[ν; θ]` for the
    /// gradient-corrected learner.
    pub iterates: Vec<DVector<f64>>,
    pub norms: Vec<f64>,
    pub trace_norms: Vec<f64>,
    pub followon: Option<Vec<f64>>,
    pub diverged: bool,
    pub diverged_at: Option<u64>,
}

impl Trajectory {
    /// θ part of a recorded iterate.
    pub fn theta(&self, index: usize) -> DVector<f64> {
        let x = &self.iterates[index];
        match self.algorithm {
            Algorithm::Gtd => x.rows(self.feature_dim, self.feature_dim).clone_owned(),
            _ => x.clone(),
        }
    }

    pub fn final_theta(&self) -> DVector<f64> {
        self.theta(self.iterates.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Drives the configured learner for `n_steps` transitions.
pub fn run(params: &RunParams) -> Result<Trajectory> {
    if !(0.0..=1.0).contains(&params.lambda) {
        return Err(Error::InvalidValue(format!(
            "lambda must lie in [0, 1], got {}",
            params.lambda
        )));
    }
    if params.record_stride == 0 {
        return Err(Error::InvalidValue("record_stride must be at least 1".into()));
    }
    let k = params.features.dim();
    if params.features.n_states() != params.mdp.n_states() {
        return Err(Error::DimensionMismatch {
            axis: "feature rows",
            expected: params.mdp.n_states(),
            found: params.features.n_states(),
        });
    }
    let default_interest;
    let interest = match params.interest {
        Some(i) => {
            if i.len() != params.mdp.n_states() {
                return Err(Error::DimensionMismatch {
                    axis: "interest",
                    expected: params.mdp.n_states(),
                    found: i.len(),
                });
            }
            i
        }
        None => {
            default_interest = DVector::from_element(params.mdp.n_states(), 1.0);
            &default_interest
        }
    };
    let behavior = match params.algorithm {
        Algorithm::Td => params.target,
        _ => params.behavior,
    };
    let gamma = params.mdp.gamma();
    let lambda = params.lambda;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut sampler = Sampler::start(params.mdp, behavior, params.target, params.features, &mut rng);

    let theta0 = match params.theta0 {
        Some(theta) => {
            if theta.len() != k {
                return Err(Error::DimensionMismatch {
                    axis: "theta0",
                    expected: k,
                    found: theta.len(),
                });
            }
            theta.clone()
        }
        None => DVector::zeros(k),
    };

    enum State {
        Td(TdState),
        Gtd(GtdState),
        Etd(EtdState),
    }
    let mut state = match params.algorithm {
        Algorithm::Td | Algorithm::OffpolicyTd => State::Td(TdState::with_theta(theta0)),
        Algorithm::Gtd => State::Gtd(GtdState { theta: theta0, ..GtdState::zeros(k) }),
        Algorithm::Etd => State::Etd(EtdState { theta: theta0, ..EtdState::zeros(k) }),
    };

    let mut trajectory = Trajectory {
        algorithm: params.algorithm,
        feature_dim: k,
        steps: Vec::new(),
        alphas: Vec::new(),
        iterates: Vec::new(),
        norms: Vec::new(),
        trace_norms: Vec::new(),
        followon: matches!(params.algorithm, Algorithm::Etd).then(Vec::new),
        diverged: false,
        diverged_at: None,
    };

    let record = |n: u64, state: &State, trajectory: &mut Trajectory| {
        let (x, trace_norm, followon, diverged) = match state {
            State::Td(s) => (s.theta.clone(), s.trace.norm(), None, s.diverged),
            State::Gtd(s) => (s.stacked(), s.trace.norm(), None, s.diverged),
            State::Etd(s) => (s.theta.clone(), s.trace.norm(), Some(s.followon), s.diverged),
        };
        trajectory.steps.push(n);
        trajectory.alphas.push(params.schedule.alpha(n));
        trajectory.norms.push(x.norm());
        trajectory.iterates.push(x);
        trajectory.trace_norms.push(trace_norm);
        if let (Some(f), Some(col)) = (followon, trajectory.followon.as_mut()) {
            col.push(f);
        }
        if diverged && trajectory.diverged_at.is_none() {
            trajectory.diverged = true;
            trajectory.diverged_at = Some(n);
        }
    };

    record(0, &state, &mut trajectory);
    for t in 0..params.n_steps {
        let sample = sampler.next_sample(&mut rng)?;
        let alpha = params.schedule.alpha(t);
        let diverged = match &mut state {
            State::Td(s) => {
                *s = off_policy_td_step(s, &sample, alpha, gamma, lambda);
                s.diverged
            }
            State::Gtd(s) => {
                *s = gtd_step(s, &sample, alpha, gamma, lambda);
                s.diverged
            }
            State::Etd(s) => {
                *s = etd_step(s, &sample, alpha, gamma, lambda, interest);
                s.diverged
            }
        };
        let n = t + 1;
        if n % params.record_stride == 0 || n == params.n_steps || diverged {
            record(n, &state, &mut trajectory);
        }
        if diverged {
            break;
        }
    }
    Ok(trajectory)
}

/// 17 significant digits: enough for bit-faithful f64 round trips.
pub(crate) fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes the run as CSV with header
/// `step,alpha,theta_0..[,nu_0..],norm_x,norm_e[,F],diverged`.
pub fn write_trajectory_csv<W: Write>(trajectory: &Trajectory, out: &mut W) -> Result<()> {
    let k = trajectory.feature_dim;
    let mut header = vec!["step".to_string(), "alpha".to_string()];
    for j in 0..k {
        header.push(format!("theta_{j}"));
    }
    if trajectory.algorithm == Algorithm::Gtd {
        for j in 0..k {
            header.push(format!("nu_{j}"));
        }
    }
    header.push("norm_x".into());
    header.push("norm_e".into());
    if trajectory.followon.is_some() {
        header.push("F".into());
    }
    header.push("diverged".into());
    writeln!(out, "{}", header.join(","))?;

    for (i, &step) in trajectory.steps.iter().enumerate() {
        let mut row = vec![step.to_string(), format_float(trajectory.alphas[i])];
        let x = &trajectory.iterates[i];
        match trajectory.algorithm {
            Algorithm::Gtd => {
                for j in 0..k {
                    row.push(format_float(x[k + j]));
                }
                for j in 0..k {
                    row.push(format_float(x[j]));
                }
            }
            _ => {
                for j in 0..k {
                    row.push(format_float(x[j]));
                }
            }
        }
        row.push(format_float(trajectory.norms[i]));
        row.push(format_float(trajectory.trace_norms[i]));
        if let Some(f) = &trajectory.followon {
            row.push(format_float(f[i]));
        }
        let diverged_here = trajectory.diverged_at.map(|n| step >= n).unwrap_or(false);
        row.push(if diverged_here { "1".into() } else { "0".into() });
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn save_trajectory_csv(trajectory: &Trajectory, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut writer = std::io::BufWriter::new(file);
    write_trajectory_csv(trajectory, &mut writer)
}

/// Reads a trajectory CSV back; the learner family is inferred from the
/// header columns.
pub fn load_trajectory_csv(path: &Path) -> Result<Trajectory> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidValue("empty trajectory CSV".into()))??;
    let columns: Vec<&str> = header.split(',').collect();
    let k = columns.iter().filter(|c| c.starts_with("theta_")).count();
    if k == 0 {
        return Err(Error::InvalidValue("trajectory CSV has no theta columns".into()));
    }
    let has_nu = columns.iter().any(|c| c.starts_with("nu_"));
    let has_f = columns.contains(&"F");
    let algorithm = if has_nu {
        Algorithm::Gtd
    } else if has_f {
        Algorithm::Etd
    } else {
        Algorithm::OffpolicyTd
    };

    let mut trajectory = Trajectory {
        algorithm,
        feature_dim: k,
        steps: Vec::new(),
        alphas: Vec::new(),
        iterates: Vec::new(),
        norms: Vec::new(),
        trace_norms: Vec::new(),
        followon: has_f.then(Vec::new),
        diverged: false,
        diverged_at: None,
    };
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(Error::InvalidValue(format!(
                "trajectory CSV row has {} fields, expected {}",
                fields.len(),
                columns.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::InvalidValue(format!("bad float '{s}': {e}")))
        };
        let step: u64 = fields[0]
            .parse()
            .map_err(|e| Error::InvalidValue(format!("bad step '{}': {e}", fields[0])))?;
        trajectory.steps.push(step);
        trajectory.alphas.push(parse(fields[1])?);
        let mut cursor = 2;
        let theta: Vec<f64> = fields[cursor..cursor + k]
            .iter()
            .map(|s| parse(s))
            .collect::<Result<_>>()?;
        cursor += k;
        let x = if has_nu {
            let nu: Vec<f64> = fields[cursor..cursor + k]
                .iter()
                .map(|s| parse(s))
                .collect::<Result<_>>()?;
            cursor += k;
            DVector::from_vec(nu.into_iter().chain(theta).collect())
        } else {
            DVector::from_vec(theta)
        };
        trajectory.iterates.push(x);
        trajectory.norms.push(parse(fields[cursor])?);
        trajectory.trace_norms.push(parse(fields[cursor + 1])?);
        cursor += 2;
        if let Some(f) = trajectory.followon.as_mut() {
            f.push(parse(fields[cursor])?);
            cursor += 1;
        }
        if fields[cursor] == "1" && trajectory.diverged_at.is_none() {
            trajectory.diverged = true;
            trajectory.diverged_at = Some(step);
        }
    }
    Ok(trajectory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_features, random_mdp, random_policy};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    #[test]
    fn alpha_basic_values() {
        let s = Schedule::new(1.0, 1.0, 1.0).unwrap();
        assert_relative_eq!(s.alpha(0), 1.0);
        assert_relative_eq!(s.alpha(9), 0.1);
        let s = Schedule::new(0.5, 10.0, 0.75).unwrap();
        assert_relative_eq!(s.alpha(90), 0.5 / 100f64.powf(0.75), epsilon = 1e-15);
    }

    #[test]
    fn alpha_relative_decrement_bounded_by_alpha() {
        // (α(n) − α(n+1)) / α(n) ≤ c·α(n) with c = β·B2^(β−1)/B1.
        for &(b1, b2, beta) in &[(1.0, 1.0, 1.0), (0.5, 10.0, 0.75), (2.0, 5.0, 0.6)] {
            let s = Schedule::new(b1, b2, beta).unwrap();
            let c = beta * b2.powf(beta - 1.0) / b1;
            let mut n = 0u64;
            while n <= 1_000_000 {
                let a = s.alpha(n);
                let ratio = (a - s.alpha(n + 1)) / a;
                assert!(ratio >= 0.0, "not decreasing at {n}");
                assert!(ratio <= c * a + 1e-15, "n={n}: {ratio} > {}", c * a);
                n = (n * 13 / 10).max(n + 1);
            }
        }
    }

    #[test]
    fn schedule_rejects_invalid_parameters() {
        assert!(Schedule::new(0.0, 1.0, 1.0).is_err());
        assert!(Schedule::new(1.0, -1.0, 1.0).is_err());
        assert!(Schedule::new(1.0, 1.0, 0.5).is_err());
        assert!(Schedule::new(1.0, 1.0, 1.01).is_err());
    }

    fn deterministic_sample(k: usize, rho: f64, reward: f64) -> AugmentedSample {
        AugmentedSample {
            state: 0,
            action: 0,
            next_state: 0,
            rho,
            reward,
            phi: DVector::from_element(k, 1.0),
            phi_next: DVector::from_element(k, 1.0),
        }
    }

    #[test]
    fn sample_transition_deterministic_kernel() {
        let kernel = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let mdp = FiniteMdp::new(
            vec![kernel],
            DMatrix::from_column_slice(2, 1, &[1.0, 2.0]),
            0.9,
            DVector::from_vec(vec![1.0, 0.0]),
        )
        .unwrap();
        let policy = Policy::uniform(2, 1);
        let features = FeatureMap::identity(2);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sample_transition(&mdp, &policy, &policy, &features, &mut rng, 0).unwrap();
            assert_eq!((s.action, s.next_state), (0, 1));
            assert_relative_eq!(s.rho, 1.0);
            assert_relative_eq!(s.reward, 1.0);
        }
    }

    #[test]
    fn sample_transition_frequencies_match_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mdp = random_mdp(&mut rng, 3, 2, 0.9);
        let mu = random_policy(&mut rng, 3, 2);
        let pi = random_policy(&mut rng, 3, 2);
        let features = FeatureMap::identity(3);
        let n = 100_000;
        let mut counts = vec![vec![0u64; 3]; 2];
        for _ in 0..n {
            let s = sample_transition(&mdp, &mu, &pi, &features, &mut rng, 1).unwrap();
            counts[s.action][s.next_state] += 1;
        }
        for a in 0..2 {
            for s_next in 0..3 {
                let p = mu.prob(1, a) * mdp.transition(1, a, s_next);
                let expected = p * n as f64;
                let sigma = (n as f64 * p * (1.0 - p)).sqrt();
                let observed = counts[a][s_next] as f64;
                assert!(
                    (observed - expected).abs() <= 3.0 * sigma + 1.0,
                    "(a={a}, s'={s_next}): observed {observed}, expected {expected} ± {sigma}"
                );
            }
        }
    }

    #[test]
    fn sample_sequences_are_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mdp = random_mdp(&mut rng, 4, 2, 0.9);
        let mu = random_policy(&mut rng, 4, 2);
        let pi = random_policy(&mut rng, 4, 2);
        let features = random_features(&mut rng, 4, 2);
        let draw = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut sampler = Sampler::start(&mdp, &mu, &pi, &features, &mut rng);
            (0..50)
                .map(|_| sampler.next_sample(&mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn td_step_hand_case() {
        let state = TdState {
            theta: DVector::from_vec(vec![0.0]),
            trace: DVector::from_vec(vec![0.0]),
            rho_prev: 1.0,
            diverged: false,
        };
        // λ = 0 so the new trace is φ = 1; δ = 1; θ = 0.1.
        let sample = deterministic_sample(1, 1.0, 1.0);
        let next = off_policy_td_step(&state, &sample, 0.1, 0.9, 0.0);
        assert_relative_eq!(next.theta[0], 0.1);
        assert_relative_eq!(next.trace[0], 1.0);
    }

    #[test]
    fn td_step_zero_ratio_leaves_theta() {
        let state = TdState::with_theta(DVector::from_vec(vec![0.3, -0.2]));
        let sample = AugmentedSample {
            rho: 0.0,
            ..deterministic_sample(2, 0.0, 1.0)
        };
        let next = off_policy_td_step(&state, &sample, 0.5, 0.9, 0.7);
        assert_eq!(next.theta, state.theta);
    }

    #[test]
    fn td_step_on_policy_reduction() {
        // With ρ ≡ 1 the off-policy step is exactly the on-policy rule
        // e ← λγe + φ, θ ← θ + αδe.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut state = TdState::zeros(3);
        for _ in 0..200 {
            let phi = DVector::from_fn(3, |_, _| rng.random::<f64>() - 0.5);
            let phi_next = DVector::from_fn(3, |_, _| rng.random::<f64>() - 0.5);
            let sample = AugmentedSample {
                state: 0,
                action: 0,
                next_state: 0,
                rho: 1.0,
                reward: rng.random::<f64>(),
                phi: phi.clone(),
                phi_next: phi_next.clone(),
            };
            let expected_trace = 0.8 * 0.9 * &state.trace + &phi;
            let delta = sample.reward + 0.9 * phi_next.dot(&state.theta) - phi.dot(&state.theta);
            let expected_theta = &state.theta + 0.05 * delta * &expected_trace;
            state = off_policy_td_step(&state, &sample, 0.05, 0.9, 0.8);
            assert_relative_eq!(state.trace, expected_trace, epsilon = 1e-14);
            assert_relative_eq!(state.theta, expected_theta, epsilon = 1e-14);
        }
    }

    #[test]
    fn gtd_step_hand_case() {
        let state = GtdState::zeros(1);
        let sample = deterministic_sample(1, 1.0, 1.0);
        // γ = 1 would be invalid for an MDP but the step itself is algebra;
        // use γ = 1 to make all scalars 1 as in the hand derivation.
        let next = gtd_step(&state, &sample, 0.1, 1.0, 0.0);
        assert_relative_eq!(next.nu[0], 0.1);
        assert_relative_eq!(next.theta[0], 0.0);
    }

    #[test]
    fn gtd_step_zero_nu_leaves_theta() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..20 {
            let state = GtdState {
                theta: DVector::from_fn(2, |_, _| rng.random::<f64>()),
                nu: DVector::zeros(2),
                trace: DVector::from_fn(2, |_, _| rng.random::<f64>()),
                rho_prev: 1.3,
                diverged: false,
            };
            let sample = AugmentedSample {
                state: 0,
                action: 0,
                next_state: 0,
                rho: rng.random::<f64>() * 2.0,
                reward: rng.random::<f64>(),
                phi: DVector::from_fn(2, |_, _| rng.random::<f64>()),
                phi_next: DVector::from_fn(2, |_, _| rng.random::<f64>()),
            };
            let next = gtd_step(&state, &sample, 0.1, 0.9, 0.5);
            assert_eq!(next.theta, state.theta);
        }
    }

    /// Reference implementation through the block compact form
    /// `x ← x + α(A'(y)x + b'(y))` with `x = [ν; θ]`.
    fn gtd_step_block(
        state: &GtdState,
        sample: &AugmentedSample,
        alpha: f64,
        gamma: f64,
        lambda: f64,
    ) -> GtdState {
        let k = state.theta.len();
        let trace = lambda * gamma * state.rho_prev * &state.trace + &sample.phi;
        let a_y = sample.rho * &trace * (gamma * &sample.phi_next - &sample.phi).transpose();
        let c_y = &sample.phi * sample.phi.transpose();
        let b_y = sample.rho * sample.reward * &trace;
        let mut block = DMatrix::zeros(2 * k, 2 * k);
        block.view_mut((0, 0), (k, k)).copy_from(&(-c_y));
        block.view_mut((0, k), (k, k)).copy_from(&a_y);
        block.view_mut((k, 0), (k, k)).copy_from(&(-a_y.transpose()));
        let mut drift = DVector::zeros(2 * k);
        drift.rows_mut(0, k).copy_from(&b_y);
        let x = state.stacked() + alpha * (block * state.stacked() + drift);
        GtdState {
            nu: x.rows(0, k).clone_owned(),
            theta: x.rows(k, k).clone_owned(),
            trace,
            rho_prev: sample.rho,
            diverged: false,
        }
    }

    #[test]
    fn gtd_step_matches_block_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..1000 {
            let k = 1 + (rng.random::<u32>() % 4) as usize;
            let state = GtdState {
                theta: DVector::from_fn(k, |_, _| rng.random::<f64>() * 2.0 - 1.0),
                nu: DVector::from_fn(k, |_, _| rng.random::<f64>() * 2.0 - 1.0),
                trace: DVector::from_fn(k, |_, _| rng.random::<f64>() * 2.0 - 1.0),
                rho_prev: rng.random::<f64>() * 2.0,
                diverged: false,
            };
            let sample = AugmentedSample {
                state: 0,
                action: 0,
                next_state: 0,
                rho: rng.random::<f64>() * 3.0,
                reward: rng.random::<f64>() * 2.0 - 1.0,
                phi: DVector::from_fn(k, |_, _| rng.random::<f64>() * 2.0 - 1.0),
                phi_next: DVector::from_fn(k, |_, _| rng.random::<f64>() * 2.0 - 1.0),
            };
            let (alpha, gamma, lambda) =
                (rng.random::<f64>() * 0.2, rng.random::<f64>() * 0.99, rng.random::<f64>());
            let direct = gtd_step(&state, &sample, alpha, gamma, lambda);
            let block = gtd_step_block(&state, &sample, alpha, gamma, lambda);
            assert!((direct.theta - block.theta).amax() < 1e-12);
            assert!((direct.nu - block.nu).amax() < 1e-12);
            assert!((direct.trace - block.trace).amax() < 1e-12);
        }
    }

    #[test]
    fn etd_step_hand_case() {
        let interest = DVector::from_element(1, 1.0);
        let state = EtdState {
            theta: DVector::zeros(1),
            trace: DVector::zeros(1),
            followon: 1.0,
            emphasis: 0.0,
            rho_prev: 1.0,
            diverged: false,
        };
        let sample = deterministic_sample(1, 1.0, 0.0);
        let next = etd_step(&state, &sample, 0.1, 0.9, 0.0, &interest);
        assert_relative_eq!(next.followon, 1.9);
        assert_relative_eq!(next.emphasis, 1.9);
        assert_relative_eq!(next.trace[0], 1.9);
    }

    #[test]
    fn etd_emphasis_endpoints() {
        let interest = DVector::from_vec(vec![2.0]);
        let state = EtdState {
            followon: 3.0,
            ..EtdState::zeros(1)
        };
        let sample = deterministic_sample(1, 1.0, 0.0);
        // λ = 1: the emphasis is the interest alone.
        let next = etd_step(&state, &sample, 0.1, 0.5, 1.0, &interest);
        assert_relative_eq!(next.emphasis, 2.0);
        // λ = 0: the emphasis is the followon trace alone.
        let next = etd_step(&state, &sample, 0.1, 0.5, 0.0, &interest);
        assert_relative_eq!(next.emphasis, next.followon);
    }

    #[test]
    fn lambda_zero_traces_reset_to_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mdp = random_mdp(&mut rng, 3, 2, 0.9);
        let mu = random_policy(&mut rng, 3, 2);
        let pi = random_policy(&mut rng, 3, 2);
        let features = random_features(&mut rng, 3, 2);
        let interest = DVector::from_element(3, 1.0);

        let mut sampler_rng = ChaCha8Rng::seed_from_u64(1);
        let mut sampler = Sampler::start(&mdp, &mu, &pi, &features, &mut sampler_rng);
        let mut td = TdState::zeros(2);
        let mut gtd = GtdState::zeros(2);
        let mut etd = EtdState::zeros(2);
        for _ in 0..50 {
            let sample = sampler.next_sample(&mut sampler_rng).unwrap();
            td = off_policy_td_step(&td, &sample, 0.01, 0.9, 0.0);
            gtd = gtd_step(&gtd, &sample, 0.01, 0.9, 0.0);
            etd = etd_step(&etd, &sample, 0.01, 0.9, 0.0, &interest);
            assert_relative_eq!(td.trace, sample.phi, epsilon = 1e-14);
            assert_relative_eq!(gtd.trace, sample.phi, epsilon = 1e-14);
            assert_relative_eq!(etd.trace, etd.emphasis * &sample.phi, epsilon = 1e-14);
        }
    }

    #[test]
    fn overflow_guard_freezes_state() {
        let state = TdState::with_theta(DVector::from_vec(vec![1e11]));
        let sample = deterministic_sample(1, 1.0, 1.0);
        // Large alpha pushes theta past the guard in one step.
        let next = off_policy_td_step(&state, &sample, 1e5, 0.9, 0.0);
        assert!(next.diverged);
        assert_eq!(next.theta, state.theta);
        // Further steps are no-ops.
        let frozen = off_policy_td_step(&next, &sample, 0.1, 0.9, 0.0);
        assert_eq!(frozen.theta, next.theta);
        assert!(frozen.diverged);
    }

    fn small_run_params<'a>(
        mdp: &'a FiniteMdp,
        pi: &'a Policy,
        mu: &'a Policy,
        features: &'a FeatureMap,
        algorithm: Algorithm,
        n_steps: u64,
        seed: u64,
    ) -> RunParams<'a> {
        RunParams {
            mdp,
            target: pi,
            behavior: mu,
            features,
            algorithm,
            lambda: 0.5,
            schedule: Schedule::new(0.1, 1.0, 1.0).unwrap(),
            n_steps,
            seed,
            record_stride: 1,
            interest: None,
            theta0: None,
        }
    }

    #[test]
    fn run_zero_steps_records_initial_state_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mdp = random_mdp(&mut rng, 3, 2, 0.9);
        let pi = random_policy(&mut rng, 3, 2);
        let mu = random_policy(&mut rng, 3, 2);
        let features = random_features(&mut rng, 3, 2);
        let params = small_run_params(&mdp, &pi, &mu, &features, Algorithm::Gtd, 0, 5);
        let trajectory = run(&params).unwrap();
        assert_eq!(trajectory.len(), 1);
        assert_eq!(trajectory.steps[0], 0);
        assert!(trajectory.iterates[0].amax() == 0.0);
    }

    #[test]
    fn run_is_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mdp = random_mdp(&mut rng, 4, 2, 0.9);
        let pi = random_policy(&mut rng, 4, 2);
        let mu = random_policy(&mut rng, 4, 2);
        let features = random_features(&mut rng, 4, 3);
        for algorithm in [Algorithm::Td, Algorithm::OffpolicyTd, Algorithm::Gtd, Algorithm::Etd] {
            let params = small_run_params(&mdp, &pi, &mu, &features, algorithm, 500, 77);
            let a = run(&params).unwrap();
            let b = run(&params).unwrap();
            assert_eq!(a, b);
            let other = run(&small_run_params(&mdp, &pi, &mu, &features, algorithm, 500, 78)).unwrap();
            assert_ne!(a.iterates.last(), other.iterates.last());
        }
    }

    #[test]
    fn on_policy_run_ignores_behavior_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mdp = random_mdp(&mut rng, 3, 2, 0.9);
        let pi = random_policy(&mut rng, 3, 2);
        let mu = random_policy(&mut rng, 3, 2);
        let features = random_features(&mut rng, 3, 2);
        let with_mu = run(&small_run_params(&mdp, &pi, &mu, &features, Algorithm::Td, 300, 3)).unwrap();
        let with_pi = run(&small_run_params(&mdp, &pi, &pi, &features, Algorithm::Td, 300, 3)).unwrap();
        assert_eq!(with_mu, with_pi);
    }

    #[test]
    fn trajectory_csv_round_trip_is_bit_faithful() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let mdp = random_mdp(&mut rng, 4, 2, 0.9);
        let pi = random_policy(&mut rng, 4, 2);
        let mu = random_policy(&mut rng, 4, 2);
        let features = random_features(&mut rng, 4, 3);
        for algorithm in [Algorithm::OffpolicyTd, Algorithm::Gtd, Algorithm::Etd] {
            let mut params = small_run_params(&mdp, &pi, &mu, &features, algorithm, 200, 5);
            params.record_stride = 7;
            let trajectory = run(&params).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("trajectory.csv");
            save_trajectory_csv(&trajectory, &path).unwrap();
            let loaded = load_trajectory_csv(&path).unwrap();
            assert_eq!(loaded.steps, trajectory.steps);
            assert_eq!(loaded.iterates, trajectory.iterates);
            assert_eq!(loaded.trace_norms, trajectory.trace_norms);
            assert_eq!(loaded.followon, trajectory.followon);
        }
    }
}
