//! Empirical noise-averaging and stability diagnostics over recorded runs.
//!
//! These checks measure what the analytic layer asserts: weighted centered
//! partial sums of noise functions flatten out (their asymptotic rate of
//! change decays), running means converge to the analytic expectations, and
//! iterates stay bounded. They are statistics with seeds, not proofs.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::learners::{Trajectory, OVERFLOW_GUARD};
use crate::ode::TimePartition;

/// Declared decay when the fitted log-log slope is below this.
pub const DECAY_SLOPE: f64 = -0.05;

/// Windowed rate-of-change statistic of a noise-function sample sequence.
///
/// At each evaluation index `n` the statistic is the exact sup over window
/// index pairs of the max-norm of `Σ α(i)(g(Y_{i+1}) − ĝ)`; the window
/// covers clock times `[t(n) − τ, t(n) + τ]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateOfChangeReport {
    pub tau: f64,
    pub eval_steps: Vec<usize>,
    pub values: Vec<f64>,
    /// Centering vector ĝ: the supplied analytic mean or the full-run average.
    pub centering: Vec<f64>,
    /// OLS slope of log(value) against log(n), when computable.
    pub slope: Option<f64>,
    /// One-sided p-value for slope < 0.
    pub p_value: Option<f64>,
    pub decays: Option<bool>,
}

/// Exact sup over `−τ ≤ t₁ ≤ t₂ ≤ τ` of the weighted centered partial sums.
///
/// The norm is the max-norm, under which the sup decomposes per coordinate
/// into (max − min) of prefix sums over the window, one O(window) sweep per
/// coordinate instead of a quadratic scan over index pairs.
pub fn rate_of_change(
    samples: &[DVector<f64>],
    partition: &TimePartition,
    tau: f64,
    eval_steps: &[usize],
    analytic_mean: Option<&DVector<f64>>,
) -> Result<RateOfChangeReport> {
    if samples.is_empty() {
        return Err(Error::InsufficientSamples { required: 1, got: 0 });
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidValue(format!("tau must be positive, got {tau}")));
    }
    if partition.len() < samples.len() {
        return Err(Error::DimensionMismatch {
            axis: "partition rates",
            expected: samples.len(),
            found: partition.len(),
        });
    }
    let dim = samples[0].len();
    let centering = match analytic_mean {
        Some(m) => {
            if m.len() != dim {
                return Err(Error::DimensionMismatch {
                    axis: "centering",
                    expected: dim,
                    found: m.len(),
                });
            }
            m.clone()
        }
        None => {
            let mut mean = DVector::zeros(dim);
            for s in samples {
                mean += s;
            }
            mean / samples.len() as f64
        }
    };

    // Prefix sums P_j = Σ_{i<j} α(i)(g(Y_{i+1}) − ĝ); the windowed partial
    // sum over [a, b) is P_b − P_a.
    let mut prefix: Vec<DVector<f64>> = Vec::with_capacity(samples.len() + 1);
    prefix.push(DVector::zeros(dim));
    for (i, g) in samples.iter().enumerate() {
        let last = prefix.last().unwrap();
        prefix.push(last + partition.alpha(i) * (g - &centering));
    }

    let mut values = Vec::with_capacity(eval_steps.len());
    for &n in eval_steps {
        if n > partition.len() {
            return Err(Error::OutOfHorizon { t: n as f64, horizon: partition.len() as f64 });
        }
        let t_n = partition.time(n);
        let lo = partition.step_index(t_n - tau)?;
        let hi = partition.step_index(t_n + tau).map_err(|_| Error::InsufficientSamples {
            required: partition.len() + 1,
            got: samples.len(),
        })?;
        if hi > samples.len() {
            return Err(Error::InsufficientSamples { required: hi, got: samples.len() });
        }
        let mut sup = 0.0f64;
        for coord in 0..dim {
            let mut max = f64::NEG_INFINITY;
            let mut min = f64::INFINITY;
            for p in &prefix[lo..=hi] {
                max = max.max(p[coord]);
                min = min.min(p[coord]);
            }
            sup = sup.max(max - min);
        }
        values.push(sup);
    }

    let (slope, p_value) = log_log_slope(eval_steps, &values);
    let decays = slope.map(|s| s < DECAY_SLOPE);
    Ok(RateOfChangeReport {
        tau,
        eval_steps: eval_steps.to_vec(),
        values,
        centering: centering.iter().copied().collect(),
        slope,
        p_value,
        decays,
    })
}

/// OLS fit of `log(value)` on `log(n)` with a one-sided p-value for a
/// negative slope. Returns `None` when fewer than three positive points
/// remain.
fn log_log_slope(steps: &[usize], values: &[f64]) -> (Option<f64>, Option<f64>) {
    let points: Vec<(f64, f64)> = steps
        .iter()
        .zip(values)
        .filter(|(&n, &v)| n > 0 && v > 0.0)
        .map(|(&n, &v)| ((n as f64).ln(), v.ln()))
        .collect();
    let m = points.len();
    if m < 3 {
        return (None, None);
    }
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / m as f64;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / m as f64;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    if sxx <= 0.0 {
        return (None, None);
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let slope = sxy / sxx;
    let residual_ss: f64 = points
        .iter()
        .map(|p| {
            let fitted = mean_y + slope * (p.0 - mean_x);
            (p.1 - fitted).powi(2)
        })
        .sum();
    let dof = (m - 2) as f64;
    let se = (residual_ss / dof / sxx).sqrt();
    let p = if se > 0.0 {
        let t = slope / se;
        StudentsT::new(0.0, 1.0, dof).ok().map(|dist| dist.cdf(t))
    } else {
        Some(if slope < 0.0 { 0.0 } else { 1.0 })
    };
    (Some(slope), p)
}

/// Geometrically spaced evaluation indices in `[lo, hi]`.
pub fn geometric_eval_steps(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    assert!(lo >= 1 && hi >= lo && count >= 2);
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    let mut steps: Vec<usize> = (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp().round() as usize)
        .collect();
    steps.dedup();
    steps
}

/// Running-mean convergence check against an optional analytic reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LlnReport {
    pub checkpoints: Vec<usize>,
    /// Running mean at each checkpoint, flattened.
    pub running_means: Vec<Vec<f64>>,
    pub terminal_mean: Vec<f64>,
    /// ‖mean − reference‖/‖reference‖ at each checkpoint, when a reference
    /// was supplied.
    pub relative_errors: Option<Vec<f64>>,
    pub terminal_relative_error: Option<f64>,
}

/// Minimum sample count for a meaningful long-run average.
pub const LLN_MIN_SAMPLES: usize = 10_000;

pub fn lln_check(
    samples: impl IntoIterator<Item = DVector<f64>>,
    checkpoints: &[usize],
    reference: Option<&DVector<f64>>,
) -> Result<LlnReport> {
    let mut sorted = checkpoints.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.first().is_some_and(|&c| c == 0) {
        return Err(Error::InvalidValue("checkpoints must be positive".into()));
    }

    let mut sum: Option<DVector<f64>> = None;
    let mut count = 0usize;
    let mut running_means = Vec::with_capacity(sorted.len());
    let mut next = sorted.iter().copied().peekable();
    for sample in samples {
        let acc = sum.get_or_insert_with(|| DVector::zeros(sample.len()));
        *acc += &sample;
        count += 1;
        if next.peek() == Some(&count) {
            running_means.push(acc.clone() / count as f64);
            next.next();
        }
    }
    if count < LLN_MIN_SAMPLES {
        return Err(Error::InsufficientSamples { required: LLN_MIN_SAMPLES, got: count });
    }
    if next.peek().is_some() {
        return Err(Error::InsufficientSamples {
            required: *next.peek().unwrap(),
            got: count,
        });
    }
    let terminal_mean = sum.unwrap() / count as f64;

    let relative = |mean: &DVector<f64>, reference: &DVector<f64>| {
        (mean - reference).norm() / reference.norm().max(f64::MIN_POSITIVE)
    };
    let relative_errors = reference.map(|r| {
        running_means.iter().map(|m| relative(m, r)).collect::<Vec<_>>()
    });
    let terminal_relative_error = reference.map(|r| relative(&terminal_mean, r));

    Ok(LlnReport {
        checkpoints: sorted,
        running_means: running_means.iter().map(|m| m.iter().copied().collect()).collect(),
        terminal_mean: terminal_mean.iter().copied().collect(),
        relative_errors,
        terminal_relative_error,
    })
}

/// Boundedness summary of a recorded run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    pub overall_max: f64,
    /// Max of ‖x‖ within each tenth of the recorded run.
    pub decile_maxima: Vec<f64>,
    pub last_decile_max: f64,
    /// Running max at each recorded step.
    pub running_max: Vec<f64>,
    pub diverged: bool,
    /// No divergence and the final decile introduced no new maximum.
    pub bounded_consistent: bool,
}

pub fn stability_monitor(trajectory: &Trajectory) -> StabilityReport {
    let n = trajectory.norms.len();
    let mut running_max = Vec::with_capacity(n);
    let mut acc = 0.0f64;
    for &norm in &trajectory.norms {
        acc = acc.max(norm);
        running_max.push(acc);
    }
    let overall_max = acc;
    let deciles = 10usize;
    let mut decile_maxima = vec![0.0f64; deciles.min(n.max(1))];
    if n > 0 {
        for (i, &norm) in trajectory.norms.iter().enumerate() {
            let d = (i * deciles / n).min(deciles - 1);
            decile_maxima[d] = decile_maxima[d].max(norm);
        }
    }
    let last_decile_max = decile_maxima.last().copied().unwrap_or(0.0);
    // The guard may have tripped between recorded points; treat any recorded
    // breach the same way.
    let diverged = trajectory.diverged
        || trajectory.norms.iter().any(|x| !x.is_finite() || *x > OVERFLOW_GUARD);
    StabilityReport {
        overall_max,
        last_decile_max,
        decile_maxima,
        running_max,
        diverged,
        bounded_consistent: !diverged && last_decile_max <= overall_max,
    }
}

/// Trace-magnitude summary: quantiles, growth, and a heavy-tail flag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceStatsReport {
    /// (level, value) pairs of ‖e‖ quantiles over the recorded run.
    pub quantiles: Vec<(f64, f64)>,
    pub overall_max: f64,
    pub first_half_max: f64,
    /// Running max of ‖e‖ at each recorded step.
    pub running_max: Vec<f64>,
    /// Raised when the running max escapes far above the bulk of the
    /// distribution (three times the 99th percentile): no fixed quantile
    /// band holds it.
    pub heavy_tail: bool,
    pub followon_max: Option<f64>,
}

pub fn trace_statistics(trajectory: &Trajectory) -> TraceStatsReport {
    let n = trajectory.trace_norms.len();
    let mut running_max = Vec::with_capacity(n);
    let mut acc = 0.0f64;
    let mut first_half_max = 0.0f64;
    for (i, &norm) in trajectory.trace_norms.iter().enumerate() {
        acc = acc.max(norm);
        running_max.push(acc);
        if i < n / 2 {
            first_half_max = first_half_max.max(norm);
        }
    }
    let mut sorted = trajectory.trace_norms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |q: f64| -> f64 {
        if sorted.is_empty() {
            return 0.0;
        }
        let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
        sorted[idx]
    };
    let quantiles = [0.5, 0.9, 0.99]
        .iter()
        .map(|&q| (q, quantile(q)))
        .collect();
    let followon_max = trajectory
        .followon
        .as_ref()
        .map(|f| f.iter().fold(0.0f64, |m, &x| m.max(x.abs())));
    let q99 = quantile(0.99);
    TraceStatsReport {
        quantiles,
        overall_max: acc,
        first_half_max,
        running_max,
        heavy_tail: n >= 4 && acc > 3.0 * q99,
        followon_max,
    }
}
