//! Expected-update systems for the trace-based learners and matrix
//! stability verdicts.
//!
//! For each learner the long-run average of its stochastic update is an
//! affine map `x ↦ A'x + b'` whose coefficients have closed forms in the
//! induced-chain quantities. This module assembles those systems, computes
//! their fixed points `−A⁻¹b`, and reports eigenvalue-based stability
//! verdicts: Hurwitz (all eigenvalue real parts strictly negative) and
//! negative definiteness (all eigenvalues of `M + Mᵀ` strictly negative).

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{FeatureMap, FiniteMdp, LambdaBellman, Policy, SOLVE_TOL};

/// Strictness margin for eigenvalue verdicts; spectra within this band of
/// zero are reported indeterminate instead of being forced into a boolean.
pub const EIGEN_MARGIN: f64 = 1e-10;
/// Condition numbers above this trigger the ill-conditioned warning flag.
pub const CONDITION_WARN: f64 = 1e8;

/// Three-valued stability verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Holds,
    Fails,
    Indeterminate,
}

impl Verdict {
    /// Strictly-negative test with the indeterminate band around zero.
    fn from_max(max: f64) -> Self {
        if max < -EIGEN_MARGIN {
            Verdict::Holds
        } else if max > EIGEN_MARGIN {
            Verdict::Fails
        } else {
            Verdict::Indeterminate
        }
    }

    pub fn confirmed(self) -> bool {
        self == Verdict::Holds
    }
}

/// Eigenvalue diagnostics of a square matrix, with the affine fixed point
/// when a drift vector is supplied and the matrix is invertible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralReport {
    /// Eigenvalues as `[re, im]` pairs, sorted by descending real part.
    pub eigenvalues: Vec<[f64; 2]>,
    pub max_real_part: f64,
    /// Largest eigenvalue of `M + Mᵀ`.
    pub max_symmetric_eigenvalue: f64,
    pub is_hurwitz: Verdict,
    pub is_negative_definite: Verdict,
    /// `−M⁻¹ b`, present when `b` was given and `M` is nonsingular.
    pub fixed_point: Option<Vec<f64>>,
    /// Ratio of extreme singular values.
    pub condition_number: f64,
    pub singular: bool,
    /// Set when `condition_number` exceeds [`CONDITION_WARN`].
    pub ill_conditioned: bool,
}

impl SpectralReport {
    pub fn fixed_point_vector(&self) -> Option<DVector<f64>> {
        self.fixed_point.as_ref().map(|v| DVector::from_vec(v.clone()))
    }
}

/// Dense eigenvalue analysis of `m`, optionally solving `m x = −b`.
///
/// Never fails: a singular matrix with `b` present yields a report without
/// a fixed point and with the singularity flag set.
pub fn spectral_report(m: &DMatrix<f64>, b: Option<&DVector<f64>>) -> SpectralReport {
    assert_eq!(m.nrows(), m.ncols(), "spectral_report needs a square matrix");
    let mut eigenvalues: Vec<Complex<f64>> = m.complex_eigenvalues().iter().copied().collect();
    eigenvalues.sort_by(|x, y| y.re.partial_cmp(&x.re).unwrap());
    let max_real_part = eigenvalues.first().map(|e| e.re).unwrap_or(f64::NEG_INFINITY);

    let symmetric = m + m.transpose();
    let max_symmetric_eigenvalue = SymmetricEigen::new(symmetric).eigenvalues.max();

    let svd = m.clone().svd(false, false);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    let singular = s_min <= 1e-12 * s_max.max(1.0);
    let condition_number = if s_min > 0.0 { s_max / s_min } else { f64::INFINITY };

    let fixed_point = match b {
        Some(b) if !singular => {
            m.clone().lu().solve(&(-b)).map(|x| x.iter().copied().collect())
        }
        _ => None,
    };

    SpectralReport {
        eigenvalues: eigenvalues.iter().map(|e| [e.re, e.im]).collect(),
        max_real_part,
        max_symmetric_eigenvalue,
        is_hurwitz: Verdict::from_max(max_real_part),
        is_negative_definite: Verdict::from_max(max_symmetric_eigenvalue),
        fixed_point,
        condition_number,
        singular,
        ill_conditioned: condition_number > CONDITION_WARN,
    }
}

/// Expected-update system of the gradient-corrected learner.
///
/// The stochastic update of the stacked iterate `x = [ν; θ]` averages to
/// `A'x + b'` with the block layout `A' = [[−C, A], [−Aᵀ, 0]]`,
/// `b' = [b; 0]`.
#[derive(Debug, Clone)]
pub struct GtdSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DMatrix<f64>,
    pub a_block: DMatrix<f64>,
    pub b_block: DVector<f64>,
}

impl GtdSystem {
    /// `−A⁻¹ b`, the limit of the θ iterates when `A` is nonsingular.
    pub fn fixed_point(&self) -> Option<DVector<f64>> {
        spectral_report(&self.a, Some(&self.b)).fixed_point_vector()
    }

    pub fn report_block(&self) -> SpectralReport {
        spectral_report(&self.a_block, Some(&self.b_block))
    }
}

/// Expected-update system of the emphasis-weighted learner, with the
/// state-weight vector `m = (I − γP_λᵀ)⁻¹ D_μ i` in place of `d_μ`.
#[derive(Debug, Clone)]
pub struct EtdSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Long-run emphatic state weights; strictly positive for positive interest.
    pub state_weights: DVector<f64>,
}

impl EtdSystem {
    pub fn fixed_point(&self) -> Option<DVector<f64>> {
        spectral_report(&self.a, Some(&self.b)).fixed_point_vector()
    }

    pub fn report(&self) -> SpectralReport {
        spectral_report(&self.a, Some(&self.b))
    }
}

fn diag_times(d: &DVector<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| d[i] * m[(i, j)])
}

/// Shared pieces of the expected systems: behavior stationary law and the
/// target-policy λ-operator.
fn analytic_parts(
    mdp: &FiniteMdp,
    target: &Policy,
    behavior: &Policy,
    lambda: f64,
    features: &FeatureMap,
) -> Result<(DVector<f64>, LambdaBellman)> {
    if features.n_states() != mdp.n_states() {
        return Err(Error::DimensionMismatch {
            axis: "feature rows",
            expected: mdp.n_states(),
            found: features.n_states(),
        });
    }
    let behavior_chain = mdp.induce_chain(behavior)?;
    let d_mu = behavior_chain.stationary_distribution(SOLVE_TOL)?;
    let target_chain = mdp.induce_chain(target)?;
    let bellman = LambdaBellman::build(&target_chain, mdp.gamma(), lambda)?;
    Ok((d_mu, bellman))
}

/// Expected drift of the plain off-policy TD update:
/// `A = ΦᵀD_μ(γP_λ − I)Φ`, `b = ΦᵀD_μ r_λ`.
///
/// Unlike the learner systems this places no rank requirement on the
/// features; it is what the divergence construction is probed with.
pub fn td_mean_field(
    mdp: &FiniteMdp,
    target: &Policy,
    behavior: &Policy,
    lambda: f64,
    features: &FeatureMap,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (d_mu, bellman) = analytic_parts(mdp, target, behavior, lambda, features)?;
    let phi = features.matrix();
    let n = mdp.n_states();
    let drift = mdp.gamma() * bellman.transition() - DMatrix::<f64>::identity(n, n);
    let a = phi.transpose() * diag_times(&d_mu, &(drift * phi));
    let b = phi.transpose() * DVector::from_fn(n, |s, _| d_mu[s] * bellman.reward()[s]);
    Ok((a, b))
}

/// Analytic `A = ΦᵀD_μ(γP_λ − I)Φ`, `b = ΦᵀD_μ r_λ`, `C = ΦᵀD_μΦ`,
/// with the block system assembled.
pub fn gtd_expected_system(
    mdp: &FiniteMdp,
    target: &Policy,
    behavior: &Policy,
    lambda: f64,
    features: &FeatureMap,
) -> Result<GtdSystem> {
    features.require_full_rank()?;
    let (d_mu, bellman) = analytic_parts(mdp, target, behavior, lambda, features)?;
    let phi = features.matrix();
    let n = mdp.n_states();
    let k = features.dim();

    let drift = mdp.gamma() * bellman.transition() - DMatrix::<f64>::identity(n, n);
    let a = phi.transpose() * diag_times(&d_mu, &(drift * phi));
    let b = phi.transpose() * DVector::from_fn(n, |s, _| d_mu[s] * bellman.reward()[s]);
    let c = phi.transpose() * diag_times(&d_mu, phi);

    let mut a_block = DMatrix::zeros(2 * k, 2 * k);
    a_block.view_mut((0, 0), (k, k)).copy_from(&(-&c));
    a_block.view_mut((0, k), (k, k)).copy_from(&a);
    a_block.view_mut((k, 0), (k, k)).copy_from(&(-a.transpose()));
    let mut b_block = DVector::zeros(2 * k);
    b_block.rows_mut(0, k).copy_from(&b);

    Ok(GtdSystem { a, b, c, a_block, b_block })
}

/// Analytic `A = ΦᵀD_m(γP_λ − I)Φ`, `b = ΦᵀD_m r_λ` with emphatic weights
/// `m` solved from `(I − γP_λᵀ) m = D_μ i`.
pub fn etd_expected_system(
    mdp: &FiniteMdp,
    target: &Policy,
    behavior: &Policy,
    lambda: f64,
    interest: &DVector<f64>,
    features: &FeatureMap,
) -> Result<EtdSystem> {
    if interest.len() != mdp.n_states() {
        return Err(Error::DimensionMismatch {
            axis: "interest",
            expected: mdp.n_states(),
            found: interest.len(),
        });
    }
    for (s, &i) in interest.iter().enumerate() {
        if !(i.is_finite() && i > 0.0) {
            return Err(Error::NonpositiveInterest { state: s, value: i });
        }
    }
    features.require_full_rank()?;
    let (d_mu, bellman) = analytic_parts(mdp, target, behavior, lambda, features)?;
    let phi = features.matrix();
    let n = mdp.n_states();

    let rhs = DVector::from_fn(n, |s, _| d_mu[s] * interest[s]);
    let system = DMatrix::<f64>::identity(n, n) - mdp.gamma() * bellman.transition().transpose();
    let state_weights = system
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular("emphatic weight solve"))?;

    let drift = mdp.gamma() * bellman.transition() - DMatrix::<f64>::identity(n, n);
    let a = phi.transpose() * diag_times(&state_weights, &(drift * phi));
    let b = phi.transpose()
        * DVector::from_fn(n, |s, _| state_weights[s] * bellman.reward()[s]);

    Ok(EtdSystem { a, b, state_weights })
}
