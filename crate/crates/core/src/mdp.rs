//! Finite MDPs, policies, induced chains, and the λ-weighted Bellman algebra.
//!
//! Everything here is exact linear algebra on small dense systems: induced
//! transition matrices, stationary distributions, the λ-Bellman operator
//! with its interpolated reward/transition pair, value functions, and the
//! weighted projected Bellman error. All types validate their invariants at
//! construction; operations may assume them afterwards.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Tolerance for probability-vector and row-stochasticity checks.
pub const PROB_TOL: f64 = 1e-12;
/// Residual tolerance for the dense linear solves in this module.
pub const SOLVE_TOL: f64 = 1e-10;
/// Minimum admissible entry of a projection weight vector.
pub const MIN_WEIGHT: f64 = 1e-12;

/// A finite MDP: transition kernel, reward table, discount, initial law.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    /// One row-stochastic |S|×|S| matrix per action; `kernels[a][(s, s')]`
    /// is the probability of moving to `s'` from `s` under action `a`.
    kernels: Vec<DMatrix<f64>>,
    /// `rewards[(s, a)]`.
    rewards: DMatrix<f64>,
    gamma: f64,
    initial_dist: DVector<f64>,
}

impl FiniteMdp {
    pub fn new(
        kernels: Vec<DMatrix<f64>>,
        rewards: DMatrix<f64>,
        gamma: f64,
        initial_dist: DVector<f64>,
    ) -> Result<Self> {
        let n_actions = kernels.len();
        if n_actions == 0 {
            return Err(Error::InvalidValue("MDP needs at least one action".into()));
        }
        let n_states = kernels[0].nrows();
        if n_states == 0 {
            return Err(Error::InvalidValue("MDP needs at least one state".into()));
        }
        for (a, k) in kernels.iter().enumerate() {
            if k.nrows() != n_states || k.ncols() != n_states {
                return Err(Error::DimensionMismatch {
                    axis: "transition kernel",
                    expected: n_states,
                    found: k.nrows().max(k.ncols()),
                });
            }
            for s in 0..n_states {
                let row = k.row(s);
                if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(Error::InvalidValue(format!(
                        "transition probability out of range at (s={s}, a={a})"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(Error::KernelRowSum { state: s, action: a, sum });
                }
            }
        }
        if rewards.nrows() != n_states || rewards.ncols() != n_actions {
            return Err(Error::DimensionMismatch {
                axis: "reward table",
                expected: n_states * n_actions,
                found: rewards.nrows() * rewards.ncols(),
            });
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidValue("non-finite reward".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidValue(format!(
                "discount must lie in [0, 1), got {gamma}"
            )));
        }
        if initial_dist.len() != n_states {
            return Err(Error::DimensionMismatch {
                axis: "initial distribution",
                expected: n_states,
                found: initial_dist.len(),
            });
        }
        let sum: f64 = initial_dist.iter().sum();
        if (sum - 1.0).abs() > PROB_TOL || initial_dist.iter().any(|p| *p < 0.0) {
            return Err(Error::InvalidValue(format!(
                "initial distribution must be a probability vector (sum {sum})"
            )));
        }
        Ok(Self { kernels, rewards, gamma, initial_dist })
    }

    pub fn n_states(&self) -> usize {
        self.kernels[0].nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.kernels.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial_dist(&self) -> &DVector<f64> {
        &self.initial_dist
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[(s, a)]
    }

    /// p(s' | s, a)
    pub fn transition(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.kernels[a][(s, s_next)]
    }

    pub fn kernel(&self, a: usize) -> &DMatrix<f64> {
        &self.kernels[a]
    }

    /// Collapses the MDP under a policy into a Markov reward chain:
    /// `P(s, s') = Σ_a π(a|s) p(s'|s, a)` and `r(s) = Σ_a π(a|s) r(s, a)`.
    pub fn induce_chain(&self, policy: &Policy) -> Result<InducedChain> {
        if policy.n_states() != self.n_states() {
            return Err(Error::DimensionMismatch {
                axis: "policy states",
                expected: self.n_states(),
                found: policy.n_states(),
            });
        }
        if policy.n_actions() != self.n_actions() {
            return Err(Error::DimensionMismatch {
                axis: "policy actions",
                expected: self.n_actions(),
                found: policy.n_actions(),
            });
        }
        let n = self.n_states();
        let mut transition = DMatrix::zeros(n, n);
        let mut reward = DVector::zeros(n);
        for s in 0..n {
            for a in 0..self.n_actions() {
                let w = policy.prob(s, a);
                reward[s] += w * self.rewards[(s, a)];
                for s_next in 0..n {
                    transition[(s, s_next)] += w * self.kernels[a][(s, s_next)];
                }
            }
        }
        Ok(InducedChain { transition, reward })
    }
}

/// A stochastic policy; row `s` is the action distribution in state `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    probs: DMatrix<f64>,
}

impl Policy {
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        for s in 0..probs.nrows() {
            let row = probs.row(s);
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidValue(format!(
                    "policy probability out of range in state {s}"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_TOL {
                return Err(Error::InvalidValue(format!(
                    "policy row {s} sums to {sum}, not 1"
                )));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: DMatrix::from_element(n_states, n_actions, 1.0 / n_actions as f64),
        }
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[(s, a)]
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }
}

/// Importance sampling ratio `π(a|s) / μ(a|s)`.
///
/// Requires the behavior policy to cover the pair; a zero behavior
/// probability is a coverage violation, not a numeric infinity.
pub fn importance_ratio(target: &Policy, behavior: &Policy, s: usize, a: usize) -> Result<f64> {
    let mu = behavior.prob(s, a);
    if mu <= 0.0 {
        return Err(Error::CoverageViolation { state: s, action: a });
    }
    Ok(target.prob(s, a) / mu)
}

/// Markov reward chain induced by a policy: `P_π` and `r_π`.
#[derive(Debug, Clone, PartialEq)]
pub struct InducedChain {
    transition: DMatrix<f64>,
    reward: DVector<f64>,
}

impl InducedChain {
    pub fn n_states(&self) -> usize {
        self.transition.nrows()
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn reward(&self) -> &DVector<f64> {
        &self.reward
    }

    /// Stationary distribution `d` with `dᵀP = dᵀ`, `Σd = 1`.
    ///
    /// Solves the linear system `(Pᵀ − I)d = 0` with the normalization
    /// constraint replacing the last equation, which also handles periodic
    /// chains where plain power iteration oscillates. Irreducibility is the
    /// caller's responsibility; a reducible chain surfaces as a singular
    /// solve or a residual above `tol`.
    pub fn stationary_distribution(&self, tol: f64) -> Result<DVector<f64>> {
        let n = self.n_states();
        let mut system = self.transition.transpose() - DMatrix::<f64>::identity(n, n);
        for j in 0..n {
            system[(n - 1, j)] = 1.0;
        }
        let mut rhs = DVector::zeros(n);
        rhs[n - 1] = 1.0;
        let d = system
            .lu()
            .solve(&rhs)
            .ok_or(Error::StationaryFailed { residual: f64::INFINITY })?;
        let residual = (self.transition.transpose() * &d - &d).amax();
        if residual > tol || d.iter().any(|x| *x < -tol) {
            return Err(Error::StationaryFailed { residual });
        }
        // Flush solver-noise negatives and renormalize.
        let mut d = d.map(|x| x.max(0.0));
        d /= d.sum();
        Ok(d)
    }

    /// Value function `v = (I − γP)⁻¹ r`.
    pub fn value_function(&self, gamma: f64) -> Result<DVector<f64>> {
        let n = self.n_states();
        let system = DMatrix::<f64>::identity(n, n) - gamma * &self.transition;
        let v = system
            .lu()
            .solve(&self.reward)
            .ok_or(Error::Singular("value function solve"))?;
        let residual = (&self.reward - (DMatrix::<f64>::identity(n, n) - gamma * &self.transition) * &v).amax();
        if residual > SOLVE_TOL.max(SOLVE_TOL * self.reward.amax()) {
            return Err(Error::Singular("value function residual"));
        }
        Ok(v)
    }
}

/// The λ-interpolated Bellman operator `v ↦ r_λ + γ P_λ v` with
/// `r_λ = (I − γλP)⁻¹ r` and `P_λ = (1 − λ)(I − γλP)⁻¹ P`.
///
/// At λ = 0 this is the one-step operator; at λ = 1 the transition part
/// vanishes and the operator is the constant map onto the value function.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaBellman {
    lambda: f64,
    gamma: f64,
    reward: DVector<f64>,
    transition: DMatrix<f64>,
}

impl LambdaBellman {
    pub fn build(chain: &InducedChain, gamma: f64, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidValue(format!("lambda must lie in [0, 1], got {lambda}")));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidValue(format!("gamma must lie in [0, 1), got {gamma}")));
        }
        let n = chain.n_states();
        let system = DMatrix::<f64>::identity(n, n) - gamma * lambda * chain.transition();
        let lu = system.clone().lu();
        let reward = lu
            .solve(chain.reward())
            .ok_or(Error::Singular("lambda-Bellman reward solve"))?;
        let propagated = lu
            .solve(chain.transition())
            .ok_or(Error::Singular("lambda-Bellman transition solve"))?;
        // γλ < 1 keeps the system invertible; verify the residuals anyway.
        let res_r = (&system * &reward - chain.reward()).amax();
        let res_p = (&system * &propagated - chain.transition()).amax();
        if res_r > SOLVE_TOL.max(SOLVE_TOL * chain.reward().amax()) || res_p > SOLVE_TOL {
            return Err(Error::Singular("lambda-Bellman residual"));
        }
        let transition = (1.0 - lambda) * propagated;
        Ok(Self { lambda, gamma, reward, transition })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `r_λ`
    pub fn reward(&self) -> &DVector<f64> {
        &self.reward
    }

    /// `P_λ`
    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    /// Contraction modulus `γ(1 − λ) / (1 − γλ)` in the stationary-weighted norm.
    pub fn contraction_factor(&self) -> f64 {
        self.gamma * (1.0 - self.lambda) / (1.0 - self.gamma * self.lambda)
    }

    /// Applies the operator: `r_λ + γ P_λ v`.
    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.reward.len() {
            return Err(Error::DimensionMismatch {
                axis: "value vector",
                expected: self.reward.len(),
                found: v.len(),
            });
        }
        Ok(&self.reward + self.gamma * &self.transition * v)
    }
}

/// Per-state feature rows; `matrix` is |S|×K.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    matrix: DMatrix<f64>,
}

impl FeatureMap {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::InvalidValue("feature matrix must be non-empty".into()));
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidValue("non-finite feature entry".into()));
        }
        Ok(Self { matrix })
    }

    pub fn identity(n_states: usize) -> Self {
        Self { matrix: DMatrix::identity(n_states, n_states) }
    }

    pub fn n_states(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// φ(s) as a column vector.
    pub fn row(&self, s: usize) -> DVector<f64> {
        self.matrix.row(s).transpose()
    }

    pub fn column_rank(&self) -> usize {
        let eps = 1e-10 * self.matrix.amax().max(1.0);
        self.matrix.clone().svd(false, false).rank(eps)
    }

    /// Errors unless the columns are linearly independent.
    pub fn require_full_rank(&self) -> Result<()> {
        let rank = self.column_rank();
        if rank < self.dim() {
            return Err(Error::RankDeficient { rank, columns: self.dim() });
        }
        Ok(())
    }

    /// Weighted projection onto the feature span, `Φ(ΦᵀDΦ)⁻¹ΦᵀD`.
    pub fn projection(&self, weights: &DVector<f64>) -> Result<Projection> {
        self.require_full_rank()?;
        if weights.len() != self.n_states() {
            return Err(Error::DimensionMismatch {
                axis: "projection weights",
                expected: self.n_states(),
                found: weights.len(),
            });
        }
        let min = weights.min();
        if min <= MIN_WEIGHT {
            return Err(Error::NonpositiveWeight { min });
        }
        let weighted = DMatrix::from_fn(self.n_states(), self.dim(), |s, k| {
            weights[s] * self.matrix[(s, k)]
        });
        let gram = self.matrix.transpose() * &weighted;
        let gram_inv = gram.try_inverse().ok_or(Error::Singular("projection gram matrix"))?;
        let operator = &self.matrix * gram_inv * weighted.transpose();
        Ok(Projection { operator })
    }
}

/// Materialized projection operator; apply with [`Projection::apply`].
#[derive(Debug, Clone)]
pub struct Projection {
    operator: DMatrix<f64>,
}

impl Projection {
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.operator * v
    }

    pub fn operator(&self) -> &DMatrix<f64> {
        &self.operator
    }
}

/// d-weighted Euclidean norm `√(Σ_i d_i x_i²)`.
pub fn weighted_norm(x: &DVector<f64>, d: &DVector<f64>) -> f64 {
    x.iter()
        .zip(d.iter())
        .map(|(xi, di)| di * xi * xi)
        .sum::<f64>()
        .sqrt()
}

/// Weighted mean squared projected Bellman error of `Φθ` under the given
/// operator and strictly positive state weights.
///
/// The weights need not be normalized; the emphatic variant uses an
/// unnormalized state-weight vector.
pub fn mspbe(
    bellman: &LambdaBellman,
    features: &FeatureMap,
    weights: &DVector<f64>,
    theta: &DVector<f64>,
) -> Result<f64> {
    if theta.len() != features.dim() {
        return Err(Error::DimensionMismatch {
            axis: "theta",
            expected: features.dim(),
            found: theta.len(),
        });
    }
    let projection = features.projection(weights)?;
    let v = features.matrix() * theta;
    let backed_up = bellman.apply(&v)?;
    let diff = projection.apply(&backed_up) - v;
    Ok(weighted_norm(&diff, weights).powi(2))
}

/// On-disk problem description; see the README for the schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemFile {
    pub n_states: usize,
    pub n_actions: usize,
    /// Indexed `[s][a][s']`.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// Indexed `[s][a]`.
    pub reward: Vec<Vec<f64>>,
    pub gamma: f64,
    pub initial_dist: Vec<f64>,
    /// Named policies, each indexed `[s][a]`.
    pub policies: BTreeMap<String, Vec<Vec<f64>>>,
    /// Indexed `[s][k]`.
    pub features: Vec<Vec<f64>>,
}

impl ProblemFile {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Validates every structural invariant, reporting the first violation
    /// with its indices, and assembles the typed pieces.
    pub fn build(&self) -> Result<(FiniteMdp, BTreeMap<String, Policy>, FeatureMap)> {
        if self.transition.len() != self.n_states {
            return Err(Error::DimensionMismatch {
                axis: "transition outer (states)",
                expected: self.n_states,
                found: self.transition.len(),
            });
        }
        let mut kernels =
            vec![DMatrix::zeros(self.n_states, self.n_states); self.n_actions];
        for (s, per_action) in self.transition.iter().enumerate() {
            if per_action.len() != self.n_actions {
                return Err(Error::DimensionMismatch {
                    axis: "transition actions",
                    expected: self.n_actions,
                    found: per_action.len(),
                });
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != self.n_states {
                    return Err(Error::DimensionMismatch {
                        axis: "transition successors",
                        expected: self.n_states,
                        found: row.len(),
                    });
                }
                for (s_next, p) in row.iter().enumerate() {
                    if !p.is_finite() || *p < 0.0 || *p > 1.0 {
                        return Err(Error::InvalidValue(format!(
                            "transition[{s}][{a}][{s_next}] = {p} out of [0, 1]"
                        )));
                    }
                    kernels[a][(s, s_next)] = *p;
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(Error::KernelRowSum { state: s, action: a, sum });
                }
            }
        }
        if self.reward.len() != self.n_states {
            return Err(Error::DimensionMismatch {
                axis: "reward rows",
                expected: self.n_states,
                found: self.reward.len(),
            });
        }
        let mut rewards = DMatrix::zeros(self.n_states, self.n_actions);
        for (s, row) in self.reward.iter().enumerate() {
            if row.len() != self.n_actions {
                return Err(Error::DimensionMismatch {
                    axis: "reward columns",
                    expected: self.n_actions,
                    found: row.len(),
                });
            }
            for (a, r) in row.iter().enumerate() {
                rewards[(s, a)] = *r;
            }
        }
        let initial = DVector::from_vec(self.initial_dist.clone());
        let mdp = FiniteMdp::new(kernels, rewards, self.gamma, initial)?;

        let mut policies = BTreeMap::new();
        for (name, rows) in &self.policies {
            if rows.len() != self.n_states {
                return Err(Error::DimensionMismatch {
                    axis: "policy rows",
                    expected: self.n_states,
                    found: rows.len(),
                });
            }
            let mut probs = DMatrix::zeros(self.n_states, self.n_actions);
            for (s, row) in rows.iter().enumerate() {
                if row.len() != self.n_actions {
                    return Err(Error::DimensionMismatch {
                        axis: "policy columns",
                        expected: self.n_actions,
                        found: row.len(),
                    });
                }
                for (a, p) in row.iter().enumerate() {
                    probs[(s, a)] = *p;
                }
            }
            let policy = Policy::new(probs).map_err(|e| {
                Error::InvalidValue(format!("policy '{name}': {e}"))
            })?;
            policies.insert(name.clone(), policy);
        }

        if self.features.len() != self.n_states {
            return Err(Error::DimensionMismatch {
                axis: "feature rows",
                expected: self.n_states,
                found: self.features.len(),
            });
        }
        let k = self.features.first().map(|r| r.len()).unwrap_or(0);
        let mut feat = DMatrix::zeros(self.n_states, k);
        for (s, row) in self.features.iter().enumerate() {
            if row.len() != k {
                return Err(Error::DimensionMismatch {
                    axis: "feature columns",
                    expected: k,
                    found: row.len(),
                });
            }
            for (j, x) in row.iter().enumerate() {
                feat[(s, j)] = *x;
            }
        }
        let features = FeatureMap::new(feat)?;

        Ok((mdp, policies, features))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_mdp, random_policy};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent nullspace oracle: Gaussian elimination on (Pᵀ − I),
    /// back-substituting with the last variable pinned to 1.
    fn nullspace_stationary(p: &DMatrix<f64>) -> DVector<f64> {
        let n = p.nrows();
        let mut m = p.transpose() - DMatrix::<f64>::identity(n, n);
        // Forward elimination with partial pivoting over the first n-1 columns.
        for col in 0..n - 1 {
            let pivot = (col..n)
                .max_by(|&i, &j| m[(i, col)].abs().partial_cmp(&m[(j, col)].abs()).unwrap())
                .unwrap();
            if m[(pivot, col)].abs() < 1e-14 {
                continue;
            }
            m.swap_rows(col, pivot);
            for row in col + 1..n {
                let f = m[(row, col)] / m[(col, col)];
                for j in col..n {
                    m[(row, j)] -= f * m[(col, j)];
                }
            }
        }
        let mut d = DVector::zeros(n);
        d[n - 1] = 1.0;
        for row in (0..n - 1).rev() {
            let mut acc = 0.0;
            for j in row + 1..n {
                acc += m[(row, j)] * d[j];
            }
            d[row] = -acc / m[(row, row)];
        }
        &d / d.sum()
    }

    #[test]
    fn induce_chain_single_action_is_kernel() {
        let kernel = DMatrix::from_row_slice(3, 3, &[0.2, 0.3, 0.5, 1.0, 0.0, 0.0, 0.1, 0.1, 0.8]);
        let rewards = DMatrix::from_column_slice(3, 1, &[1.0, -1.0, 0.5]);
        let mdp = FiniteMdp::new(
            vec![kernel.clone()],
            rewards,
            0.9,
            DVector::from_vec(vec![1.0, 0.0, 0.0]),
        )
        .unwrap();
        let policy = Policy::uniform(3, 1);
        let chain = mdp.induce_chain(&policy).unwrap();
        assert_eq!(chain.transition(), &kernel);
        assert_eq!(chain.reward(), &DVector::from_vec(vec![1.0, -1.0, 0.5]));
    }

    #[test]
    fn induce_chain_uniform_policy_averages_one_hot_rows() {
        // Two actions with one-hot kernels; a uniform policy averages them.
        let k0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let k1 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let rewards = DMatrix::zeros(2, 2);
        let mdp = FiniteMdp::new(
            vec![k0, k1],
            rewards,
            0.5,
            DVector::from_vec(vec![0.5, 0.5]),
        )
        .unwrap();
        let chain = mdp.induce_chain(&Policy::uniform(2, 2)).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        assert_relative_eq!(chain.transition(), &expected, epsilon = 1e-15);
    }

    #[test]
    fn induce_chain_matches_brute_force_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mdp = random_mdp(&mut rng, 4, 3, 0.9);
        let policy = random_policy(&mut rng, 4, 3);
        let chain = mdp.induce_chain(&policy).unwrap();
        for s in 0..4 {
            let mut r = 0.0;
            for a in 0..3 {
                r += policy.prob(s, a) * mdp.reward(s, a);
            }
            assert_relative_eq!(chain.reward()[s], r, epsilon = 1e-14);
            for s_next in 0..4 {
                let mut p = 0.0;
                for a in 0..3 {
                    p += policy.prob(s, a) * mdp.transition(s, a, s_next);
                }
                assert_relative_eq!(chain.transition()[(s, s_next)], p, epsilon = 1e-14);
            }
        }
        // Row stochasticity held within construction tolerance.
        for s in 0..4 {
            assert_relative_eq!(chain.transition().row(s).sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn induce_chain_rejects_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mdp = random_mdp(&mut rng, 3, 2, 0.9);
        let policy = Policy::uniform(4, 2);
        let err = mdp.induce_chain(&policy).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { axis: "policy states", .. }));
    }

    #[test]
    fn stationary_doubly_stochastic() {
        let chain = InducedChain {
            transition: DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]),
            reward: DVector::zeros(2),
        };
        let d = chain.stationary_distribution(1e-10).unwrap();
        assert_relative_eq!(d, DVector::from_vec(vec![0.5, 0.5]), epsilon = 1e-12);
    }

    #[test]
    fn stationary_periodic_chain() {
        // Power iteration would oscillate here; the linear solve does not.
        let chain = InducedChain {
            transition: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            reward: DVector::zeros(2),
        };
        let d = chain.stationary_distribution(1e-10).unwrap();
        assert_relative_eq!(d, DVector::from_vec(vec![0.5, 0.5]), epsilon = 1e-12);
    }

    #[test]
    fn stationary_matches_nullspace_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mdp = random_mdp(&mut rng, 5, 2, 0.9);
        let chain = mdp.induce_chain(&random_policy(&mut rng, 5, 2)).unwrap();
        let d = chain.stationary_distribution(1e-10).unwrap();
        let oracle = nullspace_stationary(chain.transition());
        assert_relative_eq!(d, oracle, epsilon = 1e-9);
        // Left-invariance.
        let residual = (chain.transition().transpose() * &d - &d).amax();
        assert!(residual <= 1e-10, "residual {residual}");
    }

    #[test]
    fn stationary_reducible_chain_fails() {
        let chain = InducedChain {
            transition: DMatrix::identity(3, 3),
            reward: DVector::zeros(3),
        };
        assert!(matches!(
            chain.stationary_distribution(1e-10),
            Err(Error::StationaryFailed { .. })
        ));
    }

    #[test]
    fn lambda_bellman_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdp = random_mdp(&mut rng, 4, 2, 0.9);
        let chain = mdp.induce_chain(&random_policy(&mut rng, 4, 2)).unwrap();

        // λ = 0 reduces to the one-step operator components.
        let b0 = LambdaBellman::build(&chain, 0.9, 0.0).unwrap();
        assert_relative_eq!(b0.reward(), chain.reward(), epsilon = 1e-12);
        assert_relative_eq!(b0.transition(), chain.transition(), epsilon = 1e-12);
        assert_relative_eq!(b0.contraction_factor(), 0.9, epsilon = 1e-15);

        // λ = 1 kills the transition part and the operator is constant.
        let b1 = LambdaBellman::build(&chain, 0.9, 1.0).unwrap();
        assert!(b1.transition().amax() < 1e-12);
        let v_pi = chain.value_function(0.9).unwrap();
        assert_relative_eq!(b1.reward(), &v_pi, epsilon = 1e-9);
        assert_relative_eq!(b1.contraction_factor(), 0.0, epsilon = 1e-15);
        let va = b1.apply(&DVector::from_element(4, 100.0)).unwrap();
        let vb = b1.apply(&DVector::from_element(4, -3.0)).unwrap();
        assert_relative_eq!(va, vb, epsilon = 1e-12);
    }

    #[test]
    fn lambda_bellman_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mdp = random_mdp(&mut rng, 5, 3, 0.8);
        let chain = mdp.induce_chain(&random_policy(&mut rng, 5, 3)).unwrap();
        for &lambda in &[0.0, 0.25, 0.5, 0.75, 1.0] {
            let op = LambdaBellman::build(&chain, 0.8, lambda).unwrap();
            let expected = (1.0 - lambda) / (1.0 - 0.8 * lambda);
            for s in 0..5 {
                assert_relative_eq!(op.transition().row(s).sum(), expected, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn bellman_fixed_point_invariant_across_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let mdp = random_mdp(&mut rng, 4, 2, 0.9);
            let chain = mdp.induce_chain(&random_policy(&mut rng, 4, 2)).unwrap();
            let v_pi = chain.value_function(0.9).unwrap();
            for &lambda in &[0.0, 0.25, 0.5, 0.75, 1.0] {
                let op = LambdaBellman::build(&chain, 0.9, lambda).unwrap();
                let image = op.apply(&v_pi).unwrap();
                assert!((image - &v_pi).amax() < 1e-8, "lambda {lambda}");
            }
        }
    }

    #[test]
    fn apply_bellman_lambda_zero_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mdp = random_mdp(&mut rng, 4, 2, 0.85);
        let chain = mdp.induce_chain(&random_policy(&mut rng, 4, 2)).unwrap();
        let op = LambdaBellman::build(&chain, 0.85, 0.0).unwrap();
        let v = DVector::from_fn(4, |i, _| (i as f64) - 1.5);
        let direct = chain.reward() + 0.85 * chain.transition() * &v;
        assert_relative_eq!(op.apply(&v).unwrap(), direct, epsilon = 1e-13);
    }

    #[test]
    fn measured_contraction_respects_modulus() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mdp = random_mdp(&mut rng, 5, 2, 0.9);
        let chain = mdp.induce_chain(&random_policy(&mut rng, 5, 2)).unwrap();
        let d_pi = chain.stationary_distribution(1e-10).unwrap();
        for &lambda in &[0.0, 0.5, 0.9] {
            let op = LambdaBellman::build(&chain, 0.9, lambda).unwrap();
            let modulus = op.contraction_factor();
            for _ in 0..100 {
                let v = DVector::from_fn(5, |_, _| rng.random::<f64>() * 4.0 - 2.0);
                let w = DVector::from_fn(5, |_, _| rng.random::<f64>() * 4.0 - 2.0);
                let lhs = weighted_norm(&(op.apply(&v).unwrap() - op.apply(&w).unwrap()), &d_pi);
                let rhs = weighted_norm(&(&v - &w), &d_pi);
                assert!(lhs <= (modulus + 1e-9) * rhs, "lambda {lambda}: {lhs} > {modulus} * {rhs}");
            }
        }
    }

    #[test]
    fn value_function_zero_reward() {
        let chain = InducedChain {
            transition: DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 0.6, 0.4]),
            reward: DVector::zeros(2),
        };
        let v = chain.value_function(0.95).unwrap();
        assert!(v.amax() < 1e-12);
    }

    #[test]
    fn value_function_absorbing_state_geometric_series() {
        let chain = InducedChain {
            transition: DMatrix::from_row_slice(1, 1, &[1.0]),
            reward: DVector::from_vec(vec![2.0]),
        };
        let v = chain.value_function(0.9).unwrap();
        assert_relative_eq!(v[0], 2.0 / (1.0 - 0.9), epsilon = 1e-10);
    }

    #[test]
    fn value_function_matches_fixed_point_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mdp = random_mdp(&mut rng, 5, 2, 0.9);
        let chain = mdp.induce_chain(&random_policy(&mut rng, 5, 2)).unwrap();
        let v = chain.value_function(0.9).unwrap();
        let mut iterate = DVector::zeros(5);
        for _ in 0..500 {
            iterate = chain.reward() + 0.9 * chain.transition() * &iterate;
        }
        assert!((iterate - &v).amax() < 1e-8);
    }

    #[test]
    fn importance_ratio_cases() {
        let pi = Policy::new(DMatrix::from_row_slice(1, 2, &[0.9, 0.1])).unwrap();
        let mu = Policy::new(DMatrix::from_row_slice(1, 2, &[0.3, 0.7])).unwrap();
        assert_relative_eq!(importance_ratio(&pi, &mu, 0, 0).unwrap(), 3.0);
        // On-policy reduction.
        assert_relative_eq!(importance_ratio(&pi, &pi, 0, 0).unwrap(), 1.0);
        assert_relative_eq!(importance_ratio(&pi, &pi, 0, 1).unwrap(), 1.0);
        // Zero target probability gives a zero ratio.
        let pi0 = Policy::new(DMatrix::from_row_slice(1, 2, &[0.0, 1.0])).unwrap();
        assert_relative_eq!(importance_ratio(&pi0, &mu, 0, 0).unwrap(), 0.0);
        // Zero behavior probability is a coverage violation.
        let mu0 = Policy::new(DMatrix::from_row_slice(1, 2, &[0.0, 1.0])).unwrap();
        assert!(matches!(
            importance_ratio(&pi, &mu0, 0, 0),
            Err(Error::CoverageViolation { state: 0, action: 0 })
        ));
    }

    #[test]
    fn projection_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let features = FeatureMap::new(DMatrix::from_fn(6, 3, |_, _| {
            rng.random::<f64>() * 2.0 - 1.0
        }))
        .unwrap();
        let d = DVector::from_fn(6, |_, _| rng.random::<f64>() + 0.1);
        let projection = features.projection(&d).unwrap();
        for _ in 0..20 {
            let v = DVector::from_fn(6, |_, _| rng.random::<f64>() * 10.0 - 5.0);
            let once = projection.apply(&v);
            let twice = projection.apply(&once);
            assert!((twice - &once).amax() < 1e-10);
        }
    }

    #[test]
    fn projection_rejects_nonpositive_weights() {
        let features = FeatureMap::identity(3);
        let d = DVector::from_vec(vec![0.5, 0.5, 0.0]);
        assert!(matches!(
            features.projection(&d),
            Err(Error::NonpositiveWeight { .. })
        ));
    }

    #[test]
    fn mspbe_tabular_exact_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mdp = random_mdp(&mut rng, 4, 2, 0.9);
        let chain = mdp.induce_chain(&random_policy(&mut rng, 4, 2)).unwrap();
        let d_pi = chain.stationary_distribution(1e-10).unwrap();
        let op = LambdaBellman::build(&chain, 0.9, 0.0).unwrap();
        let features = FeatureMap::identity(4);
        let v_pi = chain.value_function(0.9).unwrap();
        let value = mspbe(&op, &features, &d_pi, &v_pi).unwrap();
        assert!(value.abs() < 1e-12, "mspbe {value}");

        // Perturbations in the (full) column space strictly increase it.
        for _ in 0..10 {
            let delta = DVector::from_fn(4, |_, _| rng.random::<f64>() - 0.5);
            if delta.amax() < 1e-3 {
                continue;
            }
            let perturbed = mspbe(&op, &features, &d_pi, &(&v_pi + delta)).unwrap();
            assert!(perturbed > value + 1e-12);
        }
    }

    #[test]
    fn mspbe_rejects_rank_deficient_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mdp = random_mdp(&mut rng, 3, 2, 0.9);
        let chain = mdp.induce_chain(&random_policy(&mut rng, 3, 2)).unwrap();
        let op = LambdaBellman::build(&chain, 0.9, 0.0).unwrap();
        // Second column is a multiple of the first.
        let features =
            FeatureMap::new(DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]))
                .unwrap();
        let d = DVector::from_element(3, 1.0 / 3.0);
        assert!(matches!(
            mspbe(&op, &features, &d, &DVector::zeros(2)),
            Err(Error::RankDeficient { rank: 1, columns: 2 })
        ));
    }

    #[test]
    fn problem_file_round_trip_and_validation() {
        let text = r#"{
            "n_states": 2,
            "n_actions": 2,
            "transition": [
                [[0.5, 0.5], [1.0, 0.0]],
                [[0.0, 1.0], [0.2, 0.8]]
            ],
            "reward": [[1.0, 0.0], [0.0, -1.0]],
            "gamma": 0.9,
            "initial_dist": [0.5, 0.5],
            "policies": {
                "mu": [[0.5, 0.5], [0.5, 0.5]],
                "pi": [[1.0, 0.0], [0.0, 1.0]]
            },
            "features": [[1.0, 0.0], [0.0, 1.0]]
        }"#;
        let file = ProblemFile::from_json(text).unwrap();
        let (mdp, policies, features) = file.build().unwrap();
        assert_eq!(mdp.n_states(), 2);
        assert_eq!(policies.len(), 2);
        assert_eq!(features.dim(), 2);
        assert_relative_eq!(mdp.transition(0, 1, 0), 1.0);

        // First violation is reported with indices.
        let mut bad = file.clone();
        bad.transition[1][0][0] = 0.9;
        let err = bad.build().unwrap_err();
        assert!(
            matches!(err, Error::KernelRowSum { state: 1, action: 0, .. }),
            "unexpected error {err:?}"
        );
    }
}
