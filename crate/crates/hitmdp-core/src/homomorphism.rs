//! Finite HiT-MDP homomorphisms and their machine-checked guarantees.
//!
//! The augmented view of a finite HiT-MDP has states `e = (s, o_prev)` and
//! actions `alpha = (o, a)`: choosing `alpha` from `e` applies the
//! environment kernel `P(s'|s,a)` and carries the chosen option into the
//! next augmented state, `tau_alpha((s',o')|e) = P(s'|s,a) 1[o'=o]`, with
//! reward `R(e, alpha) = r(s, a)`.
//!
//! A homomorphism is a total map `f` on augmented states together with a
//! per-state family `g_e` of surjective maps on augmented actions such
//! that rewards are invariant and transition kernels are equivariant
//! (pushforward equality on every abstract augmented state). Validated
//! homomorphisms admit policy lifting, preserve optimal and fixed-policy
//! values, and bound the abstract ELBO by the lifted one with a gap equal
//! to the expected within-class conditional entropy.
//!
//! Index conventions match [`crate::solver::JointPolicy`]:
//! `e = s * K + o_prev` and `alpha = o * A + a`.

use crate::math;
use crate::mdp::{FiniteHitMdp, MdpError, TabularPolicies};
use crate::solver::{elbo_exact_joint, JointPolicy, SolverError};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub use crate::solver::TemperaturePair;

/// Iteration cap for the value-iteration style loops.
const MAX_VALUE_SWEEPS: usize = 100_000;
/// Stopping threshold for value iteration / policy evaluation.
pub const VALUE_ITERATION_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub enum HomomorphismError {
    Structure(String),
    /// `g_e` misses some abstract action (violates surjectivity).
    NotSurjective { e: usize, missing: usize },
    /// Two augmented states over the same base state map to different
    /// abstract base states (breaks the bundle projection square).
    BundleProjection { s: usize, o_prev_a: usize, o_prev_b: usize },
    NonConvergent { sweeps: usize },
    Solver(SolverError),
    Mdp(MdpError),
}

impl From<SolverError> for HomomorphismError {
    fn from(e: SolverError) -> Self {
        HomomorphismError::Solver(e)
    }
}

impl From<MdpError> for HomomorphismError {
    fn from(e: MdpError) -> Self {
        HomomorphismError::Mdp(e)
    }
}

impl core::fmt::Display for HomomorphismError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            HomomorphismError::Structure(s) => write!(f, "invalid homomorphism: {s}"),
            HomomorphismError::NotSurjective { e, missing } => {
                write!(f, "g_e at augmented state {e} misses abstract action {missing}")
            }
            HomomorphismError::BundleProjection { s, o_prev_a, o_prev_b } => write!(
                f,
                "augmented states ({s},{o_prev_a}) and ({s},{o_prev_b}) map to different abstract base states"
            ),
            HomomorphismError::NonConvergent { sweeps } => {
                write!(f, "value iteration did not converge in {sweeps} sweeps")
            }
            HomomorphismError::Solver(e) => write!(f, "{e}"),
            HomomorphismError::Mdp(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for HomomorphismError {}

/// A candidate homomorphism between two finite HiT-MDPs.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteHomomorphism {
    pub base: FiniteHitMdp,
    pub abstract_mdp: FiniteHitMdp,
    /// `f`: augmented base state -> abstract augmented state, length `S*K`.
    pub state_option_map: Vec<usize>,
    /// `g_e`: per augmented state, augmented action -> abstract augmented
    /// action; row-major `[S*K][K*A]`.
    pub action_map: Vec<usize>,
}

impl FiniteHomomorphism {
    /// Checks totality, surjectivity of every `g_e`, and the bundle
    /// projection square. The two numeric homomorphism conditions are the
    /// job of [`validate_homomorphism`].
    pub fn new(
        base: FiniteHitMdp,
        abstract_mdp: FiniteHitMdp,
        state_option_map: Vec<usize>,
        action_map: Vec<usize>,
    ) -> Result<Self, HomomorphismError> {
        let n_e = base.n_states * base.n_options;
        let n_alpha = base.n_options * base.n_actions;
        let n_e_abs = abstract_mdp.n_states * abstract_mdp.n_options;
        let n_alpha_abs = abstract_mdp.n_options * abstract_mdp.n_actions;
        if state_option_map.len() != n_e {
            return Err(HomomorphismError::Structure(format!(
                "state_option_map: expected {n_e} entries, got {}",
                state_option_map.len()
            )));
        }
        if action_map.len() != n_e * n_alpha {
            return Err(HomomorphismError::Structure(format!(
                "action_map: expected {} entries, got {}",
                n_e * n_alpha,
                action_map.len()
            )));
        }
        for (e, &img) in state_option_map.iter().enumerate() {
            if img >= n_e_abs {
                return Err(HomomorphismError::Structure(format!(
                    "f({e}) = {img} out of range"
                )));
            }
        }
        let mut hit = vec![false; n_alpha_abs];
        for e in 0..n_e {
            for h in hit.iter_mut() {
                *h = false;
            }
            for alpha in 0..n_alpha {
                let img = action_map[e * n_alpha + alpha];
                if img >= n_alpha_abs {
                    return Err(HomomorphismError::Structure(format!(
                        "g_{e}({alpha}) = {img} out of range"
                    )));
                }
                hit[img] = true;
            }
            if let Some(missing) = hit.iter().position(|&h| !h) {
                return Err(HomomorphismError::NotSurjective { e, missing });
            }
        }
        // Bundle square: same base state => same abstract base state.
        let k = base.n_options;
        let k_abs = abstract_mdp.n_options;
        for s in 0..base.n_states {
            let first = state_option_map[s * k] / k_abs;
            for op in 1..k {
                if state_option_map[s * k + op] / k_abs != first {
                    return Err(HomomorphismError::BundleProjection {
                        s,
                        o_prev_a: 0,
                        o_prev_b: op,
                    });
                }
            }
        }
        Ok(FiniteHomomorphism { base, abstract_mdp, state_option_map, action_map })
    }

    #[inline]
    pub fn f(&self, e: usize) -> usize {
        self.state_option_map[e]
    }

    #[inline]
    pub fn g(&self, e: usize, alpha: usize) -> usize {
        self.action_map[e * self.base.n_options * self.base.n_actions + alpha]
    }

    pub fn n_aug_states(&self) -> usize {
        self.base.n_states * self.base.n_options
    }

    pub fn n_aug_actions(&self) -> usize {
        self.base.n_options * self.base.n_actions
    }
}

/// Which homomorphism condition a counterexample violates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    Reward,
    Transition,
}

/// One violating tuple with both sides of the failed equality.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub condition: Condition,
    /// `[s, o_prev, a, o]` for reward, `[s, o_prev, a, o, abstract_e_next]`
    /// for transition.
    pub tuple: Vec<usize>,
    pub lhs: f64,
    pub rhs: f64,
}

/// Outcome of [`validate_homomorphism`].
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub passed: bool,
    /// At most the first ten violating tuples.
    pub violations: Vec<Violation>,
}

const MAX_REPORTED_VIOLATIONS: usize = 10;

/// Checks reward invariance `Rbar(f(e), g_e(alpha)) = R(e, alpha)` and, for
/// every abstract augmented state, transition equivariance
/// `taubar_{g_e(alpha)}({ebar'}|f(e)) = sum_{e' in f^-1(ebar')}
/// tau_alpha({e'}|e)`.
pub fn validate_homomorphism(h: &FiniteHomomorphism, tol: f64) -> ValidationReport {
    let base = &h.base;
    let abs = &h.abstract_mdp;
    let (k, a_n) = (base.n_options, base.n_actions);
    let (k_abs, a_abs) = (abs.n_options, abs.n_actions);
    let n_e_abs = abs.n_states * k_abs;
    let mut violations = Vec::new();

    'outer: for s in 0..base.n_states {
        for op in 0..k {
            let e = s * k + op;
            let e_abs = h.f(e);
            let s_abs = e_abs / k_abs;
            for o in 0..k {
                for a in 0..a_n {
                    let alpha = o * a_n + a;
                    let alpha_abs = h.g(e, alpha);
                    let (o_abs, a_abs_idx) = (alpha_abs / a_abs, alpha_abs % a_abs);
                    // Reward invariance.
                    let lhs = abs.r(s_abs, a_abs_idx);
                    let rhs = base.r(s, a);
                    if math::abs(lhs - rhs) > tol {
                        violations.push(Violation {
                            condition: Condition::Reward,
                            tuple: vec![s, op, a, o],
                            lhs,
                            rhs,
                        });
                        if violations.len() >= MAX_REPORTED_VIOLATIONS {
                            break 'outer;
                        }
                        continue;
                    }
                    // Transition equivariance against every abstract
                    // augmented state (singleton Borel sets).
                    for e_abs_next in 0..n_e_abs {
                        let (s_abs_next, o_abs_next) = (e_abs_next / k_abs, e_abs_next % k_abs);
                        let lhs = if o_abs_next == o_abs {
                            abs.p(s_abs, a_abs_idx, s_abs_next)
                        } else {
                            0.0
                        };
                        // Concrete mass reaching the preimage: next option
                        // is o with probability one, so only preimage
                        // members with option coordinate o contribute.
                        let mut rhs = 0.0;
                        for s_next in 0..base.n_states {
                            if h.f(s_next * k + o) == e_abs_next {
                                rhs += base.p(s, a, s_next);
                            }
                        }
                        if math::abs(lhs - rhs) > tol {
                            violations.push(Violation {
                                condition: Condition::Transition,
                                tuple: vec![s, op, a, o, e_abs_next],
                                lhs,
                                rhs,
                            });
                            if violations.len() >= MAX_REPORTED_VIOLATIONS {
                                break 'outer;
                            }
                        }
                    }
                }
            }
        }
    }
    ValidationReport { passed: violations.is_empty(), violations }
}

/// How to distribute an abstract action's mass over its preimage.
#[derive(Clone, Debug, PartialEq)]
pub enum Split {
    /// Equal mass to every member of the class.
    UniformOverPreimage,
    /// Explicit conditional weights per `(e, alpha)`; within each class at
    /// each `e` the weights must sum to one. Row-major `[S*K][K*A]`.
    Given(Vec<f64>),
}

/// A base-space policy whose pushforward under `g_e` reproduces a given
/// abstract policy exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftedPolicy {
    pub policy: JointPolicy,
    /// Conditional weight of each concrete action within its class,
    /// row-major `[S*K][K*A]`.
    pub within_class_split: Vec<f64>,
}

/// Lifts an abstract policy through a homomorphism.
pub fn lift_policy(
    h: &FiniteHomomorphism,
    abstract_policy: &TabularPolicies,
    split: &Split,
) -> Result<LiftedPolicy, HomomorphismError> {
    let abs = &h.abstract_mdp;
    if abstract_policy.n_states != abs.n_states
        || abstract_policy.n_options != abs.n_options
        || abstract_policy.n_actions != abs.n_actions
    {
        return Err(HomomorphismError::Structure(String::from(
            "abstract policy does not match abstract mdp dimensions",
        )));
    }
    let abstract_joint = JointPolicy::from_tabular(abstract_policy);
    lift_joint_policy(h, &abstract_joint, split)
}

/// Lifts an abstract joint policy through a homomorphism.
pub fn lift_joint_policy(
    h: &FiniteHomomorphism,
    abstract_joint: &JointPolicy,
    split: &Split,
) -> Result<LiftedPolicy, HomomorphismError> {
    let n_e = h.n_aug_states();
    let n_alpha = h.n_aug_actions();
    let n_alpha_abs = h.abstract_mdp.n_options * h.abstract_mdp.n_actions;
    if let Split::Given(weights) = split {
        if weights.len() != n_e * n_alpha {
            return Err(HomomorphismError::Structure(format!(
                "split: expected {} entries, got {}",
                n_e * n_alpha,
                weights.len()
            )));
        }
    }
    let mut table = vec![0.0; n_e * n_alpha];
    let mut within = vec![0.0; n_e * n_alpha];
    let mut class_size = vec![0usize; n_alpha_abs];
    let mut class_weight = vec![0.0f64; n_alpha_abs];
    for e in 0..n_e {
        let abstract_row = abstract_joint.row(h.f(e));
        for c in class_size.iter_mut() {
            *c = 0;
        }
        for w in class_weight.iter_mut() {
            *w = 0.0;
        }
        for alpha in 0..n_alpha {
            let img = h.g(e, alpha);
            class_size[img] += 1;
            if let Split::Given(weights) = split {
                class_weight[img] += weights[e * n_alpha + alpha];
            }
        }
        if let Some(missing) = class_size.iter().position(|&c| c == 0) {
            return Err(HomomorphismError::NotSurjective { e, missing });
        }
        if let Split::Given(_) = split {
            for (img, &w) in class_weight.iter().enumerate() {
                if math::abs(w - 1.0) > 1e-9 {
                    return Err(HomomorphismError::Structure(format!(
                        "split weights for class {img} at augmented state {e} sum to {w}"
                    )));
                }
            }
        }
        for alpha in 0..n_alpha {
            let img = h.g(e, alpha);
            let w = match split {
                Split::UniformOverPreimage => 1.0 / class_size[img] as f64,
                Split::Given(weights) => weights[e * n_alpha + alpha],
            };
            within[e * n_alpha + alpha] = w;
            table[e * n_alpha + alpha] = abstract_row[img] * w;
        }
    }
    Ok(LiftedPolicy {
        policy: JointPolicy {
            n_states: h.base.n_states,
            n_options: h.base.n_options,
            n_actions: h.base.n_actions,
            table,
        },
        within_class_split: within,
    })
}

/// Hard (non-entropic) optimal value iteration on the augmented MDP.
/// Returns `Q[e][alpha]`.
pub fn augmented_optimal_q(mdp: &FiniteHitMdp) -> Result<Vec<f64>, HomomorphismError> {
    let (s_n, k, a_n) = (mdp.n_states, mdp.n_options, mdp.n_actions);
    let n_e = s_n * k;
    let n_alpha = k * a_n;
    let mut q = vec![0.0; n_e * n_alpha];
    let mut v = vec![0.0; n_e];
    for sweep in 0..MAX_VALUE_SWEEPS {
        for e in 0..n_e {
            let mut best = f64::NEG_INFINITY;
            for alpha in 0..n_alpha {
                best = best.max(q[e * n_alpha + alpha]);
            }
            v[e] = best;
        }
        let mut change = 0.0f64;
        for s in 0..s_n {
            for op in 0..k {
                let e = s * k + op;
                for o in 0..k {
                    for a in 0..a_n {
                        let mut next = 0.0;
                        for s2 in 0..s_n {
                            let pt = mdp.p(s, a, s2);
                            if pt > 0.0 {
                                next += pt * v[s2 * k + o];
                            }
                        }
                        let new = mdp.r(s, a) + mdp.discount * next;
                        let idx = e * n_alpha + o * a_n + a;
                        change = change.max(math::abs(new - q[idx]));
                        q[idx] = new;
                    }
                }
            }
        }
        if change < VALUE_ITERATION_TOL {
            return Ok(q);
        }
        let _ = sweep;
    }
    Err(HomomorphismError::NonConvergent { sweeps: MAX_VALUE_SWEEPS })
}

/// Hard (non-entropic) evaluation of a joint policy on the augmented MDP.
pub fn augmented_policy_q(
    mdp: &FiniteHitMdp,
    policy: &JointPolicy,
) -> Result<Vec<f64>, HomomorphismError> {
    let (s_n, k, a_n) = (mdp.n_states, mdp.n_options, mdp.n_actions);
    let n_e = s_n * k;
    let n_alpha = k * a_n;
    let mut q = vec![0.0; n_e * n_alpha];
    let mut v = vec![0.0; n_e];
    for _ in 0..MAX_VALUE_SWEEPS {
        for e in 0..n_e {
            let row = policy.row(e);
            let mut val = 0.0;
            for alpha in 0..n_alpha {
                if row[alpha] > 0.0 {
                    val += row[alpha] * q[e * n_alpha + alpha];
                }
            }
            v[e] = val;
        }
        let mut change = 0.0f64;
        for s in 0..s_n {
            for op in 0..k {
                let e = s * k + op;
                for o in 0..k {
                    for a in 0..a_n {
                        let mut next = 0.0;
                        for s2 in 0..s_n {
                            let pt = mdp.p(s, a, s2);
                            if pt > 0.0 {
                                next += pt * v[s2 * k + o];
                            }
                        }
                        let new = mdp.r(s, a) + mdp.discount * next;
                        let idx = e * n_alpha + o * a_n + a;
                        change = change.max(math::abs(new - q[idx]));
                        q[idx] = new;
                    }
                }
            }
        }
        if change < VALUE_ITERATION_TOL {
            return Ok(q);
        }
    }
    Err(HomomorphismError::NonConvergent { sweeps: MAX_VALUE_SWEEPS })
}

/// Which value functions to compare across the homomorphism.
#[derive(Clone, Debug)]
pub enum GapMode {
    /// Optimal action values from independent hard value iteration.
    Optimal,
    /// Fixed-policy values: the abstract policy on the abstract MDP versus
    /// its uniform lift on the base MDP.
    FixedPolicy(TabularPolicies),
}

/// Sup-norm gap `max_{e,alpha} |Q(e,alpha) - Qbar(f(e), g_e(alpha))|`.
pub fn value_equivalence_gap(
    h: &FiniteHomomorphism,
    mode: &GapMode,
) -> Result<f64, HomomorphismError> {
    let (q_base, q_abs) = match mode {
        GapMode::Optimal => (augmented_optimal_q(&h.base)?, augmented_optimal_q(&h.abstract_mdp)?),
        GapMode::FixedPolicy(abstract_policy) => {
            let lifted = lift_policy(h, abstract_policy, &Split::UniformOverPreimage)?;
            let abstract_joint = JointPolicy::from_tabular(abstract_policy);
            (
                augmented_policy_q(&h.base, &lifted.policy)?,
                augmented_policy_q(&h.abstract_mdp, &abstract_joint)?,
            )
        }
    };
    let n_alpha = h.n_aug_actions();
    let n_alpha_abs = h.abstract_mdp.n_options * h.abstract_mdp.n_actions;
    let mut gap = 0.0f64;
    for e in 0..h.n_aug_states() {
        for alpha in 0..n_alpha {
            let lhs = q_base[e * n_alpha + alpha];
            let rhs = q_abs[h.f(e) * n_alpha_abs + h.g(e, alpha)];
            gap = gap.max(math::abs(lhs - rhs));
        }
    }
    Ok(gap)
}

/// Result of [`elbo_gap`].
#[derive(Clone, Debug, PartialEq)]
pub struct ElboGap {
    pub base_elbo: f64,
    pub abstract_elbo: f64,
    /// `L(lifted) - Lbar(abstract)`.
    pub gap: f64,
    /// Exact expectation of the summed within-class conditional entropies
    /// along the lifted trajectory distribution; equals `gap` for a valid
    /// homomorphism (in `Zero` regularizer mode).
    pub conditional_entropy_term: f64,
}

/// Finite-horizon ELBO gap between a lifted policy and its abstract
/// source, with the conditional-entropy decomposition term.
pub fn elbo_gap(
    h: &FiniteHomomorphism,
    abstract_policy: &TabularPolicies,
    lifted: &LiftedPolicy,
    horizon: usize,
) -> Result<ElboGap, HomomorphismError> {
    let abstract_joint = JointPolicy::from_tabular(abstract_policy);
    // Per augmented state: conditional entropy of the concrete choice
    // within its abstract class.
    let n_e = h.n_aug_states();
    let n_alpha = h.n_aug_actions();
    let n_alpha_abs = h.abstract_mdp.n_options * h.abstract_mdp.n_actions;
    let mut cond_entropy = vec![0.0; n_e];
    for e in 0..n_e {
        let lifted_row = lifted.policy.row(e);
        let abstract_row = abstract_joint.row(h.f(e));
        let mut ce = 0.0;
        for alpha in 0..n_alpha {
            let p = lifted_row[alpha];
            if p > 0.0 {
                let class_mass = abstract_row[h.g(e, alpha)];
                ce += p * (math::ln(class_mass) - math::ln(p));
            }
        }
        cond_entropy[e] = ce;
    }
    let mut check_abs = vec![0.0; n_alpha_abs];
    for e in 0..n_e {
        // Lifted policy must push forward to the abstract one.
        let lifted_row = lifted.policy.row(e);
        for c in check_abs.iter_mut() {
            *c = 0.0;
        }
        for alpha in 0..n_alpha {
            check_abs[h.g(e, alpha)] += lifted_row[alpha];
        }
        let abstract_row = abstract_joint.row(h.f(e));
        for (idx, &mass) in check_abs.iter().enumerate() {
            if math::abs(mass - abstract_row[idx]) > 1e-9 {
                return Err(HomomorphismError::Structure(format!(
                    "lifted policy pushforward mismatch at augmented state {e}, abstract action {idx}"
                )));
            }
        }
    }
    let (base_elbo, conditional_entropy_term) =
        elbo_exact_joint(&h.base, &lifted.policy, horizon, Some(&cond_entropy))?;
    let (abstract_elbo, _) = elbo_exact_joint(&h.abstract_mdp, &abstract_joint, horizon, None)?;
    Ok(ElboGap {
        base_elbo,
        abstract_elbo,
        gap: base_elbo - abstract_elbo,
        conditional_entropy_term,
    })
}

/// Composes two homomorphisms `h1: M -> Mbar` and `h2: Mbar -> Mbarbar`.
pub fn compose(
    h1: &FiniteHomomorphism,
    h2: &FiniteHomomorphism,
) -> Result<FiniteHomomorphism, HomomorphismError> {
    if h1.abstract_mdp != h2.base {
        return Err(HomomorphismError::Structure(String::from(
            "middle MDPs of the composition differ",
        )));
    }
    let n_e = h1.n_aug_states();
    let n_alpha = h1.n_aug_actions();
    let mut state_option_map = Vec::with_capacity(n_e);
    let mut action_map = Vec::with_capacity(n_e * n_alpha);
    for e in 0..n_e {
        let mid = h1.f(e);
        state_option_map.push(h2.f(mid));
        for alpha in 0..n_alpha {
            action_map.push(h2.g(mid, h1.g(e, alpha)));
        }
    }
    FiniteHomomorphism::new(h1.base.clone(), h2.abstract_mdp.clone(), state_option_map, action_map)
}

/// The identity homomorphism on an MDP.
pub fn identity(mdp: &FiniteHitMdp) -> FiniteHomomorphism {
    let n_e = mdp.n_states * mdp.n_options;
    let n_alpha = mdp.n_options * mdp.n_actions;
    let state_option_map = (0..n_e).collect();
    let mut action_map = Vec::with_capacity(n_e * n_alpha);
    for _ in 0..n_e {
        action_map.extend(0..n_alpha);
    }
    FiniteHomomorphism::new(mdp.clone(), mdp.clone(), state_option_map, action_map)
        .expect("identity is always structurally valid")
}

/// A block-inconsistency found while building a quotient.
#[derive(Clone, Debug, PartialEq)]
pub struct QuotientViolation {
    pub what: String,
    pub lhs: f64,
    pub rhs: f64,
}

/// Builds the quotient HiT-MDP induced by a state partition, an option
/// relabeling and a per-augmented-state action map. Nothing is averaged:
/// every member of a block must induce exactly the same abstract reward
/// and pushforward transition row, and any mismatch (beyond `tol`) is
/// reported as an error.
///
/// `action_map_fn(s, o_prev, o, a) -> (o_abs, a_abs)`.
pub fn build_quotient<F>(
    base: &FiniteHitMdp,
    state_map: &[usize],
    option_map: &[usize],
    action_map_fn: F,
    tol: f64,
) -> Result<FiniteHomomorphism, (Option<FiniteHomomorphism>, Vec<QuotientViolation>)>
where
    F: Fn(usize, usize, usize, usize) -> (usize, usize),
{
    let (s_n, k, a_n) = (base.n_states, base.n_options, base.n_actions);
    assert_eq!(state_map.len(), s_n);
    assert_eq!(option_map.len(), k);
    let s_abs = state_map.iter().max().map_or(0, |m| m + 1);
    let k_abs = option_map.iter().max().map_or(0, |m| m + 1);
    let a_abs = (0..s_n)
        .flat_map(|s| (0..k).flat_map(move |op| (0..k).flat_map(move |o| (0..a_n).map(move |a| (s, op, o, a)))))
        .map(|(s, op, o, a)| action_map_fn(s, op, o, a).1)
        .max()
        .map_or(0, |m| m + 1);

    let mut violations = Vec::new();
    let mut reward = vec![f64::NAN; s_abs * a_abs];
    let mut transition = vec![f64::NAN; s_abs * a_abs * s_abs];
    let mut row_buf = vec![0.0; s_abs];

    for s in 0..s_n {
        for op in 0..k {
            for o in 0..k {
                for a in 0..a_n {
                    let (o_img, a_img) = action_map_fn(s, op, o, a);
                    if option_map[o] != o_img {
                        violations.push(QuotientViolation {
                            what: format!(
                                "action map sends option {o} at ({s},{op}) to {o_img}, but option_map says {}",
                                option_map[o]
                            ),
                            lhs: o_img as f64,
                            rhs: option_map[o] as f64,
                        });
                        continue;
                    }
                    let s_img = state_map[s];
                    // Reward block-consistency.
                    let slot = s_img * a_abs + a_img;
                    let r = base.r(s, a);
                    if reward[slot].is_nan() {
                        reward[slot] = r;
                    } else if math::abs(reward[slot] - r) > tol {
                        violations.push(QuotientViolation {
                            what: format!("reward block ({s_img},{a_img}) disagrees at (s={s},a={a})"),
                            lhs: reward[slot],
                            rhs: r,
                        });
                    }
                    // Transition pushforward block-consistency.
                    for v in row_buf.iter_mut() {
                        *v = 0.0;
                    }
                    for s2 in 0..s_n {
                        row_buf[state_map[s2]] += base.p(s, a, s2);
                    }
                    let t_base = (s_img * a_abs + a_img) * s_abs;
                    for s2_img in 0..s_abs {
                        let slot = t_base + s2_img;
                        if transition[slot].is_nan() {
                            transition[slot] = row_buf[s2_img];
                        } else if math::abs(transition[slot] - row_buf[s2_img]) > tol {
                            violations.push(QuotientViolation {
                                what: format!(
                                    "transition block ({s_img},{a_img})->{s2_img} disagrees at (s={s},a={a})"
                                ),
                                lhs: transition[slot],
                                rhs: row_buf[s2_img],
                            });
                        }
                    }
                }
            }
        }
    }
    if !violations.is_empty() {
        return Err((None, violations));
    }
    for v in reward.iter_mut() {
        if v.is_nan() {
            *v = 0.0;
        }
    }
    for (i, v) in transition.iter_mut().enumerate() {
        if v.is_nan() {
            // Unreached (s_abs, a_abs) block: make it a valid self-loop row.
            *v = if i % s_abs == (i / s_abs) / a_abs { 1.0 } else { 0.0 };
        }
    }
    // Pushforward of the initial distribution.
    let mut initial = vec![0.0; s_abs * k_abs];
    for s in 0..s_n {
        for op in 0..k {
            initial[state_map[s] * k_abs + option_map[op]] += base.initial_p(s, op);
        }
    }
    let abstract_mdp = match FiniteHitMdp::new(
        s_abs,
        k_abs,
        a_abs,
        transition,
        reward,
        base.regularizer_mode,
        base.discount,
        initial,
    ) {
        Ok(m) => m,
        Err(e) => {
            return Err((
                None,
                vec![QuotientViolation { what: format!("abstract mdp invalid: {e}"), lhs: 0.0, rhs: 0.0 }],
            ))
        }
    };
    let n_alpha = k * a_n;
    let mut state_option_map = Vec::with_capacity(s_n * k);
    let mut action_map = Vec::with_capacity(s_n * k * n_alpha);
    for s in 0..s_n {
        for op in 0..k {
            state_option_map.push(state_map[s] * k_abs + option_map[op]);
            for o in 0..k {
                for a in 0..a_n {
                    let (o_img, a_img) = action_map_fn(s, op, o, a);
                    action_map.push(o_img * a_abs + a_img);
                }
            }
        }
    }
    match FiniteHomomorphism::new(base.clone(), abstract_mdp, state_option_map, action_map) {
        Ok(h) => Ok(h),
        Err(e) => Err((
            None,
            vec![QuotientViolation { what: format!("structure invalid: {e}"), lhs: 0.0, rhs: 0.0 }],
        )),
    }
}

/// Built-in demonstration instance: an 8-state mirror-symmetric chain with
/// two options, quotiented to 4 states by identifying `s` with `7 - s`
/// (which swaps the two move actions).
pub mod fixtures {
    use super::*;
    use crate::mdp::RegularizerMode;

    /// The 8-state mirror chain.
    pub fn mirror_chain_base() -> FiniteHitMdp {
        let (s_n, k, a_n) = (8usize, 2usize, 2usize);
        let mut transition = vec![0.0; s_n * a_n * s_n];
        let mut set = |s: usize, a: usize, s2: usize, p: f64| {
            transition[(s * a_n + a) * s_n + s2] += p;
        };
        for s in 0..s_n {
            // Action 0 moves left, action 1 moves right, with a 0.1 chance
            // of staying put; the ends are sticky.
            let left = s.saturating_sub(1);
            let right = (s + 1).min(s_n - 1);
            set(s, 0, left, 0.9);
            set(s, 0, s, 0.1);
            set(s, 1, right, 0.9);
            set(s, 1, s, 0.1);
        }
        // Mirror-symmetric rewards: r(s, a) = class_reward[class][a'],
        // where a' is the action as seen from the left half.
        let class_reward = [[0.0, 0.1], [0.2, -0.3], [1.0, 0.5], [-0.2, 0.7]];
        let mut reward = vec![0.0; s_n * a_n];
        for s in 0..s_n {
            let class = s.min(s_n - 1 - s);
            for a in 0..a_n {
                let canonical = if s < s_n / 2 { a } else { 1 - a };
                reward[s * a_n + a] = class_reward[class][canonical];
            }
        }
        let initial = vec![1.0 / (s_n * k) as f64; s_n * k];
        FiniteHitMdp::new(s_n, k, a_n, transition, reward, RegularizerMode::Zero, 0.9, initial)
            .expect("mirror chain tables are valid")
    }

    /// The 8-to-4 mirror quotient homomorphism.
    pub fn mirror_8_to_4() -> FiniteHomomorphism {
        let base = mirror_chain_base();
        let state_map: Vec<usize> = (0..8).map(|s: usize| s.min(7 - s)).collect();
        let option_map = vec![0, 1];
        build_quotient(
            &base,
            &state_map,
            &option_map,
            |s, _op, o, a| if s < 4 { (o, a) } else { (o, 1 - a) },
            1e-12,
        )
        .expect("mirror quotient is exactly block-consistent")
    }

    /// Seeded non-trivial homomorphism: draws a random abstract HiT-MDP
    /// and lifts it to a base with every state and action duplicated,
    /// splitting each abstract transition's mass over the two copies of
    /// the destination with a random per-(state, action) ratio. Action
    /// classes of size two give the lifted policies genuinely positive
    /// conditional entropy.
    pub fn random_duplication(
        seed: u64,
        s_abs: usize,
        k: usize,
        a_abs: usize,
        discount: f64,
    ) -> FiniteHomomorphism {
        let mut stream = crate::rng::Stream::named(seed, "hom-dup");
        // Random abstract MDP.
        let mut transition = vec![0.0; s_abs * a_abs * s_abs];
        for row in transition.chunks_mut(s_abs) {
            let mut sum = 0.0;
            for p in row.iter_mut() {
                *p = stream.uniform() + 0.1;
                sum += *p;
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
        }
        let reward: Vec<f64> = (0..s_abs * a_abs).map(|_| stream.uniform_in(-1.0, 1.0)).collect();
        let mut initial = vec![0.0; s_abs * k];
        let mut sum = 0.0;
        for p in initial.iter_mut() {
            *p = stream.uniform() + 0.1;
            sum += *p;
        }
        for p in initial.iter_mut() {
            *p /= sum;
        }
        let abstract_mdp = FiniteHitMdp::new(
            s_abs,
            k,
            a_abs,
            transition,
            reward,
            RegularizerMode::Zero,
            discount,
            initial,
        )
        .expect("random abstract tables are valid");

        // Base: states and actions both duplicated twice. Concrete state
        // 2s+i projects to s; concrete action 2a+j projects to a. Each
        // concrete (state, action) splits the abstract destination mass
        // over the two destination copies with its own random ratio.
        let s_base = 2 * s_abs;
        let a_base = 2 * a_abs;
        let mut base_transition = vec![0.0; s_base * a_base * s_base];
        let mut base_reward = vec![0.0; s_base * a_base];
        for s in 0..s_base {
            for a in 0..a_base {
                let sa = s / 2;
                let aa = a / 2;
                base_reward[s * a_base + a] = abstract_mdp.r(sa, aa);
                for s2_abs in 0..s_abs {
                    let mass = abstract_mdp.p(sa, aa, s2_abs);
                    let ratio = stream.uniform();
                    base_transition[(s * a_base + a) * s_base + 2 * s2_abs] = mass * ratio;
                    base_transition[(s * a_base + a) * s_base + 2 * s2_abs + 1] =
                        mass * (1.0 - ratio);
                }
            }
        }
        // Initial mass splits over state copies, previous option kept.
        let mut base_initial = vec![0.0; s_base * k];
        for s in 0..s_abs {
            for op in 0..k {
                let mass = abstract_mdp.initial_p(s, op);
                let ratio = stream.uniform();
                base_initial[(2 * s) * k + op] = mass * ratio;
                base_initial[(2 * s + 1) * k + op] = mass * (1.0 - ratio);
            }
        }
        let base = FiniteHitMdp::new(
            s_base,
            k,
            a_base,
            base_transition,
            base_reward,
            RegularizerMode::Zero,
            discount,
            base_initial,
        )
        .expect("duplicated base tables are valid");

        let n_alpha = k * a_base;
        let mut state_option_map = Vec::with_capacity(s_base * k);
        let mut action_map = Vec::with_capacity(s_base * k * n_alpha);
        for s in 0..s_base {
            for op in 0..k {
                state_option_map.push((s / 2) * k + op);
                for o in 0..k {
                    for a in 0..a_base {
                        action_map.push(o * a_abs + a / 2);
                    }
                }
            }
        }
        FiniteHomomorphism::new(base, abstract_mdp, state_option_map, action_map)
            .expect("duplication map is structurally valid")
    }
}
