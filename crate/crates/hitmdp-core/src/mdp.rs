//! Finite HiT-MDPs and their trajectory densities.
//!
//! A finite HiT-MDP carries the environment tables (transition kernel,
//! reward, initial joint distribution over state and held option) plus a
//! discount and a regularizer mode. Policies come in two flavours: the
//! Markovian option/action pair `pi^O(o|s,o_prev)`, `pi^A(a|s,o)` and the
//! classical semi-Markov tables (termination `P_o(b=1|s)` and a master
//! policy `P(o|s)`), which exist so the two trajectory factorizations can
//! be compared on the same process.
//!
//! Conventions used throughout the crate:
//! - a step records `(s, o_prev, a, o, r)`; the option `o` is drawn first
//!   from `pi^O(.|s, o_prev)`, then the action from `pi^A(.|s, o)`;
//! - `initial[s][o]` is the joint law of the first state and the option
//!   held *entering* the first step, so a horizon-T trajectory carries T
//!   option factors and T action factors;
//! - log-densities are natural logs; impossible events return the finite
//!   sentinel [`NEG_LOG_SENTINEL`] instead of `-inf` so downstream
//!   arithmetic stays total.

use crate::math;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Finite stand-in for log(0).
pub const NEG_LOG_SENTINEL: f64 = -1e30;

/// Tolerance for "rows sum to one" checks on stored tables.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// How the option-preference term `f` of the optimality likelihood is
/// evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegularizerMode {
    /// `f = 0` everywhere (the uniform-prior simplification).
    Zero,
    /// Clamped pointwise mutual information against an empirical option
    /// marginal; see [`mutual_info_regularizer`].
    MutualInfo,
}

/// Errors for table construction and density evaluation.
#[derive(Clone, Debug, PartialEq)]
pub enum MdpError {
    /// A table had the wrong length or an index was out of range.
    DimensionMismatch(String),
    /// A stored distribution row does not sum to one or has negative mass.
    InvalidDistribution(String),
    /// Discount outside [0, 1).
    InvalidDiscount,
    /// SMDP evaluation was requested without termination/master tables.
    MissingSmdpTables,
    /// A per-step regularizer value was positive.
    PositiveRegularizer { step: usize, value: f64 },
}

impl core::fmt::Display for MdpError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MdpError::DimensionMismatch(what) => write!(f, "dimension mismatch: {what}"),
            MdpError::InvalidDistribution(what) => write!(f, "invalid distribution: {what}"),
            MdpError::InvalidDiscount => write!(f, "discount must lie in [0, 1)"),
            MdpError::MissingSmdpTables => {
                write!(f, "SMDP density needs termination and master tables")
            }
            MdpError::PositiveRegularizer { step, value } => {
                write!(f, "regularizer must be non-positive, got {value} at step {step}")
            }
        }
    }
}

impl core::error::Error for MdpError {}

fn check_rows(table: &[f64], row_len: usize, name: &str) -> Result<(), MdpError> {
    if row_len == 0 || table.len() % row_len != 0 {
        return Err(MdpError::DimensionMismatch(format!(
            "{name}: length {} not divisible by row length {row_len}",
            table.len()
        )));
    }
    for (r, row) in table.chunks(row_len).enumerate() {
        let mut sum = 0.0;
        for &p in row {
            if p < 0.0 {
                return Err(MdpError::InvalidDistribution(format!(
                    "{name}: negative entry {p} in row {r}"
                )));
            }
            sum += p;
        }
        if math::abs(sum - 1.0) > ROW_SUM_TOL {
            return Err(MdpError::InvalidDistribution(format!(
                "{name}: row {r} sums to {sum}"
            )));
        }
    }
    Ok(())
}

/// Tabular HiT-MDP over `S` states, `K` options and `A` actions.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteHitMdp {
    pub n_states: usize,
    pub n_options: usize,
    pub n_actions: usize,
    /// `P(s'|s,a)`, row-major `[S][A][S']`.
    pub transition: Vec<f64>,
    /// `r(s,a)`, row-major `[S][A]`.
    pub reward: Vec<f64>,
    pub regularizer_mode: RegularizerMode,
    pub discount: f64,
    /// Joint law of the initial state and the initially held option,
    /// row-major `[S][K]`.
    pub initial: Vec<f64>,
}

impl FiniteHitMdp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n_options: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        regularizer_mode: RegularizerMode,
        discount: f64,
        initial: Vec<f64>,
    ) -> Result<Self, MdpError> {
        if n_states == 0 || n_options == 0 || n_actions == 0 {
            return Err(MdpError::DimensionMismatch("empty space".into()));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(MdpError::DimensionMismatch(format!(
                "transition: expected {} entries, got {}",
                n_states * n_actions * n_states,
                transition.len()
            )));
        }
        if reward.len() != n_states * n_actions {
            return Err(MdpError::DimensionMismatch(format!(
                "reward: expected {} entries, got {}",
                n_states * n_actions,
                reward.len()
            )));
        }
        if initial.len() != n_states * n_options {
            return Err(MdpError::DimensionMismatch(format!(
                "initial: expected {} entries, got {}",
                n_states * n_options,
                initial.len()
            )));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(MdpError::InvalidDiscount);
        }
        check_rows(&transition, n_states, "transition")?;
        check_rows(&initial, n_states * n_options, "initial")?;
        Ok(FiniteHitMdp {
            n_states,
            n_options,
            n_actions,
            transition,
            reward,
            regularizer_mode,
            discount,
            initial,
        })
    }

    #[inline]
    pub fn p(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s_next]
    }

    #[inline]
    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    #[inline]
    pub fn initial_p(&self, s: usize, o_prev: usize) -> f64 {
        self.initial[s * self.n_options + o_prev]
    }
}

/// Option/action policy tables, optionally with the classical SMDP pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicies {
    pub n_states: usize,
    pub n_options: usize,
    pub n_actions: usize,
    /// `pi^O(o|s,o_prev)`, row-major `[S][K_prev][K]`.
    pub option_policy: Vec<f64>,
    /// `pi^A(a|s,o)`, row-major `[S][K][A]`.
    pub action_policy: Vec<f64>,
    /// `P_o(b=1|s)`, row-major `[K][S]`.
    pub smdp_termination: Option<Vec<f64>>,
    /// Master policy `P(o|s)`, row-major `[S][K]`.
    pub smdp_master: Option<Vec<f64>>,
}

impl TabularPolicies {
    pub fn new(
        n_states: usize,
        n_options: usize,
        n_actions: usize,
        option_policy: Vec<f64>,
        action_policy: Vec<f64>,
    ) -> Result<Self, MdpError> {
        if option_policy.len() != n_states * n_options * n_options {
            return Err(MdpError::DimensionMismatch(format!(
                "option_policy: expected {} entries, got {}",
                n_states * n_options * n_options,
                option_policy.len()
            )));
        }
        if action_policy.len() != n_states * n_options * n_actions {
            return Err(MdpError::DimensionMismatch(format!(
                "action_policy: expected {} entries, got {}",
                n_states * n_options * n_actions,
                action_policy.len()
            )));
        }
        check_rows(&option_policy, n_options, "option_policy")?;
        check_rows(&action_policy, n_actions, "action_policy")?;
        Ok(TabularPolicies {
            n_states,
            n_options,
            n_actions,
            option_policy,
            action_policy,
            smdp_termination: None,
            smdp_master: None,
        })
    }

    /// Uniform policies over both levels.
    pub fn uniform(n_states: usize, n_options: usize, n_actions: usize) -> Self {
        TabularPolicies {
            n_states,
            n_options,
            n_actions,
            option_policy: vec![1.0 / n_options as f64; n_states * n_options * n_options],
            action_policy: vec![1.0 / n_actions as f64; n_states * n_options * n_actions],
            smdp_termination: None,
            smdp_master: None,
        }
    }

    /// Attaches SMDP termination and master tables.
    pub fn with_smdp(
        mut self,
        termination: Vec<f64>,
        master: Vec<f64>,
    ) -> Result<Self, MdpError> {
        if termination.len() != self.n_options * self.n_states {
            return Err(MdpError::DimensionMismatch(format!(
                "smdp_termination: expected {} entries, got {}",
                self.n_options * self.n_states,
                termination.len()
            )));
        }
        for &b in &termination {
            if !(0.0..=1.0).contains(&b) {
                return Err(MdpError::InvalidDistribution(format!(
                    "smdp_termination: probability {b} outside [0,1]"
                )));
            }
        }
        if master.len() != self.n_states * self.n_options {
            return Err(MdpError::DimensionMismatch(format!(
                "smdp_master: expected {} entries, got {}",
                self.n_states * self.n_options,
                master.len()
            )));
        }
        check_rows(&master, self.n_options, "smdp_master")?;
        self.smdp_termination = Some(termination);
        self.smdp_master = Some(master);
        Ok(self)
    }

    #[inline]
    pub fn option_p(&self, s: usize, o_prev: usize, o: usize) -> f64 {
        self.option_policy[(s * self.n_options + o_prev) * self.n_options + o]
    }

    #[inline]
    pub fn action_p(&self, s: usize, o: usize, a: usize) -> f64 {
        self.action_policy[(s * self.n_options + o) * self.n_actions + a]
    }

    /// Row view `pi^O(.|s, o_prev)`.
    #[inline]
    pub fn option_row(&self, s: usize, o_prev: usize) -> &[f64] {
        let base = (s * self.n_options + o_prev) * self.n_options;
        &self.option_policy[base..base + self.n_options]
    }

    /// Row view `pi^A(.|s, o)`.
    #[inline]
    pub fn action_row(&self, s: usize, o: usize) -> &[f64] {
        let base = (s * self.n_options + o) * self.n_actions;
        &self.action_policy[base..base + self.n_actions]
    }
}

/// One decision step of a trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub state: usize,
    pub option_prev: usize,
    pub action: usize,
    pub option: usize,
    pub reward: f64,
}

/// A finite-horizon trajectory; `steps.len()` is the horizon.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Checks index ranges against an MDP and the option-chaining
    /// invariant (`o_prev` of step t+1 equals `o` of step t).
    pub fn validate(&self, mdp: &FiniteHitMdp) -> Result<(), MdpError> {
        for (t, step) in self.steps.iter().enumerate() {
            if step.state >= mdp.n_states
                || step.option >= mdp.n_options
                || step.option_prev >= mdp.n_options
                || step.action >= mdp.n_actions
            {
                return Err(MdpError::DimensionMismatch(format!(
                    "trajectory step {t} out of range"
                )));
            }
            if t > 0 && self.steps[t - 1].option != step.option_prev {
                return Err(MdpError::DimensionMismatch(format!(
                    "option chain broken at step {t}"
                )));
            }
        }
        Ok(())
    }
}

fn ln_or_sentinel(p: f64) -> f64 {
    if p > 0.0 {
        math::ln(p)
    } else {
        NEG_LOG_SENTINEL
    }
}

/// Log-density of a trajectory under the Markovian factorization:
/// `P(s0,o_prev0) prod_t P(s_t|s_{t-1},a_{t-1}) pi^O(o_t|s_t,o_prev_t)
/// pi^A(a_t|s_t,o_t)`.
pub fn traj_logprob_hitmdp(
    mdp: &FiniteHitMdp,
    pols: &TabularPolicies,
    tau: &Trajectory,
) -> Result<f64, MdpError> {
    check_policy_dims(mdp, pols)?;
    tau.validate(mdp)?;
    if tau.steps.is_empty() {
        return Ok(0.0);
    }
    let first = &tau.steps[0];
    let mut lp = ln_or_sentinel(mdp.initial_p(first.state, first.option_prev));
    for (t, step) in tau.steps.iter().enumerate() {
        if t > 0 {
            let prev = &tau.steps[t - 1];
            lp += ln_or_sentinel(mdp.p(prev.state, prev.action, step.state));
        }
        lp += ln_or_sentinel(pols.option_p(step.state, step.option_prev, step.option));
        lp += ln_or_sentinel(pols.action_p(step.state, step.option, step.action));
        if lp <= NEG_LOG_SENTINEL {
            return Ok(NEG_LOG_SENTINEL);
        }
    }
    Ok(lp.max(NEG_LOG_SENTINEL))
}

/// Log-density under the semi-Markov factorization: the option factor is
/// the termination/continuation mixture
/// `(1-beta_{o_prev}(s)) 1[o=o_prev] + beta_{o_prev}(s) P(o|s)`.
pub fn traj_logprob_smdp(
    mdp: &FiniteHitMdp,
    pols: &TabularPolicies,
    tau: &Trajectory,
) -> Result<f64, MdpError> {
    check_policy_dims(mdp, pols)?;
    tau.validate(mdp)?;
    let (termination, master) = match (&pols.smdp_termination, &pols.smdp_master) {
        (Some(t), Some(m)) => (t, m),
        _ => return Err(MdpError::MissingSmdpTables),
    };
    if tau.steps.is_empty() {
        return Ok(0.0);
    }
    let first = &tau.steps[0];
    let mut lp = ln_or_sentinel(mdp.initial_p(first.state, first.option_prev));
    for (t, step) in tau.steps.iter().enumerate() {
        if t > 0 {
            let prev = &tau.steps[t - 1];
            lp += ln_or_sentinel(mdp.p(prev.state, prev.action, step.state));
        }
        let beta = termination[step.option_prev * mdp.n_states + step.state];
        let stay = if step.option == step.option_prev { 1.0 - beta } else { 0.0 };
        let switch = beta * master[step.state * mdp.n_options + step.option];
        lp += ln_or_sentinel(stay + switch);
        lp += ln_or_sentinel(pols.action_p(step.state, step.option, step.action));
        if lp <= NEG_LOG_SENTINEL {
            return Ok(NEG_LOG_SENTINEL);
        }
    }
    Ok(lp.max(NEG_LOG_SENTINEL))
}

/// Log of the optimality likelihood along a trajectory:
/// `sum_t r(s_t, a_t) + f_t`, where each `f_t` must be non-positive.
pub fn optimality_loglik(
    mdp: &FiniteHitMdp,
    tau: &Trajectory,
    f_values: &[f64],
) -> Result<f64, MdpError> {
    tau.validate(mdp)?;
    if f_values.len() != tau.horizon() {
        return Err(MdpError::DimensionMismatch(format!(
            "f_values: expected {} entries, got {}",
            tau.horizon(),
            f_values.len()
        )));
    }
    for (t, &f) in f_values.iter().enumerate() {
        if f > 0.0 {
            return Err(MdpError::PositiveRegularizer { step: t, value: f });
        }
    }
    let mut total = 0.0;
    for (step, &f) in tau.steps.iter().zip(f_values) {
        total += mdp.r(step.state, step.action) + f;
    }
    Ok(total)
}

/// Clamped pointwise mutual-information regularizer:
/// `min(0, ln pi^O(o|s,o_prev) - ln marginal(o))`. A zero marginal entry
/// (or zero policy mass) yields the [`NEG_LOG_SENTINEL`].
pub fn mutual_info_regularizer(
    pols: &TabularPolicies,
    marginal: &[f64],
    s: usize,
    o_prev: usize,
    o: usize,
) -> f64 {
    let p = pols.option_p(s, o_prev, o);
    let m = marginal[o];
    if m <= 0.0 || p <= 0.0 {
        return NEG_LOG_SENTINEL;
    }
    (math::ln(p) - math::ln(m)).min(0.0)
}

/// Empirical frequency of each option id in `options`.
pub fn empirical_option_marginal(options: &[usize], n_options: usize) -> Vec<f64> {
    let mut freq = vec![0.0; n_options];
    if options.is_empty() {
        return freq;
    }
    for &o in options {
        freq[o] += 1.0;
    }
    let n = options.len() as f64;
    for f in &mut freq {
        *f /= n;
    }
    freq
}

pub(crate) fn check_policy_dims(
    mdp: &FiniteHitMdp,
    pols: &TabularPolicies,
) -> Result<(), MdpError> {
    if pols.n_states != mdp.n_states
        || pols.n_options != mdp.n_options
        || pols.n_actions != mdp.n_actions
    {
        return Err(MdpError::DimensionMismatch(format!(
            "policies are for ({},{},{}) but mdp is ({},{},{})",
            pols.n_states, pols.n_options, pols.n_actions,
            mdp.n_states, mdp.n_options, mdp.n_actions
        )));
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::Stream;

    /// Deterministic single-transition MDP: 1 state, 1 option, 1 action.
    fn point_mdp() -> FiniteHitMdp {
        FiniteHitMdp::new(
            1,
            1,
            1,
            vec![1.0],
            vec![0.0],
            RegularizerMode::Zero,
            0.9,
            vec![1.0],
        )
        .unwrap()
    }

    fn det_policies() -> TabularPolicies {
        TabularPolicies::new(1, 1, 1, vec![1.0], vec![1.0]).unwrap()
    }

    pub(crate) fn random_mdp(
        stream: &mut Stream,
        s: usize,
        k: usize,
        a: usize,
    ) -> FiniteHitMdp {
        let mut transition = vec![0.0; s * a * s];
        for row in transition.chunks_mut(s) {
            let mut sum = 0.0;
            for p in row.iter_mut() {
                *p = stream.uniform() + 0.05;
                sum += *p;
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
        }
        let reward: Vec<f64> = (0..s * a).map(|_| stream.uniform_in(-1.0, 1.0)).collect();
        let mut initial = vec![0.0; s * k];
        let mut sum = 0.0;
        for p in initial.iter_mut() {
            *p = stream.uniform() + 0.05;
            sum += *p;
        }
        for p in initial.iter_mut() {
            *p /= sum;
        }
        FiniteHitMdp::new(s, k, a, transition, reward, RegularizerMode::Zero, 0.9, initial)
            .unwrap()
    }

    pub(crate) fn random_policies(
        stream: &mut Stream,
        s: usize,
        k: usize,
        a: usize,
    ) -> TabularPolicies {
        let mut option_policy = vec![0.0; s * k * k];
        for row in option_policy.chunks_mut(k) {
            let mut sum = 0.0;
            for p in row.iter_mut() {
                *p = stream.uniform() + 0.05;
                sum += *p;
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
        }
        let mut action_policy = vec![0.0; s * k * a];
        for row in action_policy.chunks_mut(a) {
            let mut sum = 0.0;
            for p in row.iter_mut() {
                *p = stream.uniform() + 0.05;
                sum += *p;
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
        }
        TabularPolicies::new(s, k, a, option_policy, action_policy).unwrap()
    }

    #[test]
    fn deterministic_one_step_trajectory_has_logprob_zero() {
        let mdp = point_mdp();
        let pols = det_policies();
        let tau = Trajectory {
            steps: vec![Step { state: 0, option_prev: 0, action: 0, option: 0, reward: 0.0 }],
        };
        assert_eq!(traj_logprob_hitmdp(&mdp, &pols, &tau).unwrap(), 0.0);
    }

    #[test]
    fn uniform_factors_t3_match_analytic_value() {
        // 2 options, 2 actions, deterministic dynamics on one state.
        let mdp = FiniteHitMdp::new(
            1,
            2,
            2,
            vec![1.0, 1.0],
            vec![0.0, 0.0],
            RegularizerMode::Zero,
            0.9,
            vec![1.0, 0.0],
        )
        .unwrap();
        let pols = TabularPolicies::uniform(1, 2, 2);
        let mut steps = Vec::new();
        let mut o_prev = 0;
        for t in 0..3 {
            let o = t % 2;
            steps.push(Step { state: 0, option_prev: o_prev, action: 0, option: o, reward: 0.0 });
            o_prev = o;
        }
        let lp = traj_logprob_hitmdp(&mdp, &pols, &Trajectory { steps }).unwrap();
        let expected = 3.0 * (math::ln(0.5) + math::ln(0.5));
        assert!((lp - expected).abs() < 1e-12, "lp={lp} expected={expected}");
        assert!((expected + 4.158883083359672).abs() < 1e-12);
    }

    /// Independent factor-product oracle: multiplies raw table entries
    /// along the Markovian factorization, in probability space.
    fn factor_product_hitmdp(
        mdp: &FiniteHitMdp,
        pols: &TabularPolicies,
        tau: &Trajectory,
    ) -> f64 {
        let mut p = mdp.initial_p(tau.steps[0].state, tau.steps[0].option_prev);
        for (t, step) in tau.steps.iter().enumerate() {
            if t > 0 {
                let prev = &tau.steps[t - 1];
                p *= mdp.p(prev.state, prev.action, step.state);
            }
            p *= pols.option_p(step.state, step.option_prev, step.option);
            p *= pols.action_p(step.state, step.option, step.action);
        }
        p
    }

    #[test]
    fn seeded_tables_match_factor_product_oracle() {
        let mut stream = Stream::named(42, "mdp-oracle");
        let mdp = random_mdp(&mut stream, 3, 2, 2);
        let pols = random_policies(&mut stream, 3, 2, 2);
        // A horizon-4 trajectory with arbitrary but in-range choices.
        let mut steps = Vec::new();
        let mut o_prev = 1;
        let states = [0usize, 2, 1, 1];
        let actions = [1usize, 0, 1, 0];
        let options = [0usize, 0, 1, 0];
        for t in 0..4 {
            steps.push(Step {
                state: states[t],
                option_prev: o_prev,
                action: actions[t],
                option: options[t],
                reward: 0.0,
            });
            o_prev = options[t];
        }
        let tau = Trajectory { steps };
        let lp = traj_logprob_hitmdp(&mdp, &pols, &tau).unwrap();
        let oracle = math::ln(factor_product_hitmdp(&mdp, &pols, &tau));
        assert!((lp - oracle).abs() < 1e-12, "lp={lp} oracle={oracle}");
    }

    #[test]
    fn logprob_concatenation_is_additive() {
        let mut stream = Stream::named(7, "mdp-concat");
        let mdp = random_mdp(&mut stream, 3, 2, 2);
        let pols = random_policies(&mut stream, 3, 2, 2);
        let mk = |states: &[usize], actions: &[usize], options: &[usize], o0: usize| {
            let mut steps = Vec::new();
            let mut o_prev = o0;
            for t in 0..states.len() {
                steps.push(Step {
                    state: states[t],
                    option_prev: o_prev,
                    action: actions[t],
                    option: options[t],
                    reward: 0.0,
                });
                o_prev = options[t];
            }
            Trajectory { steps }
        };
        let full = mk(&[0, 2, 1, 1], &[1, 0, 1, 0], &[0, 0, 1, 0], 1);
        let head = mk(&[0, 2], &[1, 0], &[0, 0], 1);
        let lp_full = traj_logprob_hitmdp(&mdp, &pols, &full).unwrap();
        let lp_head = traj_logprob_hitmdp(&mdp, &pols, &head).unwrap();
        // Continuation factors of the tail: transition into each tail state
        // plus its option/action factors, starting from the shared boundary.
        let mut tail = 0.0;
        for t in 2..4 {
            let prev = &full.steps[t - 1];
            let step = &full.steps[t];
            tail += math::ln(mdp.p(prev.state, prev.action, step.state));
            tail += math::ln(pols.option_p(step.state, step.option_prev, step.option));
            tail += math::ln(pols.action_p(step.state, step.option, step.action));
        }
        assert!((lp_full - (lp_head + tail)).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_step_returns_sentinel() {
        let mdp = FiniteHitMdp::new(
            1,
            2,
            1,
            vec![1.0],
            vec![0.0],
            RegularizerMode::Zero,
            0.9,
            vec![1.0, 0.0],
        )
        .unwrap();
        // Option 1 is never selected by this policy.
        let pols = TabularPolicies::new(
            1,
            2,
            1,
            vec![1.0, 0.0, 1.0, 0.0],
            vec![1.0, 1.0],
        )
        .unwrap();
        let tau = Trajectory {
            steps: vec![Step { state: 0, option_prev: 0, action: 0, option: 1, reward: 0.0 }],
        };
        assert_eq!(traj_logprob_hitmdp(&mdp, &pols, &tau).unwrap(), NEG_LOG_SENTINEL);
    }

    #[test]
    fn smdp_missing_tables_is_an_error() {
        let mdp = point_mdp();
        let pols = det_policies();
        let tau = Trajectory {
            steps: vec![Step { state: 0, option_prev: 0, action: 0, option: 0, reward: 0.0 }],
        };
        assert_eq!(
            traj_logprob_smdp(&mdp, &pols, &tau),
            Err(MdpError::MissingSmdpTables)
        );
    }

    #[test]
    fn smdp_all_half_tables_match_raw_factor_oracle() {
        // 2 states, 2 options, 2 actions; every table entry 0.5 where a
        // distribution allows it.
        let mdp = FiniteHitMdp::new(
            2,
            2,
            2,
            vec![0.5; 2 * 2 * 2],
            vec![0.0; 4],
            RegularizerMode::Zero,
            0.9,
            vec![0.25; 4],
        )
        .unwrap();
        let pols = TabularPolicies::uniform(2, 2, 2)
            .with_smdp(vec![0.5; 4], vec![0.5; 4])
            .unwrap();
        let mk_step = |s, op, a, o| Step { state: s, option_prev: op, action: a, option: o, reward: 0.0 };
        let tau = Trajectory { steps: vec![mk_step(0, 0, 1, 0), mk_step(1, 0, 0, 1)] };
        // Oracle: multiply the raw factors of the semi-Markov product.
        // Step 0: initial 0.25; bracket (1-0.5)*1 + 0.5*0.5 = 0.75; action 0.5.
        // Step 1: transition 0.5; bracket 0 + 0.5*0.5 = 0.25; action 0.5.
        let oracle = (0.25f64 * 0.75 * 0.5) * (0.5 * 0.25 * 0.5);
        let lp = traj_logprob_smdp(&mdp, &pols, &tau).unwrap();
        assert!((lp - math::ln(oracle)).abs() < 1e-12);
    }

    #[test]
    fn smdp_collapses_to_hitmdp_when_termination_is_one() {
        let mut stream = Stream::named(13, "smdp-collapse");
        let mdp = random_mdp(&mut stream, 3, 2, 2);
        let mut pols = random_policies(&mut stream, 3, 2, 2);
        // Master policy per state; copy it into pi^O for every o_prev.
        let mut master = vec![0.0; 3 * 2];
        for s in 0..3 {
            let mut sum = 0.0;
            for o in 0..2 {
                master[s * 2 + o] = stream.uniform() + 0.1;
                sum += master[s * 2 + o];
            }
            for o in 0..2 {
                master[s * 2 + o] /= sum;
            }
            for o_prev in 0..2 {
                for o in 0..2 {
                    pols.option_policy[(s * 2 + o_prev) * 2 + o] = master[s * 2 + o];
                }
            }
        }
        let pols = TabularPolicies::new(3, 2, 2, pols.option_policy, pols.action_policy)
            .unwrap()
            .with_smdp(vec![1.0; 2 * 3], master)
            .unwrap();
        let mut steps = Vec::new();
        let mut o_prev = 0;
        for (t, (&s, &a)) in [0usize, 1, 2, 0].iter().zip(&[1usize, 0, 0, 1]).enumerate() {
            let o = (t + 1) % 2;
            steps.push(Step { state: s, option_prev: o_prev, action: a, option: o, reward: 0.0 });
            o_prev = o;
        }
        let tau = Trajectory { steps };
        let smdp = traj_logprob_smdp(&mdp, &pols, &tau).unwrap();
        let hit = traj_logprob_hitmdp(&mdp, &pols, &tau).unwrap();
        assert!((smdp - hit).abs() < 1e-12);
    }

    #[test]
    fn optimality_loglik_sums_rewards_and_regularizers() {
        let mdp = FiniteHitMdp::new(
            2,
            1,
            1,
            vec![0.0, 1.0, 1.0, 0.0],
            vec![1.0, 2.0],
            RegularizerMode::Zero,
            0.9,
            vec![1.0, 0.0],
        )
        .unwrap();
        let tau = Trajectory {
            steps: vec![
                Step { state: 0, option_prev: 0, action: 0, option: 0, reward: 1.0 },
                Step { state: 1, option_prev: 0, action: 0, option: 0, reward: 2.0 },
            ],
        };
        assert_eq!(optimality_loglik(&mdp, &tau, &[0.0, 0.0]).unwrap(), 3.0);
        let v = optimality_loglik(&mdp, &tau, &[-0.1, -0.2]).unwrap();
        assert!((v - 2.7).abs() < 1e-12);
        assert!(matches!(
            optimality_loglik(&mdp, &tau, &[0.1, 0.0]),
            Err(MdpError::PositiveRegularizer { step: 0, .. })
        ));
    }

    #[test]
    fn optimality_loglik_is_permutation_invariant() {
        let mut stream = Stream::named(99, "perm");
        let mdp = random_mdp(&mut stream, 3, 2, 2);
        let mk = |s, op, a, o| Step { state: s, option_prev: op, action: a, option: o, reward: 0.0 };
        let tau = Trajectory { steps: vec![mk(0, 0, 1, 1), mk(2, 1, 0, 0), mk(1, 0, 1, 1)] };
        let rev = Trajectory {
            steps: vec![mk(1, 0, 1, 1), mk(2, 1, 0, 0), mk(0, 0, 1, 1)],
        };
        // Permuted f values travel with their steps.
        let a = optimality_loglik(&mdp, &tau, &[-0.3, -0.1, -0.2]).unwrap();
        let b = optimality_loglik(&mdp, &rev, &[-0.2, -0.1, -0.3]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mutual_info_regularizer_examples() {
        let pols = TabularPolicies::new(
            1,
            2,
            1,
            vec![0.25, 0.75, 0.9, 0.1],
            vec![1.0, 1.0],
        )
        .unwrap();
        // Matching marginal: zero pointwise MI.
        assert_eq!(
            mutual_info_regularizer(&pols, &[0.25, 0.75], 0, 0, 0),
            0.0
        );
        // pi = 0.25 against marginal 0.5.
        let v = mutual_info_regularizer(&pols, &[0.5, 0.5], 0, 0, 0);
        assert!((v - math::ln(0.5)).abs() < 1e-9);
        assert!((v + 0.693147).abs() < 1e-6);
        // pi = 0.9 against marginal 0.5: clamped to zero.
        assert_eq!(mutual_info_regularizer(&pols, &[0.5, 0.5], 0, 1, 0), 0.0);
        // Zero marginal entry: sentinel.
        assert_eq!(
            mutual_info_regularizer(&pols, &[0.0, 1.0], 0, 0, 0),
            NEG_LOG_SENTINEL
        );
    }

    #[test]
    fn constructor_rejects_bad_tables() {
        assert!(matches!(
            FiniteHitMdp::new(
                1,
                1,
                1,
                vec![0.9],
                vec![0.0],
                RegularizerMode::Zero,
                0.9,
                vec![1.0]
            ),
            Err(MdpError::InvalidDistribution(_))
        ));
        assert!(matches!(
            FiniteHitMdp::new(
                1,
                1,
                1,
                vec![1.0],
                vec![0.0],
                RegularizerMode::Zero,
                1.0,
                vec![1.0]
            ),
            Err(MdpError::InvalidDiscount)
        ));
        assert!(matches!(
            TabularPolicies::new(1, 2, 1, vec![1.0], vec![1.0, 1.0]),
            Err(MdpError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn empirical_marginal_counts_frequencies() {
        let m = empirical_option_marginal(&[0, 1, 1, 3], 4);
        assert_eq!(m, vec![0.25, 0.5, 0.0, 0.25]);
    }
}
