//! Exact tabular solvers for finite HiT-MDPs.
//!
//! The coupled soft backups implemented here are
//!
//! ```text
//! Q_O[s,o]   = fbar(s,o) + E_{a ~ pi^A}[Q_A[s,o,a]] + alpha_a H[pi^A(.|s,o)]
//! Q_A[s,o,a] = r(s,a) + gamma E_{s'}[ E_{o' ~ pi^O(.|s',o)}[Q_O[s',o']]
//!                                     + alpha_o H[pi^O(.|s',o)] ]
//! ```
//!
//! with the discount on the next-state expectation only (the operator whose
//! sup-norm contraction factor is `gamma`). Temperatures scale their
//! entropy terms; both equal to one recovers the unscaled backups.
//!
//! One sweep updates `Q_O` from the previous `Q_A` and then `Q_A` from the
//! fresh `Q_O`, so the sweep acts on `Q_A` exactly as the contraction
//! operator and successive `Q_A` distances decay by at most `gamma`.

use crate::math;
use crate::mdp::{check_policy_dims, FiniteHitMdp, MdpError, RegularizerMode, TabularPolicies};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Caps from the solver contract.
pub const MAX_EVALUATION_SWEEPS: usize = 100_000;
pub const MAX_IMPROVEMENT_ROUNDS: usize = 1_000;
/// Enumeration guard for finite-horizon ELBO computations.
pub const ENUMERATION_GUARD: f64 = 1e7;

/// Entropy-temperature pair; both strictly positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperaturePair {
    pub alpha_a: f64,
    pub alpha_o: f64,
}

impl TemperaturePair {
    pub fn new(alpha_a: f64, alpha_o: f64) -> Result<Self, SolverError> {
        if !(alpha_a > 0.0) || !(alpha_o > 0.0) {
            return Err(SolverError::InvalidTemperature { alpha_a, alpha_o });
        }
        Ok(TemperaturePair { alpha_a, alpha_o })
    }

    /// Both temperatures one: the plain soft backups.
    pub fn unit() -> Self {
        TemperaturePair { alpha_a: 1.0, alpha_o: 1.0 }
    }
}

/// Soft value tables `Q_O[s,o]` and `Q_A[s,o,a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftQTables {
    pub n_states: usize,
    pub n_options: usize,
    pub n_actions: usize,
    /// Row-major `[S][K]`.
    pub q_option: Vec<f64>,
    /// Row-major `[S][K][A]`.
    pub q_action: Vec<f64>,
}

impl SoftQTables {
    pub fn zeros(n_states: usize, n_options: usize, n_actions: usize) -> Self {
        SoftQTables {
            n_states,
            n_options,
            n_actions,
            q_option: vec![0.0; n_states * n_options],
            q_action: vec![0.0; n_states * n_options * n_actions],
        }
    }

    #[inline]
    pub fn q_o(&self, s: usize, o: usize) -> f64 {
        self.q_option[s * self.n_options + o]
    }

    #[inline]
    pub fn q_a(&self, s: usize, o: usize, a: usize) -> f64 {
        self.q_action[(s * self.n_options + o) * self.n_actions + a]
    }

    pub fn is_finite(&self) -> bool {
        self.q_option.iter().chain(self.q_action.iter()).all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SolverError {
    /// Evaluation failed to reach `tol` within the sweep cap.
    NonConvergent { sweeps: usize, last_change: f64 },
    /// Policy iteration failed to stabilize within the round cap.
    ImprovementCapExceeded { rounds: usize },
    /// The finite-horizon enumeration would exceed the term guard.
    EnumerationGuardExceeded { terms: f64 },
    InvalidTolerance(f64),
    InvalidTemperature { alpha_a: f64, alpha_o: f64 },
    Mdp(MdpError),
}

impl From<MdpError> for SolverError {
    fn from(e: MdpError) -> Self {
        SolverError::Mdp(e)
    }
}

impl core::fmt::Display for SolverError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SolverError::NonConvergent { sweeps, last_change } => write!(
                f,
                "evaluation did not converge in {sweeps} sweeps (last change {last_change:e})"
            ),
            SolverError::ImprovementCapExceeded { rounds } => {
                write!(f, "policy iteration did not stabilize in {rounds} rounds")
            }
            SolverError::EnumerationGuardExceeded { terms } => {
                write!(f, "enumeration of {terms:e} trajectories exceeds the guard")
            }
            SolverError::InvalidTolerance(t) => write!(f, "tolerance must be positive, got {t}"),
            SolverError::InvalidTemperature { alpha_a, alpha_o } => {
                write!(f, "temperatures must be positive, got ({alpha_a}, {alpha_o})")
            }
            SolverError::Mdp(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for SolverError {}

/// Expected regularizer table `fbar[s][o]`.
///
/// `Zero` mode is identically zero. `MutualInfo` mode weights the clamped
/// pointwise log-ratio by the discounted occupancy of the previous-option
/// coordinate, with the option marginal taken from the same occupancy.
pub fn expected_regularizer(mdp: &FiniteHitMdp, pols: &TabularPolicies) -> Vec<f64> {
    let (s_n, k) = (mdp.n_states, mdp.n_options);
    match mdp.regularizer_mode {
        RegularizerMode::Zero => vec![0.0; s_n * k],
        RegularizerMode::MutualInfo => {
            let occ = discounted_occupancy(mdp, pols);
            // Marginal over the option in force: sum over (s, o_prev) of
            // occupancy times pi^O.
            let mut marginal = vec![0.0; k];
            for s in 0..s_n {
                for op in 0..k {
                    let w = occ[s * k + op];
                    if w == 0.0 {
                        continue;
                    }
                    for o in 0..k {
                        marginal[o] += w * pols.option_p(s, op, o);
                    }
                }
            }
            let mut fbar = vec![0.0; s_n * k];
            for s in 0..s_n {
                // Conditional o_prev weights at s; uniform when unvisited.
                let mass: f64 = (0..k).map(|op| occ[s * k + op]).sum();
                for o in 0..k {
                    let mut val = 0.0;
                    for op in 0..k {
                        let w = if mass > 0.0 { occ[s * k + op] / mass } else { 1.0 / k as f64 };
                        if w == 0.0 {
                            continue;
                        }
                        let p = pols.option_p(s, op, o);
                        let term = if p <= 0.0 || marginal[o] <= 0.0 {
                            // Unreachable pairing contributes the clamp
                            // boundary rather than a sentinel blow-up.
                            0.0
                        } else {
                            (math::ln(p) - math::ln(marginal[o])).min(0.0)
                        };
                        val += w * term;
                    }
                    fbar[s * k + o] = val;
                }
            }
            fbar
        }
    }
}

/// Discounted occupancy of the `(s, o_prev)` chain, normalized to sum one:
/// `(1-gamma) sum_t gamma^t P(s_t, o_prev_t)`.
pub fn discounted_occupancy(mdp: &FiniteHitMdp, pols: &TabularPolicies) -> Vec<f64> {
    let (s_n, k, a_n) = (mdp.n_states, mdp.n_options, mdp.n_actions);
    let gamma = mdp.discount;
    let n = s_n * k;
    let mut occ: Vec<f64> = mdp.initial.clone();
    if gamma == 0.0 {
        return occ;
    }
    let mut next = vec![0.0; n];
    // nu_{k+1} = (1-gamma) mu_0 + gamma nu_k P; geometric convergence.
    for _ in 0..10_000 {
        for v in next.iter_mut() {
            *v = 0.0;
        }
        for s in 0..s_n {
            for op in 0..k {
                let w = occ[s * k + op];
                if w == 0.0 {
                    continue;
                }
                for o in 0..k {
                    let po = pols.option_p(s, op, o);
                    if po == 0.0 {
                        continue;
                    }
                    for a in 0..a_n {
                        let pa = pols.action_p(s, o, a);
                        if pa == 0.0 {
                            continue;
                        }
                        let w2 = w * po * pa;
                        for s2 in 0..s_n {
                            let pt = mdp.p(s, a, s2);
                            if pt > 0.0 {
                                next[s2 * k + o] += w2 * pt;
                            }
                        }
                    }
                }
            }
        }
        let mut change = 0.0f64;
        for i in 0..n {
            let updated = (1.0 - gamma) * mdp.initial[i] + gamma * next[i];
            change = change.max(math::abs(updated - occ[i]));
            occ[i] = updated;
        }
        if change < 1e-13 {
            break;
        }
    }
    occ
}

/// One evaluation sweep: `Q_O` from the old `Q_A`, then `Q_A` from the new
/// `Q_O`. Returns the sup-norm changes `(d_action, d_option)`.
fn evaluation_sweep(
    mdp: &FiniteHitMdp,
    pols: &TabularPolicies,
    temps: &TemperaturePair,
    fbar: &[f64],
    q: &mut SoftQTables,
    w_buf: &mut [f64],
) -> (f64, f64) {
    let (s_n, k, a_n) = (mdp.n_states, mdp.n_options, mdp.n_actions);
    let gamma = mdp.discount;
    let mut d_option = 0.0f64;
    for s in 0..s_n {
        for o in 0..k {
            let row = pols.action_row(s, o);
            let mut exp_q = 0.0;
            for a in 0..a_n {
                exp_q += row[a] * q.q_a(s, o, a);
            }
            let new = fbar[s * k + o] + exp_q + temps.alpha_a * math::entropy(row);
            let idx = s * k + o;
            d_option = d_option.max(math::abs(new - q.q_option[idx]));
            q.q_option[idx] = new;
        }
    }
    // w_buf[s'][o] = E_{o' ~ pi^O(.|s',o)}[Q_O] + alpha_o H[pi^O(.|s',o)].
    for s2 in 0..s_n {
        for o in 0..k {
            let row = pols.option_row(s2, o);
            let mut v = 0.0;
            for o2 in 0..k {
                v += row[o2] * q.q_option[s2 * k + o2];
            }
            w_buf[s2 * k + o] = v + temps.alpha_o * math::entropy(row);
        }
    }
    let mut d_action = 0.0f64;
    for s in 0..s_n {
        for o in 0..k {
            for a in 0..a_n {
                let mut next = 0.0;
                for s2 in 0..s_n {
                    let pt = mdp.p(s, a, s2);
                    if pt > 0.0 {
                        next += pt * w_buf[s2 * k + o];
                    }
                }
                let new = mdp.r(s, a) + gamma * next;
                let idx = (s * k + o) * a_n + a;
                d_action = d_action.max(math::abs(new - q.q_action[idx]));
                q.q_action[idx] = new;
            }
        }
    }
    (d_action, d_option)
}

/// Fixed point of the coupled soft backups, to sup-norm tolerance `tol`.
pub fn soft_policy_evaluation(
    mdp: &FiniteHitMdp,
    pols: &TabularPolicies,
    temps: &TemperaturePair,
    tol: f64,
) -> Result<SoftQTables, SolverError> {
    soft_policy_evaluation_traced(mdp, pols, temps, tol).map(|(q, _)| q)
}

/// Like [`soft_policy_evaluation`] but also returns the per-sweep sup-norm
/// change of the `Q_A` table (the contraction diagnostic).
pub fn soft_policy_evaluation_traced(
    mdp: &FiniteHitMdp,
    pols: &TabularPolicies,
    temps: &TemperaturePair,
    tol: f64,
) -> Result<(SoftQTables, Vec<f64>), SolverError> {
    if !(tol > 0.0) {
        return Err(SolverError::InvalidTolerance(tol));
    }
    check_policy_dims(mdp, pols)?;
    let fbar = expected_regularizer(mdp, pols);
    let mut q = SoftQTables::zeros(mdp.n_states, mdp.n_options, mdp.n_actions);
    let mut w_buf = vec![0.0; mdp.n_states * mdp.n_options];
    let mut action_changes = Vec::new();
    for _sweep in 0..MAX_EVALUATION_SWEEPS {
        let (d_action, d_option) = evaluation_sweep(mdp, pols, temps, &fbar, &mut q, &mut w_buf);
        action_changes.push(d_action);
        if d_action.max(d_option) < tol {
            return Ok((q, action_changes));
        }
    }
    Err(SolverError::NonConvergent {
        sweeps: MAX_EVALUATION_SWEEPS,
        last_change: *action_changes.last().unwrap_or(&f64::INFINITY),
    })
}

/// Writes `softmax(values / alpha)` into `out`, max-subtracted.
fn softmax_into(values: &[f64], alpha: f64, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(values) {
        let e = math::exp((v - max) / alpha);
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Soft policy improvement: `pi^A propto exp(Q_A/alpha_a)` per `(s,o)` and
/// `pi^O propto exp(Q_O/alpha_o)` per state (independent of `o_prev` at the
/// tabular fixed point, so every `o_prev` row is identical).
pub fn soft_policy_improvement(q: &SoftQTables, temps: &TemperaturePair) -> TabularPolicies {
    assert!(q.is_finite(), "soft_policy_improvement requires finite Q tables");
    let (s_n, k, a_n) = (q.n_states, q.n_options, q.n_actions);
    let mut action_policy = vec![0.0; s_n * k * a_n];
    for s in 0..s_n {
        for o in 0..k {
            let base = (s * k + o) * a_n;
            softmax_into(
                &q.q_action[base..base + a_n],
                temps.alpha_a,
                &mut action_policy[base..base + a_n],
            );
        }
    }
    let mut option_policy = vec![0.0; s_n * k * k];
    let mut row = vec![0.0; k];
    for s in 0..s_n {
        softmax_into(&q.q_option[s * k..(s + 1) * k], temps.alpha_o, &mut row);
        for o_prev in 0..k {
            option_policy[(s * k + o_prev) * k..(s * k + o_prev + 1) * k].copy_from_slice(&row);
        }
    }
    TabularPolicies {
        n_states: s_n,
        n_options: k,
        n_actions: a_n,
        option_policy,
        action_policy,
        smdp_termination: None,
        smdp_master: None,
    }
}

/// Result of [`soft_option_policy_iteration`].
#[derive(Clone, Debug)]
pub struct PolicyIterationResult {
    pub policies: TabularPolicies,
    pub q: SoftQTables,
    /// Exact discounted ELBO of the current policy, recorded for the
    /// initial policy and after every improvement; non-decreasing.
    pub elbo_trace: Vec<f64>,
}

/// Alternates exact evaluation and soft improvement until the policy
/// tables stop moving (sup-norm change below `tol`).
pub fn soft_option_policy_iteration(
    mdp: &FiniteHitMdp,
    init: &TabularPolicies,
    temps: &TemperaturePair,
    tol: f64,
) -> Result<PolicyIterationResult, SolverError> {
    if !(tol > 0.0) {
        return Err(SolverError::InvalidTolerance(tol));
    }
    check_policy_dims(mdp, init)?;
    let mut pols = init.clone();
    let mut elbo_trace = vec![discounted_elbo(mdp, &pols, temps)];
    for _round in 0..MAX_IMPROVEMENT_ROUNDS {
        let q = soft_policy_evaluation(mdp, &pols, temps, tol)?;
        let improved = soft_policy_improvement(&q, temps);
        elbo_trace.push(discounted_elbo(mdp, &improved, temps));
        let change = policy_distance(&pols, &improved);
        pols = improved;
        if change < tol {
            let q = soft_policy_evaluation(mdp, &pols, temps, tol)?;
            return Ok(PolicyIterationResult { policies: pols, q, elbo_trace });
        }
    }
    Err(SolverError::ImprovementCapExceeded { rounds: MAX_IMPROVEMENT_ROUNDS })
}

/// Sup-norm distance between two policy pairs.
pub fn policy_distance(a: &TabularPolicies, b: &TabularPolicies) -> f64 {
    let mut d = 0.0f64;
    for (x, y) in a.option_policy.iter().zip(&b.option_policy) {
        d = d.max(math::abs(x - y));
    }
    for (x, y) in a.action_policy.iter().zip(&b.action_policy) {
        d = d.max(math::abs(x - y));
    }
    d
}

/// Exact discounted ELBO
/// `E[sum_t gamma^t (r + fbar + alpha_a H[pi^A] + alpha_o H[pi^O])]`,
/// computed by a direct linear solve of the per-`(s, o_prev)` continuation
/// values (no iteration error).
pub fn discounted_elbo(mdp: &FiniteHitMdp, pols: &TabularPolicies, temps: &TemperaturePair) -> f64 {
    let (s_n, k, a_n) = (mdp.n_states, mdp.n_options, mdp.n_actions);
    let gamma = mdp.discount;
    let fbar = expected_regularizer(mdp, pols);
    let n = s_n * k;
    // W = c + gamma M W with M[(s,op) -> (s',o)] summed over (o, a).
    let mut mat = vec![0.0; n * n];
    let mut c = vec![0.0; n];
    for s in 0..s_n {
        for op in 0..k {
            let row_idx = s * k + op;
            let o_row = pols.option_row(s, op);
            let mut immediate = temps.alpha_o * math::entropy(o_row);
            for o in 0..k {
                let po = o_row[o];
                if po == 0.0 {
                    continue;
                }
                let a_row = pols.action_row(s, o);
                immediate += po * (fbar[s * k + o] + temps.alpha_a * math::entropy(a_row));
                for a in 0..a_n {
                    let pa = a_row[a];
                    if pa == 0.0 {
                        continue;
                    }
                    immediate += po * pa * mdp.r(s, a);
                    for s2 in 0..s_n {
                        let pt = mdp.p(s, a, s2);
                        if pt > 0.0 {
                            mat[row_idx * n + (s2 * k + o)] += po * pa * pt;
                        }
                    }
                }
            }
            c[row_idx] = immediate;
        }
    }
    // Assemble I - gamma M and solve.
    let mut system = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            system[i * n + j] = if i == j { 1.0 } else { 0.0 } - gamma * mat[i * n + j];
        }
    }
    let w = solve_dense(&mut system, &mut c, n);
    let mut elbo = 0.0;
    for i in 0..n {
        elbo += mdp.initial[i] * w[i];
    }
    elbo
}

/// In-place Gaussian elimination with partial pivoting; returns `b` as the
/// solution. The systems solved here are strictly diagonally dominant
/// (`I - gamma M` with row-stochastic `M`), so pivots never vanish.
fn solve_dense(a: &mut [f64], b: &mut Vec<f64>, n: usize) -> Vec<f64> {
    for col in 0..n {
        let mut pivot = col;
        let mut best = math::abs(a[col * n + col]);
        for row in col + 1..n {
            let v = math::abs(a[row * n + col]);
            if v > best {
                best = v;
                pivot = row;
            }
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            b.swap(col, pivot);
        }
        let d = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / d;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= factor * a[col * n + j];
            }
            b[row] -= factor * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut v = b[col];
        for j in col + 1..n {
            v -= a[col * n + j] * b[j];
        }
        b[col] = v / a[col * n + col];
    }
    core::mem::take(b)
}

fn enumeration_terms(s: usize, k: usize, a: usize, horizon: usize) -> f64 {
    math::powf((s * k * a) as f64, horizon as f64)
}

/// Exact finite-horizon ELBO
/// `E_{q(tau)}[sum_t r + f + alpha_a H[pi^A] + alpha_o H[pi^O]]` by full
/// enumeration of horizon-`horizon` trajectories (undiscounted).
///
/// In `MutualInfo` mode the per-step `f` uses the empirical option
/// frequency of the trajectory itself as the marginal.
pub fn elbo_exact(
    mdp: &FiniteHitMdp,
    pols: &TabularPolicies,
    temps: &TemperaturePair,
    horizon: usize,
) -> Result<f64, SolverError> {
    check_policy_dims(mdp, pols)?;
    let terms = enumeration_terms(mdp.n_states, mdp.n_options, mdp.n_actions, horizon);
    if terms > ENUMERATION_GUARD {
        return Err(SolverError::EnumerationGuardExceeded { terms });
    }
    if horizon == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut trail: Vec<(usize, usize, usize)> = Vec::with_capacity(horizon); // (s, o_prev, o)
    for s0 in 0..mdp.n_states {
        for op0 in 0..mdp.n_options {
            let w0 = mdp.initial_p(s0, op0);
            if w0 > 0.0 {
                recurse_factored(mdp, pols, temps, horizon, 0, s0, op0, w0, 0.0, &mut trail, &mut total);
            }
        }
    }
    Ok(total)
}

#[allow(clippy::too_many_arguments)]
fn recurse_factored(
    mdp: &FiniteHitMdp,
    pols: &TabularPolicies,
    temps: &TemperaturePair,
    horizon: usize,
    t: usize,
    s: usize,
    o_prev: usize,
    weight: f64,
    acc: f64,
    trail: &mut Vec<(usize, usize, usize)>,
    total: &mut f64,
) {
    if t == horizon {
        let mut value = acc;
        if mdp.regularizer_mode == RegularizerMode::MutualInfo {
            let options: Vec<usize> = trail.iter().map(|&(_, _, o)| o).collect();
            let marginal = crate::mdp::empirical_option_marginal(&options, mdp.n_options);
            for &(st, opt_prev, o) in trail.iter() {
                value += crate::mdp::mutual_info_regularizer(pols, &marginal, st, opt_prev, o);
            }
        }
        *total += weight * value;
        return;
    }
    let o_row = pols.option_row(s, o_prev);
    let h_o = temps.alpha_o * math::entropy(o_row);
    for o in 0..mdp.n_options {
        let po = o_row[o];
        if po == 0.0 {
            continue;
        }
        let a_row = pols.action_row(s, o);
        let h_a = temps.alpha_a * math::entropy(a_row);
        trail.push((s, o_prev, o));
        for a in 0..mdp.n_actions {
            let pa = a_row[a];
            if pa == 0.0 {
                continue;
            }
            let w = weight * po * pa;
            let acc2 = acc + mdp.r(s, a) + h_a + h_o;
            if t + 1 == horizon {
                // No successor factor needed: it sums to one.
                recurse_factored(mdp, pols, temps, horizon, t + 1, s, o, w, acc2, trail, total);
            } else {
                for s2 in 0..mdp.n_states {
                    let pt = mdp.p(s, a, s2);
                    if pt > 0.0 {
                        recurse_factored(
                            mdp, pols, temps, horizon, t + 1, s2, o, w * pt, acc2, trail, total,
                        );
                    }
                }
            }
        }
        trail.pop();
    }
}

/// A policy expressed jointly over augmented actions `alpha = (o, a)` per
/// augmented state `e = (s, o_prev)`; the representation used by the
/// homomorphism machinery, where lifted policies need not factorize.
///
/// Index conventions: `e = s * K + o_prev`, `alpha = o * A + a`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointPolicy {
    pub n_states: usize,
    pub n_options: usize,
    pub n_actions: usize,
    /// Row-major `[S*K][K*A]`.
    pub table: Vec<f64>,
}

impl JointPolicy {
    pub fn n_aug_states(&self) -> usize {
        self.n_states * self.n_options
    }

    pub fn n_aug_actions(&self) -> usize {
        self.n_options * self.n_actions
    }

    #[inline]
    pub fn row(&self, e: usize) -> &[f64] {
        let m = self.n_aug_actions();
        &self.table[e * m..(e + 1) * m]
    }

    /// Product form `pi^O(o|s,o_prev) * pi^A(a|s,o)` of factored policies.
    pub fn from_tabular(pols: &TabularPolicies) -> Self {
        let (s_n, k, a_n) = (pols.n_states, pols.n_options, pols.n_actions);
        let m = k * a_n;
        let mut table = vec![0.0; s_n * k * m];
        for s in 0..s_n {
            for op in 0..k {
                let e = s * k + op;
                for o in 0..k {
                    let po = pols.option_p(s, op, o);
                    for a in 0..a_n {
                        table[e * m + o * a_n + a] = po * pols.action_p(s, o, a);
                    }
                }
            }
        }
        JointPolicy { n_states: s_n, n_options: k, n_actions: a_n, table }
    }

    pub fn validate(&self) -> Result<(), MdpError> {
        let m = self.n_aug_actions();
        if self.table.len() != self.n_aug_states() * m {
            return Err(MdpError::DimensionMismatch(String::from("joint policy table")));
        }
        for (e, row) in self.table.chunks(m).enumerate() {
            let mut sum = 0.0;
            for &p in row {
                if p < 0.0 {
                    return Err(MdpError::InvalidDistribution(format!(
                        "joint policy: negative entry in row {e}"
                    )));
                }
                sum += p;
            }
            if math::abs(sum - 1.0) > crate::mdp::ROW_SUM_TOL {
                return Err(MdpError::InvalidDistribution(format!(
                    "joint policy: row {e} sums to {sum}"
                )));
            }
        }
        Ok(())
    }
}

/// Exact finite-horizon ELBO of a joint policy (entropy taken jointly over
/// `alpha`, i.e. unit temperature), plus the expectation of an optional
/// per-augmented-state extra term `extra[e]` accumulated along the same
/// trajectory distribution. Returns `(elbo, extra_expectation)`.
pub fn elbo_exact_joint(
    mdp: &FiniteHitMdp,
    policy: &JointPolicy,
    horizon: usize,
    extra: Option<&[f64]>,
) -> Result<(f64, f64), SolverError> {
    if policy.n_states != mdp.n_states
        || policy.n_options != mdp.n_options
        || policy.n_actions != mdp.n_actions
    {
        return Err(SolverError::Mdp(MdpError::DimensionMismatch(String::from(
            "joint policy does not match mdp dimensions",
        ))));
    }
    let terms = enumeration_terms(mdp.n_states, mdp.n_options, mdp.n_actions, horizon);
    if terms > ENUMERATION_GUARD {
        return Err(SolverError::EnumerationGuardExceeded { terms });
    }
    if horizon == 0 {
        return Ok((0.0, 0.0));
    }
    // Per-e immediate term: joint entropy plus expected reward, plus the
    // per-e regularizer contribution in MutualInfo mode (not supported for
    // joint policies; finite homomorphism checks run in Zero mode).
    let k = mdp.n_options;
    let a_n = mdp.n_actions;
    let mut results = (0.0, 0.0);
    let mut stack_recurse = RecurseJoint { mdp, policy, horizon, extra, k, a_n };
    for s0 in 0..mdp.n_states {
        for op0 in 0..k {
            let w0 = mdp.initial_p(s0, op0);
            if w0 > 0.0 {
                stack_recurse.go(0, s0 * k + op0, w0, 0.0, 0.0, &mut results);
            }
        }
    }
    Ok(results)
}

struct RecurseJoint<'a> {
    mdp: &'a FiniteHitMdp,
    policy: &'a JointPolicy,
    horizon: usize,
    extra: Option<&'a [f64]>,
    k: usize,
    a_n: usize,
}

impl RecurseJoint<'_> {
    fn go(&mut self, t: usize, e: usize, weight: f64, acc: f64, acc_extra: f64, out: &mut (f64, f64)) {
        if t == self.horizon {
            out.0 += weight * acc;
            out.1 += weight * acc_extra;
            return;
        }
        let s = e / self.k;
        let row = self.policy.row(e);
        let h = math::entropy(row);
        let extra_here = self.extra.map_or(0.0, |x| x[e]);
        for o in 0..self.k {
            for a in 0..self.a_n {
                let p = row[o * self.a_n + a];
                if p == 0.0 {
                    continue;
                }
                let w = weight * p;
                let acc2 = acc + self.mdp.r(s, a) + h;
                let acc_extra2 = acc_extra + extra_here;
                if t + 1 == self.horizon {
                    out.0 += w * acc2;
                    out.1 += w * acc_extra2;
                } else {
                    for s2 in 0..self.mdp.n_states {
                        let pt = self.mdp.p(s, a, s2);
                        if pt > 0.0 {
                            self.go(t + 1, s2 * self.k + o, w * pt, acc2, acc_extra2, out);
                        }
                    }
                }
            }
        }
    }
}
