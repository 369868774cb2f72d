//! Oracle checks for the tabular solver: the evaluation fixed point, the
//! policy-iteration optimum, the exact finite-horizon objective and the
//! contraction behaviour are each verified against an independent
//! implementation that shares no code with the solver path.

use hitmdp_core::env::{ChainEnv, FiniteEnv};
use hitmdp_core::math;
use hitmdp_core::mdp::{FiniteHitMdp, RegularizerMode, TabularPolicies};
use hitmdp_core::rng::Stream;
use hitmdp_core::solver::{
    discounted_elbo, elbo_exact, soft_option_policy_iteration, soft_policy_evaluation,
    soft_policy_evaluation_traced, TemperaturePair,
};

fn random_mdp(stream: &mut Stream, s: usize, k: usize, a: usize, gamma: f64) -> FiniteHitMdp {
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
    FiniteHitMdp::new(s, k, a, transition, reward, RegularizerMode::Zero, gamma, initial).unwrap()
}

fn random_policies(stream: &mut Stream, s: usize, k: usize, a: usize) -> TabularPolicies {
    let mut norm_rows = |table: &mut Vec<f64>, row: usize| {
        for chunk in table.chunks_mut(row) {
            let mut sum = 0.0;
            for p in chunk.iter_mut() {
                *p = stream.uniform() + 0.05;
                sum += *p;
            }
            for p in chunk.iter_mut() {
                *p /= sum;
            }
        }
    };
    let mut option_policy = vec![0.0; s * k * k];
    norm_rows(&mut option_policy, k);
    let mut action_policy = vec![0.0; s * k * a];
    norm_rows(&mut action_policy, a);
    TabularPolicies::new(s, k, a, option_policy, action_policy).unwrap()
}

/// Independent oracle: iterates the coupled backups 10,000 times with a
/// plain, literal transcription of the equations.
fn long_run_backup_oracle(
    mdp: &FiniteHitMdp,
    pols: &TabularPolicies,
    temps: &TemperaturePair,
) -> (Vec<f64>, Vec<f64>) {
    let (s_n, k, a_n) = (mdp.n_states, mdp.n_options, mdp.n_actions);
    let mut q_o = vec![0.0; s_n * k];
    let mut q_a = vec![0.0; s_n * k * a_n];
    for _ in 0..10_000 {
        let mut new_q_o = vec![0.0; s_n * k];
        for s in 0..s_n {
            for o in 0..k {
                let mut acc = 0.0;
                let mut ent = 0.0;
                for a in 0..a_n {
                    let p = pols.action_p(s, o, a);
                    acc += p * q_a[(s * k + o) * a_n + a];
                    if p > 0.0 {
                        ent -= p * p.ln();
                    }
                }
                new_q_o[s * k + o] = acc + temps.alpha_a * ent;
            }
        }
        let mut new_q_a = vec![0.0; s_n * k * a_n];
        for s in 0..s_n {
            for o in 0..k {
                for a in 0..a_n {
                    let mut next = 0.0;
                    for s2 in 0..s_n {
                        let mut inner = 0.0;
                        let mut ent = 0.0;
                        for o2 in 0..k {
                            let p = pols.option_p(s2, o, o2);
                            inner += p * new_q_o[s2 * k + o2];
                            if p > 0.0 {
                                ent -= p * p.ln();
                            }
                        }
                        next += mdp.p(s, a, s2) * (inner + temps.alpha_o * ent);
                    }
                    new_q_a[(s * k + o) * a_n + a] = mdp.r(s, a) + mdp.discount * next;
                }
            }
        }
        q_o = new_q_o;
        q_a = new_q_a;
    }
    (q_o, q_a)
}

#[test]
fn evaluation_matches_long_run_backup_oracle() {
    let mut stream = Stream::named(101, "eval-oracle");
    let mdp = random_mdp(&mut stream, 3, 2, 2, 0.9);
    let pols = random_policies(&mut stream, 3, 2, 2);
    let temps = TemperaturePair::new(1.0, 1.0).unwrap();
    let q = soft_policy_evaluation(&mdp, &pols, &temps, 1e-12).unwrap();
    let (oracle_q_o, oracle_q_a) = long_run_backup_oracle(&mdp, &pols, &temps);
    for (i, &v) in q.q_option.iter().enumerate() {
        assert!((v - oracle_q_o[i]).abs() < 1e-8, "Q_O[{i}]: {v} vs {}", oracle_q_o[i]);
    }
    for (i, &v) in q.q_action.iter().enumerate() {
        assert!((v - oracle_q_a[i]).abs() < 1e-8, "Q_A[{i}]: {v} vs {}", oracle_q_a[i]);
    }
}

/// Brute-force soft value iteration on the joint (s, o) space: the
/// optimal soft Q obeys nested log-sum-exp backups over actions and
/// options. Written directly from those equations, independent of the
/// solver's evaluation/improvement split.
fn joint_soft_value_iteration_oracle(
    mdp: &FiniteHitMdp,
    temps: &TemperaturePair,
    sweeps: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (s_n, k, a_n) = (mdp.n_states, mdp.n_options, mdp.n_actions);
    let mut q_a = vec![0.0; s_n * k * a_n];
    let mut q_o = vec![0.0; s_n * k];
    for _ in 0..sweeps {
        // Q_O*(s,o) = alpha_a log sum_a exp(Q_A*(s,o,a)/alpha_a)
        for s in 0..s_n {
            for o in 0..k {
                let mut max = f64::NEG_INFINITY;
                for a in 0..a_n {
                    max = max.max(q_a[(s * k + o) * a_n + a] / temps.alpha_a);
                }
                let mut sum = 0.0;
                for a in 0..a_n {
                    sum += (q_a[(s * k + o) * a_n + a] / temps.alpha_a - max).exp();
                }
                q_o[s * k + o] = temps.alpha_a * (max + sum.ln());
            }
        }
        // Q_A*(s,o,a) = r + gamma E_s'[ alpha_o log sum_o' exp(Q_O*/alpha_o) ]
        let mut new_q_a = vec![0.0; s_n * k * a_n];
        for s in 0..s_n {
            for o in 0..k {
                for a in 0..a_n {
                    let mut next = 0.0;
                    for s2 in 0..s_n {
                        let p = mdp.p(s, a, s2);
                        if p == 0.0 {
                            continue;
                        }
                        let mut max = f64::NEG_INFINITY;
                        for o2 in 0..k {
                            max = max.max(q_o[s2 * k + o2] / temps.alpha_o);
                        }
                        let mut sum = 0.0;
                        for o2 in 0..k {
                            sum += (q_o[s2 * k + o2] / temps.alpha_o - max).exp();
                        }
                        next += p * temps.alpha_o * (max + sum.ln());
                    }
                    new_q_a[(s * k + o) * a_n + a] = mdp.r(s, a) + mdp.discount * next;
                }
            }
        }
        q_a = new_q_a;
    }
    (q_o, q_a)
}

#[test]
fn policy_iteration_reaches_the_joint_soft_optimum_on_a_chain() {
    // 5-state chain, K = 2, A = 2, seeded random rewards.
    let mut stream = Stream::named(202, "chain-rewards");
    let chain = ChainEnv::new(5).unwrap();
    let mut mdp = chain.to_hitmdp(2, 0.9);
    for r in mdp.reward.iter_mut() {
        *r += stream.uniform_in(-0.5, 0.5);
    }
    let temps = TemperaturePair::new(1.0, 1.0).unwrap();
    let (oracle_q_o, oracle_q_a) = joint_soft_value_iteration_oracle(&mdp, &temps, 2_000);

    let init_a = TabularPolicies::uniform(5, 2, 2);
    let result_a = soft_option_policy_iteration(&mdp, &init_a, &temps, 1e-9).unwrap();
    for (i, &v) in result_a.q.q_action.iter().enumerate() {
        assert!((v - oracle_q_a[i]).abs() < 1e-6, "Q_A[{i}]: {v} vs {}", oracle_q_a[i]);
    }
    for (i, &v) in result_a.q.q_option.iter().enumerate() {
        assert!((v - oracle_q_o[i]).abs() < 1e-6, "Q_O[{i}]: {v} vs {}", oracle_q_o[i]);
    }

    // A different random init lands on the same fixed point.
    let mut stream2 = Stream::named(203, "init2");
    let init_b = random_policies(&mut stream2, 5, 2, 2);
    let result_b = soft_option_policy_iteration(&mdp, &init_b, &temps, 1e-9).unwrap();
    for (x, y) in result_a.q.q_action.iter().zip(&result_b.q.q_action) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn elbo_trace_is_monotone_on_seeded_instances() {
    for seed in 0..5 {
        let mut stream = Stream::named(300 + seed, "mono");
        let mdp = random_mdp(&mut stream, 4, 2, 3, 0.85);
        let init = random_policies(&mut stream, 4, 2, 3);
        let temps = TemperaturePair::new(0.7, 1.1).unwrap();
        let result = soft_option_policy_iteration(&mdp, &init, &temps, 1e-9).unwrap();
        for w in result.elbo_trace.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-10,
                "seed {seed}: trace decreased {} -> {}",
                w[0],
                w[1]
            );
        }
    }
}

#[test]
fn final_q_dominates_twenty_random_policies() {
    let mut stream = Stream::named(404, "dominance");
    let mdp = random_mdp(&mut stream, 3, 2, 2, 0.9);
    let temps = TemperaturePair::new(1.0, 1.0).unwrap();
    let init = TabularPolicies::uniform(3, 2, 2);
    let result = soft_option_policy_iteration(&mdp, &init, &temps, 1e-10).unwrap();
    for _ in 0..20 {
        let pols = random_policies(&mut stream, 3, 2, 2);
        let q = soft_policy_evaluation(&mdp, &pols, &temps, 1e-10).unwrap();
        for (opt, other) in result.q.q_option.iter().zip(&q.q_option) {
            assert!(opt + 1e-6 >= *other, "optimal {opt} < evaluated {other}");
        }
        for (opt, other) in result.q.q_action.iter().zip(&q.q_action) {
            assert!(opt + 1e-6 >= *other);
        }
    }
}

#[test]
fn evaluation_backup_contracts_at_rate_gamma() {
    for seed in 0..20 {
        let mut stream = Stream::named(500 + seed, "contraction");
        let gamma = 0.5 + 0.4 * stream.uniform();
        let mdp = random_mdp(&mut stream, 3, 2, 2, gamma);
        let pols = random_policies(&mut stream, 3, 2, 2);
        let temps = TemperaturePair::new(1.0, 1.0).unwrap();
        let (_, distances) = soft_policy_evaluation_traced(&mdp, &pols, &temps, 1e-10).unwrap();
        // Successive sup-norm changes of the Q_A table decay by gamma.
        for w in distances.windows(2) {
            if w[0] > 1e-13 {
                assert!(
                    w[1] <= gamma * w[0] + 1e-9,
                    "seed {seed}: {} -> {} exceeds gamma {gamma}",
                    w[0],
                    w[1]
                );
            }
        }
    }
}

/// Monte-Carlo oracle for the finite-horizon objective: sample
/// trajectories from the variational law and average the per-step
/// reward-plus-entropy payout.
fn monte_carlo_elbo(
    mdp: &FiniteHitMdp,
    pols: &TabularPolicies,
    temps: &TemperaturePair,
    horizon: usize,
    samples: usize,
    stream: &mut Stream,
) -> (f64, f64) {
    let k = mdp.n_options;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let initial: Vec<f64> = mdp.initial.clone();
    for _ in 0..samples {
        let joint = stream.categorical(&initial);
        let mut s = joint / k;
        let mut o_prev = joint % k;
        let mut value = 0.0;
        for t in 0..horizon {
            let o_row = pols.option_row(s, o_prev);
            value += temps.alpha_o * math::entropy(o_row);
            let o = stream.categorical(o_row);
            let a_row = pols.action_row(s, o);
            value += temps.alpha_a * math::entropy(a_row);
            let a = stream.categorical(a_row);
            value += mdp.r(s, a);
            if t + 1 < horizon {
                let row_base = (s * mdp.n_actions + a) * mdp.n_states;
                let row = &mdp.transition[row_base..row_base + mdp.n_states];
                s = stream.categorical(row);
            }
            o_prev = o;
        }
        sum += value;
        sum_sq += value * value;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    (mean, (var / (n - 1.0)).sqrt())
}

#[test]
fn exact_elbo_matches_monte_carlo_oracle() {
    let mut stream = Stream::named(606, "mc-elbo");
    let mdp = random_mdp(&mut stream, 3, 2, 2, 0.9);
    let pols = random_policies(&mut stream, 3, 2, 2);
    let temps = TemperaturePair::new(0.8, 1.2).unwrap();
    let exact = elbo_exact(&mdp, &pols, &temps, 3).unwrap();
    let (mc, se) = monte_carlo_elbo(&mdp, &pols, &temps, 3, 1_000_000, &mut stream);
    assert!(
        (exact - mc).abs() <= 3.0 * se,
        "exact {exact} vs mc {mc} (se {se})"
    );
}

/// Occupancy-propagation oracle for the finite-horizon objective in Zero
/// regularizer mode: propagate the joint (s, o_prev) law forward and sum
/// expected per-step payouts. Independent of the trajectory enumeration.
fn occupancy_elbo_oracle(
    mdp: &FiniteHitMdp,
    pols: &TabularPolicies,
    temps: &TemperaturePair,
    horizon: usize,
) -> f64 {
    let (s_n, k, a_n) = (mdp.n_states, mdp.n_options, mdp.n_actions);
    let mut mu: Vec<f64> = mdp.initial.clone();
    let mut total = 0.0;
    for _ in 0..horizon {
        let mut next = vec![0.0; s_n * k];
        for s in 0..s_n {
            for op in 0..k {
                let w = mu[s * k + op];
                if w == 0.0 {
                    continue;
                }
                let o_row = pols.option_row(s, op);
                total += w * temps.alpha_o * math::entropy(o_row);
                for o in 0..k {
                    let po = o_row[o];
                    if po == 0.0 {
                        continue;
                    }
                    let a_row = pols.action_row(s, o);
                    total += w * po * temps.alpha_a * math::entropy(a_row);
                    for a in 0..a_n {
                        let pa = a_row[a];
                        if pa == 0.0 {
                            continue;
                        }
                        total += w * po * pa * mdp.r(s, a);
                        for s2 in 0..s_n {
                            next[s2 * k + o] += w * po * pa * mdp.p(s, a, s2);
                        }
                    }
                }
            }
        }
        mu = next;
    }
    total
}

#[test]
fn exact_elbo_matches_occupancy_oracle() {
    let mut stream = Stream::named(707, "dp-elbo");
    for _ in 0..3 {
        let mdp = random_mdp(&mut stream, 3, 2, 2, 0.95);
        let pols = random_policies(&mut stream, 3, 2, 2);
        let temps = TemperaturePair::new(1.3, 0.6).unwrap();
        for horizon in 1..5 {
            let exact = elbo_exact(&mdp, &pols, &temps, horizon).unwrap();
            let oracle = occupancy_elbo_oracle(&mdp, &pols, &temps, horizon);
            assert!(
                (exact - oracle).abs() < 1e-10,
                "h={horizon}: {exact} vs {oracle}"
            );
        }
    }
}

#[test]
fn discounted_elbo_is_the_horizon_limit_of_discounted_partial_sums() {
    // Cross-check the linear solve against explicit discounted occupancy
    // propagation truncated far beyond the mixing horizon.
    let mut stream = Stream::named(808, "disc-limit");
    let mdp = random_mdp(&mut stream, 3, 2, 2, 0.7);
    let pols = random_policies(&mut stream, 3, 2, 2);
    let temps = TemperaturePair::new(1.0, 1.0).unwrap();
    let exact = discounted_elbo(&mdp, &pols, &temps);
    let (s_n, k, a_n) = (3, 2, 2);
    let mut mu: Vec<f64> = mdp.initial.clone();
    let mut total = 0.0;
    let mut discount = 1.0;
    for _ in 0..200 {
        let mut next = vec![0.0; s_n * k];
        for s in 0..s_n {
            for op in 0..k {
                let w = mu[s * k + op];
                if w == 0.0 {
                    continue;
                }
                let o_row = pols.option_row(s, op);
                total += discount * w * temps.alpha_o * math::entropy(o_row);
                for o in 0..k {
                    let po = o_row[o];
                    let a_row = pols.action_row(s, o);
                    total += discount * w * po * temps.alpha_a * math::entropy(a_row);
                    for a in 0..a_n {
                        let pa = a_row[a];
                        total += discount * w * po * pa * mdp.r(s, a);
                        for s2 in 0..s_n {
                            next[s2 * k + o] += w * po * pa * mdp.p(s, a, s2);
                        }
                    }
                }
            }
        }
        mu = next;
        discount *= mdp.discount;
    }
    assert!((exact - total).abs() < 1e-9, "{exact} vs {total}");
}
