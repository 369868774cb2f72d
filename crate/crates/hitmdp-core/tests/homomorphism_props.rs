//! Property checks for the homomorphism machinery on generated instances:
//! duplication quotients validate exactly, values and objectives agree
//! across the map, compositions stay valid, and every reported
//! counterexample reproduces a real violation.

use hitmdp_core::homomorphism::{
    compose, elbo_gap, fixtures, lift_policy, validate_homomorphism, value_equivalence_gap,
    Condition, GapMode, Split,
};
use hitmdp_core::mdp::TabularPolicies;
use hitmdp_core::rng::Stream;
use hitmdp_core::solver::JointPolicy;

fn random_policy_for(
    stream: &mut Stream,
    s: usize,
    k: usize,
    a: usize,
) -> TabularPolicies {
    let mut option_policy = vec![0.0; s * k * k];
    for row in option_policy.chunks_mut(k) {
        let mut sum = 0.0;
        for p in row.iter_mut() {
            *p = stream.uniform() + 0.1;
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
            *p = stream.uniform() + 0.1;
            sum += *p;
        }
        for p in row.iter_mut() {
            *p /= sum;
        }
    }
    TabularPolicies::new(s, k, a, option_policy, action_policy).unwrap()
}

#[test]
fn random_duplication_instances_validate_and_preserve_values() {
    for seed in 0..10 {
        let h = fixtures::random_duplication(900 + seed, 3, 2, 2, 0.85);
        let report = validate_homomorphism(&h, 1e-9);
        assert!(report.passed, "seed {seed}: {:?}", report.violations);
        let gap = value_equivalence_gap(&h, &GapMode::Optimal).unwrap();
        assert!(gap < 1e-6, "seed {seed}: optimal gap {gap}");
        let mut stream = Stream::named(seed, "fixed-pol");
        let pol = random_policy_for(
            &mut stream,
            h.abstract_mdp.n_states,
            h.abstract_mdp.n_options,
            h.abstract_mdp.n_actions,
        );
        let gap = value_equivalence_gap(&h, &GapMode::FixedPolicy(pol)).unwrap();
        assert!(gap < 1e-6, "seed {seed}: fixed-policy gap {gap}");
    }
}

#[test]
fn elbo_gap_decomposition_holds_on_duplication_instances() {
    for seed in 0..10 {
        let h = fixtures::random_duplication(1000 + seed, 2, 2, 2, 0.8);
        let mut stream = Stream::named(seed, "gap-pol");
        let pol = random_policy_for(
            &mut stream,
            h.abstract_mdp.n_states,
            h.abstract_mdp.n_options,
            h.abstract_mdp.n_actions,
        );
        let lifted = lift_policy(&h, &pol, &Split::UniformOverPreimage).unwrap();
        let result = elbo_gap(&h, &pol, &lifted, 2).unwrap();
        assert!(result.gap >= -1e-10, "seed {seed}: gap {}", result.gap);
        assert!(
            (result.gap - result.conditional_entropy_term).abs() < 1e-8,
            "seed {seed}: gap {} vs ce {}",
            result.gap,
            result.conditional_entropy_term
        );
        // Two-element action classes with uniform splits are visited with
        // probability one, so the entropy term is strictly positive.
        assert!(result.conditional_entropy_term > 0.1, "seed {seed}");
    }
}

#[test]
fn given_splits_change_the_gap_but_not_the_abstract_elbo() {
    let h = fixtures::random_duplication(77, 2, 2, 2, 0.8);
    let mut stream = Stream::named(77, "split-pol");
    let pol = random_policy_for(&mut stream, 2, 2, 2);
    let uniform = lift_policy(&h, &pol, &Split::UniformOverPreimage).unwrap();
    // A skewed-but-valid split: 0.9 / 0.1 over every two-element class.
    let n_e = h.n_aug_states();
    let n_alpha = h.n_aug_actions();
    let mut weights = vec![0.0; n_e * n_alpha];
    for e in 0..n_e {
        for alpha in 0..n_alpha {
            // Concrete actions 2a and 2a+1 share a class.
            let a = alpha % h.base.n_actions;
            weights[e * n_alpha + alpha] = if a % 2 == 0 { 0.9 } else { 0.1 };
        }
    }
    let skewed = lift_policy(&h, &pol, &Split::Given(weights)).unwrap();
    let r_uniform = elbo_gap(&h, &pol, &uniform, 2).unwrap();
    let r_skewed = elbo_gap(&h, &pol, &skewed, 2).unwrap();
    assert!((r_uniform.abstract_elbo - r_skewed.abstract_elbo).abs() < 1e-12);
    // Uniform splits maximize within-class entropy, so the uniform lift
    // has the larger gap; both still match their own entropy terms.
    assert!(r_uniform.gap > r_skewed.gap);
    assert!((r_skewed.gap - r_skewed.conditional_entropy_term).abs() < 1e-8);
    assert!(r_skewed.gap >= -1e-10);
}

#[test]
fn compositions_of_validated_homomorphisms_validate() {
    for seed in 0..5 {
        // Duplicate twice: base -> mid -> abstract, then compose.
        let h2 = fixtures::random_duplication(1100 + seed, 2, 2, 2, 0.8);
        let mid = h2.base.clone();
        // Lift the mid MDP once more by duplication of its own tables.
        let h1 = {
            use hitmdp_core::homomorphism::FiniteHomomorphism;
            let mut stream = Stream::named(1200 + seed, "again");
            let s_mid = mid.n_states;
            let a_mid = mid.n_actions;
            let k = mid.n_options;
            let s_base = 2 * s_mid;
            let a_base = 2 * a_mid;
            let mut transition = vec![0.0; s_base * a_base * s_base];
            let mut reward = vec![0.0; s_base * a_base];
            for s in 0..s_base {
                for a in 0..a_base {
                    reward[s * a_base + a] = mid.r(s / 2, a / 2);
                    for s2 in 0..s_mid {
                        let mass = mid.p(s / 2, a / 2, s2);
                        let ratio = stream.uniform();
                        transition[(s * a_base + a) * s_base + 2 * s2] = mass * ratio;
                        transition[(s * a_base + a) * s_base + 2 * s2 + 1] = mass * (1.0 - ratio);
                    }
                }
            }
            let mut initial = vec![0.0; s_base * k];
            for s in 0..s_mid {
                for op in 0..k {
                    let mass = mid.initial_p(s, op);
                    let ratio = stream.uniform();
                    initial[(2 * s) * k + op] = mass * ratio;
                    initial[(2 * s + 1) * k + op] = mass * (1.0 - ratio);
                }
            }
            let base = hitmdp_core::mdp::FiniteHitMdp::new(
                s_base,
                k,
                a_base,
                transition,
                reward,
                mid.regularizer_mode,
                mid.discount,
                initial,
            )
            .unwrap();
            let _n_alpha = k * a_base;
            let mut state_option_map = Vec::new();
            let mut action_map = Vec::new();
            for s in 0..s_base {
                for op in 0..k {
                    state_option_map.push((s / 2) * k + op);
                    for o in 0..k {
                        for a in 0..a_base {
                            action_map.push(o * a_mid + a / 2);
                        }
                    }
                }
            }
            FiniteHomomorphism::new(base, mid.clone(), state_option_map, action_map).unwrap()
        };
        assert!(validate_homomorphism(&h1, 1e-9).passed);
        assert!(validate_homomorphism(&h2, 1e-9).passed);
        let composed = compose(&h1, &h2).unwrap();
        let report = validate_homomorphism(&composed, 1e-9);
        assert!(report.passed, "seed {seed}: {:?}", report.violations);
        let gap = value_equivalence_gap(&composed, &GapMode::Optimal).unwrap();
        assert!(gap < 1e-6);
    }
}

#[test]
fn every_reported_counterexample_is_sound() {
    // Perturb rewards and transitions of the mirror quotient in several
    // spots; each reported tuple must reproduce its violation when
    // plugged back into the defining equalities.
    for (i, delta) in [(0usize, 0.1f64), (3, -0.2), (5, 0.05)] {
        let mut h = fixtures::mirror_8_to_4();
        h.abstract_mdp.reward[i] += delta;
        let report = validate_homomorphism(&h, 1e-9);
        assert!(!report.passed);
        for v in &report.violations {
            assert_eq!(v.condition, Condition::Reward);
            let (s, op, a, o) = (v.tuple[0], v.tuple[1], v.tuple[2], v.tuple[3]);
            let e = s * h.base.n_options + op;
            let alpha = o * h.base.n_actions + a;
            let e_abs = h.f(e);
            let alpha_abs = h.g(e, alpha);
            let lhs = h.abstract_mdp.r(
                e_abs / h.abstract_mdp.n_options,
                alpha_abs % h.abstract_mdp.n_actions,
            );
            let rhs = h.base.r(s, a);
            assert!((lhs - v.lhs).abs() < 1e-15);
            assert!((rhs - v.rhs).abs() < 1e-15);
            assert!((lhs - rhs).abs() >= 1e-9, "reported tuple is not a violation");
        }
    }
    // Transition perturbation.
    let mut h = fixtures::mirror_8_to_4();
    let s_abs = h.abstract_mdp.n_states;
    let a_n = h.abstract_mdp.n_actions;
    let row = (2 * a_n + 1) * s_abs;
    h.abstract_mdp.transition[row] += 0.03;
    h.abstract_mdp.transition[row + 1] -= 0.03;
    let report = validate_homomorphism(&h, 1e-9);
    assert!(!report.passed);
    for v in report.violations.iter().filter(|v| v.condition == Condition::Transition) {
        let (s, _op, a, o, e_abs_next) = (v.tuple[0], v.tuple[1], v.tuple[2], v.tuple[3], v.tuple[4]);
        let e = s * h.base.n_options + v.tuple[1];
        let alpha = o * h.base.n_actions + a;
        let e_abs = h.f(e);
        let alpha_abs = h.g(e, alpha);
        let k_abs = h.abstract_mdp.n_options;
        let (s_abs_from, _) = (e_abs / k_abs, e_abs % k_abs);
        let (o_abs, a_abs_idx) = (alpha_abs / a_n, alpha_abs % a_n);
        let (s_abs_next, o_abs_next) = (e_abs_next / k_abs, e_abs_next % k_abs);
        let lhs = if o_abs_next == o_abs {
            h.abstract_mdp.p(s_abs_from, a_abs_idx, s_abs_next)
        } else {
            0.0
        };
        let mut rhs = 0.0;
        for s_next in 0..h.base.n_states {
            if h.f(s_next * h.base.n_options + o) == e_abs_next {
                rhs += h.base.p(s, a, s_next);
            }
        }
        assert!((lhs - v.lhs).abs() < 1e-15 && (rhs - v.rhs).abs() < 1e-15);
        assert!((lhs - rhs).abs() >= 1e-9);
    }
}

#[test]
fn lifted_policy_pushforward_holds_on_seeded_instances() {
    let h = fixtures::random_duplication(55, 3, 2, 2, 0.9);
    let mut stream = Stream::named(55, "push");
    let pol = random_policy_for(&mut stream, 3, 2, 2);
    let lifted = lift_policy(&h, &pol, &Split::UniformOverPreimage).unwrap();
    let abstract_joint = JointPolicy::from_tabular(&pol);
    let n_alpha = h.n_aug_actions();
    let n_alpha_abs = h.abstract_mdp.n_options * h.abstract_mdp.n_actions;
    for e in 0..h.n_aug_states() {
        let mut push = vec![0.0; n_alpha_abs];
        for alpha in 0..n_alpha {
            push[h.g(e, alpha)] += lifted.policy.row(e)[alpha];
        }
        for (idx, &mass) in push.iter().enumerate() {
            assert!(
                (mass - abstract_joint.row(h.f(e))[idx]).abs() < 1e-12,
                "pushforward mismatch at e={e}, abstract action {idx}"
            );
        }
    }
}
