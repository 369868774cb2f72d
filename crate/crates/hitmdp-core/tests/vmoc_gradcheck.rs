//! Central-difference verification of every agent loss gradient, with
//! sampling noise frozen by replaying the same seeded stream.

use hitmdp_core::nn::{DenseNet, Grads};
use hitmdp_core::rng::Stream;
use hitmdp_core::vmoc::{
    actor_loss_action, actor_loss_option, critic_loss_action, critic_loss_option,
    temperature_loss, AlphaMode, Transition, VmocAgent, VmocConfig,
};

const FD_STEP: f64 = 1e-5;

fn tiny_config() -> VmocConfig {
    let mut cfg = VmocConfig::new(3, 2);
    cfg.n_options = 3;
    cfg.embed_dim = 4;
    cfg.hidden = vec![6, 6];
    cfg.alpha_mode = AlphaMode::Auto { init_a: 0.4, init_o: 0.3 };
    cfg
}

fn random_batch(cfg: &VmocConfig, n: usize, stream: &mut Stream) -> Vec<Transition> {
    (0..n)
        .map(|_| Transition {
            obs: (0..cfg.obs_dim).map(|_| stream.uniform_in(-1.0, 1.0)).collect(),
            option_prev: stream.below(cfg.n_options),
            action: (0..cfg.act_dim).map(|_| stream.uniform_in(-0.9, 0.9)).collect(),
            reward: stream.uniform_in(-1.0, 1.0),
            obs_next: (0..cfg.obs_dim).map(|_| stream.uniform_in(-1.0, 1.0)).collect(),
            option: stream.below(cfg.n_options),
            done: stream.uniform() < 0.2,
        })
        .collect()
}

/// Relative error with a small absolute floor against fp noise.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Flattens a `Grads` in parameter-visit order.
fn flatten(grads: &Grads) -> Vec<f64> {
    let mut out = Vec::new();
    grads.visit(&mut |s| out.extend_from_slice(s));
    out
}

/// Central differences over one network inside the agent; `select`
/// returns the net to perturb, `loss` recomputes the loss value.
fn fd_net<S, L>(agent: &VmocAgent, select: S, loss: L, analytic: &[f64]) -> f64
where
    S: Fn(&mut VmocAgent) -> &mut DenseNet,
    L: Fn(&VmocAgent) -> f64,
{
    let mut agent = agent.clone();
    let mut worst: f64 = 0.0;
    let mut idx = 0;
    let n_layers = select(&mut agent).layers.len();
    for l in 0..n_layers {
        for which in 0..2 {
            let len = {
                let net = select(&mut agent);
                if which == 0 { net.layers[l].weights.len() } else { net.layers[l].bias.len() }
            };
            for j in 0..len {
                let read = |agent: &mut VmocAgent, v: Option<f64>| -> f64 {
                    let net = select(agent);
                    let slot = if which == 0 {
                        &mut net.layers[l].weights[j]
                    } else {
                        &mut net.layers[l].bias[j]
                    };
                    let old = *slot;
                    if let Some(v) = v {
                        *slot = v;
                    }
                    old
                };
                let original = read(&mut agent, None);
                read(&mut agent, Some(original + FD_STEP));
                let plus = loss(&agent);
                read(&mut agent, Some(original - FD_STEP));
                let minus = loss(&agent);
                read(&mut agent, Some(original));
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                worst = worst.max(rel_err(analytic[idx], numeric));
                idx += 1;
            }
        }
    }
    assert_eq!(idx, analytic.len());
    worst
}

#[test]
fn action_critic_gradients_match_finite_differences() {
    for seed in 0..3 {
        let cfg = tiny_config();
        let agent = VmocAgent::new(cfg.clone(), 9000 + seed);
        let mut stream = Stream::named(seed, "batch");
        let batch = random_batch(&cfg, 5, &mut stream);
        let (_, grads) = critic_loss_action(&agent, &batch).unwrap();
        for i in 0..2 {
            let worst = fd_net(
                &agent,
                |a| &mut a.q_action[i],
                |a| critic_loss_action(a, &batch).unwrap().0,
                &flatten(&grads[i]),
            );
            assert!(worst < 1e-4, "seed {seed} critic {i}: rel err {worst}");
        }
    }
}

#[test]
fn option_critic_gradients_match_finite_differences() {
    for seed in 0..3 {
        let cfg = tiny_config();
        let agent = VmocAgent::new(cfg.clone(), 9100 + seed);
        let mut stream = Stream::named(seed, "batch");
        let batch = random_batch(&cfg, 5, &mut stream);
        let (_, grads) = critic_loss_option(&agent, &batch).unwrap();
        for i in 0..2 {
            let worst = fd_net(
                &agent,
                |a| &mut a.q_option[i],
                |a| critic_loss_option(a, &batch).unwrap().0,
                &flatten(&grads[i]),
            );
            assert!(worst < 1e-4, "seed {seed} critic {i}: rel err {worst}");
        }
    }
}

#[test]
fn action_actor_gradients_match_finite_differences_with_frozen_noise() {
    for seed in 0..3 {
        let cfg = tiny_config();
        let agent = VmocAgent::new(cfg.clone(), 9200 + seed);
        let mut stream = Stream::named(seed, "batch");
        let batch = random_batch(&cfg, 5, &mut stream);
        let noise_seed = 777 + seed;
        let out =
            actor_loss_action(&agent, &batch, &mut Stream::named(noise_seed, "eps")).unwrap();
        let worst = fd_net(
            &agent,
            |a| &mut a.policy_action,
            |a| {
                actor_loss_action(a, &batch, &mut Stream::named(noise_seed, "eps")).unwrap().loss
            },
            &flatten(&out.grads),
        );
        assert!(worst < 1e-4, "seed {seed}: rel err {worst}");
    }
}

#[test]
fn option_actor_gradients_match_finite_differences_including_embeddings() {
    for seed in 0..3 {
        let cfg = tiny_config();
        let agent = VmocAgent::new(cfg.clone(), 9300 + seed);
        let mut stream = Stream::named(seed, "batch");
        let batch = random_batch(&cfg, 5, &mut stream);
        let out = actor_loss_option(&agent, &batch).unwrap();
        let worst = fd_net(
            &agent,
            |a| &mut a.policy_option,
            |a| actor_loss_option(a, &batch).unwrap().loss,
            &flatten(&out.grads),
        );
        assert!(worst < 1e-4, "seed {seed} net: rel err {worst}");
        // Embedding gradient (reaches W through the policy input).
        let mut agent2 = agent.clone();
        let mut worst_emb: f64 = 0.0;
        for idx in 0..agent2.embeddings.table.len() {
            let original = agent2.embeddings.table[idx];
            agent2.embeddings.table[idx] = original + FD_STEP;
            let plus = actor_loss_option(&agent2, &batch).unwrap().loss;
            agent2.embeddings.table[idx] = original - FD_STEP;
            let minus = actor_loss_option(&agent2, &batch).unwrap().loss;
            agent2.embeddings.table[idx] = original;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst_emb = worst_emb.max(rel_err(out.embedding_grads[idx], numeric));
        }
        assert!(worst_emb < 1e-4, "seed {seed} embeddings: rel err {worst_emb}");
    }
}

#[test]
fn temperature_gradients_match_finite_differences_in_log_alpha() {
    for seed in 0..3 {
        let cfg = tiny_config();
        let agent = VmocAgent::new(cfg.clone(), 9400 + seed);
        let mut stream = Stream::named(seed, "batch");
        let batch = random_batch(&cfg, 6, &mut stream);
        let noise_seed = 555 + seed;
        let t = temperature_loss(&agent, &batch, &mut Stream::named(noise_seed, "eps")).unwrap();
        // J depends on log alpha only through the leading alpha factor;
        // the sampled log pi is alpha-free, so frozen noise suffices.
        let mut agent2 = agent.clone();
        for (which, (analytic, read)) in [
            (t.grad_log_alpha_a, 0usize),
            (t.grad_log_alpha_o, 1usize),
        ]
        .iter()
        .map(|&(g, w)| (g, w))
        .enumerate()
        {
            let _ = which;
            let original = if read == 0 { agent2.log_alpha_a } else { agent2.log_alpha_o };
            let set = |a: &mut VmocAgent, v: f64| {
                if read == 0 {
                    a.log_alpha_a = v;
                } else {
                    a.log_alpha_o = v;
                }
            };
            set(&mut agent2, original + FD_STEP);
            let tp = temperature_loss(&agent2, &batch, &mut Stream::named(noise_seed, "eps"))
                .unwrap();
            let plus = if read == 0 { tp.loss_alpha_a } else { tp.loss_alpha_o };
            set(&mut agent2, original - FD_STEP);
            let tm = temperature_loss(&agent2, &batch, &mut Stream::named(noise_seed, "eps"))
                .unwrap();
            let minus = if read == 0 { tm.loss_alpha_a } else { tm.loss_alpha_o };
            set(&mut agent2, original);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            assert!(
                rel_err(analytic, numeric) < 1e-6,
                "seed {seed} alpha {read}: {analytic} vs {numeric}"
            );
        }
    }
}

#[test]
fn degenerate_critics_reduce_the_actor_loss_to_entropy_scaling() {
    // With constant (zeroed) critics the action-policy loss is
    // alpha_a E[log pi]; its gradient pushes the log-std up.
    let cfg = tiny_config();
    let mut agent = VmocAgent::new(cfg.clone(), 31);
    for i in 0..2 {
        let last = agent.q_action[i].layers.len() - 1;
        agent.q_action[i].layers[last].weights.iter_mut().for_each(|w| *w = 0.0);
        agent.q_action[i].layers[last].bias.iter_mut().for_each(|b| *b = 0.0);
    }
    // Start from a narrow policy (squashed-Gaussian entropy peaks at a
    // finite scale, so the sign check needs sigma below that peak).
    let last = agent.policy_action.layers.len() - 1;
    let d = cfg.act_dim;
    let fan_in = agent.policy_action.layers[last].fan_in;
    for dim in 0..d {
        let row = (d + dim) * fan_in;
        agent.policy_action.layers[last].weights[row..row + fan_in]
            .iter_mut()
            .for_each(|w| *w = 0.0);
        agent.policy_action.layers[last].bias[d + dim] = -2.0;
    }
    let mut stream = Stream::named(3, "batch");
    let batch = random_batch(&cfg, 16, &mut stream);
    let out = actor_loss_action(&agent, &batch, &mut Stream::named(4, "eps")).unwrap();
    assert!((out.loss - agent.alpha_a() * out.mean_log_pi).abs() < 1e-12);
    // Gradient on the log-std bias must be negative: descent raises the
    // log-std, pushing the policy toward higher entropy.
    for dim in 0..d {
        let g = out.grads.layers[last].bias[d + dim];
        assert!(g < 0.0, "log-std gradient should push entropy up, got {g}");
    }
}
