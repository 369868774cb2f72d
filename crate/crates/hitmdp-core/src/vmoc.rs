//! Variational Markovian option critic: off-policy training of an
//! embedding-indexed option policy and a squashed-Gaussian action policy
//! against twin soft critics with target copies.
//!
//! Per gradient step the updates run in the order: both action critics,
//! both option critics, option policy (including the embedding matrix),
//! action policy, Polyak target update, temperature updates.
//!
//! Loss conventions:
//! - action critics regress to
//!   `r + gamma (1-done) [ E_{o' ~ pi^O(.|s',o)}[min_i Qbar_O(s',o')] +
//!   alpha_o H[pi^O(.|s',o)] ]` (min over the target copies in the
//!   bootstrap; both online critics regress to the shared target);
//! - option critics regress to
//!   `f + min_i Qbar_A(s,o,a) - alpha_a log pi^A(a|s,o)` with the buffered
//!   action `a`;
//! - the action policy loss is reparameterized through
//!   `a = tanh(mu + sigma * eps)` with the exact tanh log-density
//!   correction; the option policy loss takes the option expectation
//!   exactly. Gradients reach the embedding matrix only through the option
//!   policy input.

use crate::math;
use crate::mdp::RegularizerMode;
use crate::nn::{Activation, AdamState, BatchCache, DenseNet, Grads};
use crate::rng::Stream;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

const LN_2PI: f64 = 1.8378770664093453;
const LOG_STD_MIN: f64 = -20.0;
const LOG_STD_MAX: f64 = 2.0;
/// Squashing correction floor, also used when inverting buffered actions.
const SQUASH_EPS: f64 = 1e-6;

/// Learnable option embeddings, one row per option id.
#[derive(Clone, Debug, PartialEq)]
pub struct OptionEmbeddingMatrix {
    pub n_options: usize,
    pub dim: usize,
    /// Row-major `[K][dim]`.
    pub table: Vec<f64>,
}

impl OptionEmbeddingMatrix {
    pub fn new(n_options: usize, dim: usize, stream: &mut Stream) -> Self {
        let bound = 1.0 / math::sqrt(dim.max(1) as f64);
        let table = (0..n_options * dim).map(|_| stream.uniform_in(-bound, bound)).collect();
        OptionEmbeddingMatrix { n_options, dim, table }
    }

    #[inline]
    pub fn row(&self, o: usize) -> &[f64] {
        &self.table[o * self.dim..(o + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.table.iter().all(|v| v.is_finite())
    }
}

/// One replay-buffer record.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub option_prev: usize,
    pub action: Vec<f64>,
    pub reward: f64,
    pub obs_next: Vec<f64>,
    pub option: usize,
    pub done: bool,
}

/// FIFO ring buffer of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        ReplayBuffer { capacity, items: Vec::new(), head: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Uniform sample with replacement; fails below `batch` stored items.
    pub fn sample(&self, batch: usize, stream: &mut Stream) -> Result<Vec<Transition>, VmocError> {
        if self.items.len() < batch {
            return Err(VmocError::BufferTooSmall { len: self.items.len(), batch });
        }
        Ok((0..batch).map(|_| self.items[stream.below(self.items.len())].clone()).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum VmocError {
    BufferTooSmall { len: usize, batch: usize },
    NonFinite { context: String },
    DimensionMismatch(String),
}

impl core::fmt::Display for VmocError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            VmocError::BufferTooSmall { len, batch } => {
                write!(f, "replay buffer holds {len} transitions, need {batch}")
            }
            VmocError::NonFinite { context } => write!(f, "non-finite value in {context}"),
            VmocError::DimensionMismatch(s) => write!(f, "dimension mismatch: {s}"),
        }
    }
}

impl core::error::Error for VmocError {}

/// How the entropy temperatures evolve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlphaMode {
    /// Both temperatures held constant.
    Fixed { alpha_a: f64, alpha_o: f64 },
    /// Gradient-tuned toward the target entropies, starting from the
    /// given values.
    Auto { init_a: f64, init_o: f64 },
}

/// Agent hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct VmocConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub n_options: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub learning_rate: f64,
    /// Polyak coefficient on the online weights.
    pub target_smoothing: f64,
    pub alpha_mode: AlphaMode,
    /// Defaults to `-act_dim`.
    pub target_entropy_action: f64,
    /// Defaults to `0.5 ln K`.
    pub target_entropy_option: f64,
    pub regularizer_mode: RegularizerMode,
    /// Extra pre-squash exploration noise in `Explore` mode.
    pub exploration_noise_std: f64,
}

impl VmocConfig {
    pub fn new(obs_dim: usize, act_dim: usize) -> Self {
        let n_options = 4;
        VmocConfig {
            obs_dim,
            act_dim,
            n_options,
            embed_dim: 40,
            hidden: vec![256, 256],
            gamma: 0.99,
            learning_rate: 3e-4,
            target_smoothing: 0.005,
            alpha_mode: AlphaMode::Auto { init_a: 0.2, init_o: 0.2 },
            target_entropy_action: -(act_dim as f64),
            target_entropy_option: 0.5 * math::ln(n_options as f64),
            regularizer_mode: RegularizerMode::Zero,
            exploration_noise_std: 0.2,
        }
    }

    fn sizes(&self, input: usize, output: usize) -> (Vec<usize>, Vec<Activation>) {
        let mut sizes = vec![input];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(output);
        let mut acts = vec![Activation::ReLU; self.hidden.len()];
        acts.push(Activation::Identity);
        (sizes, acts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Explore,
    Greedy,
}

/// Per-step training metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainMetrics {
    pub loss_qa: f64,
    pub loss_qo: f64,
    pub loss_pa: f64,
    pub loss_po: f64,
    pub alpha_a: f64,
    pub alpha_o: f64,
    /// Estimated action-policy entropy `-E[log pi^A]`.
    pub ent_a: f64,
    /// Exact mean option-policy entropy over the batch.
    pub ent_o: f64,
}

/// All learnable state of the agent.
#[derive(Clone, Debug)]
pub struct VmocAgent {
    pub config: VmocConfig,
    pub q_action: [DenseNet; 2],
    pub target_q_action: [DenseNet; 2],
    pub q_option: [DenseNet; 2],
    pub target_q_option: [DenseNet; 2],
    pub policy_action: DenseNet,
    pub policy_option: DenseNet,
    pub embeddings: OptionEmbeddingMatrix,
    pub log_alpha_a: f64,
    pub log_alpha_o: f64,
    opt_qa: [AdamState; 2],
    opt_qo: [AdamState; 2],
    opt_pa: AdamState,
    opt_po: AdamState,
    opt_alpha: AdamState,
    act_stream: Stream,
    batch_stream: Stream,
    actor_noise: Stream,
    temp_noise: Stream,
}

impl VmocAgent {
    /// Builds all networks from named substreams of `seed`, so components
    /// initialize identically regardless of which other components exist.
    pub fn new(config: VmocConfig, seed: u64) -> Self {
        let qa_in = config.obs_dim + config.embed_dim + config.act_dim;
        let qo_in = config.obs_dim;
        let pa_in = config.obs_dim + config.embed_dim;
        let po_in = config.obs_dim + config.embed_dim;
        let (qa_sizes, qa_acts) = config.sizes(qa_in, 1);
        let (qo_sizes, qo_acts) = config.sizes(qo_in, config.n_options);
        let (pa_sizes, pa_acts) = config.sizes(pa_in, 2 * config.act_dim);
        let (po_sizes, po_acts) = config.sizes(po_in, config.n_options);
        let net = |label: &str, sizes: &[usize], acts: &[Activation]| {
            DenseNet::new(sizes, acts, &mut Stream::named(seed, label))
        };
        let q_action = [net("qa1", &qa_sizes, &qa_acts), net("qa2", &qa_sizes, &qa_acts)];
        let q_option = [net("qo1", &qo_sizes, &qo_acts), net("qo2", &qo_sizes, &qo_acts)];
        let policy_action = net("pa", &pa_sizes, &pa_acts);
        let policy_option = net("po", &po_sizes, &po_acts);
        let embeddings = OptionEmbeddingMatrix::new(
            config.n_options,
            config.embed_dim,
            &mut Stream::named(seed, "emb"),
        );
        let (init_a, init_o) = match config.alpha_mode {
            AlphaMode::Fixed { alpha_a, alpha_o } => (alpha_a, alpha_o),
            AlphaMode::Auto { init_a, init_o } => (init_a, init_o),
        };
        let lr = config.learning_rate;
        VmocAgent {
            opt_qa: [
                AdamState::new(q_action[0].param_count(), lr),
                AdamState::new(q_action[1].param_count(), lr),
            ],
            opt_qo: [
                AdamState::new(q_option[0].param_count(), lr),
                AdamState::new(q_option[1].param_count(), lr),
            ],
            opt_pa: AdamState::new(policy_action.param_count(), lr),
            opt_po: AdamState::new(
                policy_option.param_count() + embeddings.table.len(),
                lr,
            ),
            opt_alpha: AdamState::new(2, lr),
            target_q_action: q_action.clone(),
            target_q_option: q_option.clone(),
            q_action,
            q_option,
            policy_action,
            policy_option,
            embeddings,
            log_alpha_a: math::ln(init_a),
            log_alpha_o: math::ln(init_o),
            act_stream: Stream::named(seed, "act"),
            batch_stream: Stream::named(seed, "batch"),
            actor_noise: Stream::named(seed, "actor-eps"),
            temp_noise: Stream::named(seed, "temp-eps"),
            config,
        }
    }

    pub fn alpha_a(&self) -> f64 {
        match self.config.alpha_mode {
            AlphaMode::Fixed { alpha_a, .. } => alpha_a,
            AlphaMode::Auto { .. } => math::exp(self.log_alpha_a),
        }
    }

    pub fn alpha_o(&self) -> f64 {
        match self.config.alpha_mode {
            AlphaMode::Fixed { alpha_o, .. } => alpha_o,
            AlphaMode::Auto { .. } => math::exp(self.log_alpha_o),
        }
    }

    fn concat_obs_embed(&self, obs: &[f64], option: usize, out: &mut Vec<f64>) {
        out.extend_from_slice(obs);
        out.extend_from_slice(self.embeddings.row(option));
    }

    /// Option distribution `pi^O(.|obs, o_prev)` as (logits, probs).
    pub fn option_distribution(&self, obs: &[f64], o_prev: usize) -> (Vec<f64>, Vec<f64>) {
        let mut input = Vec::with_capacity(self.config.obs_dim + self.config.embed_dim);
        self.concat_obs_embed(obs, o_prev, &mut input);
        let logits = self.policy_option.forward(&input);
        let probs = softmax(&logits);
        (logits, probs)
    }

    /// Gaussian head `(mean, log_std)` of the action policy.
    pub fn action_head(&self, obs: &[f64], option: usize) -> (Vec<f64>, Vec<f64>) {
        let mut input = Vec::with_capacity(self.config.obs_dim + self.config.embed_dim);
        self.concat_obs_embed(obs, option, &mut input);
        let out = self.policy_action.forward(&input);
        let d = self.config.act_dim;
        let mean = out[..d].to_vec();
        let log_std = out[d..].iter().map(|&v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        (mean, log_std)
    }

    /// Selects an option and an action. `Greedy` takes the argmax logit
    /// (ties to the lowest id) and the squashed mean; `Explore` samples
    /// both and adds extra pre-squash Gaussian noise.
    pub fn act(
        &mut self,
        obs: &[f64],
        o_prev: usize,
        mode: ActMode,
    ) -> Result<(usize, Vec<f64>), VmocError> {
        if mode == ActMode::Greedy {
            return self.act_greedy(obs, o_prev);
        }
        let (logits, probs) = self.option_distribution(obs, o_prev);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(VmocError::NonFinite { context: format!("option logits {logits:?}") });
        }
        let option = self.act_stream.categorical(&probs);
        let (mean, log_std) = self.action_head(obs, option);
        if mean.iter().chain(log_std.iter()).any(|v| !v.is_finite()) {
            return Err(VmocError::NonFinite { context: String::from("action head") });
        }
        let mut action = Vec::with_capacity(mean.len());
        for d in 0..mean.len() {
            let u = mean[d]
                + math::exp(log_std[d]) * self.act_stream.normal()
                + self.config.exploration_noise_std * self.act_stream.normal();
            action.push(math::tanh(u));
        }
        Ok((option, action))
    }

    /// Deterministic action selection: argmax option logit (ties to the
    /// lowest id) and the squashed mean action. Consumes no randomness.
    pub fn act_greedy(&self, obs: &[f64], o_prev: usize) -> Result<(usize, Vec<f64>), VmocError> {
        let (logits, _probs) = self.option_distribution(obs, o_prev);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(VmocError::NonFinite { context: format!("option logits {logits:?}") });
        }
        let mut option = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[option] {
                option = i;
            }
        }
        let (mean, log_std) = self.action_head(obs, option);
        if mean.iter().chain(log_std.iter()).any(|v| !v.is_finite()) {
            return Err(VmocError::NonFinite { context: String::from("action head") });
        }
        Ok((option, mean.iter().map(|&m| math::tanh(m)).collect()))
    }

    /// Polyak update of both target families:
    /// `psi_bar <- sigma psi + (1 - sigma) psi_bar`.
    pub fn update_targets(&mut self) {
        let sigma = self.config.target_smoothing;
        for i in 0..2 {
            polyak(&mut self.target_q_action[i], &self.q_action[i], sigma);
            polyak(&mut self.target_q_option[i], &self.q_option[i], sigma);
        }
    }

    /// One full gradient step in the fixed update order; returns the loss
    /// values and current entropies.
    pub fn train_step(
        &mut self,
        buffer: &ReplayBuffer,
        batch_size: usize,
    ) -> Result<TrainMetrics, VmocError> {
        let mut stream = self.batch_stream.clone();
        let batch = buffer.sample(batch_size, &mut stream)?;
        self.batch_stream = stream;

        let (loss_qa, grads_qa) = critic_loss_action(self, &batch)?;
        for i in 0..2 {
            self.opt_qa[i].apply_net(&mut self.q_action[i], &grads_qa[i]);
        }

        let (loss_qo, grads_qo) = critic_loss_option(self, &batch)?;
        for i in 0..2 {
            self.opt_qo[i].apply_net(&mut self.q_option[i], &grads_qo[i]);
        }

        let po = actor_loss_option(self, &batch)?;
        apply_option_policy_update(self, &po.grads, &po.embedding_grads);

        let mut noise = self.actor_noise.clone();
        let pa = actor_loss_action(self, &batch, &mut noise)?;
        self.actor_noise = noise;
        self.opt_pa.apply_net(&mut self.policy_action, &pa.grads);

        self.update_targets();

        if let AlphaMode::Auto { .. } = self.config.alpha_mode {
            let mut noise = self.temp_noise.clone();
            let t = temperature_loss(self, &batch, &mut noise)?;
            self.temp_noise = noise;
            let mut params = [self.log_alpha_a, self.log_alpha_o];
            self.opt_alpha.apply(&mut params, &[t.grad_log_alpha_a, t.grad_log_alpha_o]);
            self.log_alpha_a = params[0];
            self.log_alpha_o = params[1];
        }

        let metrics = TrainMetrics {
            loss_qa,
            loss_qo,
            loss_pa: pa.loss,
            loss_po: po.loss,
            alpha_a: self.alpha_a(),
            alpha_o: self.alpha_o(),
            ent_a: -pa.mean_log_pi,
            ent_o: po.mean_entropy,
        };
        let finite = [
            metrics.loss_qa,
            metrics.loss_qo,
            metrics.loss_pa,
            metrics.loss_po,
            metrics.alpha_a,
            metrics.alpha_o,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(VmocError::NonFinite { context: format!("train metrics {metrics:?}") });
        }
        Ok(metrics)
    }
}

fn polyak(target: &mut DenseNet, online: &DenseNet, sigma: f64) {
    for (tl, ol) in target.layers.iter_mut().zip(&online.layers) {
        for (t, o) in tl.weights.iter_mut().zip(&ol.weights) {
            *t = sigma * o + (1.0 - sigma) * *t;
        }
        for (t, o) in tl.bias.iter_mut().zip(&ol.bias) {
            *t = sigma * o + (1.0 - sigma) * *t;
        }
    }
}

fn apply_option_policy_update(agent: &mut VmocAgent, grads: &Grads, embedding_grads: &[f64]) {
    // One optimizer over the option-policy parameters followed by the
    // embedding matrix (the embeddings are absorbed into theta^O).
    let opt = &mut agent.opt_po;
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - math::powf(opt.beta1, t as f64);
    let c2 = 1.0 - math::powf(opt.beta2, t as f64);
    let mut offset = 0;
    let mut update = |params: &mut [f64], gs: &[f64], offset: &mut usize| {
        for (j, p) in params.iter_mut().enumerate() {
            let g = gs[j];
            let m = &mut opt.first_moment[*offset + j];
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
            let v = &mut opt.second_moment[*offset + j];
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
            *p -= opt.learning_rate * (*m / c1) / (math::sqrt(*v / c2) + opt.epsilon);
        }
        *offset += params.len();
    };
    for (layer, g) in agent.policy_option.layers.iter_mut().zip(&grads.layers) {
        update(&mut layer.weights, &g.weights, &mut offset);
        update(&mut layer.bias, &g.bias, &mut offset);
    }
    update(&mut agent.embeddings.table, embedding_grads, &mut offset);
    debug_assert_eq!(offset, opt.first_moment.len());
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &l in logits {
        if l > max {
            max = l;
        }
    }
    let mut out: Vec<f64> = logits.iter().map(|&l| math::exp(l - max)).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Log-density of a squashed-Gaussian at squashed value `a = tanh(u)`.
fn squashed_log_density(u: f64, mean: f64, log_std: f64) -> f64 {
    let std = math::exp(log_std);
    let z = (u - mean) / std;
    let tanh_u = math::tanh(u);
    -0.5 * z * z - log_std - 0.5 * LN_2PI - math::ln(1.0 - tanh_u * tanh_u + SQUASH_EPS)
}

/// Exact batch regularizer values `f(o_t, s_t, a_t, o_{t-1})` under the
/// configured mode, with the option marginal estimated from the batch.
fn batch_regularizer(agent: &VmocAgent, batch: &[Transition]) -> Vec<f64> {
    match agent.config.regularizer_mode {
        RegularizerMode::Zero => vec![0.0; batch.len()],
        RegularizerMode::MutualInfo => {
            let options: Vec<usize> = batch.iter().map(|t| t.option).collect();
            let marginal =
                crate::mdp::empirical_option_marginal(&options, agent.config.n_options);
            batch
                .iter()
                .map(|t| {
                    let (_, probs) = agent.option_distribution(&t.obs, t.option_prev);
                    let p = probs[t.option];
                    let m = marginal[t.option];
                    if p <= 0.0 || m <= 0.0 {
                        crate::mdp::NEG_LOG_SENTINEL
                    } else {
                        (math::ln(p) - math::ln(m)).min(0.0)
                    }
                })
                .collect()
        }
    }
}

/// `J_{Q^A}`: both online action critics regress to the shared bootstrap
/// target. Returns the summed mean-squared losses and per-critic grads.
pub fn critic_loss_action(
    agent: &VmocAgent,
    batch: &[Transition],
) -> Result<(f64, [Grads; 2]), VmocError> {
    let b = batch.len();
    if b == 0 {
        return Err(VmocError::DimensionMismatch(String::from("empty batch")));
    }
    let cfg = &agent.config;
    let k = cfg.n_options;
    let alpha_o = agent.alpha_o();

    // Next-state option values from the target critics and the current
    // option policy (exact expectation over the discrete options).
    let mut po_input = Vec::with_capacity(b * (cfg.obs_dim + cfg.embed_dim));
    let mut qo_input = Vec::with_capacity(b * cfg.obs_dim);
    for t in batch {
        agent.concat_obs_embed(&t.obs_next, t.option, &mut po_input);
        qo_input.extend_from_slice(&t.obs_next);
    }
    let mut cache = BatchCache::default();
    agent.policy_option.forward_batch(&po_input, b, &mut cache);
    let logits = cache.output().to_vec();
    let mut tq = [BatchCache::default(), BatchCache::default()];
    agent.target_q_option[0].forward_batch(&qo_input, b, &mut tq[0]);
    agent.target_q_option[1].forward_batch(&qo_input, b, &mut tq[1]);

    let mut targets = Vec::with_capacity(b);
    for (i, t) in batch.iter().enumerate() {
        let probs = softmax(&logits[i * k..(i + 1) * k]);
        let mut v_next = alpha_o * math::entropy(&probs);
        for o in 0..k {
            let q_min = tq[0].output()[i * k + o].min(tq[1].output()[i * k + o]);
            v_next += probs[o] * q_min;
        }
        let mask = if t.done { 0.0 } else { 1.0 };
        targets.push(t.reward + cfg.gamma * mask * v_next);
    }

    // Online critics on (s, W[o], a).
    let mut qa_input = Vec::with_capacity(b * (cfg.obs_dim + cfg.embed_dim + cfg.act_dim));
    for t in batch {
        agent.concat_obs_embed(&t.obs, t.option, &mut qa_input);
        qa_input.extend_from_slice(&t.action);
    }
    let mut total = 0.0;
    let mut grads = [Grads::zeros_like(&agent.q_action[0]), Grads::zeros_like(&agent.q_action[1])];
    for i in 0..2 {
        let mut cache = BatchCache::default();
        agent.q_action[i].forward_batch(&qa_input, b, &mut cache);
        let mut upstream = Vec::with_capacity(b);
        let mut loss = 0.0;
        for (j, &target) in targets.iter().enumerate() {
            let diff = cache.output()[j] - target;
            loss += diff * diff;
            upstream.push(2.0 * diff / b as f64);
        }
        total += loss / b as f64;
        agent.q_action[i].backward_batch(&cache, &upstream, &mut grads[i], None);
    }
    if !total.is_finite() {
        return Err(VmocError::NonFinite { context: String::from("critic_loss_action") });
    }
    Ok((total, grads))
}

/// `J_{Q^O}`: both online option critics regress to
/// `f + min_i Qbar_A(s, o, a) - alpha_a log pi^A(a|s, o)` at the buffered
/// action.
pub fn critic_loss_option(
    agent: &VmocAgent,
    batch: &[Transition],
) -> Result<(f64, [Grads; 2]), VmocError> {
    let b = batch.len();
    if b == 0 {
        return Err(VmocError::DimensionMismatch(String::from("empty batch")));
    }
    let cfg = &agent.config;
    let k = cfg.n_options;
    let alpha_a = agent.alpha_a();
    let f_values = batch_regularizer(agent, batch);

    let mut qa_input = Vec::with_capacity(b * (cfg.obs_dim + cfg.embed_dim + cfg.act_dim));
    let mut pa_input = Vec::with_capacity(b * (cfg.obs_dim + cfg.embed_dim));
    let mut qo_input = Vec::with_capacity(b * cfg.obs_dim);
    for t in batch {
        agent.concat_obs_embed(&t.obs, t.option, &mut qa_input);
        qa_input.extend_from_slice(&t.action);
        agent.concat_obs_embed(&t.obs, t.option, &mut pa_input);
        qo_input.extend_from_slice(&t.obs);
    }
    let mut tqa = [BatchCache::default(), BatchCache::default()];
    agent.target_q_action[0].forward_batch(&qa_input, b, &mut tqa[0]);
    agent.target_q_action[1].forward_batch(&qa_input, b, &mut tqa[1]);
    let mut pa_cache = BatchCache::default();
    agent.policy_action.forward_batch(&pa_input, b, &mut pa_cache);

    let d = cfg.act_dim;
    let mut targets = Vec::with_capacity(b);
    for (i, t) in batch.iter().enumerate() {
        let q_min = tqa[0].output()[i].min(tqa[1].output()[i]);
        let head = &pa_cache.output()[i * 2 * d..(i + 1) * 2 * d];
        let mut log_pi = 0.0;
        for dim in 0..d {
            let a = t.action[dim].clamp(-1.0 + SQUASH_EPS, 1.0 - SQUASH_EPS);
            let u = math::atanh(a);
            let log_std = head[d + dim].clamp(LOG_STD_MIN, LOG_STD_MAX);
            log_pi += squashed_log_density(u, head[dim], log_std);
        }
        targets.push(f_values[i] + q_min - alpha_a * log_pi);
    }

    let mut total = 0.0;
    let mut grads = [Grads::zeros_like(&agent.q_option[0]), Grads::zeros_like(&agent.q_option[1])];
    for i in 0..2 {
        let mut cache = BatchCache::default();
        agent.q_option[i].forward_batch(&qo_input, b, &mut cache);
        let mut upstream = vec![0.0; b * k];
        let mut loss = 0.0;
        for (j, (t, &target)) in batch.iter().zip(&targets).enumerate() {
            let diff = cache.output()[j * k + t.option] - target;
            loss += diff * diff;
            upstream[j * k + t.option] = 2.0 * diff / b as f64;
        }
        total += loss / b as f64;
        agent.q_option[i].backward_batch(&cache, &upstream, &mut grads[i], None);
    }
    if !total.is_finite() {
        return Err(VmocError::NonFinite { context: String::from("critic_loss_option") });
    }
    Ok((total, grads))
}

/// Output of [`actor_loss_action`].
pub struct ActionPolicyLoss {
    pub loss: f64,
    pub grads: Grads,
    pub mean_log_pi: f64,
}

/// `J_{pi^A}` with reparameterized actions `a = tanh(mu + sigma eps)`;
/// gradients flow through the sample into the (frozen) online critics and
/// through the log-density, but never into critic parameters.
pub fn actor_loss_action(
    agent: &VmocAgent,
    batch: &[Transition],
    noise: &mut Stream,
) -> Result<ActionPolicyLoss, VmocError> {
    let b = batch.len();
    if b == 0 {
        return Err(VmocError::DimensionMismatch(String::from("empty batch")));
    }
    let cfg = &agent.config;
    let d = cfg.act_dim;
    let alpha_a = agent.alpha_a();

    let mut pa_input = Vec::with_capacity(b * (cfg.obs_dim + cfg.embed_dim));
    for t in batch {
        agent.concat_obs_embed(&t.obs, t.option, &mut pa_input);
    }
    let mut pa_cache = BatchCache::default();
    agent.policy_action.forward_batch(&pa_input, b, &mut pa_cache);
    let eps: Vec<f64> = (0..b * d).map(|_| noise.normal()).collect();

    // Sampled pre-squash and squashed actions.
    let mut u = vec![0.0; b * d];
    let mut a = vec![0.0; b * d];
    let mut log_pi = vec![0.0; b];
    for i in 0..b {
        let head = &pa_cache.output()[i * 2 * d..(i + 1) * 2 * d];
        for dim in 0..d {
            let log_std = head[d + dim].clamp(LOG_STD_MIN, LOG_STD_MAX);
            let ui = head[dim] + math::exp(log_std) * eps[i * d + dim];
            u[i * d + dim] = ui;
            a[i * d + dim] = math::tanh(ui);
            log_pi[i] += squashed_log_density(ui, head[dim], log_std);
        }
    }

    // Critic values and gradients with respect to the sampled action.
    let mut qa_input = Vec::with_capacity(b * (cfg.obs_dim + cfg.embed_dim + d));
    for (i, t) in batch.iter().enumerate() {
        agent.concat_obs_embed(&t.obs, t.option, &mut qa_input);
        qa_input.extend_from_slice(&a[i * d..(i + 1) * d]);
    }
    let mut caches = [BatchCache::default(), BatchCache::default()];
    agent.q_action[0].forward_batch(&qa_input, b, &mut caches[0]);
    agent.q_action[1].forward_batch(&qa_input, b, &mut caches[1]);
    // Input gradients of each critic (we only read the action block of the
    // winning critic per item).
    let in_dim = cfg.obs_dim + cfg.embed_dim + d;
    let mut input_grads = [vec![0.0; b * in_dim], vec![0.0; b * in_dim]];
    for i in 0..2 {
        let mut scratch = Grads::zeros_like(&agent.q_action[i]);
        let upstream = vec![1.0; b];
        agent.q_action[i].backward_batch(&caches[i], &upstream, &mut scratch, Some(&mut input_grads[i]));
    }

    let mut loss = 0.0;
    let mut mean_log_pi = 0.0;
    let mut upstream = vec![0.0; b * 2 * d];
    for i in 0..b {
        let q0 = caches[0].output()[i];
        let q1 = caches[1].output()[i];
        let (q_min, which) = if q0 <= q1 { (q0, 0) } else { (q1, 1) };
        loss += alpha_a * log_pi[i] - q_min;
        mean_log_pi += log_pi[i];
        let head = &pa_cache.output()[i * 2 * d..(i + 1) * 2 * d];
        for dim in 0..d {
            let log_std_raw = head[d + dim];
            let log_std = log_std_raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
            let clamp_pass = if (LOG_STD_MIN..=LOG_STD_MAX).contains(&log_std_raw) { 1.0 } else { 0.0 };
            let std = math::exp(log_std);
            let tanh_u = math::tanh(u[i * d + dim]);
            let sech2 = 1.0 - tanh_u * tanh_u;
            // d log_pi / du: only the squashing correction depends on u
            // under the reparameterization.
            let dlogpi_du = 2.0 * tanh_u * sech2 / (sech2 + SQUASH_EPS);
            let dq_da = input_grads[which][i * in_dim + cfg.obs_dim + cfg.embed_dim + dim];
            let dq_du = dq_da * sech2;
            let d_mu = alpha_a * dlogpi_du - dq_du;
            let d_logstd =
                clamp_pass * ((alpha_a * dlogpi_du - dq_du) * std * eps[i * d + dim] - alpha_a);
            upstream[i * 2 * d + dim] = d_mu / b as f64;
            upstream[i * 2 * d + d + dim] = d_logstd / b as f64;
        }
    }
    loss /= b as f64;
    mean_log_pi /= b as f64;
    let mut grads = Grads::zeros_like(&agent.policy_action);
    agent.policy_action.backward_batch(&pa_cache, &upstream, &mut grads, None);
    if !loss.is_finite() || !grads.is_finite() {
        return Err(VmocError::NonFinite { context: String::from("actor_loss_action") });
    }
    Ok(ActionPolicyLoss { loss, grads, mean_log_pi })
}

/// Output of [`actor_loss_option`].
pub struct OptionPolicyLoss {
    pub loss: f64,
    pub grads: Grads,
    /// Flat `[K * embed_dim]` gradient for the embedding matrix.
    pub embedding_grads: Vec<f64>,
    pub mean_entropy: f64,
}

/// `J_{pi^O} = -E[ sum_o pi^O(o|s,o_prev) min_i Q_{psi^O_i}(s,o) +
/// alpha_o H[pi^O] ]` with the option expectation exact; critics are
/// frozen. Gradients reach the embedding matrix through the policy input
/// `W[o_prev]`.
pub fn actor_loss_option(
    agent: &VmocAgent,
    batch: &[Transition],
) -> Result<OptionPolicyLoss, VmocError> {
    let b = batch.len();
    if b == 0 {
        return Err(VmocError::DimensionMismatch(String::from("empty batch")));
    }
    let cfg = &agent.config;
    let k = cfg.n_options;
    let alpha_o = agent.alpha_o();

    let mut po_input = Vec::with_capacity(b * (cfg.obs_dim + cfg.embed_dim));
    let mut qo_input = Vec::with_capacity(b * cfg.obs_dim);
    for t in batch {
        agent.concat_obs_embed(&t.obs, t.option_prev, &mut po_input);
        qo_input.extend_from_slice(&t.obs);
    }
    let mut po_cache = BatchCache::default();
    agent.policy_option.forward_batch(&po_input, b, &mut po_cache);
    let mut q_caches = [BatchCache::default(), BatchCache::default()];
    agent.q_option[0].forward_batch(&qo_input, b, &mut q_caches[0]);
    agent.q_option[1].forward_batch(&qo_input, b, &mut q_caches[1]);

    let mut loss = 0.0;
    let mut mean_entropy = 0.0;
    let mut upstream = vec![0.0; b * k];
    for i in 0..b {
        let probs = softmax(&po_cache.output()[i * k..(i + 1) * k]);
        mean_entropy += math::entropy(&probs);
        // c_o = min_i Q^O_i(s, o) - alpha_o ln p_o; F = sum_o p_o c_o.
        let mut c = vec![0.0; k];
        let mut f_val = 0.0;
        for o in 0..k {
            let q_min = q_caches[0].output()[i * k + o].min(q_caches[1].output()[i * k + o]);
            let ln_p = if probs[o] > 0.0 { math::ln(probs[o]) } else { -745.0 };
            c[o] = q_min - alpha_o * ln_p;
            f_val += probs[o] * c[o];
        }
        loss -= f_val;
        // dF/dz_o = p_o (c_o - F); loss = -mean F.
        for o in 0..k {
            upstream[i * k + o] = -probs[o] * (c[o] - f_val) / b as f64;
        }
    }
    loss /= b as f64;
    mean_entropy /= b as f64;

    let in_dim = cfg.obs_dim + cfg.embed_dim;
    let mut grads = Grads::zeros_like(&agent.policy_option);
    let mut input_grads = vec![0.0; b * in_dim];
    agent.policy_option.backward_batch(&po_cache, &upstream, &mut grads, Some(&mut input_grads));
    let mut embedding_grads = vec![0.0; agent.embeddings.table.len()];
    for (i, t) in batch.iter().enumerate() {
        let src = &input_grads[i * in_dim + cfg.obs_dim..(i + 1) * in_dim];
        let dst =
            &mut embedding_grads[t.option_prev * cfg.embed_dim..(t.option_prev + 1) * cfg.embed_dim];
        for (g, s) in dst.iter_mut().zip(src) {
            *g += s;
        }
    }
    if !loss.is_finite() || !grads.is_finite() {
        return Err(VmocError::NonFinite { context: String::from("actor_loss_option") });
    }
    Ok(OptionPolicyLoss { loss, grads, embedding_grads, mean_entropy })
}

/// Output of [`temperature_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureLoss {
    pub loss_alpha_a: f64,
    pub loss_alpha_o: f64,
    pub grad_log_alpha_a: f64,
    pub grad_log_alpha_o: f64,
}

/// `J(alpha^A) = -E[alpha^A (log pi^A(a~|s,o) + Hbar_A)]` with fresh
/// reparameterized samples, and `J(alpha^O) = -E[alpha^O (log pi^O +
/// Hbar_O)]` with the option expectation exact (`E[log pi^O] = -H`).
/// Both alphas live in log space.
pub fn temperature_loss(
    agent: &VmocAgent,
    batch: &[Transition],
    noise: &mut Stream,
) -> Result<TemperatureLoss, VmocError> {
    let b = batch.len();
    if b == 0 {
        return Err(VmocError::DimensionMismatch(String::from("empty batch")));
    }
    let cfg = &agent.config;
    let d = cfg.act_dim;
    let alpha_a = agent.alpha_a();
    let alpha_o = agent.alpha_o();

    let mut mean_log_pi_a = 0.0;
    for t in batch {
        let (mean, log_std) = agent.action_head(&t.obs, t.option);
        for dim in 0..d {
            let u = mean[dim] + math::exp(log_std[dim]) * noise.normal();
            mean_log_pi_a += squashed_log_density(u, mean[dim], log_std[dim]);
        }
    }
    mean_log_pi_a /= b as f64;

    let mut mean_neg_entropy_o = 0.0;
    for t in batch {
        let (_, probs) = agent.option_distribution(&t.obs, t.option_prev);
        mean_neg_entropy_o -= math::entropy(&probs);
    }
    mean_neg_entropy_o /= b as f64;

    let loss_alpha_a = -alpha_a * (mean_log_pi_a + cfg.target_entropy_action);
    let loss_alpha_o = -alpha_o * (mean_neg_entropy_o + cfg.target_entropy_option);
    Ok(TemperatureLoss {
        loss_alpha_a,
        loss_alpha_o,
        // d/d log alpha of -alpha c = -alpha c.
        grad_log_alpha_a: loss_alpha_a,
        grad_log_alpha_o: loss_alpha_o,
    })
}
