//! Workflow execution: each subcommand resolves its config, runs, and
//! leaves `config-resolved.json`, `metrics.csv` and a `summary.json`
//! (plus workflow-specific artifacts) in the output directory.

use crate::config::{Command, EnvId, ExperimentConfig};
use crate::error::LabError;
use crate::formats;
use crate::metrics::{fmt_f64, CsvBuffer, VMOC_HEADER};
use hitmdp_core::coldstart::{
    answer_exact_match, elbo_sft_exact, make_synthetic_corpus, LatentDims, LatentReasoningModel,
    Task, TrainMode, Trainer,
};
use hitmdp_core::env::{ChainEnv, Discretized, Env, FiniteEnv, FourRoomsEnv, PendulumEnv, RunningNormalizer};
use hitmdp_core::homomorphism::{
    elbo_gap, fixtures, lift_policy, validate_homomorphism, value_equivalence_gap,
    FiniteHomomorphism, GapMode, Split,
};
use hitmdp_core::mdp::{FiniteHitMdp, RegularizerMode, TabularPolicies};
use hitmdp_core::rng::Stream;
use hitmdp_core::solver::{soft_option_policy_iteration, TemperaturePair};
use hitmdp_core::vmoc::{ActMode, AlphaMode, ReplayBuffer, Transition, VmocAgent, VmocConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Creates the output directory and records the effective config.
fn prepare_out(config: &ExperimentConfig, command: Command) -> Result<PathBuf, LabError> {
    let out = config
        .out
        .clone()
        .unwrap_or_else(|| format!("runs/{}-seed{}", command.name(), config.seed));
    let dir = PathBuf::from(out);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config-resolved.json"), serde_json::to_string_pretty(config)?)?;
    Ok(dir)
}

fn write_summary<T: Serialize>(dir: &Path, summary: &T) -> Result<(), LabError> {
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(summary)?)?;
    Ok(())
}

fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite returns"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

// ---------------------------------------------------------------------
// Agent training
// ---------------------------------------------------------------------

/// A boxed environment plus how actions in [-1, 1] map onto it.
struct EnvHandle {
    env: Box<dyn Env>,
    action_scale: f64,
}

fn make_env(id: &EnvId) -> Result<EnvHandle, LabError> {
    Ok(match id {
        EnvId::Chain(n) => {
            EnvHandle { env: Box::new(Discretized::new(ChainEnv::new(*n)?)), action_scale: 1.0 }
        }
        EnvId::FourRooms => {
            EnvHandle { env: Box::new(Discretized::new(FourRoomsEnv::new())), action_scale: 1.0 }
        }
        EnvId::Pendulum => {
            let env = PendulumEnv::new();
            let scale = env.max_torque;
            EnvHandle { env: Box::new(env), action_scale: scale }
        }
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VmocRunSummary {
    pub env: String,
    pub seed: u64,
    pub total_steps: usize,
    pub initial_return_mean: f64,
    pub initial_return_median: f64,
    pub final_return_mean: f64,
    pub final_return_median: f64,
    pub best_return_median: f64,
    /// Fraction of final greedy evaluation episodes ending at a terminal
    /// state (rather than the step cap).
    pub final_success_rate: f64,
    /// Entropy (nats) of the marginal option-usage distribution over the
    /// final evaluation episodes.
    pub option_usage_entropy: f64,
    pub target_entropy_option: f64,
    /// Mean |H[pi^O] - target| over the first / last quarter of metric
    /// rows (option-temperature tracking diagnostics).
    pub ent_o_deviation_first_quarter: f64,
    pub ent_o_deviation_last_quarter: f64,
}

struct EvalOutcome {
    returns: Vec<f64>,
    successes: usize,
    option_counts: Vec<u64>,
}

#[allow(clippy::too_many_arguments)]
fn run_eval(
    agent: &VmocAgent,
    env_id: &EnvId,
    normalizer: Option<&RunningNormalizer>,
    seed: u64,
    eval_idx: usize,
    episodes: usize,
    threads: usize,
) -> Result<EvalOutcome, LabError> {
    let episode = |ep: usize| -> Result<(f64, bool, Vec<u64>), LabError> {
        let mut handle = make_env(env_id)?;
        let mut stream = Stream::named(seed, &format!("eval-{eval_idx}-{ep}"));
        let mut norm = normalizer.cloned();
        let mut obs = handle.env.reset(&mut stream);
        let mut o_prev = 0usize;
        let mut ret = 0.0;
        let success;
        let mut counts = vec![0u64; agent.config.n_options];
        loop {
            let net_obs = match norm.as_mut() {
                Some(n) => n.normalize(&obs, false),
                None => obs.clone(),
            };
            let (o, a) = agent.act_greedy(&net_obs, o_prev)?;
            counts[o] += 1;
            let scaled: Vec<f64> = a.iter().map(|v| v * handle.action_scale).collect();
            let result = handle.env.step(&scaled);
            ret += result.reward;
            o_prev = o;
            obs = result.obs;
            if result.done {
                success = !result.truncated;
                break;
            }
        }
        Ok((ret, success, counts))
    };

    let mut results: Vec<Option<(f64, bool, Vec<u64>)>> = vec![None; episodes];
    if threads <= 1 {
        for (ep, slot) in results.iter_mut().enumerate() {
            *slot = Some(episode(ep)?);
        }
    } else {
        let chunk = episodes.div_ceil(threads);
        std::thread::scope(|scope| -> Result<(), LabError> {
            let mut handles = Vec::new();
            for (start, slot_chunk) in (0..).step_by(chunk).zip(results.chunks_mut(chunk)) {
                let episode = &episode;
                handles.push(scope.spawn(move || -> Result<(), LabError> {
                    for (offset, slot) in slot_chunk.iter_mut().enumerate() {
                        *slot = Some(episode(start + offset)?);
                    }
                    Ok(())
                }));
            }
            for h in handles {
                h.join().expect("eval worker panicked")?;
            }
            Ok(())
        })?;
    }
    let mut outcome = EvalOutcome {
        returns: Vec::with_capacity(episodes),
        successes: 0,
        option_counts: vec![0; agent.config.n_options],
    };
    for slot in results {
        let (ret, success, counts) = slot.expect("all episodes ran");
        outcome.returns.push(ret);
        outcome.successes += success as usize;
        for (total, c) in outcome.option_counts.iter_mut().zip(counts) {
            *total += c;
        }
    }
    Ok(outcome)
}

pub fn train_vmoc(config: &ExperimentConfig) -> Result<VmocRunSummary, LabError> {
    let section = config.vmoc.as_ref().expect("validated");
    let dir = prepare_out(config, Command::TrainVmoc)?;
    let env_id = crate::config::parse_env_id(&section.env)?;
    let mut handle = make_env(&env_id)?;
    let spec = handle.env.spec();
    let act_dim = spec.action.agent_action_dim();

    let mut agent_cfg = VmocConfig::new(spec.obs_dim, act_dim);
    agent_cfg.n_options = section.n_options;
    agent_cfg.embed_dim = section.embed_dim;
    agent_cfg.hidden = section.hidden.clone();
    agent_cfg.gamma = section.gamma;
    agent_cfg.learning_rate = section.learning_rate;
    agent_cfg.target_smoothing = section.target_smoothing;
    agent_cfg.alpha_mode = match section.alpha_mode.as_str() {
        "fixed" => AlphaMode::Fixed { alpha_a: section.alpha_a, alpha_o: section.alpha_o },
        _ => AlphaMode::Auto { init_a: section.alpha_a, init_o: section.alpha_o },
    };
    agent_cfg.target_entropy_action =
        section.target_entropy_action.unwrap_or(-(act_dim as f64));
    agent_cfg.target_entropy_option = section
        .target_entropy_option
        .unwrap_or(0.5 * (section.n_options as f64).ln());
    agent_cfg.regularizer_mode = match section.regularizer.as_str() {
        "mutual-info" => RegularizerMode::MutualInfo,
        _ => RegularizerMode::Zero,
    };
    agent_cfg.exploration_noise_std = section.exploration_noise_std;
    let mut agent = VmocAgent::new(agent_cfg, config.seed);

    let mut buffer = ReplayBuffer::new(section.buffer_capacity);
    let mut normalizer =
        if section.normalize_obs { Some(RunningNormalizer::new(spec.obs_dim)) } else { None };
    let mut env_stream = Stream::named(config.seed, "env");
    let mut warmup_stream = Stream::named(config.seed, "warmup");

    let mut csv = CsvBuffer::new(VMOC_HEADER);
    let mut last = hitmdp_core::vmoc::TrainMetrics {
        loss_qa: 0.0,
        loss_qo: 0.0,
        loss_pa: 0.0,
        loss_po: 0.0,
        alpha_a: agent.alpha_a(),
        alpha_o: agent.alpha_o(),
        ent_a: 0.0,
        ent_o: 0.0,
    };
    let mut eval_idx = 0usize;
    let mut eval_history: Vec<EvalOutcome> = Vec::new();
    let mut ent_rows: Vec<f64> = Vec::new();

    let record_eval = |step: usize,
                           agent: &VmocAgent,
                           normalizer: Option<&RunningNormalizer>,
                           eval_idx: &mut usize,
                           csv: &mut CsvBuffer,
                           history: &mut Vec<EvalOutcome>,
                           ent_rows: &mut Vec<f64>,
                           last: &hitmdp_core::vmoc::TrainMetrics|
     -> Result<(), LabError> {
        let outcome = run_eval(
            agent,
            &env_id,
            normalizer,
            config.seed,
            *eval_idx,
            section.eval_episodes,
            config.threads,
        )?;
        *eval_idx += 1;
        let n = outcome.returns.len() as f64;
        let mean = outcome.returns.iter().sum::<f64>() / n;
        let var = outcome.returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        csv.push_f64_row(&[
            step as f64,
            mean,
            var.sqrt(),
            last.loss_qa,
            last.loss_qo,
            last.loss_pa,
            last.loss_po,
            last.alpha_a,
            last.alpha_o,
            last.ent_a,
            last.ent_o,
        ]);
        ent_rows.push(last.ent_o);
        history.push(outcome);
        Ok(())
    };

    // Untrained baseline evaluation.
    record_eval(0, &agent, normalizer.as_ref(), &mut eval_idx, &mut csv, &mut eval_history, &mut ent_rows, &last)?;

    let mut obs = handle.env.reset(&mut env_stream);
    let mut o_prev = 0usize;
    for step in 1..=section.total_steps {
        let net_obs = match normalizer.as_mut() {
            Some(n) => n.normalize(&obs, true),
            None => obs.clone(),
        };
        let (o, a) = if step <= section.warmup_steps {
            let o = warmup_stream.below(section.n_options);
            let a: Vec<f64> = (0..act_dim).map(|_| warmup_stream.uniform_in(-1.0, 1.0)).collect();
            (o, a)
        } else {
            agent.act(&net_obs, o_prev, ActMode::Explore)?
        };
        let scaled: Vec<f64> = a.iter().map(|v| v * handle.action_scale).collect();
        let result = handle.env.step(&scaled);
        let net_obs_next = match normalizer.as_mut() {
            Some(n) => n.normalize(&result.obs, false),
            None => result.obs.clone(),
        };
        buffer.push(Transition {
            obs: net_obs,
            option_prev: o_prev,
            action: a,
            reward: result.reward,
            obs_next: net_obs_next,
            option: o,
            done: result.done && !result.truncated,
        });
        if result.done {
            obs = handle.env.reset(&mut env_stream);
            o_prev = 0;
        } else {
            obs = result.obs;
            o_prev = o;
        }
        if step > section.warmup_steps
            && step % section.update_every == 0
            && buffer.len() >= section.batch_size
        {
            last = agent.train_step(&buffer, section.batch_size)?;
        }
        if step % section.eval_interval == 0 || step == section.total_steps {
            record_eval(
                step,
                &agent,
                normalizer.as_ref(),
                &mut eval_idx,
                &mut csv,
                &mut eval_history,
                &mut ent_rows,
                &last,
            )?;
            if step == section.total_steps {
                break;
            }
        }
    }

    csv.write(&dir.join("metrics.csv"))?;
    // Checkpoints: the online networks plus the embedding matrix.
    let ckpt = dir.join("checkpoint");
    std::fs::create_dir_all(&ckpt)?;
    formats::save_net(&ckpt, "q_action_1", &agent.q_action[0])?;
    formats::save_net(&ckpt, "q_action_2", &agent.q_action[1])?;
    formats::save_net(&ckpt, "q_option_1", &agent.q_option[0])?;
    formats::save_net(&ckpt, "q_option_2", &agent.q_option[1])?;
    formats::save_net(&ckpt, "policy_action", &agent.policy_action)?;
    formats::save_net(&ckpt, "policy_option", &agent.policy_option)?;
    formats::save_embeddings(&ckpt, "option_emb", &agent.embeddings)?;

    let first = eval_history.first().expect("at least the baseline eval");
    let final_eval = eval_history.last().expect("final eval");
    let mut initial_returns = first.returns.clone();
    let mut final_returns = final_eval.returns.clone();
    let best_return_median = eval_history
        .iter()
        .map(|e| {
            let mut r = e.returns.clone();
            median(&mut r)
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let usage: Vec<f64> = {
        let total: u64 = final_eval.option_counts.iter().sum();
        final_eval
            .option_counts
            .iter()
            .map(|&c| if total > 0 { c as f64 / total as f64 } else { 0.0 })
            .collect()
    };
    let quarter = (ent_rows.len() / 4).max(1);
    let target_h = agent.config.target_entropy_option;
    let dev = |rows: &[f64]| rows.iter().map(|e| (e - target_h).abs()).sum::<f64>() / rows.len() as f64;
    let summary = VmocRunSummary {
        env: section.env.clone(),
        seed: config.seed,
        total_steps: section.total_steps,
        initial_return_mean: first.returns.iter().sum::<f64>() / first.returns.len() as f64,
        initial_return_median: median(&mut initial_returns),
        final_return_mean: final_eval.returns.iter().sum::<f64>()
            / final_eval.returns.len() as f64,
        final_return_median: median(&mut final_returns),
        best_return_median,
        final_success_rate: final_eval.successes as f64 / final_eval.returns.len() as f64,
        option_usage_entropy: hitmdp_core::math::entropy(&usage),
        target_entropy_option: target_h,
        ent_o_deviation_first_quarter: dev(&ent_rows[..quarter]),
        ent_o_deviation_last_quarter: dev(&ent_rows[ent_rows.len() - quarter..]),
    };
    write_summary(&dir, &summary)?;
    log::info!(
        "train-vmoc done: median return {} -> {}",
        fmt_f64(summary.initial_return_median),
        fmt_f64(summary.final_return_median)
    );
    Ok(summary)
}

// ---------------------------------------------------------------------
// Tabular solve
// ---------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TabularRunSummary {
    pub env: String,
    pub n_options: usize,
    pub improvement_rounds: usize,
    pub final_elbo: f64,
    pub elbo_monotone: bool,
}

pub fn solve_tabular(config: &ExperimentConfig) -> Result<TabularRunSummary, LabError> {
    let section = config.tabular.as_ref().expect("validated");
    let dir = prepare_out(config, Command::SolveTabular)?;
    let env_id = crate::config::parse_env_id(&section.env)?;
    let mdp: FiniteHitMdp = match env_id {
        EnvId::Chain(n) => ChainEnv::new(n)?.to_hitmdp(section.n_options, section.discount),
        EnvId::FourRooms => FourRoomsEnv::new().to_hitmdp(section.n_options, section.discount),
        EnvId::Pendulum => {
            return Err(LabError::Config(
                "solve-tabular needs a finite environment (chain:N or four_rooms)".into(),
            ))
        }
    };
    let temps = TemperaturePair::new(section.alpha_a, section.alpha_o)?;
    let init = TabularPolicies::uniform(mdp.n_states, mdp.n_options, mdp.n_actions);
    let result = soft_option_policy_iteration(&mdp, &init, &temps, section.tol)?;

    let export = formats::SolverExport::new(&result.q, result.elbo_trace.clone());
    std::fs::write(dir.join("q_tables.json"), serde_json::to_string_pretty(&export)?)?;
    let mut csv = CsvBuffer::new("round,elbo");
    for (round, elbo) in result.elbo_trace.iter().enumerate() {
        csv.push_row(&[round.to_string(), fmt_f64(*elbo)]);
    }
    csv.write(&dir.join("metrics.csv"))?;
    let monotone = result.elbo_trace.windows(2).all(|w| w[1] >= w[0] - 1e-10);
    let summary = TabularRunSummary {
        env: section.env.clone(),
        n_options: section.n_options,
        improvement_rounds: result.elbo_trace.len() - 1,
        final_elbo: *result.elbo_trace.last().expect("non-empty trace"),
        elbo_monotone: monotone,
    };
    write_summary(&dir, &summary)?;
    log::info!(
        "solve-tabular done: {} rounds, final objective {}",
        summary.improvement_rounds,
        fmt_f64(summary.final_elbo)
    );
    Ok(summary)
}

// ---------------------------------------------------------------------
// Homomorphism check
// ---------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HomomorphismRunSummary {
    pub fixture: String,
    pub passed: bool,
    pub violations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimal_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_policy_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elbo_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conditional_entropy_term: Option<f64>,
}

fn random_abstract_policy(stream: &mut Stream, mdp: &FiniteHitMdp) -> TabularPolicies {
    let (s, k, a) = (mdp.n_states, mdp.n_options, mdp.n_actions);
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
    TabularPolicies::new(s, k, a, option_policy, action_policy).expect("normalized rows")
}

pub fn check_homomorphism(config: &ExperimentConfig) -> Result<HomomorphismRunSummary, LabError> {
    let section = config.homomorphism.as_ref().expect("validated");
    let dir = prepare_out(config, Command::CheckHomomorphism)?;
    let h: FiniteHomomorphism = if section.fixture == "mirror8to4" {
        fixtures::mirror_8_to_4()
    } else {
        let path = section.fixture.strip_prefix("file:").expect("validated");
        let doc: formats::HomomorphismDoc =
            serde_json::from_str(&std::fs::read_to_string(path)?)?;
        doc.into_homomorphism()?
    };
    // Also leave the fixture itself on disk for inspection and reuse.
    std::fs::write(
        dir.join("homomorphism.json"),
        serde_json::to_string_pretty(&formats::HomomorphismDoc::from_homomorphism(&h))?,
    )?;
    let report = validate_homomorphism(&h, section.tol);
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "passed": report.passed,
            "violations": formats::report_to_docs(&report),
        }))?,
    )?;

    let mut summary = HomomorphismRunSummary {
        fixture: section.fixture.clone(),
        passed: report.passed,
        violations: report.violations.len(),
        optimal_gap: None,
        fixed_policy_gap: None,
        elbo_gap: None,
        conditional_entropy_term: None,
    };
    if report.passed && section.check_values {
        summary.optimal_gap = Some(value_equivalence_gap(&h, &GapMode::Optimal)?);
        let mut stream = Stream::named(config.seed, "abstract-policy");
        let pol = random_abstract_policy(&mut stream, &h.abstract_mdp);
        summary.fixed_policy_gap =
            Some(value_equivalence_gap(&h, &GapMode::FixedPolicy(pol.clone()))?);
        let lifted = lift_policy(&h, &pol, &Split::UniformOverPreimage)?;
        let gap = elbo_gap(&h, &pol, &lifted, section.elbo_horizon)?;
        summary.elbo_gap = Some(gap.gap);
        summary.conditional_entropy_term = Some(gap.conditional_entropy_term);
    }
    let mut csv = CsvBuffer::new("metric,value");
    csv.push_row(&["validation_pass".into(), (summary.passed as u8).to_string()]);
    csv.push_row(&["violations".into(), summary.violations.to_string()]);
    if let Some(v) = summary.optimal_gap {
        csv.push_row(&["optimal_gap".into(), fmt_f64(v)]);
    }
    if let Some(v) = summary.fixed_policy_gap {
        csv.push_row(&["fixed_policy_gap".into(), fmt_f64(v)]);
    }
    if let (Some(g), Some(c)) = (summary.elbo_gap, summary.conditional_entropy_term) {
        csv.push_row(&["elbo_gap".into(), fmt_f64(g)]);
        csv.push_row(&["conditional_entropy_term".into(), fmt_f64(c)]);
        csv.push_row(&["gap_minus_entropy_term".into(), fmt_f64(g - c)]);
    }
    csv.write(&dir.join("metrics.csv"))?;
    write_summary(&dir, &summary)?;
    log::info!(
        "check-homomorphism done: {}",
        if summary.passed { "pass" } else { "fail" }
    );
    Ok(summary)
}

// ---------------------------------------------------------------------
// Cold start
// ---------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ColdstartRunSummary {
    pub task: String,
    pub epochs: usize,
    pub initial_elbo: f64,
    pub final_elbo: f64,
    pub train_exact_match: f64,
    pub holdout_exact_match: f64,
}

pub fn run_coldstart(config: &ExperimentConfig) -> Result<ColdstartRunSummary, LabError> {
    let section = config.coldstart.as_ref().expect("validated");
    let dir = prepare_out(config, Command::Coldstart)?;
    let task = Task::parse(&section.task).expect("validated");
    let mode = TrainMode::parse(&section.mode).expect("validated");
    let all = make_synthetic_corpus(
        task,
        section.train_samples + section.holdout_samples,
        config.seed,
    )?;
    let (train, holdout) = all.split_at(section.train_samples);
    formats::save_corpus(&dir.join("corpus.tsv"), train)?;
    if !holdout.is_empty() {
        formats::save_corpus(&dir.join("holdout.tsv"), holdout)?;
    }

    let dims = LatentDims {
        vocab: hitmdp_core::coldstart::vocab::SIZE,
        token_dim: section.token_dim,
        k: section.k,
        l: section.l,
        embed_dim: section.embed_dim,
    };
    let mut model = LatentReasoningModel::new(
        dims,
        section.beta,
        section.gumbel_temperature,
        &mut Stream::named(config.seed, "coldstart-init"),
    );
    let mean_exact = |model: &LatentReasoningModel| -> Result<f64, LabError> {
        let mut total = 0.0;
        for s in train {
            total += elbo_sft_exact(model, s)?.elbo;
        }
        Ok(total / train.len() as f64)
    };
    let initial_elbo = mean_exact(&model)?;

    let mut trainer = Trainer::new(&model, section.learning_rate);
    let mut gumbel_stream = Stream::named(config.seed, "coldstart-gumbel");
    let mut csv = CsvBuffer::new("epoch,elbo,recon_cot,recon_ans,kl,holdout_exact_match");
    let mut last_em = f64::NAN;
    for epoch in 0..section.epochs {
        let metrics = trainer.train_epoch(&mut model, train, mode, epoch, &mut gumbel_stream)?;
        if (epoch + 1) % section.eval_interval == 0 || epoch + 1 == section.epochs {
            let mut eval_stream = Stream::named(config.seed, &format!("coldstart-eval-{epoch}"));
            last_em = if holdout.is_empty() {
                0.0
            } else {
                answer_exact_match(&model, holdout, &mut eval_stream)
            };
        }
        csv.push_row(&[
            epoch.to_string(),
            fmt_f64(metrics.mean_elbo),
            fmt_f64(metrics.mean_recon_cot),
            fmt_f64(metrics.mean_recon_ans),
            fmt_f64(metrics.mean_kl),
            if last_em.is_nan() { String::new() } else { fmt_f64(last_em) },
        ]);
    }
    csv.write(&dir.join("metrics.csv"))?;
    formats::save_latent_model(&dir, "model", &model)?;

    let final_elbo = mean_exact(&model)?;
    let mut train_stream = Stream::named(config.seed, "coldstart-train-eval");
    let mut holdout_stream = Stream::named(config.seed, "coldstart-holdout-eval");
    let summary = ColdstartRunSummary {
        task: section.task.clone(),
        epochs: section.epochs,
        initial_elbo,
        final_elbo,
        train_exact_match: answer_exact_match(&model, train, &mut train_stream),
        holdout_exact_match: if holdout.is_empty() {
            0.0
        } else {
            answer_exact_match(&model, holdout, &mut holdout_stream)
        },
    };
    write_summary(&dir, &summary)?;
    log::info!(
        "coldstart done: objective {} -> {}, holdout exact match {}",
        fmt_f64(summary.initial_elbo),
        fmt_f64(summary.final_elbo),
        fmt_f64(summary.holdout_exact_match)
    );
    Ok(summary)
}

// ---------------------------------------------------------------------
// Replay metrics
// ---------------------------------------------------------------------

pub fn replay_metrics(config: &ExperimentConfig) -> Result<crate::metrics::ReplaySummary, LabError> {
    let section = config.replay.as_ref().expect("validated");
    let text = std::fs::read_to_string(&section.metrics_path)?;
    let rows = crate::metrics::parse_vmoc_csv(&text)?;
    let summary = crate::metrics::summarize(&rows);
    print!("{}", crate::metrics::render_summary(&summary));
    println!("{}", serde_json::to_string(&summary)?);
    if config.out.is_some() {
        let dir = prepare_out(config, Command::ReplayMetrics)?;
        write_summary(&dir, &summary)?;
    }
    Ok(summary)
}
