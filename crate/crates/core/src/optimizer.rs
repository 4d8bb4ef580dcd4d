//! Group-relative advantages, the power-scaled clipped surrogate loss with
//! analytic gradients, the reward-shaping baseline, and the train-iteration
//! state machine.
//!
//! Per trajectory the loss multiplies the clipped token sum by
//! `W = exp(beta * clamp(log w, -c, c))`: beta = 1 recovers exact importance
//! sampling, beta = 0 removes the correction entirely (advantage-level
//! shaping), and intermediate beta tempers it. Token terms use the
//! clip-higher bounds `(1 - eps_low, 1 + eps_high)`. The batch loss is the
//! per-token mean within each trajectory, then the mean over trajectories.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guidance::{build_guidance_tables, GuidanceTables};
use crate::hmm::{fit_baum_welch, FitReport, Hmm, HmmError};
use crate::lexicon::KeyphraseConstraint;
use crate::policy::{ContextPolicy, PolicyError, PolicyGradient};
use crate::rng::{derive_rng, stream};
use crate::rollout::{
    sample_constraint, sample_trajectory, sample_unguided_trajectory, GuidedTrajectory,
    DEFAULT_LOG_Z_FLOOR,
};
use crate::toyworld::{evaluate_reward, generate_prompt, sample_policy_corpus, ToyTask};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite loss (check w-clamp configuration and rewards)")]
    NonFiniteLoss,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Hmm(#[from] HmmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    CtrlR,
    Unguided,
    RewardShaping,
}

/// Training hyperparameters; defaults follow the desk-scale setup with
/// clip-higher bounds 0.20 / 0.28 and beta = 0.2.
///
/// The loss is a per-token mean over a per-trajectory mean over a group
/// mean, so one gradient step moves a single logit by roughly
/// `lr * |A| * W / (groups * group_size * horizon)`; the default learning
/// rate carries those units (0.05-style rates stall at this batch scale).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub beta: f64,
    pub eps_low: f64,
    pub eps_high: f64,
    pub group_size: usize,
    pub horizon: usize,
    pub iterations: usize,
    pub prompts_per_batch: usize,
    pub grad_steps_per_sync: usize,
    pub learning_rate: f64,
    pub baseline: BaselineMode,
    pub dynamic_group_filter: bool,
    pub log_w_clamp: f64,
    pub log_z_floor: f64,
    pub ctx_order: usize,
    pub table_size: usize,
    pub hmm_states: usize,
    pub corpus_sequences: usize,
    pub corpus_len: usize,
    pub em_max_iters: usize,
    pub em_tol: f64,
    pub eval_rollouts: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            beta: 0.2,
            eps_low: 0.20,
            eps_high: 0.28,
            group_size: 10,
            horizon: 8,
            iterations: 120,
            prompts_per_batch: 6,
            grad_steps_per_sync: 1,
            learning_rate: 4000.0,
            baseline: BaselineMode::CtrlR,
            dynamic_group_filter: true,
            log_w_clamp: 60.0,
            log_z_floor: DEFAULT_LOG_Z_FLOOR,
            ctx_order: 4,
            table_size: 4096,
            hmm_states: 6,
            corpus_sequences: 500,
            corpus_len: 64,
            em_max_iters: 200,
            em_tol: 1e-6,
            eval_rollouts: 200,
            checkpoint_every: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(format!("beta {} outside [0, 1]", self.beta));
        }
        if self.eps_low <= 0.0 || self.eps_high <= 0.0 {
            return Err("clip bounds must be positive".into());
        }
        if self.group_size < 2 {
            return Err("group size must be >= 2".into());
        }
        if self.grad_steps_per_sync == 0 || self.grad_steps_per_sync > 4 {
            return Err("grad steps per sync must be in 1..=4".into());
        }
        if self.horizon == 0 || self.iterations == 0 || self.prompts_per_batch == 0 {
            return Err("horizon, iterations and prompts per batch must be positive".into());
        }
        Ok(())
    }
}

/// One prompt's group of trajectories with standardized advantages.
#[derive(Debug, Clone)]
pub struct GroupBatch {
    pub prompt_id: u64,
    pub trajectories: Vec<GuidedTrajectory>,
    pub advantages: Vec<f64>,
}

/// Group-relative advantages: `(R_i - mean) / std` with the population
/// standard deviation, hard zero when the spread vanishes. The same value is
/// applied to every token of trajectory i.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    assert!(rewards.len() >= 2, "group size must be >= 2");
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 1e-8 {
        rewards.iter().map(|r| (r - mean) / std).collect()
    } else {
        vec![0.0; rewards.len()]
    }
}

/// Reward shaping baseline: `R' = R + F`, `F = 1` iff the answer is correct
/// (`R > 0`) and the target pattern matched.
pub fn shaped_reward(base: f64, pattern_matched: bool) -> f64 {
    let bonus = if base > 0.0 && pattern_matched { 1.0 } else { 0.0 };
    base + bonus
}

/// Trajectory multiplier `(w)^beta`, computed as
/// `exp(beta * clamp(log w, -c, c))`. The clamp keeps extreme weights from
/// collapsing to exact zero (or overflowing) while preserving their order.
pub fn power_scaled_weight(log_w: f64, beta: f64, log_w_clamp: f64) -> f64 {
    (beta * log_w.clamp(-log_w_clamp, log_w_clamp)).exp()
}

/// Weight-regime boundaries from the rollout analysis: noisy below 1e-6,
/// exploratory up to 1e-1, on-policy above.
pub const REGIME_LOW: f64 = 1e-6;
pub const REGIME_HIGH: f64 = 1e-1;

/// Buckets a trajectory log-weight into the three regimes (0 = noisy,
/// 1 = exploratory, 2 = on-policy).
pub fn weight_regime(log_w: f64) -> usize {
    if log_w < REGIME_LOW.ln() {
        0
    } else if log_w < REGIME_HIGH.ln() {
        1
    } else {
        2
    }
}

fn accumulate_batch(
    batch: &GroupBatch,
    policy: &ContextPolicy,
    proximal: &ContextPolicy,
    config: &TrainConfig,
    scale: f64,
    grad: &mut PolicyGradient,
) -> f64 {
    let n_traj = batch.trajectories.len() as f64;
    let mut batch_acc = 0.0f64;
    for (traj, &advantage) in batch.trajectories.iter().zip(batch.advantages.iter()) {
        if advantage == 0.0 || traj.is_empty() {
            continue; // exact zero contribution
        }
        let w_mult = power_scaled_weight(traj.log_w_total, config.beta, config.log_w_clamp);
        let n = traj.len() as f64;
        let mut ctx: Vec<u32> = traj.prompt.clone();
        let mut term_sum = 0.0f64;
        for (t, &token) in traj.tokens.iter().enumerate() {
            debug_assert!(
                (proximal.next_token_log_probs(&ctx)[token as usize] - traj.log_pi_old[t]).abs()
                    < 1e-12,
                "proximal snapshot does not reproduce recorded log pi_old"
            );
            let log_row = policy.next_token_log_probs(&ctx);
            let ratio = (log_row[token as usize] - traj.log_pi_old[t]).exp();
            let unclipped = ratio * advantage;
            let clipped = ratio.clamp(1.0 - config.eps_low, 1.0 + config.eps_high) * advantage;
            term_sum += unclipped.min(clipped);
            if unclipped <= clipped {
                // unclipped branch active: gradient flows through the ratio
                let cid = policy.context_id(&ctx);
                let probs: Vec<f64> = log_row.iter().map(|&l| l.exp()).collect();
                let coeff = -scale * w_mult * advantage * ratio / (n_traj * n);
                grad.accumulate_log_prob_grad(cid, &probs, token, coeff);
            }
            ctx.push(token);
        }
        batch_acc += -(w_mult * (term_sum / n));
    }
    batch_acc / n_traj
}

/// Loss and analytic gradient of the power-scaled clipped surrogate for one
/// group batch.
///
/// Token ratios use the recorded behavior-side `log pi_old`; the proximal
/// snapshot parameter is cross-checked against those records in debug
/// builds. Gradient gates follow the standard clipped-surrogate rule: zero
/// where the clipped branch is active and binding.
pub fn ctrlr_loss_and_grad(
    batch: &GroupBatch,
    policy: &ContextPolicy,
    proximal: &ContextPolicy,
    config: &TrainConfig,
) -> Result<(f64, PolicyGradient), OptimError> {
    let mut grad = PolicyGradient::new();
    let loss = accumulate_batch(batch, policy, proximal, config, 1.0, &mut grad);
    if !loss.is_finite() {
        return Err(OptimError::NonFiniteLoss);
    }
    Ok((loss, grad))
}

/// Mean loss and summed (scaled) gradient over all groups of an iteration.
pub fn iteration_loss_and_grad(
    batches: &[GroupBatch],
    policy: &ContextPolicy,
    proximal: &ContextPolicy,
    config: &TrainConfig,
) -> Result<(f64, PolicyGradient), OptimError> {
    assert!(!batches.is_empty());
    let b = batches.len() as f64;
    let mut grad = PolicyGradient::new();
    let mut total = 0.0;
    for batch in batches {
        total += accumulate_batch(batch, policy, proximal, config, 1.0 / b, &mut grad);
    }
    let loss = total / b;
    if !loss.is_finite() {
        return Err(OptimError::NonFiniteLoss);
    }
    Ok((loss, grad))
}

/// A constraint with its compiled DFA and, when guided, its cached guidance
/// tables (rebuilt only when the HMM is refit).
#[derive(Clone)]
pub struct ConstraintRuntime {
    pub constraint: KeyphraseConstraint,
    pub dfa: Arc<crate::lexicon::KeyphraseDfa>,
    pub tables: Option<Arc<GuidanceTables>>,
}

/// Mutable training state across iterations.
pub struct TrainState {
    pub config: TrainConfig,
    pub task: ToyTask,
    pub constraints: Vec<ConstraintRuntime>,
    /// target policy (pi_theta)
    pub policy: ContextPolicy,
    /// proximal snapshot (pi_old), synchronized after each iteration
    pub proximal: ContextPolicy,
    pub iteration: u64,
}

impl TrainState {
    /// Wires up constraints and guidance tables. `hmm` is required for the
    /// guided baseline and ignored otherwise.
    pub fn new(
        config: TrainConfig,
        task: ToyTask,
        constraints: Vec<KeyphraseConstraint>,
        initial_policy: ContextPolicy,
        hmm: Option<Arc<Hmm>>,
    ) -> Result<Self, String> {
        config.validate()?;
        if constraints.is_empty() {
            return Err("constraint set is empty".into());
        }
        let guided = config.baseline == BaselineMode::CtrlR;
        if guided && hmm.is_none() {
            return Err("guided training requires a distilled HMM".into());
        }
        let runtimes = constraints
            .into_iter()
            .map(|c| {
                let dfa = Arc::new(
                    crate::lexicon::build_keyphrase_dfa(&c, task.vocab())
                        .map_err(|e| format!("constraint {}: {e}", c.id))?,
                );
                let tables = if guided {
                    Some(Arc::new(build_guidance_tables(
                        hmm.clone().unwrap(),
                        dfa.clone(),
                        config.horizon,
                    )))
                } else {
                    None
                };
                Ok(ConstraintRuntime { constraint: c, dfa, tables })
            })
            .collect::<Result<Vec<_>, String>>()?;
        let proximal = initial_policy.clone();
        Ok(Self { config, task, constraints: runtimes, policy: initial_policy, proximal, iteration: 0 })
    }
}

/// Per-constraint satisfaction tally.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct SatisfactionStat {
    pub satisfied: usize,
    pub total: usize,
}

impl SatisfactionStat {
    pub fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.satisfied as f64 / self.total as f64)
    }
}

/// Everything one training iteration reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub mean_reward: f64,
    pub eval_reward: f64,
    pub losses: Vec<f64>,
    pub fallback_rate: f64,
    /// trajectory counts with w < 1e-6, 1e-6 <= w < 1e-1, w >= 1e-1
    pub regime_counts: [usize; 3],
    pub satisfaction: BTreeMap<String, SatisfactionStat>,
}

const MAX_RESAMPLE_ROUNDS: usize = 3;

/// Runs one full iteration: rollouts from the proximal snapshot, rewards,
/// advantages (optionally resampling zero-variance groups), gradient steps,
/// proximal sync, metrics.
///
/// Also returns the iteration's trajectories for dumping.
pub fn run_iteration(
    state: &mut TrainState,
) -> Result<(IterationMetrics, Vec<GroupBatch>), OptimError> {
    let cfg = state.config.clone();
    let iter = state.iteration;
    let eos = state.task.vocab().eos_id();
    let n_constraints = state.constraints.len();
    let mut batches: Vec<GroupBatch> = Vec::with_capacity(cfg.prompts_per_batch);

    for slot in 0..cfg.prompts_per_batch as u64 {
        let mut prompt_rng = derive_rng(cfg.seed, &[stream::PROMPT, iter, slot]);
        let (prompt, prompt_id) = generate_prompt(&state.task, &mut prompt_rng);
        let mut c_rng = derive_rng(cfg.seed, &[stream::CONSTRAINT, iter, slot]);
        let c_idx = sample_constraint(&state.constraints, &mut c_rng);
        debug_assert!(c_idx < n_constraints);
        let runtime = &state.constraints[c_idx];
        let cid = runtime.constraint.id.clone();

        let mut chosen: Option<(Vec<GuidedTrajectory>, Vec<f64>)> = None;
        for attempt in 0..=MAX_RESAMPLE_ROUNDS as u64 {
            let mut trajectories: Vec<GuidedTrajectory> = Vec::with_capacity(cfg.group_size);
            for g in 0..cfg.group_size as u64 {
                let mut rng =
                    derive_rng(cfg.seed, &[stream::TRAJECTORY, iter, slot, g, attempt]);
                let mut traj = match cfg.baseline {
                    BaselineMode::CtrlR => sample_trajectory(
                        &state.proximal,
                        runtime.tables.as_ref().expect("guided baseline has tables"),
                        &cid,
                        &prompt,
                        prompt_id,
                        cfg.log_z_floor,
                        &mut rng,
                    ),
                    BaselineMode::Unguided | BaselineMode::RewardShaping => {
                        sample_unguided_trajectory(
                            &state.proximal,
                            cfg.horizon,
                            eos,
                            Some(&runtime.dfa),
                            &cid,
                            &prompt,
                            prompt_id,
                            &mut rng,
                        )
                    }
                };
                traj.iteration = iter;
                traj.reward = evaluate_reward(&state.task, &prompt, &traj.tokens);
                trajectories.push(traj);
            }
            let rewards: Vec<f64> = trajectories
                .iter()
                .map(|t| match cfg.baseline {
                    BaselineMode::RewardShaping => shaped_reward(t.reward, t.satisfied()),
                    _ => t.reward,
                })
                .collect();
            let zero_variance = rewards.windows(2).all(|w| w[0] == w[1]);
            let resample =
                cfg.dynamic_group_filter && zero_variance && (attempt as usize) < MAX_RESAMPLE_ROUNDS;
            if !resample {
                chosen = Some((trajectories, rewards));
                break;
            }
        }
        let (trajectories, rewards) = chosen.expect("group selection always terminates");
        let advantages = group_advantages(&rewards);
        batches.push(GroupBatch { prompt_id, trajectories, advantages });
    }

    // metrics over the sampled batches
    let mut reward_sum = 0.0;
    let mut traj_count = 0usize;
    let mut fallback_count = 0usize;
    let mut regime_counts = [0usize; 3];
    let mut satisfaction: BTreeMap<String, SatisfactionStat> = state
        .constraints
        .iter()
        .map(|r| (r.constraint.id.clone(), SatisfactionStat::default()))
        .collect();
    for batch in &batches {
        for t in &batch.trajectories {
            reward_sum += t.reward;
            traj_count += 1;
            fallback_count += t.fallback as usize;
            regime_counts[weight_regime(t.log_w_total)] += 1;
            let stat = satisfaction.entry(t.constraint_id.clone()).or_default();
            stat.total += 1;
            stat.satisfied += t.satisfied() as usize;
        }
    }

    let mut losses = Vec::with_capacity(cfg.grad_steps_per_sync);
    for _ in 0..cfg.grad_steps_per_sync {
        let (loss, grad) =
            iteration_loss_and_grad(&batches, &state.policy, &state.proximal, &cfg)?;
        state.policy.apply_update(&grad, cfg.learning_rate)?;
        losses.push(loss);
    }
    state.proximal = state.policy.clone();
    state.iteration += 1;

    let eval_reward = evaluate_policy(
        &state.policy,
        &state.task,
        cfg.horizon,
        cfg.eval_rollouts,
        cfg.seed,
        iter,
    );

    let metrics = IterationMetrics {
        iteration: iter,
        mean_reward: reward_sum / traj_count.max(1) as f64,
        eval_reward,
        losses,
        fallback_rate: fallback_count as f64 / traj_count.max(1) as f64,
        regime_counts,
        satisfaction,
    };
    Ok((metrics, batches))
}

/// Mean base reward of unguided rollouts on a fixed eval prompt set;
/// completions are re-drawn per iteration salt.
pub fn evaluate_policy(
    policy: &ContextPolicy,
    task: &ToyTask,
    horizon: usize,
    rollouts: usize,
    seed: u64,
    iteration_salt: u64,
) -> f64 {
    if rollouts == 0 {
        return 0.0;
    }
    let eos = task.vocab().eos_id();
    let mut total = 0.0;
    for j in 0..rollouts as u64 {
        let mut prompt_rng = derive_rng(seed, &[stream::EVAL, 0, j]);
        let (prompt, _) = generate_prompt(task, &mut prompt_rng);
        let mut rng = derive_rng(seed, &[stream::EVAL, 1, iteration_salt, j]);
        let traj =
            sample_unguided_trajectory(policy, horizon, eos, None, "", &prompt, j, &mut rng);
        total += evaluate_reward(task, &prompt, &traj.tokens);
    }
    total / rollouts as f64
}

/// Distills the guidance HMM from the current policy: samples the corpus on
/// the CORPUS stream and runs EM from the EM_INIT stream.
pub fn distill_guidance_hmm(
    policy: &ContextPolicy,
    task: &ToyTask,
    config: &TrainConfig,
) -> Result<FitReport, HmmError> {
    let mut corpus_rng = derive_rng(config.seed, &[stream::CORPUS]);
    let corpus = sample_policy_corpus(
        policy,
        task,
        config.corpus_sequences,
        config.corpus_len,
        &mut corpus_rng,
    );
    let mut em_rng = derive_rng(config.seed, &[stream::EM_INIT]);
    fit_baum_welch(
        &corpus,
        config.hmm_states,
        task.vocab().size(),
        &mut em_rng,
        config.em_max_iters,
        config.em_tol,
    )
}
