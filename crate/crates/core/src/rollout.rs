//! The guided behavior policy: per-step composition of the proximal policy
//! with the guidance marginal, its normalizer, exact per-token importance
//! weights, and trajectory sampling.
//!
//! At every step `mu(v) = pi_old(v) * gamma(v) / Z` with
//! `Z = sum_v pi_old(v) * gamma(v)`, and the sampled token's weight is
//! `w_t = Z / gamma(x_t)`, so `mu(x_t) * w_t = pi_old(x_t)` holds in exact
//! log arithmetic. Once the constraint is satisfied the behavior policy
//! collapses to `pi_old` and every subsequent `log w_t` is exactly zero; the
//! same collapse implements the infeasibility fallback, which keeps the
//! sampled measure well defined (the behavior policy is whatever the tokens
//! were actually drawn from).

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guidance::{advance_session, gamma_all_tokens, GuidanceSession, GuidanceTables};
use crate::lexicon::KeyphraseDfa;
use crate::math::{log_sum_exp, sample_categorical_from_log};
use crate::policy::ContextPolicy;

/// Default floor on `log Z_t` (e^-40) below which a step is declared
/// infeasible and the trajectory falls back to unguided sampling.
pub const DEFAULT_LOG_Z_FLOOR: f64 = -40.0;

#[derive(Debug, Error, PartialEq)]
pub enum RolloutError {
    #[error("feasible guided mass vanished (log Z = {log_z})")]
    InfeasibleStep { log_z: f64 },
}

/// One step of the guided behavior policy over the full vocabulary.
#[derive(Debug, Clone)]
pub struct GuidedStepDistribution {
    /// log mu(v); exponentials sum to 1
    pub log_mu: Vec<f64>,
    /// log of the normalizer Z_t
    pub log_z: f64,
    /// log (Z_t / gamma(v)); +inf where gamma(v) = 0 (those tokens are
    /// hard-masked and never sampled)
    pub log_w_per_token: Vec<f64>,
}

/// Composes the proximal policy with guidance values for one step.
pub fn guided_next_distribution(
    log_pi_old: &[f64],
    log_gamma: &[f64],
    log_z_floor: f64,
) -> Result<GuidedStepDistribution, RolloutError> {
    assert_eq!(log_pi_old.len(), log_gamma.len());
    let log_unnorm: Vec<f64> =
        log_pi_old.iter().zip(log_gamma.iter()).map(|(&p, &g)| p + g).collect();
    let log_z = log_sum_exp(&log_unnorm);
    if log_z < log_z_floor {
        return Err(RolloutError::InfeasibleStep { log_z });
    }
    let log_mu = log_unnorm.iter().map(|&x| x - log_z).collect();
    let log_w_per_token = log_gamma.iter().map(|&g| log_z - g).collect();
    Ok(GuidedStepDistribution { log_mu, log_z, log_w_per_token })
}

/// Uniform draw of a constraint index; deterministic per RNG stream.
pub fn sample_constraint<T, R: Rng>(constraints: &[T], rng: &mut R) -> usize {
    assert!(!constraints.is_empty(), "constraint set is empty");
    rng.gen_range(0..constraints.len())
}

/// A sampled trajectory with full importance bookkeeping.
///
/// `acceptance_step` is the index of the first completion token sampled with
/// the constraint already satisfied: 0 when the prompt satisfies it,
/// `i + 1` when token `i` completed a phrase (which may equal the completion
/// length when satisfaction arrives on the final token). Every step at or
/// after it is sampled from the collapsed policy and carries `log w_t = 0`
/// exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuidedTrajectory {
    pub constraint_id: String,
    pub prompt_id: u64,
    pub prompt: Vec<u32>,
    pub tokens: Vec<u32>,
    pub log_pi_old: Vec<f64>,
    pub log_mu: Vec<f64>,
    pub log_w: Vec<f64>,
    pub acceptance_step: Option<usize>,
    pub log_w_total: f64,
    pub fallback: bool,
    pub reward: f64,
    #[serde(default)]
    pub iteration: u64,
}

impl GuidedTrajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn satisfied(&self) -> bool {
        self.acceptance_step.is_some()
    }

    pub fn weight(&self) -> f64 {
        self.log_w_total.exp()
    }
}

/// Samples one trajectory from the guided behavior policy.
///
/// The guidance session absorbs the prompt first (the DFA scans it, so a
/// prompt that already contains a phrase collapses guidance from step 0).
/// On an infeasible step the trajectory permanently switches to unguided
/// sampling with unit weights and sets the fallback flag. Stops at EOS or
/// after `tables.horizon()` tokens.
pub fn sample_trajectory<R: Rng>(
    policy: &ContextPolicy,
    tables: &GuidanceTables,
    constraint_id: &str,
    prompt: &[u32],
    prompt_id: u64,
    log_z_floor: f64,
    rng: &mut R,
) -> GuidedTrajectory {
    let horizon = tables.horizon();
    let eos = tables.dfa().eos_id();
    let mut session = GuidanceSession::start(tables, constraint_id, prompt);
    let mut acceptance_step = if session.accepted(tables) { Some(0) } else { None };

    let mut ctx: Vec<u32> = prompt.to_vec();
    let mut tokens = Vec::with_capacity(horizon);
    let mut log_pi_old = Vec::with_capacity(horizon);
    let mut log_mu = Vec::with_capacity(horizon);
    let mut log_w = Vec::with_capacity(horizon);

    for t in 0..horizon {
        let log_pi = policy.next_token_log_probs(&ctx);
        let collapsed = session.in_fallback() || session.accepted(tables);
        let (tok, lp, lm, lw) = if collapsed {
            let tok = sample_categorical_from_log(rng, &log_pi);
            (tok, log_pi[tok], log_pi[tok], 0.0)
        } else {
            let log_gamma = gamma_all_tokens(&session, tables);
            match guided_next_distribution(&log_pi, &log_gamma, log_z_floor) {
                Ok(step) => {
                    let tok = sample_categorical_from_log(rng, &step.log_mu);
                    (tok, log_pi[tok], step.log_mu[tok], step.log_w_per_token[tok])
                }
                Err(RolloutError::InfeasibleStep { .. }) => {
                    session.enter_fallback();
                    let tok = sample_categorical_from_log(rng, &log_pi);
                    (tok, log_pi[tok], log_pi[tok], 0.0)
                }
            }
        };
        let tok = tok as u32;
        tokens.push(tok);
        log_pi_old.push(lp);
        log_mu.push(lm);
        log_w.push(lw);
        advance_session(&mut session, tables, tok);
        ctx.push(tok);
        if acceptance_step.is_none() && session.accepted(tables) {
            acceptance_step = Some(t + 1);
        }
        if tok == eos {
            break;
        }
    }

    let log_w_total: f64 = log_w.iter().sum();
    GuidedTrajectory {
        constraint_id: constraint_id.to_string(),
        prompt_id,
        prompt: prompt.to_vec(),
        tokens,
        log_pi_old,
        log_mu,
        log_w,
        acceptance_step,
        log_w_total,
        fallback: session.in_fallback(),
        reward: 0.0,
        iteration: 0,
    }
}

/// Samples from the plain proximal policy (the gamma == 1 path): identical
/// bookkeeping with all `log w_t = 0`. A DFA may still be supplied so
/// satisfaction is tracked for reward shaping and reports.
#[allow(clippy::too_many_arguments)]
pub fn sample_unguided_trajectory<R: Rng>(
    policy: &ContextPolicy,
    horizon: usize,
    eos: u32,
    dfa: Option<&KeyphraseDfa>,
    constraint_id: &str,
    prompt: &[u32],
    prompt_id: u64,
    rng: &mut R,
) -> GuidedTrajectory {
    let mut state = dfa.map(|d| d.scan(prompt));
    let mut acceptance_step = match (dfa, state) {
        (Some(d), Some(s)) if d.is_accept(s) => Some(0),
        _ => None,
    };
    let mut ctx: Vec<u32> = prompt.to_vec();
    let mut tokens = Vec::with_capacity(horizon);
    let mut log_pi_old = Vec::with_capacity(horizon);

    for t in 0..horizon {
        let log_pi = policy.next_token_log_probs(&ctx);
        let tok = sample_categorical_from_log(rng, &log_pi) as u32;
        tokens.push(tok);
        log_pi_old.push(log_pi[tok as usize]);
        ctx.push(tok);
        if let (Some(d), Some(s)) = (dfa, state) {
            let next = d.step(s, tok);
            state = Some(next);
            if acceptance_step.is_none() && d.is_accept(next) {
                acceptance_step = Some(t + 1);
            }
        }
        if tok == eos {
            break;
        }
    }

    let n = tokens.len();
    GuidedTrajectory {
        constraint_id: constraint_id.to_string(),
        prompt_id,
        prompt: prompt.to_vec(),
        tokens,
        log_mu: log_pi_old.clone(),
        log_pi_old,
        log_w: vec![0.0; n],
        acceptance_step,
        log_w_total: 0.0,
        fallback: false,
        reward: 0.0,
        iteration: 0,
    }
}

/// Writes trajectories as JSON lines.
pub fn write_trajectory_dump<W: Write>(
    mut out: W,
    trajectories: &[GuidedTrajectory],
) -> std::io::Result<()> {
    for t in trajectories {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a JSON-lines trajectory dump.
pub fn read_trajectory_dump<R: BufRead>(input: R) -> std::io::Result<Vec<GuidedTrajectory>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: GuidedTrajectory = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::build_guidance_tables;
    use crate::lexicon::KeyphraseConstraint;
    use crate::oracle::{exact_accept_probability, EnumerationBudget};
    use crate::rng::derive_rng;
    use std::sync::Arc;

    #[test]
    fn unit_gamma_collapses_to_proximal_policy() {
        let log_pi: Vec<f64> = [0.5f64, 0.3, 0.2].iter().map(|p| p.ln()).collect();
        let log_gamma = vec![0.0; 3];
        let step = guided_next_distribution(&log_pi, &log_gamma, DEFAULT_LOG_Z_FLOOR).unwrap();
        assert!(step.log_z.abs() < 1e-12);
        for (v, &lp) in log_pi.iter().enumerate() {
            assert!((step.log_mu[v] - lp).abs() < 1e-12);
            assert!(step.log_w_per_token[v].abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_composition() {
        let log_pi: Vec<f64> = [0.5f64, 0.3, 0.2].iter().map(|p| p.ln()).collect();
        let log_gamma = vec![f64::NEG_INFINITY, 0.0, 0.5f64.ln()];
        let step = guided_next_distribution(&log_pi, &log_gamma, DEFAULT_LOG_Z_FLOOR).unwrap();
        assert!((step.log_z - 0.4f64.ln()).abs() < 1e-12);
        assert_eq!(step.log_mu[0], f64::NEG_INFINITY);
        assert!((step.log_mu[1].exp() - 0.75).abs() < 1e-12);
        assert!((step.log_mu[2].exp() - 0.25).abs() < 1e-12);
        assert_eq!(step.log_w_per_token[0], f64::INFINITY);
        assert!((step.log_w_per_token[1].exp() - 0.4).abs() < 1e-12);
        assert!((step.log_w_per_token[2].exp() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn one_hot_gamma_gives_point_mass_with_weight_pi() {
        let log_pi: Vec<f64> = [0.5f64, 0.3, 0.2].iter().map(|p| p.ln()).collect();
        let log_gamma = vec![f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY];
        let step = guided_next_distribution(&log_pi, &log_gamma, DEFAULT_LOG_Z_FLOOR).unwrap();
        assert_eq!(step.log_mu[1], 0.0);
        assert!((step.log_w_per_token[1] - log_pi[1]).abs() < 1e-12);
    }

    #[test]
    fn measure_identity_holds_per_token() {
        use rand::Rng;
        let mut rng = derive_rng(20, &[50]);
        for _ in 0..200 {
            let n = rng.gen_range(2..6usize);
            let mut pi: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let sum: f64 = pi.iter().sum();
            pi.iter_mut().for_each(|p| *p /= sum);
            let log_pi: Vec<f64> = pi.iter().map(|p| p.ln()).collect();
            let log_gamma: Vec<f64> = (0..n)
                .map(|_| if rng.gen::<f64>() < 0.2 { f64::NEG_INFINITY } else { -rng.gen::<f64>() * 5.0 })
                .collect();
            let Ok(step) = guided_next_distribution(&log_pi, &log_gamma, DEFAULT_LOG_Z_FLOOR) else {
                continue;
            };
            let mass: f64 = step.log_mu.iter().map(|&l| l.exp()).sum();
            assert!((mass - 1.0).abs() < 1e-9);
            for (v, &lp) in log_pi.iter().enumerate() {
                if log_gamma[v] > f64::NEG_INFINITY {
                    assert!(
                        (step.log_mu[v] + step.log_w_per_token[v] - lp).abs() < 1e-12,
                        "measure identity violated"
                    );
                }
            }
        }
    }

    #[test]
    fn vanished_mass_reports_infeasible() {
        let log_pi: Vec<f64> = [0.5f64, 0.5].iter().map(|p| p.ln()).collect();
        let log_gamma = vec![f64::NEG_INFINITY, f64::NEG_INFINITY];
        assert!(matches!(
            guided_next_distribution(&log_pi, &log_gamma, DEFAULT_LOG_Z_FLOOR),
            Err(RolloutError::InfeasibleStep { .. })
        ));
    }

    #[test]
    fn constraint_sampling_uniform_and_reproducible() {
        let vocab = crate::oracle::tiny_vocab(3);
        let constraints: Vec<KeyphraseConstraint> = (0..5)
            .map(|i| {
                KeyphraseConstraint::from_surface(format!("c{i}"), &["a"], &vocab).unwrap()
            })
            .collect();
        let single = [constraints[0].clone()];
        let mut rng = derive_rng(1, &[51]);
        assert_eq!(sample_constraint(&single, &mut rng), 0);

        let n = 100_000usize;
        let mut counts = [0usize; 5];
        let mut rng = derive_rng(2, &[52]);
        for _ in 0..n {
            counts[sample_constraint(&constraints, &mut rng)] += 1;
        }
        let p = 0.2f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma);
        }

        let seq1: Vec<usize> = {
            let mut r = derive_rng(3, &[53]);
            (0..32).map(|_| sample_constraint(&constraints, &mut r)).collect()
        };
        let seq2: Vec<usize> = {
            let mut r = derive_rng(3, &[53]);
            (0..32).map(|_| sample_constraint(&constraints, &mut r)).collect()
        };
        assert_eq!(seq1, seq2);
    }

    #[test]
    fn prompt_satisfied_constraint_gives_unit_weights_bitwise() {
        let mut rng = derive_rng(21, &[54]);
        let inst = crate::oracle::markov_instance(&mut rng, 3, 1);
        let phrase = inst.constraint.phrases[0].clone();
        let tables = build_guidance_tables(Arc::new(inst.hmm), Arc::new(inst.dfa), 4);
        // prompt already contains the single-token phrase
        let traj = sample_trajectory(
            &inst.policy,
            &tables,
            "needle",
            &phrase,
            0,
            DEFAULT_LOG_Z_FLOOR,
            &mut rng,
        );
        assert_eq!(traj.acceptance_step, Some(0));
        assert!(traj.satisfied());
        for t in 0..traj.len() {
            assert_eq!(traj.log_w[t], 0.0);
            assert_eq!(traj.log_mu[t].to_bits(), traj.log_pi_old[t].to_bits());
        }
        assert_eq!(traj.log_w_total, 0.0);
    }

    #[test]
    fn markov_instance_weights_equal_oracle_acceptance_probability() {
        let mut rng = derive_rng(22, &[55]);
        let inst = crate::oracle::markov_instance(&mut rng, 3, 2);
        let horizon = 4;
        let hmm = Arc::new(inst.hmm.clone());
        let dfa = Arc::new(inst.dfa.clone());
        let tables = build_guidance_tables(hmm, dfa, horizon);
        let p_alpha = exact_accept_probability(
            &inst.hmm,
            &inst.dfa,
            horizon,
            &inst.prompt,
            &EnumerationBudget::default(),
        )
        .unwrap();
        for g in 0..200u64 {
            let mut traj_rng = derive_rng(100, &[56, g]);
            let traj = sample_trajectory(
                &inst.policy,
                &tables,
                "needle",
                &inst.prompt,
                0,
                DEFAULT_LOG_Z_FLOOR,
                &mut traj_rng,
            );
            assert!(!traj.fallback, "instance should not trigger fallback");
            assert!(traj.satisfied(), "guided trajectory must satisfy the constraint");
            assert!(
                (traj.weight() - p_alpha).abs() < 1e-9,
                "w {} vs P(alpha) {p_alpha}",
                traj.weight()
            );
        }
    }

    #[test]
    fn post_acceptance_steps_collapse_exactly() {
        let mut rng = derive_rng(23, &[57]);
        let inst = crate::oracle::markov_instance(&mut rng, 3, 1);
        let tables = build_guidance_tables(Arc::new(inst.hmm), Arc::new(inst.dfa), 6);
        let mut checked = 0usize;
        for g in 0..200u64 {
            let mut traj_rng = derive_rng(7, &[58, g]);
            let traj = sample_trajectory(
                &inst.policy,
                &tables,
                "needle",
                &inst.prompt,
                g,
                DEFAULT_LOG_Z_FLOOR,
                &mut traj_rng,
            );
            if let Some(k) = traj.acceptance_step {
                for t in k..traj.len() {
                    assert_eq!(traj.log_w[t], 0.0);
                    assert_eq!(traj.log_mu[t].to_bits(), traj.log_pi_old[t].to_bits());
                    checked += 1;
                }
            }
        }
        assert!(checked > 0, "no post-acceptance steps exercised");
    }

    #[test]
    fn dump_round_trips() {
        let mut rng = derive_rng(24, &[59]);
        let inst = crate::oracle::markov_instance(&mut rng, 3, 1);
        let tables = build_guidance_tables(Arc::new(inst.hmm), Arc::new(inst.dfa), 4);
        let trajs: Vec<GuidedTrajectory> = (0..5)
            .map(|g| {
                sample_trajectory(
                    &inst.policy,
                    &tables,
                    "needle",
                    &inst.prompt,
                    g,
                    DEFAULT_LOG_Z_FLOOR,
                    &mut rng,
                )
            })
            .collect();
        let mut buf = Vec::new();
        write_trajectory_dump(&mut buf, &trajs).unwrap();
        let back = read_trajectory_dump(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.len(), trajs.len());
        for (a, b) in trajs.iter().zip(back.iter()) {
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.log_w_total.to_bits(), b.log_w_total.to_bits());
            assert_eq!(a.acceptance_step, b.acceptance_step);
        }
    }
}
