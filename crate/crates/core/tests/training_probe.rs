//! Manual probe for tuning the desk-scale training demonstration.
//! Run with: cargo test -p ctrlr-core --release --test training_probe -- --ignored --nocapture

use std::sync::Arc;

use ctrlr_core::lexicon::KeyphraseConstraint;
use ctrlr_core::optimizer::{
    distill_guidance_hmm, evaluate_policy, run_iteration, BaselineMode, TrainConfig, TrainState,
};
use ctrlr_core::rng::derive_rng;
use ctrlr_core::toyworld::{initial_policy_params, TaskMode, ToyTask};

fn probe_config(seed: u64, baseline: BaselineMode, beta: f64, lr: f64) -> TrainConfig {
    TrainConfig {
        seed,
        beta,
        baseline,
        iterations: 120,
        prompts_per_batch: 6,
        group_size: 10,
        horizon: 8,
        learning_rate: lr,
        eval_rollouts: 200,
        table_size: 2048,
        ctx_order: 4,
        hmm_states: 6,
        corpus_sequences: 500,
        corpus_len: 64,
        em_max_iters: 200,
        em_tol: 1e-6,
        ..Default::default()
    }
}

#[test]
#[ignore]
fn probe_learning_curves() {
    let t0 = std::time::Instant::now();
    for seed in [1u64, 2, 3] {
        let task = ToyTask::default_desk(TaskMode::Needle);
        let cfg0 = probe_config(seed, BaselineMode::CtrlR, 0.2, 1.0);
        let mut init_rng = derive_rng(seed, &[1000]);
        let policy =
            initial_policy_params(&task, cfg0.horizon, cfg0.ctx_order, cfg0.table_size, &mut init_rng)
                .unwrap();
        let init_eval = evaluate_policy(&policy, &task, cfg0.horizon, 200, seed, 999_999);
        println!("seed {seed}: init eval {init_eval:.3} ({:?})", t0.elapsed());

        let fit = distill_guidance_hmm(&policy, &task, &cfg0).unwrap();
        println!(
            "seed {seed}: hmm distilled, {} EM iters, ll {:.1} -> {:.1} ({:?})",
            fit.iterations,
            fit.log_likelihoods.first().unwrap(),
            fit.log_likelihoods.last().unwrap(),
            t0.elapsed()
        );
        let hmm = Arc::new(fit.hmm);
        let vocab = task.vocab().clone();
        let constraints = vec![
            KeyphraseConstraint::from_surface("backtracking", &["go back"], &vocab).unwrap(),
            KeyphraseConstraint::from_surface("retry", &["try again"], &vocab).unwrap(),
        ];

        for lr in [4000.0f64] {
            for (name, baseline, beta) in [
                ("ctrl-r b=0.2", BaselineMode::CtrlR, 0.2),
                ("ctrl-r b=0.0", BaselineMode::CtrlR, 0.0),
                ("ctrl-r b=1.0", BaselineMode::CtrlR, 1.0),
                ("unguided", BaselineMode::Unguided, 0.2),
                ("shaping", BaselineMode::RewardShaping, 0.2),
            ] {
                let cfg = probe_config(seed, baseline, beta, lr);
                let hmm_arg = (baseline == BaselineMode::CtrlR).then(|| hmm.clone());
                let mut state = TrainState::new(
                    cfg.clone(),
                    task.clone(),
                    constraints.clone(),
                    policy.clone(),
                    hmm_arg,
                )
                .unwrap();
                let mut curve = Vec::new();
                let mut sat = Vec::new();
                let mut wins = 0usize;
                for _ in 0..cfg.iterations {
                    let (m, batches) = run_iteration(&mut state).unwrap();
                    curve.push(m.eval_reward);
                    sat.push(
                        m.satisfaction
                            .get("backtracking")
                            .and_then(|s| s.rate())
                            .unwrap_or(f64::NAN),
                    );
                    for b in &batches {
                        wins += b.trajectories.iter().filter(|t| t.reward > 0.0).count();
                    }
                }
                let last10: f64 = curve.iter().rev().take(10).sum::<f64>() / 10.0;
                let sat_mean: f64 =
                    sat.iter().filter(|x| !x.is_nan()).sum::<f64>() / sat.len().max(1) as f64;
                println!(
                    "seed {seed} lr {lr:>6} {name:>12}: final10 {last10:+.3} wins {wins:>4} sat {sat_mean:.2} curve {:?} ({:?})",
                    curve
                        .iter()
                        .step_by(10)
                        .map(|x| (x * 100.0).round() / 100.0)
                        .collect::<Vec<_>>(),
                    t0.elapsed()
                );
            }
        }
    }
    println!("total {:?}", t0.elapsed());
}
