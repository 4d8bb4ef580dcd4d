//! Cross-module properties: the guided behavior measure against the
//! enumeration oracles.

use std::collections::HashMap;
use std::sync::Arc;

use ctrlr_core::guidance::build_guidance_tables;
use ctrlr_core::lexicon::contains_phrase;
use ctrlr_core::oracle::{
    exact_accept_probability, exact_guided_distribution, exact_policy_expectation, markov_instance,
    random_constraint, random_hmm, tiny_vocab, EnumerationBudget, ExplicitPolicy, FeasiblePolicy,
    HmmPolicy, WithEos,
};
use ctrlr_core::policy::ContextPolicy;
use ctrlr_core::rng::derive_rng;
use ctrlr_core::rollout::{sample_trajectory, DEFAULT_LOG_Z_FLOOR};
use rand::Rng;

fn policy_prob(policy: &dyn ExplicitPolicy, tokens: &[u32]) -> f64 {
    let mut p = 1.0;
    for t in 0..tokens.len() {
        p *= policy.probs(&tokens[..t])[tokens[t] as usize];
    }
    p
}

/// Exact-conditional identity: when the guidance model equals the sampling
/// process, the enumerated guided measure is the policy conditioned on
/// constraint satisfaction (total variation <= 1e-9).
#[test]
fn guided_measure_equals_conditional_policy() {
    let budget = EnumerationBudget::default();
    for seed in 0..10u64 {
        let mut rng = derive_rng(seed, &[200]);
        let inst = markov_instance(&mut rng, 3, 2);
        let horizon = 4;
        let policy = HmmPolicy::new(&inst.hmm, inst.vocab.eos_id());
        let trajs =
            exact_guided_distribution(&policy, &inst.hmm, &inst.dfa, horizon, &budget).unwrap();
        let p_alpha =
            exact_accept_probability(&inst.hmm, &inst.dfa, horizon, &[], &budget).unwrap();
        assert!(p_alpha > 0.0);

        let mut tv = 0.0;
        let mut conditional_mass = 0.0;
        for t in &trajs {
            assert!(inst.dfa.accepts(&t.tokens));
            let cond = policy_prob(&policy, &t.tokens) / p_alpha;
            conditional_mass += cond;
            tv += (t.mu_prob - cond).abs();
        }
        tv /= 2.0;
        assert!(tv <= 1e-9, "seed {seed}: TV distance {tv}");
        // the guided support carries all of the conditional's mass
        assert!((conditional_mass - 1.0).abs() <= 1e-9);
    }
}

/// Change-of-measure identity on deadline-aware policies: the base policy
/// never walks into an infeasible prefix, so neither measure escapes the
/// other's support and `sum mu * w * f = sum pi * f` exactly, for f = 1 and a
/// reward-like f.
#[test]
fn importance_weights_are_unbiased_on_feasible_policies() {
    let budget = EnumerationBudget::default();
    for seed in 0..10u64 {
        let mut rng = derive_rng(seed, &[201]);
        let vocab = tiny_vocab(3);
        let hmm = random_hmm(&mut rng, 3, vocab.size());
        let (_, dfa) = random_constraint(&mut rng, &vocab, 2, 2);
        let horizon = 4;

        let mut base = ContextPolicy::zeros(2, 64, vocab.size());
        for l in base.logits_mut() {
            *l = rng.gen::<f64>() * 2.0 - 1.0;
        }
        let feasible = FeasiblePolicy::new(
            WithEos(base, vocab.eos_id()),
            &dfa,
            horizon,
            vocab.eos_id(),
        );

        let trajs = exact_guided_distribution(&feasible, &hmm, &dfa, horizon, &budget).unwrap();
        let mu_mass: f64 = trajs.iter().map(|t| t.mu_prob).sum();
        assert!((mu_mass - 1.0).abs() <= 1e-9);

        // f = 1
        let lhs_one: f64 = trajs.iter().map(|t| t.mu_prob * t.weight).sum();
        let rhs_one = exact_policy_expectation(&feasible, &|_| 1.0, horizon, &budget).unwrap();
        assert!((rhs_one - 1.0).abs() <= 1e-9);
        assert!(
            (lhs_one - rhs_one).abs() <= 1e-9,
            "seed {seed}: f=1 lhs {lhs_one} rhs {rhs_one}"
        );

        // f = reward-like: +1 if the trajectory contains token 0, else -1
        let reward = |tau: &[u32]| if contains_phrase(tau, &[0]) { 1.0 } else { -1.0 };
        let lhs_r: f64 = trajs.iter().map(|t| t.mu_prob * t.weight * reward(&t.tokens)).sum();
        let rhs_r = exact_policy_expectation(&feasible, &reward, horizon, &budget).unwrap();
        assert!(
            (lhs_r - rhs_r).abs() <= 1e-9,
            "seed {seed}: f=reward lhs {lhs_r} rhs {rhs_r}"
        );

        // pointwise measure identity on the support
        for t in &trajs {
            let pi = policy_prob(&feasible, &t.tokens);
            assert!(
                (t.mu_prob * t.weight - pi).abs() <= 1e-9,
                "seed {seed}: mu*w {} vs pi {pi}",
                t.mu_prob * t.weight
            );
        }
    }
}

/// Sampled trajectory frequencies from the real rollout path match the
/// enumerated guided measure within 3 sigma per trajectory.
#[test]
fn sampled_frequencies_match_enumerated_measure() {
    let mut rng = derive_rng(31, &[202]);
    let inst = markov_instance(&mut rng, 3, 1);
    let horizon = 3;
    let budget = EnumerationBudget::default();

    // enumeration conditioned on the prompt: prepend it for the oracle
    let policy = HmmPolicy::new(&inst.hmm, inst.vocab.eos_id());
    let all = exact_guided_distribution(&policy, &inst.hmm, &inst.dfa, horizon + 1, &budget).unwrap();
    let mut expected: HashMap<Vec<u32>, f64> = HashMap::new();
    let prompt_mass: f64 = all
        .iter()
        .filter(|t| t.tokens.first() == Some(&inst.prompt[0]))
        .map(|t| t.mu_prob)
        .sum();
    for t in &all {
        if t.tokens.first() == Some(&inst.prompt[0]) {
            expected.insert(t.tokens[1..].to_vec(), t.mu_prob / prompt_mass);
        }
    }

    let tables = build_guidance_tables(
        Arc::new(inst.hmm.clone()),
        Arc::new(inst.dfa.clone()),
        horizon,
    );
    let n = 100_000usize;
    let mut counts: HashMap<Vec<u32>, usize> = HashMap::new();
    for g in 0..n as u64 {
        let mut traj_rng = derive_rng(32, &[203, g]);
        let traj = sample_trajectory(
            &inst.policy,
            &tables,
            "needle",
            &inst.prompt,
            0,
            DEFAULT_LOG_Z_FLOOR,
            &mut traj_rng,
        );
        *counts.entry(traj.tokens).or_insert(0) += 1;
    }

    let mut covered = 0.0;
    for (tokens, &p) in &expected {
        let c = counts.get(tokens).copied().unwrap_or(0) as f64;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt().max(1.0);
        assert!(
            (c - mean).abs() <= 3.0 * sigma,
            "trajectory {tokens:?}: count {c} vs mean {mean:.1}"
        );
        covered += p;
    }
    assert!((covered - 1.0).abs() < 1e-9);
    // nothing outside the enumerated support was sampled
    for tokens in counts.keys() {
        assert!(expected.contains_key(tokens), "off-support sample {tokens:?}");
    }
}

/// Enumerated guided measure conditioned through the prompt equals the
/// composition the sampler uses: means the prompt-conditioning conventions
/// of oracle and session agree.
#[test]
fn oracle_reward_expectation_matches_monte_carlo() {
    use ctrlr_core::oracle::exact_policy_expectation;
    let mut rng = derive_rng(33, &[204]);
    let vocab = tiny_vocab(3);
    let mut base = ContextPolicy::zeros(2, 64, vocab.size());
    for l in base.logits_mut() {
        *l = rng.gen::<f64>() - 0.5;
    }
    let policy = WithEos(base.clone(), vocab.eos_id());
    let horizon = 4;
    // reward: +1 if tokens 0 and 1 appear adjacently, else -1
    let reward = |tau: &[u32]| if contains_phrase(tau, &[0, 1]) { 1.0 } else { -1.0 };
    let exact =
        exact_policy_expectation(&policy, &reward, horizon, &EnumerationBudget::default()).unwrap();

    let n = 1_000_000usize;
    let mut total = 0.0;
    let eos = vocab.eos_id();
    let mut mc_rng = derive_rng(34, &[205]);
    for i in 0..n {
        let t = ctrlr_core::rollout::sample_unguided_trajectory(
            &base,
            horizon,
            eos,
            None,
            "",
            &[],
            i as u64,
            &mut mc_rng,
        );
        total += reward(&t.tokens);
    }
    let mc = total / n as f64;
    // reward variance is at most 1 on the +-1 scale
    let sigma = (1.0 / n as f64).sqrt();
    assert!(
        (mc - exact).abs() <= 3.0 * sigma + 1e-3,
        "MC {mc} vs exact {exact}"
    );
}
