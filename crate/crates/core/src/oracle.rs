//! Brute-force enumeration oracles.
//!
//! Everything here re-derives probabilities from definitions: linear-space
//! chain rule over token sequences, no log-sum-exp tricks, Kahan-compensated
//! accumulation. The oracles share no algorithmic code with the guidance DP
//! or the rollout composition they cross-check, and they only make sense on
//! tiny instances guarded by [`EnumerationBudget`].

use rand::Rng;
use thiserror::Error;

use crate::hmm::Hmm;
use crate::lexicon::{build_keyphrase_dfa, KeyphraseConstraint, KeyphraseDfa, Vocab};
use crate::policy::ContextPolicy;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("enumeration budget exceeded: {0}")]
    BudgetExceeded(String),
}

/// Hard caps keeping full enumeration tractable.
#[derive(Debug, Clone, Copy)]
pub struct EnumerationBudget {
    pub max_vocab: usize,
    pub max_horizon: usize,
    pub max_hmm_states: usize,
    pub max_dfa_states: usize,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        Self { max_vocab: 5, max_horizon: 6, max_hmm_states: 4, max_dfa_states: 6 }
    }
}

impl EnumerationBudget {
    pub fn check(
        &self,
        vocab_size: usize,
        horizon: usize,
        hmm_states: usize,
        dfa_states: usize,
    ) -> Result<(), OracleError> {
        if vocab_size > self.max_vocab {
            return Err(OracleError::BudgetExceeded(format!(
                "vocab {vocab_size} > {}",
                self.max_vocab
            )));
        }
        if horizon > self.max_horizon {
            return Err(OracleError::BudgetExceeded(format!(
                "horizon {horizon} > {}",
                self.max_horizon
            )));
        }
        if hmm_states > self.max_hmm_states {
            return Err(OracleError::BudgetExceeded(format!(
                "hmm states {hmm_states} > {}",
                self.max_hmm_states
            )));
        }
        if dfa_states > self.max_dfa_states {
            return Err(OracleError::BudgetExceeded(format!(
                "dfa states {dfa_states} > {}",
                self.max_dfa_states
            )));
        }
        let paths = (vocab_size as f64).powi(horizon as i32);
        if paths > 65536.0 {
            return Err(OracleError::BudgetExceeded(format!(
                "{vocab_size}^{horizon} = {paths} > 2^16"
            )));
        }
        Ok(())
    }
}

/// Compensated (Kahan) sum for long accumulations.
#[derive(Debug, Default, Clone, Copy)]
struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    fn add(&mut self, x: f64) {
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum
    }
}

/// Linear-space copies of the HMM tables.
struct ProbHmm {
    h: usize,
    v: usize,
    init: Vec<f64>,
    trans: Vec<f64>,
    emit: Vec<f64>,
}

impl ProbHmm {
    fn from(hmm: &Hmm) -> Self {
        let h = hmm.states();
        let v = hmm.vocab_size();
        let init = (0..h).map(|z| hmm.log_init(z).exp()).collect();
        let trans = (0..h)
            .flat_map(|z| (0..h).map(move |z2| (z, z2)))
            .map(|(z, z2)| hmm.log_trans(z, z2).exp())
            .collect();
        let emit = (0..h)
            .flat_map(|z| (0..v).map(move |t| (z, t)))
            .map(|(z, t)| hmm.log_emit(z, t as u32).exp())
            .collect();
        Self { h, v, init, trans, emit }
    }

    /// Distribution of the next latent state given the posterior over the
    /// current one (or the prior for a fresh sequence).
    fn next_latent(&self, posterior: Option<&[f64]>) -> Vec<f64> {
        match posterior {
            None => self.init.clone(),
            Some(q) => {
                let mut u = vec![0.0; self.h];
                for (z, &qz) in q.iter().enumerate() {
                    if qz == 0.0 {
                        continue;
                    }
                    for (z2, slot) in u.iter_mut().enumerate() {
                        *slot += qz * self.trans[z * self.h + z2];
                    }
                }
                u
            }
        }
    }

    /// Marginal token probability and conditioned latent posterior after
    /// emitting `token` from the pre-emission distribution `u`.
    fn emit_step(&self, u: &[f64], token: u32) -> (f64, Vec<f64>) {
        let mut joint = vec![0.0; self.h];
        let mut p = 0.0;
        for z in 0..self.h {
            let m = u[z] * self.emit[z * self.v + token as usize];
            joint[z] = m;
            p += m;
        }
        if p > 0.0 {
            joint.iter_mut().for_each(|x| *x /= p);
        }
        (p, joint)
    }
}

fn accept_prob_rec(
    hmm: &ProbHmm,
    dfa: &KeyphraseDfa,
    posterior: Option<&[f64]>,
    state: u32,
    remaining: usize,
) -> f64 {
    if dfa.is_accept(state) {
        return 1.0;
    }
    if remaining == 0 {
        return 0.0;
    }
    let u = hmm.next_latent(posterior);
    let mut total = KahanSum::default();
    for v in 0..hmm.v as u32 {
        let (p, q) = hmm.emit_step(&u, v);
        if p == 0.0 {
            continue;
        }
        total.add(p * accept_prob_rec(hmm, dfa, Some(&q), dfa.step(state, v), remaining - 1));
    }
    total.value()
}

/// Probability, under the HMM, that the DFA accepts within `remaining`
/// further tokens, conditioned on an already-consumed prefix.
///
/// EOS is an ordinary token here: the HMM measure runs over full-length
/// continuations and the DFA treats EOS as inert.
pub fn exact_accept_probability(
    hmm: &Hmm,
    dfa: &KeyphraseDfa,
    remaining: usize,
    prefix: &[u32],
    budget: &EnumerationBudget,
) -> Result<f64, OracleError> {
    budget.check(hmm.vocab_size(), remaining, hmm.states(), dfa.state_count())?;
    let p = ProbHmm::from(hmm);
    let mut posterior: Option<Vec<f64>> = None;
    let mut state = dfa.start();
    for &t in prefix {
        let u = p.next_latent(posterior.as_deref());
        let (mass, q) = p.emit_step(&u, t);
        assert!(mass > 0.0, "prefix has zero probability under the HMM");
        posterior = Some(q);
        state = dfa.step(state, t);
    }
    Ok(accept_prob_rec(&p, dfa, posterior.as_deref(), state, remaining))
}

/// Same acceptance probability from an explicit latent posterior and DFA
/// state; building block for checking individual DP cells.
pub fn exact_accept_probability_from(
    hmm: &Hmm,
    dfa: &KeyphraseDfa,
    latent_posterior: &[f64],
    dfa_state: u32,
    remaining: usize,
    budget: &EnumerationBudget,
) -> Result<f64, OracleError> {
    budget.check(hmm.vocab_size(), remaining, hmm.states(), dfa.state_count())?;
    let p = ProbHmm::from(hmm);
    Ok(accept_prob_rec(&p, dfa, Some(latent_posterior), dfa_state, remaining))
}

/// A policy exposed as explicit next-token conditionals in probability space.
pub trait ExplicitPolicy {
    fn token_count(&self) -> usize;
    fn eos_id(&self) -> u32;
    fn probs(&self, prefix: &[u32]) -> Vec<f64>;
}

impl ExplicitPolicy for ContextPolicy {
    fn token_count(&self) -> usize {
        self.vocab_size()
    }

    fn eos_id(&self) -> u32 {
        // By convention the last vocab id is EOS for tabular test policies;
        // wrap in [`WithEos`] to override.
        self.vocab_size() as u32 - 1
    }

    fn probs(&self, prefix: &[u32]) -> Vec<f64> {
        self.next_token_log_probs(prefix).iter().map(|&l| l.exp()).collect()
    }
}

/// Overrides the EOS id of a wrapped policy.
pub struct WithEos<P>(pub P, pub u32);

impl<P: ExplicitPolicy> ExplicitPolicy for WithEos<P> {
    fn token_count(&self) -> usize {
        self.0.token_count()
    }

    fn eos_id(&self) -> u32 {
        self.1
    }

    fn probs(&self, prefix: &[u32]) -> Vec<f64> {
        self.0.probs(prefix)
    }
}

/// The HMM itself as an autoregressive policy, conditionals via linear chain
/// rule.
pub struct HmmPolicy<'a> {
    hmm: &'a Hmm,
    tables: ProbHmm,
    eos: u32,
}

impl<'a> HmmPolicy<'a> {
    pub fn new(hmm: &'a Hmm, eos: u32) -> Self {
        Self { hmm, tables: ProbHmm::from(hmm), eos }
    }
}

impl ExplicitPolicy for HmmPolicy<'_> {
    fn token_count(&self) -> usize {
        self.hmm.vocab_size()
    }

    fn eos_id(&self) -> u32 {
        self.eos
    }

    fn probs(&self, prefix: &[u32]) -> Vec<f64> {
        let mut posterior: Option<Vec<f64>> = None;
        for &t in prefix {
            let u = self.tables.next_latent(posterior.as_deref());
            let (mass, q) = self.tables.emit_step(&u, t);
            assert!(mass > 0.0, "prefix has zero probability under the HMM");
            posterior = Some(q);
        }
        let u = self.tables.next_latent(posterior.as_deref());
        (0..self.tables.v as u32)
            .map(|v| (0..self.tables.h).map(|z| u[z] * self.tables.emit[z * self.tables.v + v as usize]).sum())
            .collect()
    }
}

/// Deadline-aware filter over a base policy: tokens that would make the
/// constraint unreachable within the remaining budget (including EOS before
/// acceptance) get zero mass, and the row is renormalized.
///
/// Under such a policy every trajectory satisfies the constraint, which is
/// exactly the domain where the full change-of-measure identity
/// `sum mu * w * f = sum pi * f` holds: the guided policy masks the same
/// tokens, so neither measure escapes the other's support.
pub struct FeasiblePolicy<'a, P> {
    base: P,
    dfa: &'a KeyphraseDfa,
    horizon: usize,
    /// feasible[k * m + s]: can `s` reach acceptance within k tokens
    feasible: Vec<bool>,
}

impl<'a, P: ExplicitPolicy> FeasiblePolicy<'a, P> {
    pub fn new(base: P, dfa: &'a KeyphraseDfa, horizon: usize, eos: u32) -> Self {
        let m = dfa.state_count();
        let v = dfa.vocab_size();
        let mut feasible = vec![false; (horizon + 1) * m];
        for (s, cell) in feasible.iter_mut().take(m).enumerate() {
            *cell = dfa.is_accept(s as u32);
        }
        for k in 1..=horizon {
            for s in 0..m as u32 {
                let ok = dfa.is_accept(s)
                    || (0..v as u32)
                        .filter(|&t| t != eos)
                        .any(|t| feasible[(k - 1) * m + dfa.step(s, t) as usize]);
                feasible[k * m + s as usize] = ok;
            }
        }
        assert!(
            feasible[horizon * m + dfa.start() as usize],
            "constraint unreachable within the horizon"
        );
        Self { base, dfa, horizon, feasible }
    }
}

impl<P: ExplicitPolicy> ExplicitPolicy for FeasiblePolicy<'_, P> {
    fn token_count(&self) -> usize {
        self.base.token_count()
    }

    fn eos_id(&self) -> u32 {
        self.base.eos_id()
    }

    fn probs(&self, prefix: &[u32]) -> Vec<f64> {
        let mut row = self.base.probs(prefix);
        let s = self.dfa.scan(prefix);
        if self.dfa.is_accept(s) {
            return row;
        }
        let m = self.dfa.state_count();
        let remaining = self.horizon - prefix.len();
        let eos = self.base.eos_id();
        for (v, p) in row.iter_mut().enumerate() {
            let v = v as u32;
            if v == eos || !self.feasible[(remaining - 1) * m + self.dfa.step(s, v) as usize] {
                *p = 0.0;
            }
        }
        let total: f64 = row.iter().sum();
        assert!(total > 0.0, "feasible policy has no mass at a feasible prefix");
        row.iter_mut().for_each(|p| *p /= total);
        row
    }
}

fn expectation_rec(
    policy: &dyn ExplicitPolicy,
    f: &dyn Fn(&[u32]) -> f64,
    horizon: usize,
    prefix: &mut Vec<u32>,
    prob: f64,
    total: &mut KahanSum,
) {
    let done = prefix.last().is_some_and(|&t| t == policy.eos_id()) || prefix.len() == horizon;
    if done {
        total.add(prob * f(prefix));
        return;
    }
    let row = policy.probs(prefix);
    for (v, &p) in row.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        prefix.push(v as u32);
        expectation_rec(policy, f, horizon, prefix, prob * p, total);
        prefix.pop();
    }
}

/// `sum over trajectories of pi(tau) * f(tau)` over all EOS-or-horizon
/// terminated sequences.
pub fn exact_policy_expectation(
    policy: &dyn ExplicitPolicy,
    f: &dyn Fn(&[u32]) -> f64,
    horizon: usize,
    budget: &EnumerationBudget,
) -> Result<f64, OracleError> {
    budget.check(policy.token_count(), horizon, 1, 1)?;
    let mut total = KahanSum::default();
    let mut prefix = Vec::with_capacity(horizon);
    expectation_rec(policy, f, horizon, &mut prefix, 1.0, &mut total);
    Ok(total.value())
}

/// One fully enumerated guided trajectory.
#[derive(Debug, Clone)]
pub struct EnumeratedTrajectory {
    pub tokens: Vec<u32>,
    pub mu_prob: f64,
    pub weight: f64,
}

enum Track {
    /// Pre-acceptance: latent posterior after the prefix (None = fresh).
    Guided(Option<Vec<f64>>),
    /// Post-acceptance collapse or infeasibility fallback: mu = pi, w
    /// factors 1.
    Collapsed,
}

#[allow(clippy::too_many_arguments)]
fn guided_rec(
    policy: &dyn ExplicitPolicy,
    hmm: &ProbHmm,
    dfa: &KeyphraseDfa,
    horizon: usize,
    prefix: &mut Vec<u32>,
    state: u32,
    track: &Track,
    mu: f64,
    weight: f64,
    out: &mut Vec<EnumeratedTrajectory>,
) {
    let done = prefix.last().is_some_and(|&t| t == policy.eos_id()) || prefix.len() == horizon;
    if done {
        out.push(EnumeratedTrajectory { tokens: prefix.clone(), mu_prob: mu, weight });
        return;
    }
    let pi = policy.probs(prefix);
    let next_track = if dfa.is_accept(state) { &Track::Collapsed } else { track };
    match next_track {
        Track::Collapsed => {
            for (v, &p) in pi.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let v = v as u32;
                prefix.push(v);
                guided_rec(
                    policy,
                    hmm,
                    dfa,
                    horizon,
                    prefix,
                    dfa.step(state, v),
                    &Track::Collapsed,
                    mu * p,
                    weight,
                    out,
                );
                prefix.pop();
            }
        }
        Track::Guided(posterior) => {
            let u = hmm.next_latent(posterior.as_deref());
            let remaining_after = horizon - prefix.len() - 1;
            let eos = policy.eos_id();
            let mut gamma = vec![0.0; pi.len()];
            let mut posteriors: Vec<Option<Vec<f64>>> = vec![None; pi.len()];
            for v in 0..pi.len() as u32 {
                if v == eos {
                    continue; // not yet accepted => gamma(EOS) = 0
                }
                let (p_tok, q) = hmm.emit_step(&u, v);
                if p_tok == 0.0 {
                    continue;
                }
                let next_state = dfa.step(state, v);
                gamma[v as usize] = if dfa.is_accept(next_state) {
                    1.0
                } else {
                    accept_prob_rec(hmm, dfa, Some(&q), next_state, remaining_after)
                };
                posteriors[v as usize] = Some(q);
            }
            let z: f64 = pi.iter().zip(gamma.iter()).map(|(&p, &g)| p * g).sum();
            if z == 0.0 {
                // all feasible mass gone: behavior policy falls back to pi
                for (v, &p) in pi.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let v = v as u32;
                    prefix.push(v);
                    guided_rec(
                        policy,
                        hmm,
                        dfa,
                        horizon,
                        prefix,
                        dfa.step(state, v),
                        &Track::Collapsed,
                        mu * p,
                        weight,
                        out,
                    );
                    prefix.pop();
                }
                return;
            }
            for (v, &p) in pi.iter().enumerate() {
                let g = gamma[v];
                if p == 0.0 || g == 0.0 {
                    continue;
                }
                let v = v as u32;
                let mu_step = p * g / z;
                let w_step = z / g;
                prefix.push(v);
                guided_rec(
                    policy,
                    hmm,
                    dfa,
                    horizon,
                    prefix,
                    dfa.step(state, v),
                    &Track::Guided(posteriors[v as usize].clone()),
                    mu * mu_step,
                    weight * w_step,
                    out,
                );
                prefix.pop();
            }
        }
    }
}

/// Enumerates the full guided behavior measure: every trajectory with
/// positive mass under `mu`, with its probability and importance weight
/// `w = prod Z_t / gamma(x_t)`.
///
/// The per-step composition is rebuilt from definitions: gamma by
/// enumeration, the normalizer by direct summation, collapse after
/// acceptance, and fallback to the base policy when the feasible mass is
/// exactly zero.
pub fn exact_guided_distribution(
    policy: &dyn ExplicitPolicy,
    hmm: &Hmm,
    dfa: &KeyphraseDfa,
    horizon: usize,
    budget: &EnumerationBudget,
) -> Result<Vec<EnumeratedTrajectory>, OracleError> {
    budget.check(
        policy.token_count().max(hmm.vocab_size()),
        horizon,
        hmm.states(),
        dfa.state_count(),
    )?;
    let tables = ProbHmm::from(hmm);
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(horizon);
    guided_rec(
        policy,
        &tables,
        dfa,
        horizon,
        &mut prefix,
        dfa.start(),
        &Track::Guided(None),
        1.0,
        1.0,
        &mut out,
    );
    Ok(out)
}

/// A tiny vocabulary of single-letter tokens plus a final EOS token.
pub fn tiny_vocab(content_tokens: usize) -> Vocab {
    let names = ["a", "b", "c", "d", "e", "f", "g", "h"];
    let mut tokens: Vec<String> = names[..content_tokens].iter().map(|s| s.to_string()).collect();
    tokens.push("<eos>".to_string());
    Vocab::new(tokens.clone(), tokens.len() as u32 - 1).unwrap()
}

/// Instance where the sampling policy is exactly HMM-realizable: an order-1
/// Markov chain over tokens, mirrored by an HMM with identity emissions.
///
/// The chain assigns ~zero (e^-60) mass to EOS so the process matches the
/// HMM measure to ~1e-26; guidance built from this HMM is then exact for the
/// sampling process, which is the regime where the conditional-distribution
/// and constant-weight telescoping identities hold.
pub struct MarkovInstance {
    pub vocab: Vocab,
    pub hmm: Hmm,
    pub policy: ContextPolicy,
    pub dfa: KeyphraseDfa,
    pub constraint: KeyphraseConstraint,
    pub prompt: Vec<u32>,
}

pub fn markov_instance<R: Rng>(rng: &mut R, content_tokens: usize, phrase_len: usize) -> MarkovInstance {
    let vocab = tiny_vocab(content_tokens);
    let v = vocab.size();
    let eos = vocab.eos_id() as usize;

    // random row-stochastic chain over content tokens, zero mass on EOS
    let mut chain = vec![vec![0.0f64; v]; v];
    for row in chain.iter_mut() {
        let mut sum = 0.0;
        for (t, slot) in row.iter_mut().enumerate() {
            if t == eos {
                continue;
            }
            *slot = -(rng.gen::<f64>().max(1e-12)).ln() + 0.05;
            sum += *slot;
        }
        row.iter_mut().for_each(|x| *x /= sum);
    }

    // HMM: one latent per token, identity emission, transitions = chain.
    // Init puts no mass on the EOS latent, so the HMM never emits EOS and
    // the inert-EOS guidance measure coincides with the sampling process.
    let mut init = vec![1.0 / (v - 1) as f64; v];
    init[eos] = 0.0;
    let emit: Vec<Vec<f64>> = (0..v)
        .map(|z| (0..v).map(|t| if t == z { 1.0 } else { 0.0 }).collect())
        .collect();
    let hmm = Hmm::from_probs(&init, &chain, &emit).unwrap();

    // the same chain as a context policy of order 1
    let table_size = 64;
    let mut policy = ContextPolicy::zeros(1, table_size, v);
    for prev in 0..v as u32 {
        let cid = policy.context_id(&[prev]) as usize;
        for (t, &p) in chain[prev as usize].iter().enumerate() {
            policy.logits_mut()[cid * v + t] = if t == eos { -60.0 } else { p.ln() };
        }
    }

    // short phrase over content tokens
    let phrase: Vec<u32> = (0..phrase_len).map(|_| rng.gen_range(0..content_tokens as u32)).collect();
    let constraint = KeyphraseConstraint::new("needle", vec![phrase]).unwrap();
    let dfa = build_keyphrase_dfa(&constraint, &vocab).unwrap();

    let prompt = vec![rng.gen_range(0..content_tokens as u32)];
    MarkovInstance { vocab, hmm, policy, dfa, constraint, prompt }
}

/// Random full-support HMM drawn from Dirichlet(1) rows.
pub fn random_hmm<R: Rng>(rng: &mut R, states: usize, vocab_size: usize) -> Hmm {
    let mut row = |n: usize| -> Vec<f64> {
        let mut r: Vec<f64> = (0..n).map(|_| -(rng.gen::<f64>().max(1e-12)).ln() + 0.02).collect();
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|x| *x /= s);
        r
    };
    let init = row(states);
    let trans: Vec<Vec<f64>> = (0..states).map(|_| row(states)).collect();
    let emit: Vec<Vec<f64>> = (0..states).map(|_| row(vocab_size)).collect();
    Hmm::from_probs(&init, &trans, &emit).unwrap()
}

/// Random 1-2 phrase constraint over the content tokens of a tiny vocab.
pub fn random_constraint<R: Rng>(
    rng: &mut R,
    vocab: &Vocab,
    max_phrases: usize,
    max_phrase_len: usize,
) -> (KeyphraseConstraint, KeyphraseDfa) {
    let content = vocab.size() as u32 - 1;
    loop {
        let n_phrases = rng.gen_range(1..=max_phrases);
        let phrases: Vec<Vec<u32>> = (0..n_phrases)
            .map(|_| {
                let len = rng.gen_range(1..=max_phrase_len);
                (0..len).map(|_| rng.gen_range(0..content)).collect()
            })
            .collect();
        let c = KeyphraseConstraint::new("c", phrases).unwrap();
        if let Ok(dfa) = build_keyphrase_dfa(&c, vocab) {
            if dfa.state_count() <= EnumerationBudget::default().max_dfa_states {
                return (c, dfa);
            }
        }
    }
}

/// Outcome of one verification suite run.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub instances: usize,
    pub checks: usize,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub elapsed: std::time::Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_abs_error <= self.tolerance
    }
}

impl std::fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} over {} instances ({} checks), max abs error {:.3e} (tolerance {:.1e}, {:.2?})",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.instances,
            self.checks,
            self.max_abs_error,
            self.tolerance,
            self.elapsed
        )
    }
}

/// Guidance exactness: DP gamma against enumerated conditional acceptance
/// probabilities on random tiny instances.
pub fn run_gamma_suite(instances: usize, seed: u64) -> SuiteReport {
    use crate::guidance::{advance_session, build_guidance_tables, gamma_all_tokens, GuidanceSession};
    use std::sync::Arc;

    let start = std::time::Instant::now();
    let budget = EnumerationBudget::default();
    let mut max_err = 0.0f64;
    let mut checks = 0usize;
    for i in 0..instances as u64 {
        let mut rng = crate::rng::derive_rng(seed, &[90, i]);
        let content = rng.gen_range(2..=3usize);
        let vocab = tiny_vocab(content);
        let states = rng.gen_range(1..=3usize);
        let hmm = random_hmm(&mut rng, states, vocab.size());
        let dfa = loop {
            let (_, dfa) = random_constraint(&mut rng, &vocab, 2, 2);
            if dfa.state_count() <= 4 {
                break dfa;
            }
        };
        let horizon = rng.gen_range(2..=5usize);
        let tables = build_guidance_tables(Arc::new(hmm.clone()), Arc::new(dfa.clone()), horizon);
        let mut session = GuidanceSession::start(&tables, "c", &[]);
        let mut prefix: Vec<u32> = Vec::new();
        for _ in 0..horizon {
            if session.consumed() >= horizon {
                break;
            }
            let gamma = gamma_all_tokens(&session, &tables);
            for v in 0..vocab.size() as u32 {
                let exact = if v == vocab.eos_id() {
                    if session.accepted(&tables) {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    let mut with = prefix.clone();
                    with.push(v);
                    exact_accept_probability(&hmm, &dfa, horizon - prefix.len() - 1, &with, &budget)
                        .expect("within budget")
                };
                max_err = max_err.max((gamma[v as usize].exp() - exact).abs());
                checks += 1;
            }
            let tok = rng.gen_range(0..content as u32);
            prefix.push(tok);
            advance_session(&mut session, &tables, tok);
        }
    }
    SuiteReport {
        name: "gamma",
        instances,
        checks,
        max_abs_error: max_err,
        tolerance: 1e-9,
        elapsed: start.elapsed(),
    }
}

/// Exact-conditional identity: guided measure vs conditioned policy plus the
/// constant-telescoping weight of sampled trajectories, on instances where
/// the guidance model equals the sampling process.
pub fn run_conditional_suite(instances: usize, seed: u64) -> SuiteReport {
    use crate::guidance::build_guidance_tables;
    use crate::rollout::{sample_trajectory, DEFAULT_LOG_Z_FLOOR};
    use std::sync::Arc;

    let start = std::time::Instant::now();
    let budget = EnumerationBudget::default();
    let mut max_err = 0.0f64;
    let mut checks = 0usize;
    for i in 0..instances as u64 {
        let mut rng = crate::rng::derive_rng(seed, &[91, i]);
        let inst = markov_instance(&mut rng, 3, 2);
        let horizon = 4;
        let policy = HmmPolicy::new(&inst.hmm, inst.vocab.eos_id());
        let trajs =
            exact_guided_distribution(&policy, &inst.hmm, &inst.dfa, horizon, &budget).unwrap();
        let p_alpha = exact_accept_probability(&inst.hmm, &inst.dfa, horizon, &[], &budget).unwrap();
        let mut tv = 0.0;
        for t in &trajs {
            let mut pi = 1.0;
            for k in 0..t.tokens.len() {
                pi *= policy.probs(&t.tokens[..k])[t.tokens[k] as usize];
            }
            tv += (t.mu_prob - pi / p_alpha).abs();
        }
        max_err = max_err.max(tv / 2.0);
        checks += trajs.len();

        // sampled weights through the real rollout path
        let tables = build_guidance_tables(
            Arc::new(inst.hmm.clone()),
            Arc::new(inst.dfa.clone()),
            horizon,
        );
        let p_prompt =
            exact_accept_probability(&inst.hmm, &inst.dfa, horizon, &inst.prompt, &budget).unwrap();
        for g in 0..20u64 {
            let mut traj_rng = crate::rng::derive_rng(seed, &[92, i, g]);
            let traj = sample_trajectory(
                &inst.policy,
                &tables,
                "c",
                &inst.prompt,
                0,
                DEFAULT_LOG_Z_FLOOR,
                &mut traj_rng,
            );
            if !traj.fallback {
                max_err = max_err.max((traj.weight() - p_prompt).abs());
                checks += 1;
            }
        }
    }
    SuiteReport {
        name: "conditional",
        instances,
        checks,
        max_abs_error: max_err,
        tolerance: 1e-9,
        elapsed: start.elapsed(),
    }
}

/// Importance-sampling unbiasedness on deadline-aware policies:
/// `sum mu * w * f` against `sum pi * f` for f = 1 and a reward-like f.
pub fn run_unbiasedness_suite(instances: usize, seed: u64) -> SuiteReport {
    let start = std::time::Instant::now();
    let budget = EnumerationBudget::default();
    let mut max_err = 0.0f64;
    let mut checks = 0usize;
    for i in 0..instances as u64 {
        let mut rng = crate::rng::derive_rng(seed, &[93, i]);
        let vocab = tiny_vocab(3);
        let hmm = random_hmm(&mut rng, 3, vocab.size());
        let (_, dfa) = random_constraint(&mut rng, &vocab, 2, 2);
        let horizon = 4;
        let mut base = ContextPolicy::zeros(2, 64, vocab.size());
        for l in base.logits_mut() {
            *l = rng.gen::<f64>() * 2.0 - 1.0;
        }
        let feasible =
            FeasiblePolicy::new(WithEos(base, vocab.eos_id()), &dfa, horizon, vocab.eos_id());
        let trajs = exact_guided_distribution(&feasible, &hmm, &dfa, horizon, &budget).unwrap();
        let reward =
            |tau: &[u32]| if crate::lexicon::contains_phrase(tau, &[0]) { 1.0 } else { -1.0 };
        let lhs_one: f64 = trajs.iter().map(|t| t.mu_prob * t.weight).sum();
        let rhs_one = exact_policy_expectation(&feasible, &|_| 1.0, horizon, &budget).unwrap();
        let lhs_r: f64 = trajs.iter().map(|t| t.mu_prob * t.weight * reward(&t.tokens)).sum();
        let rhs_r = exact_policy_expectation(&feasible, &reward, horizon, &budget).unwrap();
        max_err = max_err.max((lhs_one - rhs_one).abs()).max((lhs_r - rhs_r).abs());
        checks += 2;
    }
    SuiteReport {
        name: "unbiasedness",
        instances,
        checks,
        max_abs_error: max_err,
        tolerance: 1e-9,
        elapsed: start.elapsed(),
    }
}

/// DFA-vs-naive-matcher equivalence on random constraints and strings
/// (errors count mismatches).
pub fn run_dfa_suite(instances: usize, seed: u64) -> SuiteReport {
    let start = std::time::Instant::now();
    let mut mismatches = 0usize;
    let mut checks = 0usize;
    for i in 0..instances as u64 {
        let mut rng = crate::rng::derive_rng(seed, &[94, i]);
        let content = rng.gen_range(2..=4usize);
        let vocab = tiny_vocab(content);
        let (constraint, dfa) = random_constraint(&mut rng, &vocab, 2, 3);
        let len = rng.gen_range(0..=8usize);
        let string: Vec<u32> = (0..len).map(|_| rng.gen_range(0..vocab.size() as u32)).collect();
        let stripped: Vec<u32> =
            string.iter().copied().filter(|&t| t != vocab.eos_id()).collect();
        let naive = constraint
            .phrases
            .iter()
            .any(|p| crate::lexicon::contains_phrase(&stripped, p));
        if dfa.accepts(&string) != naive {
            mismatches += 1;
        }
        checks += 1;
    }
    SuiteReport {
        name: "dfa",
        instances,
        checks,
        max_abs_error: mismatches as f64,
        tolerance: 0.0,
        elapsed: start.elapsed(),
    }
}
