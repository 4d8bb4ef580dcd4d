//! Guidance marginals: probability that a keyphrase constraint will still be
//! satisfied, for every candidate next token.
//!
//! The backward table `b(k, z, s)` holds the log-probability, under the HMM,
//! that the DFA reaches an accepting state within `k` further tokens given
//! current latent state `z` and DFA state `s`:
//!
//! `b(k, z, s) = lse_{z'}( log A(z,z') + lse_v( log B(z',v) + b(k-1, z', step(s,v)) ) )`
//!
//! The inner sum over tokens is grouped by destination DFA state, so each
//! (k, s) cell costs O(h^2 + h * out-degree) after an O(m h |V|) grouping
//! pass, and the whole table costs O(T m h^2) plus the grouping term.
//!
//! Tables are immutable once built and are shared across every rollout until
//! the HMM is refit. A [`GuidanceSession`] owns the per-trajectory forward
//! state and DFA position.

use std::sync::Arc;

use crate::hmm::{forward_init, forward_update, ForwardState, Hmm};
use crate::lexicon::KeyphraseDfa;
use crate::math::{log_add_exp, log_sum_exp};

/// Backward acceptance table for one (HMM, DFA, horizon) triple.
#[derive(Debug, Clone)]
pub struct GuidanceTables {
    horizon: usize,
    hmm: Arc<Hmm>,
    dfa: Arc<KeyphraseDfa>,
    /// log P(accept within k tokens | z, s), laid out (k * h + z) * m + s
    log_accept: Vec<f64>,
}

impl GuidanceTables {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn hmm(&self) -> &Arc<Hmm> {
        &self.hmm
    }

    pub fn dfa(&self) -> &Arc<KeyphraseDfa> {
        &self.dfa
    }

    #[inline]
    pub fn log_accept_within(&self, k: usize, z: usize, s: u32) -> f64 {
        let m = self.dfa.state_count();
        self.log_accept[(k * self.hmm.states() + z) * m + s as usize]
    }
}

/// Builds the backward table for horizons 0..=T.
pub fn build_guidance_tables(hmm: Arc<Hmm>, dfa: Arc<KeyphraseDfa>, horizon: usize) -> GuidanceTables {
    assert!(horizon >= 1, "horizon must be >= 1");
    assert_eq!(hmm.vocab_size(), dfa.vocab_size(), "HMM and DFA vocab sizes differ");
    let h = hmm.states();
    let m = dfa.state_count();
    let v = dfa.vocab_size();

    // Per source state: destination groups with per-latent emission log-mass
    // log sum_{v: step(s,v)=d} B(z', v). Independent of k.
    let mut groups: Vec<Vec<(u32, Vec<f64>)>> = Vec::with_capacity(m);
    for s in 0..m as u32 {
        let mut by_dest: Vec<Option<Vec<f64>>> = vec![None; m];
        if !dfa.is_accept(s) {
            for t in 0..v as u32 {
                let d = dfa.step(s, t) as usize;
                let masses = by_dest[d].get_or_insert_with(|| vec![f64::NEG_INFINITY; h]);
                for (z2, slot) in masses.iter_mut().enumerate() {
                    *slot = log_add_exp(*slot, hmm.log_emit(z2, t));
                }
            }
        }
        groups.push(
            by_dest
                .into_iter()
                .enumerate()
                .filter_map(|(d, masses)| masses.map(|ms| (d as u32, ms)))
                .collect(),
        );
    }

    let cell = |k: usize, z: usize, s: usize| (k * h + z) * m + s;
    let mut table = vec![f64::NEG_INFINITY; (horizon + 1) * h * m];
    for z in 0..h {
        for s in 0..m {
            if dfa.is_accept(s as u32) {
                table[cell(0, z, s)] = 0.0;
            }
        }
    }

    let mut inner = vec![f64::NEG_INFINITY; h * m];
    let mut scratch = vec![f64::NEG_INFINITY; h];
    for k in 1..=horizon {
        // inner[z'][s] = lse_d( mass(s, z', d) + b(k-1, z', d) )
        for s in 0..m {
            if dfa.is_accept(s as u32) {
                continue;
            }
            for z2 in 0..h {
                let mut acc = f64::NEG_INFINITY;
                for (d, masses) in &groups[s] {
                    acc = log_add_exp(acc, masses[z2] + table[cell(k - 1, z2, *d as usize)]);
                }
                inner[z2 * m + s] = acc;
            }
        }
        for s in 0..m {
            if dfa.is_accept(s as u32) {
                for z in 0..h {
                    table[cell(k, z, s)] = 0.0;
                }
                continue;
            }
            for z in 0..h {
                for z2 in 0..h {
                    scratch[z2] = hmm.log_trans(z, z2) + inner[z2 * m + s];
                }
                table[cell(k, z, s)] = log_sum_exp(&scratch).min(0.0);
            }
        }
    }

    GuidanceTables { horizon, hmm, dfa, log_accept: table }
}

/// Per-trajectory guidance cursor: HMM forward state and DFA position over
/// the consumed prefix. The prompt is absorbed by [`GuidanceSession::start`]
/// without advancing the deadline clock; `consumed` counts completion tokens
/// against the horizon.
#[derive(Debug, Clone)]
pub struct GuidanceSession {
    constraint_id: String,
    forward: Option<ForwardState>,
    dfa_state: u32,
    consumed: usize,
    horizon: usize,
    fallback: bool,
}

impl GuidanceSession {
    pub fn start(tables: &GuidanceTables, constraint_id: impl Into<String>, prompt: &[u32]) -> Self {
        let mut session = Self {
            constraint_id: constraint_id.into(),
            forward: None,
            dfa_state: tables.dfa().start(),
            consumed: 0,
            horizon: tables.horizon(),
            fallback: false,
        };
        for &t in prompt {
            session.absorb(tables, t);
        }
        session
    }

    fn absorb(&mut self, tables: &GuidanceTables, token: u32) {
        let hmm = tables.hmm();
        let next = match &self.forward {
            None => forward_init(hmm, token),
            Some(state) => forward_update(hmm, state, token),
        };
        if !next.log_evidence.is_finite() {
            // The HMM assigns zero mass to this prefix; the posterior is
            // undefined, so guidance cannot continue.
            self.fallback = true;
        }
        self.forward = Some(next);
        self.dfa_state = tables.dfa().step(self.dfa_state, token);
    }

    pub fn constraint_id(&self) -> &str {
        &self.constraint_id
    }

    pub fn dfa_state(&self) -> u32 {
        self.dfa_state
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn remaining(&self) -> usize {
        self.horizon - self.consumed
    }

    pub fn accepted(&self, tables: &GuidanceTables) -> bool {
        tables.dfa().is_accept(self.dfa_state)
    }

    pub fn in_fallback(&self) -> bool {
        self.fallback
    }

    pub fn enter_fallback(&mut self) {
        self.fallback = true;
    }

    /// log p(x_{1..t}) of everything absorbed so far (prompt included).
    pub fn log_evidence(&self) -> Option<f64> {
        self.forward.as_ref().map(|f| f.log_evidence)
    }

    pub fn forward_state(&self) -> Option<&ForwardState> {
        self.forward.as_ref()
    }

    /// Predictive distribution over the next latent state,
    /// `log p(z_{t+1} | x_{1..t})` (the prior for a fresh session).
    fn pred_log(&self, hmm: &Hmm) -> Vec<f64> {
        let h = hmm.states();
        match &self.forward {
            None => (0..h).map(|z| hmm.log_init(z)).collect(),
            Some(f) => {
                let mut scratch = vec![f64::NEG_INFINITY; h];
                let mut pred = vec![f64::NEG_INFINITY; h];
                for (z2, slot) in pred.iter_mut().enumerate() {
                    for (z, cell) in scratch.iter_mut().enumerate() {
                        *cell = f.log_alpha[z] - f.log_evidence + hmm.log_trans(z, z2);
                    }
                    *slot = log_sum_exp(&scratch);
                }
                pred
            }
        }
    }
}

/// Log guidance values `log gamma(alpha | prefix, v)` for every candidate
/// next token.
///
/// `gamma(v)` is the probability that the constraint is satisfied by the end
/// of the horizon given the prefix and candidate `v`. EOS terminates the
/// trajectory, so `gamma(EOS)` is the acceptance indicator of the current
/// DFA state. Once the session is accepted every value is exactly 0 (prob 1)
/// and no guidance pressure remains.
pub fn gamma_all_tokens(session: &GuidanceSession, tables: &GuidanceTables) -> Vec<f64> {
    assert!(session.consumed < session.horizon, "horizon exhausted");
    assert!(!session.fallback, "session is in fallback");
    let hmm = tables.hmm();
    let dfa = tables.dfa();
    let v_count = hmm.vocab_size();
    if session.accepted(tables) {
        return vec![0.0; v_count];
    }
    let remaining_after = session.horizon - session.consumed - 1;
    let pred = session.pred_log(hmm);
    let h = hmm.states();
    let eos = dfa.eos_id();
    let mut out = vec![f64::NEG_INFINITY; v_count];
    let mut num_terms = vec![f64::NEG_INFINITY; h];
    let mut den_terms = vec![f64::NEG_INFINITY; h];
    for (v, slot) in out.iter_mut().enumerate() {
        let v = v as u32;
        if v == eos {
            continue; // not accepted here, so gamma(EOS) = 0
        }
        let dest = dfa.step(session.dfa_state, v);
        for z2 in 0..h {
            let base = pred[z2] + hmm.log_emit(z2, v);
            den_terms[z2] = base;
            num_terms[z2] = base + tables.log_accept_within(remaining_after, z2, dest);
        }
        let den = log_sum_exp(&den_terms);
        if den == f64::NEG_INFINITY {
            continue; // token impossible under the HMM: no guidance signal
        }
        *slot = (log_sum_exp(&num_terms) - den).min(0.0);
    }
    out
}

/// Advances the session by one sampled token: forward update, DFA step,
/// deadline tick.
pub fn advance_session(session: &mut GuidanceSession, tables: &GuidanceTables, token: u32) {
    assert!(session.consumed < session.horizon, "horizon exhausted");
    session.absorb(tables, token);
    session.consumed += 1;
}
