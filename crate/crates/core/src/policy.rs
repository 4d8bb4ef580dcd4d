//! Differentiable tabular softmax policy over hashed context windows.
//!
//! A context is the trailing `ctx_order` token ids of the prefix, mapped to a
//! row of the logit table by a fixed polynomial rolling hash
//! (`h = h * 1000003 + token + 1`, wrapping, then `h mod table_size`).
//! Hash collisions are accepted; they act as weight tying. Temperature is
//! fixed at 1. Gradients of log-probabilities are closed form:
//! `d log pi(x|c) / d logit(c, v) = 1{v=x} - softmax(c)(v)`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::log_sum_exp;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("non-finite gradient entry at (context {0}, token {1})")]
    NonFiniteGradient(u32, u32),
    #[error("non-finite logit after update")]
    NonFiniteLogit,
}

const HASH_MULTIPLIER: u64 = 1_000_003;

/// Tabular softmax policy: `table_size x vocab_size` logits indexed by a
/// hashed window of the last `ctx_order` tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextPolicy {
    ctx_order: usize,
    table_size: usize,
    vocab_size: usize,
    logits: Vec<f64>,
}

impl ContextPolicy {
    /// All-zero logits: uniform next-token distribution at every context.
    pub fn zeros(ctx_order: usize, table_size: usize, vocab_size: usize) -> Self {
        Self { ctx_order, table_size, vocab_size, logits: vec![0.0; table_size * vocab_size] }
    }

    pub fn from_logits(
        ctx_order: usize,
        table_size: usize,
        vocab_size: usize,
        logits: Vec<f64>,
    ) -> Self {
        assert_eq!(logits.len(), table_size * vocab_size);
        assert!(logits.iter().all(|l| l.is_finite()), "logits must be finite");
        Self { ctx_order, table_size, vocab_size, logits }
    }

    pub fn ctx_order(&self) -> usize {
        self.ctx_order
    }

    pub fn table_size(&self) -> usize {
        self.table_size
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    /// Hash of the trailing `ctx_order` tokens (fewer when the prefix is
    /// shorter).
    pub fn context_id(&self, context: &[u32]) -> u32 {
        let start = context.len().saturating_sub(self.ctx_order);
        let mut h: u64 = 0;
        for &t in &context[start..] {
            h = h.wrapping_mul(HASH_MULTIPLIER).wrapping_add(t as u64 + 1);
        }
        (h % self.table_size as u64) as u32
    }

    /// Log-softmax of the logits row for the hashed context.
    pub fn next_token_log_probs(&self, context: &[u32]) -> Vec<f64> {
        let cid = self.context_id(context) as usize;
        let row = &self.logits[cid * self.vocab_size..(cid + 1) * self.vocab_size];
        let lse = log_sum_exp(row);
        row.iter().map(|&l| l - lse).collect()
    }

    /// Probability-space softmax row; used by gradient accumulation.
    pub fn next_token_probs(&self, context: &[u32]) -> (u32, Vec<f64>) {
        let cid = self.context_id(context);
        let row =
            &self.logits[cid as usize * self.vocab_size..(cid as usize + 1) * self.vocab_size];
        let lse = log_sum_exp(row);
        (cid, row.iter().map(|&l| (l - lse).exp()).collect())
    }

    /// Gradient descent step on the training copy: `logits -= lr * grad`.
    pub fn apply_update(&mut self, grad: &PolicyGradient, lr: f64) -> Result<(), PolicyError> {
        for (&(c, v), &g) in &grad.entries {
            if !g.is_finite() {
                return Err(PolicyError::NonFiniteGradient(c, v));
            }
        }
        for (&(c, v), &g) in &grad.entries {
            let slot = &mut self.logits[c as usize * self.vocab_size + v as usize];
            *slot -= lr * g;
            if !slot.is_finite() {
                return Err(PolicyError::NonFiniteLogit);
            }
        }
        Ok(())
    }
}

/// Sparse accumulation of loss gradients keyed by (context id, token id).
///
/// Entries touch disjoint logit cells, so the final applied table is
/// independent of map iteration order; accumulation order is the (fixed)
/// order of `accumulate` calls.
#[derive(Debug, Clone, Default)]
pub struct PolicyGradient {
    entries: HashMap<(u32, u32), f64>,
}

impl PolicyGradient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, context_id: u32, token: u32) -> f64 {
        self.entries.get(&(context_id, token)).copied().unwrap_or(0.0)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(u32, u32), &f64)> {
        self.entries.iter()
    }

    pub fn add(&mut self, context_id: u32, token: u32, value: f64) {
        *self.entries.entry((context_id, token)).or_insert(0.0) += value;
    }

    /// Accumulates `coeff * d log pi(token | context) / d logits` given the
    /// softmax row for the context.
    pub fn accumulate_log_prob_grad(
        &mut self,
        context_id: u32,
        probs: &[f64],
        token: u32,
        coeff: f64,
    ) {
        for (v, &p) in probs.iter().enumerate() {
            let indicator = if v as u32 == token { 1.0 } else { 0.0 };
            self.add(context_id, v as u32, coeff * (indicator - p));
        }
    }
}

/// Gradient of `log pi(token | context)` with respect to the logits.
pub fn log_prob_grad(policy: &ContextPolicy, context: &[u32], token: u32) -> PolicyGradient {
    let (cid, probs) = policy.next_token_probs(context);
    let mut grad = PolicyGradient::new();
    grad.accumulate_log_prob_grad(cid, &probs, token, 1.0);
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    #[test]
    fn zero_row_is_uniform() {
        let p = ContextPolicy::zeros(3, 64, 4);
        let lp = p.next_token_log_probs(&[1, 2]);
        for &l in &lp {
            assert!((l - 0.25f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn peaked_logit_matches_direct_softmax() {
        let mut p = ContextPolicy::zeros(2, 16, 3);
        let cid = p.context_id(&[5, 7]) as usize;
        p.logits_mut()[cid * 3 + 1] = 10.0;
        let lp = p.next_token_log_probs(&[5, 7]);
        let denom = 10.0f64.exp() + 2.0; // e^10 + e^0 + e^0
        assert!((lp[1].exp() - 10.0f64.exp() / denom).abs() < 1e-12);
        let total: f64 = lp.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn context_window_ignores_older_tokens() {
        let p = ContextPolicy::zeros(3, 4096, 5);
        let a = p.context_id(&[9, 1, 2, 3]);
        let b = p.context_id(&[4, 1, 2, 3]);
        assert_eq!(a, b);
        let short = p.context_id(&[1, 2, 3]);
        assert_eq!(a, short);
    }

    #[test]
    fn uniform_gradient_closed_form() {
        let p = ContextPolicy::zeros(1, 8, 4);
        let g = log_prob_grad(&p, &[0], 2);
        let cid = p.context_id(&[0]);
        assert!((g.get(cid, 0) + 0.25).abs() < 1e-12);
        assert!((g.get(cid, 1) + 0.25).abs() < 1e-12);
        assert!((g.get(cid, 2) - 0.75).abs() < 1e-12);
        assert!((g.get(cid, 3) + 0.25).abs() < 1e-12);
    }

    #[test]
    fn gradient_entries_sum_to_zero() {
        let mut p = ContextPolicy::zeros(2, 32, 5);
        let mut rng = derive_rng(2, &[11]);
        for l in p.logits_mut() {
            *l = rng.gen::<f64>() * 2.0 - 1.0;
        }
        let g = log_prob_grad(&p, &[3, 1], 4);
        let cid = p.context_id(&[3, 1]);
        let sum: f64 = (0..5).map(|v| g.get(cid, v)).sum();
        assert!(sum.abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let mut rng = derive_rng(6, &[12]);
        let mut p = ContextPolicy::zeros(3, 128, 6);
        for l in p.logits_mut() {
            *l = rng.gen::<f64>() * 2.0 - 1.0;
        }
        let h = 1e-5;
        for _ in 0..50 {
            let ctx: Vec<u32> = (0..3).map(|_| rng.gen_range(0..6u32)).collect();
            let x = rng.gen_range(0..6u32);
            let probe_v = rng.gen_range(0..6u32);
            let cid = p.context_id(&ctx);
            let analytic = log_prob_grad(&p, &ctx, x).get(cid, probe_v);
            let idx = cid as usize * 6 + probe_v as usize;
            let mut plus = p.clone();
            plus.logits_mut()[idx] += h;
            let mut minus = p.clone();
            minus.logits_mut()[idx] -= h;
            let numeric =
                (plus.next_token_log_probs(&ctx)[x as usize] - minus.next_token_log_probs(&ctx)[x as usize])
                    / (2.0 * h);
            let denom = analytic.abs().max(1e-3);
            assert!(
                ((analytic - numeric) / denom).abs() <= 1e-4,
                "analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn apply_update_zero_grad_and_zero_lr_are_identity() {
        let mut p = ContextPolicy::zeros(1, 8, 3);
        let before = p.clone();
        p.apply_update(&PolicyGradient::new(), 0.5).unwrap();
        assert_eq!(p, before);
        let mut g = PolicyGradient::new();
        g.add(2, 1, 3.5);
        p.apply_update(&g, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn single_entry_update_is_exact() {
        let mut p = ContextPolicy::zeros(1, 8, 3);
        let mut g = PolicyGradient::new();
        g.add(2, 1, 0.25);
        p.apply_update(&g, 0.1).unwrap();
        assert_eq!(p.logits()[2 * 3 + 1], -0.1 * 0.25);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = ContextPolicy::zeros(1, 8, 3);
        let mut g = PolicyGradient::new();
        g.add(0, 0, f64::NAN);
        assert!(matches!(
            p.apply_update(&g, 0.1),
            Err(PolicyError::NonFiniteGradient(0, 0))
        ));
    }

    #[test]
    fn snapshot_isolated_from_updates() {
        let mut p = ContextPolicy::zeros(2, 16, 4);
        let snapshot = p.clone();
        let snapshot_bits: Vec<u64> = snapshot.logits().iter().map(|l| l.to_bits()).collect();
        let mut g = PolicyGradient::new();
        for c in 0..16u32 {
            for v in 0..4u32 {
                g.add(c, v, 0.01 * (c + v) as f64);
            }
        }
        for _ in 0..10 {
            p.apply_update(&g, 0.05).unwrap();
        }
        let after: Vec<u64> = snapshot.logits().iter().map(|l| l.to_bits()).collect();
        assert_eq!(snapshot_bits, after);
    }
}
