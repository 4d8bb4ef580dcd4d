//! Synthetic verifiable task: reward gated on a sparse lexical key.
//!
//! In needle mode a completion scores +1 only when it contains the key
//! phrase contiguously AND the answer marker followed by the correct answer
//! token after the key phrase ends; plain mode drops the key requirement.
//! The correct answer is the final prompt token, so a short-context tabular
//! policy can express the optimal strategy, while the key phrase itself is
//! calibrated to be vanishingly rare under the initial policy. That gives
//! guided exploration a measurable causal edge: high-reward completions
//! exist but are essentially never sampled unguided.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{contains_phrase, tokenize, LexiconError, Vocab};
use crate::policy::ContextPolicy;
use crate::rollout::sample_unguided_trajectory;

#[derive(Debug, Error)]
pub enum ToyworldError {
    #[error("calibration failed after {attempts} draws (best unguided key rate {best_rate})")]
    CalibrationFailed { attempts: usize, best_rate: f64 },
    #[error("bad task spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    Needle,
    Plain,
}

/// Reward convention: correctness in {-1, +1}.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RewardSpec {
    pub mode: TaskMode,
}

impl RewardSpec {
    pub const CORRECT: f64 = 1.0;
    pub const INCORRECT: f64 = -1.0;
}

/// On-disk task description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub format: String,
    pub mode: TaskMode,
    pub tokens: Vec<String>,
    pub eos_token: String,
    pub answer_marker: String,
    pub answer_tokens: Vec<String>,
    pub key_phrase: String,
    pub prompt_len: usize,
}

pub const TASK_FORMAT: &str = "ctrlr-task-v1";

/// The task instance: vocab, key phrase, answer map, mode.
#[derive(Debug, Clone)]
pub struct ToyTask {
    vocab: Vocab,
    mode: TaskMode,
    prompt_len: usize,
    key_phrase: Vec<u32>,
    answer_marker: u32,
    answer_tokens: Vec<u32>,
}

impl ToyTask {
    pub fn from_spec(spec: &TaskSpec) -> Result<Self, ToyworldError> {
        if spec.format != TASK_FORMAT {
            return Err(ToyworldError::BadSpec(format!("unknown format {:?}", spec.format)));
        }
        if spec.prompt_len == 0 {
            return Err(ToyworldError::BadSpec("prompt_len must be >= 1".into()));
        }
        let eos_id = spec
            .tokens
            .iter()
            .position(|t| *t == spec.eos_token)
            .ok_or_else(|| ToyworldError::BadSpec("eos token not in vocab".into()))?;
        let vocab = Vocab::new(spec.tokens.clone(), eos_id as u32)?;
        let answer_marker = vocab
            .id_of(&spec.answer_marker)
            .ok_or_else(|| ToyworldError::BadSpec("answer marker not in vocab".into()))?;
        let answer_tokens = spec
            .answer_tokens
            .iter()
            .map(|t| {
                vocab
                    .id_of(t)
                    .ok_or_else(|| ToyworldError::BadSpec(format!("answer token {t:?} not in vocab")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if answer_tokens.is_empty() {
            return Err(ToyworldError::BadSpec("no answer tokens".into()));
        }
        let key_phrase = tokenize(&spec.key_phrase, &vocab)?;
        Ok(Self { vocab, mode: spec.mode, prompt_len: spec.prompt_len, key_phrase, answer_marker, answer_tokens })
    }

    /// The desk-scale default: ~40 tokens (letters, digits, key words, the
    /// answer marker, EOS), key phrase "go back", answers = digits, answer =
    /// final prompt digit.
    pub fn default_desk(mode: TaskMode) -> Self {
        Self::from_spec(&Self::default_spec(mode)).unwrap()
    }

    pub fn default_spec(mode: TaskMode) -> TaskSpec {
        let mut tokens: Vec<String> = Vec::new();
        for c in b'a'..=b't' {
            tokens.push((c as char).to_string());
        }
        for d in 0..10 {
            tokens.push(d.to_string());
        }
        for w in ["go", "back", "now", "try", "again", "let", "me"] {
            tokens.push(w.to_string());
        }
        tokens.push("ANSWER".to_string());
        tokens.push("<eos>".to_string());
        TaskSpec {
            format: TASK_FORMAT.to_string(),
            mode,
            tokens,
            eos_token: "<eos>".to_string(),
            answer_marker: "ANSWER".to_string(),
            answer_tokens: (0..10).map(|d| d.to_string()).collect(),
            key_phrase: "go back".to_string(),
            prompt_len: 1,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn mode(&self) -> TaskMode {
        self.mode
    }

    pub fn key_phrase(&self) -> &[u32] {
        &self.key_phrase
    }

    pub fn answer_marker(&self) -> u32 {
        self.answer_marker
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    /// Deterministic answer map: the final prompt token.
    pub fn answer_token(&self, prompt: &[u32]) -> u32 {
        *prompt.last().expect("prompt is nonempty")
    }
}

/// Draws a prompt (uniform answer tokens) plus a content fingerprint id.
pub fn generate_prompt<R: Rng>(task: &ToyTask, rng: &mut R) -> (Vec<u32>, u64) {
    let prompt: Vec<u32> = (0..task.prompt_len)
        .map(|_| task.answer_tokens[rng.gen_range(0..task.answer_tokens.len())])
        .collect();
    let id = prompt
        .iter()
        .fold(0u64, |h, &t| h.wrapping_mul(1_000_003).wrapping_add(t as u64 + 1));
    (prompt, id)
}

/// Pure reward: +1 / -1 per the task mode.
pub fn evaluate_reward(task: &ToyTask, prompt: &[u32], completion: &[u32]) -> f64 {
    let eos = task.vocab.eos_id();
    let content_end = completion.iter().position(|&t| t == eos).unwrap_or(completion.len());
    let content = &completion[..content_end];
    let answer = task.answer_token(prompt);

    let answered_at = |from: usize| -> bool {
        (from..content.len().saturating_sub(1))
            .any(|q| content[q] == task.answer_marker && content[q + 1] == answer)
    };

    let correct = match task.mode {
        TaskMode::Plain => answered_at(0),
        TaskMode::Needle => match first_occurrence_end(content, &task.key_phrase) {
            Some(key_end) => answered_at(key_end),
            None => false,
        },
    };
    if correct {
        RewardSpec::CORRECT
    } else {
        RewardSpec::INCORRECT
    }
}

fn first_occurrence_end(haystack: &[u32], phrase: &[u32]) -> Option<usize> {
    if phrase.is_empty() || phrase.len() > haystack.len() {
        return None;
    }
    (0..=haystack.len() - phrase.len())
        .find(|&s| &haystack[s..s + phrase.len()] == phrase)
        .map(|s| s + phrase.len())
}

/// How many unguided rollouts the calibration measurement uses.
pub const CALIBRATION_ROLLOUTS: usize = 10_000;
/// The key phrase must be rarer than this at initialization.
pub const CALIBRATION_TARGET: f64 = 0.01;
/// Minimum next-token probability enforced at every context.
pub const PROBABILITY_FLOOR: f64 = 1e-4;

const MAX_CALIBRATION_DRAWS: usize = 20;
const KEY_TOKEN_BIAS: f64 = -2.2;
const EOS_BIAS: f64 = -2.5;
const MARKER_BIAS: f64 = 1.0;
const ANSWER_TOKEN_BIAS: f64 = 1.0;
const LOGIT_CLAMP: f64 = 3.0;

/// Draws initial policy logits and certifies the sparse-structure regime:
/// the unguided key-phrase rate over [`CALIBRATION_ROLLOUTS`] rollouts must
/// be below [`CALIBRATION_TARGET`], with every token's probability above
/// [`PROBABILITY_FLOOR`] at every context. Key tokens and EOS start with a
/// negative bias, the answer marker with a small positive one.
pub fn initial_policy_params<R: Rng>(
    task: &ToyTask,
    horizon: usize,
    ctx_order: usize,
    table_size: usize,
    rng: &mut R,
) -> Result<ContextPolicy, ToyworldError> {
    let v = task.vocab.size();
    let eos = task.vocab.eos_id();
    let bias_noise = Normal::new(0.0, 0.4).unwrap();
    let cell_noise = Normal::new(0.0, 0.25).unwrap();
    let mut best_rate = f64::INFINITY;

    for _attempt in 0..MAX_CALIBRATION_DRAWS {
        let mut bias = vec![0.0f64; v];
        for (t, b) in bias.iter_mut().enumerate() {
            let t = t as u32;
            *b = bias_noise.sample(rng)
                + if task.key_phrase.contains(&t) {
                    KEY_TOKEN_BIAS
                } else if t == eos {
                    EOS_BIAS
                } else if t == task.answer_marker {
                    MARKER_BIAS
                } else if task.answer_tokens.contains(&t) {
                    ANSWER_TOKEN_BIAS
                } else {
                    0.0
                };
        }
        let mut logits = vec![0.0f64; table_size * v];
        for (i, l) in logits.iter_mut().enumerate() {
            *l = (bias[i % v] + cell_noise.sample(rng)).clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        }
        let policy = ContextPolicy::from_logits(ctx_order, table_size, v, logits);

        let floor_ok = (0..table_size).all(|c| {
            // any context hashing to row c sees this distribution
            let row = &policy.logits()[c * v..(c + 1) * v];
            let lse = crate::math::log_sum_exp(row);
            row.iter().all(|&l| (l - lse).exp() > PROBABILITY_FLOOR)
        });
        if !floor_ok {
            continue;
        }

        let mut hits = 0usize;
        for i in 0..CALIBRATION_ROLLOUTS {
            let (prompt, _) = generate_prompt(task, rng);
            let traj = sample_unguided_trajectory(
                &policy,
                horizon,
                eos,
                None,
                "",
                &prompt,
                i as u64,
                rng,
            );
            if contains_phrase(&traj.tokens, &task.key_phrase) {
                hits += 1;
            }
        }
        let rate = hits as f64 / CALIBRATION_ROLLOUTS as f64;
        best_rate = best_rate.min(rate);
        if rate < CALIBRATION_TARGET {
            return Ok(policy);
        }
    }
    Err(ToyworldError::CalibrationFailed { attempts: MAX_CALIBRATION_DRAWS, best_rate })
}

/// Samples the HMM-distillation corpus: prompts from the task, unguided
/// continuations from the policy (EOS included when it occurs, capped at
/// `continuation_len`), each sequence being prompt ++ continuation.
pub fn sample_policy_corpus<R: Rng>(
    policy: &ContextPolicy,
    task: &ToyTask,
    sequences: usize,
    continuation_len: usize,
    rng: &mut R,
) -> Vec<Vec<u32>> {
    let eos = task.vocab.eos_id();
    (0..sequences)
        .map(|i| {
            let (prompt, _) = generate_prompt(task, rng);
            let traj = sample_unguided_trajectory(
                policy,
                continuation_len,
                eos,
                None,
                "",
                &prompt,
                i as u64,
                rng,
            );
            let mut seq = prompt;
            seq.extend_from_slice(&traj.tokens);
            seq
        })
        .collect()
}
