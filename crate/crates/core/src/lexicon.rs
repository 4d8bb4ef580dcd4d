//! Vocabulary, keyphrase constraints, and their compilation to dense DFAs.
//!
//! A constraint is an OR over keyphrases (token-id sequences). It compiles to
//! a deterministic automaton that accepts exactly the sequences containing
//! some phrase as a contiguous run of emitted content. Accepting states are
//! absorbing, and the EOS token never advances matching (it is not content),
//! so "accepted ever" and "accepted at the end" coincide.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LexiconError {
    #[error("empty phrase")]
    EmptyPhrase,
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("constraint has no phrases")]
    EmptyConstraint,
    #[error("token id {0} out of range for vocab of size {1}")]
    TokenOutOfRange(u32, usize),
    #[error("duplicate surface token {0:?}")]
    DuplicateToken(String),
    #[error("EOS id {0} out of range for vocab of size {1}")]
    BadEosId(u32, usize),
    #[error("no accepting state reachable (every phrase contains EOS?)")]
    UnsatisfiableConstraint,
    #[error("malformed constraint file: {0}")]
    MalformedFile(String),
}

/// An ordered vocabulary of distinct surface strings with a reserved EOS id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    eos_id: u32,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>, eos_id: u32) -> Result<Self, LexiconError> {
        if eos_id as usize >= tokens.len() {
            return Err(LexiconError::BadEosId(eos_id, tokens.len()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(LexiconError::DuplicateToken(t.clone()));
            }
        }
        Ok(Self { tokens, eos_id, index })
    }

    /// Rebuilds the surface-string index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn eos_id(&self) -> u32 {
        self.eos_id
    }

    pub fn surface(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id_of(&self, surface: &str) -> Option<u32> {
        self.index.get(surface).copied()
    }
}

/// Splits a phrase on whitespace and maps each piece to its vocab id.
///
/// Matching is exact (including case): desk-scale vocabularies carry surface
/// strings verbatim.
pub fn tokenize(phrase: &str, vocab: &Vocab) -> Result<Vec<u32>, LexiconError> {
    let pieces: Vec<&str> = phrase.split_whitespace().collect();
    if pieces.is_empty() {
        return Err(LexiconError::EmptyPhrase);
    }
    pieces
        .iter()
        .map(|p| {
            vocab
                .id_of(p)
                .ok_or_else(|| LexiconError::UnknownToken((*p).to_string()))
        })
        .collect()
}

/// A named OR-of-keyphrases constraint over token ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyphraseConstraint {
    pub id: String,
    pub phrases: Vec<Vec<u32>>,
}

impl KeyphraseConstraint {
    pub fn new(id: impl Into<String>, phrases: Vec<Vec<u32>>) -> Result<Self, LexiconError> {
        if phrases.is_empty() {
            return Err(LexiconError::EmptyConstraint);
        }
        if phrases.iter().any(|p| p.is_empty()) {
            return Err(LexiconError::EmptyPhrase);
        }
        Ok(Self { id: id.into(), phrases })
    }

    /// Parses surface-string phrases against a vocab.
    pub fn from_surface(
        id: impl Into<String>,
        phrases: &[&str],
        vocab: &Vocab,
    ) -> Result<Self, LexiconError> {
        let toks = phrases
            .iter()
            .map(|p| tokenize(p, vocab))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(id, toks)
    }
}

/// On-disk constraint entry: `{"id": ..., "phrases": ["surface phrase", ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintFileEntry {
    pub id: String,
    pub phrases: Vec<String>,
}

/// Parses a constraint file (JSON array of entries) against a vocab.
pub fn parse_constraint_file(
    json: &str,
    vocab: &Vocab,
) -> Result<Vec<KeyphraseConstraint>, LexiconError> {
    let entries: Vec<ConstraintFileEntry> =
        serde_json::from_str(json).map_err(|e| LexiconError::MalformedFile(e.to_string()))?;
    entries
        .iter()
        .map(|e| {
            let phrases = e
                .phrases
                .iter()
                .map(|p| tokenize(p, vocab))
                .collect::<Result<Vec<_>, _>>()?;
            KeyphraseConstraint::new(e.id.clone(), phrases)
        })
        .collect()
}

/// Naive contiguous-subsequence search; the reference matcher the DFA is
/// tested against, also used for reward shaping and report counters.
pub fn contains_phrase(haystack: &[u32], phrase: &[u32]) -> bool {
    if phrase.is_empty() || phrase.len() > haystack.len() {
        return false;
    }
    haystack.windows(phrase.len()).any(|w| w == phrase)
}

/// Dense deterministic automaton for one keyphrase constraint.
///
/// The transition table is the determinized multi-pattern matcher (trie plus
/// failure links collapsed into `state_count x vocab_size` rows). Invariants:
/// accepting states are absorbing, and `step(s, EOS) == s` for every state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyphraseDfa {
    state_count: usize,
    vocab_size: usize,
    eos_id: u32,
    start: u32,
    transitions: Vec<u32>,
    accept: Vec<bool>,
}

impl KeyphraseDfa {
    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn eos_id(&self) -> u32 {
        self.eos_id
    }

    pub fn start(&self) -> u32 {
        self.start
    }

    pub fn is_accept(&self, state: u32) -> bool {
        self.accept[state as usize]
    }

    /// One transition; pure and total over valid (state, token) pairs.
    #[inline]
    pub fn step(&self, state: u32, token: u32) -> u32 {
        self.transitions[state as usize * self.vocab_size + token as usize]
    }

    /// Runs the automaton from the start state over a token sequence.
    pub fn scan(&self, tokens: &[u32]) -> u32 {
        tokens.iter().fold(self.start, |s, &t| self.step(s, t))
    }

    pub fn accepts(&self, tokens: &[u32]) -> bool {
        self.is_accept(self.scan(tokens))
    }
}

/// Compiles a constraint into a dense DFA over the vocab.
///
/// Construction: phrase trie, BFS failure links, dense goto table, then two
/// post-passes enforcing absorbing acceptance and the inert-EOS rule. A phrase
/// containing EOS can never match (EOS is not content); if that leaves no
/// accepting state reachable the constraint is unsatisfiable.
pub fn build_keyphrase_dfa(
    constraint: &KeyphraseConstraint,
    vocab: &Vocab,
) -> Result<KeyphraseDfa, LexiconError> {
    if constraint.phrases.is_empty() {
        return Err(LexiconError::EmptyConstraint);
    }
    let v = vocab.size();
    for phrase in &constraint.phrases {
        if phrase.is_empty() {
            return Err(LexiconError::EmptyPhrase);
        }
        for &t in phrase {
            if t as usize >= v {
                return Err(LexiconError::TokenOutOfRange(t, v));
            }
        }
    }

    // Trie over phrases.
    let mut children: Vec<HashMap<u32, u32>> = vec![HashMap::new()];
    let mut terminal: Vec<bool> = vec![false];
    for phrase in &constraint.phrases {
        let mut node = 0u32;
        for &t in phrase {
            node = match children[node as usize].get(&t) {
                Some(&c) => c,
                None => {
                    let c = children.len() as u32;
                    children.push(HashMap::new());
                    terminal.push(false);
                    children[node as usize].insert(t, c);
                    c
                }
            };
        }
        terminal[node as usize] = true;
    }

    let m = children.len();
    let mut fail = vec![0u32; m];
    let mut accept = terminal.clone();
    let mut transitions = vec![0u32; m * v];

    // BFS over the trie: failure links and dense transitions in one pass.
    let mut queue: std::collections::VecDeque<u32> = std::collections::VecDeque::new();
    for t in 0..v as u32 {
        match children[0].get(&t) {
            Some(&c) => {
                fail[c as usize] = 0;
                transitions[t as usize] = c;
                queue.push_back(c);
            }
            None => transitions[t as usize] = 0,
        }
    }
    while let Some(u) = queue.pop_front() {
        if accept[fail[u as usize] as usize] {
            accept[u as usize] = true;
        }
        for t in 0..v as u32 {
            let via_fail = transitions[fail[u as usize] as usize * v + t as usize];
            match children[u as usize].get(&t) {
                Some(&c) => {
                    fail[c as usize] = via_fail;
                    transitions[u as usize * v + t as usize] = c;
                    queue.push_back(c);
                }
                None => transitions[u as usize * v + t as usize] = via_fail,
            }
        }
    }

    // Accepting states absorb; EOS never advances matching.
    let eos = vocab.eos_id();
    for s in 0..m {
        if accept[s] {
            for t in 0..v {
                transitions[s * v + t] = s as u32;
            }
        } else {
            transitions[s * v + eos as usize] = s as u32;
        }
    }

    let dfa = KeyphraseDfa {
        state_count: m,
        vocab_size: v,
        eos_id: eos,
        start: 0,
        transitions,
        accept,
    };

    // Reachability of acceptance from the start state.
    let mut seen = vec![false; m];
    let mut stack = vec![dfa.start];
    seen[dfa.start as usize] = true;
    let mut reachable_accept = false;
    while let Some(s) = stack.pop() {
        if dfa.is_accept(s) {
            reachable_accept = true;
            break;
        }
        for t in 0..v as u32 {
            let n = dfa.step(s, t);
            if !seen[n as usize] {
                seen[n as usize] = true;
                stack.push(n);
            }
        }
    }
    if !reachable_accept {
        return Err(LexiconError::UnsatisfiableConstraint);
    }
    Ok(dfa)
}
