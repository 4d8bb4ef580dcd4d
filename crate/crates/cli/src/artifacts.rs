//! Versioned on-disk artifacts: checkpoints, constraint sets, task specs,
//! train files.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ctrlr_core::hmm::Hmm;
use ctrlr_core::lexicon::{ConstraintFileEntry, KeyphraseConstraint, Vocab};
use ctrlr_core::optimizer::TrainConfig;
use ctrlr_core::policy::ContextPolicy;
use ctrlr_core::toyworld::{TaskMode, TaskSpec, ToyTask};

pub const POLICY_FORMAT: &str = "ctrlr-policy-v1";
pub const HMM_FORMAT: &str = "ctrlr-hmm-v1";
pub const TRAIN_FORMAT: &str = "ctrlr-train-v1";
pub const DFA_SET_FORMAT: &str = "ctrlr-dfa-set-v1";

#[derive(Debug, Serialize, Deserialize)]
struct PolicyCheckpoint {
    format: String,
    policy: ContextPolicy,
}

pub fn save_policy(path: &Path, policy: &ContextPolicy) -> Result<()> {
    let ckpt = PolicyCheckpoint { format: POLICY_FORMAT.to_string(), policy: policy.clone() };
    fs::write(path, serde_json::to_string(&ckpt)?)
        .with_context(|| format!("writing policy checkpoint {}", path.display()))
}

pub fn load_policy(path: &Path) -> Result<ContextPolicy> {
    let raw = fs::read_to_string(path)
        .with_context(|| format!("reading policy checkpoint {}", path.display()))?;
    let ckpt: PolicyCheckpoint = serde_json::from_str(&raw)?;
    if ckpt.format != POLICY_FORMAT {
        bail!("unsupported policy checkpoint format {:?}", ckpt.format);
    }
    Ok(ckpt.policy)
}

#[derive(Debug, Serialize, Deserialize)]
struct HmmCheckpoint {
    format: String,
    hmm: Hmm,
}

pub fn save_hmm(path: &Path, hmm: &Hmm) -> Result<()> {
    let ckpt = HmmCheckpoint { format: HMM_FORMAT.to_string(), hmm: hmm.clone() };
    fs::write(path, serde_json::to_string(&ckpt)?)
        .with_context(|| format!("writing HMM checkpoint {}", path.display()))
}

pub fn load_hmm(path: &Path) -> Result<Hmm> {
    let raw = fs::read_to_string(path)
        .with_context(|| format!("reading HMM checkpoint {}", path.display()))?;
    let ckpt: HmmCheckpoint = serde_json::from_str(&raw)?;
    if ckpt.format != HMM_FORMAT {
        bail!("unsupported HMM checkpoint format {:?}", ckpt.format);
    }
    ckpt.hmm.validate()?;
    Ok(ckpt.hmm)
}

pub fn load_task(path: &Path) -> Result<ToyTask> {
    let raw =
        fs::read_to_string(path).with_context(|| format!("reading task spec {}", path.display()))?;
    let spec: TaskSpec = serde_json::from_str(&raw)?;
    Ok(ToyTask::from_spec(&spec)?)
}

pub fn load_constraint_entries(path: &Path) -> Result<Vec<ConstraintFileEntry>> {
    let raw = fs::read_to_string(path)
        .with_context(|| format!("reading constraint file {}", path.display()))?;
    Ok(serde_json::from_str(&raw)?)
}

pub fn compile_constraints(
    entries: &[ConstraintFileEntry],
    vocab: &Vocab,
) -> Result<Vec<KeyphraseConstraint>> {
    entries
        .iter()
        .map(|e| {
            let phrases = e
                .phrases
                .iter()
                .map(|p| ctrlr_core::lexicon::tokenize(p, vocab))
                .collect::<Result<Vec<_>, _>>()
                .with_context(|| format!("constraint {:?}", e.id))?;
            Ok(KeyphraseConstraint::new(e.id.clone(), phrases)?)
        })
        .collect()
}

/// The train file: hyperparameters plus an optional inline task and
/// constraint set. Missing parts fall back to the desk defaults, and the
/// resolved snapshot is written back into the run directory so a run can be
/// reproduced from its own artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainFile {
    pub format: String,
    pub config: TrainConfig,
    #[serde(default)]
    pub task: Option<TaskSpec>,
    #[serde(default)]
    pub constraints: Option<Vec<ConstraintFileEntry>>,
}

impl TrainFile {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)
            .with_context(|| format!("reading train config {}", path.display()))?;
        let file: TrainFile = serde_json::from_str(&raw)?;
        if file.format != TRAIN_FORMAT {
            bail!("unsupported train config format {:?}", file.format);
        }
        file.config.validate().map_err(|e| anyhow::anyhow!(e))?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing train config {}", path.display()))
    }
}

pub fn default_constraint_entries() -> Vec<ConstraintFileEntry> {
    vec![
        ConstraintFileEntry { id: "backtracking".into(), phrases: vec!["go back".into()] },
        ConstraintFileEntry { id: "retry".into(), phrases: vec!["try again".into()] },
    ]
}

pub fn default_train_file() -> TrainFile {
    TrainFile {
        format: TRAIN_FORMAT.to_string(),
        config: TrainConfig::default(),
        task: Some(ToyTask::default_spec(TaskMode::Needle)),
        constraints: Some(default_constraint_entries()),
    }
}

/// CTRLR_SEED overrides the configured seed when set.
pub fn effective_seed(configured: u64) -> Result<u64> {
    match std::env::var("CTRLR_SEED") {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .with_context(|| format!("CTRLR_SEED must be an unsigned integer, got {v:?}")),
        Err(_) => Ok(configured),
    }
}
