//! Subcommand implementations. Each `run_*` function is the whole command;
//! `main` only parses arguments and forwards.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::Args;

use ctrlr_core::guidance::build_guidance_tables;
use ctrlr_core::hmm::fit_baum_welch;
use ctrlr_core::lexicon::{build_keyphrase_dfa, KeyphraseDfa};
use ctrlr_core::optimizer::{
    distill_guidance_hmm, run_iteration, BaselineMode, IterationMetrics, TrainState,
};
use ctrlr_core::rng::{derive_rng, stream};
use ctrlr_core::rollout::{
    read_trajectory_dump, sample_constraint, sample_trajectory, sample_unguided_trajectory,
    write_trajectory_dump, GuidedTrajectory,
};
use ctrlr_core::toyworld::{evaluate_reward, generate_prompt, initial_policy_params, TaskMode, ToyTask};

use crate::artifacts::{
    self, compile_constraints, default_constraint_entries, effective_seed, load_constraint_entries,
    load_hmm, load_policy, load_task, save_hmm, save_policy, TrainFile,
};
use crate::manifest::{RunManifest, MANIFEST_NAME};
use crate::report;
use crate::svg;

// ---------------------------------------------------------------------------
// distill-hmm

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Corpus file: one JSON array of token ids per line
    #[arg(long)]
    pub corpus: PathBuf,
    /// Number of latent states
    #[arg(long)]
    pub states: usize,
    /// Output checkpoint path
    #[arg(long)]
    pub out: PathBuf,
    /// Vocabulary size (default: max token id + 1)
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run_distill(args: &DistillArgs) -> Result<()> {
    let raw = fs::read_to_string(&args.corpus)
        .with_context(|| format!("reading corpus {}", args.corpus.display()))?;
    let corpus: Vec<Vec<u32>> = raw
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).context("malformed corpus line"))
        .collect::<Result<_>>()?;
    let vocab_size = match args.vocab_size {
        Some(v) => v,
        None => corpus.iter().flatten().max().map_or(0, |&m| m as usize + 1),
    };
    if vocab_size == 0 {
        bail!("empty corpus and no --vocab-size");
    }
    let seed = effective_seed(args.seed)?;
    let mut rng = derive_rng(seed, &[stream::EM_INIT]);
    let report = fit_baum_welch(&corpus, args.states, vocab_size, &mut rng, args.max_iters, args.tol)?;
    for (i, ll) in report.log_likelihoods.iter().enumerate() {
        println!("iter {i} log_likelihood {ll}");
    }
    println!(
        "distilled {} states over vocab {vocab_size}: {} iterations, converged: {}",
        args.states, report.iterations, report.converged
    );
    save_hmm(&args.out, &report.hmm)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// build-dfa

#[derive(Debug, Args)]
pub struct BuildDfaArgs {
    /// Constraint file: JSON array of {id, phrases}
    #[arg(long)]
    pub constraints: PathBuf,
    /// Task spec providing the vocabulary
    #[arg(long)]
    pub task: PathBuf,
    /// Output path for the compiled automata
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct DfaSetFile {
    format: String,
    dfas: Vec<DfaEntry>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct DfaEntry {
    constraint_id: String,
    dfa: KeyphraseDfa,
}

pub fn run_build_dfa(args: &BuildDfaArgs) -> Result<()> {
    let task = load_task(&args.task)?;
    let entries = load_constraint_entries(&args.constraints)?;
    let constraints = compile_constraints(&entries, task.vocab())?;
    let mut dfas = Vec::new();
    for c in &constraints {
        let dfa = build_keyphrase_dfa(c, task.vocab())
            .with_context(|| format!("constraint {:?}", c.id))?;
        println!(
            "{}: {} phrases, {} states, {} accepting",
            c.id,
            c.phrases.len(),
            dfa.state_count(),
            (0..dfa.state_count() as u32).filter(|&s| dfa.is_accept(s)).count()
        );
        dfas.push(DfaEntry { constraint_id: c.id.clone(), dfa });
    }
    let out = DfaSetFile { format: artifacts::DFA_SET_FORMAT.to_string(), dfas };
    fs::write(&args.out, serde_json::to_string(&out)?)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// sample

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Policy checkpoint to sample from
    #[arg(long)]
    pub policy: PathBuf,
    /// Guidance HMM checkpoint (omit for unguided sampling)
    #[arg(long)]
    pub hmm: Option<PathBuf>,
    /// Constraint file
    #[arg(long)]
    pub constraints: PathBuf,
    /// Task spec (prompts, vocabulary, rewards)
    #[arg(long)]
    pub task: PathBuf,
    /// Number of trajectories
    #[arg(long)]
    pub n: usize,
    /// Output JSONL dump
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub horizon: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Force unguided sampling even when an HMM is given
    #[arg(long, default_value_t = false)]
    pub unguided: bool,
}

pub fn run_sample(args: &SampleArgs) -> Result<()> {
    let task = load_task(&args.task)?;
    let policy = load_policy(&args.policy)?;
    if policy.vocab_size() != task.vocab().size() {
        bail!(
            "policy vocab {} does not match task vocab {}",
            policy.vocab_size(),
            task.vocab().size()
        );
    }
    let entries = load_constraint_entries(&args.constraints)?;
    let constraints = compile_constraints(&entries, task.vocab())?;
    if constraints.is_empty() {
        bail!("constraint file is empty");
    }
    let seed = effective_seed(args.seed)?;
    let eos = task.vocab().eos_id();

    let guided = args.hmm.is_some() && !args.unguided;
    let hmm = match (&args.hmm, guided) {
        (Some(path), true) => {
            let h = load_hmm(path)?;
            if h.vocab_size() != task.vocab().size() {
                bail!("HMM vocab {} does not match task vocab {}", h.vocab_size(), task.vocab().size());
            }
            Some(Arc::new(h))
        }
        _ => None,
    };

    let mut runtimes = Vec::new();
    for c in &constraints {
        let dfa = Arc::new(build_keyphrase_dfa(c, task.vocab())?);
        let tables = hmm
            .as_ref()
            .map(|h| build_guidance_tables(h.clone(), dfa.clone(), args.horizon));
        runtimes.push((c.id.clone(), dfa, tables));
    }

    let mut trajectories = Vec::with_capacity(args.n);
    for i in 0..args.n as u64 {
        let mut prompt_rng = derive_rng(seed, &[stream::PROMPT, i]);
        let (prompt, prompt_id) = generate_prompt(&task, &mut prompt_rng);
        let mut c_rng = derive_rng(seed, &[stream::CONSTRAINT, i]);
        let idx = sample_constraint(&runtimes, &mut c_rng);
        let (cid, dfa, tables) = &runtimes[idx];
        let mut rng = derive_rng(seed, &[stream::TRAJECTORY, i]);
        let mut traj = match tables {
            Some(tables) => sample_trajectory(
                &policy,
                tables,
                cid,
                &prompt,
                prompt_id,
                ctrlr_core::rollout::DEFAULT_LOG_Z_FLOOR,
                &mut rng,
            ),
            None => sample_unguided_trajectory(
                &policy,
                args.horizon,
                eos,
                Some(dfa),
                cid,
                &prompt,
                prompt_id,
                &mut rng,
            ),
        };
        traj.reward = evaluate_reward(&task, &prompt, &traj.tokens);
        trajectories.push(traj);
    }

    let file = fs::File::create(&args.out)
        .with_context(|| format!("creating dump {}", args.out.display()))?;
    write_trajectory_dump(BufWriter::new(file), &trajectories)?;
    let satisfied = trajectories.iter().filter(|t| t.satisfied()).count();
    println!(
        "wrote {} trajectories to {} ({} satisfied, mean reward {})",
        trajectories.len(),
        args.out.display(),
        satisfied,
        if trajectories.is_empty() {
            "n/a".to_string()
        } else {
            format!(
                "{:.3}",
                trajectories.iter().map(|t| t.reward).sum::<f64>() / trajectories.len() as f64
            )
        }
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Train config file (hyperparameters + optional inline task/constraints)
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (gets config snapshot, metrics, checkpoints, manifest)
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Task spec path overriding the config's task
    #[arg(long)]
    pub task: Option<PathBuf>,
    /// Constraint file overriding the config's constraints
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    /// Reuse an existing HMM checkpoint instead of distilling
    #[arg(long)]
    pub hmm: Option<PathBuf>,
    /// Power-scaling exponent override
    #[arg(long)]
    pub beta: Option<f64>,
    /// Baseline override: ctrl_r, unguided, reward_shaping
    #[arg(long)]
    pub baseline: Option<String>,
    /// Context-window order of the tabular policy
    #[arg(long)]
    pub ctx_order: Option<usize>,
    /// Logit-table size of the tabular policy
    #[arg(long)]
    pub table_size: Option<usize>,
}

pub struct TrainSummary {
    pub iterations: usize,
    pub final_eval_reward: f64,
    pub out_dir: PathBuf,
}

fn parse_baseline(s: &str) -> Result<BaselineMode> {
    match s {
        "ctrl_r" => Ok(BaselineMode::CtrlR),
        "unguided" => Ok(BaselineMode::Unguided),
        "reward_shaping" => Ok(BaselineMode::RewardShaping),
        other => bail!("unknown baseline {other:?} (expected ctrl_r, unguided, reward_shaping)"),
    }
}

fn metrics_header(constraint_ids: &[String]) -> String {
    let mut cols = vec![
        "iteration".to_string(),
        "mean_reward".to_string(),
        "eval_reward".to_string(),
        "loss".to_string(),
        "fallback_rate".to_string(),
        "w_noisy".to_string(),
        "w_exploratory".to_string(),
        "w_onpolicy".to_string(),
    ];
    cols.extend(constraint_ids.iter().map(|id| format!("sat_{id}")));
    format!("# ctrlr-metrics-v1\n{}\n", cols.join(","))
}

fn metrics_row(m: &IterationMetrics, constraint_ids: &[String]) -> String {
    let loss = if m.losses.is_empty() {
        0.0
    } else {
        m.losses.iter().sum::<f64>() / m.losses.len() as f64
    };
    let mut cols = vec![
        m.iteration.to_string(),
        m.mean_reward.to_string(),
        m.eval_reward.to_string(),
        loss.to_string(),
        m.fallback_rate.to_string(),
        m.regime_counts[0].to_string(),
        m.regime_counts[1].to_string(),
        m.regime_counts[2].to_string(),
    ];
    for id in constraint_ids {
        let cell = m
            .satisfaction
            .get(id)
            .and_then(|s| s.rate())
            .map(|r| r.to_string())
            .unwrap_or_default();
        cols.push(cell);
    }
    format!("{}\n", cols.join(","))
}

pub fn run_train(args: &TrainArgs) -> Result<TrainSummary> {
    let mut file = TrainFile::load(&args.config)?;
    if let Some(path) = &args.task {
        let raw = fs::read_to_string(path)?;
        file.task = Some(serde_json::from_str(&raw)?);
    }
    if let Some(path) = &args.constraints {
        file.constraints = Some(load_constraint_entries(path)?);
    }
    if let Some(beta) = args.beta {
        file.config.beta = beta;
    }
    if let Some(b) = &args.baseline {
        file.config.baseline = parse_baseline(b)?;
    }
    if let Some(k) = args.ctx_order {
        file.config.ctx_order = k;
    }
    if let Some(c) = args.table_size {
        file.config.table_size = c;
    }
    file.config.seed = effective_seed(file.config.seed)?;
    file.config.validate().map_err(|e| anyhow::anyhow!(e))?;
    if file.task.is_none() {
        file.task = Some(ToyTask::default_spec(TaskMode::Needle));
    }
    if file.constraints.is_none() {
        file.constraints = Some(default_constraint_entries());
    }

    fs::create_dir_all(&args.out_dir)?;
    if args.out_dir.join(MANIFEST_NAME).exists() {
        bail!(
            "{} already contains a manifest; pick a fresh output directory",
            args.out_dir.display()
        );
    }
    file.save(&args.out_dir.join("config.json"))?;

    let cfg = file.config.clone();
    let task = ToyTask::from_spec(file.task.as_ref().unwrap())?;
    let constraints = compile_constraints(file.constraints.as_ref().unwrap(), task.vocab())?;
    let constraint_ids: Vec<String> = constraints.iter().map(|c| c.id.clone()).collect();

    let mut init_rng = derive_rng(cfg.seed, &[stream::POLICY_INIT]);
    let policy = initial_policy_params(&task, cfg.horizon, cfg.ctx_order, cfg.table_size, &mut init_rng)?;
    println!("initial policy calibrated (key phrase rare at init)");

    let mut manifest = RunManifest::new(cfg.seed);
    let hmm = if cfg.baseline == BaselineMode::CtrlR {
        let hmm = match &args.hmm {
            Some(path) => {
                println!("reusing HMM checkpoint {}", path.display());
                load_hmm(path)?
            }
            None => {
                let fit = distill_guidance_hmm(&policy, &task, &cfg)?;
                println!(
                    "distilled guidance HMM: {} states, {} EM iterations, log-likelihood {} -> {}",
                    cfg.hmm_states,
                    fit.iterations,
                    fit.log_likelihoods.first().unwrap(),
                    fit.log_likelihoods.last().unwrap()
                );
                let path = args.out_dir.join("hmm.json");
                save_hmm(&path, &fit.hmm)?;
                manifest.record("hmm", "hmm.json");
                fit.hmm
            }
        };
        Some(Arc::new(hmm))
    } else {
        None
    };

    let mut state = TrainState::new(cfg.clone(), task, constraints, policy, hmm)
        .map_err(|e| anyhow::anyhow!(e))?;

    let metrics_path = args.out_dir.join("metrics.csv");
    let mut metrics_out = BufWriter::new(fs::File::create(&metrics_path)?);
    metrics_out.write_all(metrics_header(&constraint_ids).as_bytes())?;
    let rollouts_path = args.out_dir.join("rollouts.jsonl");
    let mut rollouts_out = BufWriter::new(fs::File::create(&rollouts_path)?);

    let mut last_eval = 0.0;
    for i in 0..cfg.iterations {
        let (metrics, batches) = run_iteration(&mut state)?;
        metrics_out.write_all(metrics_row(&metrics, &constraint_ids).as_bytes())?;
        let trajectories: Vec<GuidedTrajectory> =
            batches.into_iter().flat_map(|b| b.trajectories).collect();
        write_trajectory_dump(&mut rollouts_out, &trajectories)?;
        last_eval = metrics.eval_reward;
        if (i + 1) % 10 == 0 || i + 1 == cfg.iterations {
            println!(
                "iter {:>4}: train reward {:+.3}, eval reward {:+.3}, fallback {:.3}",
                metrics.iteration, metrics.mean_reward, metrics.eval_reward, metrics.fallback_rate
            );
        }
        if cfg.checkpoint_every > 0 && (i + 1) % cfg.checkpoint_every == 0 {
            let name = format!("policy_iter_{:04}.json", i + 1);
            save_policy(&args.out_dir.join(&name), &state.policy)?;
            manifest.record(&format!("policy_iter_{:04}", i + 1), &name);
        }
    }
    metrics_out.flush()?;
    rollouts_out.flush()?;

    save_policy(&args.out_dir.join("policy_final.json"), &state.policy)?;
    manifest.record("metrics", "metrics.csv");
    manifest.record("rollouts", "rollouts.jsonl");
    manifest.record("policy_final", "policy_final.json");
    manifest.final_eval_reward = Some(last_eval);
    manifest.write_new(&args.out_dir)?;
    println!(
        "run complete: final eval reward {:+.3}, artifacts in {}",
        last_eval,
        args.out_dir.display()
    );
    Ok(TrainSummary {
        iterations: cfg.iterations,
        final_eval_reward: last_eval,
        out_dir: args.out_dir.clone(),
    })
}

// ---------------------------------------------------------------------------
// analyze

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Trajectory dump (JSONL) or a training run directory
    #[arg(long)]
    pub input: PathBuf,
    /// Report output directory
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Task spec (for keyword reports; defaults to the run's config)
    #[arg(long)]
    pub task: Option<PathBuf>,
    /// Constraint file for the strict keyword report
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    /// Extra user-supplied patterns to count (same schema as constraints)
    #[arg(long)]
    pub patterns: Option<PathBuf>,
}

pub struct AnalyzeSummary {
    pub trajectories: usize,
    pub regimes: [report::RegimeRow; 3],
    pub histogram: Vec<report::WeightBin>,
    pub reports: Vec<PathBuf>,
}

pub fn run_analyze(args: &AnalyzeArgs) -> Result<AnalyzeSummary> {
    let (dump_path, run_config) = if args.input.is_dir() {
        let cfg_path = args.input.join("config.json");
        let cfg = cfg_path.exists().then(|| TrainFile::load(&cfg_path)).transpose()?;
        (args.input.join("rollouts.jsonl"), cfg)
    } else {
        (args.input.clone(), None)
    };
    let file = fs::File::open(&dump_path)
        .with_context(|| format!("opening dump {}", dump_path.display()))?;
    let trajectories = read_trajectory_dump(std::io::BufReader::new(file))
        .with_context(|| format!("malformed dump {}", dump_path.display()))?;
    fs::create_dir_all(&args.out_dir)?;
    let mut reports = Vec::new();

    // task + constraints resolution for the keyword report
    let task = match (&args.task, &run_config) {
        (Some(path), _) => Some(load_task(path)?),
        (None, Some(cfg)) => cfg.task.as_ref().map(ToyTask::from_spec).transpose()?,
        (None, None) => None,
    };
    let constraint_entries = match (&args.constraints, &run_config) {
        (Some(path), _) => Some(load_constraint_entries(path)?),
        (None, Some(cfg)) => cfg.constraints.clone(),
        (None, None) => None,
    };

    if let (Some(task), Some(entries)) = (&task, &constraint_entries) {
        let constraints = compile_constraints(entries, task.vocab())?;
        let usage =
            report::keyword_usage_by_iteration(&trajectories, &constraints, task.vocab().eos_id());
        let path = write_usage_report(&args.out_dir, "keyword_usage", &usage)?;
        reports.extend(path);
    }
    if let (Some(task), Some(path)) = (&task, &args.patterns) {
        let entries = load_constraint_entries(path)?;
        let patterns = compile_constraints(&entries, task.vocab())?;
        let usage =
            report::keyword_usage_by_iteration(&trajectories, &patterns, task.vocab().eos_id());
        let path = write_usage_report(&args.out_dir, "pattern_usage", &usage)?;
        reports.extend(path);
    }

    // weight histogram with regime boundaries and accuracy
    let histogram = report::weight_histogram(&trajectories);
    let regimes = report::weight_regimes(&trajectories);
    {
        let mut csv = String::from("# ctrlr-w-histogram-v1\nlog10_lo,log10_hi,count,mean_accuracy\n");
        for b in &histogram {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                b.log10_lo,
                b.log10_hi,
                b.count,
                b.mean_accuracy.map(|a| a.to_string()).unwrap_or_default()
            ));
        }
        let p = args.out_dir.join("w_histogram.csv");
        fs::write(&p, csv)?;
        reports.push(p);
        let labels: Vec<String> = histogram.iter().map(|b| format!("1e{}", b.log10_lo)).collect();
        let counts: Vec<usize> = histogram.iter().map(|b| b.count).collect();
        let acc: Vec<Option<f64>> = histogram.iter().map(|b| b.mean_accuracy).collect();
        let p = args.out_dir.join("w_histogram.svg");
        fs::write(
            &p,
            svg::bar_chart(
                "trajectory weight histogram",
                "log10 w (decade bins)",
                "trajectories",
                &labels,
                &counts,
                Some(("mean accuracy", &acc)),
            ),
        )?;
        reports.push(p);
    }
    {
        let mut csv = String::from("# ctrlr-w-regimes-v1\nregime,w_lo,w_hi,count,mean_accuracy\n");
        for r in &regimes {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                r.name,
                r.w_lo,
                r.w_hi,
                r.count,
                r.mean_accuracy.map(|a| a.to_string()).unwrap_or_default()
            ));
        }
        let p = args.out_dir.join("w_regimes.csv");
        fs::write(&p, csv)?;
        reports.push(p);
        let labels: Vec<String> = regimes.iter().map(|r| r.name.to_string()).collect();
        let counts: Vec<usize> = regimes.iter().map(|r| r.count).collect();
        let acc: Vec<Option<f64>> = regimes.iter().map(|r| r.mean_accuracy).collect();
        let p = args.out_dir.join("w_regimes.svg");
        fs::write(
            &p,
            svg::bar_chart(
                "weight regimes (boundaries 1e-6, 1e-1)",
                "regime",
                "trajectories",
                &labels,
                &counts,
                Some(("mean accuracy", &acc)),
            ),
        )?;
        reports.push(p);
    }
    {
        let table = report::accuracy_vs_weight(&trajectories);
        let mut csv = String::from("# ctrlr-accuracy-vs-w-v1\ndecile,w_lo,w_hi,count,mean_accuracy\n");
        for r in &table {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                r.decile, r.w_lo, r.w_hi, r.count, r.mean_accuracy
            ));
        }
        let p = args.out_dir.join("accuracy_vs_w.csv");
        fs::write(&p, csv)?;
        reports.push(p);
        let xs: Vec<f64> = table.iter().map(|r| r.decile as f64).collect();
        let ys: Vec<f64> = table.iter().map(|r| r.mean_accuracy).collect();
        let p = args.out_dir.join("accuracy_vs_w.svg");
        fs::write(
            &p,
            svg::line_chart(
                "accuracy vs weight decile",
                "weight decile (low w to high w)",
                "mean accuracy",
                &xs,
                &[("accuracy".to_string(), ys)],
                Some((0.0, 1.0)),
            ),
        )?;
        reports.push(p);
    }

    println!("analyzed {} trajectories from {}", trajectories.len(), dump_path.display());
    for r in &regimes {
        println!(
            "regime {:<12} [{:>8.1e}, {:>8.1e}): {:>6} trajectories, accuracy {}",
            r.name,
            r.w_lo,
            r.w_hi,
            r.count,
            r.mean_accuracy.map(|a| format!("{a:.3}")).unwrap_or_else(|| "n/a".into())
        );
    }
    for p in &reports {
        println!("wrote {}", p.display());
    }
    Ok(AnalyzeSummary { trajectories: trajectories.len(), regimes, histogram, reports })
}

fn write_usage_report(
    out_dir: &Path,
    name: &str,
    usage: &[(u64, std::collections::BTreeMap<String, f64>)],
) -> Result<Vec<PathBuf>> {
    let ids: Vec<String> =
        usage.first().map(|(_, m)| m.keys().cloned().collect()).unwrap_or_default();
    let mut csv = format!("# ctrlr-{name}-v1\niteration,{}\n", ids.join(","));
    for (iter, rates) in usage {
        let cells: Vec<String> = ids.iter().map(|id| rates[id].to_string()).collect();
        csv.push_str(&format!("{iter},{}\n", cells.join(",")));
    }
    let csv_path = out_dir.join(format!("{name}.csv"));
    fs::write(&csv_path, csv)?;

    let xs: Vec<f64> = usage.iter().map(|(i, _)| *i as f64).collect();
    let series: Vec<(String, Vec<f64>)> = ids
        .iter()
        .map(|id| (id.clone(), usage.iter().map(|(_, m)| m[id]).collect()))
        .collect();
    let svg_path = out_dir.join(format!("{name}.svg"));
    fs::write(
        &svg_path,
        svg::line_chart(
            &format!("strict {} rates", name.replace('_', " ")),
            "iteration",
            "fraction of trajectories",
            &xs,
            &series,
            Some((0.0, 1.0)),
        ),
    )?;
    Ok(vec![csv_path, svg_path])
}

// ---------------------------------------------------------------------------
// oracle-check

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Gamma,
    Unbiasedness,
    Conditional,
    Dfa,
    All,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Which verification suite to run
    #[arg(long, value_enum)]
    pub suite: Suite,
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run_oracle_check(args: &OracleArgs) -> Result<bool> {
    use ctrlr_core::oracle::{
        run_conditional_suite, run_dfa_suite, run_gamma_suite, run_unbiasedness_suite,
    };
    let seed = effective_seed(args.seed)?;
    let n = args.instances;
    let reports = match args.suite {
        Suite::Gamma => vec![run_gamma_suite(n, seed)],
        Suite::Unbiasedness => vec![run_unbiasedness_suite(n, seed)],
        Suite::Conditional => vec![run_conditional_suite(n, seed)],
        Suite::Dfa => vec![run_dfa_suite(n, seed)],
        Suite::All => vec![
            run_gamma_suite(n, seed),
            run_unbiasedness_suite(n, seed),
            run_conditional_suite(n, seed),
            run_dfa_suite(n, seed),
        ],
    };
    let mut all_passed = true;
    for r in &reports {
        println!("{r}");
        all_passed &= r.passed();
    }
    Ok(all_passed)
}
