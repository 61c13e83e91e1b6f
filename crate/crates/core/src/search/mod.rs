//! End-to-end search orchestration: configuration, evaluators, the SMBO loop,
//! run-directory logging, checkpoint/resume, and summary reports.

pub mod config;
pub mod evaluators;
pub mod rundir;

pub use config::{DataSource, EvaluatorKind, RunConfig};
pub use evaluators::{ContrastiveEvalParams, ContrastiveEvaluator, Evaluator, TabularEvaluator};
pub use rundir::{canonical_trials, loss_quantiles, read_trials, RunCheckpoint, RunDir, TrialRow};

use crate::error::{Error, Result};
use crate::space::{encoding_length, export_genotype, ExportFormat, Genotype};
use crate::tpe::{run_smbo, CategoricalSpace, TrialHistory};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use std::sync::Arc;

/// Suggestion strategy: the fitted Parzen model, or uniform random (the
/// paired baseline, equivalent to a never-ending startup phase).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Tpe,
    Random,
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub seed_override: Option<u64>,
    pub strategy: Strategy,
    pub resume: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            seed_override: None,
            strategy: Strategy::Tpe,
            resume: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BestTrial {
    pub index: usize,
    pub loss: f64,
    pub seed: u64,
    pub theta: Vec<u8>,
    pub genotype: Genotype,
}

/// Everything a finished (or resumed-and-finished) run produced.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub strategy: Strategy,
    pub config_hash: String,
    pub master_seed: u64,
    pub dataset_fingerprint: String,
    pub history: TrialHistory,
    pub best: Option<BestTrial>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportBest {
    pub trial: usize,
    pub loss: f64,
    pub seed: u64,
    pub theta: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportTrials {
    pub total: usize,
    pub ok: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportWall {
    pub total_seconds: f64,
    pub mean_seconds: f64,
}

/// report.json schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchReport {
    pub schema: u32,
    pub strategy: Strategy,
    pub evaluator: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub dataset_fingerprint: String,
    pub trials: ReportTrials,
    pub best: Option<ReportBest>,
    pub loss_quantiles: Option<rundir::LossQuantiles>,
    pub wall: ReportWall,
}

fn hex_digest(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p);
    }
    hasher
        .finalize()
        .iter()
        .fold(String::new(), |mut acc, b| {
            acc.push_str(&format!("{b:02x}"));
            acc
        })
}

/// Instantiate the configured evaluator plus the dataset fingerprint (a
/// content hash of the selected subset, or of the generator/objective
/// parameters when no external data is read).
pub fn build_evaluator(config: &RunConfig) -> Result<(Box<dyn Evaluator>, String)> {
    config.validate()?;
    let n = config.space.n_intermediate;
    let dims = 2 * encoding_length(n)?;
    match config.evaluator.kind {
        EvaluatorKind::Tabular => {
            let descriptor = format!(
                "tabular:dims={dims}:vocab={}:target={}:noise={}",
                config.space.vocab_size,
                config.evaluator.tabular_target_code,
                config.evaluator.tabular_noise
            );
            let evaluator = TabularEvaluator::indicator(
                dims,
                config.space.vocab_size,
                config.evaluator.tabular_target_code,
                config.evaluator.tabular_noise,
            )?;
            Ok((Box::new(evaluator), hex_digest(&[descriptor.as_bytes()])))
        }
        EvaluatorKind::Contrastive => {
            let (images, fingerprint) = match config.data.source {
                DataSource::Synthetic => {
                    let spec = crate::data::SyntheticSpec {
                        count: config.data.count,
                        size: config.data.image_size,
                        classes: config.data.classes,
                        seed: config.data.seed,
                    };
                    let descriptor = format!(
                        "synthetic:count={}:size={}:classes={}:seed={}",
                        spec.count, spec.size, spec.classes, spec.seed
                    );
                    (spec.generate()?, hex_digest(&[descriptor.as_bytes()]))
                }
                DataSource::Cifar10 => {
                    let path = config.data.path.as_ref().expect("validated");
                    let subset = crate::data::load_cifar10_subset(
                        Path::new(path),
                        config.data.fraction,
                        config.data.class_balanced,
                        config.data.seed,
                    )?;
                    let mut id_bytes = Vec::with_capacity(4 + subset.ids.len() * 4);
                    id_bytes.extend_from_slice(b"cifar10:");
                    for id in &subset.ids {
                        id_bytes.extend_from_slice(&(*id as u32).to_le_bytes());
                    }
                    (subset.images, hex_digest(&[&id_bytes]))
                }
            };
            let evaluator = ContrastiveEvaluator::new(
                n,
                Arc::new(images),
                config.augment_policy(),
                config.encoder_config(),
                ContrastiveEvalParams {
                    epochs: config.evaluator.epochs,
                    batch_size: config.evaluator.batch_size,
                    lr: config.evaluator.lr,
                    momentum: config.evaluator.momentum,
                    tau: config.contrastive.temperature,
                    lambda: config.contrastive.lambda,
                    bank_momentum: config.contrastive.bank_momentum,
                },
            )?;
            Ok((Box::new(evaluator), fingerprint))
        }
    }
}

fn effective_tpe(config: &RunConfig, strategy: Strategy) -> crate::tpe::TpeConfig {
    let mut tpe = config.tpe_config();
    if strategy == Strategy::Random {
        tpe.n_startup = usize::MAX;
    }
    tpe
}

/// Run the search loop without touching the filesystem; `observer` sees every
/// appended record.
pub fn search_history(
    config: &RunConfig,
    master_seed: u64,
    strategy: Strategy,
    existing: TrialHistory,
    observer: &mut crate::tpe::TrialObserver<'_>,
) -> Result<(TrialHistory, String)> {
    let (evaluator, fingerprint) = build_evaluator(config)?;
    let space = CategoricalSpace {
        dims: 2 * encoding_length(config.space.n_intermediate)?,
        cardinality: config.space.vocab_size,
    };
    let tpe = effective_tpe(config, strategy);
    let history = run_smbo(
        |theta, seed| evaluator.evaluate(theta, seed),
        space,
        &tpe,
        master_seed,
        config.tpe.iterations,
        config.tpe.workers,
        existing,
        observer,
    )?;
    Ok((history, fingerprint))
}

fn best_of(history: &TrialHistory, n_intermediate: usize) -> Result<Option<BestTrial>> {
    match history.best() {
        None => Ok(None),
        Some(record) => Ok(Some(BestTrial {
            index: record.index,
            loss: record.loss.expect("best trial is successful"),
            seed: record.seed,
            theta: record.theta.clone(),
            genotype: Genotype::from_flat(n_intermediate, &record.theta)?,
        })),
    }
}

fn write_outputs(run_dir: &RunDir, outcome: &SearchOutcome, evaluator_name: &str) -> Result<()> {
    if let Some(best) = &outcome.best {
        std::fs::write(
            run_dir.best_genotype_path(),
            export_genotype(&best.genotype, ExportFormat::Json),
        )?;
        std::fs::write(
            run_dir.best_dot_path(),
            export_genotype(&best.genotype, ExportFormat::Dot),
        )?;
    }
    let losses: Vec<f64> = outcome
        .history
        .successful()
        .map(|r| r.loss.unwrap())
        .collect();
    let total_wall: f64 = outcome
        .history
        .records()
        .iter()
        .map(|r| r.wall_seconds)
        .sum();
    let report = SearchReport {
        schema: 1,
        strategy: outcome.strategy,
        evaluator: evaluator_name.to_string(),
        config_hash: outcome.config_hash.clone(),
        master_seed: outcome.master_seed,
        dataset_fingerprint: outcome.dataset_fingerprint.clone(),
        trials: ReportTrials {
            total: outcome.history.len(),
            ok: losses.len(),
            failed: outcome.history.len() - losses.len(),
        },
        best: outcome.best.as_ref().map(|b| ReportBest {
            trial: b.index,
            loss: b.loss,
            seed: b.seed,
            theta: b.theta.clone(),
        }),
        loss_quantiles: loss_quantiles(&losses),
        wall: ReportWall {
            total_seconds: total_wall,
            mean_seconds: if outcome.history.is_empty() {
                0.0
            } else {
                total_wall / outcome.history.len() as f64
            },
        },
    };
    std::fs::write(run_dir.report_path(), serde_json::to_vec_pretty(&report)?)?;
    Ok(())
}

/// Execute a full search run into `out_dir`: trial CSV, per-trial
/// checkpoints, best-genotype JSON/DOT, and report.json. With
/// `options.resume`, continues the checkpointed history in `out_dir`
/// (the config hash and seed must match).
pub fn run_search(
    config: &RunConfig,
    config_text: &str,
    out_dir: &Path,
    options: &RunOptions,
) -> Result<SearchOutcome> {
    config.validate()?;
    let master_seed = options.seed_override.unwrap_or(config.run.seed);
    let config_hash = config.hash();

    let (run_dir, existing) = if options.resume {
        let run_dir = RunDir::open(out_dir)?;
        let checkpoint = run_dir.read_checkpoint()?;
        if checkpoint.config_hash != config_hash {
            return Err(Error::config(
                "resume",
                "config hash differs from the checkpointed run",
            ));
        }
        if checkpoint.master_seed != master_seed {
            return Err(Error::config(
                "resume",
                "seed differs from the checkpointed run",
            ));
        }
        run_dir.rewrite_trials(&checkpoint.history)?;
        (run_dir, checkpoint.history)
    } else {
        if out_dir.join("checkpoints").join("history.json").is_file() {
            return Err(Error::config(
                "out_dir",
                format!(
                    "{} already holds a run; resume it or choose a fresh directory",
                    out_dir.display()
                ),
            ));
        }
        let run_dir = RunDir::create(out_dir, config_text)?;
        run_dir.rewrite_trials(&TrialHistory::new())?;
        (run_dir, TrialHistory::new())
    };

    let (evaluator, fingerprint) = build_evaluator(config)?;
    let evaluator_name = evaluator.name();
    let space = CategoricalSpace {
        dims: 2 * encoding_length(config.space.n_intermediate)?,
        cardinality: config.space.vocab_size,
    };
    let tpe = effective_tpe(config, options.strategy);

    let mut observer = |record: &crate::tpe::TrialRecord, history: &TrialHistory| -> Result<()> {
        run_dir.append_trial(record)?;
        run_dir.write_checkpoint(&RunCheckpoint {
            config_hash: config_hash.clone(),
            master_seed,
            history: history.clone(),
        })
    };
    let history = run_smbo(
        |theta, seed| evaluator.evaluate(theta, seed),
        space,
        &tpe,
        master_seed,
        config.tpe.iterations,
        config.tpe.workers,
        existing,
        &mut observer,
    )?;

    let outcome = SearchOutcome {
        strategy: options.strategy,
        config_hash,
        master_seed,
        dataset_fingerprint: fingerprint,
        best: best_of(&history, config.space.n_intermediate)?,
        history,
    };
    write_outputs(&run_dir, &outcome, evaluator_name)?;
    Ok(outcome)
}

/// The same loop with uniform suggestions, for paired comparisons.
pub fn random_search_baseline(
    config: &RunConfig,
    config_text: &str,
    out_dir: &Path,
    options: &RunOptions,
) -> Result<SearchOutcome> {
    let options = RunOptions {
        strategy: Strategy::Random,
        ..*options
    };
    run_search(config, config_text, out_dir, &options)
}

/// One (TPE best, random best) pair per seed, on identical budgets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedResult {
    pub seed: u64,
    pub tpe_best: f64,
    pub random_best: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedComparison {
    pub pairs: Vec<PairedResult>,
    pub tpe_median: f64,
    pub random_median: f64,
}

/// Run both strategies over the given seeds (in memory) and report paired
/// best losses with medians.
pub fn paired_comparison(config: &RunConfig, seeds: &[u64]) -> Result<PairedComparison> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    let mut pairs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut sink = |_: &crate::tpe::TrialRecord, _: &TrialHistory| Ok(());
        let (tpe_history, _) =
            search_history(config, seed, Strategy::Tpe, TrialHistory::new(), &mut sink)?;
        let mut sink = |_: &crate::tpe::TrialRecord, _: &TrialHistory| Ok(());
        let (random_history, _) =
            search_history(config, seed, Strategy::Random, TrialHistory::new(), &mut sink)?;
        let tpe_best = tpe_history
            .best()
            .and_then(|r| r.loss)
            .ok_or_else(|| Error::config("seeds", format!("seed {seed}: no successful trial")))?;
        let random_best = random_history
            .best()
            .and_then(|r| r.loss)
            .ok_or_else(|| Error::config("seeds", format!("seed {seed}: no successful trial")))?;
        pairs.push(PairedResult {
            seed,
            tpe_best,
            random_best,
        });
    }
    let median = |values: &mut Vec<f64>| {
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite losses"));
        rundir::quantile(values, 0.5)
    };
    let mut tpe: Vec<f64> = pairs.iter().map(|p| p.tpe_best).collect();
    let mut random: Vec<f64> = pairs.iter().map(|p| p.random_best).collect();
    Ok(PairedComparison {
        tpe_median: median(&mut tpe),
        random_median: median(&mut random),
        pairs,
    })
}

/// Re-evaluate one genotype under a given seed with the configured evaluator.
pub fn evaluate_genotype(config: &RunConfig, genotype: &Genotype, seed: u64) -> Result<f64> {
    if genotype.n_intermediate() != config.space.n_intermediate {
        return Err(Error::config(
            "space.n_intermediate",
            format!(
                "genotype has {} intermediate nodes, config says {}",
                genotype.n_intermediate(),
                config.space.n_intermediate
            ),
        ));
    }
    let (evaluator, _) = build_evaluator(config)?;
    evaluator.evaluate(&genotype.to_flat(), seed)
}
