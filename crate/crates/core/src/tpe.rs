//! Sequential model-based optimization over flat categorical vectors with a
//! tree-structured Parzen estimator.
//!
//! The history of (theta, loss) trials is split at the gamma-quantile of the
//! losses; add-k smoothed per-dimension categorical densities are fitted to
//! the below-threshold trials (`l`) and to the rest (`g`). Candidates are
//! drawn from `l` and ranked by expected improvement, which is monotone in
//! l(theta) / g(theta), so ranking happens in log space.

use crate::error::{Error, Result};
use crate::rng::{stream_rng, trial_seed, STREAM_EVAL, STREAM_SUGGEST};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// A flat categorical search space: `dims` entries, each in `0..cardinality`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalSpace {
    pub dims: usize,
    pub cardinality: usize,
}

impl CategoricalSpace {
    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 || self.cardinality == 0 {
            return Err(Error::InvalidSpace(
                "search space needs at least one dimension and one category".into(),
            ));
        }
        if self.cardinality > u8::MAX as usize + 1 {
            return Err(Error::InvalidSpace("cardinality exceeds code range".into()));
        }
        Ok(())
    }

    pub fn uniform_sample<R: Rng>(&self, rng: &mut R) -> Vec<u8> {
        (0..self.dims)
            .map(|_| rng.gen_range(0..self.cardinality as u8))
            .collect()
    }

    pub fn check_theta(&self, theta: &[u8]) -> Result<()> {
        if theta.len() != self.dims {
            return Err(Error::Encoding {
                index: None,
                reason: format!("theta has {} dims, space has {}", theta.len(), self.dims),
            });
        }
        if let Some(i) = theta.iter().position(|&c| c as usize >= self.cardinality) {
            return Err(Error::Encoding {
                index: Some(i),
                reason: format!("code {} out of range 0..{}", theta[i], self.cardinality),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    Failed,
}

/// One evaluated architecture vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub status: TrialStatus,
    pub theta: Vec<u8>,
    /// Final loss; absent for failed trials.
    pub loss: Option<f64>,
    /// Wall-clock telemetry; excluded from determinism guarantees.
    pub wall_seconds: f64,
    /// The derived per-trial seed; re-evaluating with it reproduces the loss.
    pub seed: u64,
    /// Failure diagnostics, when any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Append-only trial log.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrialHistory {
    records: Vec<TrialRecord>,
}

impl TrialHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: TrialRecord) -> Result<()> {
        if record.index != self.records.len() {
            return Err(Error::config(
                "trial",
                format!(
                    "trial index {} does not extend history of length {}",
                    record.index,
                    self.records.len()
                ),
            ));
        }
        match (record.status, record.loss) {
            (TrialStatus::Ok, Some(loss)) if loss.is_finite() => {}
            (TrialStatus::Failed, None) => {}
            _ => {
                return Err(Error::config(
                    "trial",
                    "ok trials need a finite loss, failed trials none",
                ))
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    /// Successful trials only; failed trials never reach the density fit.
    pub fn successful(&self) -> impl Iterator<Item = &TrialRecord> {
        self.records
            .iter()
            .filter(|r| r.status == TrialStatus::Ok)
    }

    /// Lowest-loss successful trial, earliest on ties.
    pub fn best(&self) -> Option<&TrialRecord> {
        self.successful().fold(None, |best, r| match best {
            None => Some(r),
            Some(b) if r.loss.unwrap() < b.loss.unwrap() => Some(r),
            Some(b) => Some(b),
        })
    }

    /// Running minimum of the loss over successful trials, one entry per
    /// record (None until the first success).
    pub fn best_so_far(&self) -> Vec<Option<f64>> {
        let mut best = None;
        self.records
            .iter()
            .map(|r| {
                if let Some(loss) = r.loss {
                    best = Some(best.map_or(loss, |b: f64| b.min(loss)));
                }
                best
            })
            .collect()
    }
}

/// How the next suggestion is picked from the EI-ranked candidate pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Keep the best `top_fraction` of candidates by EI, pick uniformly.
    TopFractionRandom,
    /// Classic rule: the single best candidate.
    Argmax,
}

/// Optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpeConfig {
    pub gamma: f64,
    pub n_startup: usize,
    pub n_candidates: usize,
    pub top_fraction: f64,
    pub prior_weight: f64,
    pub selection: SelectionRule,
}

impl Default for TpeConfig {
    fn default() -> Self {
        TpeConfig {
            gamma: 0.25,
            n_startup: 20,
            n_candidates: 20_000,
            top_fraction: 0.2,
            prior_weight: 1.0,
            selection: SelectionRule::TopFractionRandom,
        }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("gamma", "must be in (0, 1)"));
        }
        if self.n_candidates == 0 {
            return Err(Error::config("n_candidates", "must be positive"));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::config("top_fraction", "must be in (0, 1]"));
        }
        if !(self.prior_weight > 0.0) {
            return Err(Error::config("prior_weight", "must be positive"));
        }
        Ok(())
    }
}

/// Split successful trials at the gamma-quantile: `below` holds the
/// ceil(gamma * n) lowest losses (earlier trial index wins ties), `above` the
/// rest; the threshold is the highest loss inside `below`.
pub fn split_history(
    history: &TrialHistory,
    gamma: f64,
) -> Result<(Vec<&TrialRecord>, Vec<&TrialRecord>, f64)> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::config("gamma", "must be in (0, 1)"));
    }
    let mut successful: Vec<&TrialRecord> = history.successful().collect();
    if successful.is_empty() {
        return Err(Error::config("history", "no successful trials to split"));
    }
    successful.sort_by(|a, b| {
        a.loss
            .unwrap()
            .partial_cmp(&b.loss.unwrap())
            .expect("finite losses")
            .then(a.index.cmp(&b.index))
    });
    let n_below = ((gamma * successful.len() as f64).ceil() as usize).max(1);
    let n_below = n_below.min(successful.len());
    let above = successful.split_off(n_below);
    let threshold = successful.last().unwrap().loss.unwrap();
    Ok((successful, above, threshold))
}

/// Per-dimension categorical densities.
pub type DensityTable = Vec<Vec<f64>>;

/// Smoothed per-dimension frequencies:
/// (count + w) / (n + w * cardinality); an empty record set is the uniform
/// prior.
pub fn fit_density<'a, I>(
    thetas: I,
    space: CategoricalSpace,
    prior_weight: f64,
) -> Result<DensityTable>
where
    I: IntoIterator<Item = &'a [u8]>,
{
    space.validate()?;
    if !(prior_weight > 0.0) {
        return Err(Error::config("prior_weight", "must be positive"));
    }
    let mut counts = vec![vec![0usize; space.cardinality]; space.dims];
    let mut n = 0usize;
    for theta in thetas {
        space.check_theta(theta)?;
        for (d, &code) in theta.iter().enumerate() {
            counts[d][code as usize] += 1;
        }
        n += 1;
    }
    let denom = n as f64 + prior_weight * space.cardinality as f64;
    Ok(counts
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|c| (c as f64 + prior_weight) / denom)
                .collect()
        })
        .collect())
}

/// The fitted surrogate: densities of the good trials (`below`) and the rest
/// (`above`), plus the split threshold.
#[derive(Debug, Clone)]
pub struct ParzenModel {
    gamma: f64,
    threshold: f64,
    below: DensityTable,
    above: DensityTable,
    log_below: Vec<Vec<f64>>,
    log_above: Vec<Vec<f64>>,
}

impl ParzenModel {
    pub fn fit(history: &TrialHistory, space: CategoricalSpace, config: &TpeConfig) -> Result<Self> {
        config.validate()?;
        let (below, above, threshold) = split_history(history, config.gamma)?;
        let below = fit_density(
            below.iter().map(|r| r.theta.as_slice()),
            space,
            config.prior_weight,
        )?;
        let above = fit_density(
            above.iter().map(|r| r.theta.as_slice()),
            space,
            config.prior_weight,
        )?;
        Ok(ParzenModel::from_densities(config.gamma, threshold, below, above))
    }

    pub fn from_densities(
        gamma: f64,
        threshold: f64,
        below: DensityTable,
        above: DensityTable,
    ) -> Self {
        let log_below = below
            .iter()
            .map(|row| row.iter().map(|p| p.ln()).collect())
            .collect();
        let log_above = above
            .iter()
            .map(|row| row.iter().map(|p| p.ln()).collect())
            .collect();
        ParzenModel {
            gamma,
            threshold,
            below,
            above,
            log_below,
            log_above,
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn density_below(&self) -> &DensityTable {
        &self.below
    }

    pub fn density_above(&self) -> &DensityTable {
        &self.above
    }

    /// log g(theta) - log l(theta); EI is a strictly decreasing function of
    /// this, so it is the ranking key.
    pub fn log_ratio(&self, theta: &[u8]) -> f64 {
        theta
            .iter()
            .enumerate()
            .map(|(d, &c)| self.log_above[d][c as usize] - self.log_below[d][c as usize])
            .sum()
    }

    /// Draw one theta with independent per-dimension draws from the `below`
    /// density.
    pub fn sample_below<R: Rng>(&self, rng: &mut R) -> Vec<u8> {
        self.below
            .iter()
            .map(|row| {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (code, p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return code as u8;
                    }
                }
                (row.len() - 1) as u8
            })
            .collect()
    }
}

/// Expected-improvement score (gamma + (1 - gamma) * g/l)^-1, evaluated via
/// the log ratio to avoid underflow. Always positive; equal-density inputs
/// score exactly 1.
pub fn ei_score(theta: &[u8], model: &ParzenModel) -> f64 {
    let d = model.log_ratio(theta);
    if d > 500.0 {
        // (1 - gamma) * e^d dominates; keep the value positive and monotone.
        (-d).exp() / (1.0 - model.gamma)
    } else {
        1.0 / (model.gamma + (1.0 - model.gamma) * d.exp())
    }
}

/// Suggest the next theta: uniform until `n_startup` successful trials exist,
/// then candidates from `l` ranked by EI with the configured selection rule.
pub fn suggest<R: Rng>(
    history: &TrialHistory,
    space: CategoricalSpace,
    config: &TpeConfig,
    rng: &mut R,
) -> Result<Vec<u8>> {
    space.validate()?;
    config.validate()?;
    if history.successful().count() < config.n_startup.max(1) {
        return Ok(space.uniform_sample(rng));
    }
    let model = ParzenModel::fit(history, space, config)?;
    suggest_from_model(&model, space, config, rng)
}

/// The model-based half of [`suggest`], reusable across a batch of parallel
/// suggestions from one fitted model.
pub fn suggest_from_model<R: Rng>(
    model: &ParzenModel,
    space: CategoricalSpace,
    config: &TpeConfig,
    rng: &mut R,
) -> Result<Vec<u8>> {
    let mut candidates: Vec<(f64, usize, Vec<u8>)> = (0..config.n_candidates)
        .map(|i| {
            let theta = model.sample_below(rng);
            debug_assert_eq!(theta.len(), space.dims);
            (model.log_ratio(&theta), i, theta)
        })
        .collect();
    // Ascending log ratio = descending EI; candidate order breaks ties.
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite log ratio").then(a.1.cmp(&b.1)));
    let keep = ((config.top_fraction * config.n_candidates as f64).ceil() as usize)
        .clamp(1, config.n_candidates);
    let pick = match config.selection {
        SelectionRule::Argmax => 0,
        SelectionRule::TopFractionRandom => rng.gen_range(0..keep),
    };
    Ok(candidates.swap_remove(pick).2)
}

/// Called after every recorded trial; lets the orchestrator write logs and
/// checkpoints without this module touching the filesystem.
pub type TrialObserver<'a> = dyn FnMut(&TrialRecord, &TrialHistory) -> Result<()> + 'a;

/// Run the SMBO loop: suggest, evaluate, record, refit. `existing` carries
/// checkpointed trials when resuming; the loop continues at trial
/// `existing.len()` and returns a history of exactly `iterations` records.
///
/// Evaluations within one batch of `workers` suggestions run in parallel;
/// all suggestions in a batch come from the same fitted model and records
/// are appended in trial-index order, so results do not depend on thread
/// scheduling.
pub fn run_smbo<F>(
    evaluate: F,
    space: CategoricalSpace,
    config: &TpeConfig,
    master_seed: u64,
    iterations: usize,
    workers: usize,
    existing: TrialHistory,
    observer: &mut TrialObserver<'_>,
) -> Result<TrialHistory>
where
    F: Fn(&[u8], u64) -> Result<f64> + Sync,
{
    space.validate()?;
    config.validate()?;
    if iterations == 0 {
        return Err(Error::config("iterations", "need at least one trial"));
    }
    if existing.len() > iterations {
        return Err(Error::config(
            "iterations",
            format!(
                "checkpoint already has {} trials, budget is {iterations}",
                existing.len()
            ),
        ));
    }
    let workers = workers.max(1);
    let mut history = existing;
    while history.len() < iterations {
        let batch = workers.min(iterations - history.len());
        let base = history.len();
        // Suggestions are sequential and, past startup, share one fit.
        let mut suggestions = Vec::with_capacity(batch);
        let startup = history.successful().count() < config.n_startup.max(1);
        let model = if startup {
            None
        } else {
            Some(ParzenModel::fit(&history, space, config)?)
        };
        for offset in 0..batch {
            let index = base + offset;
            let mut rng = stream_rng(trial_seed(master_seed, index as u64), STREAM_SUGGEST);
            let theta = match &model {
                None => space.uniform_sample(&mut rng),
                Some(m) => suggest_from_model(m, space, config, &mut rng)?,
            };
            suggestions.push(theta);
        }

        let results: Vec<(f64, std::result::Result<f64, String>)> = if batch == 1 {
            let seed = trial_seed(master_seed, base as u64);
            let started = Instant::now();
            let outcome = evaluate(&suggestions[0], seed).map_err(|e| e.to_string());
            vec![(started.elapsed().as_secs_f64(), outcome)]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = suggestions
                    .iter()
                    .enumerate()
                    .map(|(offset, theta)| {
                        let evaluate = &evaluate;
                        let seed = trial_seed(master_seed, (base + offset) as u64);
                        scope.spawn(move || {
                            let started = Instant::now();
                            let outcome = evaluate(theta, seed).map_err(|e| e.to_string());
                            (started.elapsed().as_secs_f64(), outcome)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("evaluator thread panicked"))
                    .collect()
            })
        };

        for (offset, ((wall_seconds, outcome), theta)) in
            results.into_iter().zip(suggestions).enumerate()
        {
            let index = base + offset;
            let seed = trial_seed(master_seed, index as u64);
            let record = match outcome {
                Ok(loss) if loss.is_finite() => TrialRecord {
                    index,
                    status: TrialStatus::Ok,
                    theta,
                    loss: Some(loss),
                    wall_seconds,
                    seed,
                    note: None,
                },
                Ok(loss) => TrialRecord {
                    index,
                    status: TrialStatus::Failed,
                    theta,
                    loss: None,
                    wall_seconds,
                    seed,
                    note: Some(format!("non-finite loss {loss}")),
                },
                Err(reason) => TrialRecord {
                    index,
                    status: TrialStatus::Failed,
                    theta,
                    loss: None,
                    wall_seconds,
                    seed,
                    note: Some(reason),
                },
            };
            history.push(record)?;
            observer(history.records().last().unwrap(), &history)?;
        }
    }
    Ok(history)
}

/// Uses the evaluation stream of a trial seed; evaluators built on other
/// streams of the same seed stay decorrelated from the optimizer.
pub fn eval_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    stream_rng(seed, STREAM_EVAL)
}
