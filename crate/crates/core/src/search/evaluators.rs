//! Trial evaluators: the contrastive training score and a synthetic tabular
//! objective for optimizer experiments.

use crate::contrastive::MemoryBank;
use crate::data::{make_minibatch, AugmentPolicy, Image};
use crate::encoder::{EncoderConfig, MiniNetwork};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_BATCH_BASE, STREAM_EVAL};
use crate::space::Genotype;
use rand_distr::{Distribution, Normal};
use std::sync::Arc;

/// A scoring function over flat architecture vectors. Implementations must be
/// pure given (theta, seed).
pub trait Evaluator: Sync {
    fn name(&self) -> &'static str;
    fn evaluate(&self, theta: &[u8], seed: u64) -> Result<f64>;
}

/// Separable synthetic objective: per-(dimension, code) costs plus Gaussian
/// noise. The minimum is the per-dimension argmin assignment.
#[derive(Debug, Clone)]
pub struct TabularEvaluator {
    costs: Vec<Vec<f64>>,
    noise: f64,
}

impl TabularEvaluator {
    pub fn new(costs: Vec<Vec<f64>>, noise: f64) -> Result<Self> {
        if costs.is_empty() || costs.iter().any(|row| row.is_empty()) {
            return Err(Error::config("costs", "need at least one dimension and code"));
        }
        if noise < 0.0 {
            return Err(Error::config("tabular_noise", "must be non-negative"));
        }
        Ok(TabularEvaluator { costs, noise })
    }

    /// Indicator objective: cost 1 everywhere except `target_code`, so the
    /// loss counts wrong dimensions and the optimum is all-target with 0.
    pub fn indicator(dims: usize, vocab: usize, target_code: u8, noise: f64) -> Result<Self> {
        if (target_code as usize) >= vocab {
            return Err(Error::config("tabular_target_code", "outside the vocabulary"));
        }
        let costs = (0..dims)
            .map(|_| {
                (0..vocab)
                    .map(|c| if c == target_code as usize { 0.0 } else { 1.0 })
                    .collect()
            })
            .collect();
        Self::new(costs, noise)
    }

    pub fn dims(&self) -> usize {
        self.costs.len()
    }
}

impl Evaluator for TabularEvaluator {
    fn name(&self) -> &'static str {
        "tabular"
    }

    fn evaluate(&self, theta: &[u8], seed: u64) -> Result<f64> {
        if theta.len() != self.costs.len() {
            return Err(Error::ShapeMismatch {
                what: "tabular theta".into(),
                expected: self.costs.len().to_string(),
                got: theta.len().to_string(),
            });
        }
        let mut loss = 0.0;
        for (d, &code) in theta.iter().enumerate() {
            let row = &self.costs[d];
            let code = code as usize;
            if code >= row.len() {
                return Err(Error::Encoding {
                    index: Some(d),
                    reason: format!("code {code} outside the cost table"),
                });
            }
            loss += row[code];
        }
        if self.noise > 0.0 {
            let mut rng = stream_rng(seed, STREAM_EVAL);
            let normal = Normal::new(0.0, self.noise).expect("validated sigma");
            loss += normal.sample(&mut rng);
        }
        Ok(loss)
    }
}

/// Per-trial training parameters of the contrastive score.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveEvalParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub tau: f64,
    pub lambda: f64,
    pub bank_momentum: f64,
}

/// Builds a network from theta, trains it for E epochs on the blended
/// contrastive objective with the memory bank, and scores it by the final
/// epoch's mean batch loss. Epochs = 0 scores the untrained network over one
/// update-free pass. All randomness derives from the trial seed: weight
/// initialization from its init stream, batch b of the whole run from batch
/// stream b.
pub struct ContrastiveEvaluator {
    n_intermediate: usize,
    data: Arc<Vec<Image>>,
    policy: AugmentPolicy,
    encoder: EncoderConfig,
    params: ContrastiveEvalParams,
}

impl ContrastiveEvaluator {
    pub fn new(
        n_intermediate: usize,
        data: Arc<Vec<Image>>,
        policy: AugmentPolicy,
        encoder: EncoderConfig,
        params: ContrastiveEvalParams,
    ) -> Result<Self> {
        encoder.validate()?;
        policy.validate()?;
        if params.batch_size < 2 {
            return Err(Error::config("batch_size", "need K >= 2"));
        }
        if params.batch_size > data.len() {
            return Err(Error::config(
                "batch_size",
                format!("K = {} exceeds dataset size {}", params.batch_size, data.len()),
            ));
        }
        if data.is_empty() {
            return Err(Error::config("data", "empty dataset"));
        }
        Ok(ContrastiveEvaluator {
            n_intermediate,
            data,
            policy,
            encoder,
            params,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        (self.data.len() / self.params.batch_size).max(1)
    }

    /// Train and return every epoch's mean batch loss (the last is the score).
    pub fn epoch_losses(&self, theta: &[u8], seed: u64) -> Result<Vec<f64>> {
        let genotype = Genotype::from_flat(self.n_intermediate, theta)?;
        let mut net = MiniNetwork::build(genotype, self.encoder.clone(), seed)?;
        let mut bank = MemoryBank::new(self.encoder.embed_dim, self.params.bank_momentum)?;
        let epochs = self.params.epochs;
        let passes = epochs.max(1);
        let batches = self.batches_per_epoch();
        let mut epoch_means = Vec::with_capacity(passes);
        let mut global_batch = 0u64;
        for epoch in 0..passes {
            let mut sum = 0.0;
            for _ in 0..batches {
                let mut rng = stream_rng(seed, STREAM_BATCH_BASE + global_batch);
                let mb = make_minibatch(
                    &self.data,
                    self.params.batch_size,
                    self.encoder.views,
                    &self.policy,
                    &mut rng,
                )?;
                let out = net.backward_batch(&mb, &bank, self.params.tau, self.params.lambda)?;
                if epoch < epochs {
                    net.sgd_step(self.params.lr, self.params.momentum)?;
                }
                bank.apply_staged(out.fresh)?;
                sum += out.loss;
                global_batch += 1;
            }
            bank.advance_epoch();
            epoch_means.push(sum / batches as f64);
        }
        Ok(epoch_means)
    }
}

impl Evaluator for ContrastiveEvaluator {
    fn name(&self) -> &'static str {
        "contrastive"
    }

    fn evaluate(&self, theta: &[u8], seed: u64) -> Result<f64> {
        Ok(*self.epoch_losses(theta, seed)?.last().expect("at least one pass"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;
    use crate::encoder::ReductionPlacement;
    use crate::space::encoding_length;

    #[test]
    fn indicator_objective_is_zero_at_target() {
        let eval = TabularEvaluator::indicator(5, 8, 3, 0.0).unwrap();
        assert_eq!(eval.evaluate(&[3, 3, 3, 3, 3], 0).unwrap(), 0.0);
        assert_eq!(eval.evaluate(&[3, 1, 3, 0, 3], 0).unwrap(), 2.0);
    }

    #[test]
    fn zero_cost_table_returns_the_noise_draw() {
        let eval = TabularEvaluator::new(vec![vec![0.0; 8]; 4], 0.5).unwrap();
        let a = eval.evaluate(&[0, 1, 2, 3], 9).unwrap();
        let b = eval.evaluate(&[4, 5, 6, 7], 9).unwrap();
        // Noise depends on the seed only.
        assert_eq!(a, b);
        assert_ne!(a, 0.0);
        assert_ne!(a, eval.evaluate(&[0, 1, 2, 3], 10).unwrap());
    }

    fn tiny_setup() -> ContrastiveEvaluator {
        let data = SyntheticSpec {
            count: 12,
            size: 8,
            classes: 3,
            seed: 5,
        }
        .generate()
        .unwrap();
        let policy = AugmentPolicy {
            pad: 1,
            crop: 8,
            center: false,
            p_hflip: 0.5,
            p_vflip: 0.5,
            p_gray: 0.2,
        };
        let encoder = EncoderConfig {
            layers: 3,
            channels: 2,
            input_size: 8,
            embed_dim: 4,
            views: 2,
            reduction_placement: ReductionPlacement::Thirds,
        };
        let params = ContrastiveEvalParams {
            epochs: 1,
            batch_size: 4,
            lr: 0.01,
            momentum: 0.9,
            tau: 0.07,
            lambda: 0.5,
            bank_momentum: 0.5,
        };
        ContrastiveEvaluator::new(2, Arc::new(data), policy, encoder, params).unwrap()
    }

    #[test]
    fn contrastive_score_is_deterministic_per_seed() {
        let eval = tiny_setup();
        let theta: Vec<u8> = (0..2 * encoding_length(2).unwrap())
            .map(|i| (i % 8) as u8)
            .collect();
        let a = eval.evaluate(&theta, 123).unwrap();
        let b = eval.evaluate(&theta, 123).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let c = eval.evaluate(&theta, 124).unwrap();
        assert_ne!(a.to_bits(), c.to_bits());
    }

    #[test]
    fn zero_epochs_scores_untrained_but_finite() {
        let mut eval = tiny_setup();
        eval.params.epochs = 0;
        let theta = vec![0u8; 2 * encoding_length(2).unwrap()];
        let loss = eval.evaluate(&theta, 7).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
    }
}
