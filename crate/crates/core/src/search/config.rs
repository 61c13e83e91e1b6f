//! The run configuration file: one TOML document holding every tunable.
//! Unknown keys are rejected; every field has a documented default, so a
//! minimal file only names what it changes. The parsed config is canonically
//! serialized (JSON, fixed field order) and hashed, so the hash changes
//! exactly when a semantic field changes.

use crate::encoder::ReductionPlacement;
use crate::error::{Error, Result};
use crate::space::{encoding_length, VOCAB_SIZE};
use crate::tpe::{SelectionRule, TpeConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

fn default_n_intermediate() -> usize { 4 }
fn default_vocab_size() -> usize { VOCAB_SIZE }
fn default_fraction() -> f64 { 0.1 }
fn default_true() -> bool { true }
fn default_count() -> usize { 64 }
fn default_image_size() -> usize { 16 }
fn default_classes() -> usize { 4 }
fn default_pad() -> usize { 4 }
fn default_crop() -> usize { 32 }
fn default_p_flip() -> f64 { 0.5 }
fn default_p_gray() -> f64 { 0.2 }
fn default_views() -> usize { 2 }
fn default_temperature() -> f64 { 0.07 }
fn default_lambda() -> f64 { 0.5 }
fn default_embed_dim() -> usize { 128 }
fn default_bank_momentum() -> f64 { 0.5 }
fn default_layers() -> usize { 8 }
fn default_channels() -> usize { 32 }
fn default_input_size() -> usize { 32 }
fn default_placement() -> ReductionPlacement { ReductionPlacement::Thirds }
fn default_gamma() -> f64 { 0.25 }
fn default_n_startup() -> usize { 20 }
fn default_n_candidates() -> usize { 20_000 }
fn default_top_fraction() -> f64 { 0.2 }
fn default_prior_weight() -> f64 { 1.0 }
fn default_selection() -> SelectionRule { SelectionRule::TopFractionRandom }
fn default_iterations() -> usize { 100 }
fn default_workers() -> usize { 1 }
fn default_epochs() -> usize { 2 }
fn default_batch_size() -> usize { 150 }
fn default_lr() -> f64 { 0.001 }
fn default_momentum() -> f64 { 0.9 }
fn default_target_code() -> u8 { 3 }
fn default_noise() -> f64 { 0.1 }
fn default_seed() -> u64 { 42 }

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSection {
    #[serde(default = "default_n_intermediate")]
    pub n_intermediate: usize,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
}

impl Default for SpaceSection {
    fn default() -> Self {
        SpaceSection {
            n_intermediate: default_n_intermediate(),
            vocab_size: default_vocab_size(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Directory holding the CIFAR-10 binary batches. Required for cifar10.
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default = "default_true")]
    pub class_balanced: bool,
    /// Subset/generator seed; separate from the run seed so the dataset stays
    /// fixed across search seeds.
    #[serde(default)]
    pub seed: u64,
    /// Synthetic-source image count.
    #[serde(default = "default_count")]
    pub count: usize,
    /// Synthetic-source square resolution.
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    /// Synthetic-source latent class count.
    #[serde(default = "default_classes")]
    pub classes: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synthetic,
            path: None,
            fraction: default_fraction(),
            class_balanced: true,
            seed: 0,
            count: default_count(),
            image_size: default_image_size(),
            classes: default_classes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    #[serde(default = "default_pad")]
    pub pad: usize,
    #[serde(default = "default_crop")]
    pub crop: usize,
    #[serde(default)]
    pub center: bool,
    #[serde(default = "default_p_flip")]
    pub p_hflip: f64,
    #[serde(default = "default_p_flip")]
    pub p_vflip: f64,
    #[serde(default = "default_p_gray")]
    pub p_gray: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            pad: default_pad(),
            crop: default_crop(),
            center: false,
            p_hflip: default_p_flip(),
            p_vflip: default_p_flip(),
            p_gray: default_p_gray(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveSection {
    #[serde(default = "default_views")]
    pub views: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_bank_momentum")]
    pub bank_momentum: f64,
}

impl Default for ContrastiveSection {
    fn default() -> Self {
        ContrastiveSection {
            views: default_views(),
            temperature: default_temperature(),
            lambda: default_lambda(),
            embed_dim: default_embed_dim(),
            bank_momentum: default_bank_momentum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default = "default_placement")]
    pub reduction_placement: ReductionPlacement,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            layers: default_layers(),
            channels: default_channels(),
            input_size: default_input_size(),
            reduction_placement: default_placement(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TpeSection {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_n_startup")]
    pub n_startup: usize,
    #[serde(default = "default_n_candidates")]
    pub n_candidates: usize,
    #[serde(default = "default_top_fraction")]
    pub top_fraction: f64,
    #[serde(default = "default_prior_weight")]
    pub prior_weight: f64,
    #[serde(default = "default_selection")]
    pub selection: SelectionRule,
    /// SMBO trial budget I.
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Parallel evaluations per fitted model.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl Default for TpeSection {
    fn default() -> Self {
        TpeSection {
            gamma: default_gamma(),
            n_startup: default_n_startup(),
            n_candidates: default_n_candidates(),
            top_fraction: default_top_fraction(),
            prior_weight: default_prior_weight(),
            selection: default_selection(),
            iterations: default_iterations(),
            workers: default_workers(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorKind {
    Contrastive,
    Tabular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatorSection {
    pub kind: EvaluatorKind,
    /// Training epochs per trial (E); 0 scores the untrained network.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Minibatch size K.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Tabular objective: the zero-cost code per dimension.
    #[serde(default = "default_target_code")]
    pub tabular_target_code: u8,
    /// Tabular objective: Gaussian noise sigma.
    #[serde(default = "default_noise")]
    pub tabular_noise: f64,
}

impl Default for EvaluatorSection {
    fn default() -> Self {
        EvaluatorSection {
            kind: EvaluatorKind::Contrastive,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr: default_lr(),
            momentum: default_momentum(),
            tabular_target_code: default_target_code(),
            tabular_noise: default_noise(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: default_seed() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub space: SpaceSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub contrastive: ContrastiveSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub tpe: TpeSection,
    #[serde(default)]
    pub evaluator: EvaluatorSection,
    #[serde(default)]
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config parses to defaults")
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)
            .map_err(|e| Error::config("config", e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            key: "config".into(),
            reason: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.space.n_intermediate;
        encoding_length(n).map_err(|e| Error::config("space.n_intermediate", e.to_string()))?;
        if self.space.vocab_size != VOCAB_SIZE {
            return Err(Error::config(
                "space.vocab_size",
                format!("only the {VOCAB_SIZE}-operation vocabulary is executable"),
            ));
        }
        if !(self.data.fraction > 0.0 && self.data.fraction <= 1.0) {
            return Err(Error::config("data.fraction", "must be in (0, 1]"));
        }
        if self.data.source == DataSource::Cifar10 && self.data.path.is_none() {
            return Err(Error::config("data.path", "required when data.source = \"cifar10\""));
        }
        for (key, p) in [
            ("augment.p_hflip", self.augment.p_hflip),
            ("augment.p_vflip", self.augment.p_vflip),
            ("augment.p_gray", self.augment.p_gray),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(key, "probability must be in [0, 1]"));
            }
        }
        if self.contrastive.temperature <= 0.0 {
            return Err(Error::config("contrastive.temperature", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.contrastive.lambda) {
            return Err(Error::config("contrastive.lambda", "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.contrastive.bank_momentum) {
            return Err(Error::config("contrastive.bank_momentum", "must be in [0, 1]"));
        }
        if self.contrastive.views == 0 {
            return Err(Error::config("contrastive.views", "must be at least 1"));
        }
        if self.contrastive.embed_dim == 0 {
            return Err(Error::config("contrastive.embed_dim", "must be positive"));
        }
        if self.evaluator.kind == EvaluatorKind::Contrastive {
            if self.augment.crop != self.encoder.input_size {
                return Err(Error::config(
                    "augment.crop",
                    format!(
                        "crop ({}) must equal encoder.input_size ({})",
                        self.augment.crop, self.encoder.input_size
                    ),
                ));
            }
            if self.evaluator.batch_size < 2 {
                return Err(Error::config("evaluator.batch_size", "need K >= 2"));
            }
            self.encoder_config().validate()?;
        }
        if self.evaluator.kind == EvaluatorKind::Tabular
            && self.evaluator.tabular_target_code as usize >= self.space.vocab_size
        {
            return Err(Error::config(
                "evaluator.tabular_target_code",
                "target code outside the vocabulary",
            ));
        }
        if !(self.evaluator.lr >= 0.0) {
            return Err(Error::config("evaluator.lr", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.evaluator.momentum) {
            return Err(Error::config("evaluator.momentum", "must be in [0, 1]"));
        }
        if self.tpe.iterations == 0 {
            return Err(Error::config("tpe.iterations", "need at least one trial"));
        }
        if self.tpe.workers == 0 {
            return Err(Error::config("tpe.workers", "need at least one worker"));
        }
        self.tpe_config().validate()?;
        Ok(())
    }

    pub fn tpe_config(&self) -> TpeConfig {
        TpeConfig {
            gamma: self.tpe.gamma,
            n_startup: self.tpe.n_startup,
            n_candidates: self.tpe.n_candidates,
            top_fraction: self.tpe.top_fraction,
            prior_weight: self.tpe.prior_weight,
            selection: self.tpe.selection,
        }
    }

    pub fn encoder_config(&self) -> crate::encoder::EncoderConfig {
        crate::encoder::EncoderConfig {
            layers: self.encoder.layers,
            channels: self.encoder.channels,
            input_size: self.encoder.input_size,
            embed_dim: self.contrastive.embed_dim,
            views: self.contrastive.views,
            reduction_placement: self.encoder.reduction_placement,
        }
    }

    pub fn augment_policy(&self) -> crate::data::AugmentPolicy {
        crate::data::AugmentPolicy {
            pad: self.augment.pad,
            crop: self.augment.crop,
            center: self.augment.center,
            p_hflip: self.augment.p_hflip,
            p_vflip: self.augment.p_vflip,
            p_gray: self.augment.p_gray,
        }
    }

    /// Hash of the canonical serialization; changes iff a semantic field
    /// changes (comments and formatting do not count).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config is serializable");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().fold(String::new(), |mut acc, b| {
            acc.push_str(&format!("{b:02x}"));
            acc
        })
    }
}
