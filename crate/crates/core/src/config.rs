//! Pipeline configuration: a sectioned `key = value` file (TOML syntax).
//!
//! Every key is optional and falls back to its documented default; unknown
//! keys are rejected. An empty file is a valid configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ds_builder::{CorpusMode, DEFAULT_CAP};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::finetune_eval::F1Mode;
use crate::pretrain::MaskingPolicy;
use crate::wcl::{Temperature, WclOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub min_freq: usize,
    pub ln_eps: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        EncoderSection {
            d_model: e.d_model,
            layers: e.layers,
            heads: e.heads,
            ffn: e.ffn,
            max_len: e.max_len,
            min_freq: 2,
            ln_eps: e.ln_eps,
        }
    }
}

impl EncoderSection {
    pub fn encoder_config(&self, vocab_size: usize, num_labels: usize) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            ffn: self.ffn,
            max_len: self.max_len,
            vocab_size,
            num_labels,
            ln_eps: self.ln_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WclSection {
    /// Bags per contrastive batch (G).
    pub batch_bags: usize,
    pub bag_size: usize,
    pub temperature: f64,
    pub include_self: bool,
    pub outer_anchor_weight: bool,
    /// When false every confidence is treated as 1 (unweighted baseline).
    pub weighted: bool,
}

impl Default for WclSection {
    fn default() -> Self {
        WclSection {
            batch_bags: crate::wcl::DEFAULT_BATCH_BAGS,
            bag_size: crate::wcl::DEFAULT_BAG_SIZE,
            temperature: crate::wcl::DEFAULT_TEMPERATURE,
            include_self: false,
            outer_anchor_weight: false,
            weighted: true,
        }
    }
}

impl WclSection {
    pub fn options(&self) -> Result<WclOptions> {
        Ok(WclOptions {
            temperature: Temperature::new(self.temperature)?,
            include_self: self.include_self,
            outer_anchor_weight: self.outer_anchor_weight,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlmSection {
    pub mask_rate: f64,
    pub replace_mask: f64,
    pub replace_random: f64,
    pub keep: f64,
    /// Sequences drawn from the MLM stream per pre-training step.
    pub batch_size: usize,
}

impl Default for MlmSection {
    fn default() -> Self {
        let p = MaskingPolicy::default();
        MlmSection {
            mask_rate: p.mask_rate,
            replace_mask: p.replace_mask,
            replace_random: p.replace_random,
            keep: p.keep,
            batch_size: 16,
        }
    }
}

impl MlmSection {
    pub fn policy(&self) -> Result<MaskingPolicy> {
        let p = MaskingPolicy {
            mask_rate: self.mask_rate,
            replace_mask: self.replace_mask,
            replace_random: self.replace_random,
            keep: self.keep,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Epoch-based supervised training (reliability classifier, fine-tuning).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisedSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip: f64,
}

impl SupervisedSection {
    fn reliability() -> Self {
        SupervisedSection {
            lr: 1e-3,
            epochs: 10,
            batch_size: 32,
            clip: 1.0,
        }
    }

    fn finetune() -> Self {
        SupervisedSection {
            lr: 5e-4,
            ..Self::reliability()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub lr: f64,
    pub steps: u64,
    pub warmup_fraction: f64,
    pub clip: f64,
    /// Checkpoint interval in steps; 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            lr: 1e-3,
            steps: 1000,
            warmup_fraction: 0.1,
            clip: 1.0,
            checkpoint_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DsSection {
    pub cap: usize,
    pub drop_pronouns: bool,
    pub corpus_mode: String,
}

impl Default for DsSection {
    fn default() -> Self {
        DsSection {
            cap: DEFAULT_CAP,
            drop_pronouns: false,
            corpus_mode: "line".into(),
        }
    }
}

impl DsSection {
    pub fn mode(&self) -> Result<CorpusMode> {
        self.corpus_mode.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub na_label: String,
    pub f1_mode: F1Mode,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            na_label: crate::data_model::NA.into(),
            f1_mode: F1Mode::ExcludeNa,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub num_relations: usize,
    pub triggers_per_relation: usize,
    /// Triggers per relation that appear in the annotated training split;
    /// the rest occur only in distant and test sentences.
    pub ha_triggers: usize,
    pub entities: usize,
    pub filler_tokens: usize,
    pub ds_bags_per_relation: usize,
    pub bag_instances: usize,
    pub ds_na_bags: usize,
    pub ha_size: usize,
    pub test_size: usize,
    pub na_fraction: f64,
    pub noise_rate: f64,
    pub seeds: Vec<u64>,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            num_relations: 4,
            triggers_per_relation: 4,
            ha_triggers: 2,
            entities: 12,
            filler_tokens: 24,
            ds_bags_per_relation: 12,
            bag_instances: 6,
            ds_na_bags: 8,
            ha_size: 96,
            test_size: 200,
            na_fraction: 0.2,
            noise_rate: 0.3,
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub encoder: EncoderSection,
    pub wcl: WclSection,
    pub mlm: MlmSection,
    #[serde(with = "supervised_rel")]
    pub reliability: SupervisedSection,
    pub pretrain: PretrainSection,
    #[serde(with = "supervised_ft")]
    pub finetune: SupervisedSection,
    pub ds: DsSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 13,
            encoder: EncoderSection::default(),
            wcl: WclSection::default(),
            mlm: MlmSection::default(),
            reliability: SupervisedSection::reliability(),
            pretrain: PretrainSection::default(),
            finetune: SupervisedSection::finetune(),
            ds: DsSection::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
        }
    }
}

/// Per-section defaults for the two supervised blocks, which share a type
/// but differ in learning rate.
macro_rules! supervised_defaults {
    ($module:ident, $ctor:ident) => {
        mod $module {
            use super::SupervisedSection;
            use serde::{Deserialize, Deserializer, Serialize, Serializer};

            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct Partial {
                lr: Option<f64>,
                epochs: Option<usize>,
                batch_size: Option<usize>,
                clip: Option<f64>,
            }

            pub fn serialize<S: Serializer>(v: &SupervisedSection, s: S) -> Result<S::Ok, S::Error> {
                v.serialize(s)
            }

            pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<SupervisedSection, D::Error> {
                let p = Partial::deserialize(d)?;
                let base = SupervisedSection::$ctor();
                Ok(SupervisedSection {
                    lr: p.lr.unwrap_or(base.lr),
                    epochs: p.epochs.unwrap_or(base.epochs),
                    batch_size: p.batch_size.unwrap_or(base.batch_size),
                    clip: p.clip.unwrap_or(base.clip),
                })
            }
        }
    };
}

supervised_defaults!(supervised_rel, reliability);
supervised_defaults!(supervised_ft, finetune);

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.wcl.options()?;
        self.mlm.policy()?;
        self.encoder.encoder_config(9, 2).validate()?;
        self.ds.mode()?;
        if self.wcl.batch_bags == 0 || self.wcl.bag_size == 0 {
            return Err(Error::Config("batch_bags and bag_size must be positive".into()));
        }
        if self.ds.cap == 0 {
            return Err(Error::Config("cap must be at least 1".into()));
        }
        for (name, s) in [("reliability", &self.reliability), ("finetune", &self.finetune)] {
            if s.lr.is_nan() || s.lr <= 0.0 || s.batch_size == 0 {
                return Err(Error::Config(format!("{name}: lr and batch_size must be positive")));
            }
        }
        if self.pretrain.lr.is_nan() || self.pretrain.lr <= 0.0 || !(0.0..=1.0).contains(&self.pretrain.warmup_fraction) {
            return Err(Error::Config("pretrain: lr must be positive and warmup_fraction in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.bench.noise_rate) {
            return Err(Error::Config("noise_rate must be in [0, 1)".into()));
        }
        if self.bench.seeds.is_empty() {
            return Err(Error::Config("bench seeds must be non-empty".into()));
        }
        Ok(())
    }

    /// The effective configuration, re-parseable by [`PipelineConfig::parse`].
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the effective configuration next to an output.
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
