//! Flat run configuration: one TOML key per hyperparameter, documented
//! defaults for anything missing, unknown keys rejected.

use std::collections::BTreeMap;
use std::path::Path;

use newscap_core::corpus::GeneratorConfig;
use newscap_core::decoder::{AlphaMode, GenerationConfig, Search, TrainConfig};
use newscap_core::encoder::{Interpolation, ModelConfig, ZeroOut};
use newscap_core::metrics::ReferenceComponents;
use newscap_core::nee::{NeeConfig, NegativeSampling};
use newscap_core::nn::Activation;
use newscap_core::optim::AdamConfig;
use newscap_core::taxonomy::{goodnews_mixture, ComponentVector, NeType};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // corpus synthesis
    pub samples: usize,
    pub split: [f64; 3],
    pub mixture: Vec<f64>,
    pub inventory_sizes: BTreeMap<NeType, usize>,
    pub who_types: Vec<NeType>,
    pub when_types: Vec<NeType>,
    pub where_types: Vec<NeType>,
    pub misc_types: Vec<NeType>,
    pub article_len_min: usize,
    pub article_len_max: usize,
    pub extra_distractors: usize,
    pub absent_mention_rate: [f64; 4],
    pub image_components: [bool; 5],
    pub image_dim: usize,
    pub image_noise: f64,
    pub context_verbs: usize,
    pub vocab_min_count: usize,

    // entity embeddings
    pub kb_coverage: f64,
    pub kb_anchor_window: usize,
    pub nee_dim: usize,
    pub nee_epochs: usize,
    pub nee_learning_rate: f64,
    pub nee_batch_size: usize,
    pub nee_window: usize,
    pub nee_sigmoid_negatives: usize,
    pub nee_negatives: usize,
    pub nee_objective_weights: [f64; 4],
    pub nee_negative_sampling: NegativeSampling,
    pub nee_init_scale: f64,

    // captioner
    pub d_model: usize,
    pub d_text: usize,
    pub num_heads: usize,
    pub encoder_layers: usize,
    pub shared_blocks: usize,
    pub ff_width: usize,
    pub segment_len: usize,
    pub max_article_len: usize,
    pub max_caption_len: usize,
    pub dropout: f64,
    pub head_hidden: usize,
    pub activation: Activation,
    pub interpolation: Interpolation,

    // optimisation
    pub train_steps: usize,
    pub train_batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lambda_c: f64,
    pub detach_component_head: bool,
    pub clip_norm: f64,
    pub eval_every: usize,

    // generation and evaluation
    pub alpha_mode: String,
    pub alpha: Option<[f64; 5]>,
    pub beam: usize,
    pub max_length: usize,
    pub zero_out: ZeroOut,
    pub reference_components: ReferenceComponents,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        let n = NeeConfig::default();
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            seed: 0,
            samples: 2000,
            split: [0.8, 0.1, 0.1],
            mixture: goodnews_mixture().to_vec(),
            inventory_sizes: g.inventory_sizes,
            who_types: g.who_types,
            when_types: g.when_types,
            where_types: g.where_types,
            misc_types: g.misc_types,
            article_len_min: g.article_len_min,
            article_len_max: g.article_len_max,
            extra_distractors: g.extra_distractors,
            absent_mention_rate: g.absent_mention_rate,
            image_components: g.image_components,
            image_dim: g.image_dim,
            image_noise: g.image_noise,
            context_verbs: g.context_verbs,
            vocab_min_count: 1,
            kb_coverage: 0.6,
            kb_anchor_window: 4,
            nee_dim: n.dim,
            nee_epochs: n.epochs,
            nee_learning_rate: n.learning_rate,
            nee_batch_size: n.batch_size,
            nee_window: n.window,
            nee_sigmoid_negatives: n.sigmoid_negatives,
            nee_negatives: n.nep_negatives,
            nee_objective_weights: n.objective_weights,
            nee_negative_sampling: n.negative_sampling,
            nee_init_scale: n.init_scale,
            d_model: m.d_model,
            d_text: m.d_text,
            num_heads: m.num_heads,
            encoder_layers: m.encoder_layers,
            shared_blocks: m.shared_blocks,
            ff_width: m.ff_width,
            segment_len: m.segment_len,
            max_article_len: m.max_article_len,
            max_caption_len: m.max_caption_len,
            dropout: m.dropout,
            head_hidden: m.head_hidden,
            activation: m.activation,
            interpolation: m.interpolation,
            train_steps: t.steps,
            train_batch_size: t.batch_size,
            learning_rate: t.adam.learning_rate,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            epsilon: t.adam.epsilon,
            lambda_c: t.lambda_c,
            detach_component_head: t.detach_component_head,
            clip_norm: t.clip_norm,
            eval_every: t.eval_every,
            alpha_mode: "oracle".into(),
            alpha: None,
            beam: 1,
            max_length: 32,
            zero_out: ZeroOut::None,
            reference_components: ReferenceComponents::Gold,
        }
    }
}

impl RunConfig {
    /// Defaults, then the file at `path` (if any), then `KEY=VALUE`
    /// overrides, each value parsed as TOML.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{o}` is not KEY=VALUE")))?;
            let key = key.trim();
            let parsed = parse_value(value.trim());
            table.insert(key.to_string(), parsed);
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        config.check()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    fn check(&self) -> Result<(), CliError> {
        self.generator().validate().map_err(CliError::from_core_config)?;
        self.nee_model_check()?;
        self.generation()?;
        self.train().validate().map_err(CliError::from_core_config)?;
        Ok(())
    }

    fn nee_model_check(&self) -> Result<(), CliError> {
        let m = ModelConfig { vocab_size: 1, ..self.model(1) };
        m.validate().map_err(CliError::from_core_config)?;
        if !(0.0..=1.0).contains(&self.kb_coverage) {
            return Err(CliError::Config(format!("kb_coverage {} outside [0, 1]", self.kb_coverage)));
        }
        Ok(())
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            inventory_sizes: self.inventory_sizes.clone(),
            mixture: self.mixture.clone(),
            who_types: self.who_types.clone(),
            when_types: self.when_types.clone(),
            where_types: self.where_types.clone(),
            misc_types: self.misc_types.clone(),
            article_len_min: self.article_len_min,
            article_len_max: self.article_len_max,
            extra_distractors: self.extra_distractors,
            absent_mention_rate: self.absent_mention_rate,
            image_components: self.image_components,
            image_dim: self.image_dim,
            image_noise: self.image_noise,
            context_verbs: self.context_verbs,
        }
    }

    pub fn nee(&self) -> NeeConfig {
        NeeConfig {
            dim: self.nee_dim,
            epochs: self.nee_epochs,
            learning_rate: self.nee_learning_rate,
            batch_size: self.nee_batch_size,
            window: self.nee_window,
            sigmoid_negatives: self.nee_sigmoid_negatives,
            nep_negatives: self.nee_negatives,
            objective_weights: self.nee_objective_weights,
            negative_sampling: self.nee_negative_sampling,
            init_scale: self.nee_init_scale,
        }
    }

    /// Image and entity widths follow the generator and the NEE table.
    pub fn model(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            d_image: self.image_dim,
            d_text: self.d_text,
            d_entity: self.nee_dim,
            num_heads: self.num_heads,
            encoder_layers: self.encoder_layers,
            shared_blocks: self.shared_blocks,
            subblocks: 5,
            ff_width: self.ff_width,
            vocab_size,
            segment_len: self.segment_len,
            max_article_len: self.max_article_len,
            max_caption_len: self.max_caption_len,
            dropout: self.dropout,
            head_hidden: self.head_hidden,
            activation: self.activation,
            interpolation: self.interpolation,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train_steps,
            batch_size: self.train_batch_size,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            },
            lambda_c: self.lambda_c,
            detach_component_head: self.detach_component_head,
            clip_norm: self.clip_norm,
            eval_every: self.eval_every,
        }
    }

    pub fn generation(&self) -> Result<GenerationConfig, CliError> {
        let alpha_mode = match (self.alpha_mode.as_str(), self.alpha) {
            ("oracle", _) => AlphaMode::Oracle,
            ("auto", _) => AlphaMode::Auto,
            ("manual", Some(a)) => AlphaMode::Manual(
                ComponentVector::new(a).map_err(|e| CliError::Config(format!("alpha: {e}")))?,
            ),
            ("manual", None) => {
                return Err(CliError::Config("alpha_mode = \"manual\" needs alpha = [5 weights]".into()))
            }
            (other, _) => {
                return Err(CliError::Config(format!(
                    "alpha_mode `{other}` is not one of oracle, auto, manual"
                )))
            }
        };
        let search = match self.beam {
            0 => return Err(CliError::Config("beam must be at least 1".into())),
            1 => Search::Greedy,
            w => Search::Beam(w),
        };
        let g = GenerationConfig { alpha_mode, search, max_length: self.max_length, zero_out: self.zero_out };
        g.validate().map_err(CliError::from_core_config)?;
        Ok(g)
    }
}

/// TOML literal when it parses as one, else a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_parse_as_toml_or_string() {
        let c = RunConfig::resolve(None, &["d_model=32".into(), "zero_out=text".into(), "alpha=[1,0,0,0,0]".into()]).unwrap();
        assert_eq!(c.d_model, 32);
        assert_eq!(c.zero_out, ZeroOut::Text);
        assert_eq!(c.alpha, Some([1.0, 0.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = RunConfig::resolve(None, &["d_modle=32".into()]).unwrap_err();
        assert!(matches!(&err, CliError::Config(m) if m.contains("d_modle")), "{err}");
    }

    #[test]
    fn invalid_values_are_reported() {
        assert!(RunConfig::resolve(None, &["num_heads=5".into()]).is_err());
        assert!(RunConfig::resolve(None, &["alpha_mode=manual".into()]).is_err());
        assert!(RunConfig::resolve(None, &["beam=0".into()]).is_err());
        assert!(matches!(RunConfig::resolve(None, &["oops".into()]), Err(CliError::Usage(_))));
    }
}
