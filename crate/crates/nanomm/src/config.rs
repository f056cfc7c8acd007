//! Run configuration: a flat, diffable TOML file with typed sections for
//! the model, the corpus, the optimizer-wide knobs, and one table per
//! training stage. Unknown keys anywhere are hard errors, and a parsed
//! config serializes back to an equivalent structure.

use crate::align::SinkhornConfig;
use crate::corpus::CorpusConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::lm::{AdapterConfig, DecoderConfig};
use crate::model::ModelConfig;
use crate::patcher::ResolutionPolicy;
use crate::rotary::{PositionMode, RotaryConfig};
use crate::trainer::{Stage, StageConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,
    pub model: ModelSection,
    pub corpus: CorpusSection,
    pub train: TrainSection,
    pub stages: StagesSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub encoder: EncoderSection,
    pub decoder: DecoderSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
    /// Side G of the learned G×G position table.
    pub pos_grid: usize,
    pub rotary_base: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSection {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_positions: usize,
    pub rotary_base: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub min_side: usize,
    pub max_side: usize,
    pub max_objects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Global gradient-norm clip.
    pub clip: f64,
    /// Softmax temperature on both sides of the alignment loss.
    pub align_temp: f64,
    pub sinkhorn_eps: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_two_sided: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagesSection {
    #[serde(rename = "I")]
    pub stage_i: StageSection,
    #[serde(rename = "II-fixed")]
    pub stage_ii_fixed: StageSection,
    #[serde(rename = "II-native")]
    pub stage_ii_native: StageSection,
    #[serde(rename = "III")]
    pub stage_iii: StageSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    /// "fixed" (requires `side`) or "native" (optional `max_merged_tokens`).
    pub resolution: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub side: Option<usize>,
    /// Visual-token budget counted after the adapter's 2×2 merge.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_merged_tokens: Option<usize>,
    pub position_mode: PositionMode,
    pub alpha: f64,
    pub lr_adapter: f64,
    pub lr_vfm: f64,
    pub lr_llm: f64,
    pub epochs: usize,
    pub pairs: usize,
    pub batch_size: usize,
    pub warmup_ratio: f64,
}

impl StageSection {
    fn resolution_policy(&self, stage: Stage, patch: usize) -> Result<ResolutionPolicy> {
        match self.resolution.as_str() {
            "fixed" => {
                if self.max_merged_tokens.is_some() {
                    return Err(Error::Config(format!(
                        "stage {stage}: max_merged_tokens applies to native resolution only"
                    )));
                }
                let side = self.side.ok_or_else(|| {
                    Error::Config(format!("stage {stage}: fixed resolution requires `side`"))
                })?;
                if side == 0 || side % patch != 0 || (side / patch) % 2 != 0 {
                    return Err(Error::Config(format!(
                        "stage {stage}: side {side} must be a multiple of the patch size {patch} \
                         with an even patch grid (the adapter merges 2×2 windows)"
                    )));
                }
                Ok(ResolutionPolicy::fixed(side))
            }
            "native" => {
                if self.side.is_some() {
                    return Err(Error::Config(format!(
                        "stage {stage}: `side` applies to fixed resolution only"
                    )));
                }
                // translate the merged-token budget into patch tokens
                Ok(ResolutionPolicy::native(self.max_merged_tokens.map(|m| 4 * m)))
            }
            other => Err(Error::Config(format!(
                "stage {stage}: unknown resolution {other:?} (expected \"fixed\" or \"native\")"
            ))),
        }
    }

    fn from_stage_config(cfg: &StageConfig, patch: usize) -> StageSection {
        let (resolution, side, max_merged_tokens) = match cfg.resolution {
            ResolutionPolicy {
                mode: crate::patcher::ResolutionMode::Fixed { side },
                ..
            } => ("fixed".to_string(), Some(side), None),
            ResolutionPolicy {
                mode: crate::patcher::ResolutionMode::Native,
                max_visual_tokens,
            } => ("native".to_string(), None, max_visual_tokens.map(|m| m / 4)),
        };
        let _ = patch;
        StageSection {
            resolution,
            side,
            max_merged_tokens,
            position_mode: cfg.position_mode,
            alpha: cfg.alpha,
            lr_adapter: cfg.lr_adapter,
            lr_vfm: cfg.lr_vfm,
            lr_llm: cfg.lr_llm,
            epochs: cfg.epochs,
            pairs: cfg.pairs,
            batch_size: cfg.batch_size,
            warmup_ratio: cfg.warmup_ratio,
        }
    }

    fn to_stage_config(&self, stage: Stage, patch: usize) -> Result<StageConfig> {
        let cfg = StageConfig {
            stage,
            resolution: self.resolution_policy(stage, patch)?,
            position_mode: self.position_mode,
            alpha: self.alpha,
            lr_adapter: self.lr_adapter,
            lr_vfm: self.lr_vfm,
            lr_llm: self.lr_llm,
            epochs: self.epochs,
            pairs: self.pairs,
            batch_size: self.batch_size,
            warmup_ratio: self.warmup_ratio,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    /// The desk-scale default recipe (also committed as configs/default.toml).
    pub fn default_toy() -> RunConfig {
        let patch = 14;
        RunConfig {
            seed: 11,
            output_dir: "runs/default".to_string(),
            model: ModelSection {
                encoder: EncoderSection {
                    layers: 2,
                    width: 64,
                    heads: 2,
                    patch,
                    mlp_ratio: 4,
                    pos_grid: 8,
                    rotary_base: 10000.0,
                },
                decoder: DecoderSection {
                    layers: 2,
                    width: 64,
                    heads: 2,
                    mlp_ratio: 4,
                    max_positions: 256,
                    rotary_base: 10000.0,
                },
            },
            corpus: CorpusSection {
                min_side: 112,
                max_side: 896,
                max_objects: 4,
            },
            train: TrainSection {
                clip: 1.0,
                align_temp: 0.005,
                sinkhorn_eps: 0.005,
                sinkhorn_iters: 3,
                sinkhorn_two_sided: true,
            },
            stages: StagesSection {
                stage_i: StageSection::from_stage_config(&StageConfig::defaults(Stage::I), patch),
                stage_ii_fixed: StageSection::from_stage_config(&StageConfig::defaults(Stage::IIFixed), patch),
                stage_ii_native: StageSection::from_stage_config(&StageConfig::defaults(Stage::IINative), patch),
                stage_iii: StageSection::from_stage_config(&StageConfig::defaults(Stage::III), patch),
            },
        }
    }

    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialize error: {e}")))
    }

    /// Model assembly with derived pieces filled in: the adapter bridges the
    /// encoder and decoder widths, the vocabulary is the built-in corpus
    /// word list, and rotary head dimensions follow width/heads.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let e = &self.model.encoder;
        let d = &self.model.decoder;
        if e.heads == 0 || e.width % e.heads != 0 {
            return Err(Error::Config(format!(
                "encoder width {} must divide evenly into {} heads",
                e.width, e.heads
            )));
        }
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                layers: e.layers,
                width: e.width,
                heads: e.heads,
                patch: e.patch,
                channels: 3,
                mlp_ratio: e.mlp_ratio,
                pos_grid: e.pos_grid,
                rotary: RotaryConfig::new(e.width / e.heads, e.rotary_base, PositionMode::Combined)?,
            },
            adapter: AdapterConfig {
                d_v: e.width,
                d_t: d.width,
            },
            decoder: DecoderConfig {
                layers: d.layers,
                width: d.width,
                heads: d.heads,
                vocab: vocab_size,
                mlp_ratio: d.mlp_ratio,
                max_positions: d.max_positions,
                rotary_base: d.rotary_base,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            min_side: self.corpus.min_side,
            max_side: self.corpus.max_side,
            max_objects: self.corpus.max_objects,
        }
    }

    pub fn sinkhorn_config(&self) -> SinkhornConfig {
        SinkhornConfig {
            eps: self.train.sinkhorn_eps,
            n_iters: self.train.sinkhorn_iters,
            two_sided: self.train.sinkhorn_two_sided,
            ..SinkhornConfig::default()
        }
    }

    /// The four stage configs in execution order (fixed-resolution stage II
    /// always precedes native).
    pub fn stage_configs(&self) -> Result<Vec<StageConfig>> {
        let p = self.model.encoder.patch;
        Ok(vec![
            self.stages.stage_i.to_stage_config(Stage::I, p)?,
            self.stages.stage_ii_fixed.to_stage_config(Stage::IIFixed, p)?,
            self.stages.stage_ii_native.to_stage_config(Stage::IINative, p)?,
            self.stages.stage_iii.to_stage_config(Stage::III, p)?,
        ])
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dir.is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }
        self.corpus_config().validate()?;
        self.sinkhorn_config().validate()?;
        if !(self.train.clip > 0.0) || !(self.train.align_temp > 0.0) {
            return Err(Error::Config(format!(
                "clip {} and align_temp {} must be positive",
                self.train.clip, self.train.align_temp
            )));
        }
        // full model + stage validation (vocab size is arbitrary here; the
        // built-in vocabulary is what training actually uses)
        self.model_config(crate::corpus::Vocabulary::core().size())?;
        self.stage_configs()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patcher::ResolutionMode;

    #[test]
    fn default_toy_validates_and_round_trips() {
        let cfg = RunConfig::default_toy();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg, "config does not survive serialize→parse");
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let cfg = RunConfig::default_toy();
        let mut text = cfg.to_toml_string().unwrap();
        text.push_str("\nmystery_knob = 3\n");
        let err = RunConfig::from_toml_str(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(err.exit_code(), 2);

        // nested unknown key too
        let nested = text.replace("[corpus]", "[corpus]\nstray = 1");
        assert!(RunConfig::from_toml_str(&nested).is_err());
    }

    #[test]
    fn stage_tables_translate_to_trainer_configs() {
        let cfg = RunConfig::default_toy();
        let stages = cfg.stage_configs().unwrap();
        assert_eq!(stages.len(), 4);
        assert_eq!(stages[0].stage, Stage::I);
        assert_eq!(stages[1].stage, Stage::IIFixed);
        assert_eq!(stages[2].stage, Stage::IINative);
        assert_eq!(stages[3].stage, Stage::III);
        // merged-token budget ×4 into patch tokens
        assert_eq!(stages[2].resolution.max_visual_tokens, Some(144));
        assert!(matches!(stages[2].resolution.mode, ResolutionMode::Native));
        assert!(matches!(stages[1].resolution.mode, ResolutionMode::Fixed { side: 168 }));
    }

    #[test]
    fn resolution_field_cross_checks() {
        let cfg = RunConfig::default_toy();
        let mut bad = cfg.clone();
        bad.stages.stage_i.side = None;
        assert!(bad.validate().is_err(), "fixed without side");

        let mut bad = cfg.clone();
        bad.stages.stage_i.max_merged_tokens = Some(9);
        assert!(bad.validate().is_err(), "fixed with merged budget");

        let mut bad = cfg.clone();
        bad.stages.stage_ii_native.side = Some(112);
        assert!(bad.validate().is_err(), "native with side");

        let mut bad = cfg.clone();
        bad.stages.stage_i.side = Some(110); // not a multiple of 14
        assert!(bad.validate().is_err(), "side must align to patches");

        let mut bad = cfg.clone();
        bad.stages.stage_i.side = Some(98); // 7-patch grid is odd
        assert!(bad.validate().is_err(), "grid must be even for the merge");

        let mut bad = cfg;
        bad.stages.stage_i.resolution = "dynamic".into();
        assert!(bad.validate().is_err(), "unknown resolution word");
    }

    #[test]
    fn stage_rules_surface_through_config() {
        let mut bad = RunConfig::default_toy();
        bad.stages.stage_i.position_mode = PositionMode::Combined;
        assert!(bad.validate().is_err(), "stage I must stay learned-only");

        let mut bad = RunConfig::default_toy();
        bad.stages.stage_iii.alpha = 0.05;
        assert!(bad.validate().is_err(), "stage III must have alpha = 0");
    }

    #[test]
    fn committed_default_config_matches_code() {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
        let text = std::fs::read_to_string(&path).expect("configs/default.toml must exist at the workspace root");
        let parsed = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(parsed, RunConfig::default_toy(), "configs/default.toml drifted from RunConfig::default_toy()");
    }
}
