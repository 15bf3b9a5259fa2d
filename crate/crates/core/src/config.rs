//! Run configuration: JSON file plus presets and command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TiltError};
use crate::metrics::Metric;
use crate::model::TiltConfig;
use crate::numerics::{AdamWConfig, Schedule};
use crate::vision::AffineBounds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Adds lower- and upper-cased copies of every training example.
    pub case: bool,
    pub spatial: bool,
    pub spatial_p: f64,
    pub affine: bool,
    pub affine_bounds: AffineBounds,
    /// Pretraining only: blank image regions of masked words.
    pub image_mask: bool,
    pub image_mask_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            case: true,
            spatial: true,
            spatial_p: 1.0,
            affine: true,
            affine_bounds: AffineBounds::default(),
            image_mask: true,
            image_mask_p: crate::objectives::IMAGE_MASK_P,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            case: false,
            spatial: false,
            affine: false,
            image_mask: false,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    /// Checkpoint to start finetuning, evaluation or prediction from.
    pub init: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Per-step JSON log; stdout when absent.
    pub log: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

/// Synthetic fixtures for `synth` and `ablate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub docs: usize,
    /// Key/value pairs (layout) or words (font) per page.
    pub items: usize,
    pub first_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    LayoutQa,
    RelationQa,
    FontCue,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            kind: SynthKind::LayoutQa,
            docs: 64,
            items: 4,
            first_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    /// Distinct generated training pages.
    pub train_docs: usize,
    pub eval_docs: usize,
    /// Stacks per relation page.
    pub relation_items: usize,
    pub font_items: usize,
    pub relation_steps: u64,
    pub font_steps: u64,
    /// Replace `optimizer.lr` and `schedule` for every ablation run.
    pub lr: f64,
    pub schedule: Schedule,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            seeds: vec![0, 1],
            train_docs: 100_000,
            eval_docs: 48,
            relation_items: 3,
            font_items: 4,
            relation_steps: 4000,
            font_steps: 500,
            lr: 1e-3,
            schedule: Schedule::Constant,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: TiltConfig,
    pub optimizer: AdamWConfig,
    pub schedule: Schedule,
    pub steps: u64,
    pub batch: usize,
    pub grad_clip: Option<f64>,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub data: DataPaths,
    pub metric: Metric,
    pub max_answer_len: usize,
    /// Stop once training-set exact match reaches this value, checked every `eval_every` steps.
    pub early_stop_em: Option<f64>,
    pub eval_every: u64,
    pub synth: SynthConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: TiltConfig::default(),
            optimizer: AdamWConfig::default(),
            schedule: Schedule::Linear,
            steps: 1000,
            batch: 8,
            grad_clip: Some(1.0),
            augment: AugmentConfig::default(),
            seed: 0,
            data: DataPaths::default(),
            metric: Metric::Anls,
            max_answer_len: 16,
            early_stop_em: None,
            eval_every: 100,
            synth: SynthConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

/// One row of the published finetuning hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub dataset: &'static str,
    pub batch: usize,
    pub steps: u64,
    pub lr: f64,
    pub schedule: Schedule,
}

pub const PRESETS: [Preset; 5] = [
    Preset {
        name: "sroie-like",
        dataset: "SROIE",
        batch: 8,
        steps: 6_200,
        lr: 1e-4,
        schedule: Schedule::Constant,
    },
    Preset {
        name: "wikiops-like",
        dataset: "WikiOps",
        batch: 64,
        steps: 4_200,
        lr: 1e-4,
        schedule: Schedule::Constant,
    },
    Preset {
        name: "docvqa-like",
        dataset: "DocVQA",
        batch: 64,
        steps: 100_000,
        lr: 2e-4,
        schedule: Schedule::Linear,
    },
    Preset {
        name: "cord-like",
        dataset: "CORD",
        batch: 8,
        steps: 36_000,
        lr: 2e-4,
        schedule: Schedule::Linear,
    },
    Preset {
        name: "rvlcdip-like",
        dataset: "RVL-CDIP",
        batch: 1_024,
        steps: 12_000,
        lr: 1e-3,
        schedule: Schedule::Linear,
    },
];

pub fn preset(name: &str) -> Result<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name).ok_or_else(|| {
        let known: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
        TiltError::Config(format!("unknown preset `{name}` (known: {})", known.join(", ")))
    })
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| TiltError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 {
            return Err(TiltError::Config("steps must be positive".into()));
        }
        if self.batch == 0 {
            return Err(TiltError::Config("batch must be positive".into()));
        }
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr >= 0.0) {
            return Err(TiltError::Config(format!("bad learning rate {}", self.optimizer.lr)));
        }
        for (name, p) in [
            ("augment.spatial_p", self.augment.spatial_p),
            ("augment.image_mask_p", self.augment.image_mask_p),
            ("augment.affine_bounds.probability", self.augment.affine_bounds.probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(TiltError::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.eval_every == 0 {
            return Err(TiltError::Config("eval_every must be positive".into()));
        }
        Ok(())
    }

    pub fn apply_preset(&mut self, p: &Preset) {
        self.batch = p.batch;
        self.steps = p.steps;
        self.optimizer.lr = p.lr;
        self.schedule = p.schedule;
    }

    /// Multiplies steps and batch by `factor`, keeping both at least 1.
    pub fn scale(&mut self, factor: f64) -> Result<()> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(TiltError::Config(format!("scale must be positive, got {factor}")));
        }
        self.steps = ((self.steps as f64 * factor).round() as u64).max(1);
        self.batch = ((self.batch as f64 * factor).round() as usize).max(1);
        Ok(())
    }
}

/// Dotted names of the fields where two model configurations differ.
pub fn config_diff(a: &TiltConfig, b: &TiltConfig) -> Vec<String> {
    let (a, b) = (
        serde_json::to_value(a).expect("config serializes"),
        serde_json::to_value(b).expect("config serializes"),
    );
    let mut out = Vec::new();
    diff_values("", &a, &b, &mut out);
    out
}

fn diff_values(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => diff_values(&name, u, v, out),
                    _ => out.push(name),
                }
            }
        }
        _ if a != b => out.push(prefix.to_string()),
        _ => {}
    }
}

/// Fails with the differing field names unless the two configurations agree.
pub fn ensure_compatible(run: &TiltConfig, checkpoint: &TiltConfig) -> Result<()> {
    // dropout is a training-time knob, not part of the parameter layout
    let mut diff = config_diff(run, checkpoint);
    diff.retain(|f| f != "dropout");
    if diff.is_empty() {
        Ok(())
    } else {
        Err(TiltError::ConfigMismatch(diff))
    }
}
