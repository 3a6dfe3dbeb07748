//! Pipeline configuration, one JSON document with a section per module.

use std::path::{Path, PathBuf};

use fcan_core::aan::{AanConfig, Alpha, Init};
use fcan_core::backbone::{BackboneConfig, MIN_ABN_IMAGES};
use fcan_core::data::SceneSpec;
use fcan_core::eval::DEFAULT_SCALES;
use fcan_core::ran::{DiscriminatorConfig, ProbeConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Drives every stage; the per-section seeds are derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub backbone: BackboneConfig,
    pub aan: AanSection,
    pub ran: RanSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub scene: SceneSpec,
    pub source_train: usize,
    pub target_train: usize,
    pub target_val: usize,
    /// Unlabeled target images whose statistics replace the BN statistics.
    pub abn_images: usize,
}

/// Which domains are appearance-adapted before adversarial training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AanSetting {
    SrcTar,
    SrcTarAda,
    SrcAdaTar,
    SrcAdaTarAda,
    /// Late fusion of the four settings above.
    Fusion,
}

impl AanSetting {
    pub const SINGLES: [AanSetting; 4] = [
        AanSetting::SrcTar,
        AanSetting::SrcTarAda,
        AanSetting::SrcAdaTar,
        AanSetting::SrcAdaTarAda,
    ];
    pub const BEST_SINGLE: AanSetting = AanSetting::SrcAdaTar;

    pub fn label(self) -> &'static str {
        match self {
            AanSetting::SrcTar => "Src->Tar",
            AanSetting::SrcTarAda => "Src->Tar_Ada",
            AanSetting::SrcAdaTar => "Src_Ada->Tar",
            AanSetting::SrcAdaTarAda => "Src_Ada->Tar_Ada",
            AanSetting::Fusion => "Late Fusion",
        }
    }

    pub fn adapts_source(self) -> bool {
        matches!(self, AanSetting::SrcAdaTar | AanSetting::SrcAdaTarAda)
    }

    pub fn adapts_target(self) -> bool {
        matches!(self, AanSetting::SrcTarAda | AanSetting::SrcAdaTarAda)
    }

    /// Accepts the snake_case names plus `best-single`.
    pub fn parse(s: &str) -> Option<AanSetting> {
        match s {
            "best-single" | "best_single" => Some(AanSetting::BEST_SINGLE),
            _ => serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AanSection {
    pub render: AanConfig,
    pub setting: AanSetting,
    /// Images whose averaged Gram matrices define a domain style.
    pub style_images: usize,
    /// Rendered training crops per adapted domain.
    pub renders: usize,
    pub crop: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RanSection {
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
    pub discriminator: DiscriminatorConfig,
    pub probe: ProbeConfig,
    pub probe_discriminator: DiscriminatorConfig,
    /// Images per domain for the probe, split evenly into train and test.
    pub probe_images: usize,
    /// Labeled target counts for the semi-supervised sweep.
    pub labeled_target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub multiscale: bool,
    pub scales: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            data: DataSection::default(),
            backbone: BackboneConfig::default(),
            aan: AanSection::default(),
            ran: RanSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            scene: SceneSpec::default(),
            source_train: 200,
            target_train: 200,
            target_val: 100,
            abn_images: 64,
        }
    }
}

impl Default for AanSection {
    fn default() -> Self {
        AanSection {
            render: AanConfig {
                alpha: Alpha::Auto { ratio: 100.0 },
                beta: 100.0,
                iterations: 100,
                init: Init::Source,
                ..AanConfig::default()
            },
            setting: AanSetting::BEST_SINGLE,
            style_images: 16,
            renders: 64,
            crop: 64,
        }
    }
}

impl Default for RanSection {
    fn default() -> Self {
        RanSection {
            pretrain: TrainConfig {
                base_lr: 0.02,
                batch_size: 8,
                iterations: 600,
                crop: Some(64),
                flip: true,
                ..TrainConfig::pretrain()
            },
            adapt: TrainConfig {
                base_lr: 0.005,
                disc_lr: Some(0.05),
                lambda_target: 5.0,
                iterations: 300,
                crop: Some(64),
                flip: true,
                ..TrainConfig::adversarial()
            },
            discriminator: DiscriminatorConfig {
                branch_channels: 64,
                ..DiscriminatorConfig::default()
            },
            probe: ProbeConfig {
                iterations: 100,
                ..ProbeConfig::default()
            },
            probe_discriminator: DiscriminatorConfig {
                branch_channels: 32,
                ..DiscriminatorConfig::default()
            },
            probe_images: 24,
            labeled_target: vec![0, 8, 32, 128],
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            multiscale: false,
            scales: DEFAULT_SCALES.to_vec(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| AppError::config(e.to_string()))?;
        Ok(cfg.resolve())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| AppError::config(format!("{}: {e}", path.display())))
    }

    /// Copies the global seed into every section and checks the result.
    pub fn resolve(mut self) -> Self {
        let s = self.seed;
        self.data.scene.seed = s;
        self.backbone.init_seed = s;
        self.aan.render.seed = s;
        self.ran.pretrain.seed = s;
        self.ran.adapt.seed = s;
        self.ran.discriminator.init_seed = s;
        self.ran.probe.seed = s;
        self.ran.probe_discriminator.init_seed = s.wrapping_add(99);
        self
    }

    pub fn with_seed(self, seed: u64) -> Self {
        PipelineConfig { seed, ..self }.resolve()
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.scene.num_classes != self.backbone.num_classes {
            return Err(AppError::config(format!(
                "data.scene.num_classes = {} but backbone.num_classes = {}",
                d.scene.num_classes, self.backbone.num_classes
            )));
        }
        if d.source_train == 0 || d.target_train == 0 || d.target_val == 0 {
            return Err(AppError::config("data set sizes must be positive"));
        }
        if d.abn_images < MIN_ABN_IMAGES || d.abn_images > d.target_train {
            return Err(AppError::config(format!(
                "data.abn_images must be in {MIN_ABN_IMAGES}..=data.target_train"
            )));
        }
        let backbone_out = *self.backbone.channels.last().unwrap_or(&0);
        for (name, disc) in [
            ("discriminator", &self.ran.discriminator),
            ("probe_discriminator", &self.ran.probe_discriminator),
        ] {
            if disc.in_channels != backbone_out {
                return Err(AppError::config(format!(
                    "ran.{name}.in_channels = {} but the backbone emits {backbone_out}",
                    disc.in_channels
                )));
            }
        }
        if self.ran.labeled_target.iter().any(|&n| n > d.target_train) {
            return Err(AppError::config("ran.labeled_target exceeds data.target_train"));
        }
        if self.ran.probe_images < MIN_ABN_IMAGES {
            return Err(AppError::config(format!(
                "ran.probe_images must be at least {MIN_ABN_IMAGES}"
            )));
        }
        let a = &self.aan;
        if a.crop > d.scene.height.min(d.scene.width) {
            return Err(AppError::config("aan.crop exceeds the scene size"));
        }
        // Rendered target crops also feed the BN statistics of adapted models.
        if a.renders < MIN_ABN_IMAGES {
            return Err(AppError::config(format!(
                "aan.renders must be at least {MIN_ABN_IMAGES}"
            )));
        }
        if a.style_images == 0 || a.style_images > d.target_train.min(d.source_train) {
            return Err(AppError::config(
                "aan.style_images must be in 1..=min(source_train, target_train)",
            ));
        }
        if self.eval.scales.is_empty() || self.eval.scales.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(AppError::config("eval.scales must be nonempty and positive"));
        }
        self.backbone.validate()?;
        a.render.validate()?;
        self.ran.pretrain.validate()?;
        self.ran.adapt.validate()?;
        Ok(())
    }

    /// Writes the resolved config into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        crate::write_json(&dir.join(RESOLVED_CONFIG), self)
    }
}
