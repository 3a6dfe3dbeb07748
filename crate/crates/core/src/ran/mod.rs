//! Representation-level adaptation: an atrous-pyramid domain discriminator
//! trained adversarially against the backbone.

mod discriminator;
mod optim;
mod train;

use alloc::vec;

use serde::{Deserialize, Serialize};

pub use discriminator::{
    adversarial_loss, adversarial_loss_on, discriminate, AdversarialLoss, BoundDiscriminator, Discriminator,
    DiscriminatorConfig, DomainScoreMap, Granularity, SCORE_EPS,
};
pub use optim::{poly_lr, Sgd};
pub use train::{
    d_step, f_objective_on, last_stage_features, pretrain_segmenter, probe_domain_accuracy, seg_loss_on, train_ran,
    AdversarialTrainer, Batch, BatchSampler, DomainCritic, FObjective, LossRow, ObjectiveWeights, Phase, ProbeConfig,
    StepBatches, StepLosses, TrainConfig,
};

/// Rungs of the ablation ladder, each adding one component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Source-only segmenter.
    Fcn,
    /// Plus target BN statistics.
    Abn,
    /// Plus an image-level adversarial discriminator.
    Ada,
    /// Region-level discriminator with a single rate-1 branch.
    Conv,
    /// Region-level discriminator with the full atrous pyramid.
    Aspp,
    /// Plus appearance-adapted source images.
    Fcan,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Fcn,
        Preset::Abn,
        Preset::Ada,
        Preset::Conv,
        Preset::Aspp,
        Preset::Fcan,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Preset::Fcn => "FCN",
            Preset::Abn => "+ABN",
            Preset::Ada => "+ADA",
            Preset::Conv => "+Conv",
            Preset::Aspp => "+ASPP",
            Preset::Fcan => "FCAN",
        }
    }

    /// Published GTA5 → Cityscapes mIoU (%) for this rung.
    pub fn reference_miou(self) -> f64 {
        match self {
            Preset::Fcn => 29.15,
            Preset::Abn => 35.51,
            Preset::Ada => 41.29,
            Preset::Conv => 43.17,
            Preset::Aspp => 44.81,
            Preset::Fcan => 46.60,
        }
    }

    pub fn uses_abn(self) -> bool {
        self != Preset::Fcn
    }

    pub fn uses_aan(self) -> bool {
        self == Preset::Fcan
    }

    /// Discriminator for the rung, if it trains adversarially.
    pub fn discriminator(self, base: &DiscriminatorConfig) -> Option<DiscriminatorConfig> {
        let (granularity, rates) = match self {
            Preset::Fcn | Preset::Abn => return None,
            Preset::Ada => (Granularity::Image, vec![1]),
            Preset::Conv => (Granularity::Region, vec![1]),
            Preset::Aspp | Preset::Fcan => (Granularity::Region, base.rates.clone()),
        };
        Some(DiscriminatorConfig {
            granularity,
            rates,
            ..base.clone()
        })
    }
}

impl core::fmt::Display for Preset {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.label())
    }
}
