//! Multi-crop self-distillation with masked-token and prototype supervision.

mod augment;
mod schedule;
mod trainer;

pub use augment::{block_mask, gaussian_blur, multi_crop, ColorJitter, CropConfig, MaskConfig};
pub use schedule::{cosine_schedule, linear_warmup, warmup_cosine_lr};
pub use trainer::{
    load_pretrained, train, train_step, PretrainOutput, StepEvent, StudentModel, TeacherModel, TrainOptions,
    TrainRecord,
};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backbone::ViTConfig;
use crate::error::{ensure, Result};
use crate::heads_losses::{HeadConfig, LossWeights};
use crate::prototypes::{HashedNgramEmbedder, PrototypeInit, TableEmbedder, TextEmbedder, DEFAULT_MERGE_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Peak lr is `base_lr · batch_size / lr_reference_batch`.
    pub lr_reference_batch: usize,
    pub min_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub momentum_schedule: (f64, f64),
    /// `(start, end, warmup_epochs)`
    pub teacher_temp_schedule: (f64, f64, usize),
    pub clip_grad: f64,
    pub sinkhorn_iters: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            base_lr: 2e-3,
            lr_reference_batch: 2048,
            min_lr: 1e-6,
            warmup_fraction: 0.1,
            weight_decay: 0.04,
            optimizer: OptimizerKind::Adamw,
            momentum_schedule: (0.992, 1.0),
            teacher_temp_schedule: (0.04, 0.07, 30),
            clip_grad: 3.0,
            sinkhorn_iters: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, Config, "epochs must be ≥ 1");
        ensure!(self.batch_size >= 1, Config, "batch_size must be ≥ 1");
        ensure!(self.lr_reference_batch >= 1, Config, "lr_reference_batch must be ≥ 1");
        ensure!(self.base_lr > 0.0, Config, "base_lr must be > 0");
        ensure!((0.0..1.0).contains(&self.warmup_fraction), Config, "warmup_fraction must lie in [0, 1)");
        let (m0, m1) = self.momentum_schedule;
        ensure!(
            (0.0..=1.0).contains(&m0) && (0.0..=1.0).contains(&m1),
            Config,
            "momentum schedule must lie in [0, 1]"
        );
        ensure!(
            self.teacher_temp_schedule.0 > 0.0 && self.teacher_temp_schedule.1 > 0.0,
            Config,
            "teacher temperatures must be > 0"
        );
        ensure!(self.sinkhorn_iters >= 1, Config, "sinkhorn_iters must be ≥ 1");
        Ok(())
    }

    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / self.lr_reference_batch as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypeConfig {
    pub merge_threshold: f64,
    pub init: PrototypeInit,
    pub embedder_seed: u64,
    /// Optional `label<TAB>v1,…` table replacing the hashed embedder.
    pub embedding_table: Option<PathBuf>,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        PrototypeConfig {
            merge_threshold: DEFAULT_MERGE_THRESHOLD,
            init: PrototypeInit::Text,
            embedder_seed: 0,
            embedding_table: None,
        }
    }
}

impl PrototypeConfig {
    pub fn embedder(&self, dim: usize) -> Result<Box<dyn TextEmbedder>> {
        match &self.embedding_table {
            None => Ok(Box::new(HashedNgramEmbedder::new(dim, self.embedder_seed))),
            Some(p) => {
                let t = TableEmbedder::load(p)?;
                ensure!(
                    t.dim() == dim,
                    Config,
                    "embedding table dim {} does not match backbone dim {dim}",
                    t.dim()
                );
                Ok(Box::new(t))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: ViTConfig,
    pub head: HeadConfig,
    pub crops: CropConfig,
    pub masks: MaskConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub prototypes: PrototypeConfig,
    /// Backbone exported for downstream evaluation.
    pub eval_backbone: EvalBackbone,
}

/// Which network of the final checkpoint feeds downstream evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalBackbone {
    Student,
    Teacher,
}

impl EvalBackbone {
    pub fn prefix(self) -> &'static str {
        match self {
            EvalBackbone::Student => "student.backbone",
            EvalBackbone::Teacher => "teacher.backbone",
        }
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            model: ViTConfig::tiny(),
            head: HeadConfig::default(),
            crops: CropConfig::default(),
            masks: MaskConfig::default(),
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            prototypes: PrototypeConfig::default(),
            eval_backbone: EvalBackbone::Student,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.head.validate()?;
        self.crops.validate()?;
        self.masks.validate()?;
        self.train.validate()?;
        self.weights.validate()?;
        ensure!(
            self.crops.global_size == self.model.image_size,
            Config,
            "global_size {} must equal model image_size {}",
            self.crops.global_size,
            self.model.image_size
        );
        ensure!(
            self.crops.local_size.is_multiple_of(self.model.patch_size),
            Config,
            "local_size {} must be a multiple of patch_size {}",
            self.crops.local_size,
            self.model.patch_size
        );
        Ok(())
    }
}

/// The four rows of the loss ablation, named by the losses they keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationRow {
    Image,
    ImagePatch,
    ImagePatchReg,
    ImagePatchRegKg,
}

impl AblationRow {
    pub const ALL: [AblationRow; 4] = [
        AblationRow::Image,
        AblationRow::ImagePatch,
        AblationRow::ImagePatchRegKg,
        AblationRow::ImagePatchReg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::Image => "Image",
            AblationRow::ImagePatch => "Image+Patch",
            AblationRow::ImagePatchReg => "Image+Patch+Reg",
            AblationRow::ImagePatchRegKg => "Image+Patch+Reg+KG",
        }
    }

    pub fn weights(self, base: &LossWeights) -> LossWeights {
        let (patch, koleo, sup) = match self {
            AblationRow::Image => (false, false, false),
            AblationRow::ImagePatch => (true, false, false),
            AblationRow::ImagePatchReg => (true, true, false),
            AblationRow::ImagePatchRegKg => (true, true, true),
        };
        LossWeights {
            w_image: base.w_image,
            w_patch: if patch { base.w_patch } else { 0.0 },
            w_koleo: if koleo { base.w_koleo } else { 0.0 },
            w_sup: if sup { base.w_sup } else { 0.0 },
        }
    }
}

/// `base` with the loss weights of `row`.
pub fn ablation_config(base: &PretrainConfig, row: AblationRow) -> PretrainConfig {
    PretrainConfig {
        weights: row.weights(&base.weights),
        ..base.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_rows_toggle_weights() {
        let base = PretrainConfig::default();
        let reg = ablation_config(&base, AblationRow::ImagePatchReg);
        assert_eq!(reg.weights.w_sup, 0.0);
        assert_eq!(reg.weights.w_koleo, base.weights.w_koleo);
        let full = ablation_config(&base, AblationRow::ImagePatchRegKg);
        assert_eq!(full.weights, base.weights);
        let img = ablation_config(&base, AblationRow::Image);
        assert_eq!((img.weights.w_patch, img.weights.w_koleo, img.weights.w_sup), (0.0, 0.0, 0.0));
    }

    #[test]
    fn default_validates() {
        PretrainConfig::default().validate().unwrap();
    }
}
