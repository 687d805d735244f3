//! Model and training configuration.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// One `conv → ReLU → pool` stage of the feature extractor.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct StageConfig {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Max-pool window and stride; 1 disables pooling.
    pub pool: usize,
}

impl StageConfig {
    pub const fn new(channels: usize, kernel: usize, stride: usize, pool: usize) -> Self {
        Self { channels, kernel, stride, pool }
    }

    /// Spatial extent after this stage for an input of side `side`.
    pub fn output_side(&self, side: usize) -> Option<usize> {
        let pad = self.kernel / 2;
        if self.stride == 0 || self.pool == 0 || side + 2 * pad < self.kernel {
            return None;
        }
        let conv = (side + 2 * pad - self.kernel) / self.stride + 1;
        if conv < self.pool {
            return None;
        }
        Some((conv - self.pool) / self.pool + 1)
    }
}

/// Three stages taking a 28×28 input to a 7×7×32 feature map.
pub fn default_stages() -> Vec<StageConfig> {
    vec![StageConfig::new(8, 3, 1, 2), StageConfig::new(16, 3, 1, 2), StageConfig::new(32, 3, 1, 1)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub input_side: usize,
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
    /// Number of attended parts `M`.
    pub parts: usize,
    /// Divergence margin.
    pub zeta: f64,
    /// Weight of the divergence term in the part loss.
    pub lambda_div: f64,
}

impl BackboneConfig {
    /// `(W, H, C)` of the global feature map.
    pub fn feature_dims(&self) -> Result<(usize, usize, usize)> {
        let mut side = self.input_side;
        for (i, s) in self.stages.iter().enumerate() {
            side = s
                .output_side(side)
                .ok_or_else(|| Error::Config(format!("stage {i} does not fit a {side}x{side} input")))?;
        }
        let channels = self.stages.last().map_or(self.in_channels, |s| s.channels);
        Ok((side, side, channels))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.parts == 0 {
            return Err(Error::Config("parts must be >= 1".into()));
        }
        if !(self.zeta >= 0.0) || !(self.lambda_div >= 0.0) {
            return Err(Error::Config("zeta and lambda_div must be >= 0".into()));
        }
        let (w, h, c) = self.feature_dims()?;
        if w < 2 || h < 2 {
            return Err(Error::Config(format!("feature map {w}x{h} is smaller than 2x2")));
        }
        if c < self.parts {
            return Err(Error::Config(format!("{c} feature channels < {} parts", self.parts)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Prototypes per part `K`.
    pub prototypes: usize,
    pub lambda_reg: f64,
    pub hidden: usize,
    /// Predictor output width: semantic dimension or number of classes.
    pub output_dim: usize,
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        self.backbone.stages.last().map_or(self.backbone.in_channels, |s| s.channels)
    }

    pub fn code_len(&self) -> usize {
        self.backbone.parts * self.prototypes
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let c = self.channels();
        if self.prototypes == 0 || self.prototypes >= c {
            return Err(Error::Config(format!(
                "prototypes K={} must satisfy 1 <= K < C={c}",
                self.prototypes
            )));
        }
        if self.hidden == 0 || self.output_dim == 0 {
            return Err(Error::Config("hidden and output widths must be >= 1".into()));
        }
        if !(self.lambda_reg >= 0.0) {
            return Err(Error::Config("lambda_reg must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Task {
    Gzsl,
    Fsl,
    Da,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Gzsl => "gzsl",
            Task::Fsl => "fsl",
            Task::Da => "da",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DaPhase {
    SourcePi,
    JointPi,
}

/// Multipliers on the three terms of the overall objective.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct LossWeights {
    pub part: f64,
    pub prob: f64,
    pub task: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { part: 1.0, prob: 1.0, task: 1.0 }
    }
}

/// Everything a training run needs except the data itself.
///
/// Optional fields fall back to per-task defaults: `lambda_div` is 5 for GZSL
/// and 2 otherwise; `lr_step_b` is 1e-6 in the joint-π phase and 1e-5 otherwise.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub lr_step_a: f64,
    pub lr_step_b: Option<f64>,
    pub batch_size: usize,
    pub lambda_div: Option<f64>,
    pub lambda_reg: f64,
    pub zeta: f64,
    pub eta: f64,
    pub parts: usize,
    pub prototypes: usize,
    pub hidden: usize,
    pub seed: u64,
    pub da_phase: Option<DaPhase>,
    pub input_side: usize,
    pub stages: Vec<StageConfig>,
    /// Alternate step-A and step-B per mini-batch instead of per full pass.
    pub interleave_per_batch: bool,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Fsl,
            epochs: 20,
            lr_step_a: 1e-6,
            lr_step_b: None,
            batch_size: 32,
            lambda_div: None,
            lambda_reg: 1e-3,
            zeta: 0.02,
            eta: 1.0,
            parts: 4,
            prototypes: 16,
            hidden: 32,
            seed: 0,
            da_phase: None,
            input_side: 28,
            stages: default_stages(),
            interleave_per_batch: false,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn for_task(task: Task) -> Self {
        let mut c = Self { task, ..Self::default() };
        if task == Task::Da {
            c.da_phase = Some(DaPhase::SourcePi);
        }
        c
    }

    pub fn lambda_div(&self) -> f64 {
        self.lambda_div.unwrap_or(match self.task {
            Task::Gzsl => 5.0,
            Task::Fsl | Task::Da => 2.0,
        })
    }

    pub fn lr_step_b(&self) -> f64 {
        self.lr_step_b.unwrap_or(if self.da_phase == Some(DaPhase::JointPi) { 1e-6 } else { 1e-5 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr_step_a > 0.0) || !(self.lr_step_b() > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::Config("eta must be >= 0".into()));
        }
        match (self.task, self.da_phase) {
            (Task::Da, None) => return Err(Error::Config("da task needs da_phase".into())),
            (Task::Gzsl | Task::Fsl, Some(_)) => {
                return Err(Error::Config("da_phase only applies to the da task".into()))
            }
            _ => {}
        }
        self.backbone().validate()
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            input_side: self.input_side,
            in_channels: 1,
            stages: self.stages.clone(),
            parts: self.parts,
            zeta: self.zeta,
            lambda_div: self.lambda_div(),
        }
    }

    pub fn model(&self, output_dim: usize) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone(),
            prototypes: self.prototypes,
            lambda_reg: self.lambda_reg,
            hidden: self.hidden,
            output_dim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_stages_give_seven_by_seven() {
        let c = TrainConfig::default().backbone();
        assert_eq!(c.feature_dims().unwrap(), (7, 7, 32));
    }

    #[test]
    fn task_defaults() {
        assert_eq!(TrainConfig::for_task(Task::Gzsl).lambda_div(), 5.0);
        assert_eq!(TrainConfig::for_task(Task::Fsl).lambda_div(), 2.0);
        let mut da = TrainConfig::for_task(Task::Da);
        assert_eq!(da.lr_step_b(), 1e-5);
        da.da_phase = Some(DaPhase::JointPi);
        assert_eq!(da.lr_step_b(), 1e-6);
    }

    #[test]
    fn rejects_fat_prototypes() {
        let m = TrainConfig { prototypes: 32, ..TrainConfig::default() }.model(10);
        assert!(m.validate().is_err());
        assert!(TrainConfig::default().model(10).validate().is_ok());
    }

    #[test]
    fn rejects_bad_rates_and_phase() {
        assert!(TrainConfig { lr_step_a: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { da_phase: None, ..TrainConfig::for_task(Task::Da) }.validate().is_err());
        assert!(TrainConfig::for_task(Task::Da).validate().is_ok());
    }
}
