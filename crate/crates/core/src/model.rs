//! The full network: backbone, grouping, prototype encoder and task predictor
//! over one shared [`ParamSet`].

use alloc::format;
use alloc::vec::Vec;

use crate::backbone::{self, AttentionMaps};
use crate::config::{LossWeights, ModelConfig};
use crate::encoder;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::heads::{self, Domain};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LdvaModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub features: Var,
    pub attention: AttentionMaps,
    /// `[N, M, C]`
    pub parts: Var,
    /// `[N, M, K]`
    pub codes: Var,
    /// `[N, M·K]`
    pub flat_codes: Var,
    /// `[N, output_dim]`
    pub output: Var,
}

/// Supervision for the task term of a step-B batch.
#[derive(Debug, Clone, Copy)]
pub enum TaskTargets<'a> {
    /// `rows[n]` indexes the true class in `semantics` (`[Y_s, S]`).
    Gzsl { rows: &'a [usize], semantics: &'a Tensor, eta: f64 },
    Fsl { labels: &'a [usize] },
    Da { domains: &'a [Domain], labels: &'a [Option<usize>] },
}

/// Batch-mean values of the objective's terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub part: f64,
    pub prob: f64,
    pub task: f64,
    pub total: f64,
}

/// Scalar nodes of the objective, each already divided by the batch size.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub part: Var,
    pub prob: Var,
    pub task: Var,
    pub total: Var,
}

impl LossNodes {
    pub fn values(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            part: g.scalar(self.part),
            prob: g.scalar(self.prob),
            task: g.scalar(self.task),
            total: g.scalar(self.total),
        }
    }
}

impl LdvaModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        backbone::init_params(&mut params, &config.backbone, seed)?;
        let c = config.channels();
        encoder::init_params(&mut params, config.backbone.parts, config.prototypes, c, seed)?;
        heads::init_params(&mut params, config.code_len(), config.hidden, config.output_dim, seed)?;
        Ok(Self { config, params })
    }

    /// Wraps existing parameters, checking that every expected tensor is present
    /// with the right shape.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        for p in reference.params.iter() {
            let have = params.get(&p.name)?;
            if have.tensor.shape() != p.tensor.shape() || have.group != p.group {
                return Err(Error::Invalid(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    have.tensor.shape(),
                    p.tensor.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Invalid("parameter set has unexpected entries".into()));
        }
        Ok(Self { config, params })
    }

    pub fn forward(&self, g: &mut Graph, images: Var) -> Result<Forward> {
        self.forward_with(g, &self.params, images)
    }

    /// Forward pass over explicit parameters (used by gradient checks).
    pub fn forward_with(&self, g: &mut Graph, params: &ParamSet, images: Var) -> Result<Forward> {
        let cfg = &self.config;
        let features = backbone::extract_global_features(g, params, &cfg.backbone, images)?;
        let grouping = backbone::channel_grouping(g, params, cfg.backbone.parts, features)?;
        let attention = backbone::attention_map(g, grouping, features)?;
        let parts = backbone::part_features(g, &attention, features)?;
        let codes = encoder::encode(g, params, parts)?;
        let n = g.shape(images)[0];
        let flat_codes = g.reshape(codes, &[n, cfg.code_len()])?;
        let output = heads::predict(g, params, flat_codes)?;
        Ok(Forward { features, attention, parts, codes, flat_codes, output })
    }

    /// Batch-mean `ℓ_part` only; the graph stops at the attention maps.
    pub fn part_loss(&self, g: &mut Graph, params: &ParamSet, images: Var) -> Result<Var> {
        let cfg = &self.config.backbone;
        let n = batch_size(g, images)?;
        let e = backbone::extract_global_features(g, params, cfg, images)?;
        let grouping = backbone::channel_grouping(g, params, cfg.parts, e)?;
        let attn = backbone::attention_map(g, grouping, e)?;
        let l = backbone::loss_part(g, &attn, cfg.zeta, cfg.lambda_div)?;
        g.scale(l, 1.0 / n as f64)
    }

    /// Batch means of `ℓ_part`, `ℓ_prob`, `ℓ_task` and their weighted sum.
    pub fn objective(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        images: Var,
        targets: TaskTargets<'_>,
        weights: LossWeights,
    ) -> Result<(Forward, LossNodes)> {
        let n = batch_size(g, images)?;
        let fw = self.forward_with(g, params, images)?;
        let cfg = &self.config;
        let part = backbone::loss_part(g, &fw.attention, cfg.backbone.zeta, cfg.backbone.lambda_div)?;
        let prob = encoder::loss_prob(g, params, fw.parts, cfg.lambda_reg)?;
        let task = match targets {
            TaskTargets::Gzsl { rows, semantics, eta } => heads::loss_gzsl(g, fw.output, rows, semantics, eta)?,
            TaskTargets::Fsl { labels } => heads::loss_fsl(g, fw.output, labels)?,
            TaskTargets::Da { domains, labels } => heads::loss_da(g, fw.output, domains, labels)?,
        };
        let inv = 1.0 / n as f64;
        let part = g.scale(part, inv)?;
        let prob = g.scale(prob, inv)?;
        let task = g.scale(task, inv)?;
        let wp = g.scale(part, weights.part)?;
        let wr = g.scale(prob, weights.prob)?;
        let wt = g.scale(task, weights.task)?;
        let sum = g.add(wp, wr)?;
        let total = g.add(sum, wt)?;
        Ok((fw, LossNodes { part, prob, task, total }))
    }

    fn frozen_forward(&self, images: &Tensor) -> Result<(Graph, Forward)> {
        let mut g = Graph::frozen();
        let x = g.constant(images.clone())?;
        let fw = self.forward(&mut g, x)?;
        Ok((g, fw))
    }

    /// `[N, M·K]` codes with no parameter touched.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let (g, fw) = self.frozen_forward(images)?;
        Ok(g.value(fw.flat_codes).clone())
    }

    /// `[N, output_dim]` predictor outputs.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let (g, fw) = self.frozen_forward(images)?;
        Ok(g.value(fw.output).clone())
    }

    /// `[N, M, W, H]` attention maps.
    pub fn attention(&self, images: &Tensor) -> Result<Tensor> {
        let (g, fw) = self.frozen_forward(images)?;
        let a = &fw.attention;
        g.value(a.maps).clone().reshaped(&[a.batch, a.parts, a.width, a.height])
    }
}

fn batch_size(g: &Graph, images: Var) -> Result<usize> {
    match g.shape(images).first() {
        Some(&n) if n > 0 => Ok(n),
        _ => Err(Error::Invalid("empty batch".into())),
    }
}

/// Row-wise helper: splits an `[N, D]` tensor into its rows.
pub fn rows(t: &Tensor) -> Vec<&[f64]> {
    let d = t.shape().last().copied().unwrap_or(1);
    t.data().chunks(d).collect()
}
