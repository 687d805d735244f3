//! Finite-difference check of every training loss on small random instances.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::backbone;
use crate::config::{BackboneConfig, LossWeights, ModelConfig, StageConfig};
use crate::encoder;
use crate::error::Result;
use crate::gradcheck::{grad_check_scaled, GradReport};
use crate::graph::{Graph, Var};
use crate::heads::{self, Domain};
use crate::model::{LdvaModel, TaskTargets};
use crate::params::{Group, ParamSet};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

pub const SUITE_TOL: f64 = 1e-4;
pub const SUITE_STEP: f64 = 1e-5;

pub const LOSSES: [&str; 8] = ["dis", "div", "part", "prob", "gzsl", "fsl", "da", "total"];

const BATCH: usize = 3;
const CLASSES: usize = 4;
const SEMANTIC_DIM: usize = 3;

/// M=2 parts, K=3 prototypes, C=5 channels, 4×4 maps from 8×8 inputs.
pub fn toy_config(output_dim: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_side: 8,
            in_channels: 1,
            stages: vec![StageConfig::new(5, 3, 1, 2)],
            parts: 2,
            zeta: 0.02,
            lambda_div: 2.0,
        },
        prototypes: 3,
        lambda_reg: 1e-3,
        hidden: 4,
        output_dim,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossCheck {
    pub loss: &'static str,
    pub report: GradReport,
}

impl LossCheck {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }

    /// `loss/param` of the worst entry.
    pub fn worst_param(&self) -> String {
        match self.report.worst() {
            Some(p) => format!("{}/{}", self.loss, p.name),
            None => String::from(self.loss),
        }
    }
}

struct Instance {
    model: LdvaModel,
    images: Tensor,
    labels: Vec<usize>,
    semantics: Tensor,
    domains: Vec<Domain>,
    da_labels: Vec<Option<usize>>,
}

/// Distance every kink input must keep from its kink.
const KINK_MARGIN: f64 = 1e-4;

fn instance(seed: u64, output_dim: usize) -> Result<Instance> {
    for attempt in 0..1000u64 {
        let model = LdvaModel::new(toy_config(output_dim), seed ^ (attempt << 40))?;
        let mut r = rng::stream(seed, Purpose::Synth, 99 + attempt, output_dim as u64);
        let images: Vec<f64> = (0..BATCH * 64).map(|_| r.random::<f64>()).collect();
        let labels: Vec<usize> = (0..BATCH).map(|_| r.random_range(0..CLASSES)).collect();
        let sem: Vec<f64> = (0..CLASSES * SEMANTIC_DIM).map(|_| r.random::<f64>() - 0.5).collect();
        let domains = vec![Domain::Source, Domain::Target, Domain::Source];
        let da_labels = domains
            .iter()
            .zip(&labels)
            .map(|(d, &l)| (*d == Domain::Source).then_some(l))
            .collect();
        let inst = Instance {
            model,
            images: Tensor::new(&[BATCH, 1, 8, 8], images)?,
            labels,
            semantics: Tensor::new(&[CLASSES, SEMANTIC_DIM], sem)?,
            domains,
            da_labels,
        };
        if away_from_kinks(&inst)? {
            return Ok(inst);
        }
    }
    Err(crate::error::Error::Invalid("no kink-free instance found".into()))
}

/// Gap between the largest and second-largest entry.
fn top_gap(v: &[f64]) -> f64 {
    let mut a = f64::NEG_INFINITY;
    let mut b = f64::NEG_INFINITY;
    for &x in v {
        if x > a {
            b = a;
            a = x;
        } else if x > b {
            b = x;
        }
    }
    a - b
}

/// True when no ReLU, max-pool window, attention peak, hinge or pseudo-label
/// sits within [`KINK_MARGIN`] of a switch, so central differences stay on one
/// smooth piece.
fn away_from_kinks(inst: &Instance) -> Result<bool> {
    let cfg = &inst.model.config;
    let p = &inst.model.params;
    let mut g = Graph::frozen();
    let x = g.constant(inst.images.clone())?;
    let w = g.param(p, &crate::backbone::conv_weight_name(0))?;
    let b = g.param(p, &crate::backbone::conv_bias_name(0))?;
    let pre = g.conv2d(x, w, Some(b), 1, 1)?;
    let pre = g.value(pre).clone();
    if pre.data().iter().any(|v| v.abs() < KINK_MARGIN) {
        return Ok(false);
    }
    let side = pre.shape()[2];
    for plane in pre.data().chunks(side * side) {
        for r in (0..side).step_by(2) {
            for col in (0..side).step_by(2) {
                let win = [plane[r * side + col], plane[r * side + col + 1], plane[(r + 1) * side + col], plane[(r + 1) * side + col + 1]];
                if win.iter().any(|v| *v > 0.0) && top_gap(&win) < KINK_MARGIN {
                    return Ok(false);
                }
            }
        }
    }
    let maps = inst.model.attention(&inst.images)?;
    let area = maps.shape()[2] * maps.shape()[3];
    if maps.data().chunks(area).any(|m| top_gap(m) < KINK_MARGIN) {
        return Ok(false);
    }
    let codes = inst.model.encode(&inst.images)?;
    let w1 = p.tensor(heads::FC1_WEIGHT)?.data();
    let b1 = p.tensor(heads::FC1_BIAS)?.data();
    for code in codes.data().chunks(cfg.code_len()) {
        for (row, bias) in w1.chunks(code.len()).zip(b1) {
            let h: f64 = row.iter().zip(code).map(|(a, b)| a * b).sum::<f64>() + bias;
            if h.abs() < KINK_MARGIN {
                return Ok(false);
            }
        }
    }
    let out = inst.model.predict(&inst.images)?;
    let d = cfg.output_dim;
    for (row, &y) in out.data().chunks(d).zip(&inst.labels) {
        if top_gap(row) < KINK_MARGIN {
            return Ok(false);
        }
        if d == SEMANTIC_DIM {
            let s = inst.semantics.data();
            let scores: Vec<f64> = s.chunks(d).map(|sig| sig.iter().zip(row).map(|(a, b)| a * b).sum()).collect();
            if scores.iter().any(|sc| (1.0 + sc - scores[y]).abs() < KINK_MARGIN) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn scaled(g: &mut Graph, v: Var) -> Result<Var> {
    g.scale(v, 1.0 / BATCH as f64)
}

fn build(inst: &Instance, loss: &str, p: &ParamSet) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let x = g.constant(inst.images.clone())?;
    let m = &inst.model;
    let cfg = &m.config;
    let out = match loss {
        "dis" | "div" => {
            let fw = m.forward_with(&mut g, p, x)?;
            let l = if loss == "dis" {
                backbone::loss_dis(&mut g, &fw.attention)?
            } else {
                backbone::loss_div(&mut g, &fw.attention, cfg.backbone.zeta)?
            };
            let l = g.sum_all(l)?;
            scaled(&mut g, l)?
        }
        "part" => m.part_loss(&mut g, p, x)?,
        "prob" => {
            let fw = m.forward_with(&mut g, p, x)?;
            let l = encoder::loss_prob(&mut g, p, fw.parts, cfg.lambda_reg)?;
            scaled(&mut g, l)?
        }
        "gzsl" => {
            let fw = m.forward_with(&mut g, p, x)?;
            let l = heads::loss_gzsl(&mut g, fw.output, &inst.labels, &inst.semantics, 1.0)?;
            scaled(&mut g, l)?
        }
        "fsl" => {
            let fw = m.forward_with(&mut g, p, x)?;
            let l = heads::loss_fsl(&mut g, fw.output, &inst.labels)?;
            scaled(&mut g, l)?
        }
        "da" => {
            let fw = m.forward_with(&mut g, p, x)?;
            let l = heads::loss_da(&mut g, fw.output, &inst.domains, &inst.da_labels)?;
            scaled(&mut g, l)?
        }
        _ => {
            let t = TaskTargets::Gzsl { rows: &inst.labels, semantics: &inst.semantics, eta: 1.0 };
            m.objective(&mut g, p, x, t, LossWeights::default())?.1.total
        }
    };
    Ok((g, out))
}

/// Checks each loss in [`LOSSES`] against central differences. The loss named
/// by `corrupt` has its analytic gradient scaled by 1.1 first.
pub fn run_gradient_suite(seed: u64, corrupt: Option<&str>) -> Result<Vec<LossCheck>> {
    let mut out = Vec::with_capacity(LOSSES.len());
    for loss in LOSSES {
        let output_dim = match loss {
            "gzsl" | "total" => SEMANTIC_DIM,
            _ => CLASSES,
        };
        let inst = instance(seed, output_dim)?;
        let mut params = inst.model.params.clone();
        match loss {
            "dis" | "div" | "part" => params.set_trainable(&[Group::Backbone, Group::Grouping]),
            "prob" => params.set_trainable(&[Group::Backbone, Group::Grouping, Group::Encoder]),
            _ => params.set_trainable(&Group::ALL),
        }
        let scale = if corrupt == Some(loss) { 1.1 } else { 1.0 };
        let report = grad_check_scaled(|p| build(&inst, loss, p), &params, SUITE_STEP, SUITE_TOL, scale)?;
        out.push(LossCheck { loss, report });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_is_deterministic() {
        let a = run_gradient_suite(0, None).unwrap();
        for c in &a {
            assert!(c.passed(), "{} worst {:?}", c.loss, c.report.worst());
        }
        assert_eq!(a, run_gradient_suite(0, None).unwrap());
    }

    #[test]
    fn corruption_is_caught() {
        let a = run_gradient_suite(1, Some("prob")).unwrap();
        let failed: Vec<_> = a.iter().filter(|c| !c.passed()).map(|c| c.loss).collect();
        assert_eq!(failed, vec!["prob"]);
    }
}
