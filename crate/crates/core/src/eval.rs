//! Test-time protocols. The model is only read, never updated.

use alloc::format;
use alloc::vec::Vec;

use crate::data::{sample_episode, LabeledImageSet};
use crate::error::{Error, Result};
use crate::heads::{self, GzslSplit, SemanticSet};
use crate::model::LdvaModel;
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

/// Samples per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 256;

/// Number of grid points of the calibrated-stacking sweep.
pub const CS_STEPS: usize = 51;

fn chunked(set: &LabeledImageSet, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for c in idx.chunks(EVAL_CHUNK) {
        let t = f(&set.batch(c)?)?;
        let d = t.shape()[1];
        out.extend(t.data().chunks(d).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Flattened code `π(x)` of every sample.
pub fn encode_all(model: &LdvaModel, set: &LabeledImageSet) -> Result<Vec<Vec<f64>>> {
    chunked(set, |x| model.encode(x))
}

/// Predictor output `V(π(x))` of every sample.
pub fn predict_all(model: &LdvaModel, set: &LabeledImageSet) -> Result<Vec<Vec<f64>>> {
    chunked(set, |x| model.predict(x))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FslResult {
    pub mean_acc: f64,
    /// Standard error of the mean over episodes; 0 for a single episode.
    pub stderr: f64,
    pub episodes: usize,
}

/// `ways`-way `shots`-shot episodes scored by nearest class-mean code.
pub fn evaluate_fsl(
    model: &LdvaModel,
    set: &LabeledImageSet,
    ways: usize,
    shots: usize,
    queries: usize,
    episodes: usize,
    seed: u64,
) -> Result<FslResult> {
    if episodes == 0 || shots == 0 || queries == 0 {
        return Err(Error::Invalid("episodes, shots and queries must be >= 1".into()));
    }
    for (c, idx) in set.class_indices().iter().enumerate() {
        if !idx.is_empty() && idx.len() < shots + queries {
            return Err(Error::Data(format!(
                "class {c} has {} images, fewer than shots + queries = {}",
                idx.len(),
                shots + queries
            )));
        }
    }
    let codes = encode_all(model, set)?;
    let accs = (0..episodes)
        .map(|e| {
            let mut r = rng::stream(seed, Purpose::Episode, e as u64, 0);
            let ep = sample_episode(set, ways, shots, queries, &mut r)?;
            let support: Vec<(&[f64], usize)> =
                ep.support.iter().map(|&i| (codes[i].as_slice(), set.labels[i])).collect();
            let protos = heads::fsl_prototypes(&support, &ep.classes)?;
            let hits = ep.query.iter().filter(|&&i| heads::fsl_classify(&codes[i], &protos) == set.labels[i]).count();
            Ok(hits as f64 / ep.query.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let stderr = if accs.len() < 2 {
        0.0
    } else {
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
        libm::sqrt(var / n)
    };
    Ok(FslResult { mean_acc: mean, stderr, episodes })
}

/// Class-averaged top-1, in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct GzslMetrics {
    /// Unseen classes.
    pub ts: f64,
    /// Seen classes.
    pub tr: f64,
    pub h: f64,
    /// Split classes with no test sample, left out of the averages.
    pub excluded: Vec<usize>,
}

/// Per-class accuracy averaged within the seen and unseen groups.
pub fn gzsl_metrics(truth: &[usize], pred: &[usize], split: &GzslSplit) -> Result<GzslMetrics> {
    if truth.len() != pred.len() {
        return Err(Error::Invalid("prediction and label counts differ".into()));
    }
    let mut excluded = Vec::new();
    let mut group_mean = |classes: &[usize], name: &str| -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for &c in classes {
            let total = truth.iter().filter(|&&t| t == c).count();
            if total == 0 {
                excluded.push(c);
                continue;
            }
            let hits = truth.iter().zip(pred).filter(|(&t, &p)| t == c && p == c).count();
            sum += hits as f64 / total as f64;
            count += 1;
        }
        if count == 0 {
            return Err(Error::Data(format!("no test samples from any {name} class")));
        }
        Ok(100.0 * sum / count as f64)
    };
    let ts = group_mean(&split.unseen, "unseen")?;
    let tr = group_mean(&split.seen, "seen")?;
    excluded.sort_unstable();
    let h = heads::harmonic_mean(ts, tr).unwrap_or(0.0);
    Ok(GzslMetrics { ts, tr, h, excluded })
}

/// Compatibility scores `σ_yᵀV(π(x))` of every sample against every class in
/// `semantics` (label order). Semantics are L2-normalized first.
pub fn gzsl_scores(model: &LdvaModel, set: &LabeledImageSet, semantics: &SemanticSet) -> Result<Vec<Vec<f64>>> {
    let sem = semantics.normalized();
    if sem.dim() != model.config.output_dim {
        return Err(Error::Config(format!(
            "semantic dimension {} does not match predictor output {}",
            sem.dim(),
            model.config.output_dim
        )));
    }
    Ok(predict_all(model, set)?.iter().map(|v| sem.scores(v)).collect())
}

fn classify_all(scores: &[Vec<f64>], labels: &[usize], split: &GzslSplit, c_cs: f64) -> Vec<usize> {
    scores.iter().map(|s| heads::gzsl_classify(s, labels, split, c_cs)).collect()
}

pub fn evaluate_gzsl(
    model: &LdvaModel,
    test: &LabeledImageSet,
    semantics: &SemanticSet,
    split: &GzslSplit,
    c_cs: f64,
) -> Result<GzslMetrics> {
    let scores = gzsl_scores(model, test, semantics)?;
    let pred = classify_all(&scores, semantics.labels(), split, c_cs);
    gzsl_metrics(&test.labels, &pred, split)
}

/// Grid search of `c_cs` over `CS_STEPS` points spanning `[0, max score]`,
/// maximizing H. Ties keep the smallest constant, so the result's H is never
/// below the uncalibrated H on the same scores.
pub fn sweep_c_cs(scores: &[Vec<f64>], truth: &[usize], labels: &[usize], split: &GzslSplit) -> Result<(f64, f64)> {
    let top = scores.iter().flatten().copied().fold(0.0, f64::max);
    let mut best = (0.0, f64::NEG_INFINITY);
    for i in 0..CS_STEPS {
        let c = top * i as f64 / (CS_STEPS - 1) as f64;
        let h = gzsl_metrics(truth, &classify_all(scores, labels, split, c), split)?.h;
        if h > best.1 {
            best = (c, h);
        }
        if top == 0.0 {
            break;
        }
    }
    Ok(best)
}

/// Calibrated-stacking constant chosen on `validation`.
pub fn calibrate_c_cs(model: &LdvaModel, validation: &LabeledImageSet, semantics: &SemanticSet, split: &GzslSplit) -> Result<f64> {
    let scores = gzsl_scores(model, validation, semantics)?;
    Ok(sweep_c_cs(&scores, &validation.labels, semantics.labels(), split)?.0)
}

/// Fraction of samples whose predictor argmax matches the label.
pub fn evaluate_da(model: &LdvaModel, target: &LabeledImageSet) -> Result<f64> {
    let pred: Vec<usize> = predict_all(model, target)?.iter().map(|v| heads::pseudo_label(v)).collect();
    Ok(accuracy(&pred, &target.labels))
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Sample-averaged pairwise overlap of the model's attention maps on `set`.
pub fn attention_overlap(model: &LdvaModel, set: &LabeledImageSet) -> Result<f64> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut total = 0.0;
    for c in idx.chunks(EVAL_CHUNK) {
        let maps = model.attention(&set.batch(c)?)?;
        total += crate::backbone::mean_pairwise_overlap(&maps) * c.len() as f64;
    }
    Ok(total / set.len().max(1) as f64)
}
