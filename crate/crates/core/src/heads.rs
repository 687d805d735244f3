//! Task predictors over the flattened part code, their losses, and the
//! classification rules used at test time.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Group, ParamSet};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

pub const FC1_WEIGHT: &str = "predictor.fc1.weight";
pub const FC1_BIAS: &str = "predictor.fc1.bias";
pub const FC2_WEIGHT: &str = "predictor.fc2.weight";
pub const FC2_BIAS: &str = "predictor.fc2.bias";

/// Inserts the two affine layers of `V` (He-normal weights, zero biases).
pub fn init_params(params: &mut ParamSet, input: usize, hidden: usize, output: usize, seed: u64) -> Result<()> {
    let mut rng = rng::stream(seed, Purpose::Init, 3, 0);
    let s1 = libm::sqrt(2.0 / input as f64);
    let s2 = libm::sqrt(1.0 / hidden as f64);
    let w1: Vec<f64> = (0..hidden * input).map(|_| rng::normal(&mut rng, s1)).collect();
    let w2: Vec<f64> = (0..output * hidden).map(|_| rng::normal(&mut rng, s2)).collect();
    params.insert(FC1_WEIGHT, Group::Predictor, Tensor::new(&[hidden, input], w1)?)?;
    params.insert(FC1_BIAS, Group::Predictor, Tensor::zeros(&[hidden]))?;
    params.insert(FC2_WEIGHT, Group::Predictor, Tensor::new(&[output, hidden], w2)?)?;
    params.insert(FC2_BIAS, Group::Predictor, Tensor::zeros(&[output]))?;
    Ok(())
}

/// `V(π) = W₂·relu(W₁π + b₁) + b₂` on `[N, M·K]` codes.
pub fn predict(g: &mut Graph, params: &ParamSet, codes: Var) -> Result<Var> {
    let w1 = g.param(params, FC1_WEIGHT)?;
    let b1 = g.param(params, FC1_BIAS)?;
    let w2 = g.param(params, FC2_WEIGHT)?;
    let b2 = g.param(params, FC2_BIAS)?;
    let cs = g.shape(codes);
    let ws = g.shape(w1);
    if cs.len() != 2 || cs[1] != ws[1] {
        return Err(Error::shape("predict", format!("code {cs:?} vs predictor input {}", ws[1])));
    }
    let h = g.affine(codes, w1, Some(b1))?;
    let h = g.relu(h)?;
    g.affine(h, w2, Some(b2))
}

/// Per-class semantic vectors, kept sorted by label.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticSet {
    labels: Vec<usize>,
    dim: usize,
    /// Row-major `[labels.len(), dim]`.
    vectors: Vec<f64>,
}

impl SemanticSet {
    pub fn new(mut entries: Vec<(usize, Vec<f64>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Invalid("semantic set is empty".into()));
        }
        entries.sort_by_key(|e| e.0);
        let dim = entries[0].1.len();
        if dim == 0 {
            return Err(Error::Invalid("semantic vectors are empty".into()));
        }
        let mut vectors = Vec::with_capacity(entries.len() * dim);
        let mut labels = Vec::with_capacity(entries.len());
        for (label, v) in entries {
            if labels.last() == Some(&label) {
                return Err(Error::Invalid(format!("duplicate semantic vector for class {label}")));
            }
            if v.len() != dim {
                return Err(Error::Invalid(format!("class {label} has {} attributes, expected {dim}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invalid(format!("class {label} has a non-finite attribute")));
            }
            labels.push(label);
            vectors.extend(v);
        }
        Ok(Self { labels, dim, vectors })
    }

    /// Copy with every vector scaled to unit L2 norm (zero vectors stay zero).
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        for row in out.vectors.chunks_mut(self.dim) {
            let norm = libm::sqrt(row.iter().map(|x| x * x).sum::<f64>());
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        out
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: usize) -> Option<usize> {
        self.labels.binary_search(&label).ok()
    }

    pub fn vector(&self, label: usize) -> Option<&[f64]> {
        self.index_of(label).map(|i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    /// Restriction to `labels`; every label must be present.
    pub fn subset(&self, labels: &[usize]) -> Result<Self> {
        let entries = labels
            .iter()
            .map(|&l| {
                self.vector(l)
                    .map(|v| (l, v.to_vec()))
                    .ok_or_else(|| Error::Invalid(format!("no semantic vector for class {l}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    /// `[len, dim]` matrix of the vectors in label order.
    pub fn matrix(&self) -> Tensor {
        Tensor::new(&[self.labels.len(), self.dim], self.vectors.clone()).expect("consistent by construction")
    }

    /// `σ_yᵀ v` for every class, in label order.
    pub fn scores(&self, v: &[f64]) -> Vec<f64> {
        self.vectors.chunks(self.dim).map(|s| s.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    }
}

/// Structured hinge `Σ_{y'≠y} [η + σ_{y'}ᵀV − σ_yᵀV]₊`, summed over the batch.
/// `rows[n]` indexes the true class's row of `semantics` (`[Y, S]`).
pub fn loss_gzsl(g: &mut Graph, out: Var, rows: &[usize], semantics: &Tensor, eta: f64) -> Result<Var> {
    let os = g.shape(out).to_vec();
    let ss = semantics.shape();
    if os.len() != 2 || ss.len() != 2 || os[1] != ss[1] || os[0] != rows.len() {
        return Err(Error::shape(
            "loss_gzsl",
            format!("output {os:?}, semantics {ss:?}, {} labels", rows.len()),
        ));
    }
    let (n, y) = (os[0], ss[0]);
    if let Some(&r) = rows.iter().find(|&&r| r >= y) {
        return Err(Error::Invalid(format!("label row {r} outside {y} seen classes")));
    }
    let mut onehot = vec![0.0; n * y];
    let mut others = vec![1.0; n * y];
    for (i, &r) in rows.iter().enumerate() {
        onehot[i * y + r] = 1.0;
        others[i * y + r] = 0.0;
    }
    let sem = g.constant(semantics.clone())?;
    let scores = g.affine(out, sem, None)?;
    let onehot = g.constant(Tensor::new(&[n, y], onehot)?)?;
    let picked = g.mul(scores, onehot)?;
    let truth = g.sum_last(picked)?;
    let neg_truth = g.scale(truth, -1.0)?;
    let gap = g.add_broadcast(scores, neg_truth)?;
    let margin = g.add_scalar(gap, eta)?;
    let hinge = g.hinge(margin)?;
    let others = g.constant(Tensor::new(&[n, y], others)?)?;
    let masked = g.mul(hinge, others)?;
    g.sum_all(masked)
}

/// [`loss_gzsl`] for one predictor output `v` and true label `y` in `seen`.
pub fn loss_gzsl_value(v: &[f64], y: usize, seen: &SemanticSet, eta: f64) -> Result<f64> {
    let row = seen.index_of(y).ok_or_else(|| Error::Invalid(format!("class {y} is not a seen class")))?;
    let mut g = Graph::frozen();
    let out = g.constant(Tensor::new(&[1, v.len()], v.to_vec())?)?;
    let l = loss_gzsl(&mut g, out, &[row], &seen.matrix(), eta)?;
    Ok(g.scalar(l))
}

/// Seen/unseen partition of the label space.
#[derive(Debug, Clone, PartialEq)]
pub struct GzslSplit {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

impl GzslSplit {
    pub fn new(mut seen: Vec<usize>, mut unseen: Vec<usize>) -> Result<Self> {
        seen.sort_unstable();
        unseen.sort_unstable();
        seen.dedup();
        unseen.dedup();
        if let Some(c) = seen.iter().find(|c| unseen.binary_search(c).is_ok()) {
            return Err(Error::Invalid(format!("class {c} is both seen and unseen")));
        }
        Ok(Self { seen, unseen })
    }

    pub fn is_seen(&self, label: usize) -> bool {
        self.seen.binary_search(&label).is_ok()
    }

    pub fn is_unseen(&self, label: usize) -> bool {
        self.unseen.binary_search(&label).is_ok()
    }
}

/// Calibrated-stacking decision: `argmax_y score_y − c·[y seen]`. `labels` must
/// be ascending (as in [`SemanticSet::labels`]); ties go to the lowest label.
pub fn gzsl_classify(scores: &[f64], labels: &[usize], split: &GzslSplit, c_cs: f64) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut pick = labels[0];
    for (&s, &l) in scores.iter().zip(labels) {
        let v = if split.is_seen(l) { s - c_cs } else { s };
        if v > best {
            best = v;
            pick = l;
        }
    }
    pick
}

/// Cross-entropy of `softmax(logits)` against `labels`, summed over the batch.
pub fn loss_fsl(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let ce = g.cross_entropy(logits, labels)?;
    g.sum_all(ce)
}

pub fn loss_fsl_value(logits: &[f64], y: usize) -> Result<f64> {
    let mut g = Graph::frozen();
    let out = g.constant(Tensor::new(&[1, logits.len()], logits.to_vec())?)?;
    let l = loss_fsl(&mut g, out, &[y])?;
    Ok(g.scalar(l))
}

/// Mean code of one class's support samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototype {
    pub label: usize,
    pub mean: Vec<f64>,
}

/// Per-class mean of flattened support codes, in the order of `targets`.
pub fn fsl_prototypes(support: &[(&[f64], usize)], targets: &[usize]) -> Result<Vec<ClassPrototype>> {
    let dim = support.first().map(|s| s.0.len()).unwrap_or(0);
    targets
        .iter()
        .map(|&label| {
            let mut mean = vec![0.0; dim];
            let mut count = 0usize;
            for (code, _) in support.iter().filter(|s| s.1 == label) {
                if code.len() != dim {
                    return Err(Error::shape("fsl_prototypes", format!("code length {} vs {dim}", code.len())));
                }
                mean.iter_mut().zip(code.iter()).for_each(|(m, c)| *m += c);
                count += 1;
            }
            if count == 0 {
                return Err(Error::Invalid(format!("class {label} has no support samples")));
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            Ok(ClassPrototype { label, mean })
        })
        .collect()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Label of the squared-Euclidean nearest prototype; ties go to the lowest label.
pub fn fsl_classify(code: &[f64], prototypes: &[ClassPrototype]) -> usize {
    let mut best = f64::INFINITY;
    let mut pick = usize::MAX;
    for p in prototypes {
        let d = squared_distance(code, &p.mean);
        if d < best || (d == best && p.label < pick) {
            best = d;
            pick = p.label;
        }
    }
    pick
}

/// First index of the maximum entry.
pub fn pseudo_label(out: &[f64]) -> usize {
    let mut pick = 0;
    for (i, v) in out.iter().enumerate() {
        if *v > out[pick] {
            pick = i;
        }
    }
    pick
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Domain {
    Source,
    Target,
}

/// Source samples use their label; target samples use the argmax of the
/// current `logits`, held constant. Summed over the batch.
pub fn loss_da(g: &mut Graph, logits: Var, domains: &[Domain], labels: &[Option<usize>]) -> Result<Var> {
    let s = g.shape(logits);
    if s.len() != 2 || s[0] != domains.len() || domains.len() != labels.len() {
        return Err(Error::shape(
            "loss_da",
            format!("logits {s:?}, {} domains, {} labels", domains.len(), labels.len()),
        ));
    }
    let c = s[1];
    let values = g.value(logits).data();
    let targets = domains
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (d, l))| match (d, l) {
            (Domain::Source, Some(y)) => Ok(*y),
            (Domain::Source, None) => Err(Error::Invalid(format!("source sample {i} has no label"))),
            (Domain::Target, _) => Ok(pseudo_label(&values[i * c..(i + 1) * c])),
        })
        .collect::<Result<Vec<_>>>()?;
    loss_fsl(g, logits, &targets)
}

pub fn loss_da_value(logits: &[f64], domain: Domain, label: Option<usize>) -> Result<f64> {
    let mut g = Graph::frozen();
    let out = g.constant(Tensor::new(&[1, logits.len()], logits.to_vec())?)?;
    let l = loss_da(&mut g, out, &[domain], &[label])?;
    Ok(g.scalar(l))
}

/// `2·ts·tr / (ts + tr)`.
pub fn harmonic_mean(ts: f64, tr: f64) -> Result<f64> {
    if !(ts >= 0.0 && tr >= 0.0) {
        return Err(Error::Invalid(format!("accuracies must be >= 0, got ts={ts} tr={tr}")));
    }
    if ts == 0.0 && tr == 0.0 {
        return Err(Error::Invalid("harmonic mean of two zeros is undefined".into()));
    }
    Ok(2.0 * ts * tr / (ts + tr))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sem2() -> SemanticSet {
        SemanticSet::new(vec![(1, vec![1.0, 0.0]), (2, vec![0.0, 1.0])]).unwrap()
    }

    #[test]
    fn zero_predictor_outputs_zero() {
        let mut ps = ParamSet::new();
        init_params(&mut ps, 4, 3, 2, 0).unwrap();
        for p in ps.iter_mut() {
            p.tensor.data_mut().fill(0.0);
        }
        let mut g = Graph::frozen();
        let x = g.constant(Tensor::filled(&[2, 4], 1.5)).unwrap();
        let y = predict(&mut g, &ps, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn predictor_hand_forward() {
        let mut ps = ParamSet::new();
        init_params(&mut ps, 2, 2, 1, 0).unwrap();
        ps.tensor_mut(FC1_WEIGHT).unwrap().data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        ps.tensor_mut(FC1_BIAS).unwrap().data_mut().copy_from_slice(&[0.5, -3.0]);
        ps.tensor_mut(FC2_WEIGHT).unwrap().data_mut().copy_from_slice(&[2.0, -1.0]);
        let mut g = Graph::frozen();
        let x = g.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        let y = predict(&mut g, &ps, x).unwrap();
        // relu([1.5, -1]) = [1.5, 0] → 2·1.5 = 3
        assert_eq!(g.value(y).data(), &[3.0]);
        let bad = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(matches!(predict(&mut g, &ps, bad), Err(Error::Shape { op: "predict", .. })));
    }

    #[test]
    fn gzsl_hinge_hand_values() {
        let s = sem2();
        assert_eq!(loss_gzsl_value(&[1.0, 0.0], 1, &s, 0.1).unwrap(), 0.0);
        assert!((loss_gzsl_value(&[1.0, 0.0], 2, &s, 0.1).unwrap() - 1.1).abs() < 1e-12);
        let same = SemanticSet::new(vec![(0, vec![0.3, 0.4]), (1, vec![0.3, 0.4])]).unwrap();
        assert_eq!(loss_gzsl_value(&[2.0, -1.0], 0, &same, 0.0).unwrap(), 0.0);
        assert!(loss_gzsl_value(&[1.0, 0.0], 7, &s, 0.1).is_err());
    }

    #[test]
    fn calibrated_stacking_decisions() {
        let split = GzslSplit::new(vec![0], vec![1]).unwrap();
        let labels = [0, 1];
        assert_eq!(gzsl_classify(&[0.9, 0.8], &labels, &split, 0.0), 0);
        assert_eq!(gzsl_classify(&[0.9, 0.8], &labels, &split, 0.2), 1);
        let lone = GzslSplit::new(vec![4], vec![]).unwrap();
        assert_eq!(gzsl_classify(&[-3.0], &[4], &lone, 1.0), 4);
        assert!(GzslSplit::new(vec![1, 2], vec![2]).is_err());
    }

    #[test]
    fn fsl_cross_entropy_values() {
        let five = loss_fsl_value(&[0.3; 5], 2).unwrap();
        assert!((five - libm::log(5.0)).abs() < 1e-12);
        let two = loss_fsl_value(&[2.0, 0.0], 0).unwrap();
        let e2 = libm::exp(2.0);
        assert!((two - (-libm::log(e2 / (e2 + 1.0)))).abs() < 1e-12);
        assert!((two - 0.1269).abs() < 5e-5);
        assert!(loss_fsl_value(&[60.0, 0.0, 0.0], 0).unwrap() < 1e-20);
    }

    #[test]
    fn prototypes_are_means() {
        let a = [0.0, 2.0];
        let b = [2.0, 0.0];
        let p = fsl_prototypes(&[(&a, 3), (&b, 3)], &[3]).unwrap();
        assert_eq!(p[0].mean, vec![1.0, 1.0]);
        let one = fsl_prototypes(&[(&a, 1)], &[1]).unwrap();
        assert_eq!(one[0].mean, a.to_vec());
        assert!(fsl_prototypes(&[(&a, 1)], &[1, 2]).is_err());
    }

    #[test]
    fn nearest_prototype_rule() {
        let protos = vec![
            ClassPrototype { label: 1, mean: vec![1.0, 0.0] },
            ClassPrototype { label: 2, mean: vec![0.0, 1.0] },
        ];
        assert_eq!(fsl_classify(&[0.9, 0.2], &protos), 1);
        assert_eq!(fsl_classify(&[0.0, 1.0], &protos), 2);
        assert_eq!(fsl_classify(&[0.5, 0.5], &protos), 1);
        let reversed: Vec<_> = protos.into_iter().rev().collect();
        assert_eq!(fsl_classify(&[0.5, 0.5], &reversed), 1);
    }

    #[test]
    fn pseudo_label_argmax() {
        assert_eq!(pseudo_label(&[0.2, 0.5, 0.3]), 1);
        assert_eq!(pseudo_label(&[0.4; 4]), 0);
    }

    #[test]
    fn da_loss_cases() {
        let logits = [0.5, 2.0, -1.0];
        assert_eq!(
            loss_da_value(&logits, Domain::Source, Some(2)).unwrap(),
            loss_fsl_value(&logits, 2).unwrap()
        );
        let z: f64 = logits.iter().map(|v| libm::exp(*v)).sum();
        let p = libm::exp(2.0) / z;
        assert!((loss_da_value(&logits, Domain::Target, None).unwrap() + libm::log(p)).abs() < 1e-12);
        let ten = loss_da_value(&[0.0; 10], Domain::Target, None).unwrap();
        assert!((ten - libm::log(10.0)).abs() < 1e-12);
        assert!(loss_da_value(&logits, Domain::Source, None).is_err());
    }

    #[test]
    fn harmonic_mean_identities() {
        assert_eq!(harmonic_mean(40.0, 40.0).unwrap(), 40.0);
        assert_eq!(harmonic_mean(0.0, 70.0).unwrap(), 0.0);
        assert!(harmonic_mean(0.0, 0.0).is_err());
        assert!(harmonic_mean(-1.0, 3.0).is_err());
    }

    #[test]
    fn semantic_set_rules() {
        assert!(SemanticSet::new(vec![(0, vec![1.0]), (0, vec![2.0])]).is_err());
        assert!(SemanticSet::new(vec![(0, vec![1.0]), (1, vec![2.0, 1.0])]).is_err());
        let s = SemanticSet::new(vec![(5, vec![3.0, 4.0]), (2, vec![0.0, 0.0])]).unwrap().normalized();
        assert_eq!(s.labels(), &[2, 5]);
        assert_eq!(s.vector(5).unwrap(), &[0.6, 0.8]);
        assert_eq!(s.vector(2).unwrap(), &[0.0, 0.0]);
    }
}
