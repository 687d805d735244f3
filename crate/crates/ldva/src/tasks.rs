//! Builds the train and test sets of each task from a [`DataConfig`].

use ldva_core::config::Task;
use ldva_core::data::{
    augment_rotations, class_split, domain_shift, generate_synthetic, resize_nearest, sample_split, LabeledImageSet,
};
use ldva_core::heads::{Domain, GzslSplit, SemanticSet};

use crate::error::{Error, Result};
use crate::formats::read_semantics;
use crate::idx::load_idx;
use crate::run::{DataConfig, IdxPaths};

pub fn load_paths(p: &IdxPaths) -> Result<LabeledImageSet> {
    let mut set = load_idx(&p.images, &p.labels)?;
    if let Some(n) = p.limit {
        let keep: Vec<usize> = (0..n.min(set.len())).collect();
        set = set.subset(&keep);
    }
    if let Some(side) = p.resize {
        set = resize_nearest(&set, side, side)?;
    }
    Ok(set)
}

fn need<'a, T>(v: &'a Option<T>, what: &str, task: Task) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Usage(format!("{} data needs `data.{what}` or `data.synth`", task.name())))
}

fn synth(d: &DataConfig) -> Result<Option<LabeledImageSet>> {
    d.synth.as_ref().map(|s| generate_synthetic(s).map_err(Error::from)).transpose()
}

#[derive(Debug, Clone)]
pub struct GzslData {
    /// Seen classes only.
    pub train: LabeledImageSet,
    /// Held-out seen samples followed by all unseen samples.
    pub test: LabeledImageSet,
    /// Every class, seen and unseen.
    pub semantics: SemanticSet,
    pub split: GzslSplit,
}

impl GzslData {
    pub fn seen_semantics(&self) -> Result<SemanticSet> {
        Ok(self.semantics.subset(&self.split.seen)?)
    }
}

pub fn gzsl_data(d: &DataConfig) -> Result<GzslData> {
    if let Some(all) = synth(d)? {
        let semantics = all.semantics.clone().expect("synthetic sets carry semantics");
        let (seen_set, unseen_set, seen) = class_split(&all, d.seen_fraction, d.split_seed)?;
        let unseen = unseen_set.present_classes();
        let (train, seen_test) = sample_split(&seen_set, d.train_fraction, d.split_seed)?;
        let test = seen_test.concat(&unseen_set)?;
        return Ok(GzslData { train, test, semantics, split: GzslSplit::new(seen, unseen)? });
    }
    let train = load_paths(need(&d.train, "train", Task::Gzsl)?)?;
    let test = load_paths(need(&d.test, "test", Task::Gzsl)?)?;
    let semantics = read_semantics(need(&d.semantics, "semantics", Task::Gzsl)?)?;
    let seen = train.present_classes();
    let unseen: Vec<usize> = semantics.labels().iter().copied().filter(|l| !seen.contains(l)).collect();
    for l in seen.iter().chain(&test.present_classes()) {
        if semantics.index_of(*l).is_none() {
            return Err(Error::Usage(format!("class {l} has no semantic vector")));
        }
    }
    Ok(GzslData { train, test, semantics, split: GzslSplit::new(seen, unseen)? })
}

#[derive(Debug, Clone)]
pub struct FslData {
    /// Base classes.
    pub train: LabeledImageSet,
    /// Novel classes, sampled into episodes.
    pub test: LabeledImageSet,
}

pub fn fsl_data(d: &DataConfig) -> Result<FslData> {
    let rotate = |s: LabeledImageSet| -> Result<LabeledImageSet> {
        if d.rotations.is_empty() {
            Ok(s)
        } else {
            Ok(augment_rotations(&s, &d.rotations)?)
        }
    };
    if let Some(all) = synth(d)? {
        let all = rotate(all)?;
        let (train, test, _) = class_split(&all, d.seen_fraction, d.split_seed)?;
        return Ok(FslData { train, test });
    }
    let train = rotate(load_paths(need(&d.train, "train", Task::Fsl)?)?)?;
    let test = rotate(load_paths(need(&d.test, "test", Task::Fsl)?)?)?;
    Ok(FslData { train, test })
}

#[derive(Debug, Clone)]
pub struct DaData {
    pub source: LabeledImageSet,
    /// Labels are kept for evaluation only; training never reads them.
    pub target: LabeledImageSet,
}

/// Synthetic DA splits one generated set into a clean source half and a
/// target half that receives `target_shift`.
pub fn da_data(d: &DataConfig) -> Result<DaData> {
    let (source, mut target) = match synth(d)? {
        Some(all) => sample_split(&all, 0.5, d.split_seed)?,
        None => (
            load_paths(need(&d.train, "train", Task::Da)?)?,
            load_paths(need(&d.target, "target", Task::Da)?)?,
        ),
    };
    for (i, s) in d.target_shift.iter().enumerate() {
        target = domain_shift(&target, s.kind, s.magnitude, d.split_seed.wrapping_add(i as u64))?;
    }
    let classes = source.num_classes.max(target.num_classes);
    let widen = |mut s: LabeledImageSet, dom| {
        s.num_classes = classes;
        s.with_domain(dom)
    };
    Ok(DaData { source: widen(source, Domain::Source), target: widen(target, Domain::Target) })
}
