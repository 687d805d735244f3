//! Named, group-tagged trainable parameters.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which part of the model a parameter belongs to. Optimizer steps filter on this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    /// Global feature extractor.
    Backbone,
    /// Channel-grouping layer producing attention weights.
    Grouping,
    /// Prototype encoder/decoder pair.
    Encoder,
    /// Task predictor.
    Predictor,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Backbone, Group::Grouping, Group::Encoder, Group::Predictor];

    pub fn tag(self) -> &'static str {
        match self {
            Group::Backbone => "backbone_E",
            Group::Grouping => "grouping_G",
            Group::Encoder => "encoder_PD",
            Group::Predictor => "predictor_V",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Group::ALL.into_iter().find(|g| g.tag() == tag)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Group::ALL.get(code as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub tensor: Tensor,
}

/// Ordered parameter collection. Insertion order is preserved so iteration,
/// serialization and optimizer updates are deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, group: Group, tensor: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param { name: name.to_string(), group, tensor });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Marks exactly the parameters in `groups` as trainable.
    pub fn set_trainable(&mut self, groups: &[Group]) {
        for p in &mut self.params {
            p.tensor.set_requires_grad(groups.contains(&p.group));
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Bitwise equality of the values of every parameter in `group`.
    pub fn group_bits_equal(&self, other: &ParamSet, group: Group) -> bool {
        let mine = self.params.iter().filter(|p| p.group == group);
        let theirs = other.params.iter().filter(|p| p.group == group);
        mine.zip(theirs).all(|(a, b)| {
            a.name == b.name
                && a.tensor.shape() == b.tensor.shape()
                && a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        }) && self.params.iter().filter(|p| p.group == group).count()
            == other.params.iter().filter(|p| p.group == group).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut ps = ParamSet::new();
        ps.insert("a", Group::Backbone, Tensor::zeros(&[1])).unwrap();
        assert_eq!(
            ps.insert("a", Group::Grouping, Tensor::zeros(&[1])),
            Err(Error::DuplicateParam("a".into()))
        );
    }

    #[test]
    fn trainable_follows_groups() {
        let mut ps = ParamSet::new();
        ps.insert("e", Group::Backbone, Tensor::zeros(&[1])).unwrap();
        ps.insert("g", Group::Grouping, Tensor::zeros(&[1])).unwrap();
        ps.set_trainable(&[Group::Grouping]);
        assert!(!ps.tensor("e").unwrap().requires_grad());
        assert!(ps.tensor("g").unwrap().requires_grad());
    }

    #[test]
    fn group_tags_round_trip() {
        for g in Group::ALL {
            assert_eq!(Group::from_tag(g.tag()), Some(g));
            assert_eq!(Group::from_code(g.code()), Some(g));
        }
    }
}
