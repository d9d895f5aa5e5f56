use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::{Error, Real, Result};

/// Handle into a [`ParamStore`]. Shared layers hold copies of the same id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
    FcWeight,
    FcBias,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        use ParamKind::*;
        [ConvWeight, ConvBias, BnGamma, BnBeta, BnRunningMean, BnRunningVar, FcWeight, FcBias]
            .get(c as usize)
            .copied()
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Ordered registry of every named array in a model. Registration order is
/// the serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, kind, value });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.kind.trainable()).map(|(id, _)| id).collect()
    }

    /// Number of scalar values whose kind is (or is not) trainable.
    pub fn scalar_count(&self, trainable: bool) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable() == trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Flat copy of every value, in registry order.
    pub fn snapshot(&self) -> Vec<Real> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        let a = s.add("a", ParamKind::ConvBias, Tensor::zeros([2])).unwrap();
        assert!(s.add("a", ParamKind::ConvBias, Tensor::zeros([2])).is_err());
        assert_eq!(s.find("a"), Some(a));
        s.add("m", ParamKind::BnRunningMean, Tensor::zeros([3])).unwrap();
        assert_eq!(s.scalar_count(true), 2);
        assert_eq!(s.scalar_count(false), 3);
    }

    #[test]
    fn kind_codes_round_trip() {
        for c in 0..8u8 {
            assert_eq!(ParamKind::from_code(c).unwrap().code(), c);
        }
        assert!(ParamKind::from_code(8).is_none());
    }
}
