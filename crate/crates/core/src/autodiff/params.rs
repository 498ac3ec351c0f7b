use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Parameter group. Stage II updates only [`Group::AdaLn`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Backbone,
    AdaLn,
}

impl Group {
    pub fn tag(self) -> u8 {
        match self {
            Group::Backbone => 0,
            Group::AdaLn => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Group::Backbone),
            1 => Some(Group::AdaLn),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub value: Arc<Tensor<T>>,
}

/// Named parameters in insertion order, each tagged with exactly one group.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, group: Group, value: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        let id = self.params.len();
        self.params.push(Param { name: name.to_string(), group, value: Arc::new(value) });
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!("{} expects {:?}, got {:?}", slot.name, slot.value.shape(), value.shape()),
            ));
        }
        slot.value = Arc::new(value);
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: Group) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    pub fn count_scalars(&self, group: Group) -> usize {
        self.iter().filter(|(_, p)| p.group == group).map(|(_, p)| p.value.len()).sum()
    }

    /// Same names, groups and values converted to another scalar type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), group: p.group, value: Arc::new(p.value.cast()) })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Bitwise equality of every value in `group`.
    pub fn group_bits_equal(&self, other: &Self, group: Group) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).filter(|(a, _)| a.group == group).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits_u64() == y.to_bits_u64())
            })
    }

    /// Largest absolute elementwise difference over one group.
    pub fn max_abs_change(&self, other: &Self, group: Group) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .filter(|(a, _)| a.group == group)
            .map(|(a, b)| a.value.max_abs_diff(&b.value).as_f64())
            .fold(0.0, f64::max)
    }
}

trait Bits {
    fn to_bits_u64(self) -> u64;
}

impl<T: Real> Bits for T {
    fn to_bits_u64(self) -> u64 {
        // f64 holds every f32 exactly, so bit equality of the widened value is exact equality.
        self.as_f64().to_bits()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Group::Backbone, Tensor::zeros(1, 1)).unwrap();
        assert!(s.insert("w", Group::AdaLn, Tensor::zeros(1, 1)).is_err());
    }

    #[test]
    fn group_tags_roundtrip() {
        for g in [Group::Backbone, Group::AdaLn] {
            assert_eq!(Group::from_tag(g.tag()), Some(g));
        }
        assert_eq!(Group::from_tag(7), None);
    }
}
