//! Named parameter storage and its binding onto a [`Graph`].

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{structural, Result};
use crate::scalar::Scalar;

/// The two disjoint trainable groups: everything learned for the embedding
/// objective, and the modality classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Embedding,
    Modality,
}

pub const MODALITY_PREFIX: &str = "modality/";
const EMBEDDING_PREFIXES: [&str; 5] = ["acoustic/", "text/", "ccsp/", "head/", "adams/"];

/// Assigns a parameter name to its group. Unknown namespaces are rejected so
/// that every parameter belongs to exactly one group.
pub fn group_of(name: &str) -> Result<ParamGroup> {
    if name.starts_with(MODALITY_PREFIX) {
        Ok(ParamGroup::Modality)
    } else if EMBEDDING_PREFIXES.iter().any(|p| name.starts_with(p)) {
        Ok(ParamGroup::Embedding)
    } else {
        Err(structural!("parameter `{name}` belongs to no group"))
    }
}

/// Hierarchically named parameters ("acoustic/conv0/kernel", ...).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Array2<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<T>> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Array2<T>> {
        self.get(name).ok_or_else(|| structural!("missing parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    /// Verifies the group partition.
    pub fn check_partition(&self) -> Result<()> {
        for name in self.entries.keys() {
            group_of(name)?;
        }
        Ok(())
    }

    /// Places every parameter on `g`, differentiable when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(name, value)| {
                let v = if trainable {
                    g.param(value.clone())
                } else {
                    g.constant(value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| U::c(x.to_f64_lossy()))))
                .collect(),
        }
    }
}

/// Parameter name → graph node for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Uniform fan-in initialization, `U(-1/√fan_in, 1/√fan_in)`.
pub fn fan_in_uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, shape: (usize, usize)) -> Array2<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || T::c(rng.random_range(-bound..=bound)))
}

pub fn zeros<T: Scalar>(shape: (usize, usize)) -> Array2<T> {
    Array2::zeros(shape)
}
