//! Named parameter storage and binding to autodiff variables.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use sha2::{Digest, Sha256};
use stepback_autodiff::{Tensor, Var};

use crate::error::{Error, Result};

/// All parameters of a model, keyed by dotted name (`enc.conv0.a.w`, ...).
///
/// The first name component identifies the network: `enc`, `dec`, `clf`, `disc`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.tensors.keys().filter(move |k| in_group(k, prefix))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars under `prefix` (all if empty).
    pub fn count(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| in_group(k, prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// SHA-256 over the names and exact bit patterns of every tensor under `prefix`.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, value) in self.tensors.iter().filter(|(k, _)| in_group(k, prefix)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for d in value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in value.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Wraps every tensor in a [`Var`]. Tensors under any of `trainable` become
    /// gradient-tracked parameters; the rest are constants.
    pub fn bind(&self, trainable: &[&str]) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable.iter().any(|p| in_group(k, p)) {
                    Var::parameter(v.clone())
                } else {
                    Var::constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// `enc` matches `enc.x` but not `encoder.x`; the empty prefix matches everything.
fn in_group(name: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || name == prefix
        || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

/// A [`ParamStore`] snapshot as graph leaves for one forward/backward pass.
#[derive(Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("no parameter named {name}")))
    }

    /// Gradient-tracked leaves, in name order.
    pub fn trainable(&self) -> (Vec<String>, Vec<Var>) {
        self.vars
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| (k.clone(), v.clone()))
            .unzip()
    }
}

/// Deterministic parameter initializer. Without a random source it only
/// records names and shapes.
pub(crate) struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: Option<&'a mut R>,
    pub shapes: BTreeMap<String, Vec<usize>>,
}

impl<R: Rng> Init<'_, R> {
    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.uniform(name, shape, bound);
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) {
        if let Some(rng) = self.rng.as_deref_mut() {
            let value = ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound));
            self.store.insert(name.clone(), value);
        }
        self.shapes.insert(name, shape.to_vec());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_match_whole_components() {
        assert!(in_group("enc.w", "enc"));
        assert!(in_group("enc.conv0.w", "enc.conv0"));
        assert!(!in_group("encoder.w", "enc"));
        assert!(in_group("clf.w", ""));
    }

    #[test]
    fn checksum_tracks_group_contents_only() {
        let mut p = ParamStore::new();
        p.insert("clf.w", ArrayD::zeros(IxDyn(&[2])));
        p.insert("enc.w", ArrayD::zeros(IxDyn(&[2])));
        let before = p.checksum("clf");
        p.get_mut("enc.w").unwrap()[[0]] = 1.0;
        assert_eq!(before, p.checksum("clf"));
        p.get_mut("clf.w").unwrap()[[1]] = -0.0;
        assert_ne!(before, p.checksum("clf"));
    }

    #[test]
    fn bind_marks_only_trainable_groups() {
        let mut p = ParamStore::new();
        p.insert("clf.w", ArrayD::zeros(IxDyn(&[2])));
        p.insert("enc.w", ArrayD::zeros(IxDyn(&[2])));
        let b = p.bind(&["enc"]);
        assert!(b.get("enc.w").unwrap().requires_grad());
        assert!(!b.get("clf.w").unwrap().requires_grad());
        assert_eq!(b.trainable().0, vec!["enc.w".to_string()]);
    }
}
