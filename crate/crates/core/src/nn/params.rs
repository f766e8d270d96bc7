use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named, fixed-shape 2-D tensor. Biases are stored as `1 x n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
}

/// Ordered collection of named tensors.
///
/// Two sets are congruent when their name and shape lists match exactly. Every
/// optimizer and EMA operation checks congruence before touching values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<Param>,
}

impl ParamSet {
    pub fn new(entries: Vec<Param>) -> Result<Self> {
        for (i, p) in entries.iter().enumerate() {
            if entries[..i].iter().any(|q| q.name == p.name) {
                return Err(Error::config(format!("duplicate parameter name `{}`", p.name)));
            }
        }
        Ok(Self { entries })
    }

    pub fn zeros_like(other: &ParamSet) -> Self {
        Self {
            entries: other
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Array2::zeros(p.value.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn get(&self, index: usize) -> &Array2<f64> {
        &self.entries[index].value
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Array2<f64> {
        &mut self.entries[index].value
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].name
    }

    pub fn find(&self, name: &str) -> Option<&Array2<f64>> {
        self.entries.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn find_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.entries
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn is_congruent(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    pub fn ensure_congruent(&self, other: &ParamSet, what: &str) -> Result<()> {
        if self.is_congruent(other) {
            Ok(())
        } else {
            Err(Error::config(format!("{what}: parameter sets are not congruent")))
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) -> Result<()> {
        self.ensure_congruent(other, "add_scaled")?;
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.value.scaled_add(scale, &b.value);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for p in &mut self.entries {
            p.value.mapv_inplace(|v| v * factor);
        }
    }

    pub fn clip_values(&mut self, limit: f64) {
        for p in &mut self.entries {
            p.value.mapv_inplace(|v| v.clamp(-limit, limit));
        }
    }

    /// First non-finite tensor, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|p| p.value.iter().any(|v| !v.is_finite()))
            .map(|p| p.name.as_str())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some(name) => Err(Error::numeric(name, "non-finite value")),
            None => Ok(()),
        }
    }

    /// Largest absolute elementwise difference between congruent sets.
    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        self.ensure_congruent(other, "max_abs_diff")?;
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .flat_map(|(a, b)| a.value.iter().zip(b.value.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    }

    /// Hash over names, shapes and the exact bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.entries {
            p.name.hash(&mut h);
            p.value.shape().hash(&mut h);
            for v in p.value.iter() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn into_entries(self) -> Vec<Param> {
        self.entries
    }
}
