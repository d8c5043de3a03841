use crate::error::{Error, Result};

use super::tensor::{Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable matrices in declaration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    /// Overwrites every value from `other`, which must declare the same names
    /// and shapes in the same order.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        let missing: Vec<&str> = self
            .names
            .iter()
            .filter(|n| !other.names.contains(n))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Incompatible(format!(
                "checkpoint is missing parameters: {}",
                missing.join(", ")
            )));
        }
        let extra: Vec<&str> = other
            .names
            .iter()
            .filter(|n| !self.names.contains(n))
            .map(String::as_str)
            .collect();
        if !extra.is_empty() {
            return Err(Error::Incompatible(format!(
                "checkpoint has unexpected parameters: {}",
                extra.join(", ")
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let j = other.find(name).expect("presence checked").0;
            if self.values[i].shape() != other.values[j].shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {name} has shape {:?}, checkpoint has {:?}",
                    self.values[i].shape(),
                    other.values[j].shape()
                )));
            }
        }
        for (i, name) in self.names.clone().iter().enumerate() {
            let j = other.find(name).expect("presence checked").0;
            self.values[i] = other.values[j].clone();
        }
        Ok(())
    }
}

/// Gradients aligned with a [`ParamStore`]; `None` where a parameter took no
/// part in the loss.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn empty(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    pub(crate) fn from_vec(grads: Vec<Option<Matrix<T>>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<&Matrix<T>>> {
        self.grads.iter().map(Option::as_ref)
    }

    /// `self += scale * other`.
    pub fn accumulate(&mut self, other: Gradients<T>, scale: T) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (mine, theirs) in self.grads.iter_mut().zip(other.grads) {
            let Some(mut g) = theirs else { continue };
            if scale != T::one() {
                g.scale_in_place(scale);
            }
            match mine {
                Some(m) => m.add_assign(&g),
                None => *mine = Some(g),
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(Matrix::sum_sq)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::is_finite)
    }
}
