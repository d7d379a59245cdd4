use std::collections::BTreeMap;

use nalgebra::DMatrix;

/// Named parameter tensors. Biases are stored as single-column matrices.
///
/// Names follow `<branch>.<layer>.<role>`, e.g. `xvector.3.w`, `xvector.5.f1`
/// for the first factor of a factorized layer, or `asr.head.w` for a
/// frame-level classifier.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, DMatrix<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: DMatrix<f64>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DMatrix<f64>> {
        self.tensors.get_mut(name)
    }

    /// Panics when `name` is missing; callers look up names produced by the plan.
    pub fn tensor(&self, name: &str) -> &DMatrix<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DMatrix<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut DMatrix<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), DMatrix::zeros(v.nrows(), v.ncols())))
                .collect(),
        }
    }

    /// Adds `g` into the tensor `name`, creating a zero tensor of the same shape if absent.
    pub fn accumulate(&mut self, name: &str, g: &DMatrix<f64>) {
        match self.tensors.get_mut(name) {
            Some(t) => *t += g,
            None => {
                self.tensors.insert(name.to_string(), g.clone());
            }
        }
    }

    /// `self += alpha * other` over tensors present in both.
    pub fn axpy(&mut self, alpha: f64, other: &Params) {
        for (k, v) in &mut self.tensors {
            if let Some(o) = other.tensors.get(k) {
                *v += o * alpha;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in self.tensors.values_mut() {
            *v *= alpha;
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .values()
            .map(|t| t.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .values()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs_diff(&self, other: &Params) -> f64 {
        self.tensors
            .iter()
            .map(|(k, v)| match other.tensors.get(k) {
                Some(o) if o.shape() == v.shape() => (v - o).abs().max(),
                _ => f64::INFINITY,
            })
            .fold(0.0, f64::max)
    }
}
