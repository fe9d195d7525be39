use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn zero(&mut self) {
        for v in &mut self.values {
            v.data_mut().fill(0.0);
        }
    }

    /// Redraws every entry from `N(0, scale² / fan_in)`, biases included.
    pub fn randomize(&mut self, rng: &mut Rng, scale: f64) {
        for v in &mut self.values {
            let fan_in = fan_in(v.shape());
            let std = scale / (fan_in as f64).sqrt();
            for x in v.data_mut() {
                *x = rng.normal() * std;
            }
        }
    }

    pub fn norms(&self) -> Vec<(String, f64)> {
        self.iter().map(|(_, n, v)| (n.to_string(), v.norm())).collect()
    }
}

/// Inputs feeding one output unit: `cin·kh·kw` for kernels, rows for matrices.
pub fn fan_in(shape: &[usize]) -> usize {
    match shape {
        [] => 1,
        [_] => 1,
        [rows, _] => *rows,
        [_, rest @ ..] => rest.iter().product::<usize>().max(1),
    }
}
