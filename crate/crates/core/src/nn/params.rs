use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NnError, Tensor};

/// Handle to one named parameter tensor inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Zeros,
    Ones,
}

/// All trainable tensors of a model, addressed by path-like names such as
/// `encoder.bev.subgraph.0.mlp.fc1.w`.
///
/// Names are unique and shapes never change after registration. Values are
/// initialised in registration order from a ChaCha stream seeded with
/// `seed`, so two stores built the same way are bit-identical.
#[derive(Clone, Debug)]
pub struct ParameterStore {
    seed: u64,
    rng: ChaCha8Rng,
    names: Vec<String>,
    values: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
    ) -> Result<ParamId, NnError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NnError::DuplicateParameter(name));
        }
        let value = match init {
            Init::Zeros => Tensor::zeros(rows, cols),
            Init::Ones => Tensor::filled(rows, cols, 1.0),
            Init::Xavier => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                let data = (0..rows * cols)
                    .map(|_| self.rng.random_range(-bound..bound))
                    .collect();
                Tensor::from_vec(rows, cols, data)?
            }
        };
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
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

    /// Overwrites a parameter's values; the shape must match.
    pub fn assign(&mut self, id: ParamId, value: Tensor) -> Result<(), NnError> {
        let current = &self.values[id.0];
        if current.shape() != value.shape() {
            return Err(NnError::Shape {
                context: "ParameterStore::assign",
                expected: format!("{:?} for {}", current.shape(), self.names[id.0]),
                actual: format!("{:?}", value.shape()),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Copies every value from `other`, which must have the same layout.
    pub fn copy_from(&mut self, other: &ParameterStore) -> Result<(), NnError> {
        if self.names != other.names {
            return Err(NnError::LayoutMismatch(
                "parameter names differ between stores".into(),
            ));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(NnError::LayoutMismatch(format!(
                    "shape {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Adds uniform noise in `±scale` to every entry. Gradient checks use
    /// it to move zero-initialised biases off ReLU kinks.
    pub fn perturb(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut self.values {
            v.data_mut()
                .iter_mut()
                .for_each(|x| *x += rng.random_range(-scale..=scale));
        }
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            values: self
                .values
                .iter()
                .map(|v| Tensor::zeros(v.rows(), v.cols()))
                .collect(),
        }
    }
}

/// Gradient buffers laid out exactly like a [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct Gradients {
    values: Vec<Tensor>,
}

impl Gradients {
    pub(crate) fn from_tensors(values: Vec<Tensor>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn reset(&mut self) {
        self.values.iter_mut().for_each(|t| t.fill(0.0));
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.values {
            t.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.add_assign(b);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.values.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new(1);
        s.register("a", 2, 2, Init::Xavier).unwrap();
        assert!(matches!(
            s.register("a", 2, 2, Init::Zeros),
            Err(NnError::DuplicateParameter(_))
        ));
    }

    #[test]
    fn xavier_bounds_and_determinism() {
        let mut a = ParameterStore::new(7);
        let mut b = ParameterStore::new(7);
        let ia = a.register("w", 10, 20, Init::Xavier).unwrap();
        let ib = b.register("w", 10, 20, Init::Xavier).unwrap();
        assert_eq!(a.get(ia), b.get(ib));
        let bound = (6.0f64 / 30.0).sqrt();
        assert!(a.get(ia).data().iter().all(|v| v.abs() <= bound));
    }
}
