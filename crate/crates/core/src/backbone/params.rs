use std::collections::HashMap;

use ndarray::Array2;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{gaussian_vec, StageRng};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered 2-D parameters. Order is registration order and is the
/// on-disk order.
#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Array2<F>>,
    index: HashMap<String, usize>,
}

impl<F> Default for ParamStore<F> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<F>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Fan-in scaled Gaussian: `std = 1 / sqrt(fan_in)`.
    pub fn gaussian(&mut self, rng: &mut StageRng, name: &str, rows: usize, cols: usize) -> ParamId {
        self.gaussian_std(rng, name, rows, cols, 1.0 / (cols as f64).sqrt())
    }

    pub fn gaussian_std(
        &mut self,
        rng: &mut StageRng,
        name: &str,
        rows: usize,
        cols: usize,
        std: f64,
    ) -> ParamId {
        let values = gaussian_vec(rng, rows * cols, std)
            .into_iter()
            .map(|v| F::from_f64c(v as f64))
            .collect();
        self.insert(name, Array2::from_shape_vec((rows, cols), values).expect("shape"))
    }

    pub fn filled(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.insert(name, Array2::from_elem((rows, cols), F::from_f64c(value)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.values[id.0]
    }

    /// Mutable views of every value, in id order.
    pub fn values_mut(&mut self) -> Vec<&mut Array2<F>> {
        self.values.iter_mut().collect()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<F>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| G::from_f64c(x.to_f64c())))
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn to_f32(&self) -> Vec<(String, Array2<f32>)> {
        self.iter()
            .map(|(_, n, v)| (n.to_string(), v.mapv(|x| x.to_f64c() as f32)))
            .collect()
    }

    /// Replaces values from a name-ordered list; names and shapes must match.
    pub fn assign_from(&mut self, tensors: Vec<(String, Array2<f32>)>) -> Result<()> {
        if tensors.len() != self.values.len() {
            return Err(Error::shape(self.values.len(), tensors.len()));
        }
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(Error::ConfigMismatch(format!(
                    "tensor #{i} is `{name}`, expected `{}`",
                    self.names[i]
                )));
            }
            if t.dim() != self.values[i].dim() {
                return Err(Error::shape(
                    format!("{name} {:?}", self.values[i].dim()),
                    t.dim(),
                ));
            }
            self.values[i] = t.mapv(|x| F::from_f64c(x as f64));
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &ParamStore<F>) -> bool {
        self.names == other.names
            && self.values.iter().zip(&other.values).all(|(a, b)| {
                a.dim() == b.dim()
                    && a.iter()
                        .zip(b.iter())
                        .all(|(x, y)| x.to_f64c().to_bits() == y.to_f64c().to_bits())
            })
    }
}

/// Lazily places parameters on a tape, once per forward pass.
pub struct Binder {
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl Binder {
    pub fn new(count: usize, trainable: bool) -> Self {
        Self {
            vars: vec![None; count],
            trainable,
        }
    }

    pub fn get<F: Real>(&mut self, tape: &mut Tape<F>, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = tape.leaf(store.get(id).clone(), self.trainable);
        self.vars[id.0] = Some(v);
        v
    }

    /// Bound variables, for collecting gradients after a backward pass.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}
