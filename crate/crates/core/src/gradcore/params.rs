use std::collections::HashMap;

use crate::error::{Error, Result};

/// Handle to a tensor inside one [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(pub(crate) usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named dense tensors of `f64` with a gradient slot each.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    lookup: HashMap<String, TensorId>,
    step: u64,
}

/// Read-only view of all parameter values.
#[derive(Clone, Copy)]
pub struct Values<'a> {
    values: &'a [Vec<f64>],
    shapes: &'a [Vec<usize>],
}

/// Mutable view of all gradient slots.
pub struct Grads<'a> {
    grads: &'a mut [Vec<f64>],
    shapes: &'a [Vec<usize>],
}

fn row_range(shape: &[usize], row: usize) -> std::ops::Range<usize> {
    let cols = shape.get(1).copied().unwrap_or(1);
    row * cols..(row + 1) * cols
}

impl<'a> Values<'a> {
    pub fn get(&self, id: TensorId) -> &'a [f64] {
        &self.values[id.0]
    }

    /// Row `row` of a 2-D tensor.
    pub fn row(&self, id: TensorId, row: usize) -> &'a [f64] {
        &self.values[id.0][row_range(&self.shapes[id.0], row)]
    }
}

impl Grads<'_> {
    pub fn get_mut(&mut self, id: TensorId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn row_mut(&mut self, id: TensorId, row: usize) -> &mut [f64] {
        let range = row_range(&self.shapes[id.0], row);
        &mut self.grads[id.0][range]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor. `values.len()` must equal the product of `shape`.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<TensorId> {
        let name = name.into();
        let len: usize = shape.iter().product();
        if values.len() != len {
            return Err(Error::InvalidArgument(format!(
                "tensor `{name}`: {} values for shape {shape:?}",
                values.len()
            )));
        }
        if self.lookup.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate tensor `{name}`")));
        }
        let id = TensorId(self.names.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.grads.push(vec![0.0; len]);
        self.values.push(values);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<TensorId> {
        self.lookup.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = TensorId> {
        (0..self.names.len()).map(TensorId)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: TensorId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: TensorId) -> &mut [f64] {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: TensorId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn values(&self) -> Values<'_> {
        Values {
            values: &self.values,
            shapes: &self.shapes,
        }
    }

    /// Borrow values and gradients at the same time.
    pub fn split(&mut self) -> (Values<'_>, Grads<'_>) {
        (
            Values {
                values: &self.values,
                shapes: &self.shapes,
            },
            Grads {
                grads: &mut self.grads,
                shapes: &self.shapes,
            },
        )
    }

    /// Total number of scalars over the given tensors.
    pub fn count(&self, ids: &[TensorId]) -> usize {
        ids.iter().map(|id| self.values[id.0].len()).sum()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn advance_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    pub(crate) fn update_parts(&mut self) -> (&[String], &mut [Vec<f64>], &[Vec<f64>]) {
        (&self.names, &mut self.values, &self.grads)
    }
}
