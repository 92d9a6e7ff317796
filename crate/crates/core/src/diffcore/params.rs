use std::collections::HashMap;

use ndarray::{Array2, ArrayView2, Axis};

use super::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of learnable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name, which is a
    /// construction bug rather than a runtime condition.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut RngStream,
    ) -> ParamId {
        let value = Array2::from_shape_simple_fn((rows, cols), || rng.normal(0.0, std));
        self.add(name, value)
    }

    pub fn add_constant(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fill: f64,
    ) -> ParamId {
        self.add(name, Array2::from_elem((rows, cols), fill))
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Gradient table keyed by [`ParamId`]. Parameters the loss never touched
/// have no entry; [`Gradients::get_or_zero`] materialises them as zeros.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn new(param_count: usize) -> Self {
        Gradients {
            grads: vec![None; param_count],
        }
    }

    fn slot(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Array2<f64> {
        if id.0 >= self.grads.len() {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0].get_or_insert_with(|| Array2::zeros(shape))
    }

    pub fn accumulate(&mut self, id: ParamId, grad: ArrayView2<f64>) {
        let slot = self.slot(id, grad.dim());
        *slot += &grad;
    }

    /// Scatter-add rows of `grad` into the rows `rows` of a parameter of
    /// shape `shape` (embedding lookups).
    pub fn accumulate_rows(
        &mut self,
        id: ParamId,
        shape: (usize, usize),
        rows: &[usize],
        grad: ArrayView2<f64>,
    ) {
        let slot = self.slot(id, shape);
        for (g, &r) in grad.axis_iter(Axis(0)).zip(rows) {
            let mut dst = slot.row_mut(r);
            dst += &g;
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn get_or_zero(&self, id: ParamId, store: &ParamStore) -> Array2<f64> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(store.get(id).dim()))
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g.view());
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}
