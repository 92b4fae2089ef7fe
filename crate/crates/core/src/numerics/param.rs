use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{GbreError, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    /// Rows whose gradient is always discarded (the PAD embedding row).
    pub frozen_rows: Vec<usize>,
}

impl Param {
    pub fn new(name: impl Into<String>, tensor: Tensor, trainable: bool) -> Self {
        let grad = Tensor::zeros(tensor.shape());
        Param {
            name: name.into(),
            tensor,
            grad,
            trainable,
            frozen_rows: Vec::new(),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    fn mask_frozen_rows(&mut self) {
        for &r in &self.frozen_rows {
            self.grad.row_slice_mut(r).fill(0.0);
        }
    }
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, param: Param) -> ParamId {
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Param::zero_grad);
    }

    /// Adds `scale * grad` to the gradient of `id`. Non-trainable
    /// parameters and frozen rows ignore the contribution.
    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &Tensor, scale: f64) {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return;
        }
        for (g, d) in p.grad.data_mut().iter_mut().zip(grad.data()) {
            *g += scale * d;
        }
        p.mask_frozen_rows();
    }

    /// Row-sparse variant of [`ParamStore::accumulate`] used by embedding
    /// gathers.
    pub(crate) fn accumulate_rows(
        &mut self,
        id: ParamId,
        rows: &[usize],
        grad: &Tensor,
        scale: f64,
    ) {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return;
        }
        for (i, &r) in rows.iter().enumerate() {
            if p.frozen_rows.contains(&r) {
                continue;
            }
            let src = grad.row_slice(i);
            for (g, d) in p.grad.row_slice_mut(r).iter_mut().zip(src) {
                *g += scale * d;
            }
        }
    }

    /// Plain SGD update `p <- p - lr * grad` on every trainable parameter,
    /// followed by a gradient reset.
    pub fn sgd_step(&mut self, learning_rate: f64) -> Result<()> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(GbreError::Config(format!(
                "learning rate must be finite and non-negative, got {learning_rate}"
            )));
        }
        for p in &mut self.params {
            if p.trainable && learning_rate != 0.0 {
                for (w, g) in p.tensor.data_mut().iter_mut().zip(p.grad.data()) {
                    *w -= learning_rate * g;
                }
            }
            p.zero_grad();
        }
        Ok(())
    }
}
