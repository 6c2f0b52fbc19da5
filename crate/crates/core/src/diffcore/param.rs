use std::collections::HashMap;

use crate::diffcore::real::Real;
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Borrowed view of one parameter: its value, accumulated gradient, name
/// and trainable flag.
#[derive(Clone, Copy, Debug)]
pub struct ParamNode<'a, S> {
    pub name: &'a str,
    pub value: &'a Tensor<S>,
    pub grad: &'a Tensor<S>,
    pub trainable: bool,
}

#[derive(Clone, Debug)]
struct ParamMeta {
    name: String,
    trainable: bool,
}

/// Ordered, named collection of parameters with gradient buffers.
///
/// Values and gradients live in separate vectors so a [`Tape`] can read the
/// values while its backward pass writes the gradients.
///
/// [`Tape`]: crate::diffcore::Tape
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    meta: Vec<ParamMeta>,
    values: Vec<Tensor<S>>,
    grads: Vec<Tensor<S>>,
    index: HashMap<String, ParamId>,
}

/// Read-only parameter values, as seen by a tape.
#[derive(Clone, Copy)]
pub struct ParamView<'a, S> {
    values: &'a [Tensor<S>],
    trainable: &'a [ParamMeta],
}

/// Mutable gradient buffers, written by [`Tape::backward`].
///
/// [`Tape::backward`]: crate::diffcore::Tape::backward
pub struct GradSink<'a, S> {
    grads: &'a mut [Tensor<S>],
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            meta: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("parameter `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.shape().to_vec()));
        self.values.push(value);
        self.meta.push(ParamMeta {
            name: name.clone(),
            trainable,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> ParamNode<'_, S> {
        ParamNode {
            name: &self.meta[id.0].name,
            value: &self.values[id.0],
            grad: &self.grads[id.0],
            trainable: self.meta[id.0].trainable,
        }
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.meta[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<S> {
        &self.grads[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.meta[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.meta[id.0].trainable = trainable;
    }

    /// Replaces a parameter value; the new value must keep the old shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: self.values[id.0].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, ParamNode<'_, S>)> {
        self.ids().map(move |id| (id, self.get(id)))
    }

    /// Total number of scalar entries across all parameters.
    pub fn element_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(S::zero());
        }
    }

    pub fn view(&self) -> ParamView<'_, S> {
        ParamView {
            values: &self.values,
            trainable: &self.meta,
        }
    }

    /// Splits into a read-only value view and a writable gradient sink.
    pub fn split(&mut self) -> (ParamView<'_, S>, GradSink<'_, S>) {
        (
            ParamView {
                values: &self.values,
                trainable: &self.meta,
            },
            GradSink {
                grads: &mut self.grads,
            },
        )
    }

    pub(crate) fn values_and_grads_mut(&mut self) -> (&mut [Tensor<S>], &[Tensor<S>]) {
        (&mut self.values, &self.grads)
    }
}

impl<'a, S: Real> ParamView<'a, S> {
    pub fn value(&self, id: ParamId) -> &'a Tensor<S> {
        &self.values[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl<S: Real> ParamView<'static, S> {
    /// View of an empty store, for tapes that hold no parameters.
    pub fn empty() -> Self {
        ParamView {
            values: &[],
            trainable: &[],
        }
    }
}

impl<'a, S: Real> GradSink<'a, S> {
    pub(crate) fn from_slice(grads: &'a mut [Tensor<S>]) -> Self {
        GradSink { grads }
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.grads[id.0]
    }
}
