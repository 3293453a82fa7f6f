//! Reverse-mode automatic differentiation over a linear tape.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric::{ParamId, ParamStore, Tensor};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Maps the output gradient to one gradient per input; `needs[i]` is false
/// for inputs that do not require a gradient, which may then be skipped.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + Send + Sync>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Records every operation of one forward pass so that gradients can be
/// pulled back from a scalar loss.
///
/// A tape built with [`Tape::no_grad`] only evaluates; no backward closures
/// are retained.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.grad_enabled,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient (detached input).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Arc::new(value), false, None)
    }

    /// Like [`Tape::constant`] without copying a shared buffer.
    pub fn constant_shared(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// A free input whose gradient is wanted (used by gradient checks).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Arc::new(value), true, None)
    }

    /// A parameter leaf; it only requires a gradient when trainable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push_leaf(Arc::clone(p.value_arc()), p.trainable, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records an op. `make_backward` is only invoked when some input needs a
    /// gradient, so forward-only tapes never capture saved tensors.
    pub(crate) fn record<F>(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        make_backward: F,
    ) -> Result<Var>
    where
        F: FnOnce() -> BackwardFn<T>,
    {
        if !value.all_finite() {
            return Err(Error::NonFinite(op));
        }
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward = requires_grad.then(make_backward);
        self.nodes.push(Node {
            value: Arc::new(value),
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Back-propagates from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::Contract("backward on a no-grad tape".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads, params: Vec::new() });
        }
        grads[root.0] = Some(Tensor::full(
            self.nodes[root.0].value.shape().to_vec(),
            T::one(),
        ));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| self.nodes[i].requires_grad)
                .collect();
            let input_grads = backward(&g, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((&input, need), ig) in node.inputs.iter().zip(&needs).zip(input_grads) {
                let (true, Some(ig)) = (*need, ig) else {
                    continue;
                };
                if !ig.all_finite() {
                    return Err(Error::NonFinite("backward"));
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Gradients produced by [`Tape::backward`]: available for every leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Adds parameter gradients (scaled by `weight`) into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>, weight: T) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                let p = store.get_mut(id);
                for (acc, &v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += weight * v;
                }
            }
        }
    }

    /// Parameters that received a gradient.
    pub fn touched_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> = self
            .params
            .iter()
            .filter(|(_, n)| self.grads[*n].is_some())
            .map(|(id, _)| *id)
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }
}
