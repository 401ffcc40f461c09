// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;
use std::sync::Arc;

use super::{Autograd, Inner, ParamId, Storage, Tensor};
use crate::error::{Error, Result};

/// Recorded primitive applications reachable from a loss, in topological
/// order: every input of node `i` is a leaf or a node `j < i`.
pub struct Tape {
    nodes: Vec<Tensor>,
}

fn key(t: &Tensor) -> *const Inner {
    Arc::as_ptr(&t.0)
}

impl Tape {
    /// Linearise the graph that produced `loss`.
    pub fn record(loss: &Tensor) -> Result<Tape> {
        if !matches!(loss.0.autograd, Autograd::Node { .. }) {
            return Err(Error::NoTape);
        }
        let mut order = Vec::new();
        let mut visited: HashMap<*const Inner, ()> = HashMap::new();
        // Iterative post-order DFS; deep graphs would overflow a recursive walk.
        let mut stack: Vec<(Tensor, bool)> = vec![(loss.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if visited.insert(key(&t), ()).is_some() {
                continue;
            }
            if let Autograd::Node { inputs, .. } = &t.0.autograd {
                stack.push((t.clone(), true));
                for input in inputs.iter().rev() {
                    if matches!(input.0.autograd, Autograd::Node { .. }) && !visited.contains_key(&key(input)) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        Ok(Tape { nodes: order })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of recorded primitives in tape order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .map(|t| match &t.0.autograd {
                Autograd::Node { op, .. } => op.name(),
                _ => "leaf",
            })
            .collect()
    }

    pub fn is_topologically_ordered(&self) -> bool {
        let pos: HashMap<*const Inner, usize> =
            self.nodes.iter().enumerate().map(|(i, t)| (key(t), i)).collect();
        self.nodes.iter().enumerate().all(|(i, t)| match &t.0.autograd {
            Autograd::Node { inputs, .. } => inputs.iter().all(|inp| match pos.get(&key(inp)) {
                Some(&j) => j < i,
                None => !matches!(inp.0.autograd, Autograd::Node { .. }),
            }),
            _ => true,
        })
    }

    /// Reverse sweep seeded with d(loss)/d(loss) = 1.
    pub fn backward(&self) -> Result<Gradients> {
        let loss = self.nodes.last().ok_or(Error::NoTape)?;
        if loss.numel() != 1 {
            return Err(Error::NotScalar(loss.shape().to_vec()));
        }
        let mut pending: HashMap<*const Inner, Storage> = HashMap::new();
        pending.insert(key(loss), Storage::from_f64(loss.dtype(), &[1.0]));
        let mut leaves: HashMap<ParamId, (Tensor, Storage)> = HashMap::new();
        for node in self.nodes.iter().rev() {
            let Some(g) = pending.remove(&key(node)) else {
                continue;
            };
            let Autograd::Node { op, inputs } = &node.0.autograd else {
                continue;
            };
            let grads = op.backward(node, &g, inputs)?;
            for (input, grad) in inputs.iter().zip(grads) {
                let Some(grad) = grad else { continue };
                match &input.0.autograd {
                    Autograd::Constant => {}
                    Autograd::Leaf(id) => match leaves.get_mut(id) {
                        Some((_, acc)) => acc.accumulate(&grad),
                        None => {
                            leaves.insert(*id, (input.clone(), grad));
                        }
                    },
                    Autograd::Node { .. } => match pending.get_mut(&key(input)) {
                        Some(acc) => acc.accumulate(&grad),
                        None => {
                            pending.insert(key(input), grad);
                        }
                    },
                }
            }
        }
        let grads = leaves
            .into_iter()
            .map(|(id, (leaf, g))| (id, Tensor::raw(leaf.shape().to_vec(), g, Autograd::Constant)))
            .collect();
        Ok(Gradients { grads })
    }
}

/// Backpropagate from a scalar loss.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    if loss.numel() != 1 {
        return Err(Error::NotScalar(loss.shape().to_vec()));
    }
    Tape::record(loss)?.backward()
}

/// Gradients of every trainable leaf reachable from a loss.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, param: &Tensor) -> Option<&Tensor> {
        param.param_id().and_then(|id| self.grads.get(&id))
    }

    pub fn by_id(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    /// Gradient of a trainable leaf, zero if the loss does not reach it.
    pub fn get_or_zero(&self, param: &Tensor) -> Tensor {
        self.get(param)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(param.shape(), param.dtype()))
    }

    pub fn contains(&self, param: &Tensor) -> bool {
        self.get(param).is_some()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
