use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Vector-Jacobian product of one recorded primitive.
///
/// Implementors own whatever intermediates the rule needs. `needs[i]` tells
/// whether input `i` wants a gradient; entries for inputs that do not may be
/// `None`.
pub trait Backward<S: Real> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        grad: &Tensor<S>,
        inputs: &[&Tensor<S>],
        output: &Tensor<S>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<S>>>;
}

struct Node<S: Real> {
    value: Rc<Tensor<S>>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward<S>>>,
    op_name: &'static str,
    requires_grad: bool,
    param: Option<String>,
}

/// Record of differentiable operations.
///
/// Nodes are appended in evaluation order, so ids are a topological order and
/// backward simply walks them in reverse.
pub struct Tape<S: Real> {
    nodes: RefCell<Vec<Node<S>>>,
    record: bool,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> fmt::Debug for Tape<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("record", &self.record)
            .finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Real> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Real> fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// One tape entry as seen from outside.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub op: &'static str,
    pub inputs: Vec<usize>,
    pub output: usize,
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A tape that evaluates values but keeps no backward rules.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<S>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            op: None,
            op_name: "constant",
            requires_grad: false,
            param: None,
        })
    }

    /// A named leaf whose gradient is reported by [`Tape::backward`].
    ///
    /// Panics if the name is already registered.
    pub fn param(&self, name: &str, value: Tensor<S>) -> Var<'_, S> {
        assert!(
            !self
                .nodes
                .borrow()
                .iter()
                .any(|n| n.param.as_deref() == Some(name)),
            "parameter {name} registered twice"
        );
        self.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            op: None,
            op_name: "param",
            requires_grad: self.record,
            param: Some(name.to_string()),
        })
    }

    /// Appends the result of a primitive.
    pub fn record<'t, B: Backward<S> + 'static>(
        &'t self,
        value: Tensor<S>,
        inputs: &[Var<'t, S>],
        op: B,
    ) -> Var<'t, S> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| {
                debug_assert!(std::ptr::eq(v.tape, self), "mixing tapes");
                nodes[v.id].requires_grad
            })
        };
        let op_name = op.name();
        let keep = self.record && requires_grad;
        self.push(Node {
            value: Rc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            op: if keep { Some(Box::new(op)) } else { None },
            op_name,
            requires_grad: keep,
            param: None,
        })
    }

    pub fn value(&self, v: Var<'_, S>) -> Rc<Tensor<S>> {
        Rc::clone(&self.nodes.borrow()[v.id].value)
    }

    pub fn entries(&self) -> Vec<Entry> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .filter(|(_, n)| !n.inputs.is_empty())
            .map(|(i, n)| Entry {
                op: n.op_name,
                inputs: n.inputs.clone(),
                output: i,
            })
            .collect()
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every registered parameter appears in the result; parameters the loss
    /// does not depend on get zeros of their shape.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if !loss_node.value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(loss_node.value.shape(), S::one())?);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(op) = node.op.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let input_values: Vec<&Tensor<S>> =
                node.inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let input_grads = op.backward(&grad, &input_values, &node.value, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            for ((&input, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                // Edges always point backwards; a forward edge would be a cycle.
                assert!(input < id, "tape is not topologically ordered");
                let Some(g) = g.filter(|_| need) else {
                    continue;
                };
                debug_assert_eq!(g.shape(), nodes[input].value.shape(), "{}", op.name());
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            // Parameters keep their gradient; interior nodes are done.
            grads[id] = None;
        }

        let mut params = BTreeMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                let g = match grads.get_mut(id).and_then(Option::take) {
                    Some(g) => g,
                    None => Tensor::zeros_like(&node.value),
                };
                params.insert(name.clone(), g);
            }
        }
        Ok(Gradients { params })
    }
}

/// Parameter gradients keyed by name, in lexicographic order.
#[derive(Clone, Debug, Default)]
pub struct Gradients<S: Real> {
    params: BTreeMap<String, Tensor<S>>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<S>> {
        self.params
    }

    /// Global L2 norm over all gradients.
    pub fn norm(&self) -> f64 {
        self.params
            .values()
            .map(|t| t.norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

impl<'t, S: Real> Var<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<S>> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}
