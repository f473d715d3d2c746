use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to a backward rule.
pub struct BackwardCtx<'a, F> {
    pub inputs: Vec<&'a Tensor<F>>,
    pub output: &'a Tensor<F>,
    pub grad: &'a [F],
    pub needs: Vec<bool>,
}

/// Vector-Jacobian product of a recorded operation.
///
/// Returns one entry per input; `None` for inputs whose gradient is not needed.
pub trait Backward<F: Float>: Send {
    fn name(&self) -> &'static str;
    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Vec<Option<Vec<F>>>;
}

struct Node<F: Float> {
    value: Tensor<F>,
    parents: Vec<Var>,
    rule: Option<Box<dyn Backward<F>>>,
    requires_grad: bool,
    leaf: bool,
    retain: bool,
    grad: Option<Vec<F>>,
}

/// Linear record of executed operations.
///
/// Nodes are appended in execution order, so every op's inputs precede it.
/// Leaf gradients accumulate across [`Tape::backward`] calls; gradients of
/// intermediates marked with [`Tape::retain_grad`] hold the most recent pass.
pub struct Tape<F: Float> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            rule: None,
            requires_grad,
            leaf: true,
            retain: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Record the result of an operation. `rule` may be `None` for
    /// non-differentiable outputs.
    pub fn push(&mut self, value: Tensor<F>, parents: &[Var], rule: Box<dyn Backward<F>>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            rule: requires_grad.then_some(rule),
            requires_grad,
            leaf: false,
            retain: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Keep the gradient of an intermediate after backward.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_vec(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn grad_slice(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(rule) = &node.rule {
                let ctx = BackwardCtx {
                    inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                    output: &node.value,
                    grad: &g,
                    needs: node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect(),
                };
                let parent_grads = rule.backward(&ctx);
                debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", rule.name());
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !self.nodes[p.0].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), self.nodes[p.0].value.numel(), "{}", rule.name());
                    match &mut grads[p.0] {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            let node = &mut self.nodes[i];
            if node.leaf {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            } else if node.retain {
                node.grad = Some(g);
            }
        }
        Ok(())
    }
}
