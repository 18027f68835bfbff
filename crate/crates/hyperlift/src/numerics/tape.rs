//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its output value, its parent
//! indices, and a backward closure. Insertion order is already a topological
//! order, so the backward sweep is a single reverse pass that visits each
//! node exactly once and accumulates gradients into the parents.

use super::tensor::{NumericsError, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

/// Recorded computation trace. One tape per forward pass; not shareable
/// across concurrent backward sweeps.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    table: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.table[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.table[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count of all matmuls recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an input. Leaves have no backward function; their gradients are
    /// read off the [`Gradients`] table after the sweep.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, parents, _| {
                vec![
                    g.reduce_to_shape(parents[0].shape()).expect("adjoint shape"),
                    g.reduce_to_shape(parents[1].shape()).expect("adjoint shape"),
                ]
            })),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, parents, _| {
                vec![
                    g.reduce_to_shape(parents[0].shape()).expect("adjoint shape"),
                    g.neg().reduce_to_shape(parents[1].shape()).expect("adjoint shape"),
                ]
            })),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, parents, _| {
                let da = g.mul(parents[1]).expect("mul grad");
                let db = g.mul(parents[0]).expect("mul grad");
                vec![
                    da.reduce_to_shape(parents[0].shape()).expect("adjoint shape"),
                    db.reduce_to_shape(parents[1].shape()).expect("adjoint shape"),
                ]
            })),
        ))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).neg();
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, _, _| vec![g.neg()])),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, _| vec![g.scale(c)])),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).add_scalar(c);
        self.push(value, vec![a], Some(Box::new(|g, _, _| vec![g.clone()])))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.macs += self.value(a).matmul_macs(self.value(b))?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, parents, _| {
                let bt = parents[1].transpose_last2().expect("transpose");
                let at = parents[0].transpose_last2().expect("transpose");
                let da = g.matmul(&bt).expect("matmul grad");
                let db = at.matmul(g).expect("matmul grad");
                vec![
                    da.reduce_to_shape(parents[0].shape()).expect("adjoint shape"),
                    db.reduce_to_shape(parents[1].shape()).expect("adjoint shape"),
                ]
            })),
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).relu();
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, parents, _| {
                let mut dx = g.clone();
                for (d, &x) in dx.data_mut().iter_mut().zip(parents[0].data()) {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                }
                vec![dx]
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).exp();
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, _, out| vec![g.mul(out).expect("exp grad")])),
        )
    }

    /// x^(-1/2); gradient is -out^3 / 2.
    pub fn rsqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).rsqrt();
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, _, out| {
                let cube = out.mul(out).and_then(|o2| o2.mul(out)).expect("rsqrt grad");
                vec![g.mul(&cube).expect("rsqrt grad").scale(-0.5)]
            })),
        )
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).clamp_min(floor);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, parents, _| {
                let mut dx = g.clone();
                for (d, &x) in dx.data_mut().iter_mut().zip(parents[0].data()) {
                    if x < floor {
                        *d = 0.0;
                    }
                }
                vec![dx]
            })),
        )
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let widths: Vec<usize> = values
            .iter()
            .map(|t| *t.shape().last().unwrap_or(&1))
            .collect();
        let value = Tensor::concat_last(&values)?;
        Ok(self.push(
            value,
            parts.to_vec(),
            Some(Box::new(move |g, _, _| {
                g.split_last(&widths).expect("concat grad")
            })),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(|g, parents, _| {
                vec![g.reshape(parents[0].shape()).expect("reshape grad")]
            })),
        ))
    }

    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(a).sum_axes(axes)?;
        let axes = axes.to_vec();
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |g, parents, _| {
                let in_shape = parents[0].shape();
                let keep: Vec<usize> = in_shape
                    .iter()
                    .enumerate()
                    .map(|(ax, &d)| if axes.contains(&ax) { 1 } else { d })
                    .collect();
                let spread = g
                    .reshape(&keep)
                    .and_then(|k| k.broadcast_to(in_shape))
                    .expect("sum grad");
                vec![spread]
            })),
        ))
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let count: usize = {
            let shape = self.value(a).shape();
            let mut sorted = axes.to_vec();
            sorted.sort_unstable();
            sorted.dedup();
            sorted.iter().map(|&ax| shape.get(ax).copied().unwrap_or(1)).product()
        };
        let s = self.sum_axes(a, axes)?;
        Ok(self.scale(s, 1.0 / count as f64))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum_all());
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, parents, _| {
                let gv = g.item().expect("scalar grad");
                vec![Tensor::full(parents[0].shape(), gv)]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean squared difference of two equal-shaped values (scalar output).
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every node
    /// that the loss reaches, summing over shared subexpressions.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(NumericsError::NotScalar {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut table: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        table[loss.0] = Some(Tensor::ones(loss_value.shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = table[i].clone() else { continue };
            let node = &self.nodes[i];
            let Some(back) = node.backward.as_ref() else { continue };
            let parent_values: Vec<&Tensor> = node
                .parents
                .iter()
                .map(|p| &self.nodes[p.0].value)
                .collect();
            let parent_grads = back(&g, &parent_values, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                table[p.0] = Some(match table[p.0].take() {
                    Some(acc) => acc.add(&pg)?,
                    None => pg,
                });
            }
        }
        Ok(Gradients { table })
    }
}
