//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every differentiable primitive the training path uses is recorded as one
//! node with at most two parents and eagerly evaluated local partials.
//! [`Tape::backward`] replays the record once in reverse and accumulates
//! ∂loss/∂node for every node, so parameter gradients are read back from the
//! leaf indices. Unreachable leaves keep gradient 0.

use crate::special::{digamma_raw, log_beta_raw, sigmoid_raw, softplus_raw, trigamma_raw};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients {
    grads: Vec<f64>,
}

impl Gradients {
    /// ∂loss/∂v. Zero for nodes the loss does not depend on.
    pub fn wrt(&self, v: Var) -> f64 {
        self.grads[v.0 as usize]
    }

    /// Gradients of the first `n` nodes pushed onto the tape, in push order.
    /// Training code pushes all parameters first, so this is the flat
    /// parameter gradient.
    pub fn leading(&self, n: usize) -> &[f64] {
        &self.grads[..n]
    }
}

/// Record of differentiable primitive applications.
#[derive(Default)]
pub struct Tape {
    values: Vec<f64>,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all nodes but keep allocations for reuse across steps.
    pub fn reset(&mut self) {
        self.values.clear();
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values[v.0 as usize]
    }

    fn push(&mut self, value: f64, parents: [u32; 2], partials: [f64; 2]) -> Var {
        let idx = self.nodes.len() as u32;
        self.values.push(value);
        self.nodes.push(Node { parents, partials });
        Var(idx)
    }

    /// Input node: a parameter or a constant. Gradient flows stop here.
    pub fn leaf(&mut self, value: f64) -> Var {
        let idx = self.nodes.len() as u32;
        self.push(value, [idx, idx], [0.0, 0.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, [a.0, b.0], [1.0, 1.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, [a.0, b.0], [1.0, -1.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        self.push(va * vb, [a.0, b.0], [vb, va])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        self.push(va / vb, [a.0, b.0], [1.0 / vb, -va / (vb * vb)])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(v, [a.0, a.0], [-1.0, 0.0])
    }

    /// a + c for a constant c.
    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, [a.0, a.0], [1.0, 0.0])
    }

    /// c · a for a constant c.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = c * self.value(a);
        self.push(v, [a.0, a.0], [c, 0.0])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.push(v, [a.0, a.0], [v, 0.0])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let va = self.value(a);
        self.push(va.ln(), [a.0, a.0], [1.0 / va, 0.0])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).tanh();
        self.push(t, [a.0, a.0], [1.0 - t * t, 0.0])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let va = self.value(a);
        self.push(softplus_raw(va), [a.0, a.0], [sigmoid_raw(va), 0.0])
    }

    /// ψ(a); requires a > 0, which the Beta construction guarantees.
    pub fn digamma(&mut self, a: Var) -> Var {
        let va = self.value(a);
        self.push(digamma_raw(va), [a.0, a.0], [trigamma_raw(va), 0.0])
    }

    /// ln B(a, b) as a single node with digamma partials.
    pub fn log_beta(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let dsum = digamma_raw(va + vb);
        self.push(
            log_beta_raw(va, vb),
            [a.0, b.0],
            [digamma_raw(va) - dsum, digamma_raw(vb) - dsum],
        )
    }

    /// max(a, b); ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        if va >= vb {
            self.push(va, [a.0, b.0], [1.0, 0.0])
        } else {
            self.push(vb, [a.0, b.0], [0.0, 1.0])
        }
    }

    /// max(a, 0) with zero gradient on the flat branch (including at 0).
    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        if va > 0.0 {
            self.push(va, [a.0, a.0], [1.0, 0.0])
        } else {
            self.push(0.0, [a.0, a.0], [0.0, 0.0])
        }
    }

    /// Clamp to [lo, hi]; unit gradient inside, zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let va = self.value(a);
        if va < lo {
            self.push(lo, [a.0, a.0], [0.0, 0.0])
        } else if va > hi {
            self.push(hi, [a.0, a.0], [0.0, 0.0])
        } else {
            self.push(va, [a.0, a.0], [1.0, 0.0])
        }
    }

    /// Left-to-right sum; empty input becomes a constant 0 leaf.
    pub fn sum(&mut self, terms: &[Var]) -> Var {
        match terms.split_first() {
            None => self.leaf(0.0),
            Some((&first, rest)) => {
                let mut acc = first;
                for &t in rest {
                    acc = self.add(acc, t);
                }
                acc
            }
        }
    }

    /// Reverse accumulation from `loss` (seeded with ∂loss/∂loss = 1).
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads = vec![0.0; self.nodes.len()];
        grads[loss.0 as usize] = 1.0;
        for idx in (0..self.nodes.len()).rev() {
            let g = grads[idx];
            if g == 0.0 {
                continue;
            }
            let node = &self.nodes[idx];
            let p0 = node.parents[0] as usize;
            if p0 != idx {
                grads[p0] += node.partials[0] * g;
            }
            let p1 = node.parents[1] as usize;
            if p1 != idx {
                grads[p1] += node.partials[1] * g;
            }
        }
        Gradients { grads }
    }
}
