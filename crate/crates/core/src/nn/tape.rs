//! Reverse-mode tape.
//!
//! Scalar glue (density transform, compositing, losses) is recorded one node
//! at a time. Whole-network evaluations are recorded as opaque blocks whose
//! outputs are leaves on the tape; during the reverse sweep a block's
//! backward runs once every node that consumes its outputs has been visited.

use std::fmt;

/// Handle to a scalar recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) u32);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.0)
    }
}

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

impl Node {
    const LEAF: Node = Node {
        parents: [NONE, NONE],
        partials: [0.0, 0.0],
    };
}

/// Backward rule of a multi-input, multi-output recorded operation.
pub trait BlockOp: Send + Sync {
    /// `out_adj` holds the adjoints of the block's outputs in creation order.
    /// Parameter gradients are accumulated into `param_grad` (aligned with the
    /// full parameter vector); input adjoints are reported through `input_adj`.
    fn backward(&self, out_adj: &[f64], params: &[f64], param_grad: &mut [f64], input_adj: &mut dyn FnMut(Var, f64));
}

struct BlockEntry {
    out_start: u32,
    out_end: u32,
    op: Box<dyn BlockOp>,
}

/// Recorded computation. Also serves as the differentiation context of the
/// network API.
#[derive(Default)]
pub struct Tape {
    values: Vec<f64>,
    nodes: Vec<Node>,
    param_leaves: Vec<(u32, usize)>,
    blocks: Vec<BlockEntry>,
}

pub type DiffContext = Tape;

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

    pub fn clear(&mut self) {
        self.values.clear();
        self.nodes.clear();
        self.param_leaves.clear();
        self.blocks.clear();
    }

    #[inline]
    pub fn value(&self, v: Var) -> f64 {
        self.values[v.index()]
    }

    #[inline]
    fn push(&mut self, value: f64, node: Node) -> Var {
        let id = self.nodes.len() as u32;
        self.values.push(value);
        self.nodes.push(node);
        Var(id)
    }

    #[inline]
    pub fn constant(&mut self, value: f64) -> Var {
        self.push(value, Node::LEAF)
    }

    /// Leaf bound to entry `index` of the parameter vector.
    pub fn param(&mut self, params: &[f64], index: usize) -> Var {
        let v = self.push(params[index], Node::LEAF);
        self.param_leaves.push((v.0, index));
        v
    }

    #[inline]
    pub fn unary(&mut self, a: Var, value: f64, da: f64) -> Var {
        self.push(
            value,
            Node {
                parents: [a.0, NONE],
                partials: [da, 0.0],
            },
        )
    }

    #[inline]
    pub fn binary(&mut self, a: Var, b: Var, value: f64, da: f64, db: f64) -> Var {
        self.push(
            value,
            Node {
                parents: [a.0, b.0],
                partials: [da, db],
            },
        )
    }

    #[inline]
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.binary(a, b, v, 1.0, 1.0)
    }

    #[inline]
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.binary(a, b, v, 1.0, -1.0)
    }

    #[inline]
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.binary(a, b, x * y, y, x)
    }

    #[inline]
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.binary(a, b, x / y, 1.0 / y, -x / (y * y))
    }

    #[inline]
    pub fn neg(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.unary(a, -x, -1.0)
    }

    #[inline]
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        self.unary(a, c * x, c)
    }

    #[inline]
    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        self.unary(a, x + c, 1.0)
    }

    #[inline]
    pub fn exp(&mut self, a: Var) -> Var {
        let e = self.value(a).exp();
        self.unary(a, e, e)
    }

    #[inline]
    pub fn ln(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.unary(a, x.ln(), 1.0 / x)
    }

    #[inline]
    pub fn sqrt(&mut self, a: Var) -> Var {
        let s = self.value(a).sqrt();
        self.unary(a, s, 0.5 / s)
    }

    #[inline]
    pub fn square(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.unary(a, x * x, 2.0 * x)
    }

    /// `|a|` with subgradient 0 at the kink.
    #[inline]
    pub fn abs(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.unary(a, x.abs(), sign(x))
    }

    #[inline]
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let s = sigmoid(self.value(a));
        self.unary(a, s, s * (1.0 - s))
    }

    /// Clamp to `[lo, hi]`; zero gradient outside.
    #[inline]
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let x = self.value(a);
        if x < lo {
            self.unary(a, lo, 0.0)
        } else if x > hi {
            self.unary(a, hi, 0.0)
        } else {
            self.unary(a, x, 1.0)
        }
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        match xs {
            [] => self.constant(0.0),
            [first, rest @ ..] => rest.iter().fold(*first, |acc, &x| self.add(acc, x)),
        }
    }

    pub fn dot3(&mut self, a: [Var; 3], b: [Var; 3]) -> Var {
        let p: Vec<Var> = (0..3).map(|i| self.mul(a[i], b[i])).collect();
        self.sum(&p)
    }

    pub fn norm3(&mut self, a: [Var; 3]) -> Var {
        let sq = self.dot3(a, a);
        self.sqrt(sq)
    }

    /// Appends `values.len()` leaves owned by `op` and returns the first one.
    pub fn push_block(&mut self, values: &[f64], op: Box<dyn BlockOp>) -> Var {
        let start = self.nodes.len() as u32;
        self.values.extend_from_slice(values);
        self.nodes.extend(std::iter::repeat_n(Node::LEAF, values.len()));
        self.blocks.push(BlockEntry {
            out_start: start,
            out_end: self.nodes.len() as u32,
            op,
        });
        Var(start)
    }

    /// Adjoints of every recorded node with respect to `loss`, and the
    /// gradient of `loss` with respect to the parameter vector.
    pub fn backward_full(&self, loss: Var, params: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut adj = vec![0.0; self.nodes.len()];
        let mut grad = vec![0.0; params.len()];
        adj[loss.index()] = 1.0;
        let mut end = self.nodes.len();
        for block in self.blocks.iter().rev() {
            self.sweep(&mut adj, block.out_end as usize, end);
            let (start, stop) = (block.out_start as usize, block.out_end as usize);
            let out_adj = adj[start..stop].to_vec();
            if out_adj.iter().any(|&a| a != 0.0) {
                block.op.backward(&out_adj, params, &mut grad, &mut |v, a| adj[v.index()] += a);
            }
            end = start;
        }
        self.sweep(&mut adj, 0, end);
        for &(node, index) in &self.param_leaves {
            grad[index] += adj[node as usize];
        }
        (adj, grad)
    }

    /// Gradient of `loss` with respect to the parameter vector.
    pub fn backward(&self, loss: Var, params: &[f64]) -> Vec<f64> {
        self.backward_full(loss, params).1
    }

    fn sweep(&self, adj: &mut [f64], lo: usize, hi: usize) {
        for i in (lo..hi).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = &self.nodes[i];
            for k in 0..2 {
                let p = node.parents[k];
                if p != NONE {
                    adj[p as usize] += a * node.partials[k];
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let params = vec![0.3, -1.0, 2.5, 4.0];
        let mut tape = Tape::new();
        let vars: Vec<Var> = (0..params.len()).map(|i| tape.param(&params, i)).collect();
        let loss = tape.sum(&vars);
        assert_eq!(tape.value(loss), 5.8);
        assert_eq!(tape.backward(loss, &params), vec![1.0; 4]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let params = vec![1.0, 2.0];
        let mut tape = Tape::new();
        let _ = tape.param(&params, 0);
        let loss = tape.constant(0.0);
        assert_eq!(tape.backward(loss, &params), vec![0.0, 0.0]);
    }

    #[test]
    fn elementary_ops_match_finite_differences() {
        let f = |p: &[f64], tape: &mut Tape| {
            let a = tape.param(p, 0);
            let b = tape.param(p, 1);
            let ab = tape.mul(a, b);
            let e = tape.exp(ab);
            let s = tape.sigmoid(b);
            let q = tape.div(e, s);
            let l = tape.ln(q);
            let r = tape.sqrt(l);
            let sq = tape.square(a);
            let d = tape.sub(r, sq);
            tape.abs(d)
        };
        let p = vec![0.7, 1.3];
        let mut tape = Tape::new();
        let loss = f(&p, &mut tape);
        let g = tape.backward(loss, &p);
        for i in 0..2 {
            let h = 1e-6;
            let mut pp = p.clone();
            pp[i] += h;
            let mut t1 = Tape::new();
            let lp = f(&pp, &mut t1);
            pp[i] -= 2.0 * h;
            let mut t2 = Tape::new();
            let lm = f(&pp, &mut t2);
            let fd = (t1.value(lp) - t2.value(lm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "param {i}: fd {fd} vs {}", g[i]);
        }
    }

    struct Doubler {
        inputs: Vec<Var>,
    }

    impl BlockOp for Doubler {
        fn backward(&self, out_adj: &[f64], _: &[f64], _: &mut [f64], input_adj: &mut dyn FnMut(Var, f64)) {
            for (v, a) in self.inputs.iter().zip(out_adj) {
                input_adj(*v, 2.0 * a);
            }
        }
    }

    #[test]
    fn blocks_chain_into_scalar_nodes() {
        let params = vec![1.5, -0.5];
        let mut tape = Tape::new();
        let a = tape.param(&params, 0);
        let b = tape.param(&params, 1);
        let sq = tape.square(a);
        let vals = [2.0 * tape.value(sq), 2.0 * tape.value(b)];
        let first = tape.push_block(&vals, Box::new(Doubler { inputs: vec![sq, b] }));
        let second = Var(first.0 + 1);
        let loss = tape.mul(first, second);
        // loss = (2 a^2)(2 b) = 4 a^2 b
        assert!((tape.value(loss) - 4.0 * 1.5 * 1.5 * -0.5).abs() < 1e-15);
        let g = tape.backward(loss, &params);
        assert!((g[0] - 8.0 * 1.5 * -0.5).abs() < 1e-12);
        assert!((g[1] - 4.0 * 1.5 * 1.5).abs() < 1e-12);
    }
}
