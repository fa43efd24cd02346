//! Reverse-mode differentiation.
//!
//! [`Tape`] is a scalar graph: every node holds one `f64`, parents always
//! precede their children, and [`Tape::backward`] sweeps the nodes once in
//! reverse index order. Graphs are recorded symbolically and evaluated with
//! [`Tape::eval`], so the same recording can be re-run for new inputs.
//!
//! [`Jet2`] carries `(u, du/dx_i, d2u/dx_i^2)` for a single input coordinate
//! as three graph nodes, which makes PDE residuals ordinary differentiable
//! expressions. [`batch::BatchTape`] is the matrix-valued counterpart used on
//! the training path.

pub mod batch;
mod jet;

pub use jet::{jet_forward, model_on_tape, model_output, Jet2, JetPolicy, ModelVars};

use crate::activations::Primitive;
use crate::error::{KronError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Input(usize),
    Const(f64),
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddConst(f64),
    Square,
    Sin,
    Cos,
    Tanh,
    Exp,
    /// `g^(order)` of a primitive; its local partial is `g^(order + 1)`.
    Prim(Primitive, u8),
    Sum,
    /// `sum_i a_i b_i` with parents `[a_0..a_n, b_0..b_n]`.
    Dot,
}

/// Scalar computation graph with reverse-mode gradients.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    ops: Vec<Op>,
    parent_start: Vec<usize>,
    parents: Vec<usize>,
    bound: Vec<Option<f64>>,
    values: Vec<f64>,
    partials: Vec<f64>,
    evaluated: bool,
}

/// Adjoints of every node after a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<f64>,
    input_nodes: Vec<usize>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> f64 {
        self.adjoints[v.0]
    }

    /// Gradient per input slot, in slot order.
    pub fn inputs(&self) -> Vec<f64> {
        self.input_nodes.iter().map(|&i| self.adjoints[i]).collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn num_inputs(&self) -> usize {
        self.bound.len()
    }

    /// Drops every node; the tape can be reused for a new recording.
    pub fn clear(&mut self) {
        self.ops.clear();
        self.parent_start.clear();
        self.parents.clear();
        self.bound.clear();
        self.values.clear();
        self.partials.clear();
        self.evaluated = false;
    }

    fn push(&mut self, op: Op, parents: &[usize]) -> Var {
        debug_assert!(parents.iter().all(|&p| p < self.ops.len()));
        self.ops.push(op);
        self.parent_start.push(self.parents.len());
        self.parents.extend_from_slice(parents);
        self.evaluated = false;
        Var(self.ops.len() - 1)
    }

    /// New unbound input slot.
    pub fn input(&mut self) -> Var {
        let slot = self.bound.len();
        self.bound.push(None);
        self.push(Op::Input(slot), &[])
    }

    /// New input slot bound to `value`.
    pub fn var(&mut self, value: f64) -> Var {
        let v = self.input();
        let slot = self.bound.len() - 1;
        self.bound[slot] = Some(value);
        v
    }

    pub fn bind(&mut self, slot: usize, value: f64) -> Result<()> {
        let n = self.bound.len();
        let b = self
            .bound
            .get_mut(slot)
            .ok_or(KronError::NodeOutOfRange { index: slot, len: n })?;
        *b = Some(value);
        self.evaluated = false;
        Ok(())
    }

    pub fn constant(&mut self, c: f64) -> Var {
        self.push(Op::Const(c), &[])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add, &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub, &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul, &[a.0, b.0])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Div, &[a.0, b.0])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.push(Op::Neg, &[a.0])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Scale(c), &[a.0])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::AddConst(c), &[a.0])
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.push(Op::Square, &[a.0])
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.push(Op::Sin, &[a.0])
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.push(Op::Cos, &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh, &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp, &[a.0])
    }

    /// `g^(order)(a)` for `order <= 2`.
    pub fn prim(&mut self, p: Primitive, order: u8, a: Var) -> Var {
        assert!(order <= 2, "primitive derivatives are available up to order 3");
        self.push(Op::Prim(p, order), &[a.0])
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        if xs.is_empty() {
            return self.constant(0.0);
        }
        let idx: Vec<usize> = xs.iter().map(|v| v.0).collect();
        self.push(Op::Sum, &idx)
    }

    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        assert_eq!(a.len(), b.len(), "dot operands differ in length");
        if a.is_empty() {
            return self.constant(0.0);
        }
        let idx: Vec<usize> = a.iter().chain(b).map(|v| v.0).collect();
        self.push(Op::Dot, &idx)
    }

    fn parents_of(&self, i: usize) -> &[usize] {
        let start = self.parent_start[i];
        let end = self
            .parent_start
            .get(i + 1)
            .copied()
            .unwrap_or(self.parents.len());
        &self.parents[start..end]
    }

    /// Binds every input slot, in order, and evaluates the graph.
    pub fn eval_with(&mut self, inputs: &[f64]) -> Result<Vec<f64>> {
        if inputs.len() > self.bound.len() {
            return Err(KronError::DimensionMismatch {
                context: "tape inputs",
                expected: self.bound.len(),
                got: inputs.len(),
            });
        }
        for (b, &x) in self.bound.iter_mut().zip(inputs) {
            *b = Some(x);
        }
        self.eval()?;
        Ok(self.values.clone())
    }

    /// Evaluates every node from the currently bound inputs.
    pub fn eval(&mut self) -> Result<()> {
        if let Some(slot) = self.bound.iter().position(Option::is_none) {
            return Err(KronError::UnboundInput { slot });
        }
        let n = self.ops.len();
        self.values.clear();
        self.values.resize(n, 0.0);
        self.partials.clear();
        self.partials.resize(self.parents.len(), 0.0);
        for i in 0..n {
            let start = self.parent_start[i];
            let end = self
                .parent_start
                .get(i + 1)
                .copied()
                .unwrap_or(self.parents.len());
            let ps = &self.parents[start..end];
            let vals = &self.values;
            let part = &mut self.partials[start..end];
            let a = ps.first().map(|&p| vals[p]).unwrap_or(0.0);
            let b = ps.get(1).map(|&p| vals[p]).unwrap_or(0.0);
            let value = match self.ops[i] {
                Op::Input(slot) => self.bound[slot].unwrap_or(f64::NAN),
                Op::Const(c) => c,
                Op::Add => {
                    part[0] = 1.0;
                    part[1] = 1.0;
                    a + b
                }
                Op::Sub => {
                    part[0] = 1.0;
                    part[1] = -1.0;
                    a - b
                }
                Op::Mul => {
                    part[0] = b;
                    part[1] = a;
                    a * b
                }
                Op::Div => {
                    part[0] = 1.0 / b;
                    part[1] = -a / (b * b);
                    a / b
                }
                Op::Neg => {
                    part[0] = -1.0;
                    -a
                }
                Op::Scale(c) => {
                    part[0] = c;
                    c * a
                }
                Op::AddConst(c) => {
                    part[0] = 1.0;
                    a + c
                }
                Op::Square => {
                    part[0] = 2.0 * a;
                    a * a
                }
                Op::Sin => {
                    let (s, c) = a.sin_cos();
                    part[0] = c;
                    s
                }
                Op::Cos => {
                    let (s, c) = a.sin_cos();
                    part[0] = -s;
                    c
                }
                Op::Tanh => {
                    let t = a.tanh();
                    part[0] = 1.0 - t * t;
                    t
                }
                Op::Exp => {
                    let e = a.exp();
                    part[0] = e;
                    e
                }
                Op::Prim(p, order) => {
                    let d = p.derivs(a);
                    part[0] = d[order as usize + 1];
                    d[order as usize]
                }
                Op::Sum => {
                    part.fill(1.0);
                    ps.iter().map(|&p| vals[p]).sum()
                }
                Op::Dot => {
                    let h = ps.len() / 2;
                    let mut acc = 0.0;
                    for t in 0..h {
                        let x = vals[ps[t]];
                        let y = vals[ps[h + t]];
                        part[t] = y;
                        part[h + t] = x;
                        acc += x * y;
                    }
                    acc
                }
            };
            self.values[i] = value;
        }
        self.evaluated = true;
        Ok(())
    }

    pub fn value(&self, v: Var) -> Result<f64> {
        if !self.evaluated {
            return Err(KronError::NotEvaluated);
        }
        self.values
            .get(v.0)
            .copied()
            .ok_or(KronError::NodeOutOfRange {
                index: v.0,
                len: self.values.len(),
            })
    }

    /// Reverse sweep from `output`; every node is visited once.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if output.0 >= self.ops.len() {
            return Err(KronError::NodeOutOfRange {
                index: output.0,
                len: self.ops.len(),
            });
        }
        if !self.evaluated {
            return Err(KronError::NotEvaluated);
        }
        let mut adj = vec![0.0; self.ops.len()];
        adj[output.0] = 1.0;
        for i in (0..=output.0).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let start = self.parent_start[i];
            for (off, &p) in self.parents_of(i).iter().enumerate() {
                adj[p] += g * self.partials[start + off];
            }
        }
        let input_nodes = self
            .ops
            .iter()
            .enumerate()
            .filter_map(|(i, op)| matches!(op, Op::Input(_)).then_some(i))
            .collect();
        Ok(Gradients {
            adjoints: adj,
            input_nodes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_and_its_gradient() {
        let mut t = Tape::new();
        let x = t.input();
        let y = t.input();
        let z = t.mul(x, y);
        let vals = t.eval_with(&[2.0, 3.0]).unwrap();
        assert_eq!(vals[z.0], 6.0);
        let g = t.backward(z).unwrap();
        assert_eq!(g.inputs(), vec![3.0, 2.0]);
    }

    #[test]
    fn sine_at_zero() {
        let mut t = Tape::new();
        let x = t.var(0.0);
        let s = t.sin(x);
        t.eval().unwrap();
        assert_eq!(t.value(s).unwrap(), 0.0);
        assert_eq!(t.backward(s).unwrap().wrt(x), 1.0);
    }

    #[test]
    fn one_neuron_tanh_net_at_origin() {
        let mut t = Tape::new();
        let c = t.var(1.0);
        let w = t.var(1.0);
        let b = t.var(0.0);
        let x = t.constant(0.0);
        let pre = t.mul(w, x);
        let pre = t.add(pre, b);
        let act = t.tanh(pre);
        let u = t.mul(c, act);
        t.eval().unwrap();
        assert_eq!(t.value(u).unwrap(), 0.0);
    }

    #[test]
    fn unbound_slot_is_named() {
        let mut t = Tape::new();
        let _a = t.var(1.0);
        let _b = t.input();
        match t.eval() {
            Err(KronError::UnboundInput { slot }) => assert_eq!(slot, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn backward_rejects_out_of_range_output() {
        let mut t = Tape::new();
        let _ = t.var(1.0);
        t.eval().unwrap();
        assert!(matches!(
            t.backward(Var(5)),
            Err(KronError::NodeOutOfRange { .. })
        ));
    }

    #[test]
    fn evaluation_is_bit_reproducible() {
        let mut t = Tape::new();
        let xs: Vec<Var> = (0..5).map(|_| t.input()).collect();
        let s: Vec<Var> = xs.iter().map(|&x| t.tanh(x)).collect();
        let d = t.dot(&xs, &s);
        let out = t.exp(d);
        let inputs = [0.1, -0.7, 1.3, 0.2, -2.2];
        let a = t.eval_with(&inputs).unwrap();
        let b = t.eval_with(&inputs).unwrap();
        assert_eq!(a[out.0].to_bits(), b[out.0].to_bits());
    }

    #[test]
    fn each_op_matches_finite_differences() {
        type Build = fn(&mut Tape, Var, Var) -> Var;
        let builds: Vec<(&str, Build)> = vec![
            ("add", |t, a, b| t.add(a, b)),
            ("sub", |t, a, b| t.sub(a, b)),
            ("mul", |t, a, b| t.mul(a, b)),
            ("div", |t, a, b| t.div(a, b)),
            ("neg", |t, a, _| t.neg(a)),
            ("scale", |t, a, _| t.scale(a, -2.5)),
            ("addc", |t, a, _| t.add_const(a, 4.0)),
            ("square", |t, a, _| t.square(a)),
            ("sin", |t, a, _| t.sin(a)),
            ("cos", |t, a, _| t.cos(a)),
            ("tanh", |t, a, _| t.tanh(a)),
            ("exp", |t, a, _| t.exp(a)),
            ("prim", |t, a, _| t.prim(Primitive::Swish, 2, a)),
            ("sum", |t, a, b| t.sum(&[a, b, a])),
            ("dot", |t, a, b| t.dot(&[a, b], &[b, b])),
        ];
        let point = [0.63, -1.21];
        let h = 1e-5;
        for (name, build) in builds {
            let mut t = Tape::new();
            let a = t.input();
            let b = t.input();
            let out = build(&mut t, a, b);
            t.eval_with(&point).unwrap();
            let g = t.backward(out).unwrap().inputs();
            for i in 0..2 {
                let mut hi = point;
                hi[i] += h;
                let mut lo = point;
                lo[i] -= h;
                let fh = t.eval_with(&hi).unwrap()[out.0];
                let fl = t.eval_with(&lo).unwrap()[out.0];
                let num = (fh - fl) / (2.0 * h);
                let err = (num - g[i]).abs() / g[i].abs().max(1.0);
                assert!(err < 1e-6, "{name} input {i}: {num} vs {}", g[i]);
            }
        }
    }
}
