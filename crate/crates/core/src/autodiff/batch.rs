//! Matrix-valued reverse-mode tape.
//!
//! Nodes hold dense `rows x cols` matrices (rows are samples, columns are
//! neurons) and are evaluated eagerly as they are recorded. The op set is
//! deliberately small: dense products, broadcasts, elementwise arithmetic,
//! reductions and one fused adaptive-activation op that produces
//! `g_j(z) = sum_k alpha_k omega_k^j phi_k^(j)(omega_k z)` for `j <= 2`.
//! Second-order jets of a network are compositions of these ops, so their
//! parameter gradients come out of the same backward sweep.

use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};

use crate::activations::ActivationFamily;

/// Handle to a node on a [`BatchTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum BOp {
    Leaf,
    MatMulT { x: usize, w: usize },
    AddRow { x: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Square { a: usize },
    Adaptive { z: usize, alpha: usize, omega: usize, order: usize, cache: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    BceLogits { logits: usize, labels: Arc<Array2<f64>> },
}

/// Activation values shared by the adaptive nodes built on the same
/// pre-activation.
#[derive(Debug)]
struct ActCache {
    /// `g_j(z)` for `j < stride`.
    combined: Vec<Array2<f64>>,
    /// `phi_k^(j)(omega_k z)` indexed `k * stride + j`; empty when neither
    /// `alpha` nor `omega` is trainable.
    terms: Vec<Array2<f64>>,
    stride: usize,
}

#[derive(Debug, Default)]
pub struct BatchTape {
    ops: Vec<BOp>,
    values: Vec<Array2<f64>>,
    needs_grad: Vec<bool>,
    caches: Vec<ActCache>,
}

impl BatchTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn clear(&mut self) {
        self.ops.clear();
        self.values.clear();
        self.needs_grad.clear();
        self.caches.clear();
    }

    fn push(&mut self, op: BOp, value: Array2<f64>, needs_grad: bool) -> NodeId {
        self.ops.push(op);
        self.values.push(value);
        self.needs_grad.push(needs_grad);
        NodeId(self.ops.len() - 1)
    }

    pub fn value(&self, n: NodeId) -> &Array2<f64> {
        &self.values[n.0]
    }

    pub fn scalar(&self, n: NodeId) -> f64 {
        self.values[n.0][[0, 0]]
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> NodeId {
        self.push(BOp::Leaf, value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(BOp::Leaf, value, false)
    }

    fn ng(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.needs_grad[i])
    }

    /// `x * w^T` for `x: B x in`, `w: out x in`.
    pub fn matmul_t(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let v = self.values[x.0].dot(&self.values[w.0].t());
        let ng = self.ng(&[x.0, w.0]);
        self.push(BOp::MatMulT { x: x.0, w: w.0 }, v, ng)
    }

    /// Adds the `1 x n` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let v = &self.values[x.0] + &self.values[b.0];
        let ng = self.ng(&[x.0, b.0]);
        self.push(BOp::AddRow { x: x.0, b: b.0 }, v, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.values[a.0] + &self.values[b.0];
        let ng = self.ng(&[a.0, b.0]);
        self.push(BOp::Add { a: a.0, b: b.0 }, v, ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.values[a.0] - &self.values[b.0];
        let ng = self.ng(&[a.0, b.0]);
        self.push(BOp::Sub { a: a.0, b: b.0 }, v, ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.values[a.0] * &self.values[b.0];
        let ng = self.ng(&[a.0, b.0]);
        self.push(BOp::Mul { a: a.0, b: b.0 }, v, ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.values[a.0] * c;
        let ng = self.ng(&[a.0]);
        self.push(BOp::Scale { a: a.0, c }, v, ng)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].mapv(|x| x * x);
        let ng = self.ng(&[a.0]);
        self.push(BOp::Square { a: a.0 }, v, ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.values[a.0].sum();
        let ng = self.ng(&[a.0]);
        self.push(BOp::SumAll { a: a.0 }, Array2::from_elem((1, 1), s), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let s = self.values[a.0].mean().unwrap_or(0.0);
        let ng = self.ng(&[a.0]);
        self.push(BOp::MeanAll { a: a.0 }, Array2::from_elem((1, 1), s), ng)
    }

    /// Mean binary cross-entropy of sigmoid(logits) against 0/1 labels.
    pub fn bce_logits(&mut self, logits: NodeId, labels: Arc<Array2<f64>>) -> NodeId {
        let l = &self.values[logits.0];
        let mut acc = 0.0;
        Zip::from(l).and(&*labels).for_each(|&x, &y| {
            acc += x.max(0.0) + (-x.abs()).exp().ln_1p() - y * x;
        });
        let v = acc / l.len().max(1) as f64;
        let ng = self.ng(&[logits.0]);
        self.push(
            BOp::BceLogits {
                logits: logits.0,
                labels,
            },
            Array2::from_elem((1, 1), v),
            ng,
        )
    }

    /// Precomputes `g_j(z)` for `j <= max_order + 1` (the extra order feeds
    /// the backward sweep) and, when `alpha` or `omega` is trainable, the
    /// per-slot derivatives their gradients need. Returns a cache handle for
    /// [`BatchTape::adaptive`].
    pub fn activation_cache(
        &mut self,
        family: &ActivationFamily,
        z: NodeId,
        alpha: NodeId,
        omega: NodeId,
        max_order: usize,
    ) -> usize {
        assert!(max_order <= 2, "jets stop at second order");
        let zv = &self.values[z.0];
        let al = &self.values[alpha.0];
        let om = &self.values[omega.0];
        let k = family.k();
        let stride = max_order + 2;
        let len = zv.len();
        let keep_slots = self.needs_grad[alpha.0] || self.needs_grad[omega.0];
        // coef[s][j] = alpha_s omega_s^j
        let coef: Vec<[f64; 4]> = (0..k)
            .map(|s| {
                let (a, w) = (al[[0, s]], om[[0, s]]);
                [a, a * w, a * w * w, a * w * w * w]
            })
            .collect();
        let xs: Vec<f64> = zv.iter().copied().collect();
        let mut combined = vec![vec![0.0; len]; stride];
        let mut slots = Vec::with_capacity(if keep_slots { stride * k } else { 0 });
        let mut d = vec![[0.0; 4]; len];
        for (s, c) in coef.iter().enumerate() {
            if !keep_slots && c[0] == 0.0 {
                continue;
            }
            let w = om[[0, s]];
            for (di, &x) in d.iter_mut().zip(&xs) {
                *di = family.slot_derivs(s, w, x);
            }
            for (j, comb) in combined.iter_mut().enumerate() {
                let cj = c[j];
                for (o, di) in comb.iter_mut().zip(&d) {
                    *o += cj * di[j];
                }
                if keep_slots {
                    slots.push(d.iter().map(|di| di[j]).collect::<Vec<f64>>());
                }
            }
        }
        let shape = |v: Vec<f64>| Array2::from_shape_vec(zv.raw_dim(), v).expect("cache shape");
        let combined = combined.into_iter().map(shape).collect();
        let terms = slots.into_iter().map(shape).collect();
        self.caches.push(ActCache {
            combined,
            terms,
            stride,
        });
        self.caches.len() - 1
    }

    /// `g_j(z)` from a cache built on the same `z`, `alpha` and `omega`;
    /// `alpha` and `omega` are `1 x K` nodes.
    pub fn adaptive(
        &mut self,
        z: NodeId,
        alpha: NodeId,
        omega: NodeId,
        order: usize,
        cache: usize,
    ) -> NodeId {
        let c = &self.caches[cache];
        assert!(order + 2 <= c.stride, "cache was built for lower orders");
        let v = c.combined[order].clone();
        let ng = self.ng(&[z.0, alpha.0, omega.0]);
        self.push(
            BOp::Adaptive {
                z: z.0,
                alpha: alpha.0,
                omega: omega.0,
                order,
                cache,
            },
            v,
            ng,
        )
    }

    /// Reverse sweep from a `1 x 1` output. Returns the gradient of every
    /// node that needs one (leaves included); others are `None`.
    pub fn backward(&self, output: NodeId) -> Vec<Option<Array2<f64>>> {
        let n = self.ops.len();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        grads[output.0] = Some(Array2::ones(self.values[output.0].raw_dim()));
        for i in (0..=output.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                BOp::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                BOp::MatMulT { x, w } => {
                    if self.needs_grad[*x] {
                        accumulate(&mut grads, *x, g.dot(&self.values[*w]));
                    }
                    if self.needs_grad[*w] {
                        accumulate(&mut grads, *w, g.t().dot(&self.values[*x]));
                    }
                }
                BOp::AddRow { x, b } => {
                    if self.needs_grad[*b] {
                        accumulate(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs_grad[*x] {
                        accumulate(&mut grads, *x, g);
                    }
                }
                BOp::Add { a, b } => {
                    if self.needs_grad[*a] {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs_grad[*b] {
                        accumulate(&mut grads, *b, g);
                    }
                }
                BOp::Sub { a, b } => {
                    if self.needs_grad[*b] {
                        accumulate(&mut grads, *b, -&g);
                    }
                    if self.needs_grad[*a] {
                        accumulate(&mut grads, *a, g);
                    }
                }
                BOp::Mul { a, b } => {
                    if self.needs_grad[*a] {
                        accumulate(&mut grads, *a, &g * &self.values[*b]);
                    }
                    if self.needs_grad[*b] {
                        accumulate(&mut grads, *b, &g * &self.values[*a]);
                    }
                }
                BOp::Scale { a, c } => accumulate(&mut grads, *a, g * *c),
                BOp::Square { a } => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&self.values[*a])
                        .for_each(|d, &x| *d *= 2.0 * x);
                    accumulate(&mut grads, *a, d);
                }
                BOp::SumAll { a } => {
                    let s = g[[0, 0]];
                    accumulate(
                        &mut grads,
                        *a,
                        Array2::from_elem(self.values[*a].raw_dim(), s),
                    );
                }
                BOp::MeanAll { a } => {
                    let s = g[[0, 0]] / self.values[*a].len().max(1) as f64;
                    accumulate(
                        &mut grads,
                        *a,
                        Array2::from_elem(self.values[*a].raw_dim(), s),
                    );
                }
                BOp::BceLogits { logits, labels } => {
                    let s = g[[0, 0]] / labels.len().max(1) as f64;
                    let mut d = Array2::zeros(self.values[*logits].raw_dim());
                    Zip::from(&mut d)
                        .and(&self.values[*logits])
                        .and(&**labels)
                        .for_each(|d, &x, &y| *d = s * (sigmoid(x) - y));
                    accumulate(&mut grads, *logits, d);
                }
                BOp::Adaptive {
                    z,
                    alpha,
                    omega,
                    order,
                    cache,
                } => self.adaptive_backward(&mut grads, &g, *z, *alpha, *omega, *order, *cache),
            }
        }
        grads
    }

    #[allow(clippy::too_many_arguments)]
    fn adaptive_backward(
        &self,
        grads: &mut [Option<Array2<f64>>],
        g: &Array2<f64>,
        z: usize,
        alpha: usize,
        omega: usize,
        order: usize,
        cache: usize,
    ) {
        let al = &self.values[alpha];
        let om = &self.values[omega];
        let cache = &self.caches[cache];
        let terms = &cache.terms;
        let stride = cache.stride;
        let k = al.ncols();
        let j = order as i32;
        if self.needs_grad[z] {
            let dz = &cache.combined[order + 1] * g;
            accumulate(grads, z, dz);
        }
        if self.needs_grad[alpha] {
            let mut da = Array2::zeros((1, k));
            for s in 0..k {
                let p = &terms[s * stride + order];
                let dot: f64 = Zip::from(g).and(p).fold(0.0, |acc, &a, &b| acc + a * b);
                da[[0, s]] = om[[0, s]].powi(j) * dot;
            }
            accumulate(grads, alpha, da);
        }
        if self.needs_grad[omega] {
            let zv = &self.values[z];
            let mut dw = Array2::zeros((1, k));
            for s in 0..k {
                let a = al[[0, s]];
                if a == 0.0 {
                    continue;
                }
                let w = om[[0, s]];
                let c0 = if order == 0 { 0.0 } else { order as f64 * w.powi(j - 1) };
                let c1 = w.powi(j);
                let p = &terms[s * stride + order];
                let q = &terms[s * stride + order + 1];
                let acc = Zip::from(g)
                    .and(p)
                    .and(q)
                    .and(zv)
                    .fold(0.0, |acc, &g, &p, &q, &x| acc + g * (c0 * p + c1 * x * q));
                dw[[0, s]] = a * acc;
            }
            accumulate(grads, omega, dw);
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], i: usize, g: Array2<f64>) {
    match &mut grads[i] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}
