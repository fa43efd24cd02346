//! Order-2 jets on the scalar tape.

use crate::activations::{ActivationFamily, Primitive, Smoothness};
use crate::error::{check_dim, KronError, Result};
use crate::network::KnnModel;

use super::{Tape, Var};

/// `(u, du/dx_i, d2u/dx_i^2)` for one input coordinate `x_i`, each a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Jet2 {
    pub v: Var,
    pub d1: Var,
    pub d2: Var,
}

impl Jet2 {
    pub fn constant(tape: &mut Tape, c: f64) -> Self {
        let v = tape.constant(c);
        let z = tape.constant(0.0);
        Jet2 { v, d1: z, d2: z }
    }

    /// Seed for an input coordinate; `active` marks the differentiated one.
    pub fn coordinate(tape: &mut Tape, value: f64, active: bool) -> Self {
        let v = tape.constant(value);
        let d1 = tape.constant(if active { 1.0 } else { 0.0 });
        let d2 = tape.constant(0.0);
        Jet2 { v, d1, d2 }
    }

    pub fn add(self, tape: &mut Tape, o: Jet2) -> Jet2 {
        Jet2 {
            v: tape.add(self.v, o.v),
            d1: tape.add(self.d1, o.d1),
            d2: tape.add(self.d2, o.d2),
        }
    }

    pub fn scale(self, tape: &mut Tape, c: f64) -> Jet2 {
        Jet2 {
            v: tape.scale(self.v, c),
            d1: tape.scale(self.d1, c),
            d2: tape.scale(self.d2, c),
        }
    }

    /// `s * self` for a scalar node `s` independent of the coordinate.
    pub fn scale_var(self, tape: &mut Tape, s: Var) -> Jet2 {
        Jet2 {
            v: tape.mul(s, self.v),
            d1: tape.mul(s, self.d1),
            d2: tape.mul(s, self.d2),
        }
    }

    pub fn mul(self, tape: &mut Tape, o: Jet2) -> Jet2 {
        let v = tape.mul(self.v, o.v);
        let a = tape.mul(self.d1, o.v);
        let b = tape.mul(self.v, o.d1);
        let d1 = tape.add(a, b);
        let c = tape.mul(self.d2, o.v);
        let e = tape.mul(self.d1, o.d1);
        let e = tape.scale(e, 2.0);
        let f = tape.mul(self.v, o.d2);
        let d2 = tape.sum(&[c, e, f]);
        Jet2 { v, d1, d2 }
    }

    /// Composition with a scalar map given its first two derivative nodes
    /// evaluated at `self.v`: `d1 = g1 u'`, `d2 = g2 u'^2 + g1 u''`.
    pub fn compose(self, tape: &mut Tape, g0: Var, g1: Var, g2: Var) -> Jet2 {
        let d1 = tape.mul(g1, self.d1);
        let sq = tape.square(self.d1);
        let a = tape.mul(g2, sq);
        let b = tape.mul(g1, self.d2);
        let d2 = tape.add(a, b);
        Jet2 { v: g0, d1, d2 }
    }

    pub fn prim(self, tape: &mut Tape, p: Primitive) -> Jet2 {
        let g0 = tape.prim(p, 0, self.v);
        let g1 = tape.prim(p, 1, self.v);
        let g2 = tape.prim(p, 2, self.v);
        self.compose(tape, g0, g1, g2)
    }

    pub fn sin(self, tape: &mut Tape) -> Jet2 {
        self.prim(tape, Primitive::Sin)
    }
}

/// What [`jet_forward`] does with activations that are not C².
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JetPolicy {
    /// Reject them.
    #[default]
    Strict,
    /// Accept them with the one-sided convention: `phi'' = 0` away from the
    /// kinks, and the derivative at a kink is the value of the branch that
    /// owns the point (ReLU'(0) = 0).
    AllowKinks,
}

/// Parameters of a model recorded as tape inputs, in flatten order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    /// Row-major weights per layer.
    pub weight: Vec<Vec<Var>>,
    pub bias: Vec<Vec<Var>>,
    pub alpha: Vec<Vec<Var>>,
    pub omega: Vec<Vec<Var>>,
}

/// Records every parameter of `model` as a bound input. On a fresh tape the
/// input slots therefore follow the flatten order, so
/// [`super::Gradients::inputs`] lines up with [`KnnModel::to_vec`].
pub fn model_on_tape(tape: &mut Tape, model: &KnnModel) -> ModelVars {
    let mut vars = ModelVars {
        weight: Vec::new(),
        bias: Vec::new(),
        alpha: Vec::new(),
        omega: Vec::new(),
    };
    for layer in &model.layers {
        vars.weight
            .push(layer.weight.iter().map(|&w| tape.var(w)).collect());
        vars.bias.push(layer.bias.iter().map(|&b| tape.var(b)).collect());
        match &layer.adaptive {
            Some(p) => {
                vars.alpha.push(p.alpha.iter().map(|&a| tape.var(a)).collect());
                vars.omega.push(p.omega.iter().map(|&w| tape.var(w)).collect());
            }
            None => {
                vars.alpha.push(Vec::new());
                vars.omega.push(Vec::new());
            }
        }
    }
    vars
}

/// Effective frequencies `freq_k * omega_k` of one layer.
fn effective(tape: &mut Tape, family: &ActivationFamily, omega: &[Var]) -> Vec<Var> {
    family
        .slots()
        .iter()
        .zip(omega)
        .map(|(s, &w)| if s.freq == 1.0 { w } else { tape.scale(w, s.freq) })
        .collect()
}

/// `g_j(z) = sum_k alpha_k amp_k e_k^j g_k^(j)(e_k z)` for `j = 0..=order`.
fn adaptive_orders(
    tape: &mut Tape,
    family: &ActivationFamily,
    alpha: &[Var],
    eff: &[Var],
    z: Var,
    order: usize,
) -> Vec<Var> {
    let mut terms = vec![Vec::with_capacity(family.k()); order + 1];
    for (k, slot) in family.slots().iter().enumerate() {
        let arg = tape.mul(eff[k], z);
        let mut pow: Option<Var> = None;
        for (j, t) in terms.iter_mut().enumerate() {
            let mut term = tape.prim(slot.primitive, j as u8, arg);
            if let Some(p) = pow {
                term = tape.mul(p, term);
            }
            if slot.amp != 1.0 {
                term = tape.scale(term, slot.amp);
            }
            t.push(tape.mul(alpha[k], term));
            pow = Some(match pow {
                None => eff[k],
                Some(p) => tape.mul(p, eff[k]),
            });
        }
    }
    terms.iter().map(|t| tape.sum(t)).collect()
}

/// Model output as tape nodes for input nodes `x`.
pub fn model_output(tape: &mut Tape, model: &KnnModel, vars: &ModelVars, x: &[Var]) -> Result<Vec<Var>> {
    check_dim("model input", model.input_dim(), x.len())?;
    let mut a = x.to_vec();
    for (l, layer) in model.layers.iter().enumerate() {
        let (rows, cols) = layer.weight.dim();
        let eff = effective(tape, &model.family, &vars.omega[l]);
        let mut next = Vec::with_capacity(rows);
        for i in 0..rows {
            let dot = tape.dot(&vars.weight[l][i * cols..(i + 1) * cols], &a);
            let z = tape.add(dot, vars.bias[l][i]);
            next.push(if layer.adaptive.is_some() {
                adaptive_orders(tape, &model.family, &vars.alpha[l], &eff, z, 0)[0]
            } else {
                z
            });
        }
        a = next;
    }
    Ok(a)
}

/// Jets of every model output with respect to input coordinate `coord` at
/// the point `x`. Parameter gradients of any jet component follow from
/// [`Tape::backward`].
pub fn jet_forward(
    tape: &mut Tape,
    model: &KnnModel,
    vars: &ModelVars,
    x: &[f64],
    coord: usize,
    policy: JetPolicy,
) -> Result<Vec<Jet2>> {
    check_dim("model input", model.input_dim(), x.len())?;
    if coord >= x.len() {
        return Err(KronError::Precondition(format!(
            "coordinate {coord} out of range for input dimension {}",
            x.len()
        )));
    }
    if policy == JetPolicy::Strict && model.depth() > 1 {
        if let Some(slot) = model.family.first_non_smooth() {
            if slot.primitive.smoothness() < Smoothness::Smooth {
                return Err(KronError::NonSmoothActivation {
                    label: slot.label.clone(),
                });
            }
        }
    }
    let mut a: Vec<Jet2> = x
        .iter()
        .enumerate()
        .map(|(i, &xi)| Jet2::coordinate(tape, xi, i == coord))
        .collect();
    for (l, layer) in model.layers.iter().enumerate() {
        let (rows, cols) = layer.weight.dim();
        let eff = effective(tape, &model.family, &vars.omega[l]);
        let mut next = Vec::with_capacity(rows);
        for i in 0..rows {
            let w = &vars.weight[l][i * cols..(i + 1) * cols];
            let vs: Vec<Var> = a.iter().map(|j| j.v).collect();
            let d1s: Vec<Var> = a.iter().map(|j| j.d1).collect();
            let d2s: Vec<Var> = a.iter().map(|j| j.d2).collect();
            let dot = tape.dot(w, &vs);
            let z = Jet2 {
                v: tape.add(dot, vars.bias[l][i]),
                d1: tape.dot(w, &d1s),
                d2: tape.dot(w, &d2s),
            };
            next.push(if layer.adaptive.is_some() {
                let g = adaptive_orders(tape, &model.family, &vars.alpha[l], &eff, z.v, 2);
                z.compose(tape, g[0], g[1], g[2])
            } else {
                z
            });
        }
        a = next;
    }
    Ok(a)
}
