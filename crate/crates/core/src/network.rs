//! Kronecker networks.
//!
//! A [`KnnModel`] stores the base weights `W^l, b^l` and per-layer adaptive
//! parameters. [`KnnModel::forward_efficient`] evaluates the composition
//! `L_D o phi~ o ... o phi~ o L_1` directly; [`KnnModel::forward_block`]
//! materializes the scaled block matrices and is kept as a reference.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activations::{
    adaptive_derivs_unchecked, ActivationFamily, ActivationSpec, AdaptiveParams, Harmonic,
    OmegaInit, Primitive, SchemeName,
};
use crate::autodiff::batch::{BatchTape, NodeId};
use crate::error::{check_dim, KronError, Result};

/// Default cap on `K * N_l` for the block construction.
pub const DEFAULT_BLOCK_CAP: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct KnnLayer {
    /// `N_l x N_{l-1}`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    /// `None` on the output layer.
    pub adaptive: Option<AdaptiveParams>,
    pub weight_trainable: bool,
    pub bias_trainable: bool,
}

impl KnnLayer {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>, adaptive: Option<AdaptiveParams>) -> Self {
        KnnLayer {
            weight,
            bias,
            adaptive,
            weight_trainable: true,
            bias_trainable: true,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    pub layers: Vec<KnnLayer>,
    pub family: Arc<ActivationFamily>,
}

/// Which entries a [`FlatParams`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamFilter {
    All,
    Trainable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Weight,
    Bias,
    Alpha,
    Omega,
}

/// Location of one flattened scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamIndex {
    pub layer: usize,
    pub group: ParamGroup,
    pub offset: usize,
}

/// Flattened parameters. Per layer the order is `W` (row-major), `b`,
/// `alpha`, `omega`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    pub theta: Vec<f64>,
    pub index: Vec<ParamIndex>,
}

impl KnnModel {
    /// Checks that dimensions chain and that exactly the hidden layers carry
    /// adaptive parameters sized to the family.
    pub fn new(layers: Vec<KnnLayer>, family: Arc<ActivationFamily>) -> Result<Self> {
        if layers.is_empty() {
            return Err(KronError::Precondition("a model needs at least one layer".into()));
        }
        let d = layers.len();
        for (l, layer) in layers.iter().enumerate() {
            check_dim("layer bias", layer.fan_out(), layer.bias.len())?;
            if l > 0 {
                check_dim("layer input width", layers[l - 1].fan_out(), layer.fan_in())?;
            }
            match (&layer.adaptive, l + 1 == d) {
                (Some(p), false) => p.check(family.k())?,
                (None, true) => {}
                (Some(_), true) => {
                    return Err(KronError::Precondition(
                        "the output layer has no activation".into(),
                    ))
                }
                (None, false) => {
                    return Err(KronError::Precondition(format!(
                        "hidden layer {l} has no adaptive parameters"
                    )))
                }
            }
        }
        Ok(KnnModel { layers, family })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn k(&self) -> usize {
        self.family.k()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    /// `[N_0, N_1, ..., N_D]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(KnnLayer::fan_out));
        w
    }

    /// Number of weights and biases, i.e. the size of the plain network.
    pub fn ffn_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.ffn_param_count()
            + self
                .layers
                .iter()
                .filter_map(|l| l.adaptive.as_ref())
                .map(|p| 2 * p.k())
                .sum::<usize>()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_mask().iter().filter(|&&t| t).count()
    }

    pub fn forward_efficient(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("model input", self.input_dim(), x.len())?;
        let mut a = Array1::from(x.to_vec());
        for layer in &self.layers {
            let mut z = layer.weight.dot(&a) + &layer.bias;
            if let Some(p) = &layer.adaptive {
                z.mapv_inplace(|v| adaptive_derivs_unchecked(&self.family, p, v)[0]);
            }
            a = z;
        }
        Ok(a.to_vec())
    }

    /// Forward pass over the rows of `x` (one sample per row).
    pub fn forward_rows(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        check_dim("model input", self.input_dim(), x.ncols())?;
        let mut a = x.clone();
        for layer in &self.layers {
            let mut z = a.dot(&layer.weight.t()) + layer.bias.view().insert_axis(Axis(0));
            if let Some(p) = &layer.adaptive {
                z.mapv_inplace(|v| adaptive_derivs_unchecked(&self.family, p, v)[0]);
            }
            a = z;
        }
        Ok(a)
    }

    /// Reference forward pass through the explicit block-Kronecker network
    /// with [`DEFAULT_BLOCK_CAP`].
    pub fn forward_block(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_block_capped(x, DEFAULT_BLOCK_CAP)
    }

    /// Hidden pre-activations are kept as stacked blocks `[omega_k z^l]_k`
    /// of length `K * N_l`, the block activation applies `phi_k` to block
    /// `k`, and the layer maps are
    /// `W~^1 = (omega^1 e_1^T) (x) W^1` acting on `1_K (x) x`,
    /// `W~^l = (omega^l alpha^{l-1 T}) (x) W^l`, `b~^l = omega^l (x) b^l`,
    /// and `W~^D = alpha^{D-1 T} (x) W^D` with the plain output bias.
    pub fn forward_block_capped(&self, x: &[f64], cap: usize) -> Result<Vec<f64>> {
        check_dim("model input", self.input_dim(), x.len())?;
        let k = self.k();
        let widest = self.layers.iter().map(KnnLayer::fan_out).max().unwrap_or(0);
        if self.depth() > 1 && k * widest > cap {
            return Err(KronError::BlockTooLarge {
                needed: k * widest,
                cap,
            });
        }
        let d = self.depth();
        let xv = Array1::from(x.to_vec());
        if d == 1 {
            let l = &self.layers[0];
            return Ok((l.weight.dot(&xv) + &l.bias).to_vec());
        }
        let ones = Array2::<f64>::ones((k, 1));
        let mut block_in = kron(&ones, &xv.clone().insert_axis(Axis(1))).column(0).to_owned();
        let mut prev_alpha: Option<&AdaptiveParams> = None;
        for (l, layer) in self.layers.iter().enumerate() {
            if l + 1 < d {
                let p = layer.adaptive.as_ref().expect("hidden layer is adaptive");
                let omega = Array2::from_shape_vec((k, 1), p.omega.clone()).expect("omega shape");
                let left_row = match prev_alpha {
                    None => {
                        let mut e1 = Array2::zeros((1, k));
                        e1[[0, 0]] = 1.0;
                        e1
                    }
                    Some(q) => Array2::from_shape_vec((1, k), q.alpha.clone()).expect("alpha shape"),
                };
                let w_tilde = kron(&omega.dot(&left_row), &layer.weight);
                let b_tilde = kron(&omega, &layer.bias.clone().insert_axis(Axis(1)));
                let z = w_tilde.dot(&block_in) + b_tilde.column(0);
                let n = layer.fan_out();
                let mut act = Array1::zeros(k * n);
                for s in 0..k {
                    let slot = &self.family.slots()[s];
                    for i in 0..n {
                        act[s * n + i] = slot.eval(z[s * n + i]);
                    }
                }
                block_in = act;
                prev_alpha = Some(p);
            } else {
                let q = prev_alpha.expect("output follows a hidden layer");
                let alpha = Array2::from_shape_vec((1, k), q.alpha.clone()).expect("alpha shape");
                let w_tilde = kron(&alpha, &layer.weight);
                return Ok((w_tilde.dot(&block_in) + &layer.bias).to_vec());
            }
        }
        unreachable!("loop returns at the output layer")
    }

    fn visit<F: FnMut(ParamIndex, bool)>(&self, mut f: F) {
        for (l, layer) in self.layers.iter().enumerate() {
            for o in 0..layer.weight.len() {
                f(
                    ParamIndex {
                        layer: l,
                        group: ParamGroup::Weight,
                        offset: o,
                    },
                    layer.weight_trainable,
                );
            }
            for o in 0..layer.bias.len() {
                f(
                    ParamIndex {
                        layer: l,
                        group: ParamGroup::Bias,
                        offset: o,
                    },
                    layer.bias_trainable,
                );
            }
            if let Some(p) = &layer.adaptive {
                for (o, &t) in p.alpha_trainable.iter().enumerate() {
                    f(
                        ParamIndex {
                            layer: l,
                            group: ParamGroup::Alpha,
                            offset: o,
                        },
                        t,
                    );
                }
                for (o, &t) in p.omega_trainable.iter().enumerate() {
                    f(
                        ParamIndex {
                            layer: l,
                            group: ParamGroup::Omega,
                            offset: o,
                        },
                        t,
                    );
                }
            }
        }
    }

    fn get(&self, i: ParamIndex) -> f64 {
        let layer = &self.layers[i.layer];
        match i.group {
            ParamGroup::Weight => layer.weight.as_slice().expect("standard layout")[i.offset],
            ParamGroup::Bias => layer.bias[i.offset],
            ParamGroup::Alpha => layer.adaptive.as_ref().expect("adaptive").alpha[i.offset],
            ParamGroup::Omega => layer.adaptive.as_ref().expect("adaptive").omega[i.offset],
        }
    }

    fn set(&mut self, i: ParamIndex, v: f64) {
        let layer = &mut self.layers[i.layer];
        match i.group {
            ParamGroup::Weight => {
                layer.weight.as_slice_mut().expect("standard layout")[i.offset] = v
            }
            ParamGroup::Bias => layer.bias[i.offset] = v,
            ParamGroup::Alpha => layer.adaptive.as_mut().expect("adaptive").alpha[i.offset] = v,
            ParamGroup::Omega => layer.adaptive.as_mut().expect("adaptive").omega[i.offset] = v,
        }
    }

    pub fn param_index(&self, filter: ParamFilter) -> Vec<ParamIndex> {
        let mut out = Vec::new();
        self.visit(|i, t| {
            if filter == ParamFilter::All || t {
                out.push(i)
            }
        });
        out
    }

    pub fn flatten(&self, filter: ParamFilter) -> FlatParams {
        let index = self.param_index(filter);
        let theta = index.iter().map(|&i| self.get(i)).collect();
        FlatParams { theta, index }
    }

    /// Copy of `self` with the entries of `flat` written back. The index map
    /// must match this model's layout for the same filter.
    pub fn unflatten(&self, flat: &FlatParams) -> Result<KnnModel> {
        let all = self.param_index(ParamFilter::All);
        let trainable = self.param_index(ParamFilter::Trainable);
        if flat.index != all && flat.index != trainable {
            return Err(KronError::Precondition(
                "flattened index map does not match the model layout".into(),
            ));
        }
        check_dim("flattened parameters", flat.index.len(), flat.theta.len())?;
        let mut out = self.clone();
        for (&i, &v) in flat.index.iter().zip(&flat.theta) {
            out.set(i, v);
        }
        Ok(out)
    }

    /// All parameters in flatten order.
    pub fn to_vec(&self) -> Vec<f64> {
        self.flatten(ParamFilter::All).theta
    }

    pub fn set_from_slice(&mut self, theta: &[f64]) -> Result<()> {
        let mut pos = 0;
        for layer in &mut self.layers {
            let need = layer.weight.len()
                + layer.bias.len()
                + layer.adaptive.as_ref().map_or(0, |p| 2 * p.k());
            if pos + need > theta.len() {
                return Err(KronError::DimensionMismatch {
                    context: "parameter vector",
                    expected: pos + need,
                    got: theta.len(),
                });
            }
            let mut take = |dst: &mut [f64]| {
                dst.copy_from_slice(&theta[pos..pos + dst.len()]);
                pos += dst.len();
            };
            take(layer.weight.as_slice_mut().expect("standard layout"));
            take(layer.bias.as_slice_mut().expect("standard layout"));
            if let Some(p) = &mut layer.adaptive {
                take(&mut p.alpha);
                take(&mut p.omega);
            }
        }
        check_dim("parameter vector", pos, theta.len())
    }

    /// Trainability of every parameter in flatten order.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(|_, t| out.push(t));
        out
    }

    /// True for weights and biases, false for adaptive parameters.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(|i, _| out.push(matches!(i.group, ParamGroup::Weight | ParamGroup::Bias)));
        out
    }
}

/// Kronecker product of two matrices.
pub fn kron(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = Array2::zeros((ar * br, ac * bc));
    for i in 0..ar {
        for j in 0..ac {
            let s = a[[i, j]];
            out.slice_mut(ndarray::s![i * br..(i + 1) * br, j * bc..(j + 1) * bc])
                .assign(&(b * s));
        }
    }
    out
}

/// Distribution of the symmetric signs `xi_i` in the theorem-3.2 output
/// weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum XiDist {
    /// `+1` or `-1` with equal probability.
    #[default]
    Rademacher,
    /// `0` or `1` with equal probability.
    Bernoulli01,
}

impl XiDist {
    fn draw(self, rng: &mut ChaCha8Rng) -> f64 {
        let heads = rand::Rng::random_bool(rng, 0.5);
        match (self, heads) {
            (XiDist::Rademacher, true) => 1.0,
            (XiDist::Rademacher, false) => -1.0,
            (XiDist::Bernoulli01, true) => 1.0,
            (XiDist::Bernoulli01, false) => 0.0,
        }
    }
}

/// Weight distribution of the practice initialization; biases start at 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum WeightInit {
    /// `N(0, 2 / (fan_in + fan_out))`.
    XavierNormal,
    /// `N(0, std^2)`.
    Normal { std: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitScheme {
    /// Two-layer net, `[w_i; b_i] ~ N(0, I)`, `c_i ~ N(0, 1)`,
    /// `alpha = e_1`, `omega = 1`; everything trainable.
    Theory,
    /// Two-layer net with `c_i = |y| / (K N sqrt(m)) xi_i`, `alpha = 1/K`,
    /// `omega = 1`; only `W^1`, `b^1` and `alpha` train.
    Theorem32 { y_norm: f64, m: usize, xi: XiDist },
    Practice(WeightInit),
}

impl FromStr for InitScheme {
    type Err = KronError;

    /// Parses the bare scheme name; theorem32 gets placeholder data sizes.
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "theory" => Ok(InitScheme::Theory),
            "theorem32" => Ok(InitScheme::Theorem32 {
                y_norm: 1.0,
                m: 1,
                xi: XiDist::Rademacher,
            }),
            "practice" | "xavier" => Ok(InitScheme::Practice(WeightInit::XavierNormal)),
            _ => Err(KronError::UnknownName {
                kind: "init scheme",
                name: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitScheme::Theory => write!(f, "theory"),
            InitScheme::Theorem32 { .. } => write!(f, "theorem32"),
            InitScheme::Practice(WeightInit::XavierNormal) => write!(f, "practice(xavier-normal)"),
            InitScheme::Practice(WeightInit::Normal { std }) => write!(f, "practice(normal {std})"),
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Builds a model from an activation spec; see [`init_model_with`].
pub fn init_model(widths: &[usize], spec: &ActivationSpec, init: &InitScheme, seed: u64) -> Result<KnnModel> {
    let (family, params) = spec.build()?;
    init_model_with(widths, family, &params, init, seed)
}

/// Builds a model with `widths = [N_0, ..., N_D]`. Hidden layers start from
/// `params` under the practice scheme; the theory schemes overwrite the
/// adaptive parameters with their own initialization.
pub fn init_model_with(
    widths: &[usize],
    family: Arc<ActivationFamily>,
    params: &AdaptiveParams,
    init: &InitScheme,
    seed: u64,
) -> Result<KnnModel> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(KronError::Precondition(format!("invalid widths {widths:?}")));
    }
    let k = family.k();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = widths.len() - 1;
    match init {
        InitScheme::Theory | InitScheme::Theorem32 { .. } => {
            if d != 2 || widths[2] != 1 {
                return Err(KronError::Precondition(
                    "theory initializations need one hidden layer and a scalar output".into(),
                ));
            }
            let (n, din) = (widths[1], widths[0]);
            let mut w = Array2::zeros((n, din));
            let mut b = Array1::zeros(n);
            for i in 0..n {
                for j in 0..din {
                    w[[i, j]] = normal(&mut rng);
                }
                b[i] = normal(&mut rng);
            }
            let (c, adaptive, out_trainable) = match init {
                InitScheme::Theory => {
                    let c: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
                    let mut alpha = vec![0.0; k];
                    alpha[0] = 1.0;
                    let p = AdaptiveParams {
                        alpha,
                        omega: vec![1.0; k],
                        alpha_trainable: vec![true; k],
                        omega_trainable: vec![true; k],
                    };
                    (c, p, true)
                }
                InitScheme::Theorem32 { y_norm, m, xi } => {
                    let scale = y_norm / (k as f64 * n as f64 * (*m as f64).sqrt());
                    let c: Vec<f64> = (0..n).map(|_| scale * xi.draw(&mut rng)).collect();
                    let p = AdaptiveParams {
                        alpha: vec![1.0 / k as f64; k],
                        omega: vec![1.0; k],
                        alpha_trainable: vec![true; k],
                        omega_trainable: vec![false; k],
                    };
                    (c, p, false)
                }
                InitScheme::Practice(_) => unreachable!(),
            };
            let hidden = KnnLayer::new(w, b, Some(adaptive));
            let mut out = KnnLayer::new(
                Array2::from_shape_vec((1, n), c).expect("output shape"),
                Array1::zeros(1),
                None,
            );
            out.weight_trainable = out_trainable;
            out.bias_trainable = false;
            KnnModel::new(vec![hidden, out], family)
        }
        InitScheme::Practice(wi) => {
            params.check(k)?;
            let mut layers = Vec::with_capacity(d);
            for l in 0..d {
                let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                let std = match wi {
                    WeightInit::XavierNormal => (2.0 / (fan_in + fan_out) as f64).sqrt(),
                    WeightInit::Normal { std } => *std,
                };
                let w = Array2::from_shape_simple_fn((fan_out, fan_in), || std * normal(&mut rng));
                let adaptive = (l + 1 < d).then(|| params.clone());
                layers.push(KnnLayer::new(w, Array1::zeros(fan_out), adaptive));
            }
            KnnModel::new(layers, family)
        }
    }
}

/// Per-layer handles of a model recorded on a [`BatchTape`]. Frozen groups
/// are recorded as constants so the backward sweep skips them.
#[derive(Debug, Clone)]
pub struct BatchVars {
    pub weight: Vec<NodeId>,
    pub bias: Vec<NodeId>,
    pub alpha: Vec<Option<NodeId>>,
    pub omega: Vec<Option<NodeId>>,
}

pub fn record_params(tape: &mut BatchTape, model: &KnnModel) -> BatchVars {
    let mut vars = BatchVars {
        weight: Vec::new(),
        bias: Vec::new(),
        alpha: Vec::new(),
        omega: Vec::new(),
    };
    let leaf = |tape: &mut BatchTape, v: Array2<f64>, trainable: bool| {
        if trainable {
            tape.param(v)
        } else {
            tape.constant(v)
        }
    };
    for layer in &model.layers {
        vars.weight
            .push(leaf(tape, layer.weight.clone(), layer.weight_trainable));
        vars.bias.push(leaf(
            tape,
            layer.bias.clone().insert_axis(Axis(0)),
            layer.bias_trainable,
        ));
        match &layer.adaptive {
            Some(p) => {
                let k = p.k();
                let a = Array2::from_shape_vec((1, k), p.alpha.clone()).expect("alpha shape");
                let w = Array2::from_shape_vec((1, k), p.omega.clone()).expect("omega shape");
                vars.alpha
                    .push(Some(leaf(tape, a, p.alpha_trainable.iter().any(|&t| t))));
                vars.omega
                    .push(Some(leaf(tape, w, p.omega_trainable.iter().any(|&t| t))));
            }
            None => {
                vars.alpha.push(None);
                vars.omega.push(None);
            }
        }
    }
    vars
}

/// Model output for the rows of the node `x`.
pub fn batch_forward(tape: &mut BatchTape, model: &KnnModel, vars: &BatchVars, x: NodeId) -> NodeId {
    let mut a = x;
    for l in 0..model.depth() {
        let z = tape.matmul_t(a, vars.weight[l]);
        let z = tape.add_row(z, vars.bias[l]);
        a = match (vars.alpha[l], vars.omega[l]) {
            (Some(al), Some(om)) => {
                let c = tape.activation_cache(&model.family, z, al, om, 0);
                tape.adaptive(z, al, om, 0, c)
            }
            _ => z,
        };
    }
    a
}

/// Model output and the sum of pure second derivatives over every input
/// coordinate, i.e. the Laplacian of each output, for the rows of `x`.
/// Both are propagated as order-2 jets so parameter gradients flow through
/// the Laplacian as well.
pub fn batch_laplacian(
    tape: &mut BatchTape,
    model: &KnnModel,
    vars: &BatchVars,
    x: &Array2<f64>,
) -> (NodeId, NodeId) {
    let rows = x.nrows();
    let dim = x.ncols();
    let mut v = tape.constant(x.clone());
    let mut d1: Vec<NodeId> = (0..dim)
        .map(|c| {
            let mut e = Array2::zeros((rows, dim));
            e.column_mut(c).fill(1.0);
            tape.constant(e)
        })
        .collect();
    let mut d2: Vec<Option<NodeId>> = vec![None; dim];
    for l in 0..model.depth() {
        let w = vars.weight[l];
        let z = tape.matmul_t(v, w);
        let z = tape.add_row(z, vars.bias[l]);
        let zd1: Vec<NodeId> = d1.iter().map(|&d| tape.matmul_t(d, w)).collect();
        let zd2: Vec<Option<NodeId>> = d2.iter().map(|d| d.map(|d| tape.matmul_t(d, w))).collect();
        match (vars.alpha[l], vars.omega[l]) {
            (Some(al), Some(om)) => {
                let cache = tape.activation_cache(&model.family, z, al, om, 2);
                let g0 = tape.adaptive(z, al, om, 0, cache);
                let g1 = tape.adaptive(z, al, om, 1, cache);
                let g2 = tape.adaptive(z, al, om, 2, cache);
                v = g0;
                for c in 0..dim {
                    let sq = tape.square(zd1[c]);
                    let curv = tape.mul(g2, sq);
                    d2[c] = Some(match zd2[c] {
                        Some(dd) => {
                            let lin = tape.mul(g1, dd);
                            tape.add(curv, lin)
                        }
                        None => curv,
                    });
                    d1[c] = tape.mul(g1, zd1[c]);
                }
            }
            _ => {
                v = z;
                d1 = zd1;
                d2 = zd2;
            }
        }
    }
    let mut lap: Option<NodeId> = None;
    for d in d2.into_iter().flatten() {
        lap = Some(match lap {
            Some(acc) => tape.add(acc, d),
            None => d,
        });
    }
    let lap = lap.unwrap_or_else(|| {
        let zeros = Array2::zeros(tape.value(v).raw_dim());
        tape.constant(zeros)
    });
    (v, lap)
}

/// Gradients of the recorded parameters in flatten order; frozen groups
/// contribute zeros.
pub fn gather_grads(
    model: &KnnModel,
    vars: &BatchVars,
    grads: &[Option<Array2<f64>>],
) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.param_count());
    let mut push = |node: Option<NodeId>, len: usize| match node.and_then(|n| grads[n.index()].as_ref()) {
        Some(g) => out.extend(g.iter().copied()),
        None => out.extend(std::iter::repeat_n(0.0, len)),
    };
    for (l, layer) in model.layers.iter().enumerate() {
        push(Some(vars.weight[l]), layer.weight.len());
        push(Some(vars.bias[l]), layer.bias.len());
        if let Some(p) = &layer.adaptive {
            push(vars.alpha[l], p.k());
            push(vars.omega[l], p.k());
        }
    }
    out
}

/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable description of the hidden-layer activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub scheme: String,
    pub base: Primitive,
    pub n: f64,
    pub harmonic: Harmonic,
    pub omega_init: OmegaInit,
}

impl ActivationRecord {
    pub fn from_spec(spec: &ActivationSpec) -> Self {
        ActivationRecord {
            scheme: spec.scheme.to_string(),
            base: spec.base,
            n: spec.n,
            harmonic: spec.harmonic,
            omega_init: spec.omega_init,
        }
    }

    pub fn to_spec(&self) -> Result<ActivationSpec> {
        Ok(ActivationSpec {
            scheme: self.scheme.parse::<SchemeName>()?,
            base: self.base,
            n: self.n,
            harmonic: self.harmonic,
            omega_init: self.omega_init,
        })
    }
}

/// JSON checkpoint: architecture, activation, init label, seed and every
/// parameter in flatten order together with its trainability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub widths: Vec<usize>,
    pub activation: ActivationRecord,
    pub init: String,
    pub seed: u64,
    pub iteration: usize,
    pub theta: Vec<f64>,
    pub trainable: Vec<bool>,
}

impl Checkpoint {
    pub fn new(model: &KnnModel, spec: &ActivationSpec, init: &str, seed: u64, iteration: usize) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            widths: model.widths(),
            activation: ActivationRecord::from_spec(spec),
            init: init.to_string(),
            seed,
            iteration,
            theta: model.to_vec(),
            trainable: model.trainable_mask(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(KronError::Config(format!(
                "unsupported checkpoint version {}",
                c.version
            )));
        }
        Ok(c)
    }

    /// Rebuilds the model.
    pub fn restore(&self) -> Result<KnnModel> {
        let spec = self.activation.to_spec()?;
        let mut model = init_model(
            &self.widths,
            &spec,
            &InitScheme::Practice(WeightInit::Normal { std: 0.0 }),
            0,
        )?;
        model.set_from_slice(&self.theta)?;
        check_dim("checkpoint mask", model.param_count(), self.trainable.len())?;
        let mut pos = 0;
        for layer in &mut model.layers {
            layer.weight_trainable = self.trainable[pos];
            pos += layer.weight.len();
            layer.bias_trainable = self.trainable[pos];
            pos += layer.bias.len();
            if let Some(p) = &mut layer.adaptive {
                let k = p.k();
                p.alpha_trainable.copy_from_slice(&self.trainable[pos..pos + k]);
                pos += k;
                p.omega_trainable.copy_from_slice(&self.trainable[pos..pos + k]);
                pos += k;
            }
        }
        Ok(model)
    }
}
