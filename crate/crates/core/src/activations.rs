//! Activation families and their adaptive parameters.
//!
//! An adaptive activation is the weighted sum
//!
//! ```text
//! phi~(z) = sum_k alpha_k * phi_k(omega_k * z)
//! ```
//!
//! over an ordered family of scalar functions `phi_k`. Every slot in a family
//! is `amp * g(freq * x)` for a primitive `g` with analytic derivatives up to
//! third order, which is what the second-order jets (and their parameter
//! gradients) need.
//!
//! The scaling factor `n` of the Rowdy construction is folded into the slot
//! (`freq = n` for the base slot, `amp = n, freq = (k-1) n` for the
//! harmonics), so trainable frequencies start at `1/n` and the initial
//! activation is exactly the base activation.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, KronError, Result};

/// Scalar primitive with analytic derivatives of order 0..=3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Identity,
    Tanh,
    Sin,
    Cos,
    /// `max(x, 0)`; derivative at 0 is taken as 0.
    Relu,
    /// `max(-x, 0)`
    ReluNeg,
    /// `(e^x - 1)` for `x <= 0`, zero otherwise.
    EluNeg,
    /// ELU with unit scale.
    Elu,
    Sigmoid,
    Swish,
    Softplus,
    /// `x^p`
    Power(u32),
}

/// How many classical derivatives a primitive has everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Smoothness {
    /// Derivative jumps somewhere (ReLU family).
    Kink,
    /// Continuously differentiable, second derivative jumps.
    C1,
    /// At least three continuous derivatives.
    Smooth,
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

impl Primitive {
    /// `[g, g', g'', g''']` at `x`.
    #[inline]
    pub fn derivs(self, x: f64) -> [f64; 4] {
        match self {
            Primitive::Identity => [x, 1.0, 0.0, 0.0],
            Primitive::Tanh => {
                let t = x.tanh();
                let s = 1.0 - t * t;
                [t, s, -2.0 * t * s, s * (6.0 * t * t - 2.0)]
            }
            Primitive::Sin => {
                let (s, c) = x.sin_cos();
                [s, c, -s, -c]
            }
            Primitive::Cos => {
                let (s, c) = x.sin_cos();
                [c, -s, -c, s]
            }
            Primitive::Relu => {
                if x > 0.0 {
                    [x, 1.0, 0.0, 0.0]
                } else {
                    [0.0, 0.0, 0.0, 0.0]
                }
            }
            Primitive::ReluNeg => {
                if x < 0.0 {
                    [-x, -1.0, 0.0, 0.0]
                } else {
                    [0.0, 0.0, 0.0, 0.0]
                }
            }
            Primitive::EluNeg => {
                if x <= 0.0 {
                    let e = x.exp();
                    [e - 1.0, e, e, e]
                } else {
                    [0.0, 0.0, 0.0, 0.0]
                }
            }
            Primitive::Elu => {
                if x > 0.0 {
                    [x, 1.0, 0.0, 0.0]
                } else {
                    let e = x.exp();
                    [e - 1.0, e, e, e]
                }
            }
            Primitive::Sigmoid => {
                let s = sigmoid(x);
                let d1 = s * (1.0 - s);
                [s, d1, d1 * (1.0 - 2.0 * s), d1 * (1.0 - 6.0 * s + 6.0 * s * s)]
            }
            Primitive::Swish => {
                let s = sigmoid(x);
                let d1 = s * (1.0 - s);
                let d2 = d1 * (1.0 - 2.0 * s);
                let d3 = d1 * (1.0 - 6.0 * s + 6.0 * s * s);
                [x * s, s + x * d1, 2.0 * d1 + x * d2, 3.0 * d2 + x * d3]
            }
            Primitive::Softplus => {
                let s = sigmoid(x);
                let d1 = s * (1.0 - s);
                let sp = x.max(0.0) + (-x.abs()).exp().ln_1p();
                [sp, s, d1, d1 * (1.0 - 2.0 * s)]
            }
            Primitive::Power(p) => {
                let mut out = [0.0; 4];
                let mut coeff = 1.0;
                for (j, o) in out.iter_mut().enumerate() {
                    if (j as u32) > p {
                        break;
                    }
                    *o = coeff * x.powi(p as i32 - j as i32);
                    coeff *= (p as i32 - j as i32) as f64;
                }
                out
            }
        }
    }

    pub fn smoothness(self) -> Smoothness {
        match self {
            Primitive::Relu | Primitive::ReluNeg | Primitive::EluNeg => Smoothness::Kink,
            Primitive::Elu => Smoothness::C1,
            _ => Smoothness::Smooth,
        }
    }

    /// `(sup |g|, sup |g'|)` over the real line, infinite when unbounded.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            Primitive::Tanh | Primitive::Sin | Primitive::Cos => (1.0, 1.0),
            Primitive::Sigmoid => (1.0, 0.25),
            _ => (f64::INFINITY, f64::INFINITY),
        }
    }

    /// Expectation of `g(z)` for `z ~ N(0, 1)` when known in closed form.
    pub fn gaussian_mean(self) -> Option<f64> {
        match self {
            Primitive::Identity | Primitive::Tanh | Primitive::Sin => Some(0.0),
            Primitive::Sigmoid => Some(0.5),
            Primitive::Cos => Some((-0.5f64).exp()),
            Primitive::Power(p) if p % 2 == 1 => Some(0.0),
            _ => None,
        }
    }

    pub fn name(self) -> String {
        match self {
            Primitive::Identity => "identity".into(),
            Primitive::Tanh => "tanh".into(),
            Primitive::Sin => "sin".into(),
            Primitive::Cos => "cos".into(),
            Primitive::Relu => "relu".into(),
            Primitive::ReluNeg => "relu_neg".into(),
            Primitive::EluNeg => "elu_neg".into(),
            Primitive::Elu => "elu".into(),
            Primitive::Sigmoid => "sigmoid".into(),
            Primitive::Swish => "swish".into(),
            Primitive::Softplus => "softplus".into(),
            Primitive::Power(p) => format!("pow{p}"),
        }
    }
}

impl FromStr for Primitive {
    type Err = KronError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "identity" | "linear" => Primitive::Identity,
            "tanh" => Primitive::Tanh,
            "sin" | "sine" => Primitive::Sin,
            "cos" | "cosine" => Primitive::Cos,
            "relu" => Primitive::Relu,
            "elu" => Primitive::Elu,
            "sigmoid" | "logistic" => Primitive::Sigmoid,
            "swish" | "silu" => Primitive::Swish,
            "softplus" => Primitive::Softplus,
            other => {
                return Err(KronError::UnknownName {
                    kind: "activation",
                    name: other.to_string(),
                })
            }
        })
    }
}

/// One member `phi(x) = amp * g(freq * x)` of a family.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub primitive: Primitive,
    pub amp: f64,
    pub freq: f64,
    pub label: String,
}

impl Slot {
    pub fn new(primitive: Primitive) -> Self {
        Slot {
            primitive,
            amp: 1.0,
            freq: 1.0,
            label: primitive.name(),
        }
    }

    pub fn scaled(primitive: Primitive, amp: f64, freq: f64) -> Self {
        let label = if amp == 1.0 && freq == 1.0 {
            primitive.name()
        } else {
            format!("{amp}*{}({freq}x)", primitive.name())
        };
        Slot {
            primitive,
            amp,
            freq,
            label,
        }
    }

    /// `[phi, phi', phi'', phi''']` at `x`.
    pub fn derivs(&self, x: f64) -> [f64; 4] {
        let g = self.primitive.derivs(self.freq * x);
        let mut f = self.amp;
        let mut out = [0.0; 4];
        for j in 0..4 {
            out[j] = f * g[j];
            f *= self.freq;
        }
        out
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.amp * self.primitive.derivs(self.freq * x)[0]
    }

    /// `(sup |phi|, sup |phi'|)`.
    pub fn bounds(&self) -> (f64, f64) {
        let (b0, b1) = self.primitive.bounds();
        (self.amp.abs() * b0, (self.amp * self.freq).abs() * b1)
    }
}

/// Ordered list of slots; slot 0 is the base activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationFamily {
    slots: Vec<Slot>,
}

impl ActivationFamily {
    pub fn new(slots: Vec<Slot>) -> Result<Self> {
        if slots.is_empty() {
            return Err(KronError::Precondition(
                "an activation family needs at least one slot".into(),
            ));
        }
        Ok(ActivationFamily { slots })
    }

    pub fn single(primitive: Primitive) -> Self {
        ActivationFamily {
            slots: vec![Slot::new(primitive)],
        }
    }

    pub fn k(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn labels(&self) -> Vec<&str> {
        self.slots.iter().map(|s| s.label.as_str()).collect()
    }

    pub fn smoothness(&self) -> Smoothness {
        self.slots
            .iter()
            .map(|s| s.primitive.smoothness())
            .min()
            .unwrap_or(Smoothness::Smooth)
    }

    /// First slot that is not C², if any.
    pub fn first_non_smooth(&self) -> Option<&Slot> {
        self.slots
            .iter()
            .find(|s| s.primitive.smoothness() < Smoothness::Smooth)
    }

    /// Largest of `sup |phi_k|` and `sup |phi_k'|` over the family.
    pub fn uniform_bound(&self) -> f64 {
        self.slots
            .iter()
            .map(|s| {
                let (a, b) = s.bounds();
                a.max(b)
            })
            .fold(0.0, f64::max)
    }

    /// `[Phi]_{kj} = phi_k(z_j)`, row-major `K x m`.
    pub fn phi_matrix(&self, points: &[f64]) -> ndarray::Array2<f64> {
        ndarray::Array2::from_shape_fn((self.k(), points.len()), |(k, j)| {
            self.slots[k].eval(points[j])
        })
    }

    /// Per-slot derivatives at the effective argument `omega_k * z`, with the
    /// slot frequency folded into `omega_k` first so that `n * (1/n)` rounds
    /// to exactly one before touching `z`.
    #[inline]
    pub fn slot_derivs(&self, k: usize, omega: f64, z: f64) -> [f64; 4] {
        let slot = &self.slots[k];
        let e = slot.freq * omega;
        let g = slot.primitive.derivs(e * z);
        [
            slot.amp * g[0],
            slot.amp * slot.freq * g[1],
            slot.amp * slot.freq * slot.freq * g[2],
            slot.amp * slot.freq * slot.freq * slot.freq * g[3],
        ]
    }
}

/// Amplitudes `alpha`, frequencies `omega` and their trainability masks for
/// one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveParams {
    pub alpha: Vec<f64>,
    pub omega: Vec<f64>,
    pub alpha_trainable: Vec<bool>,
    pub omega_trainable: Vec<bool>,
}

impl AdaptiveParams {
    pub fn fixed(alpha: Vec<f64>, omega: Vec<f64>) -> Self {
        let k = alpha.len();
        AdaptiveParams {
            alpha,
            omega,
            alpha_trainable: vec![false; k],
            omega_trainable: vec![false; k],
        }
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn check(&self, k: usize) -> Result<()> {
        check_dim("adaptive alpha", k, self.alpha.len())?;
        check_dim("adaptive omega", k, self.omega.len())?;
        check_dim("adaptive alpha mask", k, self.alpha_trainable.len())?;
        check_dim("adaptive omega mask", k, self.omega_trainable.len())
    }

    pub fn trainable_count(&self) -> usize {
        self.alpha_trainable.iter().filter(|&&t| t).count()
            + self.omega_trainable.iter().filter(|&&t| t).count()
    }
}

/// Returns `sum_k alpha_k phi_k(omega_k z)`.
pub fn adaptive_eval(family: &ActivationFamily, params: &AdaptiveParams, z: f64) -> Result<f64> {
    params.check(family.k())?;
    Ok(adaptive_derivs_unchecked(family, params, z)[0])
}

/// Derivatives of the adaptive activation with respect to `z`:
/// `g_j(z) = sum_k alpha_k omega_k^j phi_k^(j)(omega_k z)` for `j = 0..=3`.
pub fn adaptive_derivs(
    family: &ActivationFamily,
    params: &AdaptiveParams,
    z: f64,
) -> Result<[f64; 4]> {
    params.check(family.k())?;
    Ok(adaptive_derivs_unchecked(family, params, z))
}

#[inline]
pub(crate) fn adaptive_derivs_unchecked(
    family: &ActivationFamily,
    params: &AdaptiveParams,
    z: f64,
) -> [f64; 4] {
    let mut out = [0.0; 4];
    for k in 0..family.k() {
        let a = params.alpha[k];
        let w = params.omega[k];
        let p = family.slot_derivs(k, w, z);
        let mut f = a;
        for j in 0..4 {
            out[j] += f * p[j];
            f *= w;
        }
    }
    out
}

/// Fluctuation waveform of the Rowdy harmonics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Harmonic {
    #[default]
    Sin,
    Cos,
}

impl Harmonic {
    fn primitive(self) -> Primitive {
        match self {
            Harmonic::Sin => Primitive::Sin,
            Harmonic::Cos => Primitive::Cos,
        }
    }
}

/// Initial value of the trainable harmonic frequencies `omega_k, k >= 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OmegaInit {
    /// `n * omega_k = 1`, the same convention as the base frequency.
    #[default]
    InverseN,
    /// `omega_k = 1`.
    Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowdyConfig {
    pub base: Primitive,
    pub k: usize,
    pub n: f64,
    pub harmonic: Harmonic,
    pub omega_init: OmegaInit,
}

impl RowdyConfig {
    pub fn new(base: Primitive, k: usize, n: f64) -> Self {
        RowdyConfig {
            base,
            k,
            n,
            harmonic: Harmonic::Sin,
            omega_init: OmegaInit::InverseN,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(KronError::Precondition("Rowdy needs K >= 1".into()));
        }
        if self.n.is_nan() || self.n < 1.0 {
            return Err(KronError::Precondition(format!(
                "Rowdy scaling factor must be >= 1, got {}",
                self.n
            )));
        }
        Ok(())
    }

    /// Base slot `base(n x)` followed by `n * sin((k-1) n x)` harmonics.
    pub fn family(&self) -> Result<ActivationFamily> {
        self.validate()?;
        let mut slots = vec![base_slot(self.base, self.n)];
        for k in 2..=self.k {
            let mut s = Slot::scaled(self.harmonic.primitive(), self.n, (k - 1) as f64 * self.n);
            s.label = format!(
                "{}*{}({}*{}x)",
                self.n,
                self.harmonic.primitive().name(),
                k - 1,
                self.n
            );
            slots.push(s);
        }
        ActivationFamily::new(slots)
    }
}

fn base_slot(base: Primitive, n: f64) -> Slot {
    if n == 1.0 {
        Slot::new(base)
    } else {
        Slot::scaled(base, 1.0, n)
    }
}

/// Initial adaptive parameters of a Rowdy layer: the base amplitude is fixed
/// at one, every other amplitude starts at zero and is trainable, and every
/// frequency is trainable with `n * omega_1 = 1`.
pub fn rowdy_init(config: &RowdyConfig) -> Result<AdaptiveParams> {
    config.validate()?;
    let k = config.k;
    let inv = 1.0 / config.n;
    let mut alpha = vec![0.0; k];
    alpha[0] = 1.0;
    let mut omega = vec![
        match config.omega_init {
            OmegaInit::InverseN => inv,
            OmegaInit::Unit => 1.0,
        };
        k
    ];
    omega[0] = inv;
    let mut alpha_trainable = vec![true; k];
    alpha_trainable[0] = false;
    Ok(AdaptiveParams {
        alpha,
        omega,
        alpha_trainable,
        omega_trainable: vec![true; k],
    })
}

/// Trainability pattern of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// Nothing trainable.
    Fixed,
    /// Only the base frequency is trainable.
    LLaaf,
    /// Base frequency plus every harmonic amplitude and frequency.
    Rowdy,
}

/// Parameters for a family of size `k` under the given trainability scheme.
/// Schemes differ only in their masks (and in the Fixed/L-LAAF zero
/// harmonic frequencies), so all three produce the same initial activation.
pub fn scheme_params(scheme: Scheme, k: usize, n: f64, omega_init: OmegaInit) -> Result<AdaptiveParams> {
    let mut p = rowdy_init(&RowdyConfig {
        base: Primitive::Identity,
        k,
        n,
        harmonic: Harmonic::Sin,
        omega_init,
    })?;
    match scheme {
        Scheme::Rowdy => {}
        Scheme::Fixed | Scheme::LLaaf => {
            for w in p.omega.iter_mut().skip(1) {
                *w = 0.0;
            }
            p.alpha_trainable = vec![false; k];
            p.omega_trainable = vec![false; k];
            p.omega_trainable[0] = scheme == Scheme::LLaaf;
        }
    }
    Ok(p)
}

/// The named reductions of the Kronecker construction.
#[derive(Debug, Clone, PartialEq)]
pub enum SpecialCase {
    /// Plain feed-forward activation, `K = 1`, nothing adaptive.
    Ffn { base: Primitive },
    /// Parametric ReLU with trainable negative slope.
    Prelu { slope: f64 },
    /// ELU with scale `a`.
    Elu { a: f64 },
    /// Scaled ELU with the standard self-normalizing constants.
    Selu,
    /// Layer-wise locally adaptive activation `base(n * omega_1 * z)`.
    LLaaf { base: Primitive, n: f64 },
    /// Polynomial family `phi_k(x) = x^(k-1)` with trainable amplitudes.
    Slaf { k: usize },
    Rowdy(RowdyConfig),
    /// Cosine base plus eight tanh terms.
    Knn1 { n: f64 },
    /// Cosine base plus eight ReLU terms.
    Knn2 { n: f64 },
    /// Cosine base plus a fixed mix of eight standard activations.
    Knn3 { n: f64 },
}

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

impl FromStr for SpecialCase {
    type Err = KronError;

    /// Parses the case name with its conventional defaults.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "ffn" => SpecialCase::Ffn {
                base: Primitive::Tanh,
            },
            "prelu" => SpecialCase::Prelu { slope: 0.25 },
            "elu" => SpecialCase::Elu { a: 1.0 },
            "selu" => SpecialCase::Selu,
            "llaaf" => SpecialCase::LLaaf {
                base: Primitive::Tanh,
                n: 10.0,
            },
            "slaf" => SpecialCase::Slaf { k: 3 },
            "rowdy" => SpecialCase::Rowdy(RowdyConfig::new(Primitive::Tanh, 5, 10.0)),
            "knn1" => SpecialCase::Knn1 { n: 10.0 },
            "knn2" => SpecialCase::Knn2 { n: 10.0 },
            "knn3" => SpecialCase::Knn3 { n: 10.0 },
            _ => {
                return Err(KronError::UnknownName {
                    kind: "special case",
                    name: s.to_string(),
                })
            }
        })
    }
}

fn knn_mix(n: f64, rest: &[Primitive]) -> Result<(ActivationFamily, AdaptiveParams)> {
    let mut slots = vec![base_slot(Primitive::Cos, n)];
    slots.extend(rest.iter().map(|&p| Slot::new(p)));
    let k = slots.len();
    let mut alpha = vec![0.0; k];
    alpha[0] = 1.0;
    let mut omega = vec![1.0; k];
    omega[0] = 1.0 / n;
    let mut alpha_trainable = vec![true; k];
    alpha_trainable[0] = false;
    Ok((
        ActivationFamily::new(slots)?,
        AdaptiveParams {
            alpha,
            omega,
            alpha_trainable,
            omega_trainable: vec![true; k],
        },
    ))
}

/// Family and parameters realizing one of the named reductions.
pub fn make_special_case(case: &SpecialCase) -> Result<(ActivationFamily, AdaptiveParams)> {
    use Primitive::*;
    match case {
        SpecialCase::Ffn { base } => Ok((
            ActivationFamily::single(*base),
            AdaptiveParams::fixed(vec![1.0], vec![1.0]),
        )),
        SpecialCase::Prelu { slope } => {
            let family = ActivationFamily::new(vec![Slot::new(Relu), Slot::new(ReluNeg)])?;
            let mut p = AdaptiveParams::fixed(vec![1.0, -1.0], vec![1.0, *slope]);
            p.omega_trainable[1] = true;
            Ok((family, p))
        }
        SpecialCase::Elu { a } => {
            let family = ActivationFamily::new(vec![Slot::new(Relu), Slot::new(EluNeg)])?;
            let mut p = AdaptiveParams::fixed(vec![1.0, *a], vec![1.0, 1.0]);
            p.omega_trainable[1] = true;
            Ok((family, p))
        }
        SpecialCase::Selu => {
            let family = ActivationFamily::new(vec![Slot::new(Relu), Slot::new(EluNeg)])?;
            let p = AdaptiveParams::fixed(vec![1.0, SELU_LAMBDA * SELU_ALPHA], vec![SELU_LAMBDA, 1.0]);
            Ok((family, p))
        }
        SpecialCase::LLaaf { base, n } => {
            let family = ActivationFamily::new(vec![base_slot(*base, *n)])?;
            let p = scheme_params(Scheme::LLaaf, 1, *n, OmegaInit::InverseN)?;
            Ok((family, p))
        }
        SpecialCase::Slaf { k } => {
            if *k == 0 {
                return Err(KronError::Precondition("SLAF needs K >= 1".into()));
            }
            let slots = (0..*k).map(|p| Slot::new(Power(p as u32))).collect();
            let mut p = AdaptiveParams::fixed(vec![0.0; *k], vec![1.0; *k]);
            p.alpha[1.min(*k - 1)] = 1.0;
            p.alpha_trainable = vec![true; *k];
            Ok((ActivationFamily::new(slots)?, p))
        }
        SpecialCase::Rowdy(cfg) => Ok((cfg.family()?, rowdy_init(cfg)?)),
        SpecialCase::Knn1 { n } => knn_mix(*n, &[Tanh; 8]),
        SpecialCase::Knn2 { n } => knn_mix(*n, &[Relu; 8]),
        // The eighth entry is listed as a softmax, which is not a scalar map;
        // the logistic sigmoid is its two-class scalar counterpart.
        SpecialCase::Knn3 { n } => knn_mix(*n, &[Tanh, Sigmoid, Elu, Relu, Tanh, Tanh, Sigmoid, Swish]),
    }
}

/// Activation choice for every hidden layer of a model, by experiment name:
/// `fixed`, `llaaf`, `rowdy<K>`, `knn1`, `knn2`, `knn3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeName {
    Fixed,
    LLaaf,
    Rowdy(usize),
    Knn1,
    Knn2,
    Knn3,
}

impl FromStr for SchemeName {
    type Err = KronError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', '_'], "");
        Ok(match key.as_str() {
            "fixed" => SchemeName::Fixed,
            "llaaf" => SchemeName::LLaaf,
            "knn1" => SchemeName::Knn1,
            "knn2" => SchemeName::Knn2,
            "knn3" => SchemeName::Knn3,
            _ => match key.strip_prefix("rowdy").and_then(|k| k.parse::<usize>().ok()) {
                Some(k) if k >= 1 => SchemeName::Rowdy(k),
                _ => {
                    return Err(KronError::UnknownName {
                        kind: "activation scheme",
                        name: s.to_string(),
                    })
                }
            },
        })
    }
}

impl fmt::Display for SchemeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemeName::Fixed => write!(f, "fixed"),
            SchemeName::LLaaf => write!(f, "llaaf"),
            SchemeName::Rowdy(k) => write!(f, "rowdy{k}"),
            SchemeName::Knn1 => write!(f, "knn1"),
            SchemeName::Knn2 => write!(f, "knn2"),
            SchemeName::Knn3 => write!(f, "knn3"),
        }
    }
}

/// Everything needed to build the hidden-layer activations of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSpec {
    pub scheme: SchemeName,
    pub base: Primitive,
    pub n: f64,
    pub harmonic: Harmonic,
    pub omega_init: OmegaInit,
}

impl ActivationSpec {
    pub fn new(scheme: SchemeName, base: Primitive, n: f64) -> Self {
        ActivationSpec {
            scheme,
            base,
            n,
            harmonic: Harmonic::Sin,
            omega_init: OmegaInit::InverseN,
        }
    }

    /// Shared family plus the per-layer initial parameters.
    pub fn build(&self) -> Result<(Arc<ActivationFamily>, AdaptiveParams)> {
        let (family, params) = match self.scheme {
            SchemeName::Fixed | SchemeName::LLaaf => {
                let scheme = if self.scheme == SchemeName::Fixed {
                    Scheme::Fixed
                } else {
                    Scheme::LLaaf
                };
                let family = ActivationFamily::new(vec![base_slot(self.base, self.n)])?;
                (family, scheme_params(scheme, 1, self.n, self.omega_init)?)
            }
            SchemeName::Rowdy(k) => {
                let cfg = RowdyConfig {
                    base: self.base,
                    k,
                    n: self.n,
                    harmonic: self.harmonic,
                    omega_init: self.omega_init,
                };
                (cfg.family()?, rowdy_init(&cfg)?)
            }
            SchemeName::Knn1 => make_special_case(&SpecialCase::Knn1 { n: self.n })?,
            SchemeName::Knn2 => make_special_case(&SpecialCase::Knn2 { n: self.n })?,
            SchemeName::Knn3 => make_special_case(&SpecialCase::Knn3 { n: self.n })?,
        };
        Ok((Arc::new(family), params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn fd(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn primitive_derivatives_match_finite_differences() {
        let prims = [
            Primitive::Identity,
            Primitive::Tanh,
            Primitive::Sin,
            Primitive::Cos,
            Primitive::Elu,
            Primitive::Sigmoid,
            Primitive::Swish,
            Primitive::Softplus,
            Primitive::Power(3),
        ];
        for p in prims {
            for &x in &[-1.7, -0.4, 0.3, 1.1, 2.5] {
                let d = p.derivs(x);
                for j in 0..3 {
                    let num = fd(|t| p.derivs(t)[j], x, 1e-5);
                    let err = (num - d[j + 1]).abs() / d[j + 1].abs().max(1.0);
                    assert!(err < 1e-7, "{p:?} order {j} at {x}: {num} vs {}", d[j + 1]);
                }
            }
        }
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        assert_eq!(Primitive::Relu.derivs(0.0), [0.0; 4]);
        assert_eq!(Primitive::Relu.derivs(2.0)[1], 1.0);
        assert_eq!(Primitive::ReluNeg.derivs(0.0)[1], 0.0);
    }

    #[test]
    fn fixed_tanh_at_zero() {
        let (fam, p) = make_special_case(&SpecialCase::Ffn {
            base: Primitive::Tanh,
        })
        .unwrap();
        assert_eq!(adaptive_eval(&fam, &p, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn rowdy_cos_at_init_is_base() {
        let cfg = RowdyConfig::new(Primitive::Cos, 2, 10.0);
        let fam = cfg.family().unwrap();
        let p = rowdy_init(&cfg).unwrap();
        assert_eq!(p.alpha, vec![1.0, 0.0]);
        assert_eq!(10.0 * p.omega[0], 1.0);
        assert_eq!(adaptive_eval(&fam, &p, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn rowdy_sine_zeros() {
        let mut cfg = RowdyConfig::new(Primitive::Tanh, 3, 1.0);
        cfg.harmonic = Harmonic::Sin;
        let fam = cfg.family().unwrap();
        let p = AdaptiveParams::fixed(vec![1.0; 3], vec![1.0; 3]);
        let v = adaptive_eval(&fam, &p, PI).unwrap();
        assert!((v - PI.tanh()).abs() < 1e-14);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let fam = ActivationFamily::single(Primitive::Tanh);
        let p = AdaptiveParams::fixed(vec![1.0, 0.0], vec![1.0, 1.0]);
        assert!(matches!(
            adaptive_eval(&fam, &p, 0.1),
            Err(KronError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn ffn_case_is_base_activation() {
        let (fam, p) = make_special_case(&SpecialCase::Ffn {
            base: Primitive::Sin,
        })
        .unwrap();
        for i in 0..50 {
            let z = -3.0 + 0.12 * i as f64;
            assert_eq!(adaptive_eval(&fam, &p, z).unwrap(), z.sin());
        }
        assert_eq!(p.trainable_count(), 0);
    }

    #[test]
    fn prelu_matches_closed_form() {
        let (fam, p) = make_special_case(&SpecialCase::Prelu { slope: 0.25 }).unwrap();
        let oracle = |z: f64| if z >= 0.0 { z } else { 0.25 * z };
        assert_eq!(adaptive_eval(&fam, &p, -2.0).unwrap(), -0.5);
        for i in 0..100 {
            let z = -5.0 + 0.1 * i as f64;
            assert!((adaptive_eval(&fam, &p, z).unwrap() - oracle(z)).abs() < 1e-12);
        }
        assert_eq!(p.omega_trainable, vec![false, true]);
    }

    #[test]
    fn elu_and_selu_match_closed_forms() {
        let (fam, p) = make_special_case(&SpecialCase::Elu { a: 1.0 }).unwrap();
        let (sfam, sp) = make_special_case(&SpecialCase::Selu).unwrap();
        for i in 0..1000 {
            let z = -6.0 + 12.0 * i as f64 / 999.0;
            let elu = if z > 0.0 { z } else { z.exp() - 1.0 };
            let selu = SELU_LAMBDA * if z > 0.0 { z } else { SELU_ALPHA * (z.exp() - 1.0) };
            assert!((adaptive_eval(&fam, &p, z).unwrap() - elu).abs() < 1e-12);
            assert!((adaptive_eval(&sfam, &sp, z).unwrap() - selu).abs() < 1e-12);
        }
        // continuity of the indicator form at zero
        let l = adaptive_eval(&fam, &p, -1e-12).unwrap();
        let r = adaptive_eval(&fam, &p, 1e-12).unwrap();
        assert!((l - r).abs() < 1e-11);
    }

    #[test]
    fn slaf_polynomial() {
        let (fam, mut p) = make_special_case(&SpecialCase::Slaf { k: 3 }).unwrap();
        p.alpha = vec![1.0, 2.0, 3.0];
        assert_eq!(adaptive_eval(&fam, &p, 2.0).unwrap(), 17.0);
    }

    #[test]
    fn rowdy_init_matches_base_exactly() {
        let cfg = RowdyConfig::new(Primitive::Tanh, 5, 10.0);
        let fam = cfg.family().unwrap();
        let p = rowdy_init(&cfg).unwrap();
        for i in 0..1000 {
            let z = -4.0 + 8.0 * (i as f64 * 0.618_033_988_75).fract();
            assert_eq!(adaptive_eval(&fam, &p, z).unwrap(), z.tanh());
        }
    }

    #[test]
    fn rowdy_k1_is_fixed_shape() {
        let cfg = RowdyConfig::new(Primitive::Tanh, 1, 1.0);
        let p = rowdy_init(&cfg).unwrap();
        assert_eq!(p.alpha, vec![1.0]);
        assert_eq!(p.omega, vec![1.0]);
        assert!(!p.alpha_trainable[0]);
        assert!(rowdy_init(&RowdyConfig::new(Primitive::Tanh, 0, 1.0)).is_err());
    }

    #[test]
    fn rowdy_alpha_sensitivity_after_init() {
        let cfg = RowdyConfig::new(Primitive::Tanh, 3, 10.0);
        let fam = cfg.family().unwrap();
        let p = rowdy_init(&cfg).unwrap();
        let z = 0.5;
        let h = 1e-6;
        let mut hi = p.clone();
        hi.alpha[1] += h;
        let mut lo = p.clone();
        lo.alpha[1] -= h;
        let num = (adaptive_eval(&fam, &hi, z).unwrap() - adaptive_eval(&fam, &lo, z).unwrap()) / (2.0 * h);
        let expected = 10.0 * (10.0 * p.omega[1] * 0.5).sin();
        assert!((num - expected).abs() < 1e-7);
    }

    #[test]
    fn scheme_masks_follow_the_table() {
        let fixed = scheme_params(Scheme::Fixed, 4, 10.0, OmegaInit::InverseN).unwrap();
        assert_eq!(fixed.trainable_count(), 0);
        assert_eq!(fixed.alpha, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(&fixed.omega[1..], &[0.0, 0.0, 0.0]);

        let llaaf = scheme_params(Scheme::LLaaf, 4, 10.0, OmegaInit::InverseN).unwrap();
        assert_eq!(llaaf.omega_trainable, vec![true, false, false, false]);
        assert!(llaaf.alpha_trainable.iter().all(|t| !t));

        let rowdy = scheme_params(Scheme::Rowdy, 4, 10.0, OmegaInit::Unit).unwrap();
        assert_eq!(rowdy.alpha_trainable, vec![false, true, true, true]);
        assert_eq!(rowdy.omega_trainable, vec![true; 4]);
        assert_eq!(rowdy.omega, vec![0.1, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn rowdy_second_derivative_is_analytic() {
        let cfg = RowdyConfig::new(Primitive::Tanh, 4, 3.0);
        let fam = cfg.family().unwrap();
        let x = 0.37;
        for k in 2..=4usize {
            let d = fam.slots()[k - 1].derivs(x);
            let km1 = (k - 1) as f64;
            let expected = -27.0 * km1 * km1 * (km1 * 3.0 * x).sin();
            assert!((d[2] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in ["fixed", "llaaf", "rowdy9", "knn1", "knn2", "knn3"] {
            let parsed: SchemeName = s.parse().unwrap();
            assert_eq!(parsed.to_string(), s);
        }
        assert!("rowdy".parse::<SchemeName>().is_err());
        assert!("swirl".parse::<SpecialCase>().is_err());
    }

    #[test]
    fn knn3_uses_sigmoid_in_place_of_softmax() {
        let (fam, p) = make_special_case(&SpecialCase::Knn3 { n: 10.0 }).unwrap();
        assert_eq!(fam.k(), 9);
        assert_eq!(fam.slots()[7].primitive, Primitive::Sigmoid);
        assert_eq!(fam.slots()[8].primitive, Primitive::Swish);
        assert_eq!(p.alpha[0], 1.0);
    }
}
