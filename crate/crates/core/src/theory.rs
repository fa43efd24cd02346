//! Gradient-flow analysis of two-layer Kronecker networks.
//!
//! The model is `u(x) = sum_i c_i sum_k alpha_k phi_k(omega_k v_i^T x~)` on
//! augmented inputs `x~`. Parameters are stacked as
//! `Theta = [c; v_1; ...; v_N; alpha; omega]`, and the gradient of the square
//! loss is `M Res(X)` with `M = [C; B; A; Omega]`, one row per parameter and
//! one column per data point.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::activations::{ActivationFamily, AdaptiveParams, Primitive, Slot, Smoothness};
use crate::error::{check_dim, KronError, Result};
use crate::linalg::singular_values;
use crate::network::{init_model_with, InitScheme, KnnModel, XiDist};
use crate::training::gd_update;

/// Tolerance on `|x~_j| = 1` in theory mode.
pub const NORM_TOL: f64 = 1e-12;

/// `{tanh, sin x, sin 2x, ..., sin((K-1)x)}`.
pub fn trig_family(k: usize) -> Result<ActivationFamily> {
    let mut slots = vec![Slot::new(Primitive::Tanh)];
    slots.extend((1..k).map(|j| Slot::scaled(Primitive::Sin, 1.0, j as f64)));
    ActivationFamily::new(slots)
}

/// `{tanh, sin x, sin(2x)/2, ..., sin((K-1)x)/(K-1)}`: every member and
/// every derivative is bounded by one, and every member is odd.
pub fn normalized_trig_family(k: usize) -> Result<ActivationFamily> {
    let mut slots = vec![Slot::new(Primitive::Tanh)];
    slots.extend((1..k).map(|j| Slot::scaled(Primitive::Sin, 1.0 / j as f64, j as f64)));
    ActivationFamily::new(slots)
}

/// Which parameter groups follow the flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainMask {
    pub c: bool,
    pub v: bool,
    pub alpha: bool,
    pub omega: bool,
}

impl TrainMask {
    /// Everything trains (the Kronecker network).
    pub const FULL: TrainMask = TrainMask {
        c: true,
        v: true,
        alpha: true,
        omega: true,
    };
    /// Only `c` and `v` train (the plain network).
    pub const FFN: TrainMask = TrainMask {
        c: true,
        v: true,
        alpha: false,
        omega: false,
    };
    /// `c` and `omega` frozen.
    pub const THEOREM32: TrainMask = TrainMask {
        c: false,
        v: true,
        alpha: true,
        omega: false,
    };
}

/// Training inputs `x~_j` (rows, already augmented) and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryData {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
}

impl TheoryData {
    pub fn new(x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        check_dim("theory targets", x.nrows(), y.len())?;
        Ok(TheoryData { x, y })
    }

    /// Appends `1/sqrt(2)` to every raw input and rescales to unit norm.
    pub fn augment_normalized(raw: &Array2<f64>, y: Array1<f64>) -> Result<Self> {
        let (m, d) = raw.dim();
        let mut x = Array2::zeros((m, d + 1));
        for j in 0..m {
            for i in 0..d {
                x[[j, i]] = raw[[j, i]];
            }
            x[[j, d]] = std::f64::consts::FRAC_1_SQRT_2;
            let norm = x.row(j).dot(&x.row(j)).sqrt();
            x.row_mut(j).mapv_inplace(|v| v / norm);
        }
        TheoryData::new(x, y)
    }

    /// Appends a plain 1 to every raw input, no rescaling.
    pub fn augment_ones(raw: &Array2<f64>, y: Array1<f64>) -> Result<Self> {
        let (m, d) = raw.dim();
        let x = Array2::from_shape_fn((m, d + 1), |(j, i)| if i < d { raw[[j, i]] } else { 1.0 });
        TheoryData::new(x, y)
    }

    pub fn m(&self) -> usize {
        self.x.nrows()
    }

    pub fn check_normalized(&self) -> Result<()> {
        for (j, row) in self.x.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > NORM_TOL {
                return Err(KronError::Precondition(format!(
                    "input {j} has norm {n}, theory mode needs unit-norm augmented inputs"
                )));
            }
        }
        Ok(())
    }

    /// `m` points with raw coordinates uniform on `[-1, 1]^d`, normalized
    /// augmentation, and targets uniform on `[-1, 1]`.
    pub fn random(m: usize, d: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let raw = Array2::from_shape_simple_fn((m, d), || rng.random_range(-1.0..=1.0));
        let y = Array1::from_shape_simple_fn(m, || rng.random_range(-1.0..=1.0));
        TheoryData::augment_normalized(&raw, y)
    }

    /// Copy with targets rescaled to norm `y_norm`.
    pub fn with_y_norm(&self, y_norm: f64) -> Result<Self> {
        let n = self.y.dot(&self.y).sqrt();
        if n == 0.0 {
            return Err(KronError::ZeroNorm);
        }
        Ok(TheoryData {
            x: self.x.clone(),
            y: &self.y * (y_norm / n),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerModel {
    pub c: Array1<f64>,
    /// Row `i` is `v_i`.
    pub v: Array2<f64>,
    pub alpha: Vec<f64>,
    pub omega: Vec<f64>,
    pub family: Arc<ActivationFamily>,
}

impl TwoLayerModel {
    pub fn new(
        c: Array1<f64>,
        v: Array2<f64>,
        alpha: Vec<f64>,
        omega: Vec<f64>,
        family: Arc<ActivationFamily>,
    ) -> Result<Self> {
        check_dim("output weights", v.nrows(), c.len())?;
        check_dim("alpha", family.k(), alpha.len())?;
        check_dim("omega", family.k(), omega.len())?;
        Ok(TwoLayerModel {
            c,
            v,
            alpha,
            omega,
            family,
        })
    }

    /// Reads `v_i = [w_i; b_i]` and `c` from a one-hidden-layer scalar-output
    /// model without output bias. With `x~ = [x; 1]` both agree pointwise.
    pub fn from_knn(model: &KnnModel) -> Result<Self> {
        if model.depth() != 2 || model.output_dim() != 1 {
            return Err(KronError::Precondition(
                "two-layer form needs one hidden layer and a scalar output".into(),
            ));
        }
        if model.layers[1].bias[0] != 0.0 {
            return Err(KronError::Precondition("two-layer form has no output bias".into()));
        }
        let h = &model.layers[0];
        let (n, d) = h.weight.dim();
        let v = Array2::from_shape_fn((n, d + 1), |(i, j)| if j < d { h.weight[[i, j]] } else { h.bias[i] });
        let p = h.adaptive.as_ref().expect("hidden layer is adaptive");
        TwoLayerModel::new(
            model.layers[1].weight.row(0).to_owned(),
            v,
            p.alpha.clone(),
            p.omega.clone(),
            model.family.clone(),
        )
    }

    /// Theory initialization: `v_i ~ N(0, I)`, `c_i ~ N(0, 1)`,
    /// `alpha = e_1`, `omega = 1`.
    pub fn init_theory(family: Arc<ActivationFamily>, n: usize, dim_aug: usize, seed: u64) -> Result<Self> {
        let k = family.k();
        let knn = init_model_with(
            &[dim_aug - 1, n, 1],
            family,
            &AdaptiveParams::fixed(vec![0.0; k], vec![1.0; k]),
            &InitScheme::Theory,
            seed,
        )?;
        TwoLayerModel::from_knn(&knn)
    }

    /// Initialization of the convergence regime:
    /// `c_i = |y| / (K N sqrt(m)) xi_i`, `alpha = 1/K`, `omega = 1`.
    pub fn init_theorem32(
        family: Arc<ActivationFamily>,
        n: usize,
        dim_aug: usize,
        y_norm: f64,
        m: usize,
        xi: XiDist,
        seed: u64,
    ) -> Result<Self> {
        let k = family.k();
        let knn = init_model_with(
            &[dim_aug - 1, n, 1],
            family,
            &AdaptiveParams::fixed(vec![0.0; k], vec![1.0; k]),
            &InitScheme::Theorem32 { y_norm, m, xi },
            seed,
        )?;
        TwoLayerModel::from_knn(&knn)
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    /// Length of `x~`.
    pub fn dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn theta_len(&self) -> usize {
        self.n() * (self.dim() + 1) + 2 * self.k()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut u = 0.0;
        for i in 0..self.n() {
            let z: f64 = self.v.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
            let mut s = 0.0;
            for k in 0..self.k() {
                s += self.alpha[k] * self.family.slot_derivs(k, self.omega[k], z)[0];
            }
            u += self.c[i] * s;
        }
        u
    }

    pub fn outputs(&self, data: &TheoryData) -> Array1<f64> {
        Array1::from_iter(
            data.x
                .rows()
                .into_iter()
                .map(|r| self.eval(r.as_slice().expect("contiguous row"))),
        )
    }

    /// `u(x_j) - y_j`.
    pub fn residual(&self, data: &TheoryData) -> Array1<f64> {
        self.outputs(data) - &data.y
    }

    /// `1/2 |Res|^2`.
    pub fn loss(&self, data: &TheoryData) -> f64 {
        let r = self.residual(data);
        0.5 * r.dot(&r)
    }

    pub fn theta(&self) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.theta_len());
        t.extend(self.c.iter());
        t.extend(self.v.iter());
        t.extend(&self.alpha);
        t.extend(&self.omega);
        t
    }

    pub fn set_theta(&mut self, t: &[f64]) -> Result<()> {
        check_dim("theta", self.theta_len(), t.len())?;
        let (n, nv, k) = (self.n(), self.v.len(), self.k());
        self.c.as_slice_mut().expect("contiguous").copy_from_slice(&t[..n]);
        self.v
            .as_slice_mut()
            .expect("contiguous")
            .copy_from_slice(&t[n..n + nv]);
        self.alpha.copy_from_slice(&t[n + nv..n + nv + k]);
        self.omega.copy_from_slice(&t[n + nv + k..]);
        Ok(())
    }

    /// Row mask over `Theta` for the trainable groups.
    pub fn theta_mask(&self, mask: TrainMask) -> Vec<bool> {
        let mut out = vec![mask.c; self.n()];
        out.extend(std::iter::repeat_n(mask.v, self.v.len()));
        out.extend(std::iter::repeat_n(mask.alpha, self.k()));
        out.extend(std::iter::repeat_n(mask.omega, self.k()));
        out
    }

    fn check_c1(&self) -> Result<()> {
        match self.family.first_non_smooth() {
            Some(s) if s.primitive.smoothness() == Smoothness::Kink => Err(KronError::NonSmoothActivation {
                label: s.label.clone(),
            }),
            _ => Ok(()),
        }
    }
}

/// Gradient-flow matrices for one model and data set.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryMatrices {
    /// `N x m`
    pub c: Array2<f64>,
    /// `(d+1)N x m`, rows of `v_i` contiguous.
    pub b: Array2<f64>,
    /// `K x m`
    pub a: Array2<f64>,
    /// `K x m`
    pub omega: Array2<f64>,
}

impl TheoryMatrices {
    /// Stacked `[C; B; A; Omega]`.
    pub fn stacked(&self) -> Array2<f64> {
        ndarray::concatenate(
            ndarray::Axis(0),
            &[self.c.view(), self.b.view(), self.a.view(), self.omega.view()],
        )
        .expect("blocks share the column count")
    }

    /// Squared Frobenius norm over the rows of trainable groups.
    pub fn masked_fro_sq(&self, mask: TrainMask) -> f64 {
        let sq = |m: &Array2<f64>, on: bool| if on { m.iter().map(|x| x * x).sum() } else { 0.0 };
        sq(&self.c, mask.c) + sq(&self.b, mask.v) + sq(&self.a, mask.alpha) + sq(&self.omega, mask.omega)
    }

    /// `M Res`, with rows of frozen groups zeroed.
    pub fn gradient(&self, res: &Array1<f64>, mask: TrainMask) -> Array1<f64> {
        let part = |m: &Array2<f64>, on: bool| {
            if on {
                m.dot(res)
            } else {
                Array1::zeros(m.nrows())
            }
        };
        ndarray::concatenate(
            ndarray::Axis(0),
            &[
                part(&self.c, mask.c).view(),
                part(&self.b, mask.v).view(),
                part(&self.a, mask.alpha).view(),
                part(&self.omega, mask.omega).view(),
            ],
        )
        .expect("vectors")
    }
}

/// Theory-mode matrices: inputs must be unit-norm augmented points.
pub fn build_matrices(model: &TwoLayerModel, data: &TheoryData) -> Result<TheoryMatrices> {
    data.check_normalized()?;
    build_matrices_unchecked(model, data)
}

/// Same as [`build_matrices`] for any augmentation.
pub fn build_matrices_unchecked(model: &TwoLayerModel, data: &TheoryData) -> Result<TheoryMatrices> {
    check_dim("augmented input", model.dim(), data.x.ncols())?;
    model.check_c1()?;
    let (n, k, m, dd) = (model.n(), model.k(), data.m(), model.dim());
    let mut c = Array2::zeros((n, m));
    let mut b = Array2::zeros((n * dd, m));
    let mut a = Array2::zeros((k, m));
    let mut om = Array2::zeros((k, m));
    for j in 0..m {
        let x = data.x.row(j);
        for i in 0..n {
            let z = model.v.row(i).dot(&x);
            let ci = model.c[i];
            let mut sum0 = 0.0;
            let mut sum1 = 0.0;
            for s in 0..k {
                let d = model.family.slot_derivs(s, model.omega[s], z);
                sum0 += model.alpha[s] * d[0];
                sum1 += model.alpha[s] * model.omega[s] * d[1];
                a[[s, j]] += ci * d[0];
                om[[s, j]] += model.alpha[s] * ci * z * d[1];
            }
            c[[i, j]] = sum0;
            for r in 0..dd {
                b[[i * dd + r, j]] = ci * x[r] * sum1;
            }
        }
    }
    Ok(TheoryMatrices { c, b, a, omega: om })
}

/// `dL/dt = -|M Res|^2`.
pub fn loss_decay_rate(mats: &TheoryMatrices, residual: &Array1<f64>) -> f64 {
    let g = mats.stacked().dot(residual);
    -g.dot(&g)
}

/// `Psi` with `[Psi]_kj = sum_i c_i phi_k(omega_k v_i^T x~_j)` (the `A`
/// block; at `omega = 1` this is the plain `psi_k`) and its `m`-th largest
/// singular value.
pub fn psi_sigma_min(model: &TwoLayerModel, data: &TheoryData) -> Result<(Array2<f64>, f64)> {
    let (k, m) = (model.k(), data.m());
    if m > k {
        return Err(KronError::Precondition(format!(
            "need K >= m, got K = {k}, m = {m}"
        )));
    }
    let psi = build_matrices_unchecked(model, data)?.a;
    let sv = singular_values(&psi)?;
    Ok((psi, sv[m - 1]))
}

/// `Psi` weighted by `alpha_k` row-wise.
pub fn psi_weighted(model: &TwoLayerModel, data: &TheoryData) -> Result<Array2<f64>> {
    let mut a = build_matrices_unchecked(model, data)?.a;
    for (k, mut row) in a.rows_mut().into_iter().enumerate() {
        row *= model.alpha[k];
    }
    Ok(a)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowOptions {
    pub dt: f64,
    pub max_steps: usize,
    /// Stop once this time is reached.
    pub t_end: Option<f64>,
    pub max_halvings: usize,
}

impl FlowOptions {
    pub fn steps(dt: f64, max_steps: usize) -> Self {
        FlowOptions {
            dt,
            max_steps,
            t_end: None,
            max_halvings: 20,
        }
    }
}

/// Samples of an explicit-Euler gradient-flow run; index 0 is the start.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrajectory {
    pub times: Vec<f64>,
    pub losses: Vec<f64>,
    pub residuals: Vec<Array1<f64>>,
    pub theta_norm_drift: Vec<f64>,
    pub final_model: TwoLayerModel,
    pub dt_final: f64,
    pub halvings: usize,
    /// Accepted steps that still increased the loss after all halvings.
    pub monotone_violations: usize,
    /// Step at which a non-finite loss stopped the run.
    pub aborted_at: Option<usize>,
}

/// Explicit Euler on `Theta' = -grad L` restricted to `mask`. A step that
/// raises the loss by more than `1e-12` is retried with half the step, up to
/// `max_halvings` times over the whole run.
pub fn euler_flow(
    model: &TwoLayerModel,
    data: &TheoryData,
    mask: TrainMask,
    opts: FlowOptions,
) -> Result<FlowTrajectory> {
    if opts.dt.is_nan() || opts.dt <= 0.0 {
        return Err(KronError::Precondition("flow step must be positive".into()));
    }
    let mut cur = model.clone();
    let theta0 = model.theta();
    let mut res = cur.residual(data);
    let mut loss = 0.5 * res.dot(&res);
    let mut traj = FlowTrajectory {
        times: vec![0.0],
        losses: vec![loss],
        residuals: vec![res.clone()],
        theta_norm_drift: vec![0.0],
        final_model: cur.clone(),
        dt_final: opts.dt,
        halvings: 0,
        monotone_violations: 0,
        aborted_at: None,
    };
    let mut dt = opts.dt;
    let mut t = 0.0;
    // Frozen rows of the gradient are already zero.
    let all = vec![true; theta0.len()];
    for step in 0..opts.max_steps {
        if let Some(end) = opts.t_end {
            if t >= end * (1.0 - 1e-12) {
                break;
            }
        }
        let g = build_matrices_unchecked(&cur, data)?.gradient(&res, mask);
        let theta = cur.theta();
        let mut next = cur.clone();
        loop {
            let mut cand = theta.clone();
            gd_update(&mut cand, g.as_slice().expect("contiguous"), dt, &all);
            next.set_theta(&cand)?;
            let r = next.residual(data);
            let l = 0.5 * r.dot(&r);
            if !l.is_finite() {
                traj.aborted_at = Some(step);
                traj.final_model = cur;
                traj.dt_final = dt;
                return Ok(traj);
            }
            if l > loss + 1e-12 {
                if traj.halvings < opts.max_halvings {
                    traj.halvings += 1;
                    dt *= 0.5;
                    continue;
                }
                traj.monotone_violations += 1;
            }
            res = r;
            loss = l;
            break;
        }
        cur = next;
        t += dt;
        let drift = cur
            .theta()
            .iter()
            .zip(&theta0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        traj.times.push(t);
        traj.losses.push(loss);
        traj.residuals.push(res.clone());
        traj.theta_norm_drift.push(drift);
    }
    traj.final_model = cur;
    traj.dt_final = dt;
    Ok(traj)
}

/// Sizes for the early-dominance experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyDominanceSetup {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub d: usize,
    pub steps: usize,
}

impl Default for EarlyDominanceSetup {
    fn default() -> Self {
        EarlyDominanceSetup {
            n: 16,
            k: 5,
            m: 4,
            d: 1,
            steps: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EarlyDominance {
    pub traj_knn: FlowTrajectory,
    pub traj_ffn: FlowTrajectory,
    /// Number of leading steps `j >= 1` with `L_knn(t_j) < L_ffn(t_j)`.
    pub window_steps: usize,
    pub window_time: f64,
    /// `|A Res|^2` at `t = 0`.
    pub rate_gap: f64,
    pub dt: f64,
}

/// How the common Euler step of the early-dominance comparison is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// `0.1 / |M(0)|_F^2`, halved until neither run needs its own halving.
    Stability,
    /// Stability step, further halved until the step-doubling estimate of
    /// the one-step loss error is below `rel_tol * dt * (rate difference)`
    /// for both runs, so the discrete comparison resolves the initial gap.
    Accuracy { rel_tol: f64 },
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule::Accuracy { rel_tol: 0.01 }
    }
}

fn one_step_error(model: &TwoLayerModel, data: &TheoryData, mask: TrainMask, dt: f64) -> Result<f64> {
    let mut opts = FlowOptions::steps(dt, 1);
    opts.max_halvings = 0;
    let full = euler_flow(model, data, mask, opts)?;
    opts.dt = 0.5 * dt;
    opts.max_steps = 2;
    let half = euler_flow(model, data, mask, opts)?;
    Ok((full.losses[1] - half.losses[2]).abs())
}

/// Integrates the Kronecker flow (everything trains) and the plain flow
/// (`alpha = e_1`, `omega = 1` frozen) from the same `c, V` with the same
/// step chosen by `rule`.
pub fn early_dominance_experiment(
    model: &TwoLayerModel,
    data: &TheoryData,
    steps: usize,
    rule: StepRule,
) -> Result<EarlyDominance> {
    if model.alpha[0] != 1.0
        || model.alpha[1..].iter().any(|&a| a != 0.0)
        || model.omega.iter().any(|&w| w != 1.0)
    {
        return Err(KronError::Precondition(
            "matched initialization needs alpha = e_1 and omega = 1".into(),
        ));
    }
    let mats = build_matrices(model, data)?;
    let res = model.residual(data);
    let rate_gap = {
        let ar = mats.a.dot(&res);
        ar.dot(&ar)
    };
    let rate_diff = {
        let g = mats.gradient(&res, TrainMask::FULL);
        let f = mats.gradient(&res, TrainMask::FFN);
        g.dot(&g) - f.dot(&f)
    };
    let fro = mats.masked_fro_sq(TrainMask::FULL);
    let mut dt = if fro > 0.0 { 0.1 / fro } else { 1e-3 };
    if let StepRule::Accuracy { rel_tol } = rule {
        for _ in 0..20 {
            let err = one_step_error(model, data, TrainMask::FULL, dt)?
                .max(one_step_error(model, data, TrainMask::FFN, dt)?);
            if err <= rel_tol * dt * rate_diff {
                break;
            }
            dt *= 0.5;
        }
    }
    for _ in 0..=20 {
        let knn = euler_flow(model, data, TrainMask::FULL, FlowOptions::steps(dt, steps))?;
        let ffn = euler_flow(model, data, TrainMask::FFN, FlowOptions::steps(dt, steps))?;
        if knn.halvings == 0 && ffn.halvings == 0 {
            let mut window = 0;
            for j in 1..knn.losses.len().min(ffn.losses.len()) {
                if knn.losses[j] < ffn.losses[j] {
                    window = j;
                } else {
                    break;
                }
            }
            return Ok(EarlyDominance {
                window_time: knn.times[window],
                traj_knn: knn,
                traj_ffn: ffn,
                window_steps: window,
                rate_gap,
                dt,
            });
        }
        dt *= 0.5;
    }
    Err(KronError::Precondition(
        "no stable common step found after 20 halvings".into(),
    ))
}

/// Outcome of the convergence-condition checker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    /// Smallest integer `K >= (1 + sqrt(1 + 4 lambda0)) |y|^2 / lambda0`.
    pub k_sufficient_b1: usize,
    /// Predicted exponential rate `lambda0 / 2`.
    pub rate: f64,
}

/// `(lambda0 sqrt(K) - 2 |y|^2 B) K >= 2 (1 + delta) |y|^2 B^2`.
pub fn convergence_condition(k: usize, lambda0: f64, y_norm: f64, b: f64, delta: f64) -> ConditionReport {
    let y2 = y_norm * y_norm;
    let kf = k as f64;
    let lhs = (lambda0 * kf.sqrt() - 2.0 * y2 * b) * kf;
    let rhs = 2.0 * (1.0 + delta) * y2 * b * b;
    let kb1 = (1.0 + (1.0 + 4.0 * lambda0).sqrt()) * y2 / lambda0;
    ConditionReport {
        lhs,
        rhs,
        holds: lhs >= rhs,
        k_sufficient_b1: kb1.ceil() as usize,
        rate: lambda0 / 2.0,
    }
}

/// Largest `|y|` for which the condition holds when `lambda0 = kappa |y|`.
pub fn max_y_norm_for_condition(kappa: f64, k: usize, b: f64, delta: f64) -> f64 {
    let kf = k as f64;
    kappa * kf * kf.sqrt() / (2.0 * b * kf + 2.0 * (1.0 + delta) * b * b)
}

/// Both sides of the Appendix B perturbation and initial-misfit bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AppendixBReport {
    /// `|Psi_alpha(Theta) - Psi_alpha(Theta0)|_2`.
    pub b1_lhs_weighted: f64,
    /// Same with the unweighted `A` block.
    pub b1_lhs_unweighted: f64,
    pub b1_rhs: f64,
    /// `sqrt(2 L(0))`.
    pub b3_lhs: f64,
    /// `|y| (1 + (1 + delta) B)`.
    pub b3_rhs: f64,
    /// `|y| (1 + (1 + delta) B / K)`.
    pub b3_rhs_over_k: f64,
    /// `exp(-m delta^2 / (2 |X|^2))`.
    pub failure_bound: f64,
}

/// Evaluates the bounds for `model_t` against its starting point `model_0`;
/// `Theta` here is `(alpha, V)`.
pub fn appendix_b_bounds(
    model_t: &TwoLayerModel,
    model_0: &TwoLayerModel,
    data: &TheoryData,
    b: f64,
    delta: f64,
) -> Result<AppendixBReport> {
    let pw = psi_weighted(model_t, data)? - psi_weighted(model_0, data)?;
    let pu = build_matrices_unchecked(model_t, data)?.a - build_matrices_unchecked(model_0, data)?.a;
    let b1_lhs_weighted = singular_values(&pw)?[0];
    let b1_lhs_unweighted = singular_values(&pu)?[0];
    let max_x = data
        .x
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0, f64::max);
    let alpha_inf = model_0.alpha.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    let c1: f64 = model_0.c.iter().map(|x| x.abs()).sum();
    let (k, m) = (model_0.k() as f64, data.m() as f64);
    let dtheta = {
        let da: f64 = model_t
            .alpha
            .iter()
            .zip(&model_0.alpha)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let dv: f64 = (&model_t.v - &model_0.v).iter().map(|x| x * x).sum();
        (da + dv).sqrt()
    };
    let b1_rhs = (1.0 + (max_x * alpha_inf).powi(2)).sqrt() * c1 * b * (k * m).sqrt() * dtheta;
    let y_norm = data.y.dot(&data.y).sqrt();
    let x_norm = singular_values(&data.x)?[0];
    Ok(AppendixBReport {
        b1_lhs_weighted,
        b1_lhs_unweighted,
        b1_rhs,
        b3_lhs: (2.0 * model_0.loss(data)).sqrt(),
        b3_rhs: y_norm * (1.0 + (1.0 + delta) * b),
        b3_rhs_over_k: y_norm * (1.0 + (1.0 + delta) * b / k),
        failure_bound: (-m * delta * delta / (2.0 * x_norm * x_norm)).exp(),
    })
}

/// One line of a theory-check report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    /// `None` for summary rows.
    pub seed: Option<u64>,
    pub quantity: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

impl CheckRow {
    fn new(seed: Option<u64>, quantity: &str, lhs: f64, rhs: f64, pass: bool) -> Self {
        CheckRow {
            seed,
            quantity: quantity.to_string(),
            lhs,
            rhs,
            pass,
        }
    }
}

/// Named checks runnable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TheoryCheck {
    EarlyDominance,
    MatricesFd,
    DldtIdentity,
    Lambda0,
    CondK,
    AppendixB,
}

impl TheoryCheck {
    pub const ALL: [TheoryCheck; 6] = [
        TheoryCheck::EarlyDominance,
        TheoryCheck::MatricesFd,
        TheoryCheck::DldtIdentity,
        TheoryCheck::Lambda0,
        TheoryCheck::CondK,
        TheoryCheck::AppendixB,
    ];
}

impl FromStr for TheoryCheck {
    type Err = KronError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "early-dominance" => TheoryCheck::EarlyDominance,
            "matrices-fd" => TheoryCheck::MatricesFd,
            "dldt-identity" => TheoryCheck::DldtIdentity,
            "lambda0" => TheoryCheck::Lambda0,
            "cond-k" => TheoryCheck::CondK,
            "appendix-b" => TheoryCheck::AppendixB,
            _ => {
                return Err(KronError::UnknownName {
                    kind: "theory check",
                    name: s.to_string(),
                })
            }
        })
    }
}

impl fmt::Display for TheoryCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TheoryCheck::EarlyDominance => "early-dominance",
            TheoryCheck::MatricesFd => "matrices-fd",
            TheoryCheck::DldtIdentity => "dldt-identity",
            TheoryCheck::Lambda0 => "lambda0",
            TheoryCheck::CondK => "cond-k",
            TheoryCheck::AppendixB => "appendix-b",
        })
    }
}

/// Size overrides for the checks; `None` keeps each check's default.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CheckSizes {
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub m: Option<usize>,
    pub d: Option<usize>,
}

/// Writes `seed,quantity,lhs,rhs,pass`; summary rows carry the seed `all`.
pub fn write_check_report(path: &std::path::Path, rows: &[CheckRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seed", "quantity", "lhs", "rhs", "pass"])?;
    for r in rows {
        w.write_record([
            r.seed.map_or_else(|| "all".to_string(), |s| s.to_string()),
            r.quantity.clone(),
            r.lhs.to_string(),
            r.rhs.to_string(),
            r.pass.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Relative difference with a floor on the denominator.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between `M` and a central-difference Jacobian of
/// the outputs (rows of `M` are parameters, columns data points).
pub fn matrices_fd_error(model: &TwoLayerModel, data: &TheoryData, h: f64) -> Result<f64> {
    let m_an = build_matrices_unchecked(model, data)?.stacked();
    let theta = model.theta();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for p in 0..theta.len() {
        let mut t = theta.clone();
        t[p] += h;
        probe.set_theta(&t)?;
        let up = probe.outputs(data);
        t[p] -= 2.0 * h;
        probe.set_theta(&t)?;
        let dn = probe.outputs(data);
        for j in 0..data.m() {
            let num = (up[j] - dn[j]) / (2.0 * h);
            worst = worst.max(rel_err(m_an[[p, j]], num, 1e-3));
        }
    }
    Ok(worst)
}

/// Analytic `-|M Res|^2` against a central difference of the loss along the
/// flow direction, at the end of a short Euler run.
pub fn dldt_identity_error(model: &TwoLayerModel, data: &TheoryData, h: f64) -> Result<(f64, f64, f64)> {
    let mats = build_matrices(model, data)?;
    let fro = mats.stacked().iter().map(|x| x * x).sum::<f64>();
    let traj = euler_flow(model, data, TrainMask::FULL, FlowOptions::steps(0.05 / fro.max(1e-12), 10))?;
    let cur = traj.final_model;
    let res = cur.residual(data);
    let mats = build_matrices(&cur, data)?;
    let analytic = loss_decay_rate(&mats, &res);
    let g = mats.gradient(&res, TrainMask::FULL);
    let theta = cur.theta();
    let mut probe = cur.clone();
    let fwd: Vec<f64> = theta.iter().zip(g.iter()).map(|(p, gi)| p - h * gi).collect();
    probe.set_theta(&fwd)?;
    let lf = probe.loss(data);
    let bwd: Vec<f64> = theta.iter().zip(g.iter()).map(|(p, gi)| p + h * gi).collect();
    probe.set_theta(&bwd)?;
    let lb = probe.loss(data);
    let numeric = (lf - lb) / (2.0 * h);
    Ok((analytic, numeric, (analytic - numeric).abs() / analytic.abs().max(1e-300)))
}

fn small_instance(seed: u64, sizes: CheckSizes) -> Result<(TwoLayerModel, TheoryData)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let n = sizes.n.unwrap_or_else(|| rng.random_range(1..=4));
    let k = sizes.k.unwrap_or_else(|| rng.random_range(1..=4));
    let m = sizes.m.unwrap_or_else(|| rng.random_range(1..=3));
    let d = sizes.d.unwrap_or_else(|| rng.random_range(1..=2));
    let family = Arc::new(trig_family(k)?);
    let mut model = TwoLayerModel::init_theory(family, n, d + 1, seed)?;
    // Move away from the matched start so every block is exercised.
    for a in model.alpha.iter_mut() {
        *a += 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
    }
    for w in model.omega.iter_mut() {
        *w += 0.2 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
    }
    Ok((model, TheoryData::random(m, d, seed)?))
}

/// Convergence-regime instance: normalized trig family, targets rescaled so
/// that the condition holds with margin (`|y|` at half its largest
/// admissible value). Returns the model, data, `lambda0` and the report.
pub fn theorem32_instance(
    seed: u64,
    n: usize,
    k: usize,
    m: usize,
    d: usize,
    delta: f64,
) -> Result<(TwoLayerModel, TheoryData, f64, ConditionReport)> {
    let family = Arc::new(normalized_trig_family(k)?);
    let b = family.uniform_bound();
    let base = TheoryData::random(m, d, seed)?.with_y_norm(1.0)?;
    let probe = TwoLayerModel::init_theorem32(family.clone(), n, d + 1, 1.0, m, XiDist::Rademacher, seed)?;
    let (_, kappa) = psi_sigma_min(&probe, &base)?;
    let y_norm = 0.5 * max_y_norm_for_condition(kappa, k, b, delta);
    let data = base.with_y_norm(y_norm)?;
    let model = TwoLayerModel::init_theorem32(family, n, d + 1, y_norm, m, XiDist::Rademacher, seed)?;
    let (_, lambda0) = psi_sigma_min(&model, &data)?;
    let report = convergence_condition(k, lambda0, y_norm, b, delta);
    Ok((model, data, lambda0, report))
}

/// Decay measurement in the convergence regime over `t in [0, 2 / lambda0]`.
#[derive(Debug, Clone)]
pub struct DecayMeasurement {
    pub lambda0: f64,
    pub condition: ConditionReport,
    pub t_end: f64,
    /// `max_t L(t) / (L(0) exp(-lambda0 t / 2))`.
    pub worst_ratio: f64,
    /// Same against `exp(-lambda0^2 t / 2)`.
    pub worst_ratio_squared: f64,
    /// `max_t |Theta(t) - Theta(0)| / sqrt(L(0))`.
    pub worst_drift_ratio: f64,
    pub final_loss_ratio: f64,
    pub trajectory: FlowTrajectory,
}

pub fn theorem32_decay(seed: u64, n: usize, k: usize, m: usize, d: usize) -> Result<DecayMeasurement> {
    let (model, data, lambda0, condition) = theorem32_instance(seed, n, k, m, d, 0.5)?;
    let t_end = 2.0 / lambda0;
    let fro = build_matrices(&model, &data)?.masked_fro_sq(TrainMask::THEOREM32);
    let dt = (t_end / 2000.0).min(0.1 / fro);
    let traj = euler_flow(
        &model,
        &data,
        TrainMask::THEOREM32,
        FlowOptions {
            dt,
            max_steps: 1_000_000,
            t_end: Some(t_end),
            max_halvings: 20,
        },
    )?;
    let l0 = traj.losses[0];
    let mut worst = 0.0f64;
    let mut worst_sq = 0.0f64;
    let mut worst_drift = 0.0f64;
    for ((&t, &l), &dr) in traj.times.iter().zip(&traj.losses).zip(&traj.theta_norm_drift) {
        worst = worst.max(l / (l0 * (-lambda0 * t / 2.0).exp()));
        worst_sq = worst_sq.max(l / (l0 * (-lambda0 * lambda0 * t / 2.0).exp()));
        worst_drift = worst_drift.max(dr / l0.sqrt());
    }
    Ok(DecayMeasurement {
        lambda0,
        condition,
        t_end,
        worst_ratio: worst,
        worst_ratio_squared: worst_sq,
        worst_drift_ratio: worst_drift,
        final_loss_ratio: traj.losses.last().copied().unwrap_or(l0) / l0,
        trajectory: traj,
    })
}

fn per_seed<F>(seeds: &[u64], f: F) -> Result<Vec<CheckRow>>
where
    F: Fn(u64) -> Result<Vec<CheckRow>> + Sync,
{
    let parts: Vec<Result<Vec<CheckRow>>> = seeds.par_iter().map(|&s| f(s)).collect();
    let mut rows = Vec::new();
    for p in parts {
        rows.extend(p?);
    }
    Ok(rows)
}

fn summary(rows: &[CheckRow], quantity: &str, need: f64) -> CheckRow {
    let hits: Vec<&CheckRow> = rows.iter().filter(|r| r.quantity == quantity).collect();
    let frac = if hits.is_empty() {
        0.0
    } else {
        hits.iter().filter(|r| r.pass).count() as f64 / hits.len() as f64
    };
    CheckRow::new(None, &format!("{quantity}-pass-fraction"), frac, need, frac >= need)
}

/// Runs one named check over `seeds`. Rows are ordered by seed, followed by
/// summary rows.
pub fn run_check(check: TheoryCheck, seeds: &[u64], sizes: CheckSizes) -> Result<Vec<CheckRow>> {
    match check {
        TheoryCheck::MatricesFd => {
            let rows = per_seed(seeds, |s| {
                let (model, data) = small_instance(s, sizes)?;
                let e = matrices_fd_error(&model, &data, 1e-5)?;
                Ok(vec![CheckRow::new(Some(s), "m-entry-rel-err", e, 1e-6, e < 1e-6)])
            })?;
            Ok(rows)
        }
        TheoryCheck::DldtIdentity => per_seed(seeds, |s| {
            let (model, data) = small_instance(s, sizes)?;
            let (_, _, e) = dldt_identity_error(&model, &data, 1e-6)?;
            Ok(vec![CheckRow::new(Some(s), "dldt-rel-err", e, 1e-3, e < 1e-3)])
        }),
        TheoryCheck::Lambda0 => {
            let n = sizes.n.unwrap_or(8);
            let k = sizes.k.unwrap_or(6);
            let m = sizes.m.unwrap_or(4);
            let d = sizes.d.unwrap_or(1);
            if m > k {
                return Err(KronError::Precondition(format!(
                    "need K >= m, got K = {k}, m = {m}"
                )));
            }
            let mut rows = per_seed(seeds, |s| {
                let family = Arc::new(trig_family(k)?);
                let model = TwoLayerModel::init_theory(family, n, d + 1, s)?;
                let data = TheoryData::random(m, d, s)?;
                let (_, l0) = psi_sigma_min(&model, &data)?;
                Ok(vec![CheckRow::new(Some(s), "lambda0", l0, 1e-10, l0 > 1e-10)])
            })?;
            let s = summary(&rows, "lambda0", 1.0);
            rows.push(s);
            Ok(rows)
        }
        TheoryCheck::EarlyDominance => {
            let setup = EarlyDominanceSetup {
                n: sizes.n.unwrap_or(16),
                k: sizes.k.unwrap_or(5),
                m: sizes.m.unwrap_or(4),
                d: sizes.d.unwrap_or(1),
                steps: 100,
            };
            let mut rows = per_seed(seeds, |s| {
                let family = Arc::new(trig_family(setup.k)?);
                let model = TwoLayerModel::init_theory(family, setup.n, setup.d + 1, s)?;
                let data = TheoryData::random(setup.m, setup.d, s)?;
                let ed = early_dominance_experiment(&model, &data, setup.steps, StepRule::default())?;
                let naive = early_dominance_experiment(&model, &data, setup.steps, StepRule::Stability)?;
                let dl0 = (ed.traj_knn.losses[0] - ed.traj_ffn.losses[0]).abs();
                Ok(vec![
                    CheckRow::new(Some(s), "initial-loss-gap", dl0, 1e-12, dl0 <= 1e-12),
                    CheckRow::new(Some(s), "rate-gap", ed.rate_gap, 0.0, ed.rate_gap > 0.0),
                    CheckRow::new(
                        Some(s),
                        "dominance-steps",
                        ed.window_steps as f64,
                        setup.steps as f64,
                        ed.window_steps >= setup.steps,
                    ),
                    CheckRow::new(
                        Some(s),
                        "dominance-steps-stability-dt",
                        naive.window_steps as f64,
                        setup.steps as f64,
                        naive.window_steps >= setup.steps,
                    ),
                ])
            })?;
            for q in ["dominance-steps", "dominance-steps-stability-dt"] {
                let s = summary(&rows, q, 0.9);
                rows.push(s);
            }
            Ok(rows)
        }
        TheoryCheck::CondK => {
            let n = sizes.n.unwrap_or(16);
            let k = sizes.k.unwrap_or(8);
            let m = sizes.m.unwrap_or(4);
            let d = sizes.d.unwrap_or(1);
            let mut rows = per_seed(seeds, |s| {
                let dm = theorem32_decay(s, n, k, m, d)?;
                Ok(vec![
                    CheckRow::new(Some(s), "cond-k", dm.condition.lhs, dm.condition.rhs, dm.condition.holds),
                    CheckRow::new(Some(s), "decay-lambda0", dm.worst_ratio, 1.05, dm.worst_ratio <= 1.05),
                    CheckRow::new(
                        Some(s),
                        "decay-lambda0-squared",
                        dm.worst_ratio_squared,
                        1.05,
                        dm.worst_ratio_squared <= 1.05,
                    ),
                    CheckRow::new(Some(s), "drift", dm.worst_drift_ratio, 1.0, dm.worst_drift_ratio <= 1.0),
                ])
            })?;
            for q in ["decay-lambda0", "decay-lambda0-squared"] {
                let s = summary(&rows, q, 0.9);
                rows.push(s);
            }
            let s = summary(&rows, "drift", 1.0);
            rows.push(s);
            Ok(rows)
        }
        TheoryCheck::AppendixB => {
            let n = sizes.n.unwrap_or(16);
            let k = sizes.k.unwrap_or(8);
            let m = sizes.m.unwrap_or(8);
            let d = sizes.d.unwrap_or(2);
            let delta = 0.5;
            // Data are fixed; the probability is over the hidden weights.
            let data = TheoryData::random(m, d, 0)?.with_y_norm(1.0)?;
            let family = Arc::new(normalized_trig_family(k)?);
            let b = family.uniform_bound();
            let mut rows = per_seed(seeds, |s| {
                let m0 = TwoLayerModel::init_theorem32(family.clone(), n, d + 1, 1.0, m, XiDist::Rademacher, s)?;
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                rng.set_stream(3);
                let mut mt = m0.clone();
                let mut dir: Vec<f64> = (0..k + mt.v.len()).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
                let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
                dir.iter_mut().for_each(|x| *x *= 1e-3 / norm);
                for (a, dx) in mt.alpha.iter_mut().zip(&dir[..k]) {
                    *a += dx;
                }
                for (v, dx) in mt.v.iter_mut().zip(&dir[k..]) {
                    *v += dx;
                }
                let r = appendix_b_bounds(&mt, &m0, &data, b, delta)?;
                let r0 = appendix_b_bounds(&m0, &m0, &data, b, delta)?;
                Ok(vec![
                    CheckRow::new(Some(s), "b1-identity", r0.b1_lhs_weighted, r0.b1_rhs, r0.b1_lhs_weighted <= r0.b1_rhs),
                    CheckRow::new(Some(s), "b1-weighted", r.b1_lhs_weighted, r.b1_rhs, r.b1_lhs_weighted <= r.b1_rhs),
                    CheckRow::new(Some(s), "b1-unweighted", r.b1_lhs_unweighted, r.b1_rhs, r.b1_lhs_unweighted <= r.b1_rhs),
                    CheckRow::new(Some(s), "b3", r.b3_lhs, r.b3_rhs, r.b3_lhs <= r.b3_rhs),
                    CheckRow::new(Some(s), "b3-over-k", r.b3_lhs, r.b3_rhs_over_k, r.b3_lhs <= r.b3_rhs_over_k),
                ])
            })?;
            let bound = appendix_b_bounds(
                &TwoLayerModel::init_theorem32(family.clone(), n, d + 1, 1.0, m, XiDist::Rademacher, 0)?,
                &TwoLayerModel::init_theorem32(family, n, d + 1, 1.0, m, XiDist::Rademacher, 0)?,
                &data,
                b,
                delta,
            )?
            .failure_bound;
            let trials = seeds.len().max(1) as f64;
            let margin = 3.0 * (bound * (1.0 - bound) / trials).sqrt() + 1.0 / trials;
            for q in ["b3", "b3-over-k"] {
                let hits: Vec<&CheckRow> = rows.iter().filter(|r| r.quantity == q).collect();
                let fail = hits.iter().filter(|r| !r.pass).count() as f64 / trials;
                rows.push(CheckRow::new(
                    None,
                    &format!("{q}-failure-rate"),
                    fail,
                    bound + margin,
                    fail <= bound + margin,
                ));
            }
            for q in ["b1-weighted", "b1-unweighted"] {
                let s = summary(&rows, q, 1.0);
                rows.push(s);
            }
            Ok(rows)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn trig_model(n: usize, k: usize, d: usize, seed: u64) -> TwoLayerModel {
        TwoLayerModel::init_theory(Arc::new(trig_family(k).unwrap()), n, d + 1, seed).unwrap()
    }

    #[test]
    fn matches_knn_with_unit_augmentation() {
        let family = Arc::new(trig_family(3).unwrap());
        let knn = init_model_with(
            &[2, 4, 1],
            family,
            &AdaptiveParams::fixed(vec![0.0; 3], vec![1.0; 3]),
            &InitScheme::Theory,
            3,
        )
        .unwrap();
        let two = TwoLayerModel::from_knn(&knn).unwrap();
        let x = [0.3, -0.6];
        let e = knn.forward_efficient(&x).unwrap()[0];
        assert!((two.eval(&[0.3, -0.6, 1.0]) - e).abs() < 1e-14);
    }

    #[test]
    fn augmentation_is_unit_norm() {
        let d = TheoryData::augment_normalized(&array![[3.0], [-0.2]], array![1.0, 2.0]).unwrap();
        d.check_normalized().unwrap();
        let raw = TheoryData::augment_ones(&array![[3.0]], array![1.0]).unwrap();
        let model = trig_model(2, 2, 1, 0);
        assert!(build_matrices(&model, &raw).is_err());
        assert!(build_matrices_unchecked(&model, &raw).is_ok());
    }

    #[test]
    fn first_a_row_is_ffn_output_at_matched_init() {
        let model = trig_model(5, 4, 1, 1);
        let data = TheoryData::random(3, 1, 1).unwrap();
        let mats = build_matrices(&model, &data).unwrap();
        let u = model.outputs(&data);
        for j in 0..3 {
            assert!((mats.a[[0, j]] - u[j]).abs() < 1e-14);
            for k in 1..4 {
                assert_eq!(mats.omega[[k, j]], 0.0);
            }
        }
    }

    #[test]
    fn matrices_match_finite_differences() {
        for seed in 0..5 {
            let (model, data) = small_instance(seed, CheckSizes::default()).unwrap();
            assert!(matrices_fd_error(&model, &data, 1e-5).unwrap() < 1e-6);
        }
        let (model, data) = small_instance(
            9,
            CheckSizes {
                n: Some(3),
                k: Some(3),
                m: Some(2),
                d: Some(1),
            },
        )
        .unwrap();
        assert!(matrices_fd_error(&model, &data, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn decay_rate_sign_and_zero() {
        let model = trig_model(3, 3, 1, 2);
        let data = TheoryData::random(3, 1, 2).unwrap();
        let mats = build_matrices(&model, &data).unwrap();
        assert_eq!(loss_decay_rate(&mats, &Array1::zeros(3)), 0.0);
        assert!(loss_decay_rate(&mats, &model.residual(&data)) <= 0.0);
    }

    #[test]
    fn dldt_identity_along_flow() {
        for seed in 0..3 {
            let (model, data) = small_instance(seed, CheckSizes::default()).unwrap();
            let (_, _, e) = dldt_identity_error(&model, &data, 1e-6).unwrap();
            assert!(e < 1e-3, "seed {seed}: {e}");
        }
    }

    #[test]
    fn lambda0_rank_one_and_duplicates() {
        let model = trig_model(6, 4, 1, 3);
        let data = TheoryData::random(1, 1, 3).unwrap();
        let (psi, l0) = psi_sigma_min(&model, &data).unwrap();
        let col = psi.column(0).dot(&psi.column(0)).sqrt();
        assert!((l0 - col).abs() < 1e-12 * col.max(1.0));

        let mut dup = TheoryData::random(3, 1, 3).unwrap();
        let first = dup.x.row(0).to_owned();
        dup.x.row_mut(1).assign(&first);
        assert_eq!(psi_sigma_min(&model, &dup).unwrap().1, 0.0);

        let big = TheoryData::random(5, 1, 3).unwrap();
        assert!(matches!(psi_sigma_min(&model, &big), Err(KronError::Precondition(_))));
    }

    #[test]
    fn relu_family_rejected() {
        let fam = Arc::new(ActivationFamily::single(Primitive::Relu));
        let model = TwoLayerModel::init_theory(fam, 3, 2, 0).unwrap();
        let data = TheoryData::random(2, 1, 0).unwrap();
        assert!(matches!(
            build_matrices(&model, &data),
            Err(KronError::NonSmoothActivation { .. })
        ));
    }

    #[test]
    fn zero_residual_is_stationary() {
        let model = trig_model(3, 2, 1, 4);
        let mut data = TheoryData::random(2, 1, 4).unwrap();
        data.y = model.outputs(&data);
        let traj = euler_flow(&model, &data, TrainMask::FULL, FlowOptions::steps(0.1, 20)).unwrap();
        assert_eq!(traj.final_model, model);
        assert!(traj.losses.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn quadratic_toy_follows_exponential() {
        // u = c * tanh(v^T x) with only c trainable and tanh(v^T x) = s gives
        // L = (c s - y)^2 / 2, a one-parameter quadratic in c.
        let fam = Arc::new(ActivationFamily::single(Primitive::Identity));
        let model = TwoLayerModel::new(array![1.0], array![[1.0]], vec![1.0], vec![1.0], fam).unwrap();
        let data = TheoryData::new(array![[1.0]], array![0.0]).unwrap();
        let mask = TrainMask {
            c: true,
            v: false,
            alpha: false,
            omega: false,
        };
        let dt = 1e-3;
        let traj = euler_flow(&model, &data, mask, FlowOptions::steps(dt, 1000)).unwrap();
        let t = traj.times[1000];
        let exact = 0.5 * (-2.0 * t).exp();
        assert!((traj.losses[1000] - exact).abs() < 2.0 * dt);
    }

    #[test]
    fn condition_examples() {
        let r4 = convergence_condition(4, 1.0, 1.0, 1.0, 0.5);
        assert_eq!((r4.lhs, r4.rhs, r4.holds), (0.0, 3.0, false));
        let r9 = convergence_condition(9, 1.0, 1.0, 1.0, 0.5);
        assert_eq!((r9.lhs, r9.holds), (9.0, true));
        assert_eq!(r4.k_sufficient_b1, 4);
        assert_eq!(r4.rate, 0.5);
    }

    #[test]
    fn appendix_b_identity_and_perturbation() {
        let fam = Arc::new(normalized_trig_family(6).unwrap());
        let m0 = TwoLayerModel::init_theorem32(fam, 8, 2, 1.0, 4, XiDist::Rademacher, 1).unwrap();
        let data = TheoryData::random(4, 1, 1).unwrap().with_y_norm(1.0).unwrap();
        let r0 = appendix_b_bounds(&m0, &m0, &data, 1.0, 0.5).unwrap();
        assert_eq!(r0.b1_lhs_weighted, 0.0);
        assert_eq!(r0.b1_rhs, 0.0);
        let rows = run_check(TheoryCheck::AppendixB, &[0, 1, 2], CheckSizes::default()).unwrap();
        assert!(rows.iter().all(|r| r.pass), "{rows:?}");
    }

    #[test]
    fn unknown_check_name() {
        assert!("nope".parse::<TheoryCheck>().is_err());
        for c in TheoryCheck::ALL {
            assert_eq!(c.to_string().parse::<TheoryCheck>().unwrap(), c);
        }
    }
}
