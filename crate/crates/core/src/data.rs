//! Targets, PDE problems, samplers, toy classification sets and metrics.
//!
//! Every generator is a pure function of its arguments. Randomness comes from
//! `ChaCha8Rng::seed_from_u64(seed)`, with a separate stream per purpose so
//! changing one sample count does not shift another set of points.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, KronError, Result};

/// Uniform points on 1-D evaluation grids.
pub const EVAL_POINTS_1D: usize = 1001;
/// Points per side on 2-D evaluation grids.
pub const EVAL_SIDE_2D: usize = 101;

const STREAM_INTERIOR: u64 = 10;
const STREAM_BOUNDARY: u64 = 11;
const STREAM_TOY_TRAIN: u64 = 20;
const STREAM_TOY_TEST: u64 = 21;

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `n` evenly spaced points on `[a, b]`, endpoints included.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..n)
            .map(|i| if i == n - 1 { b } else { a + (b - a) * i as f64 / (n - 1) as f64 })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Target {
    /// `0.2 sin(6x)` for `x < 0`, `1 + 0.1 x cos(14x)` otherwise.
    Discontinuous,
    /// `sin(m pi x)`.
    HighFreq { m: u32 },
}

impl Target {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Target::Discontinuous => {
                if x < 0.0 {
                    0.2 * (6.0 * x).sin()
                } else {
                    1.0 + 0.1 * x * (14.0 * x).cos()
                }
            }
            Target::HighFreq { m } => (m as f64 * PI * x).sin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTask {
    pub name: String,
    pub target: Target,
    pub domain: (f64, f64),
    pub train_x: Vec<f64>,
    pub eval_points: usize,
}

impl RegressionTask {
    /// Training inputs as an `n x 1` array and targets as `n x 1`.
    pub fn train_arrays(&self) -> (Array2<f64>, Array2<f64>) {
        let n = self.train_x.len();
        let x = Array2::from_shape_vec((n, 1), self.train_x.clone()).expect("column");
        let y = x.mapv(|v| self.target.eval(v));
        (x, y)
    }

    /// Uniform evaluation grid over the whole domain and exact values.
    pub fn eval_grid(&self) -> (Array2<f64>, Array1<f64>) {
        let xs = linspace(self.domain.0, self.domain.1, self.eval_points);
        let exact = xs.iter().map(|&v| self.target.eval(v)).collect();
        (Array2::from_shape_vec((xs.len(), 1), xs).expect("column"), exact)
    }
}

/// `discontinuous`, or `highfreq-<m>` (also `highfreq(<m>)`).
pub fn make_regression_task(name: &str) -> Result<RegressionTask> {
    let unknown = || KronError::UnknownName {
        kind: "regression task",
        name: name.to_string(),
    };
    if name == "discontinuous" {
        return Ok(RegressionTask {
            name: name.to_string(),
            target: Target::Discontinuous,
            domain: (-3.0, 3.0),
            train_x: linspace(-3.0, 3.0, 5),
            eval_points: EVAL_POINTS_1D,
        });
    }
    let m = name
        .strip_prefix("highfreq")
        .map(|r| r.trim_start_matches(['-', '(']).trim_end_matches(')'))
        .and_then(|r| r.parse::<u32>().ok())
        .ok_or_else(unknown)?;
    let domain = (0.0, 2.0 * PI);
    Ok(RegressionTask {
        name: format!("highfreq-{m}"),
        target: Target::HighFreq { m },
        domain,
        train_x: linspace(domain.0, domain.1, 100),
        eval_points: EVAL_POINTS_1D,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HelmholtzCase {
    /// `u = sin(pi x) sin(4 pi y)`.
    Base,
    /// `u = sin(5 pi x) sin(10 pi y)`.
    HighFreq,
}

impl FromStr for HelmholtzCase {
    type Err = KronError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(HelmholtzCase::Base),
            "highfreq" | "hf" => Ok(HelmholtzCase::HighFreq),
            _ => Err(KronError::UnknownName {
                kind: "Helmholtz case",
                name: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for HelmholtzCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HelmholtzCase::Base => "base",
            HelmholtzCase::HighFreq => "highfreq",
        })
    }
}

/// `Delta u + k^2 u = f` on `[-1, 1]^2` with `u = 0` on the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HelmholtzProblem {
    pub case: HelmholtzCase,
    pub k: f64,
}

impl HelmholtzProblem {
    fn freqs(&self) -> (f64, f64) {
        match self.case {
            HelmholtzCase::Base => (PI, 4.0 * PI),
            HelmholtzCase::HighFreq => (5.0 * PI, 10.0 * PI),
        }
    }

    pub fn exact(&self, x: f64, y: f64) -> f64 {
        let (a, b) = self.freqs();
        (a * x).sin() * (b * y).sin()
    }

    /// Analytic Laplacian of the exact solution.
    pub fn exact_laplacian(&self, x: f64, y: f64) -> f64 {
        let (a, b) = self.freqs();
        -(a * a + b * b) * self.exact(x, y)
    }

    pub fn forcing(&self, x: f64, y: f64) -> f64 {
        match self.case {
            HelmholtzCase::Base => {
                let s = (PI * x).sin() * (4.0 * PI * y).sin();
                -PI * PI * s - (4.0 * PI) * (4.0 * PI) * s + self.k * self.k * s
            }
            HelmholtzCase::HighFreq => {
                (self.k * self.k - 125.0 * PI * PI) * (5.0 * PI * x).sin() * (10.0 * PI * y).sin()
            }
        }
    }

    /// Boundary value of the Dirichlet condition.
    pub fn boundary_value(&self) -> f64 {
        0.0
    }

    /// `101 x 101` grid over the closed square (rows are points) and exact
    /// values there.
    pub fn eval_grid(&self) -> (Array2<f64>, Array1<f64>) {
        let side = linspace(-1.0, 1.0, EVAL_SIDE_2D);
        let n = side.len() * side.len();
        let mut pts = Array2::zeros((n, 2));
        let mut exact = Array1::zeros(n);
        for (i, &x) in side.iter().enumerate() {
            for (j, &y) in side.iter().enumerate() {
                let r = i * side.len() + j;
                pts[[r, 0]] = x;
                pts[[r, 1]] = y;
                exact[r] = self.exact(x, y);
            }
        }
        (pts, exact)
    }
}

/// Base case uses `k = 1`, as does the high-frequency case.
pub fn make_helmholtz(case: HelmholtzCase) -> HelmholtzProblem {
    HelmholtzProblem { case, k: 1.0 }
}

/// Interior and boundary collocation points.
#[derive(Debug, Clone, PartialEq)]
pub struct Collocation {
    pub interior: Array2<f64>,
    pub boundary: Array2<f64>,
}

/// Interior points i.i.d. uniform on the open square; boundary points uniform
/// on the edges (bottom, right, top, left), split evenly with the remainder
/// going to the first edges.
pub fn sample_collocation(n_residual: usize, n_boundary: usize, seed: u64) -> Result<Collocation> {
    if n_residual == 0 || n_boundary == 0 {
        return Err(KronError::Precondition("collocation counts must be positive".into()));
    }
    let mut rng = rng_for(seed, STREAM_INTERIOR);
    let mut open = || loop {
        let v: f64 = rng.random_range(-1.0..1.0);
        if v > -1.0 {
            return v;
        }
    };
    let interior = Array2::from_shape_simple_fn((n_residual, 2), &mut open);
    let mut rng = rng_for(seed, STREAM_BOUNDARY);
    let mut boundary = Array2::zeros((n_boundary, 2));
    let mut row = 0;
    for edge in 0..4 {
        let count = n_boundary / 4 + usize::from(edge < n_boundary % 4);
        for _ in 0..count {
            let t: f64 = rng.random_range(-1.0..=1.0);
            let (x, y) = match edge {
                0 => (t, -1.0),
                1 => (1.0, t),
                2 => (t, 1.0),
                _ => (-1.0, t),
            };
            boundary[[row, 0]] = x;
            boundary[[row, 1]] = y;
            row += 1;
        }
    }
    Ok(Collocation { interior, boundary })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyKind {
    TwoMoons,
    TwoCircles,
}

impl ToyKind {
    pub fn default_noise(self) -> f64 {
        match self {
            ToyKind::TwoMoons => 0.1,
            ToyKind::TwoCircles => 0.05,
        }
    }
}

impl FromStr for ToyKind {
    type Err = KronError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-moons" | "moons" => Ok(ToyKind::TwoMoons),
            "two-circles" | "circles" => Ok(ToyKind::TwoCircles),
            _ => Err(KronError::UnknownName {
                kind: "toy dataset",
                name: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub kind: ToyKind,
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    /// `n x 2`
    pub x: Array2<f64>,
    /// 0 or 1
    pub labels: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyClassificationSet {
    pub spec: ToySpec,
    pub train: LabeledSet,
    pub test: LabeledSet,
}

fn toy_points(kind: ToyKind, n: usize, noise: f64, stream: u64, seed: u64) -> Result<LabeledSet> {
    if n < 2 {
        return Err(KronError::Precondition("toy datasets need at least 2 points".into()));
    }
    let n_out = n / 2;
    let n_in = n - n_out;
    let mut pts: Vec<([f64; 2], f64)> = Vec::with_capacity(n);
    match kind {
        ToyKind::TwoMoons => {
            for t in linspace(0.0, PI, n_out) {
                pts.push(([t.cos(), t.sin()], 0.0));
            }
            for t in linspace(0.0, PI, n_in) {
                pts.push(([1.0 - t.cos(), 1.0 - t.sin() - 0.5], 1.0));
            }
        }
        ToyKind::TwoCircles => {
            let ring = |count: usize| (0..count).map(move |i| 2.0 * PI * i as f64 / count as f64);
            for t in ring(n_out) {
                pts.push(([t.cos(), t.sin()], 0.0));
            }
            for t in ring(n_in) {
                pts.push(([0.5 * t.cos(), 0.5 * t.sin()], 1.0));
            }
        }
    }
    let mut rng = rng_for(seed, stream);
    pts.shuffle(&mut rng);
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| KronError::Precondition(e.to_string()))?;
    let mut x = Array2::zeros((n, 2));
    let mut labels = Array1::zeros(n);
    for (i, (p, l)) in pts.into_iter().enumerate() {
        let (ex, ey) = if noise > 0.0 {
            (normal.sample(&mut rng), normal.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        x[[i, 0]] = p[0] + ex;
        x[[i, 1]] = p[1] + ey;
        labels[i] = l;
    }
    Ok(LabeledSet { x, labels })
}

/// Two interleaving unit half-circles (the second shifted by `(1, -0.5)`),
/// or two concentric circles with radii 1 and 0.5; Gaussian noise of the
/// given standard deviation on both coordinates. Class 0 is the upper moon
/// and the outer circle.
pub fn make_toy_classification(spec: ToySpec) -> Result<ToyClassificationSet> {
    Ok(ToyClassificationSet {
        spec,
        train: toy_points(spec.kind, spec.n_train, spec.noise, STREAM_TOY_TRAIN, spec.seed)?,
        test: toy_points(spec.kind, spec.n_test.max(2), spec.noise, STREAM_TOY_TEST, spec.seed)?,
    })
}

/// `|pred - exact|_2 / |exact|_2`.
pub fn relative_l2_error(pred: &Array1<f64>, exact: &Array1<f64>) -> Result<f64> {
    check_dim("relative error grid", exact.len(), pred.len())?;
    let den = exact.dot(exact).sqrt();
    if den == 0.0 {
        return Err(KronError::ZeroNorm);
    }
    let diff = pred - exact;
    Ok(diff.dot(&diff).sqrt() / den)
}

/// Fraction of rows whose logit sign matches the 0/1 label.
pub fn accuracy(logits: &Array1<f64>, labels: &Array1<f64>) -> Result<f64> {
    check_dim("accuracy labels", labels.len(), logits.len())?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(z, y)| (**z > 0.0) == (**y > 0.5))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes a CSV with `#`-prefixed comment lines, a mandatory header row and
/// one row per sample.
pub fn write_table(path: &Path, comments: &[String], header: &[&str], rows: &Array2<f64>) -> Result<()> {
    check_dim("CSV header", rows.ncols(), header.len())?;
    let mut out = Vec::new();
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(header)?;
        for r in rows.rows() {
            w.write_record(r.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Regression data `(x..., y)`: every column but the last is an input.
pub fn export_regression(path: &Path, comments: &[String], x: &Array2<f64>, y: &Array1<f64>) -> Result<()> {
    check_dim("CSV targets", x.nrows(), y.len())?;
    let d = x.ncols();
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.push("y".into());
    let rows = Array2::from_shape_fn((x.nrows(), d + 1), |(r, c)| if c < d { x[[r, c]] } else { y[r] });
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    write_table(path, comments, &h, &rows)
}

/// Reads `(x..., y)` rows written by [`export_regression`] or by hand.
/// Comment lines start with `#`; the first other line is the header.
pub fn import_regression(path: &Path) -> Result<(Array2<f64>, Array1<f64>)> {
    let file = std::fs::File::open(path)?;
    let mut body = String::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if !line.trim_start().starts_with('#') {
            body.push_str(&line);
            body.push('\n');
        }
    }
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let cols = rdr.headers()?.len();
    if cols < 2 {
        return Err(KronError::Config(format!(
            "{}: need at least one input column and one target column",
            path.display()
        )));
    }
    let mut vals = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        for f in rec.iter() {
            vals.push(f.trim().parse::<f64>().map_err(|e| {
                KronError::Config(format!("{}: row {}: {e}", path.display(), rows + 1))
            })?);
        }
        rows += 1;
    }
    let all = Array2::from_shape_vec((rows, cols), vals).map_err(|e| KronError::Config(e.to_string()))?;
    let x = all.slice(ndarray::s![.., ..cols - 1]).to_owned();
    let y = all.column(cols - 1).to_owned();
    Ok((x, y))
}
