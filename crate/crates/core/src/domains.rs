//! Domain pairs: two unpaired sample sets plus, for synthetic tasks, the
//! hidden target mapping used only for evaluation.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nn::{init_mlp, Activation, Loss, Mlp, MlpSpec};
use crate::{seed, Error, Result};

/// Anything that maps points of one space to another.
pub trait Mapping: Sync {
    fn apply(&self, x: &[f64]) -> Vec<f64>;

    fn apply_all(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        xs.iter().map(|x| self.apply(x)).collect()
    }
}

impl Mapping for Mlp {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        Mlp::apply(self, x)
    }
}

impl<F> Mapping for F
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self(x)
    }
}

/// A ground-truth mapping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Target {
    /// `x -> M x + c`
    Affine { matrix: Vec<Vec<f64>>, bias: Vec<f64> },
    Net { net: Mlp },
}

impl Target {
    /// The target as a network: affine targets become a single identity layer.
    pub fn to_mlp(&self) -> Result<Mlp> {
        match self {
            Target::Affine { matrix, bias } => {
                let (rows, cols) = (matrix.len(), matrix.first().map_or(0, Vec::len));
                let spec = MlpSpec::new(vec![cols, rows], Activation::Identity, Activation::Identity);
                Mlp::from_parts(spec, vec![matrix.clone()], vec![bias.clone()])
            }
            Target::Net { net } => Ok(net.clone()),
        }
    }
}

impl Mapping for Target {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Target::Affine { matrix, bias } => matrix
                .iter()
                .zip(bias)
                .map(|(row, c)| c + row.iter().zip(x).map(|(m, v)| m * v).sum::<f64>())
                .collect(),
            Target::Net { net } => net.apply(x),
        }
    }
}

/// Distribution of the synthetic source domain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseDistribution {
    /// Uniform on `[-1, 1]^dim`.
    #[default]
    Uniform,
    /// Each coordinate is `2 b - 1` with `b` drawn from Beta(2, 5) on even
    /// and Beta(2, 3) on odd coordinates: smooth, lopsided marginals that no
    /// reflection or coordinate swap preserves.
    Skewed,
    /// Two blobs with weights 0.7 and 0.3, each a skewed sample scaled,
    /// rotated and shifted differently. Unlike the product
    /// distributions above, no coordinate-wise rearrangement preserves it.
    Clusters,
}

const CLUSTER_WEIGHTS: [f64; 2] = [0.7, 0.3];
const CLUSTER_ANGLES: [f64; 2] = [0.4, 2.0];
const CLUSTER_SCALES: [f64; 2] = [0.35, 0.2];

impl BaseDistribution {
    fn beta_params(i: usize) -> (f64, f64) {
        if i % 2 == 0 {
            (2.0, 5.0)
        } else {
            (2.0, 3.0)
        }
    }

    pub fn sample(self, dim: usize, rng: &mut seed::Rng) -> Vec<f64> {
        if self == BaseDistribution::Clusters {
            return Self::sample_cluster(dim, rng);
        }
        (0..dim)
            .map(|i| {
                let u: f64 = rng.gen();
                match self {
                    BaseDistribution::Uniform => 2.0 * u - 1.0,
                    _ => {
                        let (a, b) = Self::beta_params(i);
                        2.0 * Beta::new(a, b).expect("valid beta parameters").sample(rng) - 1.0
                    }
                }
            })
            .collect()
    }
}

impl BaseDistribution {
    fn sample_cluster(dim: usize, rng: &mut seed::Rng) -> Vec<f64> {
        let u: f64 = rng.gen();
        let j = usize::from(u >= CLUSTER_WEIGHTS[0]);
        let mut v = BaseDistribution::Skewed.sample(dim, rng);
        let (sin, cos) = CLUSTER_ANGLES[j].sin_cos();
        for i in (0..dim.saturating_sub(1)).step_by(2) {
            let (a, b) = (v[i], v[i + 1]);
            v[i] = cos * a - sin * b;
            v[i + 1] = sin * a + cos * b;
        }
        let sign = if j == 0 { -1.0 } else { 1.0 };
        v.iter()
            .enumerate()
            .map(|(i, x)| sign * 0.5 * (0.9 * i as f64).cos() + CLUSTER_SCALES[j] * x)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Lshape,
    AffineTarget,
    MlpTarget,
    FromFile,
}

fn default_dim() -> usize {
    2
}

fn default_count() -> usize {
    1000
}

/// Recipe for a domain pair. Generation is a pure function of the spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub kind: DomainKind,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_count")]
    pub m: usize,
    #[serde(default = "default_count")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub base: BaseDistribution,
    /// Affine target override; a random rotation when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    /// Affine shift override; uniform in `[-0.5, 0.5]^dim` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<f64>>,
    /// Architecture of an `mlp_target`; defaults to one tanh hidden layer of width 8.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<MlpSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_a: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_b: Option<PathBuf>,
}

impl DomainSpec {
    pub fn new(kind: DomainKind, dim: usize, m: usize, n: usize, seed: u64) -> Self {
        Self {
            kind,
            dim,
            m,
            n,
            seed,
            base: BaseDistribution::Uniform,
            matrix: None,
            bias: None,
            target: None,
            path_a: None,
            path_b: None,
        }
    }

    pub fn with_base(mut self, base: BaseDistribution) -> Self {
        self.base = base;
        self
    }

    pub fn build(&self) -> Result<DomainPair> {
        match self.kind {
            DomainKind::Lshape => gen_lshape(self.m, self.n, self.seed),
            DomainKind::AffineTarget | DomainKind::MlpTarget => gen_mapped_pair(self),
            DomainKind::FromFile => match (&self.path_a, &self.path_b) {
                (Some(a), Some(b)) => load_pair(a, b),
                _ => Err(Error::Config("from_file domains need path_a and path_b".into())),
            },
        }
    }
}

/// Two unpaired sample sets. `samples_b` is a set: it is stored in canonical
/// (lexicographic) order, so no algorithm can depend on how B was listed.
#[derive(Clone, Debug)]
pub struct DomainPair {
    pub samples_a: Vec<Vec<f64>>,
    pub samples_b: Vec<Vec<f64>>,
    pub dim_a: usize,
    pub dim_b: usize,
    pub oracle: Option<Target>,
    /// Admissible targets of an ambiguous task.
    pub oracle_family: Vec<Target>,
    /// Draws fresh points from `D_A` (synthetic pairs only).
    pub base: Option<(BaseDistribution, u64)>,
}

impl DomainPair {
    pub fn new(samples_a: Vec<Vec<f64>>, mut samples_b: Vec<Vec<f64>>) -> Result<Self> {
        let dim_a = check_samples(&samples_a, "A")?;
        let dim_b = check_samples(&samples_b, "B")?;
        samples_b.sort_by(|x, y| {
            x.iter()
                .zip(y)
                .map(|(a, b)| a.total_cmp(b))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        Ok(Self {
            samples_a,
            samples_b,
            dim_a,
            dim_b,
            oracle: None,
            oracle_family: Vec::new(),
            base: None,
        })
    }

    pub fn m(&self) -> usize {
        self.samples_a.len()
    }

    pub fn n(&self) -> usize {
        self.samples_b.len()
    }

    pub fn has_truth(&self) -> bool {
        self.oracle.is_some() || !self.oracle_family.is_empty()
    }

    /// Ground-truth risk of `g` on `samples`: against the oracle when there is
    /// one, otherwise the smallest risk over the admissible family.
    pub fn truth_risk(&self, g: &dyn Mapping, samples: &[Vec<f64>]) -> Option<f64> {
        if let Some(o) = &self.oracle {
            return risk(g, o, samples, Loss::L1).ok();
        }
        self.oracle_family
            .iter()
            .filter_map(|o| risk(g, o, samples, Loss::L1).ok())
            .min_by(f64::total_cmp)
    }

    /// Per-sample ground-truth loss, same convention as [`Self::truth_risk`].
    pub fn truth_at(&self, g_x: &[f64], x: &[f64]) -> Option<f64> {
        if let Some(o) = &self.oracle {
            return Some(Loss::L1.eval(g_x, &o.apply(x)));
        }
        self.oracle_family
            .iter()
            .map(|o| Loss::L1.eval(g_x, &o.apply(x)))
            .min_by(f64::total_cmp)
    }

    /// `count` fresh points from `D_A`, independent of `samples_a`.
    pub fn fresh_a(&self, count: usize, seed_value: u64) -> Result<Vec<Vec<f64>>> {
        let (base, _) = self
            .base
            .ok_or_else(|| Error::Usage("fresh samples need a synthetic domain".into()))?;
        let mut rng = seed::rng(seed_value);
        Ok((0..count).map(|_| base.sample(self.dim_a, &mut rng)).collect())
    }

    /// JSON export: samples and metadata, never the oracle.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "dim_a": self.dim_a,
            "dim_b": self.dim_b,
            "m": self.m(),
            "n": self.n(),
            "has_oracle": self.has_truth(),
            "samples_a": self.samples_a,
            "samples_b": self.samples_b,
        })
    }
}

fn check_samples(samples: &[Vec<f64>], name: &str) -> Result<usize> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Usage(format!("sample set {name} is empty")))?;
    let dim = first.len();
    if dim == 0 {
        return Err(Error::Shape(format!("sample set {name} has zero-width rows")));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.len() != dim {
            return Err(Error::Shape(format!("{name}[{i}] has width {}, expected {dim}", s.len())));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{name}[{i}] is not finite")));
        }
    }
    Ok(dim)
}

/// The two semantic L-shape mappings, realized as one-layer relu nets.
/// `which = 1`: `(x,x) -> (x,0)` for `x >= 0`, `(0,-x)` otherwise.
/// `which = 2`: `(x,x) -> (0,x)` for `x >= 0`, `(-x,0)` otherwise.
pub fn lshape_map(which: u8) -> Mlp {
    let spec = MlpSpec::new(vec![2, 2], Activation::Relu, Activation::Relu);
    let w = match which {
        1 => vec![vec![1.0, 0.0], vec![0.0, -1.0]],
        _ => vec![vec![-1.0, 0.0], vec![0.0, 1.0]],
    };
    Mlp::from_parts(spec, vec![w], vec![vec![0.0, 0.0]]).expect("static shape")
}

/// A: uniform on the diagonal `x1 = x2 in [-1, 1]`. B: uniform on the union of
/// the unit segments of both positive axes.
pub fn gen_lshape(m: usize, n: usize, seed_value: u64) -> Result<DomainPair> {
    if m == 0 || n == 0 {
        return Err(Error::Usage("lshape needs m, n >= 1".into()));
    }
    let mut rng = seed::rng(seed::derive(seed_value, "lshape/a"));
    let a = (0..m)
        .map(|_| {
            let t = rng.gen_range(-1.0..=1.0);
            vec![t, t]
        })
        .collect();
    let mut rng = seed::rng(seed::derive(seed_value, "lshape/b"));
    let b = (0..n)
        .map(|_| {
            let t: f64 = rng.gen();
            if rng.gen::<bool>() {
                vec![t, 0.0]
            } else {
                vec![0.0, t]
            }
        })
        .collect();
    let mut pair = DomainPair::new(a, b)?;
    pair.oracle_family = vec![
        Target::Net { net: lshape_map(1) },
        Target::Net { net: lshape_map(2) },
    ];
    pair.base = None;
    Ok(pair)
}

fn random_rotation(dim: usize, rng: &mut seed::Rng) -> Vec<Vec<f64>> {
    // Gram-Schmidt on a Gaussian matrix.
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for r in &rows {
            let d: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows
}

/// Default target architecture: `[dim, 8, dim]`, tanh hidden layer.
pub fn default_target_spec(dim: usize) -> MlpSpec {
    MlpSpec::new(vec![dim, 8, dim], Activation::Tanh, Activation::Identity)
}

/// B is the exact pushforward of `D_A` under a hidden target drawn from the
/// spec's seed. B is generated from fresh draws of `D_A`, never from
/// `samples_a`, so index `i` of A says nothing about index `i` of B.
pub fn gen_mapped_pair(spec: &DomainSpec) -> Result<DomainPair> {
    if spec.dim == 0 || spec.m == 0 || spec.n == 0 {
        return Err(Error::Usage("mapped pairs need dim, m, n >= 1".into()));
    }
    let dim = spec.dim;
    let target = match spec.kind {
        DomainKind::AffineTarget => {
            let mut rng = seed::rng(seed::derive(spec.seed, "target/affine"));
            let matrix = match &spec.matrix {
                Some(m) => {
                    if m.len() != dim || m.iter().any(|r| r.len() != dim) {
                        return Err(Error::Config(format!("affine matrix must be {dim}x{dim}")));
                    }
                    m.clone()
                }
                None => random_rotation(dim, &mut rng),
            };
            let bias = match &spec.bias {
                Some(b) if b.len() == dim => b.clone(),
                Some(_) => return Err(Error::Config(format!("affine bias must have length {dim}"))),
                None => (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            };
            Target::Affine { matrix, bias }
        }
        DomainKind::MlpTarget => {
            let tspec = spec.target.clone().unwrap_or_else(|| default_target_spec(dim));
            if tspec.input_dim() != dim {
                return Err(Error::Config(format!(
                    "target input width {} does not match dim {dim}",
                    tspec.input_dim()
                )));
            }
            let net = if tspec.output_activation == Activation::Identity {
                draw_target_net(&tspec, spec.base, seed::derive(spec.seed, "target/mlp"))?
            } else {
                init_mlp(&tspec.with_seed(seed::derive(spec.seed, "target/mlp")))?
            };
            Target::Net { net }
        }
        other => {
            return Err(Error::Usage(format!(
                "gen_mapped_pair cannot build a {other:?} domain"
            )))
        }
    };
    let base_seed = seed::derive(spec.seed, "base");
    let mut rng_a = seed::rng(seed::derive(base_seed, "a"));
    let samples_a = (0..spec.m).map(|_| spec.base.sample(dim, &mut rng_a)).collect();
    let mut rng_b = seed::rng(seed::derive(base_seed, "b"));
    let samples_b = (0..spec.n)
        .map(|_| target.apply(&spec.base.sample(dim, &mut rng_b)))
        .collect();
    let mut pair = DomainPair::new(samples_a, samples_b)?;
    pair.oracle = Some(target);
    pair.base = Some((spec.base, base_seed));
    Ok(pair)
}

const TARGET_DRAWS: usize = 4096;
const TARGET_ATTEMPTS: u64 = 256;
/// Smallest accepted ratio between the shortest and longest principal
/// standard deviations of B.
pub const TARGET_MIN_ASPECT: f64 = 0.5;
/// Per-coordinate standard deviation of B after normalization.
pub const TARGET_SPREAD: f64 = 0.5;

/// Draws a random target net whose pushforward of the base distribution is
/// not squeezed onto a thin set, then centers it and rescales it
/// isotropically to [`TARGET_SPREAD`]. Candidates come from a seeded
/// sequence, so the result is deterministic.
fn draw_target_net(tspec: &MlpSpec, base: BaseDistribution, seed_value: u64) -> Result<Mlp> {
    let mut best: Option<(f64, Mlp, Vec<f64>, f64)> = None;
    for attempt in 0..TARGET_ATTEMPTS {
        let net = init_mlp(&tspec.clone().with_seed(seed::derive_indexed(seed_value, "candidate", attempt)))?;
        let mut rng = seed::rng(seed::derive_indexed(seed_value, "probe", attempt));
        let din = net.input_dim();
        let outs: Vec<Vec<f64>> = (0..TARGET_DRAWS).map(|_| net.apply(&base.sample(din, &mut rng))).collect();
        let (mean, cov) = mean_cov(&outs);
        let eig = symmetric_eigenvalues(cov.clone());
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
        let aspect = if hi > 0.0 { (lo.max(0.0) / hi).sqrt() } else { 0.0 };
        let spread = (cov.iter().enumerate().map(|(i, r)| r[i]).sum::<f64>() / cov.len() as f64).sqrt();
        if best.as_ref().map_or(true, |b| aspect > b.0) {
            best = Some((aspect, net, mean, spread));
        }
        if aspect >= TARGET_MIN_ASPECT {
            break;
        }
    }
    let (_, mut net, mean, spread) = best.expect("at least one attempt");
    if !(spread > 1e-12) {
        return Err(Error::Numeric("target net has constant output".into()));
    }
    let scale = TARGET_SPREAD / spread;
    let last = net.layers_mut().last_mut().unwrap();
    last.w.iter_mut().for_each(|w| *w *= scale);
    last.b.iter_mut().zip(&mean).for_each(|(b, m)| *b = (*b - m) * scale);
    Ok(net)
}

fn mean_cov(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
    }
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]) / n;
            }
        }
    }
    (mean, cov)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
fn symmetric_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let d = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..d).map(|i| a[i][i]).collect()
}

fn read_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| Error::Ingest {
                    file: path.to_path_buf(),
                    line: line_no,
                    msg: format!("non-numeric cell {:?}", cell.trim()),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::Ingest {
                file: path.to_path_buf(),
                line: line_no,
                msg: format!("non-finite value {v}"),
            });
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Ingest {
                    file: path.to_path_buf(),
                    line: line_no,
                    msg: format!("ragged row: {} cells, expected {w}", row.len()),
                })
            }
            _ => {}
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset {
            file: path.to_path_buf(),
        });
    }
    Ok(rows)
}

/// Loads two headerless CSV files, one sample per row.
pub fn load_pair(path_a: &Path, path_b: &Path) -> Result<DomainPair> {
    DomainPair::new(read_csv(path_a)?, read_csv(path_b)?)
}

/// Empirical risk `mean_x loss(f(x), g(x))`.
pub fn risk(f: &dyn Mapping, g: &dyn Mapping, samples: &[Vec<f64>], loss: Loss) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Usage("risk over an empty sample".into()));
    }
    let total: f64 = samples.iter().map(|x| loss.eval(&f.apply(x), &g.apply(x))).sum();
    Ok(total / samples.len() as f64)
}
