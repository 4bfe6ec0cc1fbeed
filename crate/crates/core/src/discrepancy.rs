//! Discrepancy between two sample sets.
//!
//! The adversarial estimate trains a sigmoid critic to tell the sets apart on
//! one half of each and reports the gap of its mean outputs on the other half.
//! The gap lies in `[0, 1]`; it is the single-critic reduction of the
//! two-function discrepancy sup over critics.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domains::{DomainPair, Mapping};
use crate::nn::{init_mlp, sigmoid, softplus, Activation, GradAt, Mlp, MlpSpec, OptState, Params};
use crate::{seed, Error, Result};

fn default_hidden() -> Vec<usize> {
    vec![32]
}
fn default_activation() -> Activation {
    Activation::Relu
}
fn default_epochs() -> usize {
    200
}
fn default_lr() -> f64 {
    1e-2
}

/// Critic architecture and training recipe. The input width is taken from the
/// data, so one spec serves every dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscSpec {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Full-batch passes over the critic's training half.
    #[serde(default = "default_epochs")]
    pub train_epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DiscSpec {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            activation: default_activation(),
            train_epochs: default_epochs(),
            learning_rate: default_lr(),
            seed: 0,
        }
    }
}

impl DiscSpec {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    /// Sigmoid-output critic over `dim`-dimensional inputs.
    pub fn critic_spec(&self, dim: usize) -> MlpSpec {
        let mut widths = vec![dim];
        widths.extend(&self.hidden);
        widths.push(1);
        MlpSpec::new(widths, self.activation, Activation::Sigmoid)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscEstimate {
    pub value: f64,
    pub spec: DiscSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic: Option<Mlp>,
}

impl DiscEstimate {
    pub fn without_critic(mut self) -> Self {
        self.critic = None;
        self
    }
}

/// Per-coordinate affine normalization applied in front of a critic.
#[derive(Clone, Debug)]
struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit<'a>(rows: impl Iterator<Item = &'a Vec<f64>> + Clone, dim: usize) -> Self {
        let count = rows.clone().count().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows.clone() {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; dim];
        for r in rows {
            var.iter_mut()
                .zip(r.iter().zip(&mean))
                .for_each(|(s, (v, m))| *s += (v - m) * (v - m));
        }
        let inv_std = var.into_iter().map(|s| 1.0 / (s / count).sqrt().max(1e-6)).collect();
        Self { mean, inv_std }
    }

    fn flat(&self, rows: &[&Vec<f64>]) -> Vec<f64> {
        rows.iter()
            .flat_map(|r| {
                r.iter()
                    .zip(&self.mean)
                    .zip(&self.inv_std)
                    .map(|((v, m), s)| (v - m) * s)
            })
            .collect()
    }
}

/// Gradient of the logistic critic objective
/// `mean softplus(-z(real)) + mean softplus(z(fake))`, where `input` holds the
/// real rows followed by the fake rows. Returns the objective and the tape for
/// callers that need logits.
pub(crate) fn critic_grads(critic: &Mlp, input: Vec<f64>, n_real: usize, n_fake: usize) -> (f64, Params) {
    let tape = critic.forward_flat(input, n_real + n_fake);
    let z = tape.output_logits();
    let mut up = vec![0.0; n_real + n_fake];
    let mut obj = 0.0;
    let (wr, wf) = (1.0 / n_real as f64, 1.0 / n_fake as f64);
    for (i, &zi) in z.iter().enumerate() {
        if i < n_real {
            obj += wr * softplus(-zi);
            up[i] = wr * (sigmoid(zi) - 1.0);
        } else {
            obj += wf * softplus(zi);
            up[i] = wf * sigmoid(zi);
        }
    }
    let (g, _) = critic.backward(&tape, &up, GradAt::Logits, false);
    (obj, g)
}

fn split_halves(n: usize, seed_value: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed_value));
    let eval = idx.split_off(n / 2);
    (idx, eval)
}

/// Critic-gap estimate of the discrepancy between `mapped_a` and `b`.
pub fn estimate_disc(mapped_a: &[Vec<f64>], b: &[Vec<f64>], spec: &DiscSpec) -> Result<DiscEstimate> {
    if mapped_a.len() < 2 || b.len() < 2 {
        return Err(Error::Usage("discrepancy needs at least two samples per side".into()));
    }
    let dim = mapped_a[0].len();
    if mapped_a.iter().chain(b).any(|r| r.len() != dim) {
        return Err(Error::Shape("discrepancy inputs have mismatched dimensions".into()));
    }
    if mapped_a.iter().chain(b).flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite sample in discrepancy input".into()));
    }
    let (a_train, a_eval) = split_halves(mapped_a.len(), seed::derive(spec.seed, "split/a"));
    let (b_train, b_eval) = split_halves(b.len(), seed::derive(spec.seed, "split/b"));
    let a_tr: Vec<&Vec<f64>> = a_train.iter().map(|&i| &mapped_a[i]).collect();
    let b_tr: Vec<&Vec<f64>> = b_train.iter().map(|&i| &b[i]).collect();
    let norm = Standardizer::fit(a_tr.iter().copied().chain(b_tr.iter().copied()), dim);

    let mut critic = init_mlp(&spec.critic_spec(dim).with_seed(seed::derive(spec.seed, "critic")))?;
    let mut opt = OptState::adam(&critic, spec.learning_rate);
    let mut input = norm.flat(&b_tr);
    input.extend(norm.flat(&a_tr));
    for _ in 0..spec.train_epochs {
        let (_, g) = critic_grads(&critic, input.clone(), b_tr.len(), a_tr.len());
        opt.step(&mut critic, &g)?;
    }

    let mean_out = |rows: Vec<&Vec<f64>>| -> f64 {
        let count = rows.len();
        let tape = critic.forward_flat(norm.flat(&rows), count);
        tape.output().iter().sum::<f64>() / count as f64
    };
    let ma = mean_out(a_eval.iter().map(|&i| &mapped_a[i]).collect());
    let mb = mean_out(b_eval.iter().map(|&i| &b[i]).collect());
    let value = (ma - mb).abs().clamp(0.0, 1.0);
    Ok(DiscEstimate {
        value,
        spec: spec.clone(),
        critic: Some(critic),
    })
}

/// Is `g` in the low-discrepancy set at threshold `eps1`?
pub fn in_low_disc_set(g: &dyn Mapping, pair: &DomainPair, eps1: f64, spec: &DiscSpec) -> Result<(bool, DiscEstimate)> {
    if !(eps1 > 0.0) {
        return Err(Error::Usage(format!("eps1 must be positive, got {eps1}")));
    }
    let est = estimate_disc(&g.apply_all(&pair.samples_a), &pair.samples_b, spec)?;
    Ok((est.value <= eps1, est))
}

/// W1 distance between two 1-D empirical distributions, integrating the gap
/// between their quantile functions exactly.
pub fn wasserstein1_1d(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut acc = 0.0;
    while i < na && j < nb {
        // Next breakpoint: min((i+1)/na, (j+1)/nb), compared exactly in integers.
        let lhs = (i + 1) as u128 * nb as u128;
        let rhs = (j + 1) as u128 * na as u128;
        let next = if lhs <= rhs {
            (i + 1) as f64 / na as f64
        } else {
            (j + 1) as f64 / nb as f64
        };
        acc += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if lhs <= rhs {
            i += 1;
        }
        if rhs <= lhs {
            j += 1;
        }
    }
    acc
}

/// Mean over `n_proj` random unit directions of the W1 distance between the
/// projected sets.
pub fn sliced_distance(s1: &[Vec<f64>], s2: &[Vec<f64>], n_proj: usize, seed_value: u64) -> Result<f64> {
    if s1.is_empty() || s2.is_empty() || n_proj == 0 {
        return Err(Error::Usage("sliced distance needs samples and projections".into()));
    }
    let dim = s1[0].len();
    if s1.iter().chain(s2).any(|r| r.len() != dim) {
        return Err(Error::Shape("sliced distance inputs have mismatched dimensions".into()));
    }
    let mut rng = seed::rng(seed_value);
    let mut total = 0.0;
    for _ in 0..n_proj {
        let mut dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        dir.iter_mut().for_each(|v| *v /= norm);
        let proj = |s: &[Vec<f64>]| -> Vec<f64> {
            s.iter().map(|r| r.iter().zip(&dir).map(|(x, d)| x * d).sum()).collect()
        };
        total += wasserstein1_1d(proj(s1), proj(s2));
    }
    Ok(total / n_proj as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{DomainKind, DomainSpec};
    use rand::Rng;

    fn uniform_box(n: usize, lo: f64, hi: f64, seed_value: u64) -> Vec<Vec<f64>> {
        let mut rng = seed::rng(seed_value);
        (0..n)
            .map(|_| vec![rng.gen_range(lo..hi), rng.gen_range(lo..hi)])
            .collect()
    }

    #[test]
    fn same_distribution_is_small() {
        let s = uniform_box(2000, -1.0, 1.0, 1);
        let (x, y) = s.split_at(1000);
        let est = estimate_disc(x, y, &DiscSpec::default()).unwrap();
        assert!(est.value <= 0.05, "{}", est.value);
    }

    #[test]
    fn disjoint_supports_separate() {
        let a = uniform_box(500, 2.0, 3.0, 2);
        let b = uniform_box(500, -3.0, -2.0, 3);
        let est = estimate_disc(&a, &b, &DiscSpec::default()).unwrap();
        assert!(est.value >= 0.9, "{}", est.value);
    }

    #[test]
    fn value_in_unit_interval() {
        let mut rng = seed::rng(4);
        for k in 0..100u64 {
            let shift = rng.gen_range(-3.0..3.0);
            let a = uniform_box(20, -1.0, 1.0, 100 + k);
            let b = uniform_box(20, shift - 1.0, shift + 1.0, 200 + k);
            let spec = DiscSpec {
                train_epochs: 20,
                ..DiscSpec::default()
            }
            .with_seed(k);
            let v = estimate_disc(&a, &b, &spec).unwrap().value;
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn dimension_mismatch() {
        let a = vec![vec![0.0, 1.0]; 4];
        let b = vec![vec![0.0]; 4];
        assert!(matches!(estimate_disc(&a, &b, &DiscSpec::default()), Err(Error::Shape(_))));
        assert!(matches!(sliced_distance(&a, &b, 3, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = uniform_box(200, -1.0, 1.0, 5);
        let b = uniform_box(200, -0.5, 1.5, 6);
        let spec = DiscSpec::default().with_seed(9);
        let x = estimate_disc(&a, &b, &spec).unwrap().value;
        let y = estimate_disc(&a, &b, &spec).unwrap().value;
        assert_eq!(x.to_bits(), y.to_bits());
    }

    #[test]
    fn low_disc_membership() {
        let spec = DomainSpec::new(DomainKind::AffineTarget, 2, 1000, 1000, 3);
        let pair = spec.build().unwrap();
        let oracle = pair.oracle.clone().unwrap();
        let disc = DiscSpec::default();
        assert!(in_low_disc_set(&oracle, &pair, 0.2, &disc).unwrap().0);
        let far = |_: &[f64]| vec![10.0, 10.0];
        assert!(!in_low_disc_set(&far, &pair, 0.2, &disc).unwrap().0);
        assert!(in_low_disc_set(&far, &pair, 1.0, &disc).unwrap().0);
        assert!(matches!(in_low_disc_set(&far, &pair, 0.0, &disc), Err(Error::Usage(_))));
    }

    #[test]
    fn sliced_identities() {
        let s = uniform_box(300, -1.0, 1.0, 7);
        assert_eq!(sliced_distance(&s, &s, 10, 1).unwrap(), 0.0);
        let line: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64 / 7.0]).collect();
        let shifted: Vec<Vec<f64>> = line.iter().map(|r| vec![r[0] + 0.75]).collect();
        let d = sliced_distance(&line, &shifted, 5, 2).unwrap();
        assert!((d - 0.75).abs() < 1e-12, "{d}");
    }

    #[test]
    fn sliced_converges_for_same_distribution() {
        let a = uniform_box(10_000, -1.0, 1.0, 8);
        let b = uniform_box(10_000, -1.0, 1.0, 9);
        assert!(sliced_distance(&a, &b, 50, 3).unwrap() < 0.02);
    }

    #[test]
    fn w1_unequal_counts() {
        // {0, 1} vs {0, 0.5, 1}: quantile gaps 0 on [0,1/3], 0.5 on [1/3,1/2]... total 1/6.
        let d = wasserstein1_1d(vec![0.0, 1.0], vec![0.0, 0.5, 1.0]);
        assert!((d - 1.0 / 6.0).abs() < 1e-15, "{d}");
    }
}
