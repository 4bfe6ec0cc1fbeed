//! Unsupervised training of a mapper `G: A -> B`.
//!
//! Three regimes share one minibatch loop: plain adversarial training,
//! cycle consistency with a reverse mapper `G'`, and distance preservation.
//! The loop also serves the bound witness `G2`, which adds a term pushing it
//! away from a fixed anchor network (see [`Repel`]).

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::discrepancy::{critic_grads, estimate_disc, DiscSpec};
use crate::domains::DomainPair;
use crate::nn::{init_mlp, sigmoid, sign, softplus, GradAt, Loss, Mlp, MlpSpec, OptState, Params};
use crate::{seed, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    GanOnly,
    Cycle,
    Distance,
}

fn one() -> f64 {
    1.0
}
fn default_epochs() -> usize {
    30
}
fn default_lr() -> f64 {
    5e-3
}
fn default_batch() -> usize {
    16
}
pub(crate) fn default_critic_lr() -> f64 {
    1e-2
}
pub(crate) fn default_beta1() -> f64 {
    0.5
}
fn default_critic() -> DiscSpec {
    DiscSpec::default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapTrainConfig {
    pub g_spec: MlpSpec,
    pub regime: Regime,
    /// Critic architecture, shared by the training-time discriminators and
    /// the discrepancy estimates.
    #[serde(default = "default_critic")]
    pub critic: DiscSpec,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "one")]
    pub gan_weight: f64,
    #[serde(default = "one")]
    pub cycle_weight: f64,
    #[serde(default = "one")]
    pub distance_weight: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_critic_lr")]
    pub critic_learning_rate: f64,
    /// First-moment decay of every Adam optimizer in the adversarial game.
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Linearly decays all learning rates towards zero over `epochs`.
    #[serde(default = "yes")]
    pub lr_decay: bool,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

/// Learning-rate multiplier for epoch `e` (0-based) of a linear schedule over
/// `horizon` epochs.
pub fn lr_factor(e: usize, horizon: usize) -> f64 {
    if horizon == 0 {
        1.0
    } else {
        (1.0 - e as f64 / horizon as f64).max(0.0)
    }
}

impl MapTrainConfig {
    pub fn new(g_spec: MlpSpec, regime: Regime) -> Self {
        Self {
            g_spec,
            regime,
            critic: default_critic(),
            epochs: default_epochs(),
            gan_weight: 1.0,
            cycle_weight: 1.0,
            distance_weight: 1.0,
            learning_rate: default_lr(),
            critic_learning_rate: default_critic_lr(),
            adam_beta1: default_beta1(),
            batch_size: default_batch(),
            lr_decay: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.g_spec.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("critic_learning_rate", self.critic_learning_rate)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return Err(Error::Config("adam_beta1 must lie in [0, 1)".into()));
        }
        let used: &[(&str, f64)] = match self.regime {
            Regime::GanOnly => &[("gan_weight", self.gan_weight)],
            Regime::Cycle => &[("gan_weight", self.gan_weight), ("cycle_weight", self.cycle_weight)],
            Regime::Distance => &[("gan_weight", self.gan_weight), ("distance_weight", self.distance_weight)],
        };
        for (name, w) in used {
            if !(*w > 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive for {:?}", self.regime)));
            }
        }
        Ok(())
    }

    pub(crate) fn settings(&self) -> TrainSettings {
        TrainSettings {
            regime: self.regime,
            critic: self.critic.clone(),
            gan_weight: self.gan_weight,
            cycle_weight: self.cycle_weight,
            distance_weight: self.distance_weight,
            learning_rate: self.learning_rate,
            critic_learning_rate: self.critic_learning_rate,
            adam_beta1: self.adam_beta1,
            batch_size: self.batch_size,
        }
    }
}

/// What one minibatch loop needs, whichever network it trains.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct TrainSettings {
    pub regime: Regime,
    pub critic: DiscSpec,
    pub gan_weight: f64,
    pub cycle_weight: f64,
    pub distance_weight: f64,
    pub learning_rate: f64,
    pub critic_learning_rate: f64,
    pub adam_beta1: f64,
    pub batch_size: usize,
}

/// Pushes the trained network away from `anchor`: adds
/// `-lambda * sum_i w_i * |G(x_i) - anchor(x_i)|_1` to the generator loss.
/// Without a focus point the weights are uniform over the batch. With one, the
/// focus point gets half of the total weight and the batch shares the rest.
#[derive(Clone, Copy, Debug)]
pub struct Repel<'a> {
    pub anchor: &'a Mlp,
    pub lambda: f64,
    pub focus: Option<&'a [f64]>,
}

/// Affine input normalization in front of a critic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl InputNorm {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            var.iter_mut()
                .zip(r.iter().zip(&mean))
                .for_each(|(s, (v, m))| *s += (v - m) * (v - m));
        }
        let inv_std = var.into_iter().map(|s| 1.0 / (s / n).sqrt().max(1e-6)).collect();
        Self { mean, inv_std }
    }

    fn apply_flat(&self, flat: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        flat.iter()
            .enumerate()
            .map(|(k, v)| (v - self.mean[k % d]) * self.inv_std[k % d])
            .collect()
    }

    fn rows(&self, rows: &[&Vec<f64>]) -> Vec<f64> {
        rows.iter()
            .flat_map(|r| r.iter().zip(&self.mean).zip(&self.inv_std).map(|((v, m), s)| (v - m) * s))
            .collect()
    }

    fn backprop(&self, grad: &mut [f64]) {
        let d = self.mean.len();
        grad.iter_mut().enumerate().for_each(|(k, g)| *g *= self.inv_std[k % d]);
    }
}

/// A network, its optimizer and nothing else.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trainee {
    pub net: Mlp,
    pub opt: OptState,
}

impl Trainee {
    fn new(net: Mlp, lr: f64, beta1: f64) -> Self {
        let mut opt = OptState::adam(&net, lr);
        opt.beta1 = beta1;
        Self { net, opt }
    }
}

/// Training-time discriminator for one side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub critic: Trainee,
    pub norm: InputNorm,
}

impl Discriminator {
    fn new(spec: &DiscSpec, real: &[Vec<f64>], seed_value: u64, lr: f64, beta1: f64) -> Result<Self> {
        let dim = real[0].len();
        let critic = init_mlp(&spec.critic_spec(dim).with_seed(seed_value))?;
        Ok(Self {
            critic: Trainee::new(critic, lr, beta1),
            norm: InputNorm::fit(real),
        })
    }

    /// One ascent step on the logistic objective.
    fn step(&mut self, real: &[&Vec<f64>], fake_flat: &[f64]) -> Result<()> {
        let mut input = self.norm.rows(real);
        input.extend(self.norm.apply_flat(fake_flat));
        let n_fake = fake_flat.len() / self.norm.mean.len();
        let (_, g) = critic_grads(&self.critic.net, input, real.len(), n_fake);
        self.critic.opt.step(&mut self.critic.net, &g)
    }

    /// Non-saturating generator loss `mean softplus(-z)` on `fake_flat` and
    /// its gradient with respect to the fake rows, scaled by `weight`.
    fn generator_grad(&self, fake_flat: &[f64], weight: f64) -> (f64, Vec<f64>) {
        let d = self.norm.mean.len();
        let count = fake_flat.len() / d;
        let tape = self.critic.net.forward_flat(self.norm.apply_flat(fake_flat), count);
        let z = tape.output_logits();
        let loss = z.iter().map(|&zi| softplus(-zi)).sum::<f64>() / count as f64;
        let up: Vec<f64> = z
            .iter()
            .map(|&zi| weight * (sigmoid(zi) - 1.0) / count as f64)
            .collect();
        let (_, g_in) = self.critic.net.backward(&tape, &up, GradAt::Logits, true);
        let mut g_in = g_in.unwrap();
        self.norm.backprop(&mut g_in);
        (loss, g_in)
    }
}

/// Standardization constants for pairwise L1 distances in each domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub mean_a: f64,
    pub std_a: f64,
    pub mean_b: f64,
    pub std_b: f64,
}

const MAX_STAT_PAIRS: usize = 200_000;

fn pairwise_l1_stats(rows: &[Vec<f64>], seed_value: u64) -> (f64, f64) {
    let n = rows.len();
    let mut dists = Vec::new();
    if n * (n.saturating_sub(1)) / 2 <= MAX_STAT_PAIRS {
        for i in 0..n {
            for j in i + 1..n {
                dists.push(Loss::L1.eval(&rows[i], &rows[j]));
            }
        }
    } else {
        use rand::Rng;
        let mut rng = seed::rng(seed_value);
        while dists.len() < MAX_STAT_PAIRS {
            let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if i != j {
                dists.push(Loss::L1.eval(&rows[i], &rows[j]));
            }
        }
    }
    if dists.is_empty() {
        return (0.0, 1.0);
    }
    let mean = dists.iter().sum::<f64>() / dists.len() as f64;
    let var = dists.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / dists.len() as f64;
    (mean, var.sqrt().max(1e-12))
}

impl DistanceStats {
    pub fn fit(pair: &DomainPair, seed_value: u64) -> Self {
        let (mean_a, std_a) = pairwise_l1_stats(&pair.samples_a, seed::derive(seed_value, "a"));
        let (mean_b, std_b) = pairwise_l1_stats(&pair.samples_b, seed::derive(seed_value, "b"));
        Self {
            mean_a,
            std_a,
            mean_b,
            std_b,
        }
    }

    /// Mean of `|d_A(x1,x2) - d_B(y1,y2)|` over consecutive pairs `(2k, 2k+1)`,
    /// plus the gradient with respect to the mapped rows when `grad` is given.
    fn loss(&self, xs: &[&Vec<f64>], mapped_flat: &[f64], dim_b: usize, mut grad: Option<&mut [f64]>, weight: f64) -> f64 {
        let pairs = xs.len() / 2;
        if pairs == 0 {
            return 0.0;
        }
        let mut total = 0.0;
        for k in 0..pairs {
            let (i, j) = (2 * k, 2 * k + 1);
            let da = (Loss::L1.eval(xs[i], xs[j]) - self.mean_a) / self.std_a;
            let yi = &mapped_flat[i * dim_b..(i + 1) * dim_b];
            let yj = &mapped_flat[j * dim_b..(j + 1) * dim_b];
            let db = (Loss::L1.eval(yi, yj) - self.mean_b) / self.std_b;
            total += (da - db).abs();
            if let Some(g) = grad.as_deref_mut() {
                let s = weight * sign(db - da) / (pairs as f64 * self.std_b);
                for c in 0..dim_b {
                    let e = s * sign(yi[c] - yj[c]);
                    g[i * dim_b + c] += e;
                    g[j * dim_b + c] -= e;
                }
            }
        }
        total / pairs as f64
    }
}

/// Per-epoch losses on the full sample sets. `None` where the regime has no
/// such term.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub gan_a: Option<f64>,
    pub gan_b: Option<f64>,
    pub cycle_a: Option<f64>,
    pub cycle_b: Option<f64>,
    pub distance_loss: Option<f64>,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapperState {
    pub g: Trainee,
    pub critic_b: Discriminator,
    /// Reverse mapper and its discriminator (cycle regime only).
    pub reverse: Option<(Trainee, Discriminator)>,
    pub distance: Option<DistanceStats>,
    /// Completed epochs.
    pub epoch: usize,
}

fn gather<'a>(rows: &'a [Vec<f64>], idx: &[usize]) -> Vec<&'a Vec<f64>> {
    idx.iter().map(|&i| &rows[i]).collect()
}

fn flat(rows: &[&Vec<f64>]) -> Vec<f64> {
    rows.iter().flat_map(|r| r.iter().copied()).collect()
}

impl MapperState {
    /// Fresh state; the generator is drawn from `g_spec` with a seed derived
    /// from `seed_value`.
    pub(crate) fn new(pair: &DomainPair, g_spec: &MlpSpec, s: &TrainSettings, seed_value: u64) -> Result<Self> {
        let g = init_mlp(&g_spec.clone().with_seed(seed::derive(seed_value, "g/init")))?;
        Self::with_generator(pair, g, s, seed_value)
    }

    pub(crate) fn with_generator(pair: &DomainPair, g: Mlp, s: &TrainSettings, seed_value: u64) -> Result<Self> {
        if g.input_dim() != pair.dim_a || g.output_dim() != pair.dim_b {
            return Err(Error::Shape(format!(
                "generator maps {} -> {}, domains are {} -> {}",
                g.input_dim(),
                g.output_dim(),
                pair.dim_a,
                pair.dim_b
            )));
        }
        let critic_b = Discriminator::new(
            &s.critic,
            &pair.samples_b,
            seed::derive(seed_value, "critic_b/init"),
            s.critic_learning_rate,
            s.adam_beta1,
        )?;
        let reverse = if s.regime == Regime::Cycle {
            let mut rspec = g.spec().clone();
            rspec.layer_widths.reverse();
            let gp = init_mlp(&rspec.with_seed(seed::derive(seed_value, "g_prime/init")))?;
            let critic_a = Discriminator::new(
                &s.critic,
                &pair.samples_a,
                seed::derive(seed_value, "critic_a/init"),
                s.critic_learning_rate,
                s.adam_beta1,
            )?;
            Some((Trainee::new(gp, s.learning_rate, s.adam_beta1), critic_a))
        } else {
            None
        };
        let distance = (s.regime == Regime::Distance).then(|| DistanceStats::fit(pair, seed::derive(seed_value, "distance")));
        Ok(Self {
            g: Trainee::new(g, s.learning_rate, s.adam_beta1),
            critic_b,
            reverse,
            distance,
            epoch: 0,
        })
    }

    /// Sets every learning rate to `factor` times its configured base value.
    pub(crate) fn set_lr(&mut self, s: &TrainSettings, factor: f64) {
        self.g.opt.learning_rate = s.learning_rate * factor;
        self.critic_b.critic.opt.learning_rate = s.critic_learning_rate * factor;
        if let Some((gp, critic_a)) = self.reverse.as_mut() {
            gp.opt.learning_rate = s.learning_rate * factor;
            critic_a.critic.opt.learning_rate = s.critic_learning_rate * factor;
        }
    }

    /// One pass over `S_A` in shuffled minibatches. Each step updates the
    /// critic(s) once, then the mapper(s) once.
    pub(crate) fn run_epoch(&mut self, pair: &DomainPair, s: &TrainSettings, repel: Option<&Repel>, epoch_seed: u64) -> Result<()> {
        let mut rng = seed::rng(epoch_seed);
        let (m, n) = (pair.m(), pair.n());
        let mut perm_a: Vec<usize> = (0..m).collect();
        perm_a.shuffle(&mut rng);
        let mut perm_b: Vec<usize> = (0..n).collect();
        perm_b.shuffle(&mut rng);
        let bs = s.batch_size.min(m).max(1);
        let steps = m.div_ceil(bs);
        for step in 0..steps {
            let a_idx = &perm_a[step * bs..((step + 1) * bs).min(m)];
            let b_idx: Vec<usize> = (0..a_idx.len()).map(|k| perm_b[(step * bs + k) % n]).collect();
            let a_rows = gather(&pair.samples_a, a_idx);
            let b_rows = gather(&pair.samples_b, &b_idx);
            let batch = a_rows.len();

            let fake_b = self.g.net.forward_flat(flat(&a_rows), batch);
            self.critic_b
                .step(&b_rows, fake_b.output())
                .map_err(|e| epoch_error(self.epoch, step, "critic_b", e))?;
            if let Some((gp, critic_a)) = self.reverse.as_mut() {
                let fake_a = gp.net.forward_flat(flat(&b_rows), batch);
                critic_a
                    .step(&a_rows, fake_a.output())
                    .map_err(|e| epoch_error(self.epoch, step, "critic_a", e))?;
            }

            let (loss, g_grads, gp_grads) = self.generator_grads(&a_rows, &b_rows, pair.dim_b, s, repel);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("epoch {}, step {step}: non-finite generator loss", self.epoch)));
            }
            self.g
                .opt
                .step(&mut self.g.net, &g_grads)
                .map_err(|e| epoch_error(self.epoch, step, "generator", e))?;
            if let (Some((gp, _)), Some(gpg)) = (self.reverse.as_mut(), gp_grads) {
                gp.opt
                    .step(&mut gp.net, &gpg)
                    .map_err(|e| epoch_error(self.epoch, step, "reverse generator", e))?;
            }
        }
        self.epoch += 1;
        Ok(())
    }

    /// Mapper objective on one minibatch with the critics held fixed, and its
    /// gradients for `G` and (cycle regime) `G'`.
    pub(crate) fn generator_grads(
        &self,
        a_rows: &[&Vec<f64>],
        b_rows: &[&Vec<f64>],
        db: usize,
        s: &TrainSettings,
        repel: Option<&Repel>,
    ) -> (f64, Params, Option<Params>) {
        let batch = a_rows.len();
        let da = a_rows[0].len();
        let a_flat = flat(a_rows);
        let tape_g = self.g.net.forward_flat(a_flat.clone(), batch);
        let (gan, mut up_g) = self.critic_b.generator_grad(tape_g.output(), s.gan_weight);
        let mut loss = s.gan_weight * gan;
        let mut extra_g: Option<Params> = None;

        if let Some(r) = repel {
            let anchor = r.anchor.forward_flat(a_flat, batch);
            let w = if r.focus.is_some() { 0.5 / batch as f64 } else { 1.0 / batch as f64 };
            loss -= r.lambda * w * l1_flat(tape_g.output(), anchor.output());
            add_repel(&mut up_g, tape_g.output(), anchor.output(), r.lambda * w);
            if let Some(x) = r.focus {
                let fx = self.g.net.forward_flat(x.to_vec(), 1);
                let ax = r.anchor.apply(x);
                loss -= r.lambda * 0.5 * l1_flat(fx.output(), &ax);
                let mut up = vec![0.0; db];
                add_repel(&mut up, fx.output(), &ax, r.lambda * 0.5);
                extra_g = Some(self.g.net.backward(&fx, &up, GradAt::Output, false).0);
            }
        }

        if let Some(stats) = &self.distance {
            loss += s.distance_weight * stats.loss(a_rows, tape_g.output(), db, Some(&mut up_g), s.distance_weight);
        }

        let mut gp_grads = None;
        if let Some((gp, critic_a)) = self.reverse.as_ref() {
            // A -> B -> A: L1 reconstruction of a through G then G'.
            let rec = gp.net.forward_flat(tape_g.output().to_vec(), batch);
            let mut up_rec = vec![0.0; batch * da];
            for (k, x) in a_rows.iter().enumerate() {
                let out = &rec.output()[k * da..(k + 1) * da];
                loss += s.cycle_weight / batch as f64 * Loss::L1.eval(out, x);
                Loss::L1.grad_into(out, x, s.cycle_weight / batch as f64, &mut up_rec[k * da..(k + 1) * da]);
            }
            let (mut gpg, g_in) = gp.net.backward(&rec, &up_rec, GradAt::Output, true);
            up_g.iter_mut().zip(g_in.unwrap()).for_each(|(u, v)| *u += v);

            // B -> A -> B, plus the adversarial term on G'(b).
            let tape_gp = gp.net.forward_flat(flat(b_rows), batch);
            let (gan_a, mut up_gp) = critic_a.generator_grad(tape_gp.output(), s.gan_weight);
            loss += s.gan_weight * gan_a;
            let tape_gb = self.g.net.forward_flat(tape_gp.output().to_vec(), batch);
            let mut up_gb = vec![0.0; batch * db];
            for (k, y) in b_rows.iter().enumerate() {
                let out = &tape_gb.output()[k * db..(k + 1) * db];
                loss += s.cycle_weight / batch as f64 * Loss::L1.eval(out, y);
                Loss::L1.grad_into(out, y, s.cycle_weight / batch as f64, &mut up_gb[k * db..(k + 1) * db]);
            }
            let (g_from_b, gb_in) = self.g.net.backward(&tape_gb, &up_gb, GradAt::Output, true);
            up_gp.iter_mut().zip(gb_in.unwrap()).for_each(|(u, v)| *u += v);
            gpg.add_scaled(&gp.net.backward(&tape_gp, &up_gp, GradAt::Output, false).0, 1.0);
            gp_grads = Some(gpg);
            match extra_g.as_mut() {
                Some(acc) => acc.add_scaled(&g_from_b, 1.0),
                None => extra_g = Some(g_from_b),
            }
        }

        let (mut grads, _) = self.g.net.backward(&tape_g, &up_g, GradAt::Output, false);
        if let Some(extra) = extra_g {
            grads.add_scaled(&extra, 1.0);
        }
        (loss, grads, gp_grads)
    }
}

fn l1_flat(a: &[f64], b: &[f64]) -> f64 {
    Loss::L1.eval(a, b)
}

fn add_repel(up: &mut [f64], out: &[f64], anchor: &[f64], scale: f64) {
    for ((u, o), a) in up.iter_mut().zip(out).zip(anchor) {
        *u -= scale * sign(o - a);
    }
}

fn epoch_error(epoch: usize, step: usize, what: &str, e: Error) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, step {step}, {what}: {msg}")),
        other => other,
    }
}

/// Losses of a trained state on the full sample sets, with the same
/// definitions as training.
pub fn eval_losses(state: &MapperState, pair: &DomainPair) -> Result<LossRecord> {
    let a_rows: Vec<&Vec<f64>> = pair.samples_a.iter().collect();
    let b_rows: Vec<&Vec<f64>> = pair.samples_b.iter().collect();
    let (da, db) = (pair.dim_a, pair.dim_b);
    let g_a = state.g.net.forward_flat(flat(&a_rows), a_rows.len());
    let mut rec = LossRecord {
        gan_b: Some(state.critic_b.generator_grad(g_a.output(), 1.0).0),
        ..LossRecord::default()
    };
    if let Some((gp, critic_a)) = &state.reverse {
        let gp_b = gp.net.forward_flat(flat(&b_rows), b_rows.len());
        rec.gan_a = Some(critic_a.generator_grad(gp_b.output(), 1.0).0);
        let back_a = gp.net.forward_flat(g_a.output().to_vec(), a_rows.len());
        rec.cycle_a = Some(mean_l1_rows(back_a.output(), &a_rows, da));
        let back_b = state.g.net.forward_flat(gp_b.output().to_vec(), b_rows.len());
        rec.cycle_b = Some(mean_l1_rows(back_b.output(), &b_rows, db));
    }
    if let Some(stats) = &state.distance {
        rec.distance_loss = Some(stats.loss(&a_rows, g_a.output(), db, None, 1.0));
    }
    if [rec.gan_a, rec.gan_b, rec.cycle_a, rec.cycle_b, rec.distance_loss]
        .iter()
        .flatten()
        .any(|v| !v.is_finite())
    {
        return Err(Error::Numeric(format!("non-finite loss after epoch {}", state.epoch)));
    }
    Ok(rec)
}

/// Cycle losses need the reverse mapper. Asking for them on a state without
/// one is a usage error.
pub fn eval_cycle_losses(state: &MapperState, pair: &DomainPair) -> Result<(f64, f64)> {
    if state.reverse.is_none() {
        return Err(Error::Usage("cycle losses need a reverse mapper G'".into()));
    }
    let rec = eval_losses(state, pair)?;
    Ok((rec.cycle_a.unwrap(), rec.cycle_b.unwrap()))
}

fn mean_l1_rows(out: &[f64], rows: &[&Vec<f64>], d: usize) -> f64 {
    rows.iter()
        .enumerate()
        .map(|(k, r)| Loss::L1.eval(&out[k * d..(k + 1) * d], r))
        .sum::<f64>()
        / rows.len() as f64
}

/// One row of `losses.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossRecord,
    pub disc_estimate: f64,
}

/// Result of [`train_g1`]: one snapshot per epoch including the initial one.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub snapshots: Vec<Mlp>,
    pub log: Vec<EpochLog>,
    pub state: MapperState,
}

/// Seed of epoch `e` of a run: depends only on the run seed and `e`.
pub fn epoch_seed(run_seed: u64, epoch: usize) -> u64 {
    seed::derive_indexed(run_seed, "epoch", epoch as u64)
}

/// Trains `G1` for `cfg.epochs` epochs, calling `on_epoch` after each.
pub fn train_g1(pair: &DomainPair, cfg: &MapTrainConfig, on_epoch: impl FnMut(usize, &MapperState)) -> Result<TrainRun> {
    cfg.validate()?;
    let settings = cfg.settings();
    let state = MapperState::new(pair, &cfg.g_spec, &settings, cfg.seed)?;
    train_from(pair, cfg, state, on_epoch)
}

/// Like [`train_g1`] but starting from a given generator.
pub fn train_g1_from(pair: &DomainPair, cfg: &MapTrainConfig, g: Mlp, on_epoch: impl FnMut(usize, &MapperState)) -> Result<TrainRun> {
    cfg.validate()?;
    let state = MapperState::with_generator(pair, g, &cfg.settings(), cfg.seed)?;
    train_from(pair, cfg, state, on_epoch)
}

fn train_from(pair: &DomainPair, cfg: &MapTrainConfig, mut state: MapperState, mut on_epoch: impl FnMut(usize, &MapperState)) -> Result<TrainRun> {
    let settings = cfg.settings();
    let mut snapshots = vec![state.g.net.clone()];
    let mut log = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        if cfg.lr_decay {
            state.set_lr(&settings, lr_factor(e, cfg.epochs));
        }
        state.run_epoch(pair, &settings, None, epoch_seed(cfg.seed, e))?;
        let losses = eval_losses(&state, pair)?;
        let disc = estimate_disc(
            &state.g.net.map_all(&pair.samples_a),
            &pair.samples_b,
            &cfg.critic.clone().with_seed(seed::derive_indexed(cfg.seed, "disc/g1", e as u64)),
        )?
        .value;
        log.push(EpochLog {
            epoch: e + 1,
            losses,
            disc_estimate: disc,
        });
        snapshots.push(state.g.net.clone());
        on_epoch(e + 1, &state);
    }
    Ok(TrainRun { snapshots, log, state })
}

/// Writes `epoch_XXXX.json` snapshots and `losses.csv` into `dir`.
pub fn save_run(run: &TrainRun, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (e, net) in run.snapshots.iter().enumerate() {
        let p = dir.join(format!("epoch_{e:04}.json"));
        std::fs::write(&p, serde_json::to_string(net)?).map_err(|e| Error::io(&p, e))?;
    }
    crate::report::write_losses_csv(&run.log, &dir.join("losses.csv"))
}
