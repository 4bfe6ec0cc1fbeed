//! The adversarial error bound.
//!
//! A witness `G2` is trained to stay close to `D_B` while moving as far from
//! `G1` as it can; the risk between the two upper-bounds the error of `G1`
//! whenever the target itself is a low-discrepancy map. On top of the witness
//! sit early stopping, model selection, per-sample bounds and the calibration
//! of the trade-off weight `lambda`.

use serde::{Deserialize, Serialize};

use crate::discrepancy::{estimate_disc, DiscSpec};
use crate::domains::{risk, DomainPair, Mapping};
use crate::mapping::{default_beta1, EpochLog, default_critic_lr, epoch_seed, lr_factor, train_g1, MapTrainConfig, MapperState, Regime, Repel, TrainSettings};
use crate::nn::{Loss, Mlp, MlpSpec};
use crate::{parallel, seed, Error, Result};
use crate::stats::argmin_first;

fn default_t2() -> usize {
    10
}
fn default_eps1() -> f64 {
    0.2
}
fn default_lr() -> f64 {
    5e-3
}
fn default_batch() -> usize {
    16
}
fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConfig {
    /// Architecture of `G2`; the class of `G1` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g2_spec: Option<MlpSpec>,
    pub lambda: f64,
    #[serde(default = "default_t2")]
    pub t2: usize,
    #[serde(default = "default_eps1")]
    pub eps1: f64,
    #[serde(default)]
    pub critic: DiscSpec,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_critic_lr")]
    pub critic_learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "yes")]
    pub lr_decay: bool,
    /// Start each `G2` of the stopping criterion from the previous one.
    #[serde(default)]
    pub warm_start: bool,
    /// Number of `G2` runs per bound; the largest admissible bound is kept.
    #[serde(default = "one")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
}

impl BoundConfig {
    pub fn new(lambda: f64) -> Self {
        Self {
            g2_spec: None,
            lambda,
            t2: default_t2(),
            eps1: default_eps1(),
            critic: DiscSpec::default(),
            learning_rate: default_lr(),
            critic_learning_rate: default_critic_lr(),
            adam_beta1: default_beta1(),
            batch_size: default_batch(),
            lr_decay: true,
            warm_start: false,
            restarts: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.t2 == 0 {
            return Err(Error::Config("t2 must be at least 1".into()));
        }
        if !(self.eps1 > 0.0) {
            return Err(Error::Config(format!("eps1 must be positive, got {}", self.eps1)));
        }
        if !(self.learning_rate >= 0.0 && self.critic_learning_rate >= 0.0) || !(0.0..1.0).contains(&self.adam_beta1) {
            return Err(Error::Config("learning rates must be non-negative and adam_beta1 in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.restarts == 0 {
            return Err(Error::Config("batch_size and restarts must be positive".into()));
        }
        if let Some(s) = &self.g2_spec {
            s.validate()?;
        }
        Ok(())
    }

    pub(crate) fn settings(&self) -> TrainSettings {
        TrainSettings {
            regime: Regime::GanOnly,
            critic: self.critic.clone(),
            gan_weight: 1.0,
            cycle_weight: 0.0,
            distance_weight: 0.0,
            learning_rate: self.learning_rate,
            critic_learning_rate: self.critic_learning_rate,
            adam_beta1: self.adam_beta1,
            batch_size: self.batch_size,
        }
    }

    fn g2_spec_for(&self, g1: &Mlp) -> MlpSpec {
        self.g2_spec.clone().unwrap_or_else(|| g1.spec().clone())
    }

    fn disc_spec(&self, seed_value: u64) -> DiscSpec {
        self.critic.clone().with_seed(seed_value)
    }
}

/// Empirical L1 risk between two maps on `samples_a`.
pub fn bound_value(g1: &dyn Mapping, g2: &dyn Mapping, samples_a: &[Vec<f64>]) -> Result<f64> {
    risk(g1, g2, samples_a, Loss::L1)
}

/// Fresh witness state for `g1`.
pub(crate) fn witness_state(g1: &Mlp, pair: &DomainPair, cfg: &BoundConfig, seed_value: u64) -> Result<MapperState> {
    MapperState::new(pair, &cfg.g2_spec_for(g1), &cfg.settings(), seed_value)
}

/// Advances a witness by epochs `from..to` of its schedule.
pub(crate) fn advance_witness(
    state: &mut MapperState,
    g1: &Mlp,
    pair: &DomainPair,
    cfg: &BoundConfig,
    focus: Option<&[f64]>,
    seed_value: u64,
    horizon: usize,
    to: usize,
) -> Result<()> {
    let s = cfg.settings();
    let repel = Repel {
        anchor: g1,
        lambda: cfg.lambda,
        focus,
    };
    while state.epoch < to {
        let e = state.epoch;
        if cfg.lr_decay {
            state.set_lr(&s, lr_factor(e, horizon));
        }
        state.run_epoch(pair, &s, Some(&repel), epoch_seed(seed_value, e))?;
    }
    Ok(())
}

fn train_witness(g1: &Mlp, pair: &DomainPair, cfg: &BoundConfig, focus: Option<&[f64]>, seed_value: u64, init: Option<Mlp>) -> Result<Mlp> {
    let mut state = match init {
        Some(g) => MapperState::with_generator(pair, g, &cfg.settings(), seed_value)?,
        None => witness_state(g1, pair, cfg, seed_value)?,
    };
    advance_witness(&mut state, g1, pair, cfg, focus, seed_value, cfg.t2, cfg.t2)?;
    Ok(state.g.net)
}

/// Trains `G2` against a fixed `g1` for exactly `cfg.t2` epochs, minimizing
/// `disc(G2 o D_A, D_B) - lambda * R[G1, G2]`.
pub fn train_g2(g1: &Mlp, pair: &DomainPair, cfg: &BoundConfig) -> Result<Mlp> {
    cfg.validate()?;
    train_witness(g1, pair, cfg, None, cfg.seed, None)
}

/// A trained witness with its discrepancy and bound.
#[derive(Clone, Debug)]
pub struct Witness {
    pub g2: Mlp,
    pub disc_g2: f64,
    pub bound: f64,
}

fn fit_witness(
    g1: &Mlp,
    pair: &DomainPair,
    cfg: &BoundConfig,
    focus: Option<&[f64]>,
    seed_value: u64,
    init: Option<Mlp>,
) -> Result<Witness> {
    let mut best: Option<Witness> = None;
    for r in 0..cfg.restarts {
        let s = if r == 0 { seed_value } else { seed::derive_indexed(seed_value, "restart", r as u64) };
        let g2 = train_witness(g1, pair, cfg, focus, s, init.clone())?;
        let disc_g2 = estimate_disc(&g2.map_all(&pair.samples_a), &pair.samples_b, &cfg.disc_spec(seed::derive(s, "disc/g2")))?.value;
        let bound = match focus {
            Some(x) => Loss::L1.eval(&g1.apply(x), &g2.apply(x)),
            None => bound_value(g1, &g2, &pair.samples_a)?,
        };
        let cand = Witness { g2, disc_g2, bound };
        best = Some(match best {
            None => cand,
            Some(b) => {
                let (ca, ba) = (cand.disc_g2 <= cfg.eps1, b.disc_g2 <= cfg.eps1);
                let better = match (ca, ba) {
                    (true, true) => cand.bound > b.bound,
                    (true, false) => true,
                    (false, true) => false,
                    (false, false) => cand.disc_g2 < b.disc_g2,
                };
                if better {
                    cand
                } else {
                    b
                }
            }
        });
    }
    Ok(best.expect("restarts >= 1"))
}

/// One epoch of the stopping criterion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub epoch: usize,
    pub bound: f64,
    pub disc_g1: f64,
    pub disc_g2: f64,
    pub truth: Option<f64>,
    /// Ground-truth risk of the witness itself, for the empirical `eps2`.
    pub witness_truth: Option<f64>,
    pub valid: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTrajectory {
    pub records: Vec<BoundRecord>,
}

impl BoundTrajectory {
    /// Smallest ground-truth risk of any recorded `G1` or `G2` snapshot.
    pub fn eps2_hat(&self) -> Option<f64> {
        self.records
            .iter()
            .flat_map(|r| [r.truth, r.witness_truth])
            .flatten()
            .min_by(f64::total_cmp)
    }

    pub fn valid(&self) -> impl Iterator<Item = &BoundRecord> {
        self.records.iter().filter(|r| r.valid)
    }
}

#[derive(Clone, Debug)]
pub struct StopResult {
    /// Chosen epoch (1-based).
    pub t_star: usize,
    /// Set when no epoch passed the discrepancy gates; `t_star` is then the
    /// last epoch.
    pub no_valid_epoch: bool,
    pub trajectory: BoundTrajectory,
    pub snapshots: Vec<Mlp>,
    /// Per-epoch losses of the `G1` run.
    pub log: Vec<EpochLog>,
}

/// Selects the stopping epoch of `G1` by the bound.
pub fn stopping_criterion(pair: &DomainPair, map_cfg: &MapTrainConfig, bound_cfg: &BoundConfig) -> Result<StopResult> {
    bound_cfg.validate()?;
    let run = train_g1(pair, map_cfg, |_, _| {})?;
    let trajectory = bound_trajectory(pair, &run.snapshots[1..], bound_cfg)?;
    let valid: Vec<&BoundRecord> = trajectory.valid().collect();
    let (t_star, no_valid_epoch) = match argmin_first(&valid.iter().map(|r| r.bound).collect::<Vec<_>>()) {
        Some(i) => (valid[i].epoch, false),
        None => {
            log::warn!("no epoch passed the discrepancy gates at eps1 = {}", bound_cfg.eps1);
            (trajectory.records.len(), true)
        }
    };
    Ok(StopResult {
        t_star,
        no_valid_epoch,
        trajectory,
        snapshots: run.snapshots,
        log: run.log,
    })
}

/// Bound records for a sequence of `G1` snapshots (epochs 1..).
pub fn bound_trajectory(pair: &DomainPair, g1s: &[Mlp], cfg: &BoundConfig) -> Result<BoundTrajectory> {
    cfg.validate()?;
    let record = |i: usize, g1: &Mlp, w: &Witness| -> Result<BoundRecord> {
        let disc_g1 = estimate_disc(
            &g1.map_all(&pair.samples_a),
            &pair.samples_b,
            &cfg.disc_spec(seed::derive_indexed(cfg.seed, "disc/g1", i as u64 + 1)),
        )?
        .value;
        Ok(BoundRecord {
            epoch: i + 1,
            bound: w.bound,
            disc_g1,
            disc_g2: w.disc_g2,
            truth: pair.truth_risk(g1, &pair.samples_a),
            witness_truth: pair.truth_risk(&w.g2, &pair.samples_a),
            valid: disc_g1 <= cfg.eps1 && w.disc_g2 <= cfg.eps1,
        })
    };
    let records = if cfg.warm_start {
        let mut prev: Option<Mlp> = None;
        let mut out = Vec::with_capacity(g1s.len());
        for (i, g1) in g1s.iter().enumerate() {
            let w = fit_witness(g1, pair, cfg, None, seed::derive_indexed(cfg.seed, "g2", i as u64 + 1), prev.take())?;
            out.push(record(i, g1, &w)?);
            prev = Some(w.g2);
        }
        out
    } else {
        parallel::try_map(g1s, |i, g1| {
            let w = fit_witness(g1, pair, cfg, None, seed::derive_indexed(cfg.seed, "g2", i as u64 + 1), None)?;
            record(i, g1, &w)
        })?
    };
    Ok(BoundTrajectory { records })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub index: usize,
    pub spec: MlpSpec,
    pub disc_g1: f64,
    pub admitted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub bound: Option<f64>,
    pub disc_g2: Option<f64>,
    pub truth: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SelectResult {
    pub chosen: usize,
    pub records: Vec<CandidateRecord>,
    pub g1s: Vec<Mlp>,
}

/// Trains every candidate, admits those with `disc <= eps1`, and picks the
/// admitted one with the smallest bound.
pub fn model_select(pair: &DomainPair, candidates: &[MlpSpec], map_cfg: &MapTrainConfig, bound_cfg: &BoundConfig) -> Result<SelectResult> {
    if candidates.len() < 2 {
        return Err(Error::Usage("model selection needs at least two candidates".into()));
    }
    bound_cfg.validate()?;
    let out = parallel::try_map(candidates, |i, spec| {
        let mut cfg = map_cfg.clone();
        cfg.g_spec = spec.clone();
        let g1 = train_g1(pair, &cfg, |_, _| {})?.state.g.net;
        let disc_g1 = estimate_disc(
            &g1.map_all(&pair.samples_a),
            &pair.samples_b,
            &bound_cfg.disc_spec(seed::derive_indexed(bound_cfg.seed, "disc/candidate", i as u64)),
        )?
        .value;
        let truth = pair.truth_risk(&g1, &pair.samples_a);
        let mut rec = CandidateRecord {
            index: i,
            spec: spec.clone(),
            disc_g1,
            admitted: disc_g1 <= bound_cfg.eps1,
            reason: None,
            bound: None,
            disc_g2: None,
            truth,
        };
        if rec.admitted {
            let mut bcfg = bound_cfg.clone();
            bcfg.g2_spec = bcfg.g2_spec.or_else(|| Some(spec.clone()));
            let w = fit_witness(&g1, pair, &bcfg, None, seed::derive_indexed(bound_cfg.seed, "g2/candidate", i as u64), None)?;
            rec.bound = Some(w.bound);
            rec.disc_g2 = Some(w.disc_g2);
        } else {
            rec.reason = Some(format!("disc {disc_g1:.4} > eps1 {}", bound_cfg.eps1));
        }
        Ok((rec, g1))
    })?;
    let (records, g1s): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    let admitted: Vec<&CandidateRecord> = records.iter().filter(|r| r.admitted).collect();
    let chosen = match argmin_first(&admitted.iter().map(|r| r.bound.unwrap()).collect::<Vec<_>>()) {
        Some(i) => admitted[i].index,
        None => {
            let listing: Vec<String> = records.iter().map(|r| format!("#{}: disc {:.4}", r.index, r.disc_g1)).collect();
            return Err(Error::NoAdmissible(format!(
                "no admissible model at eps1 = {} ({})",
                bound_cfg.eps1,
                listing.join(", ")
            )));
        }
    };
    Ok(SelectResult { chosen, records, g1s })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerSampleRecord {
    pub index: usize,
    pub x: Vec<f64>,
    pub bound_x: f64,
    pub truth_x: Option<f64>,
    pub disc_g2: f64,
}

/// Bound on the loss of `g1` at the single point `x`: a fresh witness is
/// trained with half of the repulsion weight on `x`.
pub fn per_sample_bound(g1: &Mlp, x: &[f64], pair: &DomainPair, cfg: &BoundConfig) -> Result<PerSampleRecord> {
    per_sample_with_seed(g1, 0, x, pair, cfg, cfg.seed)
}

fn per_sample_with_seed(g1: &Mlp, index: usize, x: &[f64], pair: &DomainPair, cfg: &BoundConfig, seed_value: u64) -> Result<PerSampleRecord> {
    cfg.validate()?;
    if x.len() != pair.dim_a {
        return Err(Error::Shape(format!("sample has dim {}, domain A has {}", x.len(), pair.dim_a)));
    }
    let w = fit_witness(g1, pair, cfg, Some(x), seed_value, None)?;
    Ok(PerSampleRecord {
        index,
        x: x.to_vec(),
        bound_x: w.bound,
        truth_x: pair.truth_at(&g1.apply(x), x),
        disc_g2: w.disc_g2,
    })
}

/// [`per_sample_bound`] for many points, one independent job each.
pub fn per_sample_bounds(g1: &Mlp, xs: &[Vec<f64>], pair: &DomainPair, cfg: &BoundConfig) -> Result<Vec<PerSampleRecord>> {
    parallel::try_map(xs, |i, x| {
        per_sample_with_seed(g1, i, x, pair, cfg, seed::derive_indexed(cfg.seed, "sample", i as u64))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub lambda: f64,
    /// Median over repeats.
    pub disc_g2: f64,
    pub admissible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub lambda: f64,
    pub entries: Vec<CalibrationEntry>,
}

/// The largest `lambda` in `grid` whose witness stays within `eps1`.
pub fn calibrate_lambda(pair: &DomainPair, g1: &Mlp, cfg: &BoundConfig, grid: &[f64]) -> Result<Calibration> {
    calibrate_lambda_with(pair, g1, cfg, grid, 1)
}

/// Like [`calibrate_lambda`], judging each grid value by the median witness
/// discrepancy over `repeats` seeds.
pub fn calibrate_lambda_with(pair: &DomainPair, g1: &Mlp, cfg: &BoundConfig, grid: &[f64], repeats: usize) -> Result<Calibration> {
    if grid.is_empty() || repeats == 0 {
        return Err(Error::Usage("calibration needs a non-empty grid and at least one repeat".into()));
    }
    if grid.iter().any(|l| !(*l > 0.0 && l.is_finite())) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Usage("lambda grid must be positive and strictly ascending".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|i| (0..repeats).map(move |r| (i, r))).collect();
    let discs = parallel::try_map(&jobs, |_, &(i, r)| {
        let mut c = cfg.clone();
        c.lambda = grid[i];
        c.validate()?;
        let s = seed::derive_indexed(cfg.seed, "calibrate", r as u64);
        Ok(fit_witness(g1, pair, &c, None, s, None)?.disc_g2)
    })?;
    let entries: Vec<CalibrationEntry> = grid
        .iter()
        .enumerate()
        .map(|(i, &lambda)| {
            let mut d = discs[i * repeats..(i + 1) * repeats].to_vec();
            d.sort_by(f64::total_cmp);
            let disc_g2 = if repeats % 2 == 1 {
                d[repeats / 2]
            } else {
                0.5 * (d[repeats / 2 - 1] + d[repeats / 2])
            };
            CalibrationEntry {
                lambda,
                disc_g2,
                admissible: disc_g2 <= cfg.eps1,
            }
        })
        .collect();
    match entries.iter().rev().find(|e| e.admissible) {
        Some(e) => Ok(Calibration { lambda: e.lambda, entries }),
        None => Err(Error::Calibration(format!(
            "no lambda in the grid keeps disc(G2) <= {}; try smaller values or a larger eps1",
            cfg.eps1
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheck {
    pub g1: usize,
    pub risk_to_target: f64,
    pub max_witness_risk: f64,
    pub min_target_gap: f64,
    pub violation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub eps1: f64,
    pub loss: Loss,
    pub pool_size: usize,
    pub disc: Vec<f64>,
    pub admissible: Vec<usize>,
    pub skipped: bool,
    pub checks: Vec<LemmaCheck>,
    pub violations: usize,
}

pub const LEMMA_SLACK: f64 = 1e-12;

/// `size` networks around `center`: member `k` moves every parameter along a
/// seeded random direction of norm `spread * k / (size - 1)`, so member 0 is
/// `center` itself.
pub fn perturbation_pool(center: &Mlp, size: usize, spread: f64, seed_value: u64) -> Result<Vec<Mlp>> {
    use rand_distr::{Distribution, StandardNormal};
    if size == 0 || !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Usage("pool needs a positive size and a finite spread".into()));
    }
    let mut rng = seed::rng(seed::derive(seed_value, "pool/directions"));
    let p = center.param_values().count();
    (0..size)
        .map(|k| {
            let dir: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            let radius = if size == 1 { 0.0 } else { spread * k as f64 / (size - 1) as f64 };
            let mut net = center.clone();
            for (w, d) in net.param_values_mut().zip(&dir) {
                *w += radius * d / norm;
            }
            Ok(net)
        })
        .collect()
}

/// Checks `R[G1, y] <= max_{G2 in P} R[G1, G2] + min_{G in P} R[G, y]` for
/// every pool member, where `P` is the low-discrepancy part of the pool.
pub fn verify_lemma2_oracle(pool: &[Mlp], y: &dyn Mapping, pair: &DomainPair, eps1: f64, loss: Loss, critic: &DiscSpec) -> Result<LemmaReport> {
    if pool.is_empty() {
        return Err(Error::Usage("empty pool".into()));
    }
    let xs = &pair.samples_a;
    let disc = parallel::try_map(pool, |i, g| {
        Ok(estimate_disc(&g.map_all(xs), &pair.samples_b, &critic.clone().with_seed(seed::derive_indexed(critic.seed, "pool", i as u64)))?.value)
    })?;
    let admissible: Vec<usize> = (0..pool.len()).filter(|&i| disc[i] <= eps1).collect();
    let mut report = LemmaReport {
        eps1,
        loss,
        pool_size: pool.len(),
        disc,
        admissible: admissible.clone(),
        skipped: admissible.is_empty(),
        checks: Vec::new(),
        violations: 0,
    };
    if report.skipped {
        log::warn!("no pool member has disc <= {eps1}; lemma check skipped");
        return Ok(report);
    }
    let min_target_gap = admissible
        .iter()
        .map(|&j| risk(&pool[j], y, xs, loss))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    for (i, g1) in pool.iter().enumerate() {
        let risk_to_target = risk(g1, y, xs, loss)?;
        let max_witness_risk = admissible
            .iter()
            .map(|&j| risk(g1, &pool[j], xs, loss))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        let violation = risk_to_target > max_witness_risk + min_target_gap + LEMMA_SLACK;
        report.violations += violation as usize;
        report.checks.push(LemmaCheck {
            g1: i,
            risk_to_target,
            max_witness_risk,
            min_target_gap,
            violation,
        });
    }
    Ok(report)
}
