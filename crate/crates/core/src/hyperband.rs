//! Hyperband with the bound as its validation loss.
//!
//! Each configuration `theta` owns a `(G1, G2)` pair that is trained
//! incrementally: asking for budget `T` continues both networks from the
//! stored epoch count to `T`. Epoch `e` of a configuration always uses the
//! same seeds and learning rates, so a run resumed at any budget is bitwise
//! equal to one trained straight through.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bound::{advance_witness, bound_value, witness_state, BoundConfig};
use crate::discrepancy::estimate_disc;
use crate::domains::DomainPair;
use crate::mapping::{epoch_seed, lr_factor, MapTrainConfig, MapperState};
use crate::nn::{Mlp, MlpSpec};
use crate::{parallel, seed, Error, Result};

/// Added to the loss of a configuration whose `G1` or `G2` is not within
/// `eps1` of `D_B`.
pub const INVALID_PENALTY: f64 = 10.0;

/// One point of the search space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Theta {
    /// Hidden layers of `G1` and `G2`.
    pub depth: usize,
    pub width: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Theta {
    /// Sorted-key JSON with shortest round-trip floats.
    pub fn canonical(&self) -> String {
        serde_json::to_value(self).expect("plain struct").to_string()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn g_spec(&self, base: &MlpSpec, dim_a: usize, dim_b: usize) -> MlpSpec {
        let mut widths = vec![dim_a];
        widths.extend(std::iter::repeat(self.width).take(self.depth));
        widths.push(dim_b);
        MlpSpec::new(widths, base.activation, base.output_activation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperSpace {
    /// Inclusive range of hidden-layer counts.
    pub depth: (usize, usize),
    /// Inclusive range of hidden widths.
    pub width: (usize, usize),
    /// Log-uniform range.
    pub learning_rate: (f64, f64),
    pub batch_size: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl HyperSpace {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.learning_rate;
        if self.depth.0 > self.depth.1 || self.width.0 > self.width.1 || self.width.0 == 0 {
            return Err(Error::Config("depth and width ranges must be ordered, widths positive".into()));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("learning_rate range ({lo}, {hi}) must be positive and ordered")));
        }
        if self.batch_size.is_empty() || self.batch_size.contains(&0) {
            return Err(Error::Config("batch_size must list positive sizes".into()));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut seed::Rng) -> Theta {
        let (lo, hi) = self.learning_rate;
        let learning_rate = if lo == hi { lo } else { (rng.gen_range(lo.ln()..hi.ln())).exp() };
        Theta {
            depth: rng.gen_range(self.depth.0..=self.depth.1),
            width: rng.gen_range(self.width.0..=self.width.1),
            learning_rate,
            batch_size: self.batch_size[rng.gen_range(0..self.batch_size.len())],
        }
    }
}

/// Trainer state of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredModels {
    pub t_last: usize,
    pub g1: MapperState,
    pub g2: MapperState,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    t_last: usize,
}

#[derive(Serialize, Deserialize)]
struct TrainerStates {
    g1: MapperState,
    g2: MapperState,
}

/// On-disk map from `theta` to its models: one directory per hash holding
/// `theta.json`, `g1.json`, `g2.json`, `meta.json` and `state.json` (the
/// optimizer and critic states needed to resume bitwise).
#[derive(Clone, Debug)]
pub struct HyperbandStore {
    root: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl HyperbandStore {
    /// Opens (or creates) a store bound to `context`, the settings shared by
    /// every configuration. Reopening with a different context fails.
    pub fn open(root: impl Into<PathBuf>, context: &serde_json::Value) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let path = root.join("store.json");
        let encoded = context.to_string();
        if path.exists() {
            let found: serde_json::Value = read_json(&path)?;
            if found.to_string() != encoded {
                return Err(Error::Integrity(format!(
                    "{} was created with different settings",
                    root.display()
                )));
            }
        } else {
            write_atomic(&path, &encoded)?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, theta: &Theta) -> PathBuf {
        self.root.join(theta.hash())
    }

    /// The stored models of `theta`, or `None` for a configuration never seen.
    pub fn retrieve(&self, theta: &Theta) -> Result<Option<StoredModels>> {
        let dir = self.dir(theta);
        if !dir.exists() {
            return Ok(None);
        }
        let stored_theta: serde_json::Value = read_json(&dir.join("theta.json"))?;
        if stored_theta.to_string() != theta.canonical() {
            return Err(Error::Integrity(format!("hash collision or tampering in {}", dir.display())));
        }
        let meta: Meta = read_json(&dir.join("meta.json"))?;
        let g1: Mlp = read_json(&dir.join("g1.json"))?;
        let g2: Mlp = read_json(&dir.join("g2.json"))?;
        let states: TrainerStates = read_json(&dir.join("state.json"))?;
        if states.g1.g.net != g1 || states.g2.g.net != g2 {
            return Err(Error::Integrity(format!("{}: networks disagree with trainer state", dir.display())));
        }
        if states.g1.epoch != meta.t_last || states.g2.epoch != meta.t_last {
            return Err(Error::Integrity(format!("{}: epoch counts disagree with meta.json", dir.display())));
        }
        Ok(Some(StoredModels {
            t_last: meta.t_last,
            g1: states.g1,
            g2: states.g2,
        }))
    }

    pub fn store(&self, theta: &Theta, models: &StoredModels) -> Result<()> {
        let dir = self.dir(theta);
        if let Some(prev) = self.retrieve(theta)? {
            if prev.t_last > models.t_last {
                return Err(Error::Usage(format!(
                    "refusing to rewind {} from {} to {} epochs",
                    theta.hash(),
                    prev.t_last,
                    models.t_last
                )));
            }
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let states = TrainerStates {
            g1: models.g1.clone(),
            g2: models.g2.clone(),
        };
        write_atomic(&dir.join("theta.json"), &theta.canonical())?;
        write_atomic(&dir.join("g1.json"), &serde_json::to_string(&models.g1.g.net)?)?;
        write_atomic(&dir.join("g2.json"), &serde_json::to_string(&models.g2.g.net)?)?;
        write_atomic(&dir.join("state.json"), &serde_json::to_string(&states)?)?;
        write_atomic(&dir.join("meta.json"), &serde_json::to_string(&Meta { t_last: models.t_last })?)
    }
}

/// Shared settings of a search: everything `theta` does not set.
#[derive(Clone, Debug)]
pub struct SearchContext<'a> {
    pub pair: &'a DomainPair,
    pub map_cfg: &'a MapTrainConfig,
    pub bound_cfg: &'a BoundConfig,
    /// Learning-rate schedule horizon, normally the maximal budget `R`.
    pub horizon: usize,
}

impl SearchContext<'_> {
    pub fn fingerprint(&self) -> serde_json::Value {
        serde_json::json!({
            "map": self.map_cfg,
            "bound": self.bound_cfg,
            "horizon": self.horizon,
            "m": self.pair.m(),
            "n": self.pair.n(),
        })
    }

    fn run_seed(&self, theta: &Theta) -> u64 {
        seed::derive(self.map_cfg.seed, &theta.canonical())
    }

    fn configs(&self, theta: &Theta) -> (MapTrainConfig, BoundConfig) {
        let spec = theta.g_spec(&self.map_cfg.g_spec, self.pair.dim_a, self.pair.dim_b);
        let run_seed = self.run_seed(theta);
        let mut m = self.map_cfg.clone();
        m.g_spec = spec.clone();
        m.learning_rate = theta.learning_rate;
        m.batch_size = theta.batch_size;
        m.seed = seed::derive(run_seed, "g1");
        let mut b = self.bound_cfg.clone();
        b.g2_spec = Some(spec);
        b.learning_rate = theta.learning_rate;
        b.batch_size = theta.batch_size;
        b.seed = seed::derive(run_seed, "g2");
        (m, b)
    }
}

/// Outcome of one plug-in evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub theta_hash: String,
    pub budget: usize,
    /// `bound`, plus [`INVALID_PENALTY`] when not `valid`.
    pub loss: f64,
    pub bound: f64,
    pub disc_g1: f64,
    pub disc_g2: f64,
    pub valid: bool,
}

/// Continues `theta`'s `G1` and `G2` to `budget` epochs, stores them, and
/// returns `R[G1, G2]` (penalized when a discrepancy gate fails).
///
/// Each epoch trains `G1` once and then `G2` once against the current `G1`.
pub fn run_then_return_val_loss(theta: &Theta, budget: usize, ctx: &SearchContext, store: &HyperbandStore) -> Result<Evaluation> {
    let (map_cfg, bound_cfg) = ctx.configs(theta);
    map_cfg.validate()?;
    bound_cfg.validate()?;
    let pair = ctx.pair;
    let g1_settings = map_cfg.settings();
    let mut models = match store.retrieve(theta)? {
        Some(m) => m,
        None => {
            let g1 = MapperState::new(pair, &map_cfg.g_spec, &g1_settings, map_cfg.seed)?;
            let g2 = witness_state(&g1.g.net, pair, &bound_cfg, bound_cfg.seed)?;
            StoredModels { t_last: 0, g1, g2 }
        }
    };
    if budget < models.t_last {
        return Err(Error::Usage(format!(
            "budget {budget} is below the {} epochs already stored for {}",
            models.t_last,
            theta.hash()
        )));
    }
    for e in models.t_last..budget {
        if map_cfg.lr_decay {
            models.g1.set_lr(&g1_settings, lr_factor(e, ctx.horizon));
        }
        models.g1.run_epoch(pair, &g1_settings, None, epoch_seed(map_cfg.seed, e))?;
        let anchor = models.g1.g.net.clone();
        advance_witness(&mut models.g2, &anchor, pair, &bound_cfg, None, bound_cfg.seed, ctx.horizon, e + 1)?;
    }
    models.t_last = budget;
    store.store(theta, &models)?;
    let (g1, g2) = (&models.g1.g.net, &models.g2.g.net);
    let disc = |g: &Mlp, label: &str| -> Result<f64> {
        let spec = bound_cfg.critic.clone().with_seed(seed::derive_indexed(bound_cfg.seed, label, budget as u64));
        Ok(estimate_disc(&g.map_all(&pair.samples_a), &pair.samples_b, &spec)?.value)
    };
    let disc_g1 = disc(g1, "disc/g1")?;
    let disc_g2 = disc(g2, "disc/g2")?;
    let bound = bound_value(g1, g2, &pair.samples_a)?;
    let valid = disc_g1 <= bound_cfg.eps1 && disc_g2 <= bound_cfg.eps1;
    Ok(Evaluation {
        theta_hash: theta.hash(),
        budget,
        loss: if valid { bound } else { bound + INVALID_PENALTY },
        bound,
        disc_g1,
        disc_g2,
        valid,
    })
}

/// `(s, n, r)` of every bracket, from the most exploratory down to `s = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    pub s: usize,
    pub n: usize,
    pub r: f64,
}

impl Bracket {
    /// Configurations evaluated at rung `i`.
    pub fn rung_size(&self, i: usize, eta: f64) -> usize {
        floor_tol(self.n as f64 / eta.powi(i as i32))
    }

    /// Epoch budget of rung `i`.
    pub fn rung_budget(&self, i: usize, eta: f64) -> usize {
        ((self.r * eta.powi(i as i32)).round() as usize).max(1)
    }
}

fn floor_tol(x: f64) -> usize {
    (x + 1e-9).floor() as usize
}

fn ceil_tol(x: f64) -> usize {
    (x - 1e-9).ceil() as usize
}

/// Largest `s` with `eta^s <= R`.
pub fn s_max(r_max: usize, eta: f64) -> usize {
    let mut s = 0;
    while eta.powi(s as i32 + 1) <= r_max as f64 * (1.0 + 1e-12) {
        s += 1;
    }
    s
}

pub fn bracket_schedule(r_max: usize, eta: f64) -> Result<Vec<Bracket>> {
    if r_max == 0 || !(eta > 1.0 && eta.is_finite()) {
        return Err(Error::Config(format!("hyperband needs R >= 1 and eta > 1, got R = {r_max}, eta = {eta}")));
    }
    let sm = s_max(r_max, eta);
    Ok((0..=sm)
        .rev()
        .map(|s| Bracket {
            s,
            n: ceil_tol((sm + 1) as f64 / (s + 1) as f64 * eta.powi(s as i32)),
            r: r_max as f64 * eta.powi(-(s as i32)),
        })
        .collect())
}

/// One row of `hyperband_log.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub bracket: usize,
    pub rung: usize,
    pub theta_hash: String,
    pub budget: usize,
    pub loss: f64,
    pub valid: bool,
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub best: Theta,
    pub best_loss: f64,
    pub log: Vec<LogEntry>,
    /// Every sampled configuration by hash.
    pub thetas: HashMap<String, Theta>,
}

const MAX_DRAWS_PER_CONFIG: usize = 1000;

/// Hyperband over `space` with the bound as the loss. Configurations are
/// distinct across the whole search so each owns its store entry.
pub fn hyperband_search(space: &HyperSpace, r_max: usize, eta: f64, ctx: &SearchContext, store: &HyperbandStore) -> Result<SearchResult> {
    space.validate()?;
    let brackets = bracket_schedule(r_max, eta)?;
    let mut thetas: HashMap<String, Theta> = HashMap::new();
    let mut log = Vec::new();
    let mut best: Option<(f64, Theta)> = None;
    for br in &brackets {
        let mut rng = seed::rng(seed::derive_indexed(space.seed, "bracket", br.s as u64));
        let mut configs = Vec::with_capacity(br.n);
        let mut draws = 0;
        while configs.len() < br.n {
            draws += 1;
            if draws > MAX_DRAWS_PER_CONFIG * br.n {
                return Err(Error::Config(format!(
                    "search space too small: could not draw {} distinct configurations",
                    br.n
                )));
            }
            let t = space.sample(&mut rng);
            let h = t.hash();
            if !thetas.contains_key(&h) {
                thetas.insert(h, t.clone());
                configs.push(t);
            }
        }
        for i in 0..=br.s {
            let budget = br.rung_budget(i, eta);
            let evals = parallel::try_map(&configs, |_, t| run_then_return_val_loss(t, budget, ctx, store))?;
            for ev in &evals {
                log.push(LogEntry {
                    bracket: br.s,
                    rung: i,
                    theta_hash: ev.theta_hash.clone(),
                    budget,
                    loss: ev.loss,
                    valid: ev.valid,
                });
            }
            let mut order: Vec<usize> = (0..configs.len()).collect();
            order.sort_by(|&a, &b| evals[a].loss.total_cmp(&evals[b].loss));
            if i == br.s {
                let (loss, t) = (evals[order[0]].loss, configs[order[0]].clone());
                if best.as_ref().map_or(true, |(b, _)| loss < *b) {
                    best = Some((loss, t));
                }
            } else {
                let keep = br.rung_size(i + 1, eta).max(1).min(configs.len());
                let mut kept: Vec<usize> = order[..keep].to_vec();
                kept.sort_unstable();
                configs = kept.into_iter().map(|k| configs[k].clone()).collect();
            }
        }
    }
    let (best_loss, best) = best.expect("at least one bracket");
    Ok(SearchResult {
        best,
        best_loss,
        log,
        thetas,
    })
}

/// `hyperband_log.csv`: bracket, rung, theta_hash, budget, loss, valid.
pub fn write_log_csv(log: &[LogEntry], path: &Path) -> Result<()> {
    crate::report::write_csv(
        path,
        &["bracket", "rung", "theta_hash", "budget", "loss", "valid"],
        log.iter().map(|e| {
            vec![
                e.bracket.to_string(),
                e.rung.to_string(),
                e.theta_hash.clone(),
                e.budget.to_string(),
                e.loss.to_string(),
                e.valid.to_string(),
            ]
        }),
    )
}
