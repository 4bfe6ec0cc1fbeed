//! One function per subcommand. Each writes its artifacts into `out` and
//! returns the process exit code.

use std::path::Path;

use anyhow::{bail, Context};
use ganbound::bound::{
    calibrate_lambda_with, model_select, per_sample_bounds, perturbation_pool, stopping_criterion, verify_lemma2_oracle,
};
use ganbound::domains::{DomainPair, Target};
use ganbound::hyperband::{hyperband_search, write_log_csv, HyperbandStore, SearchContext, Theta, INVALID_PENALTY};
use ganbound::mapping::train_g1;
use ganbound::nn::MlpSpec;
use ganbound::report::{
    per_sample_correlation, per_sample_svg, read_per_sample_csv, read_trajectory_csv, trajectory_stats,
    trajectory_svg, write_json, write_losses_csv, write_per_sample_csv, write_text, write_trajectory_csv,
};
use ganbound::seed;
use ganbound::stats::format_p;
use serde_json::{json, Value};

use crate::config::{ConfigError, RunConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_WARNING: u8 = 2;
pub const EXIT_VERIFY_FAILED: u8 = 3;

/// `summary.json`: the command, the global seed, the configuration as given,
/// and the command-specific results.
fn write_summary(out: &Path, command: &str, raw: &RunConfig, results: Value) -> anyhow::Result<()> {
    let summary = json!({
        "command": command,
        "seed": raw.seed,
        "config": raw,
        "results": results,
    });
    write_json(&summary, &out.join("summary.json"))?;
    Ok(())
}

fn build_pair(cfg: &RunConfig) -> anyhow::Result<DomainPair> {
    cfg.domain.build().context("building the domain pair")
}

pub fn stop(raw: &RunConfig, out: &Path) -> anyhow::Result<u8> {
    let cfg = raw.seeded();
    let pair = build_pair(&cfg)?;
    let res = stopping_criterion(&pair, &cfg.map, &cfg.bound)?;
    write_trajectory_csv(&res.trajectory, &out.join("trajectory.csv"))?;
    write_losses_csv(&res.log, &out.join("losses.csv"))?;
    write_text(&trajectory_svg(&res.trajectory), &out.join("trajectory.svg"))?;
    write_json(&res.snapshots[res.t_star], &out.join("g1_selected.json"))?;
    let stats = trajectory_stats(&res.trajectory);
    let selected = res.trajectory.records.get(res.t_star.saturating_sub(1));
    write_summary(
        out,
        "stop",
        raw,
        json!({
            "t_star": res.t_star,
            "no_valid_epoch": res.no_valid_epoch,
            "bound_at_t_star": selected.map(|r| r.bound),
            "truth_at_t_star": selected.and_then(|r| r.truth),
            "stats": stats,
        }),
    )?;
    Ok(if res.no_valid_epoch { EXIT_WARNING } else { EXIT_OK })
}

fn candidates(cfg: &RunConfig, pair: &DomainPair) -> anyhow::Result<Vec<MlpSpec>> {
    let section = cfg
        .select
        .as_ref()
        .ok_or_else(|| ConfigError(".select: section required by the select command".into()))?;
    match (&section.candidates, &section.depths) {
        (Some(c), None) => Ok(c.clone()),
        (None, Some(depths)) => {
            let base = &cfg.map.g_spec;
            let width = section
                .width
                .or_else(|| base.layer_widths.get(1).copied().filter(|_| base.layer_widths.len() > 2))
                .unwrap_or(8);
            Ok(depths
                .iter()
                .map(|&depth| {
                    Theta {
                        depth,
                        width,
                        learning_rate: cfg.map.learning_rate,
                        batch_size: cfg.map.batch_size,
                    }
                    .g_spec(base, pair.dim_a, pair.dim_b)
                })
                .collect())
        }
        _ => bail!(ConfigError(".select: give exactly one of candidates or depths".into())),
    }
}

pub fn select(raw: &RunConfig, out: &Path) -> anyhow::Result<u8> {
    let cfg = raw.seeded();
    let pair = build_pair(&cfg)?;
    let specs = candidates(&cfg, &pair)?;
    let res = model_select(&pair, &specs, &cfg.map, &cfg.bound)?;
    write_json(&res.g1s[res.chosen], &out.join("g1_selected.json"))?;
    let truths: Vec<Option<f64>> = res.records.iter().map(|r| r.truth).collect();
    let best_truth = truths.iter().flatten().copied().fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v))));
    let regret = match (truths[res.chosen], best_truth) {
        (Some(t), Some(b)) => Some(t - b),
        _ => None,
    };
    write_summary(
        out,
        "select",
        raw,
        json!({
            "chosen": res.chosen,
            "chosen_spec": res.records[res.chosen].spec,
            "regret": regret,
            "records": res.records,
        }),
    )?;
    Ok(EXIT_OK)
}

pub fn per_sample(raw: &RunConfig, out: &Path) -> anyhow::Result<u8> {
    let cfg = raw.seeded();
    let pair = build_pair(&cfg)?;
    let count = cfg.per_sample.as_ref().map_or(50, |s| s.count);
    let g1 = train_g1(&pair, &cfg.map, |_, _| {})?.state.g.net;
    let xs = if pair.base.is_some() {
        pair.fresh_a(count, seed::derive(cfg.domain.seed, "held_out"))?
    } else {
        pair.samples_a.iter().take(count).cloned().collect()
    };
    let records = per_sample_bounds(&g1, &xs, &pair, &cfg.bound)?;
    write_per_sample_csv(&records, &out.join("per_sample.csv"))?;
    write_text(&per_sample_svg(&records), &out.join("per_sample.svg"))?;
    write_json(&g1, &out.join("g1.json"))?;
    let corr = per_sample_correlation(&records);
    let over_eps = records.iter().filter(|r| r.disc_g2 > cfg.bound.eps1).count();
    write_summary(
        out,
        "per-sample",
        raw,
        json!({
            "samples": records.len(),
            "correlation": corr,
            "p_text": corr.as_ref().map(|c| format_p(c.p)),
            "witnesses_over_eps1": over_eps,
        }),
    )?;
    Ok(EXIT_OK)
}

pub fn hyperband(raw: &RunConfig, out: &Path) -> anyhow::Result<u8> {
    let cfg = raw.seeded();
    let section = cfg
        .hyperband
        .as_ref()
        .ok_or_else(|| ConfigError(".hyperband: section required by the hyperband command".into()))?;
    let pair = build_pair(&cfg)?;
    let ctx = SearchContext {
        pair: &pair,
        map_cfg: &cfg.map,
        bound_cfg: &cfg.bound,
        horizon: section.r_max,
    };
    let store = HyperbandStore::open(out.join("store"), &ctx.fingerprint())?;
    let res = hyperband_search(&section.space, section.r_max, section.eta, &ctx, &store)?;
    write_log_csv(&res.log, &out.join("hyperband_log.csv"))?;
    let stored = store
        .retrieve(&res.best)?
        .context("best configuration missing from the store")?;
    let truth = pair.truth_risk(&stored.g1.g.net, &pair.samples_a);
    let valid = res.best_loss < INVALID_PENALTY;
    write_summary(
        out,
        "hyperband",
        raw,
        json!({
            "best": res.best,
            "best_hash": res.best.hash(),
            "best_loss": res.best_loss,
            "best_valid": valid,
            "best_budget": stored.t_last,
            "truth_of_best": truth,
            "evaluations": res.log.len(),
        }),
    )?;
    Ok(if valid { EXIT_OK } else { EXIT_WARNING })
}

pub fn calibrate(raw: &RunConfig, out: &Path) -> anyhow::Result<u8> {
    let cfg = raw.seeded();
    let section = cfg
        .calibrate
        .as_ref()
        .ok_or_else(|| ConfigError(".calibrate: section required by the calibrate command".into()))?;
    let pair = build_pair(&cfg)?;
    let g1 = train_g1(&pair, &cfg.map, |_, _| {})?.state.g.net;
    let cal = calibrate_lambda_with(&pair, &g1, &cfg.bound, &section.grid, section.repeats)?;
    write_json(&cal, &out.join("calibration.json"))?;
    write_summary(out, "calibrate", raw, json!({ "lambda": cal.lambda, "entries": cal.entries }))?;
    Ok(EXIT_OK)
}

fn target_of(pair: &DomainPair) -> anyhow::Result<&Target> {
    pair.oracle
        .as_ref()
        .or_else(|| pair.oracle_family.first())
        .ok_or_else(|| ConfigError(".domain: verify needs a synthetic domain with a known target".into()).into())
}

pub fn verify(raw: &RunConfig, out: &Path) -> anyhow::Result<u8> {
    let cfg = raw.seeded();
    let section = cfg.verify.clone().unwrap_or_else(|| crate::config::VerifySection {
        pool_size: 20,
        spread: 1.0,
        loss: ganbound::nn::Loss::L1,
    });
    let pair = build_pair(&cfg)?;
    let y = target_of(&pair)?;
    let pool = perturbation_pool(&y.to_mlp()?, section.pool_size, section.spread, seed::derive(cfg.bound.seed, "verify"))?;
    let critic = cfg.bound.critic.clone().with_seed(seed::derive(cfg.bound.seed, "verify/critic"));
    let report = verify_lemma2_oracle(&pool, y, &pair, cfg.bound.eps1, section.loss, &critic)?;
    write_json(&report, &out.join("lemma_report.json"))?;
    write_summary(
        out,
        "verify",
        raw,
        json!({
            "violations": report.violations,
            "admissible": report.admissible.len(),
            "skipped": report.skipped,
        }),
    )?;
    Ok(if report.violations > 0 {
        EXIT_VERIFY_FAILED
    } else if report.skipped {
        EXIT_WARNING
    } else {
        EXIT_OK
    })
}

/// Rebuilds the charts and statistics of an earlier run from its CSVs.
pub fn report(dir: &Path) -> anyhow::Result<u8> {
    let traj_path = dir.join("trajectory.csv");
    let ps_path = dir.join("per_sample.csv");
    let mut found = false;
    let mut results = serde_json::Map::new();
    if traj_path.exists() {
        found = true;
        let traj = read_trajectory_csv(&traj_path)?;
        write_text(&trajectory_svg(&traj), &dir.join("trajectory.svg"))?;
        results.insert("trajectory".into(), serde_json::to_value(trajectory_stats(&traj))?);
    }
    if ps_path.exists() {
        found = true;
        let records = read_per_sample_csv(&ps_path)?;
        write_text(&per_sample_svg(&records), &dir.join("per_sample.svg"))?;
        let corr = per_sample_correlation(&records);
        results.insert(
            "per_sample".into(),
            json!({ "correlation": corr, "p_text": corr.as_ref().map(|c| format_p(c.p)) }),
        );
    }
    if !found {
        bail!("{}: no trajectory.csv or per_sample.csv to report on", dir.display());
    }
    write_json(&Value::Object(results), &dir.join("report.json"))?;
    Ok(EXIT_OK)
}
