use std::collections::HashMap;

use ganbound::bound::BoundConfig;
use ganbound::domains::{DomainKind, DomainPair, DomainSpec};
use ganbound::hyperband::{
    bracket_schedule, hyperband_search, run_then_return_val_loss, write_log_csv, HyperSpace, HyperbandStore,
    SearchContext, Theta, INVALID_PENALTY,
};
use ganbound::mapping::{MapTrainConfig, Regime};
use ganbound::nn::{Activation, MlpSpec};
use ganbound::Error;
use proptest::prelude::*;

fn pair() -> DomainPair {
    DomainSpec::new(DomainKind::MlpTarget, 2, 200, 200, 1).build().unwrap()
}

fn configs() -> (MapTrainConfig, BoundConfig) {
    let mut m = MapTrainConfig::new(
        MlpSpec::new(vec![2, 4, 2], Activation::Tanh, Activation::Identity),
        Regime::GanOnly,
    );
    m.seed = 3;
    let mut b = BoundConfig::new(0.3);
    b.critic.train_epochs = 20;
    m.critic.train_epochs = 20;
    (m, b)
}

fn theta() -> Theta {
    Theta {
        depth: 1,
        width: 6,
        learning_rate: 3e-3,
        batch_size: 32,
    }
}

fn file(store: &HyperbandStore, t: &Theta, name: &str) -> String {
    std::fs::read_to_string(store.root().join(t.hash()).join(name)).unwrap()
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let pair = pair();
    let (m, b) = configs();
    let ctx = SearchContext {
        pair: &pair,
        map_cfg: &m,
        bound_cfg: &b,
        horizon: 9,
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let s1 = HyperbandStore::open(d1.path(), &ctx.fingerprint()).unwrap();
    let s2 = HyperbandStore::open(d2.path(), &ctx.fingerprint()).unwrap();
    let t = theta();
    run_then_return_val_loss(&t, 5, &ctx, &s1).unwrap();
    assert_eq!(s1.retrieve(&t).unwrap().unwrap().t_last, 5);
    let resumed = run_then_return_val_loss(&t, 9, &ctx, &s1).unwrap();
    let straight = run_then_return_val_loss(&t, 9, &ctx, &s2).unwrap();
    assert_eq!(resumed, straight);
    for name in ["g1.json", "g2.json", "state.json", "meta.json", "theta.json"] {
        assert_eq!(file(&s1, &t, name), file(&s2, &t, name), "{name}");
    }
    assert_eq!(s1.retrieve(&t).unwrap(), s2.retrieve(&t).unwrap());

    match run_then_return_val_loss(&t, 4, &ctx, &s1) {
        Err(Error::Usage(msg)) => assert!(msg.contains("below"), "{msg}"),
        other => panic!("expected usage error, got {other:?}"),
    }
    // Same budget again: nothing to train, same answer.
    assert_eq!(run_then_return_val_loss(&t, 9, &ctx, &s1).unwrap(), straight);
}

#[test]
fn zero_budget_compares_two_fresh_nets() {
    let pair = pair();
    let (m, b) = configs();
    let ctx = SearchContext {
        pair: &pair,
        map_cfg: &m,
        bound_cfg: &b,
        horizon: 9,
    };
    let dir = tempfile::tempdir().unwrap();
    let store = HyperbandStore::open(dir.path(), &ctx.fingerprint()).unwrap();
    let t = theta();
    assert!(store.retrieve(&t).unwrap().is_none());
    let ev = run_then_return_val_loss(&t, 0, &ctx, &store).unwrap();
    let stored = store.retrieve(&t).unwrap().unwrap();
    assert_eq!(stored.t_last, 0);
    assert_eq!((stored.g1.epoch, stored.g2.epoch), (0, 0));
    assert_ne!(stored.g1.g.net, stored.g2.g.net);
    assert!(ev.bound > 0.0);
    assert_eq!(ev.loss, if ev.valid { ev.bound } else { ev.bound + INVALID_PENALTY });
}

#[test]
fn store_detects_tampering_and_foreign_settings() {
    let pair = pair();
    let (m, b) = configs();
    let ctx = SearchContext {
        pair: &pair,
        map_cfg: &m,
        bound_cfg: &b,
        horizon: 9,
    };
    let dir = tempfile::tempdir().unwrap();
    let store = HyperbandStore::open(dir.path(), &ctx.fingerprint()).unwrap();
    let t = theta();
    run_then_return_val_loss(&t, 1, &ctx, &store).unwrap();
    let meta = store.root().join(t.hash()).join("meta.json");
    std::fs::write(&meta, r#"{"t_last":3}"#).unwrap();
    assert!(matches!(store.retrieve(&t), Err(Error::Integrity(_))));
    std::fs::write(&meta, "not json").unwrap();
    assert!(matches!(store.retrieve(&t), Err(Error::Integrity(_))));

    let mut other = ctx.fingerprint();
    other["horizon"] = serde_json::json!(10);
    assert!(matches!(HyperbandStore::open(dir.path(), &other), Err(Error::Integrity(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]
    #[test]
    fn store_round_trip(depth in 0usize..3, width in 1usize..6, lr in 1e-4f64..1e-1, bs in 1usize..64, budget in 0usize..2) {
        let pair = pair();
        let (m, b) = configs();
        let ctx = SearchContext { pair: &pair, map_cfg: &m, bound_cfg: &b, horizon: 2 };
        let dir = tempfile::tempdir().unwrap();
        let store = HyperbandStore::open(dir.path(), &ctx.fingerprint()).unwrap();
        let t = Theta { depth, width, learning_rate: lr, batch_size: bs };
        run_then_return_val_loss(&t, budget, &ctx, &store).unwrap();
        let v = store.retrieve(&t).unwrap().unwrap();
        let copy_dir = tempfile::tempdir().unwrap();
        let copy = HyperbandStore::open(copy_dir.path(), &ctx.fingerprint()).unwrap();
        copy.store(&t, &v).unwrap();
        prop_assert_eq!(copy.retrieve(&t).unwrap().unwrap(), v);
    }
}

#[test]
fn search_follows_the_successive_halving_schedule() {
    let pair = pair();
    let (m, b) = configs();
    let (r_max, eta) = (9, 3.0);
    let ctx = SearchContext {
        pair: &pair,
        map_cfg: &m,
        bound_cfg: &b,
        horizon: r_max,
    };
    let space = HyperSpace {
        depth: (0, 2),
        width: (2, 8),
        learning_rate: (1e-3, 1e-2),
        batch_size: vec![32, 64],
        seed: 5,
    };
    let dir = tempfile::tempdir().unwrap();
    let store = HyperbandStore::open(dir.path(), &ctx.fingerprint()).unwrap();
    let res = hyperband_search(&space, r_max, eta, &ctx, &store).unwrap();

    let mut last_budget: HashMap<&str, usize> = HashMap::new();
    for br in bracket_schedule(r_max, eta).unwrap() {
        let rows: Vec<_> = res.log.iter().filter(|e| e.bracket == br.s).collect();
        let mut consumed = 0;
        for e in &rows {
            let prev = last_budget.insert(&e.theta_hash, e.budget).unwrap_or(0);
            assert!(e.budget >= prev, "budgets must not decrease");
            consumed += e.budget - prev;
        }
        let expected: usize = (0..=br.s)
            .map(|i| br.rung_size(i, eta) * (br.rung_budget(i, eta) - if i == 0 { 0 } else { br.rung_budget(i - 1, eta) }))
            .sum();
        assert_eq!(consumed, expected, "bracket {}", br.s);
        for i in 0..br.s {
            let rung: Vec<_> = rows.iter().filter(|e| e.rung == i).collect();
            assert_eq!(rung.len(), br.rung_size(i, eta));
            let mut order: Vec<usize> = (0..rung.len()).collect();
            order.sort_by(|&a, &b| rung[a].loss.total_cmp(&rung[b].loss));
            let mut survivors: Vec<&str> = order[..br.rung_size(i + 1, eta)].iter().map(|&k| rung[k].theta_hash.as_str()).collect();
            let mut next: Vec<&str> = rows.iter().filter(|e| e.rung == i + 1).map(|e| e.theta_hash.as_str()).collect();
            survivors.sort_unstable();
            next.sort_unstable();
            assert_eq!(survivors, next);
        }
    }
    let finals = res.log.iter().filter(|e| {
        let br = bracket_schedule(r_max, eta).unwrap().into_iter().find(|b| b.s == e.bracket).unwrap();
        e.rung == br.s
    });
    let min_final = finals.map(|e| e.loss).fold(f64::INFINITY, f64::min);
    assert_eq!(res.best_loss, min_final);
    assert!(res.thetas.contains_key(&res.best.hash()));

    let csv_path = dir.path().join("hyperband_log.csv");
    write_log_csv(&res.log, &csv_path).unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert!(text.starts_with("bracket,rung,theta_hash,budget,loss,valid\n"));
    assert_eq!(text.lines().count(), res.log.len() + 1);
}
