use ganbound::bound::{
    bound_trajectory, bound_value, calibrate_lambda, model_select, per_sample_bound, stopping_criterion, train_g2,
    verify_lemma2_oracle, BoundConfig,
};
use ganbound::discrepancy::{estimate_disc, DiscSpec};
use ganbound::domains::{gen_lshape, lshape_map, DomainKind, DomainPair, DomainSpec, Target};
use ganbound::mapping::{train_g1, MapTrainConfig, Regime};
use ganbound::nn::{Activation, Loss, Mlp, MlpSpec};
use ganbound::Error;

fn affine_spec() -> MlpSpec {
    MlpSpec::new(vec![2, 2], Activation::Identity, Activation::Identity)
}

fn affine_net(matrix: &[Vec<f64>], bias: &[f64]) -> Mlp {
    Mlp::from_parts(affine_spec(), vec![matrix.to_vec()], vec![bias.to_vec()]).unwrap()
}

fn affine_pair(seed: u64) -> (DomainPair, Vec<Vec<f64>>, Vec<f64>) {
    let pair = DomainSpec::new(DomainKind::AffineTarget, 2, 600, 600, seed).build().unwrap();
    let (m, b) = match pair.oracle.clone().unwrap() {
        Target::Affine { matrix, bias } => (matrix, bias),
        _ => unreachable!(),
    };
    (pair, m, b)
}

fn constant_map(c: f64) -> Mlp {
    let spec = MlpSpec::new(vec![1, 1], Activation::Identity, Activation::Identity);
    Mlp::from_parts(spec, vec![vec![vec![0.0]]], vec![vec![c]]).unwrap()
}

#[test]
fn bound_value_examples() {
    let (pair, m, b) = affine_pair(1);
    let g = affine_net(&m, &b);
    assert_eq!(bound_value(&g, &g, &pair.samples_a).unwrap(), 0.0);
    let shifted = affine_net(&m, &[b[0] + 1.0, b[1]]);
    assert!((bound_value(&g, &shifted, &pair.samples_a).unwrap() - 1.0).abs() < 1e-12);
    assert!(matches!(bound_value(&g, &g, &[]), Err(Error::Usage(_))));
}

#[test]
fn lshape_semantic_maps_are_one_apart() {
    // Both maps send (x, x) to points 2|x| apart in L1, and E|x| = 1/2 on [-1, 1].
    let pair = gen_lshape(10_000, 10_000, 3).unwrap();
    let v = bound_value(&lshape_map(1), &lshape_map(2), &pair.samples_a).unwrap();
    assert!((v - 1.0).abs() < 0.03, "{v}");
}

#[test]
fn lemma_holds_on_l1_pool() {
    let (pair, m, b) = affine_pair(4);
    let y = pair.oracle.clone().unwrap();
    let mut pool = vec![affine_net(&m, &b)];
    for k in 1..20 {
        let d = 0.03 * k as f64;
        let a = 0.7 * k as f64;
        let mm: Vec<Vec<f64>> = m
            .iter()
            .enumerate()
            .map(|(i, row)| row.iter().enumerate().map(|(j, v)| v + d * ((a + (2 * i + j) as f64).sin())).collect())
            .collect();
        let bb: Vec<f64> = b.iter().enumerate().map(|(i, v)| v + d * (a * (i + 1) as f64).cos()).collect();
        pool.push(affine_net(&mm, &bb));
    }
    let report = verify_lemma2_oracle(&pool, &y, &pair, 0.2, Loss::L1, &DiscSpec::default()).unwrap();
    assert!(!report.skipped);
    assert!(report.admissible.len() >= 2 && report.admissible.len() < 20, "{:?}", report.disc);
    assert_eq!(report.violations, 0);
    assert_eq!(report.checks.len(), 20);
}

#[test]
fn squared_loss_breaks_the_lemma() {
    // B is a point mass at 1; only the constant 1 is admissible. With G1 = 0
    // and y = 2 the squared risk is 4 while the right side is 1 + 1.
    let a: Vec<Vec<f64>> = (0..200).map(|i| vec![i as f64 / 100.0 - 1.0]).collect();
    let pair = DomainPair::new(a, vec![vec![1.0]; 200]).unwrap();
    let pool: Vec<Mlp> = (0..10).map(|k| constant_map(0.25 * k as f64)).collect();
    let y = |_: &[f64]| vec![2.0];
    let l2 = verify_lemma2_oracle(&pool, &y, &pair, 0.2, Loss::L2, &DiscSpec::default()).unwrap();
    assert_eq!(l2.admissible, vec![4]);
    assert!(l2.checks[0].violation);
    assert!(l2.violations >= 1);
    let l1 = verify_lemma2_oracle(&pool, &y, &pair, 0.2, Loss::L1, &DiscSpec::default()).unwrap();
    assert_eq!(l1.violations, 0);
}

#[test]
fn witness_reaches_pool_optimum_on_lshape() {
    // The low-discrepancy relu maps of the L-shape task are the two semantic
    // maps, so the pool optimum against G1 = y1 is R[y1, y2] = 1.
    let pair = gen_lshape(2000, 2000, 5).unwrap();
    let g1 = lshape_map(1);
    let pool = vec![lshape_map(1), lshape_map(2)];
    let y = lshape_map(1);
    let report = verify_lemma2_oracle(&pool, &y, &pair, 0.2, Loss::L1, &DiscSpec::default()).unwrap();
    assert_eq!(report.admissible, vec![0, 1]);
    let optimum = report.checks[0].max_witness_risk;
    let mut cfg = BoundConfig::new(0.5);
    cfg.t2 = 40;
    cfg.restarts = 4;
    cfg.seed = 11;
    let rec = &bound_trajectory(&pair, &[g1], &cfg).unwrap().records[0];
    assert!(rec.disc_g2 <= 0.2, "{rec:?}");
    assert!(rec.bound >= 0.8 * optimum, "{} vs {optimum}", rec.bound);
}

#[test]
fn tiny_lambda_reduces_to_discrepancy_minimization() {
    let (pair, _, _) = affine_pair(6);
    let mut map_cfg = MapTrainConfig::new(affine_spec(), Regime::GanOnly);
    map_cfg.epochs = 30;
    map_cfg.learning_rate = 1e-2;
    let g1 = train_g1(&pair, &map_cfg, |_, _| {}).unwrap().state.g.net;
    let spec = DiscSpec::default();
    let disc = |g: &Mlp| estimate_disc(&g.map_all(&pair.samples_a), &pair.samples_b, &spec).unwrap().value;
    let mut cfg = BoundConfig::new(1e-9);
    cfg.t2 = 30;
    cfg.learning_rate = 1e-2;
    let g2 = train_g2(&g1, &pair, &cfg).unwrap();
    assert!(disc(&g2) <= disc(&g1) + 0.05, "{} vs {}", disc(&g2), disc(&g1));
}

#[test]
fn frozen_g1_gives_deterministic_ties() {
    let (pair, _, _) = affine_pair(7);
    let mut map_cfg = MapTrainConfig::new(affine_spec(), Regime::GanOnly);
    map_cfg.epochs = 4;
    map_cfg.learning_rate = 0.0;
    let mut cfg = BoundConfig::new(0.1);
    cfg.t2 = 3;
    cfg.eps1 = 1.0;
    let a = stopping_criterion(&pair, &map_cfg, &cfg).unwrap();
    let b = stopping_criterion(&pair, &map_cfg, &cfg).unwrap();
    assert_eq!(a.trajectory.records.len(), 4);
    assert_eq!(a.snapshots.len(), 5);
    assert!(a.snapshots.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(a.trajectory, b.trajectory);
    assert_eq!(a.t_star, b.t_star);
    let truths: Vec<f64> = a.trajectory.records.iter().map(|r| r.truth.unwrap()).collect();
    assert!(truths.windows(2).all(|w| w[0] == w[1]));
    let bounds: Vec<f64> = a.trajectory.records.iter().map(|r| r.bound).collect();
    let min = bounds.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(a.t_star, 1 + bounds.iter().position(|&v| v == min).unwrap());
}

#[test]
fn no_valid_epoch_falls_back_to_last() {
    let (pair, _, _) = affine_pair(8);
    let mut map_cfg = MapTrainConfig::new(affine_spec(), Regime::GanOnly);
    map_cfg.epochs = 2;
    let mut cfg = BoundConfig::new(0.1);
    cfg.t2 = 1;
    cfg.eps1 = 1e-9;
    let r = stopping_criterion(&pair, &map_cfg, &cfg).unwrap();
    assert!(r.no_valid_epoch);
    assert_eq!(r.t_star, 2);
}

#[test]
fn bounds_never_read_the_target() {
    let (pair, _, _) = affine_pair(9);
    let mut other = pair.clone();
    other.oracle = Some(Target::Affine {
        matrix: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
        bias: vec![3.0, -3.0],
    });
    let mut blind = pair.clone();
    blind.oracle = None;
    let mut map_cfg = MapTrainConfig::new(affine_spec(), Regime::GanOnly);
    map_cfg.epochs = 3;
    let mut cfg = BoundConfig::new(0.1);
    cfg.t2 = 2;
    let runs: Vec<_> = [&pair, &other, &blind]
        .iter()
        .map(|p| stopping_criterion(p, &map_cfg, &cfg).unwrap())
        .collect();
    for r in &runs[1..] {
        assert_eq!(r.t_star, runs[0].t_star);
        for (x, y) in r.trajectory.records.iter().zip(&runs[0].trajectory.records) {
            assert_eq!((x.bound, x.disc_g1, x.disc_g2, x.valid), (y.bound, y.disc_g1, y.disc_g2, y.valid));
        }
    }
    assert!(runs[2].trajectory.records.iter().all(|r| r.truth.is_none() && r.witness_truth.is_none()));
    assert!(runs[0].trajectory.records.iter().all(|r| r.truth.is_some()));
}

#[test]
fn undersized_candidate_is_gated_out() {
    let pair = DomainSpec::new(DomainKind::MlpTarget, 2, 600, 600, 2).build().unwrap();
    let mut map_cfg = MapTrainConfig::new(affine_spec(), Regime::GanOnly);
    map_cfg.epochs = 30;
    map_cfg.learning_rate = 1e-2;
    let candidates = vec![
        MlpSpec::new(vec![2, 8, 2], Activation::Tanh, Activation::Identity),
        MlpSpec::new(vec![2, 1, 2], Activation::Tanh, Activation::Identity),
    ];
    let mut cfg = BoundConfig::new(0.1);
    cfg.t2 = 5;
    cfg.eps1 = 0.5;
    let res = model_select(&pair, &candidates, &map_cfg, &cfg).unwrap();
    let small = &res.records[1];
    assert!(!small.admitted && small.reason.is_some() && small.bound.is_none(), "{small:?}");
    assert_eq!(res.chosen, 0);
    assert!(res.records[0].bound.is_some());

    cfg.eps1 = 1e-9;
    match model_select(&pair, &candidates, &map_cfg, &cfg) {
        Err(Error::NoAdmissible(msg)) => assert!(msg.contains("#0") && msg.contains("#1"), "{msg}"),
        other => panic!("expected NoAdmissible, got {other:?}"),
    }
    assert!(matches!(model_select(&pair, &candidates[..1], &map_cfg, &cfg), Err(Error::Usage(_))));
}

#[test]
fn calibration_grid_edges() {
    let (pair, m, b) = affine_pair(10);
    let g1 = affine_net(&m, &b);
    let mut cfg = BoundConfig::new(1.0);
    cfg.t2 = 20;
    cfg.learning_rate = 1e-2;
    let c = calibrate_lambda(&pair, &g1, &cfg, &[1e-9]).unwrap();
    assert_eq!(c.lambda, 1e-9);
    assert!(matches!(calibrate_lambda(&pair, &g1, &cfg, &[1e6]), Err(Error::Calibration(_))));
    assert!(matches!(calibrate_lambda(&pair, &g1, &cfg, &[0.1, 0.01]), Err(Error::Usage(_))));
    assert!(matches!(calibrate_lambda(&pair, &g1, &cfg, &[]), Err(Error::Usage(_))));
}

#[test]
fn per_sample_bound_is_nonnegative_and_seeded() {
    let (pair, m, b) = affine_pair(12);
    let g1 = affine_net(&m, &b);
    let mut cfg = BoundConfig::new(0.5);
    cfg.t2 = 3;
    let x = pair.samples_a[0].clone();
    let r1 = per_sample_bound(&g1, &x, &pair, &cfg).unwrap();
    let r2 = per_sample_bound(&g1, &x, &pair, &cfg).unwrap();
    assert_eq!(r1, r2);
    assert!(r1.bound_x >= 0.0);
    assert_eq!(r1.truth_x, Some(0.0));
    assert!(matches!(per_sample_bound(&g1, &[0.0], &pair, &cfg), Err(Error::Shape(_))));
}

#[test]
fn config_validation() {
    for bad in [0.0, -1.0, f64::NAN] {
        assert!(BoundConfig::new(bad).validate().is_err());
    }
    let mut c = BoundConfig::new(1.0);
    c.t2 = 0;
    assert!(c.validate().is_err());
    let json = r#"{"lambda": 0.5, "t2": 3, "bogus": 1}"#;
    assert!(serde_json::from_str::<BoundConfig>(json).is_err());
    let c: BoundConfig = serde_json::from_str(r#"{"lambda": 0.5}"#).unwrap();
    assert_eq!((c.t2, c.eps1), (10, 0.2));
}
