mod common;

use std::collections::BTreeMap;

use common::{random_path, tiny_config, vocab};
use lidda::model::{Ablation, AttentionModel, Encoded, ModelConfig};
use lidda::synthgen::{generate_experiment, ExperimentRecord, GeneratorConfig};
use lidda::validate::{
    ablation_run, anderson_darling, bootstrap_weight_stability, fit_propensity, ipw_attribution, parse_variants,
    partition, permutation_test, raw_attribution, retrain_runs,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn record(z: u8, y: u8) -> ExperimentRecord {
    ExperimentRecord {
        member_id: 0,
        z,
        y,
        member_emb: vec![0.0],
        path_id: 0,
        holdout: vec![0],
    }
}

fn records(treated: (usize, usize), control: (usize, usize)) -> Vec<ExperimentRecord> {
    let mut v = Vec::new();
    v.extend((0..treated.0).map(|i| record(1, u8::from(i < treated.1))));
    v.extend((0..control.0).map(|i| record(0, u8::from(i < control.1))));
    v
}

#[test]
fn ipw_hand_example() {
    let r = records((100, 10), (100, 9));
    let e = vec![0.5; r.len()];
    let est = ipw_attribution(&r, &e, 200, 1).unwrap();
    assert!((est.estimate - 0.1).abs() < 1e-12);
    assert!(est.ci_low <= est.estimate && est.estimate <= est.ci_high);
    let raw = raw_attribution(&r, 200, 1).unwrap();
    assert!((raw.estimate - 0.1).abs() < 1e-12);
}

#[test]
fn weights_rebalance_controls() {
    // controls: 10 with e = 0.8 (weight 4, all convert), 10 with e = 0.2
    // (weight 0.25, none convert) → P_cf = 40 / 42.5
    let mut r = records((50, 48), (20, 10));
    let mut e = vec![0.5; 50];
    e.extend(std::iter::repeat_n(0.8, 10));
    e.extend(std::iter::repeat_n(0.2, 10));
    r.iter_mut().skip(50).take(10).for_each(|x| x.y = 1);
    r.iter_mut().skip(60).for_each(|x| x.y = 0);
    let est = ipw_attribution(&r, &e, 100, 2).unwrap();
    let p1 = 48.0 / 50.0;
    let pcf = 40.0 / 42.5;
    assert!((est.estimate - (p1 - pcf) / p1).abs() < 1e-12);
}

#[test]
fn equal_rates_give_zero_and_silent_control_gives_one() {
    let r = records((40, 8), (40, 8));
    assert_eq!(raw_attribution(&r, 50, 3).unwrap().estimate, 0.0);
    let r = records((40, 8), (40, 0));
    assert_eq!(raw_attribution(&r, 50, 3).unwrap().estimate, 1.0);
}

#[test]
fn undefined_experiments_are_errors() {
    assert!(raw_attribution(&records((40, 0), (40, 5)), 10, 1).is_err());
    assert!(raw_attribution(&records((40, 5), (0, 0)), 10, 1).is_err());
    assert!(ipw_attribution(&records((40, 5), (10, 1)), &[0.5; 3], 10, 1).is_err());
    assert!(fit_propensity(&records((40, 5), (0, 0))).is_err());
}

#[test]
fn bootstrap_intervals_are_reproducible() {
    let r = records((300, 40), (300, 25));
    let e = vec![0.5; r.len()];
    assert_eq!(ipw_attribution(&r, &e, 300, 9).unwrap(), ipw_attribution(&r, &e, 300, 9).unwrap());
}

#[test]
fn propensity_without_confounding_is_flat() {
    let cfg = GeneratorConfig {
        n_members: 10_000,
        reference_members: 100,
        ..GeneratorConfig::default()
    };
    let exp = generate_experiment(&cfg, &[0]).unwrap();
    let e = fit_propensity(&exp.records).unwrap().predict_all(&exp.records);
    assert!(e.iter().all(|v| (v - 0.5).abs() < 0.05));
}

#[test]
fn confounded_propensity_is_learned_and_balances() {
    let cfg = GeneratorConfig {
        n_members: 6000,
        confounding: 1.5,
        assignment_direction: Some(vec![1.0, -1.0, 0.0, 0.0]),
        reference_members: 100,
        ..GeneratorConfig::default()
    };
    let exp = generate_experiment(&cfg, &[0, 1, 2, 3]).unwrap();
    let (train, test) = exp.records.split_at(4000);
    let pm = fit_propensity(train).unwrap();
    let e = pm.predict_all(test);
    let z: Vec<bool> = test.iter().map(|r| r.z == 1).collect();
    assert!(lidda::metrics::roc_auc(&e, &z).unwrap() > 0.7);
    assert!(e.iter().all(|v| (0.01..=0.99).contains(v)));

    // weighted controls look like the treated population
    let e = pm.predict_all(&exp.records);
    let (mut t, mut tn, mut cw, mut cwe) = (0.0, 0.0, 0.0, 0.0);
    for (r, ei) in exp.records.iter().zip(&e) {
        if r.z == 1 {
            t += ei;
            tn += 1.0;
        } else {
            let w = ei / (1.0 - ei);
            cw += w;
            cwe += w * ei;
        }
    }
    assert!((t / tn - cwe / cw).abs() < 0.02, "treated {} weighted controls {}", t / tn, cwe / cw);
}

#[test]
fn anderson_darling_matches_reference_values() {
    let cases: [(&[f64], &[f64], f64, f64); 3] = [
        (
            &[0.1, 0.5, 0.9, 1.3, 2.0, 2.2],
            &[0.3, 0.4, 1.0, 1.1, 3.0, 3.5, 4.0],
            0.7577392477850147,
            -0.36468378677722274,
        ),
        (
            &[1.0, 2.0, 2.0, 3.0, 3.0, 3.0, 4.0],
            &[2.0, 3.0, 3.0, 4.0, 5.0, 5.0],
            1.8538057686993858,
            1.2852644023214153,
        ),
        (
            &[0.0, 0.2, 0.4, 0.6, 0.8],
            &[1.0, 1.2, 1.4, 1.6, 1.8],
            4.014520779607105,
            4.726015467264128,
        ),
    ];
    for (a, b, stat, std) in cases {
        let t = anderson_darling(a, b).unwrap();
        assert!((t.statistic - stat).abs() < 1e-12, "{} vs {stat}", t.statistic);
        assert!((t.standardized - std).abs() < 1e-12, "{} vs {std}", t.standardized);
    }
    assert!(anderson_darling(cases[2].0, cases[2].1).unwrap().flagged);
    assert!(!anderson_darling(cases[0].0, cases[0].1).unwrap().flagged);
}

#[test]
fn anderson_darling_edge_cases() {
    let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let t = anderson_darling(&a, &a).unwrap();
    assert!(!t.flagged && t.standardized < 0.0);
    assert!(anderson_darling(&a[..4], &a).is_err());
    assert!(anderson_darling(&[1.0, 2.0, 3.0, 4.0, f64::NAN], &a).is_err());
}

#[test]
fn anderson_darling_sees_a_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = Normal::new(0.0, 1.0).unwrap();
    let a: Vec<f64> = (0..500).map(|_| n.sample(&mut rng)).collect();
    let b: Vec<f64> = (0..500).map(|_| n.sample(&mut rng) + 1.0).collect();
    assert!(anderson_darling(&a, &b).unwrap().flagged);
}

#[test]
fn weight_bootstrap_bias() {
    let constant = BTreeMap::from([("EMAIL.OPEN".to_string(), vec![0.25; 40])]);
    let s = bootstrap_weight_stability(&constant, 100, 1).unwrap();
    assert!(s["EMAIL.OPEN"].biases.iter().all(|b| b.abs() < 1e-15));
    let single = BTreeMap::from([("k".to_string(), vec![0.7])]);
    let s = bootstrap_weight_stability(&single, 20, 1).unwrap();
    assert_eq!(s["k"].ci_low, 0.0);
    assert_eq!(s["k"].ci_high, 0.0);
    let empty = BTreeMap::from([("k".to_string(), vec![])]);
    assert!(bootstrap_weight_stability(&empty, 20, 1).is_err());
    let a = bootstrap_weight_stability(&constant, 30, 4).unwrap();
    assert_eq!(a, bootstrap_weight_stability(&constant, 30, 4).unwrap());
}

#[test]
fn partition_covers_each_index_once() {
    let (hold, sets) = partition(1003, 10, 0.1, 7);
    assert_eq!(hold.len(), 100);
    let mut all: Vec<usize> = hold.iter().chain(sets.iter().flatten()).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..1003).collect::<Vec<_>>());
    let sizes: Vec<usize> = sets.iter().map(Vec::len).collect();
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
}

fn separable(m: &AttentionModel, n: usize, seed: u64) -> Vec<Encoded> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(1..=m.config.max_len);
            let mut p = random_path(&mut rng, i as u64, len, &m.config, false);
            p.converted = p.touchpoints.iter().any(|t| t.channel.as_str() == "SEARCH");
            m.encode(&p).unwrap()
        })
        .collect()
}

fn fast_config() -> ModelConfig {
    ModelConfig {
        lr: 0.01,
        batch_size: 32,
        epochs: 2,
        ..tiny_config()
    }
}

#[test]
fn duplicated_subsets_score_identically() {
    let m = AttentionModel::new(fast_config(), vocab()).unwrap();
    let data = separable(&m, 300, 1);
    let hold = separable(&m, 100, 2);
    let r = retrain_runs(&vocab(), &fast_config(), &[data.clone(), data.clone(), data], &hold).unwrap();
    assert_eq!(r.runs[0].roc_auc, r.runs[1].roc_auc);
    assert_eq!(r.runs[1].pr_auc, r.runs[2].pr_auc);
    assert_eq!(r.roc_range, 0.0);
    let single: Vec<Encoded> = hold.iter().filter(|e| e.label > 0.5).cloned().collect();
    assert!(retrain_runs(&vocab(), &fast_config(), std::slice::from_ref(&single), &hold).is_err());
}

#[test]
fn baseline_against_itself() {
    let m = AttentionModel::new(fast_config(), vocab()).unwrap();
    let train = separable(&m, 300, 3);
    let val = separable(&m, 100, 4);
    let r = ablation_run(&train, &val, &val, &vocab(), &fast_config(), &[Ablation::Baseline, Ablation::SeqOnly]).unwrap();
    let base = r.row(Ablation::Baseline).unwrap();
    assert_eq!(base.msd, 0.0);
    assert_eq!(base.auc_change_pct, 0.0);
    for row in &r.rows {
        assert!((row.channel_mix.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert!(parse_variants(&["baseline", "No-Date"]).is_ok());
    assert!(parse_variants(&["no-such-variant"]).is_err());
}

#[test]
fn permutation_off_leaves_arms_identical() {
    let m = AttentionModel::new(fast_config(), vocab()).unwrap();
    let train = separable(&m, 200, 5);
    let hold = separable(&m, 100, 6);
    let r = permutation_test(&train, &hold, &vocab(), &fast_config(), 2, 3, false, 1).unwrap();
    for (b, p) in r.baseline.iter().zip(&r.permuted) {
        assert!(p.iter().all(|x| x == b));
    }
    assert_eq!(r.baseline_median, r.permuted_median);
}

#[test]
fn ipw_error_shrinks_with_sample_size() {
    let base = GeneratorConfig {
        reference_members: 1,
        ..GeneratorConfig::default()
    };
    let truth = generate_experiment(
        &GeneratorConfig {
            n_members: 10,
            reference_members: 100_000,
            ..base.clone()
        },
        &[0, 1, 2, 3],
    )
    .unwrap()
    .truth
    .attribution;
    let mean_error = |n: usize| {
        (0..8)
            .map(|r| {
                let cfg = GeneratorConfig {
                    n_members: n,
                    seed: 100 + r,
                    ..base.clone()
                };
                let exp = generate_experiment(&cfg, &[0, 1, 2, 3]).unwrap();
                let e = fit_propensity(&exp.records).unwrap().predict_all(&exp.records);
                (ipw_attribution(&exp.records, &e, 1, r).unwrap().estimate - truth).abs()
            })
            .sum::<f64>()
            / 8.0
    };
    let (small, large) = (mean_error(1000), mean_error(10_000));
    // halving with 2x Monte Carlo slack
    assert!(large <= small, "error {small} at n=1e3, {large} at n=1e4");
}
