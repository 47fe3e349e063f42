mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{keys, touch, ANCHOR, DAY};
use lidda::journey::{Action, AttributionResult, Channel, Method, Path, TouchKey};
use lidda::pathproc::{downsample, process, redistribute_credit, sessionize, truncate, SamplingPolicy};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn policy(ratio: f64) -> SamplingPolicy {
    let ratios: BTreeMap<TouchKey, f64> = keys()
        .into_iter()
        .filter(|k| k.action == Action::Impression || k.action == Action::Send)
        .map(|k| (k, ratio))
        .collect();
    SamplingPolicy::new(ratios, BTreeSet::from([Channel::new("FEED")])).unwrap()
}

/// Dense path: many same-day impressions so every step has work to do.
fn busy_path(seed: u64, n: usize) -> Path {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ks = keys();
    let mut ts: Vec<i64> = (0..n).map(|_| ANCHOR - rng.random_range(0..5 * DAY)).collect();
    ts.sort_unstable();
    Path {
        path_id: seed,
        member_id: seed,
        member_emb: vec![0.0; 2],
        company_emb: vec![0.0; 2],
        converted: true,
        anchor_time: ANCHOR,
        touchpoints: ts
            .into_iter()
            .enumerate()
            .map(|(i, t)| touch(i as u64 + 1, &ks[rng.random_range(0..ks.len())], t, rng.random_range(0..2), vec![0.0; 4]))
            .collect(),
    }
}

fn non_impressions(p: &Path) -> usize {
    p.touchpoints.iter().filter(|t| t.action != Action::Impression).count()
}

proptest! {
    #[test]
    fn redistributed_credit_sums_to_one(seed in any::<u64>(), n in 1usize..40, ratio in 0.05f64..1.0, max_len in 1usize..20) {
        let raw = busy_path(seed, n);
        let (p, trace) = process(&raw, &policy(ratio), max_len, seed).unwrap();
        prop_assert!(p.len() <= max_len);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let credits: Vec<f64> = {
            let c: Vec<f64> = (0..p.len()).map(|_| rng.random_range(0.0..1.0f64)).collect();
            let s: f64 = c.iter().sum();
            c.iter().map(|v| v / s).collect()
        };
        let r = AttributionResult { path_id: p.path_id, method: Method::Attention, credits };
        let out = redistribute_credit(&r, &p, &raw, &trace).unwrap();
        prop_assert_eq!(out.credits.len(), raw.len());
        prop_assert!((out.credits.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(out.credits.iter().all(|c| *c >= 0.0));
        // truncated events get nothing
        for (t, c) in raw.touchpoints.iter().zip(&out.credits) {
            if trace.truncated.contains(&t.id) {
                prop_assert_eq!(*c, 0.0);
            }
        }
    }

    #[test]
    fn sessionize_keeps_engagements_and_is_idempotent(seed in any::<u64>(), n in 0usize..40) {
        let raw = busy_path(seed, n);
        let pol = policy(1.0);
        let s = sessionize(&raw, &pol);
        prop_assert_eq!(non_impressions(&s), non_impressions(&raw));
        prop_assert_eq!(sessionize(&s, &pol).touchpoints.len(), s.touchpoints.len());
        let linked: usize = s.touchpoints.iter().map(|t| t.linkage.len()).sum();
        prop_assert_eq!(s.len() + linked, raw.len());
    }

    #[test]
    fn downsample_replays_identically(seed in any::<u64>(), n in 0usize..40, ratio in 0.05f64..1.0) {
        let raw = busy_path(seed, n);
        let pol = policy(ratio);
        let a = downsample(&raw, &pol, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = downsample(&raw, &pol, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(&a.0, &b.0);
        prop_assert_eq!(a.0.len() + a.2.len(), raw.len());
        for r in &a.1 {
            prop_assert_eq!(r.kept, ((r.kept + r.dropped) as f64 * ratio).ceil().max(1.0) as usize);
        }
    }

    #[test]
    fn truncate_keeps_latest(seed in any::<u64>(), n in 0usize..40, keep in 1usize..10) {
        let raw = busy_path(seed, n);
        let (t, dropped) = truncate(&raw, keep).unwrap();
        prop_assert_eq!(t.len(), n.min(keep));
        prop_assert_eq!(&t.touchpoints[..], &raw.touchpoints[n - t.len()..]);
        prop_assert_eq!(dropped.len(), n - t.len());
    }
}

#[test]
fn full_ratio_is_identity() {
    let raw = busy_path(3, 25);
    let pol = SamplingPolicy::new(BTreeMap::new(), BTreeSet::new()).unwrap();
    let (p, trace) = process(&raw, &pol, 100, 0).unwrap();
    assert_eq!(p, raw);
    assert!(trace.dropped.is_empty() && trace.retention.is_empty() && trace.truncated.is_empty());
}

#[test]
fn ratios_outside_unit_interval_rejected() {
    let k = keys()[0].clone();
    for bad in [0.0, -0.5, 1.5, f64::NAN] {
        assert!(SamplingPolicy::new(BTreeMap::from([(k.clone(), bad)]), BTreeSet::new()).is_err());
    }
}

#[test]
fn processing_is_deterministic_per_seed() {
    let raw = busy_path(8, 30);
    let pol = policy(0.4);
    assert_eq!(process(&raw, &pol, 10, 5).unwrap(), process(&raw, &pol, 10, 5).unwrap());
}
