mod common;

use common::{random_path, tiny_config};
use lidda::journey::{read_paths, write_paths, Action, Channel, PathLimits, TouchKey, Vocab};
use lidda::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn random_paths_roundtrip_bit_exactly() {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let paths: Vec<_> = (0..100).map(|i| random_path(&mut rng, i, (i % 5) as usize, &cfg, i % 2 == 0)).collect();
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("p.jsonl");
    write_paths(&paths, &f, &PathLimits::default()).unwrap();
    assert_eq!(read_paths(&f).unwrap(), paths);
}

#[test]
fn imputed_flag_is_written() {
    let cfg = tiny_config();
    let mut p = random_path(&mut ChaCha8Rng::seed_from_u64(2), 0, 2, &cfg, true);
    p.touchpoints[0].imputed = true;
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("p.jsonl");
    write_paths(&[p], &f, &PathLimits::default()).unwrap();
    assert!(std::fs::read_to_string(&f).unwrap().contains("\"imputed\":true"));
}

#[test]
fn empty_file_reads_as_no_paths() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("p.jsonl");
    std::fs::write(&f, "").unwrap();
    assert!(read_paths(&f).unwrap().is_empty());
    assert!(read_paths(&dir.path().join("missing.jsonl")).is_err());
}

#[test]
fn overlong_path_fails_before_writing() {
    let cfg = tiny_config();
    let p = random_path(&mut ChaCha8Rng::seed_from_u64(3), 0, 4, &cfg, true);
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("p.jsonl");
    let limits = PathLimits {
        max_len: Some(3),
        ..PathLimits::default()
    };
    assert!(write_paths(&[p], &f, &limits).is_err());
    assert!(!f.exists());
}

#[test]
fn bad_lines_report_where() {
    let cfg = tiny_config();
    let mut p = random_path(&mut ChaCha8Rng::seed_from_u64(4), 77, 3, &cfg, true);
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("p.jsonl");

    p.touchpoints.swap(0, 2);
    std::fs::write(&f, serde_json::to_string(&p).unwrap()).unwrap();
    match read_paths(&f) {
        Err(Error::PathInvariant { path_id, .. }) => assert_eq!(path_id, 77),
        other => panic!("expected an ordering error, got {other:?}"),
    }

    std::fs::write(&f, "{\"path_id\": 1}\n{not json").unwrap();
    match read_paths(&f) {
        Err(Error::Schema { line, field, .. }) => {
            assert_eq!(line, 1);
            assert!(!field.is_empty());
        }
        other => panic!("expected a schema error, got {other:?}"),
    }
}

#[test]
fn vocabulary_orders_pairs() {
    let ad = Channel::new("AD");
    let v = Vocab::build(&[
        TouchKey::new(Channel::new("EMAIL"), Action::Open),
        TouchKey::new(ad.clone(), Action::Impression),
        TouchKey::new(ad.clone(), Action::Click),
    ])
    .unwrap();
    assert_eq!(v.len(), 3);
    assert_eq!(v.index(&TouchKey::new(ad.clone(), Action::Click)), Some(1));
    assert_eq!(v.index(&TouchKey::new(ad.clone(), Action::Impression)), Some(2));
    assert_eq!(v.index(&TouchKey::new(Channel::new("EMAIL"), Action::Open)), Some(3));
    assert!(v.kinds().all(|k| k.vocab_index >= 1));
    let dup = TouchKey::new(ad, Action::Click);
    assert!(Vocab::build(&[dup.clone(), dup]).is_err());
    assert!(Vocab::build(&[]).is_err());
}
