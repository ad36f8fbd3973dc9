use std::collections::BTreeMap;
use std::path::PathBuf;

use muzzle_id::dataset::{parse_manifest, save_manifest, load_manifest, stratified_split, DatasetManifest, ImageRecord, SplitConfig};
use proptest::prelude::*;

fn manifest(counts: &[usize]) -> DatasetManifest {
    let records = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| {
            (0..n).map(move |i| ImageRecord {
                path: PathBuf::from(format!("/herd/cow{c:03}/{i:03}.jpg")),
                class_id: format!("cow{c:03}"),
                width: 8,
                height: 8,
                byte_size: 100,
            })
        })
        .collect();
    DatasetManifest::from_records(records).unwrap()
}

fn per_class(records: &[ImageRecord]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for r in records {
        *m.entry(r.class_id.clone()).or_insert(0) += 1;
    }
    m
}

proptest! {
    #[test]
    fn split_is_a_partition_covering_every_class(
        counts in prop::collection::vec(2usize..=70, 2..=50),
        seed in any::<u64>(),
        fraction in 0.05f64..0.95,
    ) {
        let m = manifest(&counts);
        let s = stratified_split(&m, &SplitConfig { train_fraction: fraction, seed }).unwrap();
        prop_assert!(s.overlap().is_empty());
        prop_assert_eq!(s.train.len() + s.test.len(), m.records().len());
        let mut all: Vec<_> = s.train.iter().chain(&s.test).cloned().collect();
        all.sort_by(|a, b| a.path.cmp(&b.path));
        prop_assert_eq!(&all[..], m.records());
        let (tr, te) = (per_class(&s.train), per_class(&s.test));
        prop_assert_eq!(tr.len(), counts.len());
        prop_assert_eq!(te.len(), counts.len());
    }

    // Each class is off the target by less than one image, so the global
    // fraction is within C/N of it. With the floor rule and f = 0.7 the
    // deviation is one-sided once every class has at least 4 images.
    #[test]
    fn global_fraction_bound(
        counts in prop::collection::vec(4usize..=70, 2..=50),
        seed in any::<u64>(),
    ) {
        let m = manifest(&counts);
        let s = stratified_split(&m, &SplitConfig { train_fraction: 0.7, seed }).unwrap();
        let f = s.train_fraction();
        let slack = counts.len() as f64 / m.records().len() as f64;
        prop_assert!(f >= 0.7 - 1e-12, "fraction {f}");
        prop_assert!(f <= 0.7 + slack + 1e-12, "fraction {f} slack {slack}");
    }

    #[test]
    fn same_seed_same_split(counts in prop::collection::vec(2usize..=20, 2..=10), seed in any::<u64>()) {
        let m = manifest(&counts);
        let cfg = SplitConfig { train_fraction: 0.7, seed };
        let a = stratified_split(&m, &cfg).unwrap();
        let b = stratified_split(&m, &cfg).unwrap();
        prop_assert_eq!(a.fingerprint(), b.fingerprint());
        prop_assert_eq!(a, b);
    }
}

#[test]
fn floor_rule_can_exceed_five_points_on_small_classes() {
    // Two classes of 6 and 5: one test image each, 9 of 11 train.
    let m = manifest(&[6, 5]);
    let s = stratified_split(&m, &SplitConfig::default()).unwrap();
    assert_eq!(s.test.len(), 2);
    assert!((s.train_fraction() - 9.0 / 11.0).abs() < 1e-12);
}

#[test]
fn different_seeds_usually_differ() {
    let m = manifest(&[20, 20, 20]);
    let fps: std::collections::BTreeSet<String> = (0..8)
        .map(|seed| stratified_split(&m, &SplitConfig { train_fraction: 0.7, seed }).unwrap().fingerprint())
        .collect();
    assert!(fps.len() > 1);
}

#[test]
fn manifest_file_keeps_split() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = manifest(&[5, 7]);
    let cfg = SplitConfig { train_fraction: 0.7, seed: 9 };
    let s = stratified_split(&m, &cfg).unwrap();
    m.attach_split(&s, &cfg).unwrap();
    let path = dir.path().join("manifest.json");
    save_manifest(&m, &path).unwrap();
    let back = load_manifest(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.stored_split().unwrap().fingerprint(), s.fingerprint());
    assert!(parse_manifest("{\"classes\": [", &path).is_err());
}
