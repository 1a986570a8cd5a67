use std::collections::BTreeMap;

use onh_core::split::{fold_indices, split_grouped, split_indices, within_band, DatasetManifest, ManifestRow};
use onh_core::Error;
use proptest::prelude::*;

fn manifest(spec: &[(usize, u8)]) -> DatasetManifest {
    let rows = spec
        .iter()
        .enumerate()
        .flat_map(|(s, &(n, label))| {
            (0..n).map(move |k| ManifestRow {
                path: format!("s{s}_{k}.onhv"),
                subject_id: format!("S{s}"),
                label,
            })
        })
        .collect();
    DatasetManifest::new(rows).unwrap()
}

/// Whether any assignment of subjects to `k` parts puts every part in band.
fn feasible(spec: &[(usize, u8)], k: usize) -> bool {
    let total: usize = spec.iter().map(|s| s.0).sum();
    let glaucoma: usize = spec.iter().filter(|s| s.1 == 1).map(|s| s.0).sum();
    let mut assign = vec![0usize; spec.len()];
    loop {
        let mut scans = vec![0; k];
        let mut g = vec![0; k];
        for (s, &p) in assign.iter().enumerate() {
            scans[p] += spec[s].0;
            g[p] += spec[s].0 * spec[s].1 as usize;
        }
        if (0..k).all(|p| within_band(scans[p], g[p], total, glaucoma)) {
            return true;
        }
        let mut i = 0;
        loop {
            if i == spec.len() {
                return false;
            }
            assign[i] += 1;
            if assign[i] < k {
                break;
            }
            assign[i] = 0;
            i += 1;
        }
    }
}

fn check_parts(m: &DatasetManifest, parts: &[Vec<usize>]) {
    let labels = m.labels();
    let global = labels.iter().filter(|&&l| l == 1).count();
    let mut seen = vec![false; m.len()];
    let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
    for (p, idx) in parts.iter().enumerate() {
        for &i in idx {
            assert!(!seen[i], "row {i} in two parts");
            seen[i] = true;
            let prev = owner.insert(m.rows()[i].subject_id.as_str(), p);
            assert!(prev.is_none_or(|q| q == p), "subject spans parts");
        }
        let g = idx.iter().filter(|&&i| labels[i] == 1).count();
        assert!(within_band(idx.len(), g, m.len(), global));
    }
    assert!(seen.iter().all(|&s| s), "rows missing from the partition");
}

fn spec_strategy(max_subjects: usize) -> impl Strategy<Value = Vec<(usize, u8)>> {
    prop::collection::vec((1usize..=2, 0u8..=1), 2..=max_subjects)
        .prop_filter("both classes", |s| s.iter().any(|x| x.1 == 0) && s.iter().any(|x| x.1 == 1))
}

#[test]
fn hundred_subjects_with_eighteen_percent_glaucoma() {
    let spec: Vec<(usize, u8)> = (0..100).map(|i| (1, (i < 18) as u8)).collect();
    let m = manifest(&spec);
    for seed in 0..5 {
        let parts = split_grouped(&m, &[0.70, 0.15, 0.15], seed).unwrap();
        for p in &parts {
            let g = p.labels().iter().filter(|&&l| l == 1).count() as f64 / p.len() as f64;
            assert!((0.16..=0.20).contains(&g), "{g}");
        }
    }
}

#[test]
fn splits_are_deterministic_per_seed() {
    let spec: Vec<(usize, u8)> = (0..80).map(|i| (1 + i % 2, (i % 3 == 0) as u8)).collect();
    let m = manifest(&spec);
    assert_eq!(
        split_indices(&m, &[0.7, 0.15, 0.15], 4).unwrap(),
        split_indices(&m, &[0.7, 0.15, 0.15], 4).unwrap()
    );
    assert_eq!(fold_indices(&m, 5, 1).unwrap(), fold_indices(&m, 5, 1).unwrap());
    assert!(matches!(fold_indices(&m, 1, 0), Err(Error::Split(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn three_way_split_succeeds_exactly_when_feasible(spec in spec_strategy(10), seed in any::<u64>()) {
        let m = manifest(&spec);
        match split_indices(&m, &[0.70, 0.15, 0.15], seed) {
            Ok(parts) => check_parts(&m, &parts),
            Err(e) => {
                prop_assert!(matches!(e, Error::Split(_)));
                prop_assert!(!feasible(&spec, 3));
            }
        }
    }

    #[test]
    fn folds_succeed_exactly_when_feasible(spec in spec_strategy(8), seed in any::<u64>()) {
        let m = manifest(&spec);
        match fold_indices(&m, 5, seed) {
            Ok(parts) => check_parts(&m, &parts),
            Err(e) => {
                prop_assert!(matches!(e, Error::Split(_)));
                prop_assert!(!feasible(&spec, 5));
            }
        }
    }

    #[test]
    fn larger_manifests_keep_subjects_whole(spec in spec_strategy(120), seed in any::<u64>()) {
        let m = manifest(&spec);
        if let Ok(parts) = split_indices(&m, &[0.70, 0.15, 0.15], seed) {
            check_parts(&m, &parts);
        }
    }
}
