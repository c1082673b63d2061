use std::collections::BTreeSet;
use std::sync::Arc;

use iaqd_core::data::{generate_dataset, read_dataset, split, write_dataset, GeneratorConfig, Protocol};
use iaqd_core::detector::{Detector, DetectorSpec};
use iaqd_core::labels::{generate_pseudo_labels, realign_labels};
use iaqd_core::types::{CategoryPartition, CategorySet, LabelSource};

#[test]
fn dataset_directory_round_trip_is_exact_and_checksummed() {
    let scenes = generate_dataset(9, 50, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = GeneratorConfig::default();
    let m1 = write_dataset(dir.path(), &scenes, 9, 5, &cfg, None, None).unwrap();
    let (m2, back) = read_dataset(dir.path()).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(back, scenes);
    let again = tempfile::tempdir().unwrap();
    let m3 = write_dataset(again.path(), &generate_dataset(9, 50, 5).unwrap(), 9, 5, &cfg, None, None).unwrap();
    assert_eq!(m1.checksum, m3.checksum);
}

#[test]
fn protocol_b_chunks_partition_the_scenes() {
    let scenes: Vec<_> = generate_dataset(2, 120, 6).unwrap().into_iter().map(Arc::new).collect();
    let partition = CategoryPartition::contiguous(&[4, 2]).unwrap();
    let p1 = split(&scenes, &partition, 1, Protocol::B, 3).unwrap();
    let p2 = split(&scenes, &partition, 2, Protocol::B, 3).unwrap();
    let a: BTreeSet<usize> = p1.scene_ids().into_iter().collect();
    let b: BTreeSet<usize> = p2.scene_ids().into_iter().collect();
    assert!(a.is_disjoint(&b));
    assert_eq!(a.len() + b.len(), 120);
    assert_eq!(a.len(), 80);
    for s in &p2.samples {
        assert!(s.visible.iter().all(|x| p2.visible_categories.contains(&x.category_id)));
    }
}

#[test]
fn protocol_a_keeps_scenes_with_a_visible_category() {
    let scenes: Vec<_> = generate_dataset(4, 100, 6).unwrap().into_iter().map(Arc::new).collect();
    let partition = CategoryPartition::contiguous(&[4, 2]).unwrap();
    let p2 = split(&scenes, &partition, 2, Protocol::A, 0).unwrap();
    assert!(!p2.samples.is_empty());
    for s in &p2.samples {
        assert!(!s.visible.is_empty());
    }
    let expected = scenes
        .iter()
        .filter(|s| s.annotations.iter().any(|a| a.category_id >= 4))
        .count();
    assert_eq!(p2.len(), expected);
}

#[test]
fn pseudo_labels_stay_in_category_and_realignment_keeps_ground_truth() {
    let scenes = generate_dataset(6, 50, 4).unwrap();
    let spec = DetectorSpec {
        num_categories: 4,
        ..DetectorSpec::default()
    };
    let model = Detector::new(spec, 1).unwrap().freeze();
    let old: CategorySet = [0, 1].into_iter().collect();
    let all: CategorySet = (0..4).collect();
    let new: CategorySet = [2, 3].into_iter().collect();
    for s in scenes.iter().take(10) {
        let pseudo = generate_pseudo_labels(&model, &s.image, &old, 0.01).unwrap();
        assert!(pseudo.iter().all(|a| old.contains(&a.category_id) && a.source == LabelSource::Pseudo));
        let gt = s.annotations.restricted_to(&new);
        let merged = realign_labels(&model, &s.image, &gt, &new, &all, 0.01).unwrap();
        let kept: Vec<_> = merged.iter().take(gt.len()).cloned().collect();
        assert_eq!(kept, gt.iter().cloned().collect::<Vec<_>>());
        assert!(merged.iter().skip(gt.len()).all(|a| old.contains(&a.category_id)));
    }
}
