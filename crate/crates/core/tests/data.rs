//! Dataset generation, manifests, and their failure modes.

use std::path::Path;

use skyclear::data::{load_manifest, make_dataset, procedural_scene, read_manifest, DatasetSpec, Split, SCENE_LABELS};
use skyclear::{DegradationKind, Error};

fn write_clean_images(dir: &Path, n: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let label = SCENE_LABELS[i % SCENE_LABELS.len()];
        procedural_scene(label, 24, 32, i as u64).save_png(&dir.join(format!("{label}_{i:03}.png"))).unwrap();
    }
}

fn train_only(mix: &str) -> DatasetSpec {
    DatasetSpec { mix: DatasetSpec::parse_mix(mix).unwrap(), split: [1.0, 0.0, 0.0], ..DatasetSpec::default() }
}

#[test]
fn resampling_replicates_training_entries() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = tmp.path().join("clean");
    write_clean_images(&clean, 5);
    let out = tmp.path().join("out");
    let ds = make_dataset(&clean, &train_only("snow:1:10"), 7, &out).unwrap();
    assert_eq!(ds.train.len(), 50);
    assert!(ds.val.is_empty() && ds.test.is_empty());
    assert!(ds.train.iter().all(|e| e.kind == DegradationKind::Snow));
    let manifest = read_manifest(&out.join(Split::Train.file_name())).unwrap();
    assert_eq!(manifest, ds.train);
    let unique: std::collections::BTreeSet<_> = manifest.iter().map(|e| e.lq.clone()).collect();
    assert_eq!(unique.len(), 5);
}

#[test]
fn mix_weights_and_splits_partition_the_images() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = tmp.path().join("clean");
    write_clean_images(&clean, 20);
    let spec = DatasetSpec { mix: DatasetSpec::parse_mix("rain:1,fog:1,rain+fog:1,snow:1").unwrap(), ..DatasetSpec::default() };
    let ds = make_dataset(&clean, &spec, 3, &tmp.path().join("out")).unwrap();
    assert_eq!(ds.train.len() + ds.val.len() + ds.test.len(), 20);
    for kind in DegradationKind::ALL {
        let n = [&ds.train, &ds.val, &ds.test].iter().map(|s| s.iter().filter(|e| e.kind == kind).count()).sum::<usize>();
        assert_eq!(n, 5, "{kind}");
    }
    for e in ds.train.iter().chain(&ds.val).chain(&ds.test) {
        assert!((0.3..=1.0).contains(&e.intensity));
    }
}

#[test]
fn same_seed_gives_identical_manifests_and_images() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = tmp.path().join("clean");
    write_clean_images(&clean, 6);
    let spec = DatasetSpec::default();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    make_dataset(&clean, &spec, 11, &a).unwrap();
    make_dataset(&clean, &spec, 11, &b).unwrap();
    for split in [Split::Train, Split::Val, Split::Test] {
        let read = |d: &Path| std::fs::read_to_string(d.join(split.file_name())).unwrap();
        assert_eq!(read(&a), read(&b));
    }
    for entry in read_manifest(&a.join("train.tsv")).unwrap() {
        let twin = b.join(entry.lq.strip_prefix(&a).unwrap());
        assert_eq!(std::fs::read(&entry.lq).unwrap(), std::fs::read(twin).unwrap());
    }
    let c = tmp.path().join("c");
    make_dataset(&clean, &spec, 12, &c).unwrap();
    assert_ne!(std::fs::read_to_string(a.join("train.tsv")).unwrap(), std::fs::read_to_string(c.join("train.tsv")).unwrap());
}

#[test]
fn degraded_images_are_reproducible_from_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = tmp.path().join("clean");
    write_clean_images(&clean, 4);
    let spec = DatasetSpec { mix: DatasetSpec::parse_mix("rain:1,fog:1,rain+fog:1,snow:1").unwrap(), split: [1.0, 0.0, 0.0], ..DatasetSpec::default() };
    let out = tmp.path().join("out");
    make_dataset(&clean, &spec, 5, &out).unwrap();
    let entries = read_manifest(&out.join("train.tsv")).unwrap();
    assert_eq!(entries.len(), 4);
    for e in &entries {
        assert!(e.verify().unwrap(), "{}", e.lq.display());
        let pair = e.load().unwrap();
        assert_eq!(pair.meta.weather, e.kind.weather_phrase());
        assert!(pair.lq.in_unit_range());
    }
    assert_eq!(load_manifest(&out.join("train.tsv")).unwrap().len(), 4);
    // The manifest stores paths relative to itself, so the tree can move.
    let moved = tmp.path().join("moved");
    std::fs::rename(&out, &moved).unwrap();
    assert!(read_manifest(&moved.join("train.tsv")).unwrap().iter().all(|e| e.verify().unwrap()));
}

#[test]
fn empty_and_unreadable_inputs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    std::fs::write(empty.join("notes.txt"), "not an image").unwrap();
    assert!(matches!(make_dataset(&empty, &DatasetSpec::default(), 0, &tmp.path().join("o1")), Err(Error::EmptyDirectory(_))));

    let broken = tmp.path().join("broken");
    std::fs::create_dir_all(&broken).unwrap();
    std::fs::write(broken.join("bad.png"), b"\x89PNG truncated").unwrap();
    assert!(matches!(make_dataset(&broken, &DatasetSpec::default(), 0, &tmp.path().join("o2")), Err(Error::UnreadableImage { .. })));

    let missing = tmp.path().join("missing");
    assert!(matches!(make_dataset(&missing, &DatasetSpec::default(), 0, &tmp.path().join("o3")), Err(Error::Io(_))));

    let manifest = tmp.path().join("empty.tsv");
    std::fs::write(&manifest, "# lq\thq\tkind\tintensity\tseed\tscene\n").unwrap();
    assert!(matches!(load_manifest(&manifest), Err(Error::EmptyDataset)));
}

#[test]
fn invalid_specs_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = tmp.path().join("clean");
    write_clean_images(&clean, 2);
    let bad_range = DatasetSpec { intensity: (0.5, 1.5), ..DatasetSpec::default() };
    assert!(matches!(make_dataset(&clean, &bad_range, 0, &tmp.path().join("o")), Err(Error::InvalidSpec(_))));
    assert!(DatasetSpec::parse_mix("fog:0").is_err());
    assert!(DatasetSpec::parse_mix("fog:1:2.5").is_err());
    assert!(DatasetSpec::parse_mix("fog:1:2:3").is_err());
}
