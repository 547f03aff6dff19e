use std::fs;

use digitwin_sim::dataset::{FRAMES_FILE, MANIFEST_FILE, METADATA_FILE};
use digitwin_sim::*;
use proptest::prelude::*;

fn small() -> DatasetConfig {
    DatasetConfig {
        resolution: 24,
        episode_frames: 120,
        ..Default::default()
    }
}

#[test]
fn desk_scale_checksum_is_stable() {
    let cfg = DatasetConfig::default();
    let a = generate_dataset(1, 8000, 42, &cfg).unwrap();
    let b = generate_dataset(1, 8000, 42, &cfg).unwrap();
    assert_eq!(a.len(), 8000);
    assert_eq!(a.manifest.checksum, b.manifest.checksum);
    assert!(a.frames.iter().zip(&b.frames).all(|(x, y)| x.pixels == y.pixels));
    let c = generate_dataset(1, 8000, 43, &cfg).unwrap();
    assert_ne!(a.manifest.checksum, c.manifest.checksum);
}

#[test]
fn regenerating_from_manifest_reproduces_bytes() {
    let ds = generate_dataset(4, 300, 5, &small()).unwrap();
    let again = EpisodeDataset::regenerate(&ds.manifest).unwrap();
    assert_eq!(ds, again);
}

#[test]
fn rotation_phase_covers_full_range() {
    let ds = generate_dataset(2, 8000, 11, &DatasetConfig::default()).unwrap();
    let mut bins = [0usize; 12];
    for f in &ds.frames {
        assert!((0.0..=60.0).contains(&f.meta.phase_deg));
        bins[((f.meta.phase_deg / 5.0) as usize).min(11)] += 1;
    }
    assert!(bins.iter().all(|&n| n > 0), "{bins:?}");
    let lo = ds.frames.iter().map(|f| f.meta.phase_deg).fold(f64::MAX, f64::min);
    let hi = ds.frames.iter().map(|f| f.meta.phase_deg).fold(f64::MIN, f64::max);
    assert!(lo < 0.5 && hi > 59.5, "{lo} {hi}");
}

#[test]
fn conditions_bind_object_and_viewpoint() {
    for id in 1..=4u8 {
        let cond = Condition::new(id).unwrap();
        let ds = generate_dataset(id, 50, 1, &small()).unwrap();
        assert!(ds.frames.iter().all(|f| {
            f.meta.condition == id && f.meta.object == Some(cond.object) && f.meta.viewpoint == cond.viewpoint
        }));
    }
}

#[test]
fn probe_set_has_24_labelled_subsets() {
    let sets = generate_probe_set(10, 3, &small()).unwrap();
    assert_eq!(sets.len(), 24);
    let mut seen = std::collections::BTreeSet::new();
    for s in &sets {
        assert_eq!(s.len(), 10);
        match s.manifest.dataset {
            DatasetKind::Probe { object, viewpoint } => {
                assert!(s.frames.iter().all(|f| f.meta.object == Some(object) && f.meta.viewpoint == viewpoint));
                assert!(seen.insert((object, viewpoint)));
            }
            other => panic!("unexpected kind {other:?}"),
        }
    }
}

#[test]
fn disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(1, 130, 9, &small()).unwrap();
    ds.write(dir.path()).unwrap();
    let blob = fs::read(dir.path().join(FRAMES_FILE)).unwrap();
    assert_eq!(blob.len(), 130 * 24 * 24 * 3);
    let back = EpisodeDataset::read(dir.path()).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn corrupted_blob_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(1, 20, 9, &small()).unwrap();
    ds.write(dir.path()).unwrap();
    let path = dir.path().join(FRAMES_FILE);
    let mut blob = fs::read(&path).unwrap();
    blob[100] ^= 0xff;
    fs::write(&path, &blob).unwrap();
    assert!(matches!(EpisodeDataset::read(dir.path()), Err(SimError::Integrity(_))));
    blob.pop();
    fs::write(&path, &blob).unwrap();
    assert!(EpisodeDataset::read(dir.path()).is_err());
}

#[test]
fn failed_write_removes_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    // A directory where the metadata file should go makes the write fail.
    fs::create_dir(dir.path().join(METADATA_FILE)).unwrap();
    let ds = generate_dataset(1, 5, 9, &small()).unwrap();
    assert!(ds.write(dir.path()).is_err());
    assert!(!dir.path().join(FRAMES_FILE).exists());
    assert!(!dir.path().join(MANIFEST_FILE).exists());
}

#[test]
fn manifest_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(1, 5, 9, &small()).unwrap();
    ds.write(dir.path()).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, format!("bogus = 1\n{text}")).unwrap();
    assert!(matches!(EpisodeDataset::read(dir.path()), Err(SimError::Manifest(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn poses_valid_and_continuous(seed in any::<u64>(), far in any::<bool>()) {
        let (c, m) = (ChamberSpec::default(), MotionConfig::default());
        let wall = if far { Wall::Far } else { Wall::Near };
        let poses = sample_trajectory(&c, &m, wall, seed, 40.0).unwrap();
        prop_assert_eq!(poses.len(), 400);
        for p in &poses {
            prop_assert!(p.is_valid(&c, &m));
        }
        for w in poses.windows(2) {
            let d = ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt();
            prop_assert!(d <= 0.15 + 1e-9);
            for (a, b) in w[0].head_angles().iter().zip(w[1].head_angles()) {
                prop_assert!((a - b).abs() <= m.max_head_step() + 1e-9);
            }
        }
    }

    #[test]
    fn frame_indices_and_timestamps(seed in any::<u64>(), n in 1usize..200) {
        let ds = generate_dataset(1, n, seed, &DatasetConfig { resolution: 8, episode_frames: 64, ..Default::default() }).unwrap();
        prop_assert_eq!(ds.len(), n);
        for w in ds.frames.windows(2) {
            if w[0].meta.episode == w[1].meta.episode {
                prop_assert!(w[1].meta.index > w[0].meta.index);
                prop_assert_eq!(w[1].meta.timestamp_ms - w[0].meta.timestamp_ms, 100);
            }
        }
    }
}
