use digitwin_autodiff::checkpoint;
use digitwin_models::data::{epoch_batches, run_starts};
use digitwin_models::{
    train_cnn, train_videomae, train_vit_cot, CheckpointSink, Cnn, CnnConfig, MaeConfig, TrainConfig, ViT, ViTConfig,
    VideoMae,
};
use digitwin_sim::{generate_dataset, DatasetConfig, Frame};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn short_episodes(n: usize, episode_frames: usize, seed: u64) -> Vec<Frame> {
    let cfg = DatasetConfig {
        episode_frames,
        ..DatasetConfig::default()
    };
    generate_dataset(1, n, seed, &cfg).unwrap().frames
}

fn tiny_vit(epochs: usize) -> ViTConfig {
    ViTConfig {
        train: TrainConfig {
            epochs,
            batch_size: 8,
            lr: 1e-3,
            ..TrainConfig::default()
        },
        ..ViTConfig::default()
    }
}

#[test]
fn zero_epochs_returns_the_initial_weights() {
    let frames = short_episodes(30, 10, 0);
    let mut vit = ViT::<f32>::new(tiny_vit(0)).unwrap();
    let init = vit.params().clone();
    let dir = tempfile::tempdir().unwrap();
    let sink = CheckpointSink {
        dir: dir.path().to_path_buf(),
        kind: "vit-cot".into(),
        config_hash: 11,
    };
    let log = train_vit_cot(&mut vit, &frames, Some(&sink)).unwrap();
    assert!(log.epochs.is_empty());
    for ((_, a), (_, b)) in vit.params().iter().zip(init.iter()) {
        assert_eq!(a, b);
    }
    let (header, stored) = checkpoint::load::<f32>(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(header.kind, "vit-cot");
    assert_eq!(header.config_hash, 11);
    let restored = ViT::<f32>::from_params(tiny_vit(0), &stored).unwrap();
    for ((_, a), (_, b)) in restored.params().iter().zip(init.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn runs_stay_inside_episodes() {
    let frames = short_episodes(47, 10, 1);
    for len in [2, 3, 8] {
        let starts = run_starts(&frames, len);
        assert!(!starts.is_empty());
        for &s in &starts {
            let ep = frames[s].meta.episode;
            assert!(frames[s..s + len].iter().all(|f| f.meta.episode == ep));
        }
        // Every valid start is present.
        let valid = (0..=frames.len() - len)
            .filter(|&s| frames[s..s + len].iter().all(|f| f.meta.episode == frames[s].meta.episode))
            .count();
        assert_eq!(starts.len(), valid);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn epoch_batches_are_full_and_distinct(
        n_starts in 1usize..300,
        batch in 1usize..40,
        len in 2usize..4,
        seed in any::<u64>(),
    ) {
        let starts: Vec<usize> = (0..n_starts).map(|i| i * 3).collect();
        let n_frames = n_starts * 3;
        let b = epoch_batches(&starts, n_frames, len, batch, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(!b.is_empty());
        let flat: Vec<usize> = b.iter().flatten().copied().collect();
        let mut dedup = flat.clone();
        dedup.sort_unstable();
        dedup.dedup();
        prop_assert_eq!(dedup.len(), flat.len());
        prop_assert!(flat.iter().all(|s| starts.contains(s)));
        if b.len() > 1 {
            prop_assert!(b.iter().all(|x| x.len() == batch));
        }
    }
}

#[test]
fn contrastive_training_lowers_the_loss_and_is_reproducible() {
    let frames = short_episodes(120, 40, 2);
    let run = || {
        let mut vit = ViT::<f32>::new(tiny_vit(4)).unwrap();
        let log = train_vit_cot(&mut vit, &frames, None).unwrap();
        (vit, log)
    };
    let (a, log) = run();
    assert_eq!(log.epochs.len(), 4);
    assert!(log.last_loss().unwrap() < log.first_loss().unwrap(), "{:?}", log.to_csv());
    assert_eq!(log.to_csv().lines().count(), 5);
    let (b, again) = run();
    let losses = |l: &digitwin_models::TrainLog| l.epochs.iter().map(|e| e.mean_loss).collect::<Vec<_>>();
    assert_eq!(losses(&log), losses(&again));
    for ((_, x), (_, y)) in a.params().iter().zip(b.params().iter()) {
        assert_eq!(x, y);
    }
}

#[test]
fn cnn_and_videomae_train_on_the_same_frames() {
    let frames = short_episodes(64, 32, 3);
    let mut cnn = Cnn::<f32>::new(CnnConfig {
        train: TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        },
        ..CnnConfig::default()
    })
    .unwrap();
    let log = train_cnn(&mut cnn, &frames, None).unwrap();
    assert!(log.first_loss().unwrap().is_finite());

    let mut mae = VideoMae::<f32>::new(MaeConfig {
        encoder_layers: 1,
        train: TrainConfig {
            epochs: 2,
            batch_size: 2,
            lr: 1e-3,
            ..TrainConfig::default()
        },
        ..MaeConfig::default()
    })
    .unwrap();
    let log = train_videomae(&mut mae, &frames, None).unwrap();
    assert_eq!(log.epochs.len(), 2);
    assert!(log.epochs.iter().all(|e| e.mean_loss.is_finite() && e.steps > 0));
}

#[test]
fn too_few_windows_for_a_batch_is_a_config_error() {
    let frames = short_episodes(6, 3, 4);
    let mut vit = ViT::<f32>::new(tiny_vit(1)).unwrap();
    assert!(matches!(
        train_vit_cot(&mut vit, &frames, None),
        Err(digitwin_models::ModelError::Config(_))
    ));
}
