use matr::losses::LossConfig;
use matr::model::{Model, ModelConfig};
use matr::synthdata::{generate_sequence, Image, SequenceClip, SynthConfig};
use matr::trainer::{ablation_run, sample_clip, train, AblationSetup, TrainConfig, TrainMode};
use matr::tracker::TrackerConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model(mode: TrainMode, seed: u64) -> Model {
    Model::new(ModelConfig {
        image_height: 32,
        image_width: 32,
        dim: 16,
        num_detect: 4,
        encoder_layers: 1,
        decoder_layers: 2,
        heads: 2,
        ffn_width: 32,
        seed,
        track_update: mode.track_update(),
        ..Default::default()
    })
    .unwrap()
}

fn dataset(n: u64, length: usize) -> Vec<SequenceClip> {
    (0..n)
        .map(|i| {
            let cfg = SynthConfig {
                height: 32,
                width: 32,
                seed: 40 + i,
                ..Default::default()
            };
            generate_sequence(&cfg, length).unwrap()
        })
        .collect()
}

fn train_cfg(mode: TrainMode, steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        mode,
        // Low enough that detections get promoted early in training.
        iou_threshold: 0.1,
        ..Default::default()
    }
}

#[test]
fn one_step_logs_one_row() {
    let data = dataset(2, 8);
    let mut model = small_model(TrainMode::Matr, 0);
    let out = train(&mut model, &data, &train_cfg(TrainMode::Matr, 1), &LossConfig::default(), None).unwrap();
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.loss_csv().lines().count(), 2);
    assert!(out.log[0].total.is_finite());
    assert_eq!(out.log[0].per_frame.len(), 5);
    assert!(out.max_clipped_norm <= 0.1 + 1e-12);
}

#[test]
fn training_is_deterministic() {
    let data = dataset(3, 10);
    let run = || {
        let mut model = small_model(TrainMode::Matr, 2);
        let out = train(&mut model, &data, &train_cfg(TrainMode::Matr, 4), &LossConfig::default(), None).unwrap();
        (out.log.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>(), model.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}

#[test]
fn modes_without_mat_skip_trajectory_loss() {
    let data = dataset(2, 8);
    for mode in [TrainMode::BlImpOnly, TrainMode::QimLike, TrainMode::Klf] {
        let mut model = small_model(mode, 1);
        let out = train(&mut model, &data, &train_cfg(mode, 3), &LossConfig::default(), None).unwrap();
        assert_eq!(out.mat_invocations, 0, "{mode}");
        assert_eq!(out.trajectory_evaluations, 0, "{mode}");
        assert!(out.log.iter().all(|r| r.traj == 0.0), "{mode}");
    }
}

#[test]
fn mismatched_model_is_rejected() {
    let data = dataset(1, 8);
    let mut model = small_model(TrainMode::QimLike, 0);
    assert!(train(&mut model, &data, &train_cfg(TrainMode::Matr, 1), &LossConfig::default(), None).is_err());
    assert!(train(&mut model, &[], &train_cfg(TrainMode::QimLike, 1), &LossConfig::default(), None).is_err());
}

#[test]
fn loss_falls_on_a_fixed_sequence() {
    let data = dataset(1, 8);
    let mut model = small_model(TrainMode::Matr, 0);
    let cfg = TrainConfig {
        lr: 1e-3,
        dropout: 0.0,
        ..train_cfg(TrainMode::Matr, 120)
    };
    let out = train(&mut model, &data, &cfg, &LossConfig::default(), None).unwrap();
    let mean = |rs: &[matr::losses::LossReport]| rs.iter().map(|r| r.total).sum::<f64>() / rs.len() as f64;
    let head = mean(&out.log[..20]);
    let tail = mean(&out.log[100..]);
    assert!(tail < head, "first 20 {head}, last 20 {tail}");
}

#[test]
fn repeated_ablation_rows_match() {
    let train_set = dataset(2, 8);
    let eval = dataset(1, 8);
    let setup = AblationSetup {
        model: small_model(TrainMode::Matr, 0).config,
        train: train_cfg(TrainMode::Matr, 2),
        loss: LossConfig::default(),
        tracker: TrackerConfig::default(),
        train_set: &train_set,
        eval_sequences: &eval,
        collision_clips: &eval,
    };
    let mut seen = 0;
    let table = ablation_run(&setup, &[TrainMode::Matr, TrainMode::Matr], &[5], |_| seen += 1).unwrap();
    assert_eq!(seen, 2);
    assert_eq!(table.runs[0], table.runs[1]);
    assert_eq!(table.summary().len(), 1);
    assert_eq!(table.runs_csv().lines().count(), 3);
}

#[test]
fn short_sequences_are_an_input_error() {
    let data = dataset(1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(sample_clip(&data, 5, 4, &mut rng).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_clips_fit_their_sequence(
        lengths in prop::collection::vec(5usize..30, 1..4),
        clip in 1usize..6,
        max_stride in 1usize..6,
        seed in any::<u64>(),
    ) {
        let data: Vec<SequenceClip> = lengths
            .iter()
            .map(|&n| SequenceClip { frames: vec![Image::zeros(1, 1); n], truth: vec![Vec::new(); n] })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let s = sample_clip(&data, clip, max_stride, &mut rng).unwrap();
            prop_assert!(s.stride >= 1 && s.stride <= max_stride);
            let last = s.start + s.stride * (clip - 1);
            prop_assert!(last < lengths[s.sequence]);
        }
    }
}
