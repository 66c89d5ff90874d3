use ernn_core::dsp::{Stft, StftConfig};
use ernn_core::model::{MaskModel, ModelConfig};
use ernn_core::numerics::grad_check;
use ernn_core::training::{mae_time_loss, train, TrainConfig, TrainingError, UtterancePair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noisy_pair(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean: Vec<f64> = (0..n)
        .map(|i| 0.3 * (i as f64 * 0.07).sin() + 0.1 * (i as f64 * 0.31).sin())
        .collect();
    let noisy = clean.iter().map(|c| c + rng.gen_range(-0.1..0.1)).collect();
    (noisy, clean)
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    for cfg in [ModelConfig::ernn(8, 4, 2), ModelConfig::lstm2(5)] {
        let model = MaskModel::<f64>::new(cfg.with_seed(11)).unwrap();
        let stft = Stft::<f64>::new(StftConfig::default()).unwrap();
        let (x, s) = noisy_pair(800, 3);
        let mut store = model.store().clone();
        let report = grad_check(
            |g| mae_time_loss(g, &model, &stft, &s, &x),
            &mut store,
            240,
            1e-5,
            7,
        )
        .unwrap();
        assert!(report.probes.len() >= 200);
        if cfg.iterations.is_some() {
            let etas = report
                .probes
                .iter()
                .filter(|p| p.param == "ernn.eta")
                .count();
            assert!(etas >= 2);
        }
        assert!(report.max_rel_err < 1e-4, "{cfg:?}: {:?}", report.worst());
    }
}

fn tiny_pairs() -> Vec<UtterancePair> {
    (0..3)
        .map(|i| {
            let (x, s) = noisy_pair(6000 + 1000 * i, i as u64);
            UtterancePair::new(
                format!("u{i}"),
                x.iter().map(|&v| v as f32).collect(),
                s.iter().map(|&v| v as f32).collect(),
            )
            .unwrap()
        })
        .collect()
}

fn train_tiny(threads: usize) -> (MaskModel<f32>, Vec<f64>) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let mut model = MaskModel::<f32>::new(ModelConfig::ernn(8, 4, 2).with_seed(1)).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            segment_len: 4000,
            epochs: 3,
            seed: 42,
            ..TrainConfig::default()
        };
        let report = train(&tiny_pairs(), &mut model, &cfg, |_| {}).unwrap();
        assert_eq!(report.steps, 6);
        (model, report.epochs.iter().map(|e| e.mean_loss).collect())
    })
}

#[test]
fn seeded_training_is_bit_exact() {
    let (a, la) = train_tiny(1);
    let (b, lb) = train_tiny(1);
    assert_eq!(a, b);
    assert_eq!(la, lb);
    let (c, lc) = train_tiny(4);
    assert_eq!(a, c);
    assert_eq!(la, lc);
}

#[test]
fn checkpoints_are_written_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = MaskModel::<f32>::new(ModelConfig::ernn(4, 2, 1)).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        segment_len: 2000,
        checkpoint_every: 2,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..TrainConfig::default()
    };
    let mut seen = Vec::new();
    let report = train(&tiny_pairs(), &mut model, &cfg, |e| seen.push(e.epoch)).unwrap();
    assert_eq!(seen, vec![1, 2, 3, 4]);
    let names: Vec<_> = report
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
        .collect();
    assert_eq!(names, vec!["epoch_0002.ckpt", "final.ckpt"]);
    let ck = ernn_core::model::load_checkpoint(&report.checkpoints[1]).unwrap();
    assert_eq!(ck.model, model);
    assert_eq!(ck.adam.unwrap().step, report.steps);
}

#[test]
fn identity_pair_loss_trends_down() {
    let (_, s) = noisy_pair(4000, 9);
    let s: Vec<f32> = s.iter().map(|&v| v as f32).collect();
    let pair = UtterancePair::new("id", s.clone(), s).unwrap();
    let mut model = MaskModel::<f32>::new(ModelConfig::ernn(16, 8, 2).with_seed(2)).unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        segment_len: 4000,
        epochs: 60,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let losses: Vec<f64> = train(&[pair], &mut model, &cfg, |_| {})
        .unwrap()
        .epochs
        .iter()
        .map(|e| e.mean_loss)
        .collect();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "first {head}, last {tail}");
}

#[test]
fn missing_dataset_names_the_path() {
    let err = ernn_core::training::load_dataset("/definitely/not/here").unwrap_err();
    assert!(matches!(err, TrainingError::DatasetNotFound(_)));
    assert!(err.to_string().contains("/definitely/not/here"));
}
