use super::*;
use crate::data::{DecodePolicy, LabelVocabulary, PreprocessConfig, Sample};
use crate::testutil::{small_config, synthetic_samples};

fn preprocess() -> PreprocessConfig {
    PreprocessConfig { target_size: 8, ..PreprocessConfig::default() }
}

fn config(seed: u64, epochs: u64) -> TrainConfig {
    TrainConfig { epochs, batch_size: 3, seed, precision: DType::F64, learning_rate: 3e-3, ..TrainConfig::default() }
}

fn dataset() -> (tempfile::TempDir, Vec<Sample>, LabelVocabulary) {
    let dir = tempfile::tempdir().unwrap();
    let (samples, vocab) = synthetic_samples(dir.path(), 8, 4);
    (dir, samples, vocab)
}

fn trainer(seed: u64, epochs: u64) -> Trainer<f64> {
    let model = DualStageModel::new(&small_config(), 4, seed).unwrap();
    Trainer::new(model, config(seed, epochs)).unwrap()
}

fn run(seed: u64, epochs: u64, samples: &[Sample]) -> Trainer<f64> {
    let loader = Loader::new(samples, &preprocess(), DecodePolicy::Abort).unwrap();
    let mut t = trainer(seed, epochs);
    t.fit(&loader, |_| Ok(())).unwrap();
    t
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
        TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() },
        TrainConfig { beta1: 1.0, ..TrainConfig::default() },
        TrainConfig { beta2: 0.0, ..TrainConfig::default() },
        TrainConfig { epsilon: 0.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config { .. })), "{c:?}");
    }
}

#[test]
fn defaults_and_json_field_names() {
    let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "precision": "f64"}"#).unwrap();
    assert_eq!((c.learning_rate, c.beta1, c.beta2, c.epsilon), (1e-3, 0.9, 0.999, 1e-8));
    assert_eq!((c.epochs, c.precision), (3, DType::F64));
    assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 1}"#).is_err());
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (_dir, samples, _) = dataset();
    let loader = Loader::new(&samples, &preprocess(), DecodePolicy::Abort).unwrap();
    let mut t = Trainer::<f64>::new(
        DualStageModel::new(&small_config(), 4, 1).unwrap(),
        TrainConfig { learning_rate: 0.0, ..config(1, 2) },
    )
    .unwrap();
    let before = t.model.params.clone();
    t.fit(&loader, |_| Ok(())).unwrap();
    for ((_, a), (_, b)) in before.iter().zip(t.model.params.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    assert_eq!(t.optimizer().state.step, 6);
}

#[test]
fn same_seed_gives_identical_logs() {
    let (_dir, samples, _) = dataset();
    let a = run(5, 3, &samples);
    let b = run(5, 3, &samples);
    assert_eq!(a.log(), b.log());
    assert_eq!(a.log().0.len(), 3);
    let c = run(6, 3, &samples);
    assert_ne!(a.log(), c.log());
}

#[test]
fn loss_decreases_on_a_small_set() {
    let (_dir, samples, _) = dataset();
    let log = run(2, 8, &samples).log().0.clone();
    assert!(log[7] < log[0], "{log:?}");
}

#[test]
fn step_is_a_function_of_state_and_batch() {
    let (_dir, samples, _) = dataset();
    let loader = Loader::new(&samples, &preprocess(), DecodePolicy::Abort).unwrap();
    let batch = loader.load_batch::<f64>(&[0, 1, 2], 0, 0, true).unwrap().unwrap();
    let mut a = trainer(4, 1);
    let mut b = a.clone();
    let la = a.step(&batch.images, &batch.targets).unwrap();
    let lb = b.step(&batch.images, &batch.targets).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.optimizer().state, b.optimizer().state);
    for ((_, p), (_, q)) in a.model.params.iter().zip(b.model.params.iter()) {
        assert_eq!(p.value, q.value);
    }
}

#[test]
fn non_finite_loss_reports_coordinates() {
    let (_dir, samples, _) = dataset();
    let loader = Loader::new(&samples, &preprocess(), DecodePolicy::Abort).unwrap();
    let mut t = trainer(1, 2);
    let id = t.model.params.find("fusion.classifier.bias").unwrap();
    t.model.params.get_mut(id).value.data_mut()[0] = f64::NAN;
    let err = t.fit(&loader, |_| Ok(())).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let msg = err.to_string();
    assert!(msg.contains("epoch 1") && msg.contains("batch 0"), "{msg}");
}

#[test]
fn resume_reproduces_the_uninterrupted_log() {
    let (_dir, samples, vocab) = dataset();
    let loader = Loader::new(&samples, &preprocess(), DecodePolicy::Abort).unwrap();
    let full = run(9, 4, &samples);

    let mut first = trainer(9, 2);
    first.fit(&loader, |_| Ok(())).unwrap();
    let state = first.training_state();
    let ckpt = Checkpoint {
        model: first.model.clone(),
        vocabulary: vocab.clone(),
        preprocess: preprocess(),
        epoch: state.epoch,
        seed: state.seed,
        loss_history: state.loss_history.clone(),
        adam: Some(state.adam),
    };
    let bytes = checkpoint::encode(&ckpt).unwrap();
    let loaded = checkpoint::decode::<f64>(&bytes, Some(&vocab)).unwrap();
    let mut resumed = Trainer::resume(loaded.model.clone(), config(9, 4), loaded.training_state().unwrap()).unwrap();
    assert_eq!(resumed.epoch(), 2);
    resumed.fit(&loader, |_| Ok(())).unwrap();
    assert_eq!(resumed.log(), full.log());
    for ((_, p), (_, q)) in resumed.model.params.iter().zip(full.model.params.iter()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
}

#[test]
fn resume_rejects_a_different_seed() {
    let t = trainer(1, 1);
    let err = Trainer::resume(t.model.clone(), config(2, 1), t.training_state()).unwrap_err();
    assert!(matches!(err, Error::Config { .. }));
}

#[test]
fn checkpoint_interval() {
    let (_dir, samples, _) = dataset();
    let loader = Loader::new(&samples, &preprocess(), DecodePolicy::Abort).unwrap();
    let mut t = Trainer::<f64>::new(
        DualStageModel::new(&small_config(), 4, 1).unwrap(),
        TrainConfig { checkpoint_every: 2, ..config(1, 5) },
    )
    .unwrap();
    let mut due = Vec::new();
    t.fit(&loader, |t| {
        due.push((t.epoch(), t.checkpoint_due()));
        Ok(())
    })
    .unwrap();
    assert_eq!(due, [(1, false), (2, true), (3, false), (4, true), (5, false)]);
}

#[test]
fn loss_log_csv() {
    let log = LossLog(vec![0.5, 0.1 + 0.2]);
    assert_eq!(log.to_csv(), "epoch,mean_loss\n1,0.5\n2,0.30000000000000004\n");
    let parsed: Vec<f64> = log.to_csv().lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(parsed, log.0);
}

#[test]
fn single_precision_training_runs() {
    let (_dir, samples, _) = dataset();
    let loader = Loader::new(&samples, &preprocess(), DecodePolicy::Abort).unwrap();
    let model = DualStageModel::<f32>::new(&small_config(), 4, 1).unwrap();
    let mut t = Trainer::new(model, TrainConfig { precision: DType::F32, ..config(1, 2) }).unwrap();
    let log = t.fit(&loader, |_| Ok(())).unwrap();
    assert!(log.0.iter().all(|l| l.is_finite()));
}

#[test]
fn precision_must_match_the_model() {
    let model = DualStageModel::<f32>::new(&small_config(), 4, 1).unwrap();
    assert!(matches!(Trainer::new(model, config(1, 1)), Err(Error::Config { .. })));
}
