use std::fs;

use multiattn::train::{check_sample, CHECKPOINT_DIR, FINAL_CHECKPOINT, LOSS_LOG};
use multiattn::{
    evaluate_model, generate_synthetic, train, Checkpoint, Error, Model, ModelConfig, OptimizerKind, Profile, RunConfig,
    Sample, Split, SynthParams, TrainConfig,
};

fn tiny_samples(n: usize, seed: u64) -> Vec<Sample> {
    let dir = tempfile::tempdir().unwrap();
    let mut p = SynthParams::new(seed, n, Profile::Tiny);
    p.split = [1, 0, 0];
    let ds = generate_synthetic(dir.path(), &p).unwrap();
    ds.load_split(Split::Train).collect::<Result<_, _>>().unwrap()
}

fn run_config(epochs: usize, batch_size: usize) -> RunConfig {
    let train = TrainConfig { epochs, batch_size, ..TrainConfig::default() };
    RunConfig { model: ModelConfig::tiny(8), train }
}

#[test]
fn single_sample_overfits_within_two_hundred_steps() {
    let samples = tiny_samples(1, 42);
    let cfg = run_config(200, 1);
    let model = Model::init(cfg.model.clone(), 42).unwrap();
    let out = train(model, &samples, &cfg, None, |_, _| {}).unwrap();
    assert_eq!(out.losses.len(), 200);
    let first_below = out.losses.iter().position(|&l| l < 0.01);
    assert!(first_below.is_some(), "final loss {}", out.losses[199]);
    let eval = evaluate_model(&out.model, &samples, 0.5).unwrap();
    assert_eq!((eval.report.recall, eval.report.f1, eval.report.f2), (1.0, 1.0, 1.0));
}

#[test]
fn outputs_and_checkpoint_cadence() {
    let samples = tiny_samples(6, 1);
    let mut cfg = run_config(4, 4);
    cfg.train.checkpoint_every = 2;
    let dir = tempfile::tempdir().unwrap();
    let model = Model::init(cfg.model.clone(), 1).unwrap();
    let mut seen = Vec::new();
    let out = train(model, &samples, &cfg, Some(dir.path()), |e, l| seen.push((e, l))).unwrap();
    assert_eq!(out.losses.len(), 4);
    assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), [1, 2, 3, 4]);

    let log = fs::read_to_string(dir.path().join(LOSS_LOG)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 4);
    for (i, line) in lines.iter().enumerate() {
        let (e, l) = line.split_once('\t').unwrap();
        assert_eq!(e.parse::<usize>().unwrap(), i + 1);
        assert_eq!(l.parse::<f64>().unwrap(), out.losses[i]);
    }
    let mut names: Vec<String> = fs::read_dir(dir.path().join(CHECKPOINT_DIR))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["epoch_0002.mac", "epoch_0004.mac"]);

    let last = Checkpoint::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(last.epoch, 4);
    assert_eq!(last.config, cfg);
    assert_eq!(last.config.train.learning_rate, 1e-3);
    assert_eq!(last.params, *out.model.params());
    assert_eq!(last.optimizer, out.optimizer);
    assert_eq!(fs::read(dir.path().join(CHECKPOINT_DIR).join("epoch_0004.mac")).unwrap(), last.encode());
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let samples = tiny_samples(5, 2);
    let cfg = run_config(2, 2);
    let run = || {
        let model = Model::init(cfg.model.clone(), cfg.train.seed).unwrap();
        let out = train(model, &samples, &cfg, None, |_, _| {}).unwrap();
        Checkpoint::from_model(&out.model, &out.optimizer, 2, &cfg).encode()
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(&a[..4], b"MAC1");
}

#[test]
fn checkpoint_reload_is_bit_exact() {
    let samples = tiny_samples(3, 3);
    let cfg = run_config(1, 3);
    let out = train(Model::init(cfg.model.clone(), 3).unwrap(), &samples, &cfg, None, |_, _| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.mac");
    Checkpoint::from_model(&out.model, &out.optimizer, 1, &cfg).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let reloaded = back.model().unwrap();
    for s in &samples {
        let (a, b) = (out.model.infer(&s.subsets).unwrap(), reloaded.infer(&s.subsets).unwrap());
        assert!(a.probabilities.iter().zip(&b.probabilities).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.attention.data().iter().zip(b.attention.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn sgd_checkpoints_have_no_optimizer_entries() {
    let samples = tiny_samples(2, 4);
    let mut cfg = run_config(1, 2);
    cfg.train.optimizer = OptimizerKind::Sgd;
    let out = train(Model::init(cfg.model.clone(), 4).unwrap(), &samples, &cfg, None, |_, _| {}).unwrap();
    let ck = Checkpoint::from_model(&out.model, &out.optimizer, 1, &cfg);
    assert_eq!(Checkpoint::decode(&ck.encode()).unwrap(), ck);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = run_config(1, 1);
    let model = Model::<f32>::zeros(cfg.model.clone()).unwrap();
    let opt = multiattn::train::optim::OptimizerState::new(OptimizerKind::Adam, model.params().tensors());
    let bytes = Checkpoint::from_model(&model, &opt, 0, &cfg).encode();
    assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'Z';
    assert!(Checkpoint::decode(&bad).is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(Checkpoint::decode(&extra).is_err());
}

#[test]
fn non_finite_loss_names_the_batch_and_sample() {
    let mut samples = tiny_samples(4, 5);
    samples[2].subsets[1].data_mut()[0] = f32::NAN;
    let bad_id = samples[2].id.clone();
    let cfg = run_config(1, 2);
    let err = train(Model::init(cfg.model.clone(), 5).unwrap(), &samples, &cfg, None, |_, _| {}).unwrap_err();
    match err {
        Error::Divergence { epoch, samples, .. } => {
            assert_eq!(epoch, 1);
            assert_eq!(samples, vec![bad_id]);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn mismatched_geometry_names_the_field() {
    let samples = tiny_samples(1, 6);
    let cfg = RunConfig { model: ModelConfig::tiny(5), train: TrainConfig::default() };
    let err = check_sample(&cfg.model, &samples[0]).unwrap_err().to_string();
    assert!(err.contains("model.classes"), "{err}");

    let mut wrong = ModelConfig::tiny(8);
    wrong.branches[2].height = 8;
    let err = check_sample(&wrong, &samples[0]).unwrap_err().to_string();
    assert!(err.contains("model.branches[2]"), "{err}");
}

#[test]
fn zero_learning_rate_is_rejected_by_config() {
    let samples = tiny_samples(1, 7);
    let mut cfg = run_config(1, 1);
    cfg.train.learning_rate = 0.0;
    let err = train(Model::init(cfg.model.clone(), 7).unwrap(), &samples, &cfg, None, |_, _| {}).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}
