use swinhdr::data::{collate, synth_scene, Sample};
use swinhdr::loss::SsimConfig;
use swinhdr::train::{
    batch_gradients, evaluate, load_checkpoint, load_checkpoint_for, save_checkpoint, Adam, Checkpoint, LrSchedule,
    TrainOptions, TrainState, Trainer,
};
use swinhdr::{init_parameters, Error, ModelConfig, ParameterSet, Tensor};

fn scenes(n: u64, size: usize) -> Vec<Sample> {
    (0..n).map(|i| synth_scene(40 + i, size, size).unwrap()).collect()
}

fn options(epochs: u64) -> TrainOptions {
    TrainOptions {
        epochs,
        batch_size: 2,
        seed: 3,
        schedule: LrSchedule {
            initial: 1e-3,
            decayed: 1e-4,
            decay_epoch: 1,
        },
        ..TrainOptions::default()
    }
}

fn bits(p: &ParameterSet<f32>) -> Vec<u32> {
    p.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn adam_zero_gradient_and_first_step() {
    let mut p = ParameterSet::new();
    p.insert("w", Tensor::new(vec![4], vec![0.5f32, -0.5, 0.0, 2.0]).unwrap()).unwrap();
    let before = p.clone();
    let mut st = TrainState::new(&p, 0, 1e-3);
    Adam::default().step(&mut p, &[Tensor::zeros(vec![4])], &mut st, 1e-3).unwrap();
    assert_eq!(p, before);

    let mut st = TrainState::new(&p, 0, 1e-3);
    let g = Tensor::new(vec![4], vec![3.0f32, -0.01, 1e-4, -7.0]).unwrap();
    Adam::default().step(&mut p, &[g.clone()], &mut st, 1e-3).unwrap();
    for i in 0..4 {
        let moved = p.get("w").unwrap().data()[i] - before.get("w").unwrap().data()[i];
        let want = -1e-3 * g.data()[i].signum();
        assert!((moved - want).abs() < 2e-6, "{i}: {moved}");
    }
    assert_eq!(st.step, 1);
    assert!(Adam::default().step(&mut p, &[], &mut st, 1e-3).is_err());
}

#[test]
fn default_schedule() {
    let s = LrSchedule::default();
    assert_eq!([s.lr(0), s.lr(20), s.lr(39)], [1e-4, 1e-5, 1e-5]);
    assert_eq!(s.lr(19), 1e-4);
    let o = TrainOptions::default();
    assert_eq!((o.batch_size, o.epochs), (4, 40));
    assert_eq!(o.adam, Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 });
}

#[test]
fn micro_batches_reproduce_the_full_batch_gradient() {
    let cfg = ModelConfig::tiny();
    let params: ParameterSet<f64> = init_parameters::<f32>(&cfg, 2).unwrap().cast();
    let data = scenes(3, 32);
    let (x, x2, gt) = collate(&data.iter().collect::<Vec<_>>()).unwrap();
    let (x, x2, gt) = (x.cast::<f64>(), x2.cast::<f64>(), gt.cast::<f64>());
    let ssim = SsimConfig::default();
    let full = batch_gradients(&params, &cfg, &x, &x2, &gt, &ssim, None).unwrap();
    for micro in [1, 2] {
        let part = batch_gradients(&params, &cfg, &x, &x2, &gt, &ssim, Some(micro)).unwrap();
        assert!((part.loss - full.loss).abs() < 1e-12);
        assert_eq!(part.psnr_mu.len(), 3);
        for (name, (a, b)) in params.names().iter().zip(part.grads.iter().zip(&full.grads)) {
            assert!(a.max_abs_diff(b).unwrap() < 1e-6, "{name} (micro {micro})");
        }
    }
}

#[test]
fn resumed_training_is_bit_exact() {
    let data = scenes(4, 32);
    let mut straight = Trainer::new(ModelConfig::tiny(), options(2)).unwrap();
    let full_logs = straight.train(&data, |_, _| Ok(())).unwrap();
    assert_eq!(full_logs.len(), 2);
    assert_eq!(full_logs[1].lr, 1e-4);
    assert!(full_logs.iter().all(|l| l.steps == 2 && l.step_losses.len() == 2));

    let mut first = Trainer::new(ModelConfig::tiny(), options(1)).unwrap();
    first.train(&data, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    save_checkpoint(&path, &first.checkpoint()).unwrap();
    let ckpt = load_checkpoint(&path).unwrap();
    assert_eq!(ckpt.state.step, 2);
    assert_eq!(ckpt.state.epoch, 1);
    let mut resumed = Trainer::resume(ckpt, options(2)).unwrap();
    let rest = resumed.train(&data, |_, _| Ok(())).unwrap();
    assert_eq!(rest.len(), 1);
    assert_eq!(rest[0], full_logs[1]);
    assert_eq!(bits(&resumed.params), bits(&straight.params));
    assert_eq!(resumed.state, straight.state);
}

#[test]
fn identical_runs_write_identical_checkpoints() {
    let data = scenes(3, 32);
    let run = || {
        let mut t = Trainer::new(ModelConfig::tiny(), options(1)).unwrap();
        t.train(&data, |_, _| Ok(())).unwrap();
        t.checkpoint().encode()
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(Checkpoint::decode(&a).unwrap().encode(), a);
}

#[test]
fn checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let t = Trainer::new(ModelConfig::tiny(), options(1)).unwrap();
    save_checkpoint(&path, &t.checkpoint()).unwrap();
    assert!(load_checkpoint_for(&path, &ModelConfig::tiny()).is_ok());

    let wider = ModelConfig {
        base_width: 16,
        ..ModelConfig::tiny()
    };
    let err = load_checkpoint_for(&path, &wider).unwrap_err();
    let Error::CheckpointShape { name, expected, found } = &err else {
        panic!("unexpected {err:?}");
    };
    assert_ne!(expected, found);
    assert!(err.to_string().contains(name.as_str()));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::TruncatedPayload(_))));
    assert!(matches!(load_checkpoint(dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn zero_epochs_and_step_caps() {
    let data = scenes(4, 32);
    let mut t = Trainer::new(ModelConfig::tiny(), options(0)).unwrap();
    let init = t.params.clone();
    assert!(t.train(&data, |_, _| Ok(())).unwrap().is_empty());
    assert_eq!(t.params, init);

    let mut capped = Trainer::new(ModelConfig::tiny(), TrainOptions { max_steps: Some(3), ..options(5) }).unwrap();
    let logs = capped.train(&data, |_, _| Ok(())).unwrap();
    assert_eq!(capped.state.step, 3);
    assert_eq!(logs.iter().map(|l| l.steps).sum::<u64>(), 3);

    assert!(matches!(t.train(&[], |_, _| Ok(())), Err(Error::EmptyDataset)));
    assert!(Trainer::new(ModelConfig::tiny(), TrainOptions { batch_size: 0, ..options(1) }).is_err());
}

#[test]
fn a_few_steps_reduce_the_loss() {
    let data = scenes(2, 32);
    let opts = TrainOptions {
        batch_size: 2,
        augment: false,
        schedule: LrSchedule::constant(2e-3),
        epochs: 30,
        ..options(30)
    };
    let mut t = Trainer::new(ModelConfig::tiny(), opts).unwrap();
    let before = evaluate(&t.params, &t.cfg, &data, &SsimConfig::default()).unwrap();
    t.train(&data, |_, _| Ok(())).unwrap();
    let after = evaluate(&t.params, &t.cfg, &data, &SsimConfig::default()).unwrap();
    assert!(after.loss < before.loss, "{} -> {}", before.loss, after.loss);
}
