use dymn::container::TeacherLogits;
use dymn::error::Error;
use dymn::metrics::accuracy;
use dymn::network::Model;
use dymn::training::config::RunConfig;
use dymn::training::toy::{smoothed_decrease, toy_dataset, toy_run_config, train_teacher, TEACHER_EPOCHS, TOY_SECONDS};
use dymn::training::trainer::{dataset_bce, dataset_mels, mel_config_for, predict_logits};
use dymn::training::{train_loop, Dataset, Trace, UniformSampler};

fn quiet(model: &mut Model<f32>, data: &Dataset, run: &RunConfig, teacher: Option<&TeacherLogits>) -> dymn::Result<Trace> {
    train_loop(model, data, run, teacher, &mut UniformSampler, |_, _| Ok(()))
}

#[test]
fn toy_task_learns_within_two_hundred_steps() {
    let data = toy_dataset(32, TOY_SECONDS, 7).unwrap();
    let run = toy_run_config(50);
    let mut model = Model::<f32>::new(&run.model, 1).unwrap();
    let mels = dataset_mels(&data, &mel_config_for(&run.model)).unwrap();
    let before = dataset_bce(&model, &data, &mels, 32).unwrap();
    let trace = quiet(&mut model, &data, &run, None).unwrap();
    assert!(trace.steps.len() <= 200);
    let after = dataset_bce(&model, &data, &mels, 32).unwrap();
    assert!(after <= 0.5 * before, "{before} -> {after}");
    let z = predict_logits(&model, &mels, 32).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    assert!(accuracy(&z, &data.targets(&idx).unwrap()).unwrap() > 0.9);

}

#[test]
fn distillation_approaches_teacher() {
    let data = toy_dataset(32, TOY_SECONDS, 11).unwrap();
    let (_, logits) = train_teacher(&data, TEACHER_EPOCHS, 100).unwrap();
    for lambda in [0.1, 0.0] {
        let mut run = toy_run_config(30);
        run.schedule.rampdown_epochs = 15;
        run.schedule.tail_epochs = 5;
        run.train.kd_lambda = lambda;
        let mut s = Model::<f32>::new(&run.model, 2).unwrap();
        let trace = quiet(&mut s, &data, &run, Some(&logits)).unwrap();
        let dev: Vec<f64> = trace.epochs.iter().map(|e| e.teacher_deviation.unwrap()).collect();
        assert!(smoothed_decrease(&dev, 5, 0.05), "lambda {lambda}: {dev:?}");
    }
}

fn augmented(seed: u64) -> RunConfig {
    let mut run = toy_run_config(3);
    run.schedule.rampdown_epochs = 1;
    run.train.seed = seed;
    run.train.batch_size = 8;
    run.train.mixup_spectrogram = true;
    run.train.mixup_waveform = true;
    run.train.mel_perturb = true;
    run.train.roll_ms = 125.0;
    run.train.gain_db = 7.0;
    run.model.dropout = 0.2;
    run
}

#[test]
fn same_seed_same_trace() {
    let data = toy_dataset(8, TOY_SECONDS, 3).unwrap();
    let run = |seed| {
        let cfg = augmented(seed);
        let mut m = Model::<f32>::new(&cfg.model, 5).unwrap();
        let t = quiet(&mut m, &data, &cfg, None).unwrap();
        (t.steps_csv(), m.params.iter().map(|(_, e)| e.value.clone()).collect::<Vec<_>>())
    };
    let a = run(4);
    assert_eq!(a, run(4));
    assert_ne!(a.0, run(5).0);
    assert!(a.0.lines().count() > 3);
}

#[test]
fn divergence_aborts_with_diagnostic() {
    let data = toy_dataset(4, TOY_SECONDS, 3).unwrap();
    let mut run = toy_run_config(4);
    run.schedule.peak_lr = 1e12;
    run.schedule.rampdown_epochs = 0;
    let mut m = Model::<f32>::new(&run.model, 0).unwrap();
    match quiet(&mut m, &data, &run, None) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("epoch"), "{msg}"),
        other => panic!("expected a numeric abort, got {other:?}"),
    }
}

#[test]
fn data_and_teacher_errors() {
    let run = toy_run_config(2);
    let mut m = Model::<f32>::new(&run.model, 0).unwrap();
    let empty = Dataset::new(vec![], 2).unwrap();
    assert!(matches!(quiet(&mut m, &empty, &run, None), Err(Error::Data(_))));

    let data = toy_dataset(2, TOY_SECONDS, 1).unwrap();
    let mut kd = run.clone();
    kd.train.kd_lambda = 0.1;
    assert!(matches!(quiet(&mut m, &data, &kd, None), Err(Error::Config(_))));

    let partial = TeacherLogits::new(vec!["other".into()], dymn::Tensor::zeros(&[1, 2]).unwrap()).unwrap();
    assert!(matches!(quiet(&mut m, &data, &kd, Some(&partial)), Err(Error::Data(_))));
}

#[test]
fn epoch_callback_sees_every_epoch() {
    let data = toy_dataset(4, TOY_SECONDS, 2).unwrap();
    let run = toy_run_config(3);
    let mut m = Model::<f32>::new(&run.model, 0).unwrap();
    let mut seen = Vec::new();
    let trace = train_loop(&mut m, &data, &run, None, &mut UniformSampler, |_, r| {
        seen.push(r.epoch);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
    assert!(trace.epochs_csv().starts_with("epoch,lr,tau,mean_loss,teacher_deviation\n"));
    assert!(trace.epochs.iter().all(|e| e.tau >= 1.0 && e.mean_loss.is_finite()));
}
