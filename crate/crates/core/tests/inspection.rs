use dymn::inspection::{capture_dyrelu_mappings, inspect, InspectionConfig, Method, Metric, Target};
use dymn::network::Model;
use dymn::training::toy::{toy_dataset, toy_run_config, TOY_SECONDS};
use dymn::training::trainer::{dataset_mels, mel_config_for, predict_logits};
use dymn::training::{train_loop, UniformSampler};
use dymn::Tensor;

fn trained(kernels: usize, epochs: usize) -> Model<f32> {
    let data = toy_dataset(32, TOY_SECONDS, 7).unwrap();
    let mut run = toy_run_config(epochs);
    run.model.kernels = kernels;
    let mut model = Model::<f32>::new(&run.model, 1).unwrap();
    train_loop(&mut model, &data, &run, None, &mut UniformSampler, |_, _| Ok(())).unwrap();
    model
}

fn held_out(model: &Model<f32>, per_class: usize) -> (Vec<Tensor<f32>>, Tensor<f32>) {
    let data = toy_dataset(per_class, TOY_SECONDS, 8).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    (dataset_mels(&data, &mel_config_for(model.config())).unwrap(), data.targets(&idx).unwrap())
}

#[test]
fn probes_on_a_trained_model() {
    let model = trained(4, 50);
    let (mels, y) = held_out(&model, 128);
    for (t, m) in [(Target::Ca, Method::ContextShuffle), (Target::DyRelu, Method::ChannelShuffle)] {
        let r = inspect(&model, &mels, &y, &InspectionConfig::new(t, m, 0), Metric::MeanAveragePrecision, 32, 8).unwrap();
        assert!(r.delta() < 0.0, "{t} {m}: {r}");

        let mut id = InspectionConfig::new(t, m, 0);
        id.identity = true;
        let r = inspect(&model, &mels, &y, &id, Metric::MeanAveragePrecision, 32, 2).unwrap();
        assert_eq!(r.delta(), 0.0);
    }

    let caps = capture_dyrelu_mappings(&model, &mels[..96], &[1, 3, 13, 15], 10_000, 0, 32).unwrap();
    let ranges = model.config().dyrelu_ranges();
    for c in &caps {
        assert_eq!(c.pairs.len(), 10_000, "block {}", c.block);
        for p in &c.pairs {
            assert!(p.input.is_finite() && p.output.is_finite());
            let best = p.slopes.iter().zip(&p.intercepts).map(|(a, b)| a * p.input + b).fold(f32::MIN, f32::max);
            assert_eq!(p.output, best);
            for (a, c0) in p.slopes.iter().zip(&ranges.init_a) {
                assert!((*a as f64 - c0).abs() <= ranges.lambda_a + 1e-6);
            }
        }
    }
}

#[test]
fn single_kernel_model_ignores_attention_overrides() {
    let model = trained(1, 6);
    let (mels, y) = held_out(&model, 16);
    let base = predict_logits(&model, &mels, 32).unwrap();
    for m in [Method::UniformAttention, Method::MaxAttention] {
        let cfg = InspectionConfig::new(Target::DyConv, m, 0);
        assert_eq!(dymn::inspection::perturbed_logits(&model, &mels, &cfg, 32).unwrap(), base);
        let r = inspect(&model, &mels, &y, &cfg, Metric::Accuracy, 32, 1).unwrap();
        assert_eq!(r.delta(), 0.0);
    }
}
