use dymn::network::{Model, ModelConfig, Placement};
use dymn::params::ParamKind;
use dymn::Tensor;
use rand::rngs::StdRng;
use rand::SeedableRng;

/// Shape with trailing unit axes removed (1×1 conv and linear agree).
fn canonical(shape: &[usize]) -> Vec<usize> {
    let mut s = shape.to_vec();
    while s.len() > 1 && *s.last().unwrap() == 1 {
        s.pop();
    }
    s
}

#[test]
fn static_shapes_match_reference_table() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/mn_large_shapes.json")).unwrap();
    let table: std::collections::BTreeMap<String, Vec<Vec<usize>>> = serde_json::from_str(&text).unwrap();
    for (alpha, reference) in table {
        let cfg = ModelConfig {
            width_mult: alpha.parse().unwrap(),
            placement: Placement::None,
            ..ModelConfig::default()
        };
        let m = Model::<f32>::new(&cfg, 0).unwrap();
        let ours: Vec<Vec<usize>> = m
            .params
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(_, e)| canonical(e.value.shape()))
            .collect();
        let theirs: Vec<Vec<usize>> = reference.iter().map(|s| canonical(s)).collect();
        assert_eq!(ours, theirs, "alpha {alpha}");
    }
}

fn tiny(placement: Placement) -> ModelConfig {
    ModelConfig {
        width_mult: 0.1,
        n_classes: 5,
        n_mels: 24,
        placement,
        ..ModelConfig::default()
    }
}

fn randomized(cfg: &ModelConfig) -> Model<f64> {
    let mut m = Model::<f64>::new(cfg, 1).unwrap();
    dymn::blocks::checks::randomize_zero_params(&mut m.params, &mut StdRng::seed_from_u64(2)).unwrap();
    m
}

#[test]
fn permuting_the_batch_permutes_logits() {
    let m = randomized(&tiny(Placement::All));
    let x = Tensor::uniform(&[5, 1, 24, 30], 1.0, &mut StdRng::seed_from_u64(3)).unwrap();
    let perm = [3, 0, 4, 1, 2];
    let y = m.predict(&x).unwrap();
    let yp = m.predict(&x.permute_batch(&perm).unwrap()).unwrap();
    assert_eq!(yp.data(), y.permute_batch(&perm).unwrap().data());
}

#[test]
fn identical_inputs_give_identical_rows() {
    let m = randomized(&tiny(Placement::ReplaceSe));
    let a = Tensor::uniform(&[1, 1, 24, 30], 1.0, &mut StdRng::seed_from_u64(4)).unwrap();
    let b = Tensor::uniform(&[1, 1, 24, 30], 1.0, &mut StdRng::seed_from_u64(5)).unwrap();
    let x = Tensor::stack_batch(&[a.clone(), b, a]).unwrap();
    let y = m.predict(&x).unwrap();
    assert_eq!(y.batch_item(0).unwrap().data(), y.batch_item(2).unwrap().data());
    assert_ne!(y.batch_item(0).unwrap().data(), y.batch_item(1).unwrap().data());
}

#[test]
fn default_config_emits_527_logits() {
    let cfg = ModelConfig {
        width_mult: 0.4,
        ..ModelConfig::default()
    };
    let m = Model::<f32>::new(&cfg, 0).unwrap();
    let x = Tensor::zeros(&[1, 1, 128, 32]).unwrap();
    assert_eq!(m.predict(&x).unwrap().shape(), &[1, 527]);
}

#[test]
fn cost_grows_with_width() {
    let count = |a: f64| {
        Model::<f32>::new(
            &ModelConfig {
                width_mult: a,
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap()
        .net
        .param_count()
    };
    let (s, m, l) = (count(0.4), count(1.0), count(2.0));
    assert!(s < m && m < l);
}

#[test]
fn placements_change_only_designated_blocks() {
    for p in [Placement::First5, Placement::Mid5, Placement::Last5, Placement::ReplaceSe] {
        let m = Model::<f32>::new(&tiny(p), 0).unwrap();
        for (i, b) in m.net.blocks.iter().enumerate() {
            assert_eq!(b.context.is_some(), p.is_dynamic(i), "{p} block {}", i + 1);
        }
    }
}
