mod support;

use dymn::blocks::{
    AttentionKind, Block, BlockActivation, BlockSpec, Bound, ConvKind, ForwardCtx, Mode,
};
use dymn::params::ParamStore;
use dymn::tensor::ops::{Activation, Conv2dGeometry, DyReluRanges};
use dymn::tensor::tape::Tape;
use dymn::Tensor;
use rand::rngs::StdRng;
use rand::SeedableRng;
use support::{perturb_norms, read_conv_bn, read_se, ConventionalBlock};

fn spec(stride: usize, c_in: usize, c_exp: usize, c_out: usize, kernel: usize) -> BlockSpec {
    BlockSpec {
        kernel,
        c_in,
        c_exp,
        c_out,
        stride,
        expand: c_exp != c_in,
        attention: AttentionKind::Se,
        activations: [BlockActivation::Hardswish, BlockActivation::Hardswish, BlockActivation::Identity],
        conv_kinds: [ConvKind::Static; 3],
        kernels: 4,
        context_dim: 6,
        se_squeeze: 8,
        dyrelu: DyReluRanges::standard(2),
    }
}

fn dynamic(mut s: BlockSpec) -> BlockSpec {
    s.expand = true;
    s.conv_kinds = [ConvKind::Dynamic; 3];
    s.activations[1] = BlockActivation::DyRelu;
    s.attention = AttentionKind::full_ca();
    s
}

fn run(block: &Block, store: &ParamStore<f64>, x: &Tensor<f64>, mode: Mode) -> Tensor<f64> {
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, store);
    let xv = tape.constant(x.clone());
    let mut ctx = match mode {
        Mode::Train => ForwardCtx::train(7.0),
        Mode::Eval => ForwardCtx::eval(),
    };
    let y = block.forward(&mut tape, xv, &p, &mut ctx).unwrap();
    tape.value(y).clone()
}

fn reference(block: &Block, store: &ParamStore<f64>, k: usize, scale: f64, se: bool, act: Activation) -> ConventionalBlock {
    let s = &block.spec;
    ConventionalBlock {
        expand: s
            .expand
            .then(|| read_conv_bn(store, "b", "expand", k, Conv2dGeometry::pointwise())),
        depthwise: read_conv_bn(
            store,
            "b",
            "depthwise",
            k,
            Conv2dGeometry::same((s.kernel, s.kernel), (s.stride, s.stride), s.c_exp),
        ),
        se: se.then(|| read_se(store, "b")),
        project: read_conv_bn(store, "b", "project", k, Conv2dGeometry::pointwise()),
        act,
        post_depthwise_scale: scale,
        residual: s.use_residual(),
    }
}

#[test]
fn static_configuration_matches_conventional_block_exactly() {
    let cases = [spec(1, 8, 24, 8, 3), spec(2, 8, 24, 16, 5), spec(1, 8, 8, 8, 3)];
    for (i, s) in cases.iter().enumerate() {
        let mut rng = StdRng::seed_from_u64(i as u64);
        let mut store = ParamStore::<f64>::new();
        let block = Block::register(&mut store, "b", s, &mut rng).unwrap();
        perturb_norms(&mut store, 40 + i as u64);
        let x = Tensor::uniform(&[3, s.c_in, 9, 7], 1.0, &mut rng).unwrap();
        let r = reference(&block, &store, 1, 1.0, true, Activation::Hardswish);
        for (mode, train) in [(Mode::Eval, false), (Mode::Train, true)] {
            let y = run(&block, &store, &x, mode);
            assert_eq!(y.data(), r.forward(&x, train).data(), "case {i} {mode:?}");
        }
    }
}

#[test]
fn zero_initialized_dynamic_block_is_static_with_quarter_scaling() {
    for (i, s) in [spec(1, 8, 24, 8, 3), spec(2, 8, 24, 16, 5), spec(1, 8, 8, 8, 3)].into_iter().enumerate() {
        let s = dynamic(s);
        let mut rng = StdRng::seed_from_u64(10 + i as u64);
        let mut store = ParamStore::<f64>::new();
        let block = Block::register(&mut store, "b", &s, &mut rng).unwrap();
        perturb_norms(&mut store, 50 + i as u64);
        let x = Tensor::uniform(&[2, s.c_in, 8, 11], 1.0, &mut rng).unwrap();
        let r = reference(&block, &store, 4, 0.25, false, Activation::Hardswish);
        let y = run(&block, &store, &x, Mode::Eval);
        let expected = forward_mixed(&r, &x);
        assert!(y.max_abs_diff(&expected).unwrap() < 1e-12, "case {i}");
    }
}

/// Conventional forward with hardswish after expansion and relu after the
/// depthwise conv.
fn forward_mixed(r: &ConventionalBlock, x: &Tensor<f64>) -> Tensor<f64> {
    use dymn::tensor::ops::{activation, batch_norm, conv2d_forward};
    let cb = |h: &Tensor<f64>, c: &support::ConvBn| {
        let y = conv2d_forward(h, &c.weight, None, &c.geometry).unwrap();
        batch_norm(&y, &c.mean, &c.var, &c.gamma, &c.beta, 1e-5).unwrap()
    };
    let mut h = x.clone();
    if let Some(e) = &r.expand {
        h = activation(&cb(&h, e), Activation::Hardswish);
    }
    h = activation(&cb(&h, &r.depthwise), Activation::Relu).scale(r.post_depthwise_scale);
    h = cb(&h, &r.project);
    if r.residual {
        h.add_assign(x).unwrap();
    }
    h
}

#[test]
fn batch_permutation_permutes_outputs() {
    let s = dynamic(spec(1, 8, 16, 8, 3));
    let mut rng = StdRng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let block = Block::register(&mut store, "b", &s, &mut rng).unwrap();
    dymn::blocks::checks::randomize_zero_params(&mut store, &mut rng).unwrap();
    perturb_norms(&mut store, 4);
    let x = Tensor::uniform(&[4, 8, 6, 5], 1.0, &mut rng).unwrap();
    let perm = [2, 0, 3, 1];
    let y = run(&block, &store, &x, Mode::Eval);
    let yp = run(&block, &store, &x.permute_batch(&perm).unwrap(), Mode::Eval);
    assert_eq!(yp.data(), y.permute_batch(&perm).unwrap().data());
}

#[test]
fn dyrelu_after_projection_precedes_residual() {
    let mut s = dynamic(spec(1, 8, 16, 8, 3));
    s.activations = [BlockActivation::Hardswish, BlockActivation::Hardswish, BlockActivation::DyRelu];
    s.attention = AttentionKind::None;
    s.conv_kinds = [ConvKind::Static; 3];
    let mut rng = StdRng::seed_from_u64(8);
    let mut store = ParamStore::<f64>::new();
    let block = Block::register(&mut store, "b", &s, &mut rng).unwrap();
    let x = Tensor::uniform(&[2, 8, 5, 5], 1.0, &mut rng).unwrap();
    let y = run(&block, &store, &x, Mode::Eval);
    let mut r = reference(&block, &store, 1, 1.0, false, Activation::Hardswish);
    r.residual = false;
    let mut expected = r.forward(&x, false).map(|v| v.max(0.0));
    expected.add_assign(&x).unwrap();
    assert!(y.max_abs_diff(&expected).unwrap() < 1e-12);
    // an activation after the residual add could not produce negatives
    assert!(y.data().iter().any(|&v| v < 0.0));
}

#[test]
fn stride_two_rounds_odd_extents_up() {
    let s = dynamic(spec(2, 8, 16, 16, 5));
    let mut rng = StdRng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let block = Block::register(&mut store, "b", &s, &mut rng).unwrap();
    let x = Tensor::uniform(&[1, 8, 9, 13], 1.0, &mut rng).unwrap();
    assert_eq!(run(&block, &store, &x, Mode::Train).shape(), &[1, 16, 5, 7]);
}

#[test]
fn dynamic_parameter_count_decomposes() {
    let st = {
        let mut s = spec(1, 16, 64, 24, 3);
        s.attention = AttentionKind::None;
        s
    };
    let dy = dynamic(st.clone());
    let (k, h) = (dy.kernels, dy.context_dim);
    let mut rng = StdRng::seed_from_u64(0);
    let mut s1 = ParamStore::<f32>::new();
    let mut s2 = ParamStore::<f32>::new();
    let sb = Block::register(&mut s1, "b", &st, &mut rng).unwrap();
    let db = Block::register(&mut s2, "b", &dy, &mut rng).unwrap();
    let conv_static = 16 * 64 + 64 * 9 + 64 * 24;
    let bn = 2 * (64 + 64 + 24);
    assert_eq!(sb.param_count(), conv_static + bn);
    let predictors = 3 * (k * h + k) + (64 * 2 * 2) * (h + 1);
    let cgm = 16 * h + 2 * h;
    let ca = 2 * (64 * h + 64);
    assert_eq!(db.param_count(), k * conv_static + bn + predictors + cgm + ca);
    let stored: usize = s2
        .iter()
        .filter(|(_, e)| e.kind == dymn::params::ParamKind::Trainable)
        .map(|(_, e)| e.value.numel())
        .sum();
    assert_eq!(stored, db.param_count());
}
