//! Gradient checks of the dynamic components and whole blocks.

use rand::rngs::StdRng;
use rand::SeedableRng;

use super::attention::CoordAttention;
use super::context::ContextModule;
use super::dyconv::{ConvShape, ConvSlot};
use super::dyrelu::DyRelu;
use super::{
    trainable_tensors, AttentionKind, Block, BlockActivation, BlockSpec, Bound, ConvKind, ForwardCtx, Mode,
};
use crate::error::Result;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::gradcheck::{run_case, CheckOutcome};
use crate::tensor::ops::DyReluRanges;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Replaces all-zero trainable tensors (predictor heads, CA linears) with
/// random values so their gradients are exercised.
pub fn randomize_zero_params(store: &mut ParamStore<f64>, rng: &mut StdRng) -> Result<()> {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, e)| e.kind == ParamKind::Trainable && e.value.data().iter().all(|&v| v == 0.0))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::uniform(&shape, 0.5, rng)?)?;
    }
    Ok(())
}

fn ctx_for(mode: Mode) -> ForwardCtx<'static, f64> {
    match mode {
        Mode::Train => ForwardCtx::train(2.0),
        Mode::Eval => ForwardCtx::eval(),
    }
}

fn inputs_with(x: Tensor<f64>, store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    let mut v = vec![x];
    v.extend(trainable_tensors(store));
    v
}

/// Small block spec used by the checks.
pub fn check_spec(stride: usize, dynamic: bool) -> BlockSpec {
    let kind = if dynamic { ConvKind::Dynamic } else { ConvKind::Static };
    BlockSpec {
        kernel: 3,
        c_in: 4,
        c_exp: 8,
        c_out: 4,
        stride,
        expand: true,
        attention: if dynamic { AttentionKind::full_ca() } else { AttentionKind::Se },
        activations: if dynamic {
            [BlockActivation::Hardswish, BlockActivation::DyRelu, BlockActivation::Identity]
        } else {
            [BlockActivation::Relu, BlockActivation::Relu, BlockActivation::Identity]
        },
        conv_kinds: [kind; 3],
        kernels: 3,
        context_dim: 4,
        se_squeeze: 8,
        dyrelu: DyReluRanges::standard(2),
    }
}

fn block_case(name: &str, spec: &BlockSpec, mode: Mode, seed: u64) -> Result<CheckOutcome> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let block = Block::register(&mut store, "b", spec, &mut rng)?;
    randomize_zero_params(&mut store, &mut rng)?;
    // running statistics away from the identity so eval mode is non-trivial
    for (id, e) in store.iter().map(|(id, e)| (id, e.clone())).collect::<Vec<_>>() {
        if e.kind == ParamKind::Buffer && e.name.ends_with("running_var") {
            store.set(id, e.value.map(|_| 1.7))?;
        }
    }
    let x = Tensor::uniform(&[2, spec.c_in, 6, 5], 1.0, &mut rng)?;
    let inputs = inputs_with(x, &store);
    run_case(
        name,
        &inputs,
        |t: &mut Tape<f64>, v: &[Var]| {
            let p = Bound::from_vars(&store, &v[1..])?;
            let mut ctx = ctx_for(mode);
            block.forward(t, v[0], &p, &mut ctx)
        },
        seed,
    )
}

/// Every component check plus whole blocks in training and evaluation mode.
pub fn blocks_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();

    {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let cgm = ContextModule::register(&mut store, "cgm", 3, 4, &mut rng)?;
        let x = Tensor::uniform(&[2, 3, 5, 6], 1.0, &mut rng)?;
        out.push(run_case(
            "context generation",
            &inputs_with(x, &store),
            |t, v| {
                let p = Bound::from_vars(&store, &v[1..])?;
                let c = cgm.forward(t, v[0], &p, &mut ForwardCtx::train(1.0))?;
                let [b, h] = t.value(c.pooled).dims2()?;
                let pooled = t.reshape(c.pooled, &[b, h, 1, 1])?;
                t.concat(&[c.time, c.freq, pooled], 2)
            },
            seed,
        )?);
    }

    {
        let mut rng = StdRng::seed_from_u64(seed + 1);
        let mut store = ParamStore::<f64>::new();
        let cgm = ContextModule::register(&mut store, "cgm", 4, 4, &mut rng)?;
        let shape = ConvShape {
            c_in: 4,
            c_out: 4,
            kernel: 3,
            stride: 2,
            groups: 2,
            bias: true,
        };
        let conv = ConvSlot::register(&mut store, "dc", ConvKind::Dynamic, shape, 3, 4, &mut rng)?;
        randomize_zero_params(&mut store, &mut rng)?;
        let x = Tensor::uniform(&[2, 4, 5, 6], 1.0, &mut rng)?;
        out.push(run_case(
            "dynamic convolution",
            &inputs_with(x, &store),
            |t, v| {
                let p = Bound::from_vars(&store, &v[1..])?;
                let mut ctx = ForwardCtx::train(3.0);
                let c = cgm.forward(t, v[0], &p, &mut ctx)?;
                conv.forward(t, v[0], Some(&c), &p, &mut ctx, 1)
            },
            seed,
        )?);
    }

    {
        let mut rng = StdRng::seed_from_u64(seed + 2);
        let mut store = ParamStore::<f64>::new();
        let cgm = ContextModule::register(&mut store, "cgm", 3, 4, &mut rng)?;
        let dr = DyRelu::register(&mut store, "dr", 3, 4, DyReluRanges::standard(2))?;
        randomize_zero_params(&mut store, &mut rng)?;
        let x = Tensor::uniform(&[2, 3, 4, 5], 1.0, &mut rng)?;
        out.push(run_case(
            "dynamic relu",
            &inputs_with(x, &store),
            |t, v| {
                let p = Bound::from_vars(&store, &v[1..])?;
                let mut ctx = ForwardCtx::train(1.0);
                let c = cgm.forward(t, v[0], &p, &mut ctx)?;
                dr.forward(t, v[0], &c, &p, &mut ctx, 1)
            },
            seed,
        )?);
    }

    for stride in [1, 2] {
        let mut rng = StdRng::seed_from_u64(seed + 3 + stride as u64);
        let mut store = ParamStore::<f64>::new();
        let cgm = ContextModule::register(&mut store, "cgm", 3, 4, &mut rng)?;
        let ca = CoordAttention::register(&mut store, "ca", 5, 4, stride, true, true)?;
        randomize_zero_params(&mut store, &mut rng)?;
        let x = Tensor::uniform(&[2, 3, 7, 6], 1.0, &mut rng)?;
        let (fo, to) = if stride == 2 { (4, 3) } else { (7, 6) };
        let hmap = Tensor::uniform(&[2, 5, fo, to], 1.0, &mut rng)?;
        let mut inputs = vec![x, hmap];
        inputs.extend(trainable_tensors(&store));
        out.push(run_case(
            &format!("coordinate attention stride {stride}"),
            &inputs,
            |t, v| {
                let p = Bound::from_vars(&store, &v[2..])?;
                let mut ctx = ForwardCtx::train(1.0);
                let c = cgm.forward(t, v[0], &p, &mut ctx)?;
                ca.forward(t, v[1], &c, &p, &mut ctx)
            },
            seed,
        )?);
    }

    out.push(block_case("dynamic block stride 1 (train)", &check_spec(1, true), Mode::Train, seed + 10)?);
    out.push(block_case("dynamic block stride 1 (eval)", &check_spec(1, true), Mode::Eval, seed + 11)?);
    out.push(block_case("dynamic block stride 2 (train)", &check_spec(2, true), Mode::Train, seed + 12)?);

    let mut pos3 = check_spec(2, true);
    pos3.kernel = 5;
    pos3.activations = [BlockActivation::DyRelu, BlockActivation::Relu, BlockActivation::DyRelu];
    out.push(block_case("dynamic block, Dy-ReLU after projection", &pos3, Mode::Train, seed + 13)?);

    out.push(block_case("static block with SE", &check_spec(1, false), Mode::Train, seed + 14)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::GRADCHECK_TOL;

    #[test]
    fn every_component_passes() {
        for c in blocks_suite(7).unwrap() {
            println!("{:<45} {:.3e}", c.name, c.max_rel_err);
            assert!(c.passed, "{} failed with {:e}", c.name, c.max_rel_err);
            assert!(c.max_rel_err < GRADCHECK_TOL);
        }
    }
}
