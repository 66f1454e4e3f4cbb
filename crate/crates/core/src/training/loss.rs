//! Distillation loss: a convex mix of label BCE and teacher BCE.

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::gradcheck::{run_case, CheckOutcome};
use crate::tensor::ops::{bce_with_logits, sigmoid};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

fn check_lambda<T: Real>(lambda: f64, z: &Tensor<T>, y: &Tensor<T>, teacher: Option<&Tensor<T>>) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("kd lambda {lambda} outside [0, 1]")));
    }
    if lambda < 1.0 && teacher.is_none() {
        return Err(Error::Config(format!("kd lambda {lambda} < 1 needs teacher logits")));
    }
    if z.shape() != y.shape() || teacher.is_some_and(|t| t.shape() != z.shape()) {
        return shape_err(format!("kd loss shapes differ: student {:?}, labels {:?}", z.shape(), y.shape()));
    }
    Ok(())
}

/// `σ(z_T)`: teacher logits turned into soft targets.
pub fn teacher_targets<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    logits.map(sigmoid)
}

/// `λ·BCE(z, y) + (1 − λ)·BCE(z, t)` with `t` the teacher's soft targets.
/// Both terms are means over batch and classes. At `λ = 1` the teacher is
/// ignored and may be absent.
pub fn kd_loss<T: Real>(tape: &mut Tape<T>, z: Var, y: &Tensor<T>, teacher: Option<&Tensor<T>>, lambda: f64) -> Result<Var> {
    check_lambda(lambda, tape.value(z), y, teacher)?;
    let label = tape.bce_with_logits(z, y)?;
    let Some(t) = teacher.filter(|_| lambda < 1.0) else {
        return Ok(label);
    };
    let soft = tape.bce_with_logits(z, t)?;
    if lambda == 0.0 {
        return Ok(soft);
    }
    let a = tape.scale(label, T::of(lambda));
    let b = tape.scale(soft, T::of(1.0 - lambda));
    tape.add(a, b)
}

/// Value of [`kd_loss`] without recording.
pub fn kd_loss_value<T: Real>(z: &Tensor<T>, y: &Tensor<T>, teacher: Option<&Tensor<T>>, lambda: f64) -> Result<f64> {
    check_lambda(lambda, z, y, teacher)?;
    let label = bce_with_logits(z, y)?.to_f64_lossy();
    match teacher.filter(|_| lambda < 1.0) {
        None => Ok(label),
        Some(t) => Ok(lambda * label + (1.0 - lambda) * bce_with_logits(z, t)?.to_f64_lossy()),
    }
}

/// Gradient checks of the distillation loss.
pub fn loss_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = StdRng::seed_from_u64(seed);
    let z = Tensor::<f64>::uniform(&[4, 5], 3.0, &mut rng)?;
    let y = Tensor::<f64>::uniform(&[4, 5], 1.0, &mut rng)?.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let t = teacher_targets(&Tensor::<f64>::uniform(&[4, 5], 3.0, &mut rng)?);
    let mixed = y.zip_map(&t, |a, b| 0.7 * a + 0.3 * b)?;
    let x = Tensor::<f64>::uniform(&[4, 6], 1.0, &mut rng)?;
    let w = Tensor::<f64>::uniform(&[5, 6], 1.0, &mut rng)?;
    let b = Tensor::<f64>::uniform(&[5], 1.0, &mut rng)?;

    let mut out = Vec::new();
    for lambda in [0.1, 0.0, 1.0] {
        out.push(run_case(
            &format!("kd loss lambda {lambda}"),
            std::slice::from_ref(&z),
            |tp, v| kd_loss(tp, v[0], &y, Some(&t), lambda),
            seed,
        )?);
    }
    out.push(run_case(
        "kd loss soft labels",
        std::slice::from_ref(&z),
        |tp, v| kd_loss(tp, v[0], &mixed, Some(&t), 0.5),
        seed,
    )?);
    out.push(run_case(
        "kd loss through linear head",
        &[x, w, b],
        |tp, v| {
            let z = tp.linear(v[0], v[1], Some(v[2]))?;
            kd_loss(tp, z, &y, Some(&t), 0.1)
        },
        seed,
    )?);
    Ok(out)
}
