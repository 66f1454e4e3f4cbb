//! Central-difference gradient checking (64-bit).

use rand::rngs::StdRng;
use rand::SeedableRng;

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat coordinate where the maximum occurred.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares `analytic` against `(f(θ+h·e_i) − f(θ−h·e_i)) / 2h` for every
/// coordinate `i`.
pub fn finite_diff_gradcheck(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    analytic: &[f64],
    h: f64,
) -> Result<GradCheckReport> {
    if theta.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} analytic gradients",
            theta.len(),
            analytic.len()
        )));
    }
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: theta.len(),
    };
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let up = f(&probe)?;
        probe[i] = theta[i] - h;
        let down = f(&probe)?;
        probe[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "objective not finite at coordinate {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_err || i == 0 {
            report = GradCheckReport {
                max_rel_err: err,
                worst: i,
                analytic: analytic[i],
                numeric,
                checked: theta.len(),
            };
        }
    }
    Ok(report)
}

/// Scalar objective `Σ out ⊙ R` with fixed pseudo-random weights `R`, so
/// every output element contributes with a distinct sign and scale.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = StdRng::seed_from_u64(seed ^ 0x5eed);
    let weights = Tensor::<f64>::uniform(&shape, 1.0, &mut rng)?;
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Initial step of the extrapolated difference used by [`check_graph`].
pub const GRADCHECK_STEP: f64 = 1e-3;
/// Tolerance used by every suite.
pub const GRADCHECK_TOL: f64 = 1e-6;

/// Evaluates the weighted-sum objective and the branch signature of the
/// forward pass at the flattened inputs.
fn eval_graph(
    inputs: &[Tensor<f64>],
    flat: &[f64],
    build: &impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    seed: u64,
) -> Result<(f64, u64)> {
    let mut tape = Tape::new();
    let mut off = 0;
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let data = flat[off..off + t.numel()].to_vec();
            off += t.numel();
            tape.input(Tensor::from_parts(t.shape().to_vec(), data))
        })
        .collect();
    let out = build(&mut tape, &vars)?;
    let loss = weighted_sum(&mut tape, out, seed)?;
    let v = tape.value(loss).data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric("objective not finite".into()));
    }
    Ok((v, tape.branch_signature()))
}

/// Checks the gradient of a graph with respect to all of its inputs.
///
/// `build` records the graph on a fresh tape given one `Var` per input. Each
/// coordinate uses the Richardson-extrapolated central difference
/// `(8·(f(θ+h) − f(θ−h)) − (f(θ+2h) − f(θ−2h))) / 12h`. The step starts at
/// `h` and shrinks by 4 whenever a probe changes the branch signature, so no
/// quotient straddles a relu/hardswish kink or a Dy-ReLU tie.
pub fn check_graph(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = weighted_sum(&mut tape, out, seed)?;
    let base_sig = tape.branch_signature();
    let grads = tape.backward(loss)?;
    let mut theta = Vec::new();
    let mut analytic = Vec::new();
    for (t, &v) in inputs.iter().zip(&vars) {
        theta.extend_from_slice(t.data());
        match grads.wrt(v) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: theta.len(),
    };
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let mut step = h;
        let numeric = loop {
            let mut vals = [0.0; 4];
            let mut same = true;
            for (slot, k) in vals.iter_mut().zip([1.0, -1.0, 2.0, -2.0]) {
                probe[i] = theta[i] + k * step;
                let (v, sig) = eval_graph(inputs, &probe, &build, seed)?;
                *slot = v;
                same &= sig == base_sig;
            }
            probe[i] = theta[i];
            if same {
                break (8.0 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12.0 * step);
            }
            step /= 4.0;
            if step < 1e-9 {
                return Err(Error::Numeric(format!(
                    "coordinate {i} sits on a non-differentiable point"
                )));
            }
        };
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_err || i == 0 {
            report = GradCheckReport {
                max_rel_err: err,
                worst: i,
                analytic: analytic[i],
                numeric,
                checked: theta.len(),
            };
        }
    }
    Ok(report)
}

/// One named entry of a gradient-check suite.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Runs [`check_graph`] with the suite step and tolerance.
pub fn run_case(
    name: &str,
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    seed: u64,
) -> Result<CheckOutcome> {
    let r = check_graph(inputs, build, GRADCHECK_STEP, seed)?;
    Ok(CheckOutcome {
        name: name.to_string(),
        max_rel_err: r.max_rel_err,
        passed: r.max_rel_err < GRADCHECK_TOL,
    })
}

/// Uniform values in `[-1, 1)` pushed at least `gap` away from zero.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut StdRng) -> Result<Tensor<f64>> {
    let t = Tensor::<f64>::uniform(shape, 1.0, rng)?;
    Ok(t.map(|v| v.signum() * (gap + v.abs())))
}

/// Gradient checks for every tensor-core op on small random shapes.
pub fn ops_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    use super::ops::{Activation, Conv2dGeometry, DyReluRanges, PoolGeometry, SpatialAxis};
    use rand::RngExt;

    let mut rng = StdRng::seed_from_u64(seed);
    let mut u = |shape: &[usize]| Tensor::<f64>::uniform(shape, 1.0, &mut rng);
    let mut out = Vec::new();

    out.push(run_case(
        "conv2d 3x3 + bias",
        &[u(&[2, 3, 5, 6])?, u(&[4, 3, 3, 3])?, u(&[4])?],
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), Conv2dGeometry::same((3, 3), (1, 1), 1)),
        seed,
    )?);
    out.push(run_case(
        "conv2d grouped stride 2",
        &[u(&[2, 4, 5, 5])?, u(&[4, 2, 3, 3])?],
        |t, v| t.conv2d(v[0], v[1], None, Conv2dGeometry::same((3, 3), (2, 2), 2)),
        seed,
    )?);
    out.push(run_case(
        "conv2d depthwise 5x5 stride 2",
        &[u(&[1, 3, 6, 5])?, u(&[3, 1, 5, 5])?],
        |t, v| t.conv2d(v[0], v[1], None, Conv2dGeometry::same((5, 5), (2, 2), 3)),
        seed,
    )?);
    out.push(run_case(
        "conv2d per-sample kernels",
        &[u(&[2, 2, 4, 4])?, u(&[6, 2, 3, 3])?, u(&[2, 3])?],
        |t, v| t.conv2d_per_sample(v[0], v[1], Some(v[2]), Conv2dGeometry::same((3, 3), (1, 1), 1)),
        seed,
    )?);
    out.push(run_case(
        "mix kernels",
        &[u(&[2, 3])?, u(&[6, 1, 3, 3])?],
        |t, v| t.mix_kernels(v[0], v[1]),
        seed,
    )?);
    out.push(run_case(
        "batch norm (batch statistics)",
        &[u(&[3, 2, 3, 4])?, u(&[2])?, u(&[2])?],
        |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
        seed,
    )?);
    out.push(run_case(
        "batch norm (running statistics)",
        &[u(&[2, 3, 2, 2])?, u(&[3])?, u(&[3])?],
        |t, v| t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5),
        seed,
    )?);
    let relu_in = away_from_zero(&[2, 3, 4, 4], 0.05, &mut rng)?;
    out.push(run_case(
        "relu",
        &[relu_in],
        |t, v| Ok(t.activation(v[0], Activation::Relu)),
        seed,
    )?);
    let hs_in = Tensor::<f64>::from_fn(&[2, 3, 4, 4], |_| loop {
        let x: f64 = rng.random_range(-5.0..5.0);
        if (x.abs() - 3.0).abs() > 0.05 {
            break x;
        }
    })?;
    out.push(run_case(
        "hardswish",
        &[hs_in],
        |t, v| Ok(t.activation(v[0], Activation::Hardswish)),
        seed,
    )?);
    let mut u = |shape: &[usize]| Tensor::<f64>::uniform(shape, 1.0, &mut rng);
    out.push(run_case(
        "sigmoid",
        &[u(&[2, 3, 4])?.map(|v| 3.0 * v)],
        |t, v| Ok(t.activation(v[0], Activation::Sigmoid)),
        seed,
    )?);
    out.push(run_case(
        "avg pool 3x3 stride 2",
        &[u(&[2, 2, 5, 6])?],
        |t, v| t.avg_pool2d(v[0], PoolGeometry::square(3, 2)),
        seed,
    )?);
    out.push(run_case(
        "avg pool along sequence",
        &[u(&[2, 3, 6, 1])?],
        |t, v| {
            t.avg_pool2d(
                v[0],
                PoolGeometry {
                    kernel: (3, 1),
                    stride: (2, 1),
                    padding: (1, 0),
                },
            )
        },
        seed,
    )?);
    out.push(run_case(
        "axis pool over time",
        &[u(&[2, 3, 4, 5])?],
        |t, v| t.axis_pool(v[0], SpatialAxis::Time),
        seed,
    )?);
    out.push(run_case(
        "axis pool over frequency",
        &[u(&[2, 3, 4, 5])?],
        |t, v| t.axis_pool(v[0], SpatialAxis::Frequency),
        seed,
    )?);
    out.push(run_case(
        "global average pool",
        &[u(&[2, 3, 4, 5])?],
        |t, v| t.global_avg_pool(v[0]),
        seed,
    )?);
    out.push(run_case(
        "linear + bias",
        &[u(&[2, 3, 5])?, u(&[4, 5])?, u(&[4])?],
        |t, v| t.linear(v[0], v[1], Some(v[2])),
        seed,
    )?);
    out.push(run_case(
        "concat + slice",
        &[u(&[2, 3, 4, 1])?, u(&[2, 3, 2, 1])?],
        |t, v| {
            let c = t.concat(&[v[0], v[1]], 2)?;
            t.slice(c, 2, 1, 4)
        },
        seed,
    )?);
    out.push(run_case(
        "softmax temperature 0.7",
        &[u(&[3, 4])?],
        |t, v| t.softmax_temperature(v[0], 0.7),
        seed,
    )?);
    out.push(run_case(
        "softmax temperature 5",
        &[u(&[3, 4])?],
        |t, v| t.softmax_temperature(v[0], 5.0),
        seed,
    )?);
    out.push(run_case(
        "dyrelu coefficient normalization",
        &[u(&[2, 12])?],
        |t, v| t.dyrelu_coefficients(v[0], &DyReluRanges::standard(2)),
        seed,
    )?);
    let x = u(&[2, 3, 3, 4])?;
    let coef = u(&[2, 12])?;
    out.push(run_case(
        "dyrelu max of mappings",
        &[x, coef],
        |t, v| t.dyrelu_apply(v[0], v[1], 2),
        seed,
    )?);
    out.push(run_case(
        "coordinate scaling",
        &[u(&[2, 2, 3, 4])?, u(&[2, 2, 3, 1])?, u(&[2, 2, 4, 1])?],
        |t, v| t.coord_scale(v[0], Some(v[1]), Some(v[2])),
        seed,
    )?);
    out.push(run_case(
        "channel scaling",
        &[u(&[2, 3, 2, 2])?, u(&[2, 3])?],
        |t, v| t.channel_scale(v[0], v[1]),
        seed,
    )?);
    out.push(run_case(
        "reshape, add, mul, scale",
        &[u(&[2, 6])?, u(&[3, 4])?],
        |t, v| {
            let r = t.reshape(v[0], &[3, 4])?;
            let s = t.add(r, v[1])?;
            let m = t.mul(s, v[1])?;
            Ok(t.scale(m, 1.7))
        },
        seed,
    )?);
    out.push(run_case(
        "dropout (fixed mask)",
        &[u(&[4, 5])?],
        |t, v| {
            let mut r = StdRng::seed_from_u64(seed);
            t.dropout(v[0], 0.3, &mut r)
        },
        seed,
    )?);
    let target = Tensor::<f64>::uniform(&[3, 4], 0.5, &mut rng)?.map(|v| v + 0.5);
    out.push(run_case(
        "bce with logits",
        &[Tensor::<f64>::uniform(&[3, 4], 4.0, &mut rng)?],
        move |t, v| t.bce_with_logits(v[0], &target),
        seed,
    )?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::{sigmoid, Activation};

    #[test]
    fn square_at_three() {
        let r = finite_diff_gradcheck(|t| Ok(t[0] * t[0]), &[3.0], &[6.0], 1e-5).unwrap();
        assert!((r.numeric - 6.0).abs() < 1e-6);
        assert!(r.max_rel_err < 1e-6);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let r = finite_diff_gradcheck(|t| Ok(sigmoid(t[0])), &[0.0], &[0.25], 1e-5).unwrap();
        assert!((r.numeric - 0.25).abs() < 1e-6);
    }

    #[test]
    fn non_finite_objective_is_numeric_error() {
        let r = finite_diff_gradcheck(|t| Ok(t[0].ln()), &[0.0], &[1.0], 1e-3);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let r = finite_diff_gradcheck(|t| Ok(t[0] * t[0]), &[3.0], &[6.5], 1e-5).unwrap();
        assert!(r.max_rel_err > 1e-2);
    }

    #[test]
    fn graph_check_sigmoid() {
        let x = Tensor::new(vec![3], vec![-0.4, 0.1, 0.9]).unwrap();
        let r = check_graph(&[x], |t, v| Ok(t.activation(v[0], Activation::Sigmoid)), 1e-3, 1).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn every_op_passes() {
        for case in ops_suite(7).unwrap() {
            eprintln!("{:<36} {:e}", case.name, case.max_rel_err);
            assert!(case.passed, "{} rel err {:e}", case.name, case.max_rel_err);
        }
    }
}
