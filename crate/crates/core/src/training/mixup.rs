//! Mixup over inputs, labels and teacher targets.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// A training batch. `teacher` holds soft targets `σ(z_T)`, so mixing it is
/// the same as mixing the targets the loss sees.
#[derive(Clone, Debug, PartialEq)]
pub struct KdBatch<T: Real = f32> {
    /// Leading axis is the batch.
    pub x: Tensor<T>,
    /// `B × n_classes`, entries in `[0, 1]`.
    pub y: Tensor<T>,
    pub teacher: Option<Tensor<T>>,
}

impl<T: Real> KdBatch<T> {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.len();
        let [yb, c] = self.y.dims2()?;
        if yb != b || self.teacher.as_ref().is_some_and(|t| t.shape() != [b, c]) {
            return shape_err(format!(
                "batch of {b} with labels {:?} and teacher {:?}",
                self.y.shape(),
                self.teacher.as_ref().map(|t| t.shape().to_vec())
            ));
        }
        Ok(())
    }
}

/// Draws `λ ~ Beta(coef, coef)` and folds it to `max(λ, 1 − λ)`.
pub fn draw_lambda<R: Rng + ?Sized>(coef: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(coef, coef).map_err(|e| Error::Config(format!("mixup coefficient {coef}: {e}")))?;
    let l: f64 = beta.sample(rng);
    Ok(l.max(1.0 - l))
}

/// Row-wise `λ_i·a_i + (1 − λ_i)·b_i` along the leading axis.
pub fn mix_rows<T: Real>(a: &Tensor<T>, b: &Tensor<T>, lambdas: &[f64]) -> Result<Tensor<T>> {
    if a.shape() != b.shape() || a.shape()[0] != lambdas.len() {
        return shape_err(format!("mixing {:?} with {:?} under {} weights", a.shape(), b.shape(), lambdas.len()));
    }
    let per = a.numel() / lambdas.len();
    let mut out = a.clone();
    for (i, (o, r)) in out.data_mut().chunks_mut(per).zip(b.data().chunks(per)).enumerate() {
        let l = T::of(lambdas[i]);
        let k = T::of(1.0 - lambdas[i]);
        for (x, &y) in o.iter_mut().zip(r) {
            *x = l * *x + k * y;
        }
    }
    Ok(out)
}

/// Mixes two batches with one weight per row, applied alike to inputs,
/// labels and teacher targets.
pub fn mix<T: Real>(a: &KdBatch<T>, b: &KdBatch<T>, lambdas: &[f64]) -> Result<KdBatch<T>> {
    a.validate()?;
    b.validate()?;
    let teacher = match (&a.teacher, &b.teacher) {
        (Some(ta), Some(tb)) => Some(mix_rows(ta, tb, lambdas)?),
        (None, None) => None,
        _ => return shape_err("only one batch carries teacher targets"),
    };
    Ok(KdBatch {
        x: mix_rows(&a.x, &b.x, lambdas)?,
        y: mix_rows(&a.y, &b.y, lambdas)?,
        teacher,
    })
}

/// Mixes `a` with `b` under folded Beta draws, one per row. Returns the
/// weights used.
pub fn mixup<T: Real, R: Rng + ?Sized>(a: &KdBatch<T>, b: &KdBatch<T>, coef: f64, rng: &mut R) -> Result<(KdBatch<T>, Vec<f64>)> {
    let lambdas = (0..a.len()).map(|_| draw_lambda(coef, rng)).collect::<Result<Vec<_>>>()?;
    Ok((mix(a, b, &lambdas)?, lambdas))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::bce_with_logits;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn batch(seed: u64) -> KdBatch<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        KdBatch {
            x: Tensor::uniform(&[3, 1, 4, 5], 1.0, &mut rng).unwrap(),
            y: Tensor::uniform(&[3, 2], 1.0, &mut rng).unwrap().map(|v| (v > 0.0) as u8 as f64),
            teacher: Some(Tensor::uniform(&[3, 2], 1.0, &mut rng).unwrap().map(|v| 0.5 + 0.5 * v)),
        }
    }

    #[test]
    fn unit_weight_keeps_first_batch() {
        let (a, b) = (batch(1), batch(2));
        assert_eq!(mix(&a, &b, &[1.0; 3]).unwrap(), a);
    }

    #[test]
    fn folded_mean_matches_quadrature() {
        // E[max(λ, 1−λ)] for Beta(a, a), with u = (1−x)^a removing the
        // endpoint singularity on [1/2, 1].
        let a = 0.3f64;
        let upper = 0.5f64.powf(a);
        let simpson = |f: &dyn Fn(f64) -> f64| {
            let n = 20_000;
            let h = upper / n as f64;
            let mut s = f(0.0) + f(upper);
            for i in 1..n {
                s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        };
        let x = |u: f64| 1.0 - u.powf(1.0 / a);
        let num = simpson(&|u| x(u).powf(a));
        let den = simpson(&|u| x(u).powf(a - 1.0));
        let exact = num / den;

        let mut rng = StdRng::seed_from_u64(99);
        let n = 100_000;
        let mc: f64 = (0..n).map(|_| draw_lambda(0.3, &mut rng).unwrap()).sum::<f64>() / n as f64;
        assert!((mc - exact).abs() / exact < 0.01, "mc {mc} exact {exact}");
    }

    #[test]
    fn consistent_teaching() {
        let (a, b) = (batch(3), batch(4));
        let mut rng = StdRng::seed_from_u64(5);
        let (m, lams) = mixup(&a, &b, 0.3, &mut rng).unwrap();
        let z = Tensor::<f64>::uniform(&[3, 2], 2.0, &mut rng).unwrap();
        let by_hand = mix_rows(a.teacher.as_ref().unwrap(), b.teacher.as_ref().unwrap(), &lams).unwrap();
        assert_eq!(
            bce_with_logits(&z, m.teacher.as_ref().unwrap()).unwrap(),
            bce_with_logits(&z, &by_hand).unwrap()
        );
        assert!(lams.iter().all(|&l| (0.5..=1.0).contains(&l)));
    }

    proptest::proptest! {
        #[test]
        fn mixed_labels_stay_in_unit_interval(seed in 0u64..500) {
            let (a, b) = (batch(seed), batch(seed + 1));
            let mut rng = StdRng::seed_from_u64(seed);
            let (m, _) = mixup(&a, &b, 0.3, &mut rng).unwrap();
            proptest::prop_assert!(m.y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            proptest::prop_assert!(m.teacher.unwrap().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
