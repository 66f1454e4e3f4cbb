//! Helpers shared by integration tests.
#![allow(dead_code)]

use dymn::params::ParamStore;
use dymn::tensor::ops::{
    activation, batch_norm, batch_norm_train, channel_scale, conv2d_forward, global_avg_pool, linear, sigmoid,
    Activation, Conv2dGeometry,
};
use dymn::Tensor;

/// Conv + batch-norm weights of one position.
pub struct ConvBn {
    pub weight: Tensor<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub geometry: Conv2dGeometry,
}

pub struct SeWeights {
    pub w1: Tensor<f64>,
    pub b1: Tensor<f64>,
    pub w2: Tensor<f64>,
    pub b2: Tensor<f64>,
}

/// A conventional MobileNetV3 inverted residual block, wired by hand from
/// the raw kernels.
pub struct ConventionalBlock {
    pub expand: Option<ConvBn>,
    pub depthwise: ConvBn,
    pub se: Option<SeWeights>,
    pub project: ConvBn,
    pub act: Activation,
    /// Constant factor applied after the depthwise activation.
    pub post_depthwise_scale: f64,
    pub residual: bool,
}

fn conv_bn(x: &Tensor<f64>, c: &ConvBn, train: bool) -> Tensor<f64> {
    let y = conv2d_forward(x, &c.weight, None, &c.geometry).unwrap();
    if train {
        batch_norm_train(&y, &c.gamma, &c.beta, 1e-5).unwrap().0
    } else {
        batch_norm(&y, &c.mean, &c.var, &c.gamma, &c.beta, 1e-5).unwrap()
    }
}

impl ConventionalBlock {
    pub fn forward(&self, x: &Tensor<f64>, train: bool) -> Tensor<f64> {
        let mut h = x.clone();
        if let Some(e) = &self.expand {
            h = activation(&conv_bn(&h, e, train), self.act);
        }
        h = activation(&conv_bn(&h, &self.depthwise, train), self.act);
        if let Some(se) = &self.se {
            let s = global_avg_pool(&h).unwrap();
            let s = linear(&s, &se.w1, Some(&se.b1)).unwrap().map(|v| v.max(0.0));
            let s = linear(&s, &se.w2, Some(&se.b2)).unwrap().map(sigmoid);
            h = channel_scale(&h, &s).unwrap();
        }
        if self.post_depthwise_scale != 1.0 {
            h = h.scale(self.post_depthwise_scale);
        }
        h = conv_bn(&h, &self.project, train);
        if self.residual {
            h.add_assign(x).unwrap();
        }
        h
    }
}

fn get(store: &ParamStore<f64>, name: &str) -> Tensor<f64> {
    store.get(store.id(name).unwrap_or_else(|| panic!("missing {name}"))).clone()
}

/// Mean over the `K` stacked kernels of a `(K·C_out) × …` tensor.
pub fn mean_kernel(w: &Tensor<f64>, k: usize) -> Tensor<f64> {
    let per = w.numel() / k;
    let mut shape = w.shape().to_vec();
    shape[0] /= k;
    Tensor::from_fn(&shape, |i| (0..k).map(|j| w.data()[j * per + i]).sum::<f64>() / k as f64).unwrap()
}

/// Reads conv/BN weights stored under `{prefix}.{name}` and
/// `{prefix}.{name}_bn`; stacked dynamic kernels are averaged.
pub fn read_conv_bn(store: &ParamStore<f64>, prefix: &str, name: &str, k: usize, geometry: Conv2dGeometry) -> ConvBn {
    let w = get(store, &format!("{prefix}.{name}.weight"));
    let weight = if k > 1 { mean_kernel(&w, k) } else { w };
    let bn = |field: &str| get(store, &format!("{prefix}.{name}_bn.{field}")).into_data();
    ConvBn {
        weight,
        gamma: bn("gamma"),
        beta: bn("beta"),
        mean: bn("running_mean"),
        var: bn("running_var"),
        geometry,
    }
}

pub fn read_se(store: &ParamStore<f64>, prefix: &str) -> SeWeights {
    SeWeights {
        w1: get(store, &format!("{prefix}.se.fc1.weight")),
        b1: get(store, &format!("{prefix}.se.fc1.bias")),
        w2: get(store, &format!("{prefix}.se.fc2.weight")),
        b2: get(store, &format!("{prefix}.se.fc2.bias")),
    }
}

/// Gives running statistics and BN affine parameters non-trivial values.
pub fn perturb_norms(store: &mut ParamStore<f64>, seed: u64) {
    use rand::rngs::StdRng;
    use rand::{RngExt, SeedableRng};
    let mut rng = StdRng::seed_from_u64(seed);
    let ids: Vec<_> = store.iter().map(|(id, e)| (id, e.name.clone())).collect();
    for (id, name) in ids {
        let t = store.get_mut(id);
        if name.ends_with("running_var") || name.ends_with("gamma") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        } else if name.ends_with("running_mean") || name.ends_with("beta") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
}
