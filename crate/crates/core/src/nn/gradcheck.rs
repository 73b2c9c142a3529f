//! Central finite-difference checks of every backward pass, in double
//! precision, on randomized small shapes drawn from a seed.
//!
//! Layer checks use the scalar probe `L = Σ y·r` for a random `r`, so the
//! upstream gradient is `r`. Inputs of ReLU are kept away from 0 and max-pool
//! inputs are spaced apart, keeping every perturbation on one side of a kink.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::layers;
use crate::nn::tensor::Tensor;
use crate::nn::unet::{UNet, UNetConfig};

/// Step for layer checks.
pub const LAYER_STEP: f64 = 1e-4;
/// Step for the end-to-end check; smaller so ReLU kinks are rarely straddled.
pub const NETWORK_STEP: f64 = 1e-7;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_gradient(x: &mut [f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(x);
        x[i] = orig - step;
        let fm = f(x);
        x[i] = orig;
        g.push((fp - fm) / (2.0 * step));
    }
    g
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with_data(t: &Tensor<f64>, d: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(t.shape(), d.to_vec()).expect("same size")
}

/// Relative error of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub rel_error: f64,
}

fn worst(name: &'static str, errs: &[f64]) -> CheckResult {
    CheckResult {
        name,
        rel_error: errs.iter().copied().fold(0.0, f64::max),
    }
}

pub fn check_conv2d(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=2);
    let ci = rng.random_range(1..=3);
    let co = rng.random_range(1..=3);
    let h = rng.random_range(1..=5);
    let w = rng.random_range(1..=5);
    let k = if rng.random_bool(0.75) { 3 } else { 1 };
    let x = rand_tensor(&mut rng, [n, ci, h, w]);
    let wt = rand_tensor(&mut rng, [co, ci, k, k]);
    let b = rand_tensor(&mut rng, [1, 1, 1, co]);
    let r = rand_tensor(&mut rng, [n, co, h, w]);
    let g = layers::conv2d_backward(&x, &wt, &b, &r, true).expect("valid shapes");
    let probe = |x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>| dot(&layers::conv2d(x, wt, b).expect("valid"), &r);
    let mut xd = x.data().to_vec();
    let nx = numeric_gradient(&mut xd, LAYER_STEP, |d| probe(&with_data(&x, d), &wt, &b));
    let mut wd = wt.data().to_vec();
    let nw = numeric_gradient(&mut wd, LAYER_STEP, |d| probe(&x, &with_data(&wt, d), &b));
    let mut bd = b.data().to_vec();
    let nb = numeric_gradient(&mut bd, LAYER_STEP, |d| probe(&x, &wt, &with_data(&b, d)));
    worst(
        "conv2d",
        &[
            relative_error(g.dx.expect("requested").data(), &nx),
            relative_error(g.dweight.data(), &nw),
            relative_error(g.dbias.data(), &nb),
        ],
    )
}

pub fn check_relu(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=5), rng.random_range(1..=5)];
    let len: usize = shape.iter().product();
    let xv: Vec<f64> = (0..len)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let x = Tensor::from_vec(shape, xv).expect("sized");
    let r = rand_tensor(&mut rng, shape);
    let y = layers::relu(&x);
    let dx = layers::relu_backward(&y, &r).expect("same shape");
    let mut xd = x.data().to_vec();
    let nx = numeric_gradient(&mut xd, LAYER_STEP, |d| dot(&layers::relu(&with_data(&x, d)), &r));
    worst("relu", &[relative_error(dx.data(), &nx)])
}

pub fn check_maxpool2(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        2 * rng.random_range(1..=3),
        2 * rng.random_range(1..=3),
    ];
    let len: usize = shape.iter().product();
    // distinct values 0.01 apart: no ties within a perturbation
    let mut levels: Vec<f64> = (0..len).map(|i| i as f64 * 0.01).collect();
    for i in (1..len).rev() {
        levels.swap(i, rng.random_range(0..=i));
    }
    let x = Tensor::from_vec(shape, levels).expect("sized");
    let r = rand_tensor(&mut rng, [shape[0], shape[1], shape[2] / 2, shape[3] / 2]);
    let (_, argmax) = layers::maxpool2(&x).expect("even sides");
    let dx = layers::maxpool2_backward(shape, &argmax, &r).expect("shapes");
    let mut xd = x.data().to_vec();
    let nx = numeric_gradient(&mut xd, LAYER_STEP, |d| dot(&layers::maxpool2(&with_data(&x, d)).expect("even").0, &r));
    worst("maxpool2", &[relative_error(dx.data(), &nx)])
}

pub fn check_upconv2(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=2);
    let ci = rng.random_range(1..=3);
    let co = rng.random_range(1..=3);
    let h = rng.random_range(1..=4);
    let w = rng.random_range(1..=4);
    let x = rand_tensor(&mut rng, [n, ci, h, w]);
    let wt = rand_tensor(&mut rng, [ci, co, 2, 2]);
    let b = rand_tensor(&mut rng, [1, 1, 1, co]);
    let r = rand_tensor(&mut rng, [n, co, 2 * h, 2 * w]);
    let g = layers::upconv2_backward(&x, &wt, &b, &r).expect("valid shapes");
    let probe = |x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>| dot(&layers::upconv2(x, wt, b).expect("valid"), &r);
    let mut xd = x.data().to_vec();
    let nx = numeric_gradient(&mut xd, LAYER_STEP, |d| probe(&with_data(&x, d), &wt, &b));
    let mut wd = wt.data().to_vec();
    let nw = numeric_gradient(&mut wd, LAYER_STEP, |d| probe(&x, &with_data(&wt, d), &b));
    let mut bd = b.data().to_vec();
    let nb = numeric_gradient(&mut bd, LAYER_STEP, |d| probe(&x, &wt, &with_data(&b, d)));
    worst(
        "upconv2",
        &[
            relative_error(g.dx.expect("always").data(), &nx),
            relative_error(g.dweight.data(), &nw),
            relative_error(g.dbias.data(), &nb),
        ],
    )
}

pub fn check_concat(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, h, w) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=4));
    let (ca, cb) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let a = rand_tensor(&mut rng, [n, ca, h, w]);
    let b = rand_tensor(&mut rng, [n, cb, h, w]);
    let r = rand_tensor(&mut rng, [n, ca + cb, h, w]);
    let (da, db) = layers::concat_backward(&r, ca).expect("split");
    let mut ad = a.data().to_vec();
    let na = numeric_gradient(&mut ad, LAYER_STEP, |d| dot(&layers::concat_channels(&with_data(&a, d), &b).expect("ok"), &r));
    let mut bd = b.data().to_vec();
    let nb = numeric_gradient(&mut bd, LAYER_STEP, |d| dot(&layers::concat_channels(&a, &with_data(&b, d)).expect("ok"), &r));
    worst("concat", &[relative_error(da.data(), &na), relative_error(db.data(), &nb)])
}

pub fn check_mse(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4)];
    let p = rand_tensor(&mut rng, shape);
    let t = rand_tensor(&mut rng, shape);
    let (_, g) = layers::mse_loss(&p, &t).expect("same shape");
    let mut pd = p.data().to_vec();
    let np = numeric_gradient(&mut pd, LAYER_STEP, |d| layers::mse_loss(&with_data(&p, d), &t).expect("ok").0);
    worst("mse_loss", &[relative_error(g.data(), &np)])
}

/// Every layer check for one seed.
pub fn check_layers(seed: u64) -> Vec<CheckResult> {
    vec![
        check_conv2d(seed),
        check_relu(seed),
        check_maxpool2(seed),
        check_upconv2(seed),
        check_concat(seed),
        check_mse(seed),
    ]
}

/// End-to-end Jacobian-vector products of the MSE loss of a small U-Net on
/// a 1×1×8×8 input: along a random parameter direction and, without input
/// rescaling, along a random input direction.
pub fn check_unet(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = UNetConfig {
        in_channels: 1,
        out_channels: 1,
        base_width: rng.random_range(2..=3),
        depth: rng.random_range(1..=2),
        kernel_size: 3,
        rescale_input: rng.random_bool(0.5),
    };
    let net = UNet::new(cfg.clone()).expect("valid config");
    let mut params = net.init_params::<f64>(seed);
    for p in &mut params.params {
        if p.name.ends_with(".bias") {
            for v in p.value.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let x = rand_tensor(&mut rng, [1, 1, 8, 8]).map(|v| 0.5 + 0.5 * v);
    let target = rand_tensor(&mut rng, [1, 1, 8, 8]).map(|v| 0.5 + 0.5 * v);
    let loss = |params: &crate::nn::ParameterSet<f64>, x: &Tensor<f64>| {
        let y = net.forward(params, x).expect("valid");
        layers::mse_loss(&y, &target).expect("same shape").0
    };

    let cache = net.forward_cached(&params, &x).expect("valid");
    let (_, dout) = layers::mse_loss(&cache.output, &target).expect("same shape");
    let mut grads = params.zeros_like();
    let dx = net
        .backward_with_input(&params, &cache, &dout, &mut grads)
        .expect("valid");

    let dirs: Vec<Tensor<f64>> = params.params.iter().map(|p| rand_tensor(&mut rng, p.value.shape())).collect();
    let analytic: f64 = grads.iter().zip(&dirs).map(|(g, v)| dot(g, v)).sum();
    let shifted = |s: f64| {
        let mut q = params.clone();
        for (p, v) in q.params.iter_mut().zip(&dirs) {
            for (a, b) in p.value.data_mut().iter_mut().zip(v.data()) {
                *a += s * b;
            }
        }
        loss(&q, &x)
    };
    let numeric = (shifted(NETWORK_STEP) - shifted(-NETWORK_STEP)) / (2.0 * NETWORK_STEP);
    let mut errs = vec![relative_error(&[analytic], &[numeric])];

    if !cfg.rescale_input {
        let v = rand_tensor(&mut rng, x.shape());
        let analytic = dot(&dx, &v);
        let at = |s: f64| {
            let xs = Tensor::from_vec(x.shape(), x.data().iter().zip(v.data()).map(|(a, b)| a + s * b).collect())
                .expect("sized");
            loss(&params, &xs)
        };
        let numeric = (at(NETWORK_STEP) - at(-NETWORK_STEP)) / (2.0 * NETWORK_STEP);
        errs.push(relative_error(&[analytic], &[numeric]));
    }
    worst("unet", &errs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use proptest::test_runner::{Config, RngSeed};

    fn config() -> Config {
        Config {
            cases: 100,
            rng_seed: RngSeed::Fixed(0x5eed),
            failure_persistence: None,
            ..Config::default()
        }
    }

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0], &[1.1]) - 0.1 / 1.1).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(config())]

        #[test]
        fn layer_gradients_match(seed in any::<u64>()) {
            for r in check_layers(seed) {
                let tol = if r.name == "mse_loss" { 1e-6 } else { 1e-5 };
                prop_assert!(r.rel_error <= tol, "{}: {}", r.name, r.rel_error);
            }
        }

        #[test]
        fn network_gradients_match(seed in any::<u64>()) {
            let r = check_unet(seed);
            prop_assert!(r.rel_error <= 1e-4, "{}", r.rel_error);
        }
    }
}
