//! Per-operation gradient verification against central finite differences.
//!
//! Each op is checked in isolation (or through a 1-2 op composition) in f64
//! with smooth surroundings, so the 1e-6 bar is meaningful: any sign,
//! transpose, or scaling mistake in a backward rule lands orders of
//! magnitude above it.

use deepstamp::autodiff::{Graph, Var};
use deepstamp::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_vec(
        shape,
        (0..shape.iter().product())
            .map(|_| rng.random_range(lo..hi))
            .collect(),
    )
}

/// Checks d(loss)/d(inputs[k]) for every k, where `build` wires inputs
/// (bound as params) into a scalar loss.
fn check(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) {
    // analytic
    let mut g: Graph<f64> = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let mut grads = g.backward(loss);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| grads.take(v).expect("gradient for every input"))
        .collect();

    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g: Graph<f64> = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };

    let mut vals: Vec<Tensor<f64>> = inputs.to_vec();
    for k in 0..vals.len() {
        let scale = analytic[k]
            .data()
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        for e in 0..vals[k].numel() {
            let orig = vals[k].data()[e];
            vals[k].data_mut()[e] = orig + H;
            let fp = eval(&vals);
            vals[k].data_mut()[e] = orig - H;
            let fm = eval(&vals);
            vals[k].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * H);
            let a = analytic[k].data()[e];
            let denom = scale.max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            assert!(
                rel < TOL,
                "input {k} elem {e}: analytic {a:.6e} numeric {numeric:.6e} rel {rel:.3e}"
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(42)
}

#[test]
fn conv2d_stride1_grads() {
    let mut r = rng();
    let x = rand_t(&mut r, &[2, 2, 5, 5], -1.0, 1.0);
    let w = rand_t(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
    let b = rand_t(&mut r, &[3], -0.2, 0.2);
    let t = rand_t(&mut r, &[3, 5, 5], -1.0, 1.0);
    check(&[x, w, b], |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 1, 1);
        let s = g.sigmoid(y);
        g.mse_broadcast(s, t.clone())
    });
}

#[test]
fn conv2d_stride2_grads() {
    let mut r = rng();
    let x = rand_t(&mut r, &[2, 3, 6, 6], -1.0, 1.0);
    let w = rand_t(&mut r, &[4, 3, 3, 3], -0.5, 0.5);
    let b = rand_t(&mut r, &[4], -0.2, 0.2);
    let t = rand_t(&mut r, &[4, 3, 3], -1.0, 1.0);
    check(&[x, w, b], |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 2, 1);
        let s = g.tanh(y);
        g.mse_broadcast(s, t.clone())
    });
}

#[test]
fn conv_transpose2d_grads() {
    let mut r = rng();
    let x = rand_t(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
    let w = rand_t(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
    let b = rand_t(&mut r, &[2], -0.2, 0.2);
    let t = rand_t(&mut r, &[2, 7, 7], -1.0, 1.0);
    check(&[x, w, b], |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], v[2], 2, 1);
        let s = g.sigmoid(y);
        g.mse_broadcast(s, t.clone())
    });
}

#[test]
fn dense_grads() {
    let mut r = rng();
    let x = rand_t(&mut r, &[3, 7], -1.0, 1.0);
    let w = rand_t(&mut r, &[4, 7], -0.5, 0.5);
    let b = rand_t(&mut r, &[4], -0.2, 0.2);
    check(&[x, w, b], |g, v| {
        let y = g.dense(v[0], v[1], v[2]);
        g.cross_entropy(y, &[0, 2, 3])
    });
}

#[test]
fn batch_norm_train_grads() {
    let mut r = rng();
    let x = rand_t(&mut r, &[3, 2, 4, 4], -1.0, 1.0);
    let gamma = rand_t(&mut r, &[2], 0.5, 1.5);
    let beta = rand_t(&mut r, &[2], -0.3, 0.3);
    let t = rand_t(&mut r, &[2, 4, 4], -1.0, 1.0);
    check(&[x, gamma, beta], |g, v| {
        let (y, _, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5);
        let s = g.sigmoid(y);
        g.mse_broadcast(s, t.clone())
    });
}

#[test]
fn batch_norm_eval_grads() {
    let mut r = rng();
    let x = rand_t(&mut r, &[2, 3, 3, 3], -1.0, 1.0);
    let gamma = rand_t(&mut r, &[3], 0.5, 1.5);
    let beta = rand_t(&mut r, &[3], -0.3, 0.3);
    let rm = rand_t(&mut r, &[3], -0.2, 0.2);
    let rv = rand_t(&mut r, &[3], 0.5, 1.5);
    let t = rand_t(&mut r, &[3, 3, 3], -1.0, 1.0);
    check(&[x, gamma, beta], |g, v| {
        let y = g.batch_norm_eval(v[0], v[1], v[2], rm.clone(), rv.clone(), 1e-5);
        let s = g.tanh(y);
        g.mse_broadcast(s, t.clone())
    });
}

#[test]
fn max_pool_grads() {
    // values spaced far apart so no FD interval flips the argmax
    let mut r = rng();
    let mut x = rand_t(&mut r, &[2, 2, 4, 4], 0.0, 1.0);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v += (i % 7) as f64; // deterministic large separations
    }
    let t = rand_t(&mut r, &[2, 2, 2], -1.0, 1.0);
    check(&[x], |g, v| {
        let y = g.max_pool2(v[0]);
        g.mse_broadcast(y, t.clone())
    });
}

#[test]
fn global_avg_pool_and_flatten_grads() {
    let mut r = rng();
    let x = rand_t(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
    check(&[x.clone()], |g, v| {
        let y = g.global_avg_pool(v[0]);
        g.cross_entropy(y, &[1, 0])
    });
    let w = rand_t(&mut r, &[5, 48], -0.3, 0.3);
    let b = rand_t(&mut r, &[5], -0.1, 0.1);
    check(&[x, w, b], |g, v| {
        let f = g.flatten(v[0]);
        let y = g.dense(f, v[1], v[2]);
        g.cross_entropy(y, &[4, 2])
    });
}

#[test]
fn slice_channels_and_alpha_blend_grads() {
    let mut r = rng();
    let rgba = rand_t(&mut r, &[2, 4, 3, 3], 0.05, 0.95);
    let x = rand_t(&mut r, &[2, 3, 3, 3], 0.05, 0.95);
    let t = rand_t(&mut r, &[3, 3, 3], 0.0, 1.0);
    check(&[rgba, x], |g, v| {
        let rgb = g.slice_channels(v[0], 0, 3);
        let alpha = g.slice_channels(v[0], 3, 4);
        let out = g.alpha_blend(v[1], rgb, alpha, 0.7);
        g.mse_broadcast(out, t.clone())
    });
}

#[test]
fn elementwise_and_weighted_sum_grads() {
    let mut r = rng();
    let a = rand_t(&mut r, &[2, 5], -1.0, 1.0);
    let b = rand_t(&mut r, &[2, 5], -1.0, 1.0);
    let t = rand_t(&mut r, &[5], -1.0, 1.0);
    check(&[a, b], |g, v| {
        let s = g.add(v[0], v[1]);
        let p = g.mul(s, v[0]);
        let w = g.weighted_sum(&[(0.3, p), (0.7, v[1])]);
        g.mse_broadcast(w, t.clone())
    });
}

#[test]
fn softmax_weighted_sum_grads() {
    let mut r = rng();
    let xs: Vec<Tensor<f64>> = (0..3).map(|_| rand_t(&mut r, &[1], 0.0, 2.0)).collect();
    for tau in [0.25, 1.0, 4.0] {
        check(&xs, |g, v| g.softmax_weighted_sum(v, tau));
    }
}

#[test]
fn softmax_weighted_sum_limits() {
    // tau -> inf approaches the mean; tau -> 0 approaches the max; n = 1
    // reduces to the single value
    let mut g: Graph<f64> = Graph::new();
    let a = g.input(Tensor::scalar(1.0));
    let b = g.input(Tensor::scalar(3.0));
    let c = g.input(Tensor::scalar(2.0));
    let mean_ish = g.softmax_weighted_sum(&[a, b, c], 1e6);
    assert!((g.value(mean_ish).item() - 2.0).abs() < 1e-4);
    let max_ish = g.softmax_weighted_sum(&[a, b, c], 1e-3);
    assert!((g.value(max_ish).item() - 3.0).abs() < 1e-6);
    let single = g.softmax_weighted_sum(&[b], 1.0);
    assert_eq!(g.value(single).item(), 3.0);
}

#[test]
fn kl_and_bce_loss_grads() {
    let mut r = rng();
    let logits = rand_t(&mut r, &[3, 5], -2.0, 2.0);
    let target_logits = rand_t(&mut r, &[3, 5], -2.0, 2.0);
    let target = deepstamp::autodiff::softmax_rows(&target_logits);
    check(&[logits.clone()], |g, v| g.kl_to_target(target.clone(), v[0]));

    let z = rand_t(&mut r, &[4, 1], -3.0, 3.0);
    check(&[z.clone()], |g, v| g.bce_with_logits(v[0], 1.0));
    check(&[z], |g, v| {
        g.bce_with_logits_targets(v[0], vec![1.0, 0.0, 1.0, 0.0])
    });
}

#[test]
fn relu_family_grads_away_from_kinks() {
    // inputs bounded away from zero so the kink never enters the FD interval
    let mut r = rng();
    let mut x = rand_t(&mut r, &[2, 6], 0.1, 1.0);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *v = -*v;
        }
    }
    let t = rand_t(&mut r, &[6], -1.0, 1.0);
    check(&[x.clone()], |g, v| {
        let y = g.relu(v[0]);
        g.mse_broadcast(y, t.clone())
    });
    check(&[x], |g, v| {
        let y = g.leaky_relu(v[0], 0.2);
        g.mse_broadcast(y, t.clone())
    });
}
