//! Forward-pass oracle: the graph's convolution path must agree with a
//! straight-line naive implementation written independently here.

use deepstamp::autodiff::Graph;
use deepstamp::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Textbook quadruple-loop convolution, no reuse of library internals.
#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for ni in 0..n {
        for coi in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[coi];
                    for cii in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((ni * ci + cii) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((coi * ci + cii) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * co + coi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[test]
fn two_layer_stack_matches_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, ci, h, wd) = (2usize, 3usize, 8usize, 8usize);
    let c1 = 5usize;
    let c2 = 4usize;
    let k = 3usize;

    let x: Vec<f64> = (0..n * ci * h * wd).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w1: Vec<f64> = (0..c1 * ci * k * k).map(|_| rng.random_range(-0.5..0.5)).collect();
    let b1: Vec<f64> = (0..c1).map(|_| rng.random_range(-0.2..0.2)).collect();
    let w2: Vec<f64> = (0..c2 * c1 * k * k).map(|_| rng.random_range(-0.5..0.5)).collect();
    let b2: Vec<f64> = (0..c2).map(|_| rng.random_range(-0.2..0.2)).collect();

    // library path: conv(s=1,p=1) -> relu -> conv(s=2,p=1) -> sigmoid
    let mut g: Graph<f64> = Graph::new();
    let xv = g.input(Tensor::from_vec(&[n, ci, h, wd], x.clone()));
    let w1v = g.input(Tensor::from_vec(&[c1, ci, k, k], w1.clone()));
    let b1v = g.input(Tensor::from_vec(&[c1], b1.clone()));
    let w2v = g.input(Tensor::from_vec(&[c2, c1, k, k], w2.clone()));
    let b2v = g.input(Tensor::from_vec(&[c2], b2.clone()));
    let y1 = g.conv2d(xv, w1v, b1v, 1, 1);
    let a1 = g.relu(y1);
    let y2 = g.conv2d(a1, w2v, b2v, 2, 1);
    let out = g.sigmoid(y2);

    // reference path
    let r1 = naive_conv(&x, &w1, &b1, n, ci, h, wd, c1, k, 1, 1);
    let a1_ref: Vec<f64> = r1.iter().map(|&v| v.max(0.0)).collect();
    let r2 = naive_conv(&a1_ref, &w2, &b2, n, c1, h, wd, c2, k, 2, 1);
    let out_ref: Vec<f64> = r2.iter().map(|&v| sigmoid(v)).collect();

    let got = g.value(out);
    assert_eq!(got.shape(), &[n, c2, 4, 4]);
    let mut worst = 0.0f64;
    for (a, b) in got.data().iter().zip(&out_ref) {
        worst = worst.max((a - b).abs());
    }
    assert!(worst < 1e-6, "max abs diff vs naive reference: {worst}");
}

#[test]
fn transposed_conv_matches_gradient_identity() {
    // conv_transpose(x, w) must equal the data-gradient of conv with the
    // same kernel: <conv(a, w), x> == <a, convT(x, w)> for all a, x.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (ci, co, k, s, p) = (2usize, 3usize, 3usize, 2usize, 1usize);
    let (h_in, w_in) = (4usize, 4usize); // convT input geometry
    let h_out = (h_in - 1) * s + k - 2 * p;
    let w_out = (w_in - 1) * s + k - 2 * p;

    let x: Vec<f64> = (0..ci * h_in * w_in).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a: Vec<f64> = (0..co * h_out * w_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    // convT weights are [ci, co, k, k]; the paired conv uses [ci, co, k, k]
    // read as [c_out=ci ... ] with roles swapped
    let w: Vec<f64> = (0..ci * co * k * k).map(|_| rng.random_range(-0.5..0.5)).collect();

    let mut g: Graph<f64> = Graph::new();
    let xv = g.input(Tensor::from_vec(&[1, ci, h_in, w_in], x.clone()));
    let wv = g.input(Tensor::from_vec(&[ci, co, k, k], w.clone()));
    let zb = g.input(Tensor::zeros(&[co]));
    let up = g.conv_transpose2d(xv, wv, zb, s, p);
    let lhs: f64 = g
        .value(up)
        .data()
        .iter()
        .zip(&a)
        .map(|(u, av)| u * av)
        .sum();

    // conv side: conv(a, w_conv) where w_conv[ci][co] = w[ci][co] (kernel
    // shared), stride/pad mirrored
    let mut g2: Graph<f64> = Graph::new();
    let av = g2.input(Tensor::from_vec(&[1, co, h_out, w_out], a));
    // build conv weight [ci, co, k, k] directly from w
    let wc = g2.input(Tensor::from_vec(&[ci, co, k, k], w));
    let zb2 = g2.input(Tensor::zeros(&[ci]));
    let down = g2.conv2d(av, wc, zb2, s, p);
    let rhs: f64 = g2
        .value(down)
        .data()
        .iter()
        .zip(&x)
        .map(|(d, xv)| d * xv)
        .sum();

    assert!(
        (lhs - rhs).abs() < 1e-9,
        "adjoint identity violated: {lhs} vs {rhs}"
    );
}
