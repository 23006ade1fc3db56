//! Manual throughput probe for the conv stack. Not part of the normal test
//! run; invoke with `cargo test --release -p deepstamp --test perf_probe -- --ignored --nocapture`.

use std::time::Instant;

use deepstamp::autodiff::Graph;
use deepstamp::nets::{architecture, build, forward, ArchId, Mode};
use deepstamp::tensor::Tensor;

#[test]
#[ignore]
fn conv_throughput() {
    for (id, macs_per_img) in [
        (ArchId::W, 11.1e6f64),
        (ArchId::V, 13.6e6),
        (ArchId::FSmall, 1.66e6),
        (ArchId::FAlexnet, 7.0e6),
    ] {
        let arch = architecture(id);
        let params = build(id, 0);
        let n = 64;
        let input = Tensor::full(
            &[n, arch.input_shape[0], arch.input_shape[1], arch.input_shape[2]],
            0.4f32,
        );

        // forward only
        let t0 = Instant::now();
        let reps = 5;
        for _ in 0..reps {
            let mut g: Graph<f32> = Graph::new();
            let x = g.input(input.clone());
            forward(&mut g, &arch, &params, x, Mode::Eval, false).unwrap();
        }
        let fwd = t0.elapsed().as_secs_f64() / (reps * n) as f64;

        // forward + backward through params
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut g: Graph<f32> = Graph::new();
            let x = g.input(input.clone());
            let out = forward(&mut g, &arch, &params, x, Mode::Train, true).unwrap();
            let loss = match id {
                ArchId::FSmall | ArchId::FAlexnet => {
                    g.cross_entropy(out.output, &vec![0u8; n])
                }
                _ => g.mse_broadcast(out.output, Tensor::zeros(&arch.output_shape)),
            };
            g.backward(loss);
        }
        let fb = t0.elapsed().as_secs_f64() / (reps * n) as f64;

        println!(
            "{:<10} fwd {:>8.3} ms/img ({:>6.2} GMAC/s)   fwd+bwd {:>8.3} ms/img ({:>6.2} GMAC/s eff)",
            format!("{id:?}"),
            fwd * 1e3,
            macs_per_img / fwd / 1e9,
            fb * 1e3,
            3.0 * macs_per_img / fb / 1e9,
        );
    }
}
