// Temporary throughput probe for sizing desk-scale training defaults.
use std::time::Instant;

use lfsynth::nets::NetworkParams;
use lfsynth::sweep::{compute_features_from_views, Region, SweepConfig};
use lfsynth::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let levels = 32usize;
    let widths = [8usize, 8, 8];
    let net: NetworkParams<f32> =
        NetworkParams::disparity(levels, &[7, 5, 3, 1], &widths, &mut rng).unwrap();
    let input = Tensor::<f32>::from_fn(60, 60, 2 * levels, |y, x, c| {
        ((y * 31 + x * 7 + c) % 23) as f32 / 23.0
    });

    // forward
    let n = 30;
    let t0 = Instant::now();
    let mut fwd = None;
    for _ in 0..n {
        fwd = Some(net.forward(&input).unwrap());
    }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    let c1 = widths[0] as f64;
    let macs = 54.0f64 * 54.0 * 49.0 * 64.0 * c1
        + 50.0 * 50.0 * 25.0 * c1 * 8.0
        + 48.0 * 48.0 * 9.0 * 8.0 * 8.0
        + 48.0 * 48.0 * 8.0;
    println!(
        "g_d forward: {:.2} ms  (~{:.1} GFLOP/s)",
        dt * 1e3,
        2.0 * macs / dt / 1e9
    );

    // backward
    let fwd = fwd.unwrap();
    let g = Tensor::<f32>::filled(48, 48, 1, 0.01);
    let t0 = Instant::now();
    for _ in 0..n {
        let _ = net.backward(&fwd, &g, false).unwrap();
    }
    let dt_b = t0.elapsed().as_secs_f64() / n as f64;
    println!("g_d backward: {:.2} ms", dt_b * 1e3);

    // plane-sweep features for a 60x60 patch
    let views: Vec<Tensor<f32>> = (0..4)
        .map(|i| Tensor::from_fn(60, 60, 3, |y, x, c| ((y * 3 + x * 5 + c + i) % 17) as f32 / 17.0))
        .collect();
    let refs: Vec<&Tensor<f32>> = views.iter().collect();
    let offs = [(-3.0, -3.0), (-3.0, 4.0), (4.0, -3.0), (4.0, 4.0)];
    let cfg = SweepConfig::new(levels, -1.5, 1.5).unwrap();
    let t0 = Instant::now();
    for _ in 0..n {
        let _ = compute_features_from_views(&refs, &offs, Region::full(60, 60), &cfg).unwrap();
    }
    let dt_f = t0.elapsed().as_secs_f64() / n as f64;
    println!("features 60x60 L=32: {:.2} ms", dt_f * 1e3);


    // Level scaling: intercept = per-call overhead, slope = per-level cost.
    for lv in [2usize, 8, 32] {
        let cfg = SweepConfig::new(lv, -1.5, 1.5).unwrap();
        let t0 = Instant::now();
        for _ in 0..n {
            let _ = compute_features_from_views(&refs, &offs, Region::full(60, 60), &cfg).unwrap();
        }
        println!("features L={lv}: {:.2} ms", t0.elapsed().as_secs_f64() / n as f64 * 1e3);
    }
    println!(
        "stage-1-ish per-sample: {:.2} ms -> per iter (batch 20, 2 threads): {:.1} ms",
        (dt + dt_b + dt_f) * 1e3,
        (dt + dt_b + dt_f) * 20.0 * 1e3 / 2.0
    );
}

// appended: feature scaling probe
#[allow(dead_code)]
fn feature_scaling() {}
