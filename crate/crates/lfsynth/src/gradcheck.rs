//! Finite-difference verification of every backward pass.
//!
//! The oracles here differentiate the *forward* computations numerically
//! (central differences) and never touch the analytic backward code they
//! check. Layer-level checks cover convolution (kernel, bias, input), ReLU,
//! the composed network, and the loss gradient; the pipeline checks
//! differentiate the whole patch pipeline (features, disparity network, warp,
//! color network, loss) with respect to each network's weights.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::lfio::{TrainingSample, ViewCoord};
use crate::nets::NetworkParams;
use crate::sweep::SweepConfig;
use crate::tensor::{
    conv2d_backward, conv2d_forward, relu_backward, relu_forward, ConvLayer, Real, Tensor,
};
use crate::train::{end_to_end_gradients, loss_l2, sample_forward, PipelineConfig};

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

/// Steps, tolerances and the comparison floor for one precision mode.
#[derive(Clone, Copy, Debug)]
pub struct CheckSettings {
    pub seed: u64,
    pub layer_step: f64,
    pub pipeline_step: f64,
    pub layer_tol: f64,
    pub pipeline_tol_color: f64,
    pub pipeline_tol_disparity: f64,
    /// Gradient entries below this fraction of the largest magnitude are
    /// compared against that floor instead of their own size.
    pub layer_floor_frac: f64,
    pub pipeline_floor_frac: f64,
    /// Test hook: a deliberate offset added to one analytic gradient entry
    /// per check, to prove the checks can fail.
    pub perturbation: f64,
}

impl CheckSettings {
    pub fn double(seed: u64) -> Self {
        CheckSettings {
            seed,
            layer_step: 1e-3,
            pipeline_step: 1e-4,
            layer_tol: 1e-4,
            pipeline_tol_color: 1e-4,
            pipeline_tol_disparity: 1e-2,
            layer_floor_frac: 1e-6,
            pipeline_floor_frac: 1e-3,
            perturbation: 0.0,
        }
    }

    /// Single-precision mode: larger steps against f32 round-off, looser
    /// tolerances, higher comparison floor.
    pub fn single(seed: u64) -> Self {
        CheckSettings {
            seed,
            layer_step: 1e-2,
            pipeline_step: 1e-2,
            layer_tol: 1e-2,
            pipeline_tol_color: 5e-2,
            pipeline_tol_disparity: 5e-2,
            layer_floor_frac: 1e-3,
            pipeline_floor_frac: 5e-2,
            perturbation: 0.0,
        }
    }
}

fn max_rel_err(analytic: &[f64], fd: &[f64], floor_frac: f64) -> f64 {
    let scale = analytic
        .iter()
        .chain(fd)
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    let floor = (scale * floor_frac).max(1e-300);
    analytic
        .iter()
        .zip(fd)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn rand_tensor<T: Real, R: Rng>(h: usize, w: usize, c: usize, lo: f64, hi: f64, rng: &mut R) -> Tensor<T> {
    let data = (0..h * w * c).map(|_| T::of(rng.gen_range(lo..hi))).collect();
    Tensor::from_vec(h, w, c, data).expect("sized data")
}

fn rand_layer<T: Real, R: Rng>(k: usize, ci: usize, co: usize, rng: &mut R) -> ConvLayer<T> {
    let mut l = ConvLayer::<T>::new(k, ci, co).expect("odd kernel");
    for w in l.kernel.data_mut() {
        *w = T::of(rng.gen_range(-0.5..0.5));
    }
    for b in l.bias.iter_mut() {
        *b = T::of(rng.gen_range(-0.1..0.1));
    }
    l
}

/// Scalar objective: inner product of a forward output with a fixed cotangent.
fn dot<T: Real>(a: &Tensor<T>, g: &Tensor<T>) -> T {
    a.data().iter().zip(g.data()).map(|(&x, &y)| x * y).sum()
}

fn to64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64c()).collect()
}

fn conv_check<T: Real>(name: &'static str, k: usize, s: &CheckSettings) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    rng.set_stream(10 + k as u64);
    let (h, w, ci, co) = (8, 8, 2, 3);
    let input = rand_tensor::<T, _>(h, w, ci, -1.0, 1.0, &mut rng);
    let layer = rand_layer::<T, _>(k, ci, co, &mut rng);
    let g = rand_tensor::<T, _>(h - k + 1, w - k + 1, co, -1.0, 1.0, &mut rng);

    let grads = conv2d_backward(&input, &layer, &g).expect("shapes agree");
    let mut analytic = to64(grads.grad_kernel.data());
    analytic.extend(to64(&grads.grad_bias));
    analytic.extend(to64(grads.grad_input.data()));
    analytic[0] += s.perturbation;

    let step = T::of(s.layer_step);
    let mut fd = Vec::with_capacity(analytic.len());
    let mut layer_p = layer.clone();
    for i in 0..layer.kernel.data().len() {
        let orig = layer_p.kernel.data()[i];
        layer_p.kernel.data_mut()[i] = orig + step;
        let ep = dot(&conv2d_forward(&input, &layer_p).unwrap(), &g);
        layer_p.kernel.data_mut()[i] = orig - step;
        let em = dot(&conv2d_forward(&input, &layer_p).unwrap(), &g);
        layer_p.kernel.data_mut()[i] = orig;
        fd.push(((ep - em) / (T::of(2.0) * step)).to_f64c());
    }
    for i in 0..layer.bias.len() {
        let orig = layer_p.bias[i];
        layer_p.bias[i] = orig + step;
        let ep = dot(&conv2d_forward(&input, &layer_p).unwrap(), &g);
        layer_p.bias[i] = orig - step;
        let em = dot(&conv2d_forward(&input, &layer_p).unwrap(), &g);
        layer_p.bias[i] = orig;
        fd.push(((ep - em) / (T::of(2.0) * step)).to_f64c());
    }
    let mut input_p = input.clone();
    for i in 0..input.data().len() {
        let orig = input_p.data()[i];
        input_p.data_mut()[i] = orig + step;
        let ep = dot(&conv2d_forward(&input_p, &layer).unwrap(), &g);
        input_p.data_mut()[i] = orig - step;
        let em = dot(&conv2d_forward(&input_p, &layer).unwrap(), &g);
        input_p.data_mut()[i] = orig;
        fd.push(((ep - em) / (T::of(2.0) * step)).to_f64c());
    }

    CheckReport {
        name,
        max_rel_err: max_rel_err(&analytic, &fd, s.layer_floor_frac),
        tolerance: s.layer_tol,
    }
}

fn relu_check<T: Real>(s: &CheckSettings) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    rng.set_stream(20);
    // keep values away from the kink by more than the step
    let mut x = rand_tensor::<T, _>(6, 6, 2, 0.05, 1.0, &mut rng);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *v = -*v;
        }
    }
    let g = rand_tensor::<T, _>(6, 6, 2, -1.0, 1.0, &mut rng);
    let mut analytic = to64(relu_backward(&x, &g).expect("same shape").data());
    analytic[0] += s.perturbation;

    let step = T::of(s.layer_step);
    let mut fd = Vec::with_capacity(analytic.len());
    let mut xp = x.clone();
    for i in 0..x.data().len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + step;
        let ep = dot(&relu_forward(&xp), &g);
        xp.data_mut()[i] = orig - step;
        let em = dot(&relu_forward(&xp), &g);
        xp.data_mut()[i] = orig;
        fd.push(((ep - em) / (T::of(2.0) * step)).to_f64c());
    }
    CheckReport {
        name: "relu_backward",
        max_rel_err: max_rel_err(&analytic, &fd, s.layer_floor_frac),
        tolerance: s.layer_tol,
    }
}

fn network_check<T: Real>(s: &CheckSettings) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    rng.set_stream(30);
    let net: NetworkParams<T> =
        crate::nets::xavier_init(crate::nets::NetRole::Disparity, &[3, 1], &[3, 4, 2], &mut rng)
            .expect("valid architecture");
    let input = rand_tensor::<T, _>(7, 7, 3, -1.0, 1.0, &mut rng);
    let g = rand_tensor::<T, _>(5, 5, 2, -1.0, 1.0, &mut rng);

    let fwd = net.forward(&input).unwrap();
    let grads = net.backward(&fwd, &g, true).unwrap();
    let mut analytic = Vec::new();
    for lg in &grads.layers {
        analytic.extend(to64(lg.kernel.data()));
        analytic.extend(to64(&lg.bias));
    }
    analytic.extend(to64(grads.input.as_ref().unwrap().data()));
    analytic[0] += s.perturbation;

    let step = T::of(s.layer_step);
    let mut fd = Vec::with_capacity(analytic.len());
    let mut net_p = net.clone();
    for l in 0..net.layers.len() {
        for i in 0..net.layers[l].kernel.data().len() {
            let orig = net_p.layers[l].kernel.data()[i];
            net_p.layers[l].kernel.data_mut()[i] = orig + step;
            let ep = dot(&net_p.infer(&input).unwrap(), &g);
            net_p.layers[l].kernel.data_mut()[i] = orig - step;
            let em = dot(&net_p.infer(&input).unwrap(), &g);
            net_p.layers[l].kernel.data_mut()[i] = orig;
            fd.push(((ep - em) / (T::of(2.0) * step)).to_f64c());
        }
        for i in 0..net.layers[l].bias.len() {
            let orig = net_p.layers[l].bias[i];
            net_p.layers[l].bias[i] = orig + step;
            let ep = dot(&net_p.infer(&input).unwrap(), &g);
            net_p.layers[l].bias[i] = orig - step;
            let em = dot(&net_p.infer(&input).unwrap(), &g);
            net_p.layers[l].bias[i] = orig;
            fd.push(((ep - em) / (T::of(2.0) * step)).to_f64c());
        }
    }
    let mut input_p = input.clone();
    for i in 0..input.data().len() {
        let orig = input_p.data()[i];
        input_p.data_mut()[i] = orig + step;
        let ep = dot(&net.infer(&input_p).unwrap(), &g);
        input_p.data_mut()[i] = orig - step;
        let em = dot(&net.infer(&input_p).unwrap(), &g);
        input_p.data_mut()[i] = orig;
        fd.push(((ep - em) / (T::of(2.0) * step)).to_f64c());
    }
    CheckReport {
        name: "network_backward",
        max_rel_err: max_rel_err(&analytic, &fd, s.layer_floor_frac),
        tolerance: s.layer_tol,
    }
}

fn loss_check<T: Real>(s: &CheckSettings) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    rng.set_stream(40);
    let pred = rand_tensor::<T, _>(5, 5, 3, -0.5, 1.5, &mut rng);
    let gt = rand_tensor::<T, _>(5, 5, 3, 0.0, 1.0, &mut rng);
    let (_, grad) = loss_l2(&pred, &gt).unwrap();
    let mut analytic = to64(grad.data());
    analytic[0] += s.perturbation;

    let step = T::of(s.layer_step);
    let mut fd = Vec::with_capacity(analytic.len());
    let mut p = pred.clone();
    for i in 0..pred.data().len() {
        let orig = p.data()[i];
        p.data_mut()[i] = orig + step;
        let ep = loss_l2(&p, &gt).unwrap().0;
        p.data_mut()[i] = orig - step;
        let em = loss_l2(&p, &gt).unwrap().0;
        p.data_mut()[i] = orig;
        fd.push(((ep - em) / (T::of(2.0) * step)).to_f64c());
    }
    CheckReport {
        name: "loss_gradient",
        max_rel_err: max_rel_err(&analytic, &fd, s.layer_floor_frac),
        tolerance: s.layer_tol,
    }
}

/// Layer-level oracle suite.
pub fn check_layers<T: Real>(s: &CheckSettings) -> Vec<CheckReport> {
    vec![
        conv_check::<T>("conv3x3_backward", 3, s),
        conv_check::<T>("conv1x1_backward", 1, s),
        relu_check::<T>(s),
        network_check::<T>(s),
        loss_check::<T>(s),
    ]
}

/// The tiny but complete pipeline instance the full checks run on:
/// 8x8 patches, 4 disparity levels, 4 views, two-layer networks.
pub fn tiny_pipeline<T: Real>(
    seed: u64,
) -> (TrainingSample<T>, NetworkParams<T>, NetworkParams<T>, PipelineConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(50);
    let patch = 8usize;
    let sweep = SweepConfig::new(4, -1.0, 1.0).expect("valid");
    let cfg = PipelineConfig {
        sweep,
        jacobian_step: 0.01,
        grid_size: 8,
    };
    // Smooth per-view textures; smoothness keeps the numeric warp Jacobian
    // well conditioned.
    let phase: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..6.28)).collect();
    let input_patches: Vec<Tensor<T>> = (0..4)
        .map(|i| {
            Tensor::from_fn(patch, patch, 3, |y, x, c| {
                let t = (x as f64 * 0.55 + y as f64 * 0.35 + phase[i]).sin()
                    + 0.5 * (x as f64 * 0.2 - y as f64 * 0.45 + c as f64).cos();
                T::of(0.5 + 0.25 * t)
            })
        })
        .collect();
    let gt_patch = rand_tensor::<T, _>(4, 4, 3, 0.2, 0.8, &mut rng);
    let sample = TrainingSample {
        input_patches,
        novel_pos: ViewCoord::new(2.0, 3.0),
        gt_patch,
        lf_id: "gradcheck".into(),
        origin: (0, 0),
    };
    let w_d = NetworkParams::disparity(sweep.levels, &[3, 1], &[5], &mut rng).unwrap();
    let w_c = NetworkParams::color(4, &[3, 1], &[5], &mut rng).unwrap();
    (sample, w_d, w_c, cfg)
}

fn pipeline_loss<T: Real>(
    sample: &TrainingSample<T>,
    w_d: &NetworkParams<T>,
    w_c: &NetworkParams<T>,
    cfg: &PipelineConfig,
) -> f64 {
    let fwd = sample_forward(sample, w_d, w_c, cfg).unwrap();
    // accumulate in f64 so single-precision finite differences stay usable
    fwd.color_fwd
        .output
        .data()
        .iter()
        .zip(sample.gt_patch.data())
        .map(|(&p, &g)| {
            let r = p.to_f64c() - g.to_f64c();
            r * r
        })
        .sum()
}

fn net_grads_flat<T: Real>(g: &crate::nets::NetGradients<T>) -> Vec<f64> {
    let mut out = Vec::new();
    for lg in &g.layers {
        out.extend(to64(lg.kernel.data()));
        out.extend(to64(&lg.bias));
    }
    out
}

fn fd_over_net<T: Real>(
    sample: &TrainingSample<T>,
    w_d: &NetworkParams<T>,
    w_c: &NetworkParams<T>,
    cfg: &PipelineConfig,
    which_disparity: bool,
    step: f64,
) -> Vec<f64> {
    let mut wd = w_d.clone();
    let mut wc = w_c.clone();
    let h = T::of(step);
    let nlayers = if which_disparity {
        wd.layers.len()
    } else {
        wc.layers.len()
    };
    let mut fd = Vec::new();
    for l in 0..nlayers {
        let nk = if which_disparity {
            wd.layers[l].kernel.data().len()
        } else {
            wc.layers[l].kernel.data().len()
        };
        let nb = if which_disparity {
            wd.layers[l].bias.len()
        } else {
            wc.layers[l].bias.len()
        };
        for i in 0..nk + nb {
            let get_set = |wd: &mut NetworkParams<T>, wc: &mut NetworkParams<T>, val: Option<T>| -> T {
                let net = if which_disparity { wd } else { wc };
                let slot: &mut T = if i < nk {
                    &mut net.layers[l].kernel.data_mut()[i]
                } else {
                    &mut net.layers[l].bias[i - nk]
                };
                let old = *slot;
                if let Some(v) = val {
                    *slot = v;
                }
                old
            };
            let orig = get_set(&mut wd, &mut wc, None);
            get_set(&mut wd, &mut wc, Some(orig + h));
            let ep = pipeline_loss(sample, &wd, &wc, cfg);
            get_set(&mut wd, &mut wc, Some(orig - h));
            let em = pipeline_loss(sample, &wd, &wc, cfg);
            get_set(&mut wd, &mut wc, Some(orig));
            fd.push((ep - em) / (2.0 * step));
        }
    }
    fd
}

/// Full-pipeline oracle suite: the loss differentiated by every weight of the
/// color network and of the disparity network.
pub fn check_pipeline<T: Real>(s: &CheckSettings) -> Vec<CheckReport> {
    let (sample, w_d, w_c, cfg) = tiny_pipeline::<T>(s.seed);
    let (_, gd, gc) = end_to_end_gradients(&sample, &w_d, &w_c, &cfg).unwrap();

    let mut analytic_c = net_grads_flat(&gc);
    analytic_c[0] += s.perturbation;
    let fd_c = fd_over_net(&sample, &w_d, &w_c, &cfg, false, s.pipeline_step);

    let mut analytic_d = net_grads_flat(&gd);
    analytic_d[0] += s.perturbation;
    let fd_d = fd_over_net(&sample, &w_d, &w_c, &cfg, true, s.pipeline_step);

    vec![
        CheckReport {
            name: "pipeline_color_weights",
            max_rel_err: max_rel_err(&analytic_c, &fd_c, s.pipeline_floor_frac),
            tolerance: s.pipeline_tol_color,
        },
        CheckReport {
            name: "pipeline_disparity_weights",
            max_rel_err: max_rel_err(&analytic_d, &fd_d, s.pipeline_floor_frac),
            tolerance: s.pipeline_tol_disparity,
        },
    ]
}

/// The whole suite, layer checks first.
pub fn run_all<T: Real>(s: &CheckSettings) -> Vec<CheckReport> {
    let mut reports = check_layers::<T>(s);
    reports.extend(check_pipeline::<T>(s));
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_oracles_pass_in_double_precision() {
        for r in check_layers::<f64>(&CheckSettings::double(0)) {
            assert!(r.passed(), "{}: {} >= {}", r.name, r.max_rel_err, r.tolerance);
        }
    }

    #[test]
    fn layer_oracles_pass_in_single_precision() {
        for r in check_layers::<f32>(&CheckSettings::single(0)) {
            assert!(r.passed(), "{}: {} >= {}", r.name, r.max_rel_err, r.tolerance);
        }
    }

    #[test]
    fn pipeline_oracles_pass_in_double_precision() {
        for r in check_pipeline::<f64>(&CheckSettings::double(0)) {
            assert!(r.passed(), "{}: {} >= {}", r.name, r.max_rel_err, r.tolerance);
        }
    }

    #[test]
    fn perturbed_backward_is_detected() {
        let mut s = CheckSettings::double(0);
        s.perturbation = 1.0;
        let reports = run_all::<f64>(&s);
        assert!(reports.iter().any(|r| !r.passed()));
    }

    #[test]
    fn checks_are_deterministic() {
        let a = run_all::<f64>(&CheckSettings::double(3));
        let b = run_all::<f64>(&CheckSettings::double(3));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.max_rel_err, y.max_rel_err);
        }
    }
}
