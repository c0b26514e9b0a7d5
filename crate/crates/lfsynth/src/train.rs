//! Training: the L2 synthesis loss, end-to-end gradients through both
//! networks and the warp, the ADAM optimizer, and the three-stage schedule
//! (pretrain the disparity estimator, pretrain the color predictor against
//! the frozen estimator, then refine both jointly).
//!
//! The gradient of the loss with respect to the disparity network splits into
//! three pieces: the loss gradient at the synthesized image, the derivative
//! of that image with respect to the disparity map, and the usual network
//! backprop. The middle piece sums over the color network's input channels:
//! warped-image channels contribute through the numeric warp Jacobian, the
//! disparity channel contributes identity, the position channels contribute
//! nothing.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec;
use crate::lfio::{corner_offsets, TrainingSample};
use crate::nets::{
    assemble_color_features, read_model_from, write_model_to, Model, NetForward, NetGradients,
    NetworkParams,
};
use crate::sweep::{compute_features_from_views, FeatureStack, Region, SweepConfig};
use crate::tensor::{Real, Tensor};
use crate::warp::{backward_warp, warp_jacobian_numeric, DisparityMap};

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Sum-of-squares distance over all pixels and channels, with its gradient
/// `2 (pred - gt)`.
pub fn loss_l2<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim(
            "loss_l2",
            format!("{:?} vs {:?}", pred.shape(), gt.shape()),
        ));
    }
    let mut e = T::zero();
    let mut grad = pred.clone();
    for (g, &t) in grad.data_mut().iter_mut().zip(gt.data()) {
        let r = *g - t;
        e += r * r;
        *g = T::of(2.0) * r;
    }
    Ok((e, grad))
}

// ---------------------------------------------------------------------------
// ADAM
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerMoments<T> {
    pub m_kernel: Vec<T>,
    pub v_kernel: Vec<T>,
    pub m_bias: Vec<T>,
    pub v_bias: Vec<T>,
}

/// First/second moment estimates plus the step counter, mirroring one
/// network's parameter shapes.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub t: u64,
    pub layers: Vec<LayerMoments<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &NetworkParams<T>) -> Self {
        OptimizerState {
            t: 0,
            layers: params
                .layers
                .iter()
                .map(|l| LayerMoments {
                    m_kernel: vec![T::zero(); l.kernel.data().len()],
                    v_kernel: vec![T::zero(); l.kernel.data().len()],
                    m_bias: vec![T::zero(); l.bias.len()],
                    v_bias: vec![T::zero(); l.bias.len()],
                })
                .collect(),
        }
    }
}

fn adam_update<T: Real>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    hp: &AdamHyper,
    bc1: f64,
    bc2: f64,
) {
    let b1 = T::of(hp.beta1);
    let b2 = T::of(hp.beta2);
    let one = T::one();
    let lr = T::of(hp.lr);
    let eps = T::of(hp.epsilon);
    let ibc1 = T::of(1.0 / bc1);
    let ibc2 = T::of(1.0 / bc2);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mhat = m[i] * ibc1;
        let vhat = v[i] * ibc2;
        params[i] = params[i] - lr * mhat / (vhat.sqrt() + eps);
    }
}

/// One bias-corrected ADAM step over every parameter of a network.
pub fn adam_step<T: Real>(
    params: &mut NetworkParams<T>,
    grads: &NetGradients<T>,
    state: &mut OptimizerState<T>,
    hp: &AdamHyper,
) {
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for ((layer, g), mo) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.layers)
    {
        adam_update(
            layer.kernel.data_mut(),
            g.kernel.data(),
            &mut mo.m_kernel,
            &mut mo.v_kernel,
            hp,
            bc1,
            bc2,
        );
        adam_update(&mut layer.bias, &g.bias, &mut mo.m_bias, &mut mo.v_bias, hp, bc1, bc2);
    }
}

// ---------------------------------------------------------------------------
// Per-sample pipeline
// ---------------------------------------------------------------------------

/// Everything the per-sample forward/backward passes need besides weights.
#[derive(Clone, Copy, Debug)]
pub struct PipelineConfig {
    pub sweep: SweepConfig,
    pub jacobian_step: f64,
    pub grid_size: u32,
}

fn sample_features<T: Real>(
    sample: &TrainingSample<T>,
    cfg: &PipelineConfig,
) -> Result<FeatureStack<T>> {
    let refs: Vec<&Tensor<T>> = sample.input_patches.iter().collect();
    let offsets = corner_offsets(cfg.grid_size, sample.novel_pos);
    let (h, w, _) = refs[0].shape();
    compute_features_from_views(&refs, &offsets, Region::full(h, w), &cfg.sweep)
}

pub(crate) struct SampleForward<T> {
    pub dispar_fwd: NetForward<T>,
    pub disp: DisparityMap<T>,
    pub warped: Vec<Tensor<T>>,
    pub color_fwd: NetForward<T>,
}

pub(crate) fn sample_forward<T: Real>(
    sample: &TrainingSample<T>,
    w_d: &NetworkParams<T>,
    w_c: &NetworkParams<T>,
    cfg: &PipelineConfig,
) -> Result<SampleForward<T>> {
    let features = sample_features(sample, cfg)?;
    let dispar_fwd = w_d.forward(&features.data)?;
    let disp = DisparityMap::new(dispar_fwd.output.clone())?;
    let offsets = corner_offsets(cfg.grid_size, sample.novel_pos);
    let warped = sample
        .input_patches
        .iter()
        .zip(offsets)
        .map(|(src, off)| backward_warp(src, &disp, off))
        .collect::<Result<Vec<_>>>()?;
    let h = assemble_color_features(&warped, &disp, sample.novel_pos, cfg.grid_size)?;
    let color_fwd = w_c.forward(&h.data)?;
    Ok(SampleForward {
        dispar_fwd,
        disp,
        warped,
        color_fwd,
    })
}

/// Run the full patch pipeline forward and return the synthesis loss plus
/// gradients for both networks.
pub fn end_to_end_gradients<T: Real>(
    sample: &TrainingSample<T>,
    w_d: &NetworkParams<T>,
    w_c: &NetworkParams<T>,
    cfg: &PipelineConfig,
) -> Result<(T, NetGradients<T>, NetGradients<T>)> {
    let fwd = sample_forward(sample, w_d, w_c, cfg)?;
    let (e, dpred) = loss_l2(&fwd.color_fwd.output, &sample.gt_patch)?;

    // Color network backprop, keeping the gradient at its input.
    let grad_c = w_c.backward(&fwd.color_fwd, &dpred, true)?;
    let grad_h = grad_c.input.as_ref().expect("input grad requested");

    // Gradient at the disparity map per feature channel: identity for the
    // disparity channel, numeric warp Jacobian for each warped channel, zero
    // for the position channels.
    let (dh, dw, _) = fwd.disp.values.shape();
    let n = fwd.warped.len();
    let offsets = corner_offsets(cfg.grid_size, sample.novel_pos);
    let nch = grad_h.channels();
    let mut ddisp = Tensor::zeros(dh, dw, 1);
    {
        let dd = ddisp.data_mut();
        for (y, grow) in grad_h.data().chunks_exact(dw * nch).enumerate() {
            for x in 0..dw {
                dd[y * dw + x] = grow[x * nch + 3 * n];
            }
        }
    }
    for (i, src) in sample.input_patches.iter().enumerate() {
        let jac = warp_jacobian_numeric(src, &fwd.disp, offsets[i], cfg.jacobian_step)?;
        let jc = jac.channels();
        let dd = ddisp.data_mut();
        for (y, (grow, jrow)) in grad_h
            .data()
            .chunks_exact(dw * nch)
            .zip(jac.data().chunks_exact(dw * jc))
            .enumerate()
        {
            for x in 0..dw {
                let mut acc = dd[y * dw + x];
                for c in 0..jc {
                    acc += grow[x * nch + 3 * i + c] * jrow[x * jc + c];
                }
                dd[y * dw + x] = acc;
            }
        }
    }

    let grad_d = w_d.backward(&fwd.dispar_fwd, &ddisp, false)?;
    Ok((e, grad_d, grad_c))
}

/// Stage-1 gradients: warp the designated input view (fixed choice: corner
/// `(0,0)`) with the estimated disparity, compare its center crop against the
/// ground-truth patch, and push the error through the warp Jacobian into the
/// disparity network.
pub fn stage1_gradients<T: Real>(
    sample: &TrainingSample<T>,
    w_d: &NetworkParams<T>,
    cfg: &PipelineConfig,
) -> Result<(T, NetGradients<T>)> {
    let features = sample_features(sample, cfg)?;
    let dispar_fwd = w_d.forward(&features.data)?;
    let disp = DisparityMap::new(dispar_fwd.output.clone())?;
    let offsets = corner_offsets(cfg.grid_size, sample.novel_pos);
    let warped = backward_warp(&sample.input_patches[0], &disp, offsets[0])?;

    let (dh, dw, ch) = warped.shape();
    let (gh, gw, _) = sample.gt_patch.shape();
    if gh > dh || gw > dw || (dh - gh) % 2 != 0 || (dw - gw) % 2 != 0 {
        return Err(Error::dim(
            "stage1_gradients",
            format!("warped {dh}x{dw} incompatible with ground truth {gh}x{gw}"),
        ));
    }
    let (my, mx) = ((dh - gh) / 2, (dw - gw) / 2);
    let crop = warped.crop(my, mx, gh, gw)?;
    let (e, dpred) = loss_l2(&crop, &sample.gt_patch)?;

    let jac = warp_jacobian_numeric(&sample.input_patches[0], &disp, offsets[0], cfg.jacobian_step)?;
    let mut ddisp = Tensor::zeros(dh, dw, 1);
    {
        let dd = ddisp.data_mut();
        for y in 0..gh {
            for x in 0..gw {
                let mut acc = T::zero();
                for c in 0..ch {
                    acc += dpred.get(y, x, c) * jac.get(y + my, x + mx, c);
                }
                dd[(y + my) * dw + (x + mx)] = acc;
            }
        }
    }
    let grad_d = w_d.backward(&dispar_fwd, &ddisp, false)?;
    Ok((e, grad_d))
}

/// Stage-2 gradients: the disparity map comes precomputed from the frozen
/// estimator; only the color network learns.
pub fn stage2_gradients<T: Real>(
    sample: &TrainingSample<T>,
    disp: &DisparityMap<T>,
    w_c: &NetworkParams<T>,
    cfg: &PipelineConfig,
) -> Result<(T, NetGradients<T>)> {
    let offsets = corner_offsets(cfg.grid_size, sample.novel_pos);
    let warped = sample
        .input_patches
        .iter()
        .zip(offsets)
        .map(|(src, off)| backward_warp(src, disp, off))
        .collect::<Result<Vec<_>>>()?;
    let h = assemble_color_features(&warped, disp, sample.novel_pos, cfg.grid_size)?;
    let color_fwd = w_c.forward(&h.data)?;
    let (e, dpred) = loss_l2(&color_fwd.output, &sample.gt_patch)?;
    let grad_c = w_c.backward(&color_fwd, &dpred, false)?;
    Ok((e, grad_c))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Disparity,
    Color,
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Disparity => "disparity",
            Stage::Color => "color",
            Stage::Joint => "joint",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LogEntry {
    /// 1-based iteration within the stage.
    pub iter: usize,
    pub stage: Stage,
    /// Batch-mean loss.
    pub loss: f64,
}

/// In-memory metrics log; one `iter,stage,loss` line per entry on disk.
#[derive(Default)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    /// When set, echo a progress line to stderr every N iterations.
    pub echo_every: Option<usize>,
}

impl TrainLog {
    pub fn push(&mut self, iter: usize, stage: Stage, loss: f64) {
        if let Some(n) = self.echo_every {
            if n > 0 && iter % n == 0 {
                eprintln!("  [{}] iter {iter}: loss {loss:.6}", stage.name());
            }
        }
        self.entries.push(LogEntry { iter, stage, loss });
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            writeln!(w, "{},{},{}", e.iter, e.stage.name(), e.loss)
                .map_err(|err| Error::io(path, err))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Means of consecutive non-overlapping windows of one stage's losses.
    pub fn windowed_means(&self, stage: Stage, window: usize) -> Vec<f64> {
        let losses: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.stage == stage)
            .map(|e| e.loss)
            .collect();
        losses
            .chunks(window.max(1))
            .filter(|c| c.len() == window.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Iteration budgets for the three stages.
    pub iters: [usize; 3],
    pub adam: AdamHyper,
    pub seed: u64,
    pub sweep: SweepConfig,
    pub jacobian_step: f64,
    pub grid_size: u32,
    pub kernels: Vec<usize>,
    pub widths: Vec<usize>,
}

/// Desk-scale per-stage iteration defaults.
pub const DESK_ITERS: [usize; 3] = [1200, 3000, 700];

impl TrainConfig {
    pub fn new(sweep: SweepConfig, grid_size: u32) -> Self {
        TrainConfig {
            batch_size: 20,
            iters: DESK_ITERS,
            adam: AdamHyper::default(),
            seed: 0,
            sweep,
            jacobian_step: 0.01,
            grid_size,
            kernels: crate::nets::DEFAULT_KERNELS.to_vec(),
            widths: crate::nets::DEFAULT_WIDTHS.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sweep.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.widths.len() + 1 != self.kernels.len() {
            return Err(Error::Config(format!(
                "{} kernels need {} hidden widths",
                self.kernels.len(),
                self.kernels.len().saturating_sub(1)
            )));
        }
        if self.jacobian_step <= 0.0 {
            return Err(Error::Config("jacobian step must be > 0".into()));
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            sweep: self.sweep,
            jacobian_step: self.jacobian_step,
            grid_size: self.grid_size,
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    pub fn init_disparity<T: Real>(&self) -> Result<NetworkParams<T>> {
        NetworkParams::disparity(self.sweep.levels, &self.kernels, &self.widths, &mut self.rng(1))
    }

    pub fn init_color<T: Real>(&self) -> Result<NetworkParams<T>> {
        NetworkParams::color(4, &self.kernels, &self.widths, &mut self.rng(2))
    }
}

/// Deterministic epoch shuffling: a fresh seeded permutation whenever the
/// remaining samples cannot fill a batch.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
    batch: usize,
}

impl BatchSampler {
    fn new(n: usize, batch: usize, rng: ChaCha8Rng) -> Self {
        BatchSampler {
            order: (0..n).collect(),
            pos: usize::MAX,
            rng,
            batch: batch.min(n).max(1),
        }
    }

    fn next_batch(&mut self) -> &[usize] {
        if self.pos == usize::MAX || self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        b
    }
}

/// Fold per-sample results in batch order; the batch gradient is the mean of
/// the per-sample gradients.
fn reduce_batch<T: Real, const NG: usize>(
    results: Vec<Result<(T, [NetGradients<T>; NG])>>,
    batch: &[usize],
    iteration: usize,
) -> Result<(f64, [NetGradients<T>; NG])> {
    let mut it = results.into_iter();
    let (mut e_sum, mut acc) = it.next().expect("non-empty batch")?;
    for r in it {
        let (e, g) = r?;
        e_sum += e;
        for (a, gi) in acc.iter_mut().zip(&g) {
            a.add_assign(gi);
        }
    }
    let scale = T::of(1.0 / batch.len() as f64);
    for a in acc.iter_mut() {
        a.scale(scale);
    }
    let loss = e_sum.to_f64c() / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration,
            sample: batch[0],
        });
    }
    Ok((loss, acc))
}

/// Stage 1: train the disparity estimator alone against warped-view error.
pub fn train_stage1_disparity<T: Real>(
    data: &[TrainingSample<T>],
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<NetworkParams<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut w_d = cfg.init_disparity::<T>()?;
    let pipe = cfg.pipeline();
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, cfg.rng(3));
    let mut opt = OptimizerState::new(&w_d);
    for it in 1..=cfg.iters[0] {
        let batch: Vec<usize> = sampler.next_batch().to_vec();
        let results = exec::map_indexed(batch.len(), |b| {
            stage1_gradients(&data[batch[b]], &w_d, &pipe).map(|(e, g)| (e, [g]))
        });
        let (loss, [grads]) = reduce_batch(results, &batch, it)?;
        adam_step(&mut w_d, &grads, &mut opt, &cfg.adam);
        log.push(it, Stage::Disparity, loss);
    }
    Ok(w_d)
}

/// Stage 2: freeze the disparity estimator, precompute its outputs, train the
/// color predictor.
pub fn train_stage2_color<T: Real>(
    data: &[TrainingSample<T>],
    w_d: &NetworkParams<T>,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<NetworkParams<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let pipe = cfg.pipeline();
    // The frozen estimator's disparity per sample is reused every epoch.
    let disps: Vec<DisparityMap<T>> = exec::map_indexed(data.len(), |i| {
        let features = sample_features(&data[i], &pipe)?;
        crate::nets::disparity_forward(&features, w_d)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut w_c = cfg.init_color::<T>()?;
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, cfg.rng(4));
    let mut opt = OptimizerState::new(&w_c);
    for it in 1..=cfg.iters[1] {
        let batch: Vec<usize> = sampler.next_batch().to_vec();
        let results = exec::map_indexed(batch.len(), |b| {
            let s = batch[b];
            stage2_gradients(&data[s], &disps[s], &w_c, &pipe).map(|(e, g)| (e, [g]))
        });
        let (loss, [grads]) = reduce_batch(results, &batch, it)?;
        adam_step(&mut w_c, &grads, &mut opt, &cfg.adam);
        log.push(it, Stage::Color, loss);
    }
    Ok(w_c)
}

/// Stage 3: joint refinement of both networks with the full end-to-end
/// gradient.
pub fn train_stage3_joint<T: Real>(
    data: &[TrainingSample<T>],
    mut w_d: NetworkParams<T>,
    mut w_c: NetworkParams<T>,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<(NetworkParams<T>, NetworkParams<T>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let pipe = cfg.pipeline();
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, cfg.rng(5));
    let mut opt_d = OptimizerState::new(&w_d);
    let mut opt_c = OptimizerState::new(&w_c);
    for it in 1..=cfg.iters[2] {
        let batch: Vec<usize> = sampler.next_batch().to_vec();
        let results = exec::map_indexed(batch.len(), |b| {
            end_to_end_gradients(&data[batch[b]], &w_d, &w_c, &pipe)
                .map(|(e, gd, gc)| (e, [gd, gc]))
        });
        let (loss, [gd, gc]) = reduce_batch(results, &batch, it)?;
        adam_step(&mut w_d, &gd, &mut opt_d, &cfg.adam);
        adam_step(&mut w_c, &gc, &mut opt_c, &cfg.adam);
        log.push(it, Stage::Joint, loss);
    }
    Ok((w_d, w_c))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

fn write_moments<T: Real, W: Write>(w: &mut W, st: &OptimizerState<T>) -> std::io::Result<()> {
    w.write_all(&st.t.to_le_bytes())?;
    for l in &st.layers {
        for arr in [&l.m_kernel, &l.v_kernel, &l.m_bias, &l.v_bias] {
            let mut buf = Vec::with_capacity(arr.len() * 4);
            for &v in arr.iter() {
                buf.extend_from_slice(&v.to_f32c().to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    Ok(())
}

fn read_moments<T: Real, R: Read>(
    r: &mut R,
    params: &NetworkParams<T>,
) -> std::io::Result<OptimizerState<T>> {
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let t = u64::from_le_bytes(b8);
    let mut layers = Vec::with_capacity(params.layers.len());
    for l in &params.layers {
        let mut read_arr = |n: usize| -> std::io::Result<Vec<T>> {
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            Ok(bytes
                .chunks_exact(4)
                .map(|c| T::of_f32(f32::from_le_bytes(c.try_into().unwrap())))
                .collect())
        };
        let nk = l.kernel.data().len();
        let nb = l.bias.len();
        layers.push(LayerMoments {
            m_kernel: read_arr(nk)?,
            v_kernel: read_arr(nk)?,
            m_bias: read_arr(nb)?,
            v_bias: read_arr(nb)?,
        });
    }
    Ok(OptimizerState { t, layers })
}

/// Model file plus optimizer-state blocks, for resuming between steps.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    model: &Model<T>,
    states: Option<(&OptimizerState<T>, &OptimizerState<T>)>,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let werr = |e| Error::io(path, e);
    write_model_to(&mut w, model).map_err(werr)?;
    match states {
        None => w.write_all(&[0u8]).map_err(werr)?,
        Some((sd, sc)) => {
            w.write_all(&[1u8]).map_err(werr)?;
            write_moments(&mut w, sd).map_err(werr)?;
            write_moments(&mut w, sc).map_err(werr)?;
        }
    }
    w.flush().map_err(werr)
}

#[allow(clippy::type_complexity)]
pub fn load_checkpoint<T: Real>(
    path: &Path,
) -> Result<(Model<T>, Option<(OptimizerState<T>, OptimizerState<T>)>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let model = read_model_from(&mut r, path)?;
    let mut flag = [0u8; 1];
    let states = match r.read_exact(&mut flag) {
        Ok(()) if flag[0] == 1 => {
            let rerr = |e| Error::io(path, e);
            let sd = read_moments(&mut r, &model.disparity).map_err(rerr)?;
            let sc = read_moments(&mut r, &model.color).map_err(rerr)?;
            Some((sd, sc))
        }
        _ => None,
    };
    Ok((model, states))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lfio::ViewCoord;
    use crate::nets::NetRole;
    use crate::tensor::ConvLayer;

    #[test]
    fn loss_examples() {
        let a = Tensor::<f64>::from_vec(1, 1, 1, vec![0.5]).unwrap();
        let b = Tensor::<f64>::from_vec(1, 1, 1, vec![0.0]).unwrap();
        let (e, g) = loss_l2(&a, &b).unwrap();
        assert_eq!(e, 0.25);
        assert_eq!(g.get(0, 0, 0), 1.0);

        let (e0, g0) = loss_l2(&a, &a).unwrap();
        assert_eq!(e0, 0.0);
        assert!(g0.data().iter().all(|&v| v == 0.0));

        // doubling the residual quadruples the loss
        let c = Tensor::<f64>::from_vec(1, 1, 1, vec![1.0]).unwrap();
        let (e2, _) = loss_l2(&c, &b).unwrap();
        assert_eq!(e2, 4.0 * e);
    }

    fn scalar_net(w: f64) -> NetworkParams<f64> {
        let mut l = ConvLayer::<f64>::new(1, 1, 1).unwrap();
        *l.weight_mut(0, 0, 0, 0) = w;
        NetworkParams {
            role: NetRole::Disparity,
            layers: vec![l],
        }
    }

    fn grad_of(g: f64, net: &NetworkParams<f64>) -> NetGradients<f64> {
        let mut z = NetGradients::zeros_like(net);
        z.layers[0].kernel.data_mut()[0] = g;
        z
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let hp = AdamHyper::default();
        for &g in &[0.5, -3.0, 1e-3] {
            let mut net = scalar_net(1.0);
            let mut st = OptimizerState::new(&net);
            let grad = grad_of(g, &net);
            adam_step(&mut net, &grad, &mut st, &hp);
            let delta = net.layers[0].kernel.data()[0] - 1.0;
            // bias-corrected first step is ~ -lr * sign(g)
            assert!(
                (delta + hp.lr * g.signum()).abs() < 1e-6 * hp.lr + 1e-9,
                "delta {delta} for g {g}"
            );
            assert_eq!(st.t, 1);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let hp = AdamHyper::default();
        let mut net = scalar_net(0.7);
        let mut st = OptimizerState::new(&net);
        let grad = grad_of(0.0, &net);
        adam_step(&mut net, &grad, &mut st, &hp);
        assert_eq!(net.layers[0].kernel.data()[0], 0.7);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_constant_gradient_moves_monotonically() {
        let hp = AdamHyper::default();
        let mut net = scalar_net(0.0);
        let mut st = OptimizerState::new(&net);
        let grad = grad_of(2.0, &net);
        let mut prev = 0.0;
        for _ in 0..3 {
            adam_step(&mut net, &grad, &mut st, &hp);
            let cur = net.layers[0].kernel.data()[0];
            assert!(cur < prev);
            prev = cur;
        }
    }

    fn tiny_config() -> TrainConfig {
        let sweep = SweepConfig::new(4, -1.0, 1.0).unwrap();
        let mut cfg = TrainConfig::new(sweep, 8);
        cfg.kernels = vec![3, 1];
        cfg.widths = vec![4];
        cfg.batch_size = 4;
        cfg.iters = [8, 8, 8];
        cfg.seed = 99;
        cfg
    }

    fn tiny_samples(n: usize, patch: usize) -> Vec<TrainingSample<f64>> {
        // Smooth deterministic pseudo-textures; the ground truth is the mean
        // of the inputs' center crops, a target the pipeline can chase.
        (0..n)
            .map(|s| {
                let patches: Vec<Tensor<f64>> = (0..4)
                    .map(|i| {
                        Tensor::from_fn(patch, patch, 3, |y, x, c| {
                            let t = (x as f64 * 0.7 + y as f64 * 0.4 + (s * 4 + i) as f64).sin();
                            0.5 + 0.3 * t + 0.05 * c as f64
                        })
                    })
                    .collect();
                let margin = 2;
                let gsz = patch - 2 * margin;
                let mut gt = Tensor::zeros(gsz, gsz, 3);
                for y in 0..gsz {
                    for x in 0..gsz {
                        for c in 0..3 {
                            let mut acc = 0.0;
                            for p in &patches {
                                acc += p.get(y + margin, x + margin, c);
                            }
                            gt.set(y, x, c, acc / 4.0);
                        }
                    }
                }
                TrainingSample {
                    input_patches: patches,
                    novel_pos: ViewCoord::new(3.0, 4.0),
                    gt_patch: gt,
                    lf_id: format!("tiny{s}"),
                    origin: (0, 0),
                }
            })
            .collect()
    }

    #[test]
    fn zero_iterations_return_initialized_weights() {
        let mut cfg = tiny_config();
        cfg.iters = [0, 0, 0];
        let data = tiny_samples(4, 10);
        let mut log = TrainLog::default();
        let w_d = train_stage1_disparity(&data, &cfg, &mut log).unwrap();
        assert_eq!(w_d, cfg.init_disparity::<f64>().unwrap());
        assert!(log.entries.is_empty());
    }

    #[test]
    fn stage1_reduces_loss_and_is_deterministic() {
        let mut cfg = tiny_config();
        cfg.iters[0] = 40;
        cfg.adam.lr = 1e-3;
        let data = tiny_samples(4, 10);
        let mut log = TrainLog::default();
        let w1 = train_stage1_disparity(&data, &cfg, &mut log).unwrap();
        assert!(log.entries.last().unwrap().loss < log.entries[0].loss);

        let mut log2 = TrainLog::default();
        let w2 = train_stage1_disparity(&data, &cfg, &mut log2).unwrap();
        assert_eq!(w1, w2);
        for (a, b) in log.entries.iter().zip(&log2.entries) {
            assert_eq!(a.loss, b.loss);
        }
    }

    #[test]
    fn stage2_freezes_disparity_net() {
        let cfg = tiny_config();
        let data = tiny_samples(4, 10);
        let mut log = TrainLog::default();
        let w_d = train_stage1_disparity(&data, &cfg, &mut log).unwrap();
        let before = w_d.clone();
        let _w_c = train_stage2_color(&data, &w_d, &cfg, &mut log).unwrap();
        assert_eq!(w_d, before);
        assert!(log.entries.iter().any(|e| e.stage == Stage::Color));
    }

    #[test]
    fn stage3_with_zero_lr_keeps_weights() {
        let mut cfg = tiny_config();
        let data = tiny_samples(4, 10);
        let mut log = TrainLog::default();
        let w_d = train_stage1_disparity(&data, &cfg, &mut log).unwrap();
        let w_c = train_stage2_color(&data, &w_d, &cfg, &mut log).unwrap();
        cfg.adam.lr = 0.0;
        let (w_d2, w_c2) =
            train_stage3_joint(&data, w_d.clone(), w_c.clone(), &cfg, &mut log).unwrap();
        assert_eq!(w_d2, w_d);
        assert_eq!(w_c2, w_c);
    }

    #[test]
    fn identical_pred_and_gt_give_zero_gradients() {
        let cfg = tiny_config();
        let pipe = cfg.pipeline();
        let mut data = tiny_samples(1, 10);
        let w_d = cfg.init_disparity::<f64>().unwrap();
        let w_c = cfg.init_color::<f64>().unwrap();
        // make the ground truth exactly the pipeline's current output
        let fwd = sample_forward(&data[0], &w_d, &w_c, &pipe).unwrap();
        data[0].gt_patch = fwd.color_fwd.output.clone();
        let (e, gd, gc) = end_to_end_gradients(&data[0], &w_d, &w_c, &pipe).unwrap();
        assert_eq!(e, 0.0);
        for lg in gd.layers.iter().chain(gc.layers.iter()) {
            assert!(lg.kernel.data().iter().all(|&v| v == 0.0));
            assert!(lg.bias.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_sample_gradients() {
        let cfg = tiny_config();
        let pipe = cfg.pipeline();
        let data = tiny_samples(3, 10);
        let w_d = cfg.init_disparity::<f64>().unwrap();
        let w_c = cfg.init_color::<f64>().unwrap();
        let per: Vec<_> = data
            .iter()
            .map(|s| end_to_end_gradients(s, &w_d, &w_c, &pipe).unwrap())
            .collect();
        let results: Vec<Result<_>> = per
            .iter()
            .map(|(e, gd, gc)| Ok((*e, [gd.clone(), gc.clone()])))
            .collect();
        let (loss, [gd, _gc]) = reduce_batch(results, &[0, 1, 2], 1).unwrap();
        let mean_loss = per.iter().map(|(e, _, _)| e).sum::<f64>() / 3.0;
        assert!((loss - mean_loss).abs() < 1e-12);
        let manual: f64 =
            per.iter().map(|(_, g, _)| g.layers[0].kernel.data()[5]).sum::<f64>() / 3.0;
        assert!((gd.layers[0].kernel.data()[5] - manual).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_with_state() {
        let cfg = tiny_config();
        let w_d = cfg.init_disparity::<f32>().unwrap();
        let w_c = cfg.init_color::<f32>().unwrap();
        let mut sd = OptimizerState::new(&w_d);
        sd.t = 17;
        sd.layers[0].m_kernel[3] = 0.25;
        let sc = OptimizerState::new(&w_c);
        let model = Model {
            disparity: w_d,
            color: w_c,
            sweep: cfg.sweep,
            grid_size: 8,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.lfnn");
        save_checkpoint(&path, &model, Some((&sd, &sc))).unwrap();
        let (back, states) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back.disparity, model.disparity);
        let (bsd, _bsc) = states.unwrap();
        assert_eq!(bsd.t, 17);
        assert_eq!(bsd.layers[0].m_kernel[3], 0.25);

        // a checkpoint also loads as a plain model
        let plain: Model<f32> = crate::nets::load_model(&path).unwrap();
        assert_eq!(plain.color, model.color);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let cfg = tiny_config();
        let mut data = tiny_samples(2, 10);
        data[1].gt_patch.data_mut()[0] = f64::NAN;
        let mut log = TrainLog::default();
        let err = train_stage1_disparity(&data, &cfg, &mut log).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }));
    }
}
