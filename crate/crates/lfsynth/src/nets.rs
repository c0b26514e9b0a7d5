//! The two task networks: the disparity estimator mapping plane-sweep
//! features to a disparity map, and the color predictor mapping warped views
//! plus context channels to the synthesized image.
//!
//! Both share the same fully-convolutional structure: a chain of valid
//! convolutions with strictly decreasing odd kernel sizes, each but the last
//! followed by a ReLU. With the default kernels 7,5,3,1 each network shrinks
//! its input by 12 pixels per side pair, so a 60x60 patch comes out as 36x36
//! after both.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::lfio::ViewCoord;
use crate::sweep::{FeatureStack, SweepConfig};
use crate::tensor::{
    conv2d_backward_input, conv2d_backward_params, conv2d_forward, relu_backward, relu_forward,
    ConvLayer, Real, Tensor,
};
use crate::warp::DisparityMap;

pub const DEFAULT_KERNELS: [usize; 4] = [7, 5, 3, 1];
pub const DEFAULT_WIDTHS: [usize; 3] = [100, 100, 50];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetRole {
    Disparity,
    Color,
}

impl NetRole {
    fn tag(self) -> u8 {
        match self {
            NetRole::Disparity => 0,
            NetRole::Color => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(NetRole::Disparity),
            1 => Ok(NetRole::Color),
            _ => Err(Error::Config(format!("unknown network role tag {t}"))),
        }
    }
}

/// Ordered convolution layers of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T = f32> {
    pub role: NetRole,
    pub layers: Vec<ConvLayer<T>>,
}

/// Forward-pass cache: the input seen by each convolution (post-ReLU for all
/// but the first) plus the final output.
pub struct NetForward<T> {
    pub inputs: Vec<Tensor<T>>,
    pub output: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct LayerGrads<T> {
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
}

/// Parameter gradients (layer order matching [`NetworkParams::layers`]) and,
/// when requested, the gradient with respect to the network input.
#[derive(Clone, Debug)]
pub struct NetGradients<T> {
    pub layers: Vec<LayerGrads<T>>,
    pub input: Option<Tensor<T>>,
}

impl<T: Real> NetGradients<T> {
    pub fn zeros_like(params: &NetworkParams<T>) -> Self {
        NetGradients {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrads {
                    kernel: Tensor::zeros(l.kernel_size, l.kernel_size, l.in_channels * l.out_channels),
                    bias: vec![T::zero(); l.out_channels],
                })
                .collect(),
            input: None,
        }
    }

    pub fn add_assign(&mut self, other: &NetGradients<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, &y) in a.kernel.data_mut().iter_mut().zip(b.kernel.data()) {
                *x += y;
            }
            for (x, &y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for l in self.layers.iter_mut() {
            for x in l.kernel.data_mut() {
                *x *= s;
            }
            for x in l.bias.iter_mut() {
                *x *= s;
            }
        }
    }
}

/// Weights drawn uniform in ±sqrt(6 / (fan_in + fan_out)) with
/// fan = k² · channels; biases zero.
pub fn xavier_init<T: Real, R: Rng>(
    role: NetRole,
    kernels: &[usize],
    channels: &[usize],
    rng: &mut R,
) -> Result<NetworkParams<T>> {
    if channels.len() != kernels.len() + 1 {
        return Err(Error::Config(format!(
            "{} kernels need {} channel counts, got {}",
            kernels.len(),
            kernels.len() + 1,
            channels.len()
        )));
    }
    for w in kernels.windows(2) {
        if w[1] >= w[0] {
            return Err(Error::Config(format!(
                "kernel sizes must strictly decrease, got {kernels:?}"
            )));
        }
    }
    let mut layers = Vec::with_capacity(kernels.len());
    for (i, &k) in kernels.iter().enumerate() {
        let (ci, co) = (channels[i], channels[i + 1]);
        let mut layer = ConvLayer::<T>::new(k, ci, co)?;
        let fan_in = (k * k * ci) as f64;
        let fan_out = (k * k * co) as f64;
        let bound = (6.0 / (fan_in + fan_out)).sqrt();
        for w in layer.kernel.data_mut() {
            *w = T::of(rng.gen_range(-bound..bound));
        }
        layers.push(layer);
    }
    Ok(NetworkParams { role, layers })
}

impl<T: Real> NetworkParams<T> {
    /// Disparity estimator: 2L feature channels in, one disparity channel out.
    pub fn disparity<R: Rng>(
        levels: usize,
        kernels: &[usize],
        widths: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut channels = vec![2 * levels];
        channels.extend_from_slice(widths);
        channels.push(1);
        xavier_init(NetRole::Disparity, kernels, &channels, rng)
    }

    /// Color predictor: 3N+3 channels in, RGB out.
    pub fn color<R: Rng>(
        n_views: usize,
        kernels: &[usize],
        widths: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut channels = vec![3 * n_views + 3];
        channels.extend_from_slice(widths);
        channels.push(3);
        xavier_init(NetRole::Color, kernels, &channels, rng)
    }

    pub fn in_channels(&self) -> usize {
        self.layers.first().map(|l| l.in_channels).unwrap_or(0)
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.out_channels).unwrap_or(0)
    }

    /// Total spatial shrinkage: sum of (k - 1) over the layers.
    pub fn spatial_reduction(&self) -> usize {
        self.layers.iter().map(|l| l.kernel_size - 1).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.parameter_count()).sum()
    }

    /// Forward pass keeping the activations needed for backprop.
    pub fn forward(&self, input: &Tensor<T>) -> Result<NetForward<T>> {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut cur = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = conv2d_forward(&cur, layer)?;
            inputs.push(cur);
            cur = if i + 1 < n { relu_forward(&z) } else { z };
        }
        Ok(NetForward {
            inputs,
            output: cur,
        })
    }

    /// Forward pass without caching.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.layers.len();
        let mut cur = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = conv2d_forward(&cur, layer)?;
            cur = if i + 1 < n { relu_forward(&z) } else { z };
        }
        Ok(cur)
    }

    /// Exact analytic gradients with respect to all weights, biases and
    /// (optionally) the network input.
    pub fn backward(
        &self,
        fwd: &NetForward<T>,
        grad_out: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<NetGradients<T>> {
        if grad_out.shape() != fwd.output.shape() {
            return Err(Error::dim(
                "network_backward",
                format!("{:?} vs output {:?}", grad_out.shape(), fwd.output.shape()),
            ));
        }
        let n = self.layers.len();
        let mut layer_grads: Vec<Option<LayerGrads<T>>> = (0..n).map(|_| None).collect();
        let mut g = grad_out.clone();
        let mut input_grad = None;
        for l in (0..n).rev() {
            let input = &fwd.inputs[l];
            let layer = &self.layers[l];
            let (gk, gb) = conv2d_backward_params(input, layer, &g)?;
            layer_grads[l] = Some(LayerGrads {
                kernel: gk,
                bias: gb,
            });
            if l > 0 {
                let gi = conv2d_backward_input(input.shape(), layer, &g)?;
                // `input` is the post-ReLU activation of layer l-1, so its
                // positivity doubles as the ReLU mask.
                g = relu_backward(input, &gi)?;
            } else if need_input_grad {
                input_grad = Some(conv2d_backward_input(input.shape(), layer, &g)?);
            }
        }
        Ok(NetGradients {
            layers: layer_grads.into_iter().map(|g| g.unwrap()).collect(),
            input: input_grad,
        })
    }
}

/// Disparity network wrapper: checks the feature stack matches the network
/// and wraps the single-channel output.
pub fn disparity_forward<T: Real>(
    features: &FeatureStack<T>,
    params: &NetworkParams<T>,
) -> Result<DisparityMap<T>> {
    if features.data.channels() != params.in_channels() {
        return Err(Error::dim(
            "disparity_forward",
            format!(
                "feature stack has {} channels, network expects {}",
                features.data.channels(),
                params.in_channels()
            ),
        ));
    }
    DisparityMap::new(params.infer(&features.data)?)
}

/// The color network's input: warped views in fixed corner order, the
/// disparity, and two constant channels holding the normalized novel-view
/// position.
#[derive(Clone, Debug)]
pub struct ColorFeatureStack<T = f32> {
    pub data: Tensor<T>,
}

pub fn assemble_color_features<T: Real>(
    warped: &[Tensor<T>],
    disp: &DisparityMap<T>,
    q: ViewCoord,
    grid_size: u32,
) -> Result<ColorFeatureStack<T>> {
    let (h, w, _) = disp.values.shape();
    for t in warped {
        if t.height() != h || t.width() != w {
            return Err(Error::dim(
                "assemble_color_features",
                format!("warped {:?} vs disparity {h}x{w}", t.shape()),
            ));
        }
    }
    let nch: usize = warped.iter().map(|t| t.channels()).sum::<usize>() + 3;
    let extent = (grid_size - 1) as f64;
    let qu = T::of(q.u / extent);
    let qv = T::of(q.v / extent);

    let mut out = Tensor::zeros(h, w, nch);
    let dvals = disp.values.data();
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * nch;
            let mut c = 0;
            let od = out.data_mut();
            for t in warped {
                let px = t.pixel(y, x);
                od[base + c..base + c + px.len()].copy_from_slice(px);
                c += px.len();
            }
            od[base + c] = dvals[y * w + x];
            od[base + c + 1] = qu;
            od[base + c + 2] = qv;
        }
    }
    Ok(ColorFeatureStack { data: out })
}

/// Color network wrapper.
pub fn color_forward<T: Real>(
    features: &ColorFeatureStack<T>,
    params: &NetworkParams<T>,
) -> Result<Tensor<T>> {
    if features.data.channels() != params.in_channels() {
        return Err(Error::dim(
            "color_forward",
            format!(
                "color features have {} channels, network expects {}",
                features.data.channels(),
                params.in_channels()
            ),
        ));
    }
    params.infer(&features.data)
}

// ---------------------------------------------------------------------------
// Model file (LFNN)
// ---------------------------------------------------------------------------

/// Both networks plus the sweep configuration and grid metadata they were
/// trained with.
#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub disparity: NetworkParams<T>,
    pub color: NetworkParams<T>,
    pub sweep: SweepConfig,
    pub grid_size: u32,
}

impl<T: Real> Model<T> {
    /// Pixels lost per side through both networks.
    pub fn total_margin(&self) -> usize {
        (self.disparity.spatial_reduction() + self.color.spatial_reduction()) / 2
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let conv_net = |net: &NetworkParams<T>| NetworkParams {
            role: net.role,
            layers: net
                .layers
                .iter()
                .map(|l| ConvLayer {
                    kernel: l.kernel.cast::<U>(),
                    bias: l.bias.iter().map(|&b| U::of(b.to_f64c())).collect(),
                    kernel_size: l.kernel_size,
                    in_channels: l.in_channels,
                    out_channels: l.out_channels,
                })
                .collect(),
        };
        Model {
            disparity: conv_net(&self.disparity),
            color: conv_net(&self.color),
            sweep: self.sweep,
            grid_size: self.grid_size,
        }
    }
}

const LFNN_MAGIC: &[u8; 4] = b"LFNN";
const LFNN_VERSION: u16 = 1;

fn write_f32s<T: Real, W: Write>(w: &mut W, vals: &[T]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 4);
    for &v in vals {
        buf.extend_from_slice(&v.to_f32c().to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_f32s<T: Real, R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<T>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| T::of_f32(f32::from_le_bytes(c.try_into().unwrap())))
        .collect())
}

pub(crate) fn write_network<T: Real, W: Write>(
    w: &mut W,
    net: &NetworkParams<T>,
) -> std::io::Result<()> {
    w.write_all(&[net.role.tag()])?;
    w.write_all(&(net.layers.len() as u16).to_le_bytes())?;
    for l in &net.layers {
        for dim in [l.kernel_size as u32, l.in_channels as u32, l.out_channels as u32] {
            w.write_all(&dim.to_le_bytes())?;
        }
        write_f32s(w, l.kernel.data())?;
        write_f32s(w, &l.bias)?;
    }
    Ok(())
}

pub(crate) fn read_network<T: Real, R: Read>(r: &mut R) -> Result<NetworkParams<T>> {
    let io = |e: std::io::Error| Error::io("<model>", e);
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1).map_err(io)?;
    let role = NetRole::from_tag(b1[0])?;
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2).map_err(io)?;
    let n_layers = u16::from_le_bytes(b2) as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let mut dims = [0usize; 3];
        let mut b4 = [0u8; 4];
        for d in dims.iter_mut() {
            r.read_exact(&mut b4).map_err(io)?;
            *d = u32::from_le_bytes(b4) as usize;
        }
        let [k, ci, co] = dims;
        let weights = read_f32s::<T, _>(r, k * k * ci * co).map_err(io)?;
        let bias = read_f32s::<T, _>(r, co).map_err(io)?;
        layers.push(ConvLayer {
            kernel: Tensor::from_vec(k, k, ci * co, weights)?,
            bias,
            kernel_size: k,
            in_channels: ci,
            out_channels: co,
        });
    }
    Ok(NetworkParams { role, layers })
}

pub(crate) fn write_model_to<T: Real, W: Write>(w: &mut W, model: &Model<T>) -> std::io::Result<()> {
    w.write_all(LFNN_MAGIC)?;
    w.write_all(&LFNN_VERSION.to_le_bytes())?;
    w.write_all(&model.grid_size.to_le_bytes())?;
    w.write_all(&(model.sweep.levels as u32).to_le_bytes())?;
    w.write_all(&model.sweep.d_min.to_le_bytes())?;
    w.write_all(&model.sweep.d_max.to_le_bytes())?;
    write_network(w, &model.disparity)?;
    write_network(w, &model.color)
}

pub(crate) fn read_model_from<T: Real, R: Read>(r: &mut R, path: &Path) -> Result<Model<T>> {
    let io = |e: std::io::Error| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != LFNN_MAGIC {
        return Err(Error::format(path, "bad magic, expected LFNN"));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2).map_err(io)?;
    let version = u16::from_le_bytes(b2);
    if version != LFNN_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io)?;
    let grid_size = u32::from_le_bytes(b4);
    r.read_exact(&mut b4).map_err(io)?;
    let levels = u32::from_le_bytes(b4) as usize;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(io)?;
    let d_min = f64::from_le_bytes(b8);
    r.read_exact(&mut b8).map_err(io)?;
    let d_max = f64::from_le_bytes(b8);
    let disparity = read_network(r)?;
    let color = read_network(r)?;
    if disparity.role != NetRole::Disparity || color.role != NetRole::Color {
        return Err(Error::format(path, "network role tags out of order"));
    }
    Ok(Model {
        disparity,
        color,
        sweep: SweepConfig::new(levels, d_min, d_max)?,
        grid_size,
    })
}

pub fn save_model<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_model_to(&mut w, model).map_err(|e| Error::io(path, e))?;
    // No trailing optimizer state.
    w.write_all(&[0u8]).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_model<T: Real>(path: &Path) -> Result<Model<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    read_model_from(&mut r, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn xavier_bound_and_zero_bias() {
        let net: NetworkParams<f64> =
            xavier_init(NetRole::Disparity, &[3, 1], &[1, 1, 1], &mut rng(1)).unwrap();
        let bound = (6.0f64 / 18.0).sqrt(); // fan_in = fan_out = 9
        assert!((bound - 0.5774).abs() < 1e-4);
        for &w in net.layers[0].kernel.data() {
            assert!(w.abs() < bound);
        }
        assert!(net.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn same_seed_same_params() {
        let a: NetworkParams<f32> =
            NetworkParams::disparity(8, &[5, 3, 1], &[6, 4], &mut rng(42)).unwrap();
        let b: NetworkParams<f32> =
            NetworkParams::disparity(8, &[5, 3, 1], &[6, 4], &mut rng(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kernel_sizes_must_decrease() {
        assert!(xavier_init::<f32, _>(NetRole::Color, &[5, 5, 3], &[3, 4, 4, 3], &mut rng(0)).is_err());
        assert!(xavier_init::<f32, _>(NetRole::Color, &[3, 5], &[3, 4, 3], &mut rng(0)).is_err());
    }

    #[test]
    fn disparity_net_shapes() {
        let mut r = rng(3);
        let net: NetworkParams<f32> =
            NetworkParams::disparity(100, &DEFAULT_KERNELS, &[4, 4, 4], &mut r).unwrap();
        assert_eq!(net.in_channels(), 200);
        assert_eq!(net.spatial_reduction(), 12);
        let input = Tensor::from_fn(60, 60, 200, |y, x, c| ((y + x + c) % 7) as f32 * 0.1);
        let out = net.infer(&input).unwrap();
        assert_eq!(out.shape(), (48, 48, 1));

        // fully convolutional: arbitrary frame sizes work
        let frame = Tensor::zeros(70, 66, 200);
        assert_eq!(net.infer(&frame).unwrap().shape(), (58, 54, 1));
    }

    #[test]
    fn zero_weights_give_zero_disparity() {
        let mut r = rng(4);
        let mut net: NetworkParams<f32> =
            NetworkParams::disparity(4, &[3, 1], &[3], &mut r).unwrap();
        for l in net.layers.iter_mut() {
            for w in l.kernel.data_mut() {
                *w = 0.0;
            }
        }
        let input = Tensor::filled(10, 10, 8, 0.5);
        let out = net.infer(&input).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn color_feature_assembly() {
        let warped: Vec<Tensor<f32>> = (0..4).map(|i| Tensor::filled(5, 5, 3, i as f32 * 0.1)).collect();
        let disp = DisparityMap::constant(5, 5, 0.7f32);
        let h = assemble_color_features(&warped, &disp, ViewCoord::new(0.0, 0.0), 8).unwrap();
        assert_eq!(h.data.channels(), 15);
        assert_eq!(h.data.get(2, 2, 12), 0.7); // disparity channel
        assert_eq!(h.data.get(2, 2, 13), 0.0); // q_u at corner
        assert_eq!(h.data.get(2, 2, 14), 0.0); // q_v at corner
        assert_eq!(h.data.get(2, 2, 3), 0.1); // second view, R

        let h = assemble_color_features(&warped, &disp, ViewCoord::new(3.5, 3.5), 8).unwrap();
        assert_eq!(h.data.get(0, 0, 13), 0.5);
        assert_eq!(h.data.get(0, 0, 14), 0.5);
    }

    #[test]
    fn color_net_shapes_and_raw_output() {
        let mut r = rng(5);
        let mut net: NetworkParams<f32> =
            NetworkParams::color(4, &DEFAULT_KERNELS, &[4, 4, 4], &mut r).unwrap();
        assert_eq!(net.in_channels(), 15);
        let h = ColorFeatureStack {
            data: Tensor::filled(48, 48, 15, 0.3),
        };
        let out = color_forward(&h, &net).unwrap();
        assert_eq!(out.shape(), (36, 36, 3));

        // zero weights -> black image
        for l in net.layers.iter_mut() {
            for w in l.kernel.data_mut() {
                *w = 0.0;
            }
        }
        let out = color_forward(&h, &net).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        // no clamping on the last layer: a negative bias shows through
        let mut r = rng(6);
        let mut net: NetworkParams<f32> =
            NetworkParams::color(4, &[3, 1], &[2], &mut r).unwrap();
        for l in net.layers.iter_mut() {
            for w in l.kernel.data_mut() {
                *w = 0.0;
            }
        }
        net.layers.last_mut().unwrap().bias = vec![-0.5, 0.2, 1.7];
        let h = ColorFeatureStack {
            data: Tensor::filled(10, 10, 15, 0.3),
        };
        let out = color_forward(&h, &net).unwrap();
        assert_eq!(out.get(0, 0, 0), -0.5);
        assert_eq!(out.get(0, 0, 2), 1.7);
    }

    #[test]
    fn backward_zero_grad_gives_zero() {
        let mut r = rng(7);
        let net: NetworkParams<f64> = NetworkParams::disparity(2, &[3, 1], &[3], &mut r).unwrap();
        let input = Tensor::from_fn(6, 6, 4, |y, x, c| ((y * x + c) % 5) as f64 * 0.2);
        let fwd = net.forward(&input).unwrap();
        let g = Tensor::zeros(4, 4, 1);
        let grads = net.backward(&fwd, &g, true).unwrap();
        for lg in &grads.layers {
            assert!(lg.kernel.data().iter().all(|&v| v == 0.0));
            assert!(lg.bias.iter().all(|&v| v == 0.0));
        }
        assert!(grads.input.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_1x1_layer_is_linear_regression() {
        // out = w * x + b; dE/dw = sum x*g, dE/db = sum g, dE/dx = w*g.
        let mut net: NetworkParams<f64> = NetworkParams {
            role: NetRole::Color,
            layers: vec![ConvLayer::new(1, 1, 1).unwrap()],
        };
        *net.layers[0].weight_mut(0, 0, 0, 0) = 1.75;
        let x = Tensor::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let fwd = net.forward(&x).unwrap();
        let g = Tensor::from_vec(2, 2, 1, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let grads = net.backward(&fwd, &g, true).unwrap();
        let expect_w: f64 = x.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        assert!((grads.layers[0].kernel.get(0, 0, 0) - expect_w).abs() < 1e-12);
        let expect_b: f64 = g.data().iter().sum();
        assert!((grads.layers[0].bias[0] - expect_b).abs() < 1e-12);
        for (gi, gv) in grads.input.unwrap().data().iter().zip(g.data()) {
            assert!((gi - 1.75 * gv).abs() < 1e-12);
        }
    }

    #[test]
    fn patchwise_equals_full_frame_bitwise() {
        let mut r = rng(9);
        let net: NetworkParams<f32> =
            NetworkParams::disparity(3, &[5, 3, 1], &[4, 3], &mut r).unwrap();
        let frame = Tensor::from_fn(24, 30, 6, |y, x, c| {
            (((y * 31 + x * 17 + c * 7) % 29) as f32) / 29.0 - 0.3
        });
        let full = net.infer(&frame).unwrap(); // 16 x 22
        let red = net.spatial_reduction(); // 8
        let patch = frame.crop(4, 6, 16, 16).unwrap();
        let pout = net.infer(&patch).unwrap(); // 8 x 8 starting at full (4, 6)
        for y in 0..16 - red {
            for x in 0..16 - red {
                assert_eq!(pout.get(y, x, 0), full.get(y + 4, x + 6, 0));
            }
        }
    }

    #[test]
    fn translation_equivariance() {
        let mut r = rng(10);
        let net: NetworkParams<f32> =
            NetworkParams::disparity(2, &[3, 1], &[3], &mut r).unwrap();
        let frame = Tensor::from_fn(14, 20, 4, |y, x, c| (((y * 5 + x * 3 + c) % 13) as f32) * 0.07);
        let a = frame.crop(0, 0, 14, 14).unwrap();
        let b = frame.crop(0, 3, 14, 14).unwrap();
        let oa = net.infer(&a).unwrap();
        let ob = net.infer(&b).unwrap();
        for y in 0..oa.height() {
            for x in 0..oa.width() - 3 {
                assert_eq!(oa.get(y, x + 3, 0), ob.get(y, x, 0));
            }
        }
    }

    #[test]
    fn model_file_round_trip() {
        let mut r = rng(11);
        let model: Model<f32> = Model {
            disparity: NetworkParams::disparity(4, &[5, 3, 1], &[6, 4], &mut r).unwrap(),
            color: NetworkParams::color(4, &[5, 3, 1], &[5, 4], &mut r).unwrap(),
            sweep: SweepConfig::new(4, -1.5, 1.5).unwrap(),
            grid_size: 8,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.lfnn");
        save_model(&model, &path).unwrap();
        let back: Model<f32> = load_model(&path).unwrap();
        assert_eq!(back.disparity, model.disparity);
        assert_eq!(back.color, model.color);
        assert_eq!(back.sweep, model.sweep);
        assert_eq!(back.grid_size, 8);
    }
}
