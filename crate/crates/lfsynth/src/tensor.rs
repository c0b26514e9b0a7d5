//! Dense multi-dimensional arrays, valid-mode 2D convolution with backward
//! passes, and activations.
//!
//! Tensors are row-major, channel-interleaved (HWC), parameterized over the
//! float type so that gradient checks can run the identical code in double
//! precision while production paths stay in `f32`.

use crate::error::{Error, Result};
use crate::exec;

/// Float scalar the numeric core is generic over. Implemented for `f32`
/// (production) and `f64` (gradient-check builds).
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn to_f64c(self) -> f64;
    fn of_f32(x: f32) -> Self;
    fn to_f32c(self) -> f32;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64c(self) -> f64 {
        self as f64
    }
    #[inline]
    fn of_f32(x: f32) -> Self {
        x
    }
    #[inline]
    fn to_f32c(self) -> f32 {
        self
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64c(self) -> f64 {
        self
    }
    #[inline]
    fn of_f32(x: f32) -> Self {
        x as f64
    }
    #[inline]
    fn to_f32c(self) -> f32 {
        self as f32
    }
}

/// Dense (height, width, channels) array, row-major with interleaved
/// channels: index `(y, x, c)` maps to `(y * width + x) * channels + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Tensor {
            height,
            width,
            channels,
            data: vec![T::zero(); height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dim(
                "Tensor::from_vec",
                format!(
                    "data length {} != {}x{}x{}",
                    data.len(),
                    height,
                    width,
                    channels
                ),
            ));
        }
        Ok(Tensor {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Tensor {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Build from a per-pixel closure `f(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> T,
    ) -> Self {
        let mut t = Tensor::zeros(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    t.data[(y * width + x) * channels + c] = f(y, x, c);
                }
            }
        }
        t
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// All channels at pixel `(y, x)`.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[T] {
        let i = y * self.width * self.channels;
        &self.data[i..i + self.width * self.channels]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copy of the window starting at `(y0, x0)` with size `(h, w)`, all
    /// channels.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<T>> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::dim(
                "Tensor::crop",
                format!(
                    "window ({y0},{x0})+{h}x{w} outside {}x{}",
                    self.height, self.width
                ),
            ));
        }
        let c = self.channels;
        let mut out = Tensor::zeros(h, w, c);
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) * c;
            let dst = y * w * c;
            out.data[dst..dst + w * c].copy_from_slice(&self.data[src..src + w * c]);
        }
        Ok(out)
    }

    /// Single-channel slice as a new tensor.
    pub fn channel(&self, c: usize) -> Tensor<T> {
        let mut out = Tensor::zeros(self.height, self.width, 1);
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            out.data[i] = px[c];
        }
        out
    }

    /// Per-pixel mean of all channels; the luminance convention used
    /// throughout the crate.
    pub fn luminance(&self) -> Tensor<T> {
        let inv = T::of(1.0) / T::of(self.channels as f64);
        let mut out = Tensor::zeros(self.height, self.width, 1);
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            let mut s = T::zero();
            for &v in px {
                s += v;
            }
            out.data[i] = s * inv;
        }
        out
    }

    /// Convert the element type (used to move between f32 storage and f64
    /// gradient-check builds).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| U::of(v.to_f64c())).collect(),
        }
    }
}

/// One valid-mode convolution layer: square odd kernel, no padding, so the
/// output shrinks by `kernel_size - 1` in each spatial dimension.
///
/// Kernel weights live in a `(k, k, c_in * c_out)` tensor with the output
/// channel fastest: index `(ky, kx, ci * c_out + co)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T = f32> {
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl<T: Real> ConvLayer<T> {
    pub fn new(kernel_size: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        if kernel_size == 0 || kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd and positive, got {kernel_size}"
            )));
        }
        Ok(ConvLayer {
            kernel: Tensor::zeros(kernel_size, kernel_size, in_channels * out_channels),
            bias: vec![T::zero(); out_channels],
            kernel_size,
            in_channels,
            out_channels,
        })
    }

    #[inline]
    pub fn weight(&self, ky: usize, kx: usize, ci: usize, co: usize) -> T {
        self.kernel.get(ky, kx, ci * self.out_channels + co)
    }

    #[inline]
    pub fn weight_mut(&mut self, ky: usize, kx: usize, ci: usize, co: usize) -> &mut T {
        let oc = self.out_channels;
        let w = self.kernel.width();
        let ch = self.kernel.channels();
        &mut self.kernel.data_mut()[(ky * w + kx) * ch + ci * oc + co]
    }

    pub fn parameter_count(&self) -> usize {
        self.kernel.data().len() + self.bias.len()
    }
}

/// Gradients produced by [`conv2d_backward`].
pub struct ConvGrads<T> {
    pub grad_input: Tensor<T>,
    pub grad_kernel: Tensor<T>,
    pub grad_bias: Vec<T>,
}

fn check_conv_input<T: Real>(input: &Tensor<T>, layer: &ConvLayer<T>) -> Result<(usize, usize)> {
    let k = layer.kernel_size;
    if input.channels() != layer.in_channels {
        return Err(Error::dim(
            "conv2d",
            format!(
                "input has {} channels, kernel expects {}",
                input.channels(),
                layer.in_channels
            ),
        ));
    }
    if input.height() < k || input.width() < k {
        return Err(Error::dim(
            "conv2d",
            format!(
                "input {}x{} smaller than kernel {k}x{k}",
                input.height(),
                input.width()
            ),
        ));
    }
    Ok((input.height() - k + 1, input.width() - k + 1))
}

/// Forward kernel for one output row with a compile-time channel count.
///
/// Works on blocks of four output pixels so the accumulators live in
/// registers as independent dependency chains. Each output value is still
/// `bias + sum over (ky, kx*ic)` in exactly the order of the scalar path, so
/// blocked, remainder and dynamic paths agree bitwise.
fn conv_row_const<T: Real, const CO: usize>(
    idata: &[T],
    iw: usize,
    ic: usize,
    k: usize,
    wdata: &[T],
    bias: &[T],
    ow: usize,
    oy: usize,
    orow: &mut [T],
) {
    let kic = k * ic;
    let mut x = 0;
    while x + 4 <= ow {
        let mut acc = [[T::zero(); CO]; 4];
        for a in acc.iter_mut() {
            a.copy_from_slice(bias);
        }
        for ky in 0..k {
            let ibase = ((oy + ky) * iw + x) * ic;
            let irow = &idata[ibase..ibase + kic + 3 * ic];
            let wrow = &wdata[ky * kic * CO..(ky + 1) * kic * CO];
            for t in 0..kic {
                let ws = &wrow[t * CO..t * CO + CO];
                let iv = [irow[t], irow[t + ic], irow[t + 2 * ic], irow[t + 3 * ic]];
                for (a, &v) in acc.iter_mut().zip(&iv) {
                    for c in 0..CO {
                        a[c] = a[c] + v * ws[c];
                    }
                }
            }
        }
        for (p, a) in acc.iter().enumerate() {
            orow[(x + p) * CO..(x + p + 1) * CO].copy_from_slice(a);
        }
        x += 4;
    }
    while x < ow {
        let mut acc = [T::zero(); CO];
        acc.copy_from_slice(bias);
        for ky in 0..k {
            let ibase = ((oy + ky) * iw + x) * ic;
            let irow = &idata[ibase..ibase + kic];
            let wrow = &wdata[ky * kic * CO..(ky + 1) * kic * CO];
            for (t, &iv) in irow.iter().enumerate() {
                let ws = &wrow[t * CO..t * CO + CO];
                for c in 0..CO {
                    acc[c] = acc[c] + iv * ws[c];
                }
            }
        }
        orow[x * CO..(x + 1) * CO].copy_from_slice(&acc);
        x += 1;
    }
}

/// Fallback for output channel counts without a specialized kernel.
fn conv_row_dyn<T: Real>(
    idata: &[T],
    iw: usize,
    ic: usize,
    k: usize,
    oc: usize,
    wdata: &[T],
    bias: &[T],
    ow: usize,
    oy: usize,
    orow: &mut [T],
) {
    for ox in 0..ow {
        let acc = &mut orow[ox * oc..(ox + 1) * oc];
        acc.copy_from_slice(bias);
        for ky in 0..k {
            let ibase = ((oy + ky) * iw + ox) * ic;
            let irow = &idata[ibase..ibase + k * ic];
            let wrow = &wdata[ky * k * ic * oc..(ky + 1) * k * ic * oc];
            for (t, &iv) in irow.iter().enumerate() {
                let ws = &wrow[t * oc..(t + 1) * oc];
                for (a, &wv) in acc.iter_mut().zip(ws) {
                    *a = *a + iv * wv;
                }
            }
        }
    }
}

/// Valid 2D convolution (really cross-correlation, the CNN convention):
/// `out[y, x, co] = bias[co] + sum_{ky,kx,ci} in[y+ky, x+kx, ci] * w[ky, kx, ci, co]`.
pub fn conv2d_forward<T: Real>(input: &Tensor<T>, layer: &ConvLayer<T>) -> Result<Tensor<T>> {
    let (oh, ow) = check_conv_input(input, layer)?;
    let k = layer.kernel_size;
    let ic = layer.in_channels;
    let oc = layer.out_channels;
    let iw = input.width();
    let idata = input.data();
    let wdata = layer.kernel.data();
    let bias = &layer.bias;

    let mut out = Tensor::zeros(oh, ow, oc);
    // Rows are heavy enough to parallelize for full frames; per-output-value
    // accumulation order is fixed, so the schedule never changes results.
    let min_rows = (4096 / (ow * k * ic * oc).max(1)).max(1);
    exec::for_each_chunk(out.data_mut(), ow * oc, min_rows, |oy, orow| match oc {
        1 => conv_row_const::<T, 1>(idata, iw, ic, k, wdata, bias, ow, oy, orow),
        2 => conv_row_const::<T, 2>(idata, iw, ic, k, wdata, bias, ow, oy, orow),
        3 => conv_row_const::<T, 3>(idata, iw, ic, k, wdata, bias, ow, oy, orow),
        4 => conv_row_const::<T, 4>(idata, iw, ic, k, wdata, bias, ow, oy, orow),
        6 => conv_row_const::<T, 6>(idata, iw, ic, k, wdata, bias, ow, oy, orow),
        8 => conv_row_const::<T, 8>(idata, iw, ic, k, wdata, bias, ow, oy, orow),
        10 => conv_row_const::<T, 10>(idata, iw, ic, k, wdata, bias, ow, oy, orow),
        12 => conv_row_const::<T, 12>(idata, iw, ic, k, wdata, bias, ow, oy, orow),
        16 => conv_row_const::<T, 16>(idata, iw, ic, k, wdata, bias, ow, oy, orow),
        _ => conv_row_dyn(idata, iw, ic, k, oc, wdata, bias, ow, oy, orow),
    });
    Ok(out)
}

/// Exact analytic gradients of a scalar loss with respect to the convolution
/// input, kernel and bias, given the upstream gradient `grad_out`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    layer: &ConvLayer<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let grad_input = conv2d_backward_input(input.shape(), layer, grad_out)?;
    let (grad_kernel, grad_bias) = conv2d_backward_params(input, layer, grad_out)?;
    Ok(ConvGrads {
        grad_input,
        grad_kernel,
        grad_bias,
    })
}

fn check_grad_out<T: Real>(
    shape: (usize, usize, usize),
    layer: &ConvLayer<T>,
    grad_out: &Tensor<T>,
) -> Result<(usize, usize)> {
    let k = layer.kernel_size;
    let (ih, iw, ic) = shape;
    let oh = ih.checked_sub(k - 1).unwrap_or(0);
    let ow = iw.checked_sub(k - 1).unwrap_or(0);
    if ic != layer.in_channels {
        return Err(Error::dim(
            "conv2d_backward",
            format!("input channels {} != kernel {}", ic, layer.in_channels),
        ));
    }
    if grad_out.shape() != (oh, ow, layer.out_channels) {
        return Err(Error::dim(
            "conv2d_backward",
            format!(
                "grad_out shape {:?} does not match forward output ({oh}, {ow}, {})",
                grad_out.shape(),
                layer.out_channels
            ),
        ));
    }
    Ok((oh, ow))
}

/// Gradient with respect to the layer input only (the full correlation of
/// `grad_out` with the kernel).
pub fn conv2d_backward_input<T: Real>(
    input_shape: (usize, usize, usize),
    layer: &ConvLayer<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (oh, ow) = check_grad_out(input_shape, layer, grad_out)?;
    let (ih, iw, ic) = input_shape;
    let k = layer.kernel_size;
    let oc = layer.out_channels;
    let g = grad_out.data();
    let wdata = layer.kernel.data();

    let mut grad_input = Tensor::zeros(ih, iw, ic);
    let min_rows = (4096 / (iw * k * ic * oc).max(1)).max(1);
    exec::for_each_chunk(grad_input.data_mut(), iw * ic, min_rows, |iy, girow| {
        for ky in 0..k {
            // Output row contributing through kernel row ky.
            let Some(oy) = iy.checked_sub(ky) else { continue };
            if oy >= oh {
                continue;
            }
            let wrow = &wdata[ky * k * ic * oc..(ky + 1) * k * ic * oc];
            for kx in 0..k {
                let wk = &wrow[kx * ic * oc..(kx + 1) * ic * oc];
                for ox in 0..ow {
                    let ix = ox + kx;
                    let gs = &g[(oy * ow + ox) * oc..(oy * ow + ox + 1) * oc];
                    let gi = &mut girow[ix * ic..(ix + 1) * ic];
                    for ci in 0..ic {
                        let ws = &wk[ci * oc..(ci + 1) * oc];
                        let mut s = T::zero();
                        for (&a, &b) in ws.iter().zip(gs) {
                            s += a * b;
                        }
                        gi[ci] += s;
                    }
                }
            }
        }
    });
    Ok(grad_input)
}

/// Accumulate one output row's contribution to the `(ky, kx)` kernel slice
/// `gk[ci * CO + co] += irow[ox * ic + ci] * grow[ox * oc + co]`.
fn grad_kernel_row<T: Real, const CO: usize>(
    gk: &mut [T],
    irow: &[T],
    grow: &[T],
    ic: usize,
    ow: usize,
) {
    let mut ox = 0;
    while ox + 4 <= ow {
        let mut gs = [[T::zero(); CO]; 4];
        for (p, gp) in gs.iter_mut().enumerate() {
            gp.copy_from_slice(&grow[(ox + p) * CO..(ox + p + 1) * CO]);
        }
        let ib = &irow[ox * ic..(ox + 4) * ic];
        for ci in 0..ic {
            let iv = [ib[ci], ib[ci + ic], ib[ci + 2 * ic], ib[ci + 3 * ic]];
            let row = &mut gk[ci * CO..(ci + 1) * CO];
            for c in 0..CO {
                row[c] = row[c] + iv[0] * gs[0][c] + iv[1] * gs[1][c] + iv[2] * gs[2][c]
                    + iv[3] * gs[3][c];
            }
        }
        ox += 4;
    }
    while ox < ow {
        let gsl = &grow[ox * CO..(ox + 1) * CO];
        let ivs = &irow[ox * ic..(ox + 1) * ic];
        for (ci, &iv) in ivs.iter().enumerate() {
            let row = &mut gk[ci * CO..(ci + 1) * CO];
            for (a, &gv) in row.iter_mut().zip(gsl) {
                *a = *a + iv * gv;
            }
        }
        ox += 1;
    }
}

fn grad_kernel_row_dyn<T: Real>(gk: &mut [T], irow: &[T], grow: &[T], ic: usize, oc: usize, ow: usize) {
    for ox in 0..ow {
        let gsl = &grow[ox * oc..(ox + 1) * oc];
        let ivs = &irow[ox * ic..(ox + 1) * ic];
        for (ci, &iv) in ivs.iter().enumerate() {
            let row = &mut gk[ci * oc..(ci + 1) * oc];
            for (a, &gv) in row.iter_mut().zip(gsl) {
                *a = *a + iv * gv;
            }
        }
    }
}

/// Gradients with respect to kernel and bias only. Cheaper than
/// [`conv2d_backward`] when the input is data rather than an upstream
/// activation.
pub fn conv2d_backward_params<T: Real>(
    input: &Tensor<T>,
    layer: &ConvLayer<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (oh, ow) = check_grad_out(input.shape(), layer, grad_out)?;
    let k = layer.kernel_size;
    let ic = layer.in_channels;
    let oc = layer.out_channels;
    let iw = input.width();
    let idata = input.data();
    let g = grad_out.data();

    let mut grad_kernel = Tensor::zeros(k, k, ic * oc);
    // One task per kernel row keeps writes disjoint. Four output pixels are
    // folded per pass; the left-to-right sum keeps the accumulation order of
    // the scalar remainder loop, so results do not depend on the blocking.
    exec::for_each_chunk(grad_kernel.data_mut(), k * ic * oc, 1, |ky, gkrow| {
        for kx in 0..k {
            let gk = &mut gkrow[kx * ic * oc..(kx + 1) * ic * oc];
            for oy in 0..oh {
                let irow = &idata[((oy + ky) * iw + kx) * ic..((oy + ky) * iw + kx + ow) * ic];
                let grow = &g[oy * ow * oc..(oy + 1) * ow * oc];
                match oc {
                    1 => grad_kernel_row::<T, 1>(gk, irow, grow, ic, ow),
                    2 => grad_kernel_row::<T, 2>(gk, irow, grow, ic, ow),
                    3 => grad_kernel_row::<T, 3>(gk, irow, grow, ic, ow),
                    4 => grad_kernel_row::<T, 4>(gk, irow, grow, ic, ow),
                    6 => grad_kernel_row::<T, 6>(gk, irow, grow, ic, ow),
                    8 => grad_kernel_row::<T, 8>(gk, irow, grow, ic, ow),
                    10 => grad_kernel_row::<T, 10>(gk, irow, grow, ic, ow),
                    12 => grad_kernel_row::<T, 12>(gk, irow, grow, ic, ow),
                    16 => grad_kernel_row::<T, 16>(gk, irow, grow, ic, ow),
                    _ => grad_kernel_row_dyn(gk, irow, grow, ic, oc, ow),
                }
            }
        }
    });

    let mut grad_bias = vec![T::zero(); oc];
    for px in g.chunks_exact(oc) {
        for (b, &gv) in grad_bias.iter_mut().zip(px) {
            *b += gv;
        }
    }
    Ok((grad_kernel, grad_bias))
}

/// Elementwise `max(x, 0)`.
pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient passes where `x > 0`, zero elsewhere (including at exactly 0).
pub fn relu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return Err(Error::dim(
            "relu_backward",
            format!("{:?} vs {:?}", x.shape(), grad_out.shape()),
        ));
    }
    let mut out = grad_out.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer_from(k: usize, ci: usize, co: usize, f: impl Fn(usize, usize, usize, usize) -> f64) -> ConvLayer<f64> {
        let mut l = ConvLayer::<f64>::new(k, ci, co).unwrap();
        for ky in 0..k {
            for kx in 0..k {
                for i in 0..ci {
                    for o in 0..co {
                        *l.weight_mut(ky, kx, i, o) = f(ky, kx, i, o);
                    }
                }
            }
        }
        l
    }

    #[test]
    fn constant_window_dot_product() {
        let input = Tensor::<f64>::filled(3, 3, 1, 1.0);
        let layer = layer_from(3, 1, 1, |_, _, _, _| 1.0);
        let out = conv2d_forward(&input, &layer).unwrap();
        assert_eq!(out.shape(), (1, 1, 1));
        assert_eq!(out.get(0, 0, 0), 9.0);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let input = Tensor::<f64>::from_fn(5, 4, 1, |y, x, _| (y * 7 + x) as f64 * 0.13 - 1.0);
        let layer = layer_from(1, 1, 1, |_, _, _, _| 1.0);
        let out = conv2d_forward(&input, &layer).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn four_layer_spatial_reduction() {
        // 60x60 through kernels 7,5,3,1 loses 6+4+2+0 = 12 per dimension.
        let mut t = Tensor::<f64>::filled(60, 60, 2, 0.5);
        for (i, k) in [7usize, 5, 3, 1].into_iter().enumerate() {
            let layer = layer_from(k, t.channels(), 2, |_, _, _, _| 0.01 * (i + 1) as f64);
            t = conv2d_forward(&t, &layer).unwrap();
        }
        assert_eq!(t.shape(), (48, 48, 2));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let input = Tensor::<f64>::zeros(4, 4, 3);
        let layer = ConvLayer::<f64>::new(3, 2, 1).unwrap();
        assert!(matches!(
            conv2d_forward(&input, &layer),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn backward_zero_grad_out_gives_zero_grads() {
        let input = Tensor::<f64>::from_fn(4, 4, 2, |y, x, c| (y + x + c) as f64);
        let layer = layer_from(3, 2, 2, |ky, kx, i, o| (ky + kx + i + o) as f64 * 0.1);
        let g = Tensor::<f64>::zeros(2, 2, 2);
        let grads = conv2d_backward(&input, &layer, &g).unwrap();
        assert!(grads.grad_input.data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_kernel.data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_kernel_scalar_chain_rule() {
        let input = Tensor::<f64>::from_vec(1, 1, 1, vec![3.0]).unwrap();
        let layer = layer_from(1, 1, 1, |_, _, _, _| 2.0);
        let g = Tensor::<f64>::from_vec(1, 1, 1, vec![5.0]).unwrap();
        let grads = conv2d_backward(&input, &layer, &g).unwrap();
        assert_eq!(grads.grad_kernel.get(0, 0, 0), 15.0); // input * grad_out
        assert_eq!(grads.grad_input.get(0, 0, 0), 10.0); // weight * grad_out
        assert_eq!(grads.grad_bias[0], 5.0);
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::<f64>::from_vec(1, 3, 1, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);

        let pos = Tensor::<f64>::from_vec(1, 2, 1, vec![0.5, 3.0]).unwrap();
        assert_eq!(relu_forward(&pos), pos);

        let x = Tensor::<f64>::from_vec(1, 2, 1, vec![-1.0, 2.0]).unwrap();
        let g = Tensor::<f64>::from_vec(1, 2, 1, vec![5.0, 5.0]).unwrap();
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 5.0]);
    }

    #[test]
    fn conv_is_linear_in_the_input() {
        let a = Tensor::<f64>::from_fn(6, 5, 2, |y, x, c| ((y * 31 + x * 7 + c) % 13) as f64 * 0.1);
        let b = Tensor::<f64>::from_fn(6, 5, 2, |y, x, c| ((y * 17 + x * 3 + c) % 11) as f64 * 0.2);
        let layer = layer_from(3, 2, 3, |ky, kx, i, o| {
            ((ky * 5 + kx * 3 + i * 2 + o) % 7) as f64 * 0.05 - 0.1
        });
        let (alpha, beta) = (1.7, -0.6);

        let mixed = Tensor::from_vec(
            6,
            5,
            2,
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| alpha * x + beta * y)
                .collect(),
        )
        .unwrap();
        let lhs = conv2d_forward(&mixed, &layer).unwrap();
        let ca = conv2d_forward(&a, &layer).unwrap();
        let cb = conv2d_forward(&b, &layer).unwrap();
        for i in 0..lhs.data().len() {
            let rhs = alpha * ca.data()[i] + beta * cb.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-9);
        }
    }
}
