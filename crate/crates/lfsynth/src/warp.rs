//! Bicubic sampling and backward warping of views to a novel position.
//!
//! Warping view `p` to the novel view `q` with disparity `D` samples the
//! source at `s + (p - q) * D(s)`: the `u` component of the view offset
//! drives the horizontal shift and the `v` component the vertical shift.
//! Out-of-range coordinates clamp to the image edge. The derivative of the
//! warp with respect to disparity is taken numerically by central
//! differences.

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{Real, Tensor};

/// Per-pixel scalar disparity at the novel view, in pixels of image-space
/// shift per unit angular-grid offset.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap<T = f32> {
    pub values: Tensor<T>,
}

impl<T: Real> DisparityMap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.channels() != 1 {
            return Err(Error::dim(
                "DisparityMap::new",
                format!("expected 1 channel, got {}", values.channels()),
            ));
        }
        Ok(DisparityMap { values })
    }

    pub fn constant(height: usize, width: usize, d: T) -> Self {
        DisparityMap {
            values: Tensor::filled(height, width, 1, d),
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.values.get(y, x, 0)
    }
}

/// Keys cubic convolution weight (a = -0.5) for offset `t >= 0`.
///
/// Written so that small-integer arguments evaluate exactly: w(0) = 1 and
/// w(1) = w(2) = 0 in floating point, which makes sampling at integral
/// coordinates reproduce pixel values bitwise.
#[inline]
fn keys_weight<T: Real>(t: T) -> T {
    let one = T::one();
    let t = t.abs();
    if t < one {
        // (1.5 t - 2.5) t^2 + 1
        (T::of(1.5) * t - T::of(2.5)) * t * t + one
    } else if t < T::of(2.0) {
        // ((-0.5 t + 2.5) t - 4) t + 2
        ((T::of(-0.5) * t + T::of(2.5)) * t - T::of(4.0)) * t + T::of(2.0)
    } else {
        T::zero()
    }
}

/// The four Keys weights for a fractional offset `f` in [0, 1), covering taps
/// at floor-1, floor, floor+1, floor+2.
#[inline]
pub(crate) fn keys_weights<T: Real>(f: T) -> [T; 4] {
    [
        keys_weight(f + T::one()),
        keys_weight(f),
        keys_weight(T::one() - f),
        keys_weight(T::of(2.0) - f),
    ]
}

#[inline]
pub(crate) fn clamped_taps(base: isize, len: usize) -> [usize; 4] {
    let hi = (len - 1) as isize;
    [
        (base - 1).clamp(0, hi) as usize,
        base.clamp(0, hi) as usize,
        (base + 1).clamp(0, hi) as usize,
        (base + 2).clamp(0, hi) as usize,
    ]
}

/// Bicubic sample of one channel at real coordinates, clamp-to-edge.
pub fn bicubic_sample<T: Real>(img: &Tensor<T>, x: T, y: T, channel: usize) -> T {
    let (h, w, c) = img.shape();
    let xf = x.floor();
    let yf = y.floor();
    let wx = keys_weights(x - xf);
    let wy = keys_weights(y - yf);
    let xs = clamped_taps(xf.to_f64c() as isize, w);
    let ys = clamped_taps(yf.to_f64c() as isize, h);

    let data = img.data();
    let mut acc = T::zero();
    for (j, &yy) in ys.iter().enumerate() {
        let rowbase = yy * w;
        for (i, &xx) in xs.iter().enumerate() {
            let wgt = wy[j] * wx[i];
            acc = acc + wgt * data[(rowbase + xx) * c + channel];
        }
    }
    acc
}

/// Bicubic sample of every channel at once; `out` must have `channels`
/// entries. Channel c of the result equals `bicubic_sample(img, x, y, c)`.
pub fn bicubic_sample_multi<T: Real>(img: &Tensor<T>, x: T, y: T, out: &mut [T]) {
    let (h, w, c) = img.shape();
    debug_assert_eq!(out.len(), c);
    let xf = x.floor();
    let yf = y.floor();
    let wx = keys_weights(x - xf);
    let wy = keys_weights(y - yf);
    let xs = clamped_taps(xf.to_f64c() as isize, w);
    let ys = clamped_taps(yf.to_f64c() as isize, h);

    for o in out.iter_mut() {
        *o = T::zero();
    }
    let data = img.data();
    for (j, &yy) in ys.iter().enumerate() {
        let rowbase = yy * w;
        for (i, &xx) in xs.iter().enumerate() {
            let wgt = wy[j] * wx[i];
            let px = &data[(rowbase + xx) * c..(rowbase + xx + 1) * c];
            for (o, &v) in out.iter_mut().zip(px) {
                *o = *o + wgt * v;
            }
        }
    }
}

/// Backward-warp `src` toward the novel view.
///
/// `offset = p - q` in grid units, `(du, dv)`. The output has `disp`'s
/// spatial dims; when `disp` is smaller than `src` the sampling window is
/// center-aligned inside the source, so zero disparity reproduces the aligned
/// center crop exactly.
pub fn backward_warp<T: Real>(
    src: &Tensor<T>,
    disp: &DisparityMap<T>,
    offset: (f64, f64),
) -> Result<Tensor<T>> {
    let (dh, dw, _) = disp.values.shape();
    let (sh, sw, c) = src.shape();
    if dh > sh || dw > sw {
        return Err(Error::dim(
            "backward_warp",
            format!("disparity {dh}x{dw} larger than source {sh}x{sw}"),
        ));
    }
    let my = T::of(((sh - dh) / 2) as f64);
    let mx = T::of(((sw - dw) / 2) as f64);
    let du = T::of(offset.0);
    let dv = T::of(offset.1);

    let mut out = Tensor::zeros(dh, dw, c);
    let dvals = disp.values.data();
    exec::for_each_chunk(out.data_mut(), dw * c, (2048 / (dw * c).max(1)).max(1), |y, orow| {
        let ty = T::of(y as f64) + my;
        for x in 0..dw {
            let d = dvals[y * dw + x];
            let sx = T::of(x as f64) + mx + du * d;
            let sy = ty + dv * d;
            bicubic_sample_multi(src, sx, sy, &mut orow[x * c..(x + 1) * c]);
        }
    });
    Ok(out)
}

/// Central-difference derivative of the warped image with respect to the
/// disparity at each pixel: `(warp(D + h) - warp(D - h)) / 2h`, per channel.
pub fn warp_jacobian_numeric<T: Real>(
    src: &Tensor<T>,
    disp: &DisparityMap<T>,
    offset: (f64, f64),
    step: f64,
) -> Result<Tensor<T>> {
    if step <= 0.0 {
        return Err(Error::Config(format!("jacobian step must be > 0, got {step}")));
    }
    let h = T::of(step);
    let up = DisparityMap {
        values: disp.values.map(|v| v + h),
    };
    let dn = DisparityMap {
        values: disp.values.map(|v| v - h),
    };
    let a = backward_warp(src, &up, offset)?;
    let b = backward_warp(src, &dn, offset)?;
    let scale = T::one() / (T::of(2.0) * h);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&p, &m)| (p - m) * scale)
        .collect();
    let (dh, dw, c) = a.shape();
    Tensor::from_vec(dh, dw, c, data)
}
