//! Plane-sweep feature extraction.
//!
//! For each of `L` predefined disparity levels, every input view is
//! backward-warped to the novel view with that constant disparity and
//! converted to luminance; the per-pixel mean and sample standard deviation
//! across the warped views form two feature channels per level. At the
//! correct disparity of an unoccluded Lambertian pixel all views agree, so
//! the standard deviation dips — the signal the disparity network learns to
//! read.
//!
//! Statistics are scalar per level (luminance, mean of R,G,B), giving the
//! `2L`-channel stack.

use crate::error::{Error, Result};
use crate::exec;
use crate::lfio::{LightField, ViewCoord};
use crate::tensor::{Real, Tensor};
use crate::warp::{clamped_taps, keys_weights};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SweepConfig {
    /// Number of disparity levels.
    pub levels: usize,
    /// Disparity range endpoints, in pixels per unit angular-grid offset.
    pub d_min: f64,
    pub d_max: f64,
}

impl SweepConfig {
    pub fn new(levels: usize, d_min: f64, d_max: f64) -> Result<Self> {
        let cfg = SweepConfig {
            levels,
            d_min,
            d_max,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full-scale defaults: 100 levels over [-21, 21] pixels per grid step.
    pub fn full_default() -> Self {
        SweepConfig {
            levels: 100,
            d_min: -21.0,
            d_max: 21.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!(
                "need at least 2 disparity levels, got {}",
                self.levels
            )));
        }
        if !(self.d_min < self.d_max) {
            return Err(Error::Config(format!(
                "disparity range [{}, {}] is empty",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        2 * self.levels
    }

    pub fn spacing(&self) -> f64 {
        (self.d_max - self.d_min) / (self.levels - 1) as f64
    }

    /// Index of the level nearest to disparity `d`.
    pub fn nearest_level(&self, d: f64) -> usize {
        let i = ((d - self.d_min) / self.spacing()).round() as isize;
        i.clamp(0, self.levels as isize - 1) as usize
    }
}

/// `L` uniformly spaced disparity values from `d_min` to `d_max` inclusive.
pub fn disparity_levels(cfg: &SweepConfig) -> Vec<f64> {
    let n = cfg.levels;
    (0..n)
        .map(|l| cfg.d_min + (cfg.d_max - cfg.d_min) * l as f64 / (n - 1) as f64)
        .collect()
}

/// Rectangular image region, origin plus size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Region {
    pub fn full(height: usize, width: usize) -> Self {
        Region {
            x: 0,
            y: 0,
            width,
            height,
        }
    }
}

/// The 2L-channel plane-sweep stack, channels ordered
/// `[M_1, V_1, M_2, V_2, ...]`.
#[derive(Clone, Debug)]
pub struct FeatureStack<T = f32> {
    pub data: Tensor<T>,
    pub config: SweepConfig,
}

impl<T: Real> FeatureStack<T> {
    #[inline]
    pub fn mean_channel(level: usize) -> usize {
        2 * level
    }
    #[inline]
    pub fn std_channel(level: usize) -> usize {
        2 * level + 1
    }

    /// Debug dump to the float container.
    pub fn dump(&self, path: &std::path::Path) -> Result<()> {
        crate::lfio::save_lfv(&self.data, path)
    }
}

/// Plane-sweep features for a region of the novel view `q`, warping the four
/// corner views of `lf`.
pub fn compute_features<T: Real>(
    lf: &LightField<T>,
    q: ViewCoord,
    region: Region,
    cfg: &SweepConfig,
) -> Result<FeatureStack<T>> {
    cfg.validate()?;
    let corners = lf.corner_views()?;
    let offsets: Vec<(f64, f64)> = lf.corners().iter().map(|&p| q.offset_from(p)).collect();
    let (h, w, _) = corners[0].shape();
    if region.x + region.width > w || region.y + region.height > h {
        return Err(Error::dim(
            "compute_features",
            format!("region outside {h}x{w} view bounds"),
        ));
    }
    compute_features_from_views(&corners, &offsets, region, cfg)
}

/// Workhorse shared by full-frame synthesis (views are whole sub-aperture
/// images) and patch-level training (views are the sample's input patches).
pub fn compute_features_from_views<T: Real>(
    views: &[&Tensor<T>],
    offsets: &[(f64, f64)],
    region: Region,
    cfg: &SweepConfig,
) -> Result<FeatureStack<T>> {
    cfg.validate()?;
    if views.is_empty() || views.len() != offsets.len() {
        return Err(Error::dim(
            "compute_features",
            format!("{} views vs {} offsets", views.len(), offsets.len()),
        ));
    }
    let n = views.len();
    if n < 2 {
        return Err(Error::Config(
            "plane-sweep statistics need at least two views".into(),
        ));
    }
    let shape = views[0].shape();
    for v in views {
        if v.shape() != shape {
            return Err(Error::dim("compute_features", "views differ in shape"));
        }
    }
    let lumas: Vec<Tensor<T>> = views.iter().map(|v| v.luminance()).collect();
    let levels = disparity_levels(cfg);
    let nl = levels.len();
    let nch = 2 * nl;
    let (rw, rh) = (region.width, region.height);
    let inv_n = T::one() / T::of(n as f64);
    let inv_n1 = T::one() / T::of((n - 1) as f64);

    // Process blocks of output rows; per block and level, warp all views with
    // the constant per-level shift (separable two-pass bicubic) and reduce to
    // mean/std. Every scratch buffer stays cache-resident.
    let mut out = Tensor::zeros(rh, rw, nch);
    exec::for_each_row_block(out.data_mut(), rw * nch, 8, |y0, block| {
        let rows = block.len() / (rw * nch);
        let sub = Region {
            x: region.x,
            y: region.y + y0,
            width: rw,
            height: rows,
        };
        let mut hall = Vec::new();
        let mut warped = vec![T::zero(); n * rows * rw];
        for (l, &d) in levels.iter().enumerate() {
            for (i, luma) in lumas.iter().enumerate() {
                let (du, dv) = offsets[i];
                warp_constant_into(
                    luma,
                    (du * d, dv * d),
                    sub,
                    &mut hall,
                    &mut warped[i * rows * rw..(i + 1) * rows * rw],
                );
            }
            for y in 0..rows {
                for x in 0..rw {
                    let mut sum = T::zero();
                    for i in 0..n {
                        sum += warped[(i * rows + y) * rw + x];
                    }
                    let m = sum * inv_n;
                    let mut var = T::zero();
                    for i in 0..n {
                        let dlt = warped[(i * rows + y) * rw + x] - m;
                        var += dlt * dlt;
                    }
                    block[(y * rw + x) * nch + 2 * l] = m;
                    block[(y * rw + x) * nch + 2 * l + 1] = (var * inv_n1).sqrt();
                }
            }
        }
    });
    Ok(FeatureStack {
        data: out,
        config: *cfg,
    })
}

/// Warp a single-channel image by a constant shift, writing the `region`
/// window into `dst`. Separable bicubic: one horizontal 4-tap pass per source
/// row into `hall`, then a vertical 4-tap combine. Same Keys kernel and
/// clamp-to-edge policy as `warp::bicubic_sample`.
fn warp_constant_into<T: Real>(
    luma: &Tensor<T>,
    shift: (f64, f64),
    region: Region,
    hall: &mut Vec<T>,
    dst: &mut [T],
) {
    let (vh, vw, _) = luma.shape();
    let (rw, rh) = (region.width, region.height);
    debug_assert_eq!(dst.len(), rh * rw);
    let bx = shift.0.floor();
    let by = shift.1.floor();
    let wx = keys_weights(T::of(shift.0 - bx));
    let wy = keys_weights(T::of(shift.1 - by));
    let x0 = region.x as isize + bx as isize - 1;
    let y0 = region.y as isize + by as isize - 1;

    // Only the source rows the vertical taps can touch get a horizontal pass.
    let r_lo = y0.clamp(0, vh as isize - 1) as usize;
    let r_hi = (y0 + rh as isize + 2).clamp(0, vh as isize - 1) as usize;
    hall.clear();
    hall.resize((r_hi - r_lo + 1) * rw, T::zero());
    let src = luma.data();
    // Interior columns read four consecutive pixels; edges clamp per tap.
    let xlo = (-x0).clamp(0, rw as isize) as usize;
    let xhi = (vw as isize - 3 - x0).clamp(xlo as isize, rw as isize) as usize;
    for r in r_lo..=r_hi {
        let srow = &src[r * vw..(r + 1) * vw];
        let hrow = &mut hall[(r - r_lo) * rw..(r - r_lo + 1) * rw];
        for x in 0..xlo {
            hrow[x] = clamped_htap(srow, x0 + x as isize, &wx);
        }
        if xhi > xlo {
            let base = (x0 + xlo as isize) as usize;
            let s0 = &srow[base..base + (xhi - xlo) + 3];
            for (x, h) in hrow[xlo..xhi].iter_mut().enumerate() {
                *h = wx[0] * s0[x] + wx[1] * s0[x + 1] + wx[2] * s0[x + 2] + wx[3] * s0[x + 3];
            }
        }
        for x in xhi..rw {
            hrow[x] = clamped_htap(srow, x0 + x as isize, &wx);
        }
    }
    for y in 0..rh {
        let ys = clamped_taps(y0 + 1 + y as isize, vh).map(|r| r - r_lo);
        let (r0, r1, r2, r3) = (
            &hall[ys[0] * rw..ys[0] * rw + rw],
            &hall[ys[1] * rw..ys[1] * rw + rw],
            &hall[ys[2] * rw..ys[2] * rw + rw],
            &hall[ys[3] * rw..ys[3] * rw + rw],
        );
        let drow = &mut dst[y * rw..(y + 1) * rw];
        for x in 0..rw {
            drow[x] = wy[0] * r0[x] + wy[1] * r1[x] + wy[2] * r2[x] + wy[3] * r3[x];
        }
    }
}

#[inline]
fn clamped_htap<T: Real>(srow: &[T], x0: isize, wx: &[T; 4]) -> T {
    let hi = (srow.len() - 1) as isize;
    let mut acc = T::zero();
    for (k, &w) in wx.iter().enumerate() {
        let xi = (x0 + k as isize).clamp(0, hi) as usize;
        acc = acc + w * srow[xi];
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lfio::GridCoord;

    #[test]
    fn level_grids_are_inclusive_and_uniform() {
        let cfg = SweepConfig::new(100, -21.0, 21.0).unwrap();
        let levels = disparity_levels(&cfg);
        assert_eq!(levels.len(), 100);
        assert_eq!(levels[0], -21.0);
        assert_eq!(*levels.last().unwrap(), 21.0);
        let spacing = 42.0 / 99.0;
        for w in levels.windows(2) {
            assert!((w[1] - w[0] - spacing).abs() < 1e-12);
        }

        assert_eq!(disparity_levels(&SweepConfig::new(2, 0.0, 1.0).unwrap()), vec![0.0, 1.0]);
        assert_eq!(
            disparity_levels(&SweepConfig::new(3, -1.0, 1.0).unwrap()),
            vec![-1.0, 0.0, 1.0]
        );
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(SweepConfig::new(1, 0.0, 1.0).is_err());
        assert!(SweepConfig::new(4, 2.0, 1.0).is_err());
        assert!(SweepConfig::new(4, 1.0, 1.0).is_err());
    }

    #[test]
    fn zero_baseline_views_have_zero_std() {
        // Degenerate light field: all views identical AND at the same angular
        // position, so every level warps every view identically.
        let img = Tensor::<f64>::from_fn(16, 16, 3, |y, x, c| ((y * 13 + x * 7 + c) % 11) as f64 / 11.0);
        let cfg = SweepConfig::new(4, -1.0, 1.0).unwrap();
        let off = (0.4, -0.6);
        let fs = compute_features_from_views(
            &[&img, &img, &img, &img],
            &[off, off, off, off],
            Region::full(16, 16),
            &cfg,
        )
        .unwrap();
        assert_eq!(fs.data.channels(), 8);
        for l in 0..4 {
            let sc = FeatureStack::<f64>::std_channel(l);
            for y in 0..16 {
                for x in 0..16 {
                    assert!(fs.data.get(y, x, sc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn two_view_mean_and_std_formula() {
        // Two warped luminance values 0.2 and 0.4 at a pixel: M = 0.3,
        // V = sqrt(0.02) with the N-1 divisor.
        let a = Tensor::<f64>::filled(6, 6, 3, 0.2);
        let b = Tensor::<f64>::filled(6, 6, 3, 0.4);
        let cfg = SweepConfig::new(2, -0.5, 0.5).unwrap();
        let fs = compute_features_from_views(
            &[&a, &b],
            &[(0.3, -0.2), (-0.1, 0.4)],
            Region::full(6, 6),
            &cfg,
        )
        .unwrap();
        for l in 0..2 {
            let m = fs.data.get(3, 3, FeatureStack::<f64>::mean_channel(l));
            let v = fs.data.get(3, 3, FeatureStack::<f64>::std_channel(l));
            assert!((m - 0.3).abs() < 1e-12);
            assert!((v - 0.02f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_views_leaves_features_unchanged() {
        let mk = |s: usize| {
            Tensor::<f64>::from_fn(10, 10, 3, |y, x, c| {
                (((y * 3 + x * 5 + c * 7 + s * 11) % 13) as f64) / 13.0
            })
        };
        let (a, b, c, d) = (mk(0), mk(1), mk(2), mk(3));
        let offs = [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)];
        let cfg = SweepConfig::new(3, -0.8, 0.8).unwrap();
        let f1 = compute_features_from_views(&[&a, &b, &c, &d], &offs, Region::full(10, 10), &cfg)
            .unwrap();
        let perm_offs = [offs[2], offs[0], offs[3], offs[1]];
        let f2 = compute_features_from_views(
            &[&c, &a, &d, &b],
            &perm_offs,
            Region::full(10, 10),
            &cfg,
        )
        .unwrap();
        for (x, y) in f1.data.data().iter().zip(f2.data.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_bounded_by_warped_extremes_and_std_zero_iff_agreement() {
        // With zero offsets the "warped" views are the views themselves.
        let a = Tensor::<f64>::from_fn(5, 5, 1, |y, x, _| ((y + x) % 3) as f64 * 0.3);
        let b = Tensor::<f64>::from_fn(5, 5, 1, |y, x, _| ((y * x) % 4) as f64 * 0.2);
        let cfg = SweepConfig::new(2, -1.0, 1.0).unwrap();
        let fs =
            compute_features_from_views(&[&a, &b], &[(0.0, 0.0), (0.0, 0.0)], Region::full(5, 5), &cfg)
                .unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let (av, bv) = (a.get(y, x, 0), b.get(y, x, 0));
                for l in 0..2 {
                    let m = fs.data.get(y, x, FeatureStack::<f64>::mean_channel(l));
                    let v = fs.data.get(y, x, FeatureStack::<f64>::std_channel(l));
                    assert!(m >= av.min(bv) - 1e-12 && m <= av.max(bv) + 1e-12);
                    assert!(v >= 0.0);
                    if (av - bv).abs() < 1e-15 {
                        assert!(v.abs() < 1e-12);
                    } else {
                        assert!(v > 0.0);
                    }
                }
            }
        }
    }

    /// Fronto-parallel scene with known disparity: the per-pixel argmin over
    /// the V channels should pick the level nearest the true disparity on
    /// textured pixels.
    #[test]
    fn photo_consistency_argmin_recovers_disparity() {
        let true_d = 0.83;
        let g = 3u32;
        let center = (g - 1) as f64 / 2.0;
        let tex = |x: f64, y: f64| {
            0.5 + 0.25 * (x * 0.9).sin() + 0.2 * (y * 0.7).cos() + 0.05 * ((x + y) * 1.3).sin()
        };
        let size = 48usize;
        let mut lf = LightField::<f64>::new(g);
        for v in 0..g {
            for u in 0..g {
                let (ou, ov) = (u as f64 - center, v as f64 - center);
                let img = Tensor::from_fn(size, size, 3, |y, x, _| {
                    tex(x as f64 - true_d * ou, y as f64 - true_d * ov)
                });
                lf.views.insert(GridCoord::new(u, v), img);
            }
        }
        let cfg = SweepConfig::new(16, -1.5, 1.5).unwrap();
        let q = ViewCoord::new(1.0, 1.0);
        let fs = compute_features(&lf, q, Region::full(size, size), &cfg).unwrap();
        let expect = cfg.nearest_level(true_d);

        // Score only textured interior pixels (borders sample clamped ghosts).
        let margin = 6usize;
        let ref_view = lf.view(GridCoord::new(1, 1)).unwrap().luminance();
        let mut hits = 0usize;
        let mut total = 0usize;
        for y in margin..size - margin {
            for x in margin..size - margin {
                let gx = ref_view.get(y, x + 1, 0) - ref_view.get(y, x - 1, 0);
                let gy = ref_view.get(y + 1, x, 0) - ref_view.get(y - 1, x, 0);
                if (gx * gx + gy * gy).sqrt() < 0.02 {
                    continue;
                }
                total += 1;
                let mut best = 0usize;
                let mut best_v = f64::INFINITY;
                for l in 0..cfg.levels {
                    let v = fs.data.get(y, x, FeatureStack::<f64>::std_channel(l));
                    if v < best_v {
                        best_v = v;
                        best = l;
                    }
                }
                if best == expect {
                    hits += 1;
                }
            }
        }
        assert!(total > 200, "scene too flat to test ({total} textured pixels)");
        let frac = hits as f64 / total as f64;
        assert!(frac >= 0.95, "argmin correct on only {:.1}%", frac * 100.0);
    }
}
