//! Quality metrics (PSNR, SSIM) and the non-learned baselines the trained
//! pipeline is compared against.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::lfio::{
    disparity_filename, load_dataset_manifest, load_lfv, load_lightfield, GridCoord, LightField,
    ViewCoord,
};
use crate::nets::Model;
use crate::pipeline::synthesize;
use crate::sweep::{compute_features, disparity_levels, FeatureStack, Region, SweepConfig};
use crate::tensor::{Real, Tensor};
use crate::warp::{backward_warp, DisparityMap};

/// Peak signal-to-noise ratio in dB for signals on [0, 1], capped at 99.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "psnr",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut mse = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64c() - y.to_f64c();
        mse += d * d;
    }
    mse /= a.data().len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        99.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(99.0)
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Separable valid-mode Gaussian filter on a single-channel f64 map.
fn gaussian_filter(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let taps = gaussian_taps();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * img[y * w + x + k];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, oh, ow)
}

/// Mean local structural similarity on luminance, 11x11 Gaussian window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, peak 1.0.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "ssim",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (h, w, _) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(
            "ssim",
            format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let la: Vec<f64> = a.luminance().data().iter().map(|v| v.to_f64c()).collect();
    let lb: Vec<f64> = b.luminance().data().iter().map(|v| v.to_f64c()).collect();
    let sq = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x * x).collect() };
    let prod: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| x * y).collect();

    let (mu_a, oh, ow) = gaussian_filter(&la, h, w);
    let (mu_b, _, _) = gaussian_filter(&lb, h, w);
    let (e_aa, _, _) = gaussian_filter(&sq(&la), h, w);
    let (e_bb, _, _) = gaussian_filter(&sq(&lb), h, w);
    let (e_ab, _, _) = gaussian_filter(&prod, h, w);

    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut acc = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        acc += s;
    }
    Ok(acc / (oh * ow) as f64)
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

/// The corner view nearest to `q` (Euclidean in grid units, ties resolved
/// toward the first corner in fixed order, i.e. toward `(0,0)`).
pub fn baseline_nearest_view<T: Real>(lf: &LightField<T>, q: ViewCoord) -> Result<Tensor<T>> {
    let mut best: Option<(f64, GridCoord)> = None;
    for id in lf.corners() {
        let (du, dv) = q.offset_from(id);
        let d2 = du * du + dv * dv;
        if best.map_or(true, |(bd, _)| d2 < bd) {
            best = Some((d2, id));
        }
    }
    let (_, id) = best.expect("four corners");
    Ok(lf.view(id)?.clone())
}

/// Per-pixel winner-take-all disparity: the level whose cross-view standard
/// deviation is smallest, ties broken toward the smaller |level|.
pub fn wta_disparity<T: Real>(features: &FeatureStack<T>) -> DisparityMap<T> {
    let levels = disparity_levels(&features.config);
    let (h, w, _) = features.data.shape();
    let mut out = Tensor::zeros(h, w, 1);
    let nl = levels.len();
    let nch = 2 * nl;
    let dd = out.data_mut();
    for (i, px) in features.data.data().chunks_exact(nch).enumerate() {
        let mut best_l = 0usize;
        let mut best_v = f64::INFINITY;
        for (l, &d) in levels.iter().enumerate() {
            let v = px[2 * l + 1].to_f64c();
            if v < best_v || (v == best_v && d.abs() < levels[best_l].abs()) {
                best_v = v;
                best_l = l;
            }
        }
        dd[i] = T::of(levels[best_l]);
    }
    DisparityMap { values: out }
}

/// Classical plane-sweep baseline: winner-take-all disparity from the V
/// channels, then an unweighted mean of all warped inputs.
pub fn baseline_wta_blend<T: Real>(
    lf: &LightField<T>,
    q: ViewCoord,
    cfg: &SweepConfig,
) -> Result<Tensor<T>> {
    let corners = lf.corner_views()?;
    let (h, w, c) = corners[0].shape();
    let features = compute_features(lf, q, Region::full(h, w), cfg)?;
    let disp = wta_disparity(&features);
    let offsets: Vec<(f64, f64)> = lf.corners().iter().map(|&p| q.offset_from(p)).collect();

    let mut blend = Tensor::zeros(h, w, c);
    let inv = T::of(1.0 / corners.len() as f64);
    for (src, &off) in corners.iter().zip(&offsets) {
        let warped = backward_warp(src, &disp, off)?;
        for (b, &v) in blend.data_mut().iter_mut().zip(warped.data()) {
            *b += v;
        }
    }
    for b in blend.data_mut() {
        *b *= inv;
    }
    Ok(blend)
}

// ---------------------------------------------------------------------------
// Occlusion masks from ground-truth disparity sidecars
// ---------------------------------------------------------------------------

/// Pixels of the view at `q` that are occluded in at least one input view:
/// following the ground-truth disparity into input view `i` lands on a
/// surface with different disparity there.
pub fn occlusion_mask(
    disp_q: &Tensor<f32>,
    corner_disps: &[&Tensor<f32>; 4],
    offsets: &[(f64, f64); 4],
) -> Vec<bool> {
    let (h, w, _) = disp_q.shape();
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let d = disp_q.get(y, x, 0) as f64;
            for (cd, &(du, dv)) in corner_disps.iter().zip(offsets) {
                let sx = (x as f64 + du * d).round().clamp(0.0, (w - 1) as f64) as usize;
                let sy = (y as f64 + dv * d).round().clamp(0.0, (h - 1) as f64) as usize;
                if (cd.get(sy, sx, 0) as f64 - d).abs() > 1e-3 {
                    mask[y * w + x] = true;
                    break;
                }
            }
        }
    }
    mask
}

/// PSNR restricted to masked pixels; `None` when the mask is empty.
pub fn psnr_masked<T: Real>(a: &Tensor<T>, b: &Tensor<T>, mask: &[bool]) -> Result<Option<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "psnr_masked",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (h, w, c) = a.shape();
    if mask.len() != h * w {
        return Err(Error::dim("psnr_masked", "mask size".to_string()));
    }
    let mut mse = 0.0f64;
    let mut count = 0usize;
    for (i, (&m, (pa, pb))) in mask
        .iter()
        .zip(a.data().chunks_exact(c).zip(b.data().chunks_exact(c)))
        .enumerate()
    {
        let _ = i;
        if !m {
            continue;
        }
        for (&x, &y) in pa.iter().zip(pb) {
            let d = x.to_f64c() - y.to_f64c();
            mse += d * d;
        }
        count += c;
    }
    if count == 0 {
        return Ok(None);
    }
    Ok(Some(psnr_from_mse(mse / count as f64)))
}

// ---------------------------------------------------------------------------
// Dataset evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewEval {
    pub scene: String,
    pub u: u32,
    pub v: u32,
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR over occlusion-band pixels only, when ground-truth disparity
    /// sidecars exist and the band is non-empty.
    pub psnr_occluded: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_psnr_occluded: Option<f64>,
    pub views: Vec<ViewEval>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    /// Pixels excluded from each image border before computing metrics.
    pub margin: usize,
    pub methods: Vec<MethodReport>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Views to evaluate; all non-corner grid positions when empty.
    pub positions: Vec<GridCoord>,
    /// Also evaluate the non-learned baselines.
    pub baselines: bool,
}

fn aggregate(method: &str, mut views: Vec<ViewEval>) -> MethodReport {
    views.sort_by(|a, b| (&a.scene, a.v, a.u).cmp(&(&b.scene, b.v, b.u)));
    let n = views.len().max(1) as f64;
    let mean_psnr = views.iter().map(|v| v.psnr).sum::<f64>() / n;
    let mean_ssim = views.iter().map(|v| v.ssim).sum::<f64>() / n;
    let occ: Vec<f64> = views.iter().filter_map(|v| v.psnr_occluded).collect();
    let mean_psnr_occluded = if occ.is_empty() {
        None
    } else {
        Some(occ.iter().sum::<f64>() / occ.len() as f64)
    };
    MethodReport {
        method: method.to_string(),
        mean_psnr,
        mean_ssim,
        mean_psnr_occluded,
        views,
    }
}

/// Synthesize every requested view of every scene, compare against ground
/// truth inside the valid-margin region, and aggregate per method.
pub fn evaluate(model: &Model<f32>, dataset: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let manifest = load_dataset_manifest(dataset)?;
    let margin = model.total_margin();
    let mut methods: Vec<(&str, Vec<ViewEval>)> = vec![("ours", Vec::new())];
    if opts.baselines {
        methods.push(("wta-blend", Vec::new()));
        methods.push(("nearest", Vec::new()));
    }

    for scene in &manifest.scenes {
        let dir = dataset.join(scene);
        let lf: LightField<f32> = load_lightfield(&dir)?;
        let positions = if opts.positions.is_empty() {
            lf.non_corner_positions()
        } else {
            opts.positions.clone()
        };
        let (h, w, _) = lf
            .view_shape()
            .ok_or_else(|| Error::Config(format!("scene {scene} has no views")))?;
        let corner_ids = lf.corners();
        let sidecars: Option<Vec<Tensor<f32>>> = {
            let paths: Vec<_> = corner_ids
                .iter()
                .map(|id| dir.join(disparity_filename(id.u, id.v)))
                .collect();
            if paths.iter().all(|p| p.exists()) {
                Some(
                    paths
                        .iter()
                        .map(|p| load_lfv::<f32>(p))
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            }
        };

        // Each view evaluation is independent.
        let per_view: Vec<Result<Vec<(usize, ViewEval)>>> =
            exec::map_indexed(positions.len(), |pi| {
                let pos = positions[pi];
                let q: ViewCoord = pos.into();
                let gt_full = lf.view(pos)?;
                let gt = gt_full.crop(margin, margin, h - 2 * margin, w - 2 * margin)?;

                let occ_mask = match &sidecars {
                    Some(cds) => {
                        let dq = load_lfv::<f32>(&dir.join(disparity_filename(pos.u, pos.v)))?;
                        let dq = dq.crop(margin, margin, h - 2 * margin, w - 2 * margin)?;
                        let refs: [&Tensor<f32>; 4] = [&cds[0], &cds[1], &cds[2], &cds[3]];
                        // offsets relative to the cropped frame are unchanged;
                        // the sidecar lookup below uses full-frame coords.
                        Some(cropped_occlusion_mask(&dq, &refs, margin, &corner_ids, q))
                    }
                    None => None,
                };

                let mut rows = Vec::new();
                let synth = synthesize(model, &lf, q)?;
                rows.push((0usize, eval_one(scene, pos, &synth.image, &gt, occ_mask.as_deref())?));
                if opts.baselines {
                    let wta = baseline_wta_blend(&lf, q, &model.sweep)?
                        .crop(margin, margin, h - 2 * margin, w - 2 * margin)?;
                    rows.push((1, eval_one(scene, pos, &wta, &gt, occ_mask.as_deref())?));
                    let near = baseline_nearest_view(&lf, q)?
                        .crop(margin, margin, h - 2 * margin, w - 2 * margin)?;
                    rows.push((2, eval_one(scene, pos, &near, &gt, occ_mask.as_deref())?));
                }
                Ok(rows)
            });
        for r in per_view {
            for (mi, row) in r? {
                methods[mi].1.push(row);
            }
        }
    }

    Ok(EvalReport {
        dataset: dataset.display().to_string(),
        margin,
        methods: methods
            .into_iter()
            .map(|(name, views)| aggregate(name, views))
            .collect(),
    })
}

/// Occlusion mask for the margin-cropped frame; the disparity lookups happen
/// in full-frame coordinates.
fn cropped_occlusion_mask(
    disp_q_cropped: &Tensor<f32>,
    corner_disps: &[&Tensor<f32>; 4],
    margin: usize,
    corner_ids: &[GridCoord; 4],
    q: ViewCoord,
) -> Vec<bool> {
    let (ch, cw, _) = disp_q_cropped.shape();
    let (fh, fw, _) = corner_disps[0].shape();
    let offsets: Vec<(f64, f64)> = corner_ids.iter().map(|&p| q.offset_from(p)).collect();
    let mut mask = vec![false; ch * cw];
    for y in 0..ch {
        for x in 0..cw {
            let d = disp_q_cropped.get(y, x, 0) as f64;
            let (fy, fx) = (y + margin, x + margin);
            for (cd, &(du, dv)) in corner_disps.iter().zip(&offsets) {
                let sx = (fx as f64 + du * d).round().clamp(0.0, (fw - 1) as f64) as usize;
                let sy = (fy as f64 + dv * d).round().clamp(0.0, (fh - 1) as f64) as usize;
                if (cd.get(sy, sx, 0) as f64 - d).abs() > 1e-3 {
                    mask[y * cw + x] = true;
                    break;
                }
            }
        }
    }
    mask
}

fn eval_one(
    scene: &str,
    pos: GridCoord,
    pred: &Tensor<f32>,
    gt: &Tensor<f32>,
    occ_mask: Option<&[bool]>,
) -> Result<ViewEval> {
    Ok(ViewEval {
        scene: scene.to_string(),
        u: pos.u,
        v: pos.v,
        psnr: psnr(pred, gt)?,
        ssim: ssim(pred, gt)?,
        psnr_occluded: match occ_mask {
            Some(m) => psnr_masked(pred, gt, m)?,
            None => None,
        },
    })
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("report serialization: {e}")))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,scene,u,v,psnr,ssim,psnr_occluded\n");
        for m in &self.methods {
            for v in &m.views {
                let occ = v
                    .psnr_occluded
                    .map(|x| x.to_string())
                    .unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    m.method, v.scene, v.u, v.v, v.psnr, v.ssim, occ
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_spot_values() {
        // MSE of 0.01 gives 20 dB
        let a = Tensor::<f64>::filled(4, 4, 3, 0.0);
        let b = Tensor::<f64>::filled(4, 4, 3, 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);

        // identical images cap at 99
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);

        // unit error floor: 0 dB
        let z = Tensor::<f64>::filled(4, 4, 3, 0.0);
        let o = Tensor::<f64>::filled(4, 4, 3, 1.0);
        assert_eq!(psnr(&z, &o).unwrap(), 0.0);
    }

    fn textured(seed: usize) -> Tensor<f64> {
        Tensor::from_fn(16, 16, 3, |y, x, c| {
            (((y * 31 + x * 17 + c * 5 + seed * 7) % 23) as f64) / 23.0
        })
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = textured(0);
        let b = textured(1);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_images_reduce_to_luminance_term() {
        let a = Tensor::<f64>::filled(16, 16, 1, 0.4);
        let b = Tensor::<f64>::filled(16, 16, 1, 0.5);
        let c1 = 0.0001;
        let expect = (2.0 * 0.4 * 0.5 + c1) / (0.4 * 0.4 + 0.5 * 0.5 + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ssim_inverted_binary_image_is_negative() {
        let a = Tensor::<f64>::from_fn(16, 16, 1, |y, x, _| ((y / 2 + x / 3) % 2) as f64);
        let b = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::<f64>::zeros(8, 8, 1);
        assert!(ssim(&a, &a).is_err());
    }

    fn corner_field(f: impl Fn(GridCoord) -> Tensor<f32>) -> LightField<f32> {
        let mut lf = LightField::new(8);
        for id in LightField::<f32>::corner_ids(8) {
            lf.views.insert(id, f(id));
        }
        lf
    }

    #[test]
    fn nearest_view_selection_and_tiebreak() {
        let lf = corner_field(|id| Tensor::filled(8, 8, 3, (id.u * 10 + id.v) as f32));
        // at a corner, that corner wins
        let at = baseline_nearest_view(&lf, ViewCoord::new(7.0, 0.0)).unwrap();
        assert_eq!(at.get(0, 0, 0), 70.0);
        let e = psnr(&at, lf.view(GridCoord::new(7, 0)).unwrap()).unwrap();
        assert_eq!(e, 99.0);

        // grid center ties toward (0,0)
        let center = baseline_nearest_view(&lf, ViewCoord::new(3.5, 3.5)).unwrap();
        assert_eq!(center.get(0, 0, 0), 0.0);

        // output is bitwise one of the inputs
        let any = baseline_nearest_view(&lf, ViewCoord::new(5.0, 1.0)).unwrap();
        assert!(lf.views.values().any(|v| *v == any));
    }

    #[test]
    fn wta_tie_breaks_toward_small_magnitude() {
        // textureless field: V = 0 at every level, so the smallest |d| wins
        let lf = corner_field(|_| Tensor::filled(16, 16, 3, 0.5));
        let cfg = SweepConfig::new(5, -2.0, 2.0).unwrap();
        let fs = compute_features(&lf, ViewCoord::new(3.0, 3.0), Region::full(16, 16), &cfg).unwrap();
        let disp = wta_disparity(&fs);
        assert!(disp.values.data().iter().all(|&d| d == 0.0));

        // constant color comes through regardless of disparity
        let blend = baseline_wta_blend(&lf, ViewCoord::new(3.0, 3.0), &cfg).unwrap();
        for &v in blend.data() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn wta_blend_reconstructs_flat_synthetic_scene() {
        use crate::synthgen::{render_lightfield, Layer, Pattern, SceneSpec, Texture};
        let spec = SceneSpec {
            width: 64,
            height: 64,
            grid_size: 8,
            layers: vec![Layer {
                disparity: 0.9,
                texture: Texture {
                    pattern: Pattern::Noise {
                        seed: 3,
                        cell: 7.0,
                        octaves: 2,
                    },
                    color_a: [0.1, 0.3, 0.2],
                    color_b: [0.9, 0.7, 0.8],
                },
                mask: None,
            }],
            noise_sigma: 0.0,
            seed: 1,
        };
        let (lf, _) = render_lightfield(&spec).unwrap();
        let cfg = SweepConfig::new(32, -1.6, 1.6).unwrap();
        let q = GridCoord::new(3, 4);
        let blend = baseline_wta_blend(&lf, q.into(), &cfg).unwrap();
        let gt = lf.view(q).unwrap();
        // borders sample clamped ghosts; score the interior
        let b = blend.crop(10, 10, 44, 44).unwrap();
        let g = gt.crop(10, 10, 44, 44).unwrap();
        assert!(psnr(&b, &g).unwrap() > 35.0);
    }

    #[test]
    fn masked_psnr_and_empty_mask() {
        let a = Tensor::<f32>::filled(4, 4, 1, 0.0);
        let mut b = a.clone();
        b.set(0, 0, 0, 1.0);
        let mut mask = vec![false; 16];
        assert_eq!(psnr_masked(&a, &b, &mask).unwrap(), None);
        mask[0] = true;
        assert_eq!(psnr_masked(&a, &b, &mask).unwrap(), Some(0.0));
        mask[0] = false;
        mask[5] = true;
        assert_eq!(psnr_masked(&a, &b, &mask).unwrap(), Some(99.0));
    }
}
