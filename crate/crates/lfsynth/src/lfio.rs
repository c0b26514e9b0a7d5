//! Light-field container format, image import/export, and training patch
//! extraction.
//!
//! A light field on disk is a directory with a `manifest.json` (grid size,
//! view dimensions, view list) and one `view_{u}_{v}.lfv` file per view. The
//! `.lfv` container is bit-exact: magic `LFV1`, little-endian u32 height,
//! width, channels, then row-major 32-bit floats. An 8-bit PPM/PGM export
//! exists for eyeballing; the float container is authoritative.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Integer angular grid position of a stored view. `u` indexes horizontally
/// (x-parallax), `v` vertically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridCoord {
    pub u: u32,
    pub v: u32,
}

impl GridCoord {
    pub fn new(u: u32, v: u32) -> Self {
        GridCoord { u, v }
    }
}

/// Angular position of a (possibly novel) view. Fractional coordinates are
/// valid; positions slightly outside the grid hull mean extrapolation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewCoord {
    pub u: f64,
    pub v: f64,
}

impl ViewCoord {
    pub fn new(u: f64, v: f64) -> Self {
        ViewCoord { u, v }
    }

    /// Offset `p - q` from this view to a stored grid view, in grid units.
    pub fn offset_from(&self, p: GridCoord) -> (f64, f64) {
        (p.u as f64 - self.u, p.v as f64 - self.v)
    }

    pub fn inside_hull(&self, grid_size: u32) -> bool {
        let hi = (grid_size - 1) as f64;
        self.u >= 0.0 && self.u <= hi && self.v >= 0.0 && self.v <= hi
    }
}

impl From<GridCoord> for ViewCoord {
    fn from(g: GridCoord) -> Self {
        ViewCoord {
            u: g.u as f64,
            v: g.v as f64,
        }
    }
}

/// A rectangular angular grid of sub-aperture images. The four corner views
/// are the synthesis inputs.
#[derive(Clone, Debug)]
pub struct LightField<T = f32> {
    pub grid_size: u32,
    pub views: BTreeMap<GridCoord, Tensor<T>>,
}

impl<T: Real> LightField<T> {
    pub fn new(grid_size: u32) -> Self {
        LightField {
            grid_size,
            views: BTreeMap::new(),
        }
    }

    /// The four designated input views, in fixed order
    /// `(0,0), (0,g-1), (g-1,0), (g-1,g-1)`.
    pub fn corner_ids(grid_size: u32) -> [GridCoord; 4] {
        let g = grid_size - 1;
        [
            GridCoord::new(0, 0),
            GridCoord::new(0, g),
            GridCoord::new(g, 0),
            GridCoord::new(g, g),
        ]
    }

    pub fn corners(&self) -> [GridCoord; 4] {
        Self::corner_ids(self.grid_size)
    }

    pub fn view(&self, id: GridCoord) -> Result<&Tensor<T>> {
        self.views.get(&id).ok_or(Error::MissingView {
            u: id.u,
            v: id.v,
            path: PathBuf::new(),
        })
    }

    pub fn corner_views(&self) -> Result<[&Tensor<T>; 4]> {
        let ids = self.corners();
        Ok([
            self.view(ids[0])?,
            self.view(ids[1])?,
            self.view(ids[2])?,
            self.view(ids[3])?,
        ])
    }

    pub fn view_shape(&self) -> Option<(usize, usize, usize)> {
        self.views.values().next().map(|t| t.shape())
    }

    /// Grid positions that are not input corners, in deterministic order.
    pub fn non_corner_positions(&self) -> Vec<GridCoord> {
        let corners = self.corners();
        let g = self.grid_size;
        let mut out = Vec::new();
        for v in 0..g {
            for u in 0..g {
                let p = GridCoord::new(u, v);
                if !corners.contains(&p) {
                    out.push(p);
                }
            }
        }
        out
    }
}

/// One patch-level supervised example. Self-contained: carries the four
/// input patches and the ground-truth center crop.
#[derive(Clone, Debug)]
pub struct TrainingSample<T = f32> {
    /// Corner-view patches in fixed corner order, each `patch x patch x 3`.
    pub input_patches: Vec<Tensor<T>>,
    pub novel_pos: ViewCoord,
    /// Center crop of the ground-truth view at the novel position.
    pub gt_patch: Tensor<T>,
    pub lf_id: String,
    pub origin: (usize, usize),
}

// ---------------------------------------------------------------------------
// .lfv float container
// ---------------------------------------------------------------------------

const LFV_MAGIC: &[u8; 4] = b"LFV1";

/// Write a tensor to the lossless float container.
pub fn save_lfv<T: Real>(img: &Tensor<T>, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let werr = |e| Error::io(path, e);
    w.write_all(LFV_MAGIC).map_err(werr)?;
    let (h, wd, c) = img.shape();
    for dim in [h as u32, wd as u32, c as u32] {
        w.write_all(&dim.to_le_bytes()).map_err(werr)?;
    }
    let mut buf = Vec::with_capacity(img.data().len() * 4);
    for &v in img.data() {
        buf.extend_from_slice(&v.to_f32c().to_le_bytes());
    }
    w.write_all(&buf).map_err(werr)?;
    w.flush().map_err(werr)
}

/// Read a tensor from the float container.
pub fn load_lfv<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let rerr = |e| Error::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(rerr)?;
    if &magic != LFV_MAGIC {
        return Err(Error::format(path, "bad magic, expected LFV1"));
    }
    let mut dim = [0u8; 4];
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        r.read_exact(&mut dim).map_err(rerr)?;
        *d = u32::from_le_bytes(dim) as usize;
    }
    let [h, w, c] = dims;
    let n = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| Error::format(path, "dimension overflow"))?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(rerr)?;
    let mut data = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(4) {
        data.push(T::of_f32(f32::from_le_bytes(chunk.try_into().unwrap())));
    }
    Tensor::from_vec(h, w, c, data)
}

// ---------------------------------------------------------------------------
// 8-bit preview export (binary PPM / PGM)
// ---------------------------------------------------------------------------

/// Quantize [0,1] to a byte with round-half-up after clamping.
#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Export to binary PPM (3 channels) or PGM (1 channel).
pub fn save_ppm<T: Real>(img: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w, c) = img.shape();
    let tag = match c {
        3 => "P6",
        1 => "P5",
        _ => {
            return Err(Error::dim(
                "save_ppm",
                format!("unsupported channel count {c} (want 1 or 3)"),
            ))
        }
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let werr = |e| Error::io(path, e);
    write!(out, "{tag}\n{w} {h}\n255\n").map_err(werr)?;
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize_u8(v.to_f64c())).collect();
    out.write_all(&bytes).map_err(werr)?;
    out.flush().map_err(werr)
}

/// Save to the lossless container. `path` should carry the `.lfv` extension.
pub fn save_image<T: Real>(img: &Tensor<T>, path: &Path) -> Result<()> {
    let c = img.channels();
    if c != 1 && c != 3 {
        return Err(Error::dim(
            "save_image",
            format!("unsupported channel count {c} (want 1 or 3)"),
        ));
    }
    save_lfv(img, path)
}

pub fn load_image<T: Real>(path: &Path) -> Result<Tensor<T>> {
    load_lfv(path)
}

// ---------------------------------------------------------------------------
// Light-field directory container
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ViewEntry {
    u: u32,
    v: u32,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct LfManifest {
    grid_size: u32,
    width: u32,
    height: u32,
    views: Vec<ViewEntry>,
}

pub fn view_filename(u: u32, v: u32) -> String {
    format!("view_{u}_{v}.lfv")
}

/// Ground-truth disparity sidecar name used by the synthetic generator.
pub fn disparity_filename(u: u32, v: u32) -> String {
    format!("disp_{u}_{v}.lfv")
}

pub fn save_lightfield<T: Real>(lf: &LightField<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w, _) = lf
        .view_shape()
        .ok_or_else(|| Error::Config("cannot save a light field with no views".into()))?;
    let mut views = Vec::new();
    for (&id, img) in &lf.views {
        let file = view_filename(id.u, id.v);
        save_lfv(img, &dir.join(&file))?;
        views.push(ViewEntry {
            u: id.u,
            v: id.v,
            file,
        });
    }
    let manifest = LfManifest {
        grid_size: lf.grid_size,
        width: w as u32,
        height: h as u32,
        views,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_lightfield<T: Real>(dir: &Path) -> Result<LightField<T>> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: LfManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;

    let mut lf = LightField::new(manifest.grid_size);
    for entry in &manifest.views {
        let vpath = dir.join(&entry.file);
        if !vpath.exists() {
            return Err(Error::MissingView {
                u: entry.u,
                v: entry.v,
                path: vpath,
            });
        }
        let img: Tensor<T> = load_lfv(&vpath)?;
        if img.height() != manifest.height as usize || img.width() != manifest.width as usize {
            return Err(Error::format(
                &vpath,
                format!(
                    "view is {}x{} but manifest says {}x{}",
                    img.height(),
                    img.width(),
                    manifest.height,
                    manifest.width
                ),
            ));
        }
        lf.views.insert(GridCoord::new(entry.u, entry.v), img);
    }
    Ok(lf)
}

/// Manifest written at the root of a generated dataset directory.
#[derive(Serialize, Deserialize, Debug)]
pub struct DatasetManifest {
    pub count: u32,
    pub seed: u64,
    pub scenes: Vec<String>,
}

pub fn save_dataset_manifest(dir: &Path, m: &DatasetManifest) -> Result<()> {
    let path = dir.join("manifest.json");
    let json =
        serde_json::to_string_pretty(m).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

// ---------------------------------------------------------------------------
// Patch extraction
// ---------------------------------------------------------------------------

/// Patch origins along one axis: multiples of `stride` up to `extent - patch`,
/// plus the final edge-aligned origin when the stride does not land on it.
pub fn patch_origins(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    debug_assert!(extent >= patch && stride > 0);
    let last = extent - patch;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().unwrap() != last {
        out.push(last);
    }
    out
}

/// Cut supervised patch samples out of a light field: one sample per
/// `(novel position, patch origin)` pair. The ground-truth patch is the
/// center crop of the corresponding patch of the view at the novel position,
/// `gt_margin` pixels in from each side.
pub fn extract_samples<T: Real>(
    lf: &LightField<T>,
    lf_id: &str,
    novel_positions: &[GridCoord],
    patch: usize,
    stride: usize,
    gt_margin: usize,
) -> Result<Vec<TrainingSample<T>>> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    if patch <= 2 * gt_margin {
        return Err(Error::Config(format!(
            "patch {patch} too small for margin {gt_margin}"
        )));
    }
    let corners = lf.corner_views()?;
    let (h, w, _) = corners[0].shape();
    if h < patch || w < patch {
        return Err(Error::dim(
            "extract_samples",
            format!("view {h}x{w} smaller than patch {patch}x{patch}"),
        ));
    }
    let xs = patch_origins(w, patch, stride);
    let ys = patch_origins(h, patch, stride);
    let gt_size = patch - 2 * gt_margin;

    let mut samples = Vec::with_capacity(novel_positions.len() * xs.len() * ys.len());
    for &q in novel_positions {
        let gt_view = lf.view(q)?;
        for &oy in &ys {
            for &ox in &xs {
                let input_patches = corners
                    .iter()
                    .map(|v| v.crop(oy, ox, patch, patch))
                    .collect::<Result<Vec<_>>>()?;
                let gt_patch = gt_view.crop(oy + gt_margin, ox + gt_margin, gt_size, gt_size)?;
                samples.push(TrainingSample {
                    input_patches,
                    novel_pos: q.into(),
                    gt_patch,
                    lf_id: lf_id.to_string(),
                    origin: (ox, oy),
                });
            }
        }
    }
    Ok(samples)
}

/// Offsets `p_i - q` from the novel view to the four corners, in fixed
/// corner order.
pub fn corner_offsets(grid_size: u32, q: ViewCoord) -> [(f64, f64); 4] {
    LightField::<f32>::corner_ids(grid_size).map(|p| q.offset_from(p))
}

/// Uniformly random distinct non-corner grid positions.
pub fn sample_novel_positions<T: Real, R: Rng>(
    lf: &LightField<T>,
    count: usize,
    rng: &mut R,
) -> Result<Vec<GridCoord>> {
    let mut candidates = lf.non_corner_positions();
    if count > candidates.len() {
        return Err(Error::Config(format!(
            "requested {count} novel positions but only {} non-corner views exist",
            candidates.len()
        )));
    }
    // Partial Fisher-Yates over the deterministic candidate order.
    for i in 0..count {
        let j = rng.gen_range(i..candidates.len());
        candidates.swap(i, j);
    }
    candidates.truncate(count);
    Ok(candidates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_lightfield(grid: u32, h: usize, w: usize) -> LightField<f32> {
        let mut lf = LightField::new(grid);
        for v in 0..grid {
            for u in 0..grid {
                let img = Tensor::from_fn(h, w, 3, |y, x, c| {
                    ((y * 31 + x * 7 + c * 3 + (u * 5 + v) as usize) % 17) as f32 / 17.0
                });
                lf.views.insert(GridCoord::new(u, v), img);
            }
        }
        lf
    }

    #[test]
    fn lightfield_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let lf = tiny_lightfield(2, 9, 11);
        save_lightfield(&lf, dir.path()).unwrap();
        let back: LightField<f32> = load_lightfield(dir.path()).unwrap();
        assert_eq!(back.grid_size, 2);
        assert_eq!(back.views.len(), 4);
        for (id, img) in &lf.views {
            assert_eq!(back.views[id], *img);
        }
    }

    #[test]
    fn eight_by_eight_grid_loads_64_views() {
        let dir = tempfile::tempdir().unwrap();
        let lf = tiny_lightfield(8, 12, 16);
        save_lightfield(&lf, dir.path()).unwrap();
        let back: LightField<f32> = load_lightfield(dir.path()).unwrap();
        assert_eq!(back.views.len(), 64);
    }

    #[test]
    fn lytro_sized_view_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::<f32>::from_fn(376, 541, 3, |y, x, c| {
            ((y * 541 + x) * 3 + c) as f32 / 610_000.0
        });
        let path = dir.path().join("view.lfv");
        save_lfv(&img, &path).unwrap();
        let back: Tensor<f32> = load_lfv(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn missing_view_error_names_the_view() {
        let dir = tempfile::tempdir().unwrap();
        let lf = tiny_lightfield(2, 6, 6);
        save_lightfield(&lf, dir.path()).unwrap();
        fs::remove_file(dir.path().join(view_filename(1, 0))).unwrap();
        let err = load_lightfield::<f32>(dir.path()).unwrap_err();
        match err {
            Error::MissingView { u, v, .. } => assert_eq!((u, v), (1, 0)),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn ppm_quantization_examples() {
        assert_eq!(quantize_u8(0.5), 128); // round half up
        assert_eq!(quantize_u8(-0.2), 0); // clamp
        assert_eq!(quantize_u8(1.0), 255);
        assert_eq!(quantize_u8(2.3), 255);
    }

    #[test]
    fn unsupported_channel_count_rejected() {
        let img = Tensor::<f32>::zeros(4, 4, 2);
        let dir = tempfile::tempdir().unwrap();
        assert!(save_image(&img, &dir.path().join("x.lfv")).is_err());
        assert!(save_ppm(&img, &dir.path().join("x.ppm")).is_err());
    }

    #[test]
    fn patch_origin_stepping_rule() {
        // Brute-force oracle: walk the rule by hand.
        fn oracle(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
            let mut v = Vec::new();
            let mut o = 0;
            while o + patch <= extent {
                v.push(o);
                o += stride;
            }
            if *v.last().unwrap() != extent - patch {
                v.push(extent - patch);
            }
            v
        }
        for (extent, patch, stride) in [(541, 60, 16), (376, 60, 16), (60, 60, 16), (128, 60, 16)] {
            assert_eq!(patch_origins(extent, patch, stride), oracle(extent, patch, stride));
        }
        // Spec-scale counts, frozen from the oracle above.
        assert_eq!(patch_origins(541, 60, 16).len(), 32);
        assert_eq!(patch_origins(376, 60, 16).len(), 21);
        assert_eq!(patch_origins(60, 60, 16), vec![0]);
    }

    #[test]
    fn extract_samples_counts_and_alignment() {
        let lf = tiny_lightfield(3, 70, 76);
        let positions = [GridCoord::new(1, 1), GridCoord::new(2, 1)];
        let samples = extract_samples(&lf, "lf0", &positions, 60, 16, 12).unwrap();
        let per_pos = patch_origins(76, 60, 16).len() * patch_origins(70, 60, 16).len();
        assert_eq!(samples.len(), 2 * per_pos);

        for s in &samples {
            assert_eq!(s.input_patches.len(), 4);
            assert_eq!(s.input_patches[0].shape(), (60, 60, 3));
            assert_eq!(s.gt_patch.shape(), (36, 36, 3));
            // gt patch is the center crop of the ground-truth region
            let q = GridCoord::new(s.novel_pos.u as u32, s.novel_pos.v as u32);
            let gt_view = lf.view(q).unwrap();
            let (ox, oy) = s.origin;
            let expect = gt_view.crop(oy + 12, ox + 12, 36, 36).unwrap();
            assert_eq!(s.gt_patch, expect);
        }
    }

    #[test]
    fn view_smaller_than_patch_is_an_error() {
        let lf = tiny_lightfield(2, 40, 40);
        let err = extract_samples(&lf, "x", &[GridCoord::new(0, 1)], 60, 16, 12);
        assert!(err.is_err());
    }

    #[test]
    fn novel_position_sampling() {
        let lf = tiny_lightfield(8, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let picks = sample_novel_positions(&lf, 4, &mut rng).unwrap();
        assert_eq!(picks.len(), 4);
        let corners = lf.corners();
        for p in &picks {
            assert!(!corners.contains(p));
        }
        // distinct
        for i in 0..picks.len() {
            for j in i + 1..picks.len() {
                assert_ne!(picks[i], picks[j]);
            }
        }
        // 8x8 grid has 60 candidates
        assert_eq!(lf.non_corner_positions().len(), 60);

        // seeded rng reproduces the selection
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(sample_novel_positions(&lf, 4, &mut rng2).unwrap(), picks);

        // 2x2 grid has no non-corner views
        let lf2 = tiny_lightfield(2, 8, 8);
        let mut rng3 = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_novel_positions(&lf2, 1, &mut rng3).is_err());
    }
}
