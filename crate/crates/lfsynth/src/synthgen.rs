//! Procedural light-field generator with exact ground-truth disparity.
//!
//! Scenes are stacks of fronto-parallel textured layers. A layer with
//! disparity `d` appears in view `p` shifted by `d * (p - center)` pixels, so
//! warping any view to any other with the true disparity reproduces it
//! exactly up to interpolation, and occlusion bands between layers have
//! analytically known extent. Each view comes with a sidecar map of the
//! visible surface's disparity.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::exec;
use crate::lfio::{
    disparity_filename, save_dataset_manifest, save_lfv, save_lightfield, DatasetManifest,
    GridCoord, LightField,
};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Procedural textures
// ---------------------------------------------------------------------------

fn hash2(seed: u64, ix: i64, iy: i64) -> f64 {
    let mut h = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let ix = x.floor();
    let iy = y.floor();
    let (fx, fy) = (x - ix, y - iy);
    let (ix, iy) = (ix as i64, iy as i64);
    let v00 = hash2(seed, ix, iy);
    let v10 = hash2(seed, ix + 1, iy);
    let v01 = hash2(seed, ix, iy + 1);
    let v11 = hash2(seed, ix + 1, iy + 1);
    let sx = smoothstep(fx);
    let sy = smoothstep(fy);
    let a = v00 + (v10 - v00) * sx;
    let b = v01 + (v11 - v01) * sx;
    a + (b - a) * sy
}

/// Scalar pattern in [0,1] mapped onto a two-color ramp.
#[derive(Clone, Debug)]
pub enum Pattern {
    /// Smoothed lattice noise, `octaves` doublings starting at `cell` pixels.
    Noise { seed: u64, cell: f64, octaves: u32 },
    /// Sinusoidal grating.
    Stripes { angle: f64, wavelength: f64, phase: f64 },
    /// Sum of Gaussian bumps `(cx, cy, sigma)`.
    Blobs { bumps: Vec<(f64, f64, f64)> },
}

impl Pattern {
    fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            Pattern::Noise { seed, cell, octaves } => {
                let mut acc = 0.0;
                let mut amp = 1.0;
                let mut norm = 0.0;
                let mut freq = 1.0 / cell;
                for o in 0..*octaves {
                    acc += amp * value_noise(seed.wrapping_add(o as u64), x * freq, y * freq);
                    norm += amp;
                    amp *= 0.5;
                    freq *= 2.0;
                }
                acc / norm
            }
            Pattern::Stripes {
                angle,
                wavelength,
                phase,
            } => {
                let t = (x * angle.cos() + y * angle.sin()) / wavelength;
                0.5 + 0.5 * (std::f64::consts::TAU * t + phase).sin()
            }
            Pattern::Blobs { bumps } => {
                let mut acc = 0.0;
                for &(cx, cy, sigma) in bumps {
                    let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                    acc += (-d2 / (2.0 * sigma * sigma)).exp();
                }
                acc.min(1.0)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Texture {
    pub pattern: Pattern,
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
}

impl Texture {
    fn eval(&self, x: f64, y: f64) -> [f64; 3] {
        let t = self.pattern.eval(x, y);
        [
            self.color_a[0] + (self.color_b[0] - self.color_a[0]) * t,
            self.color_a[1] + (self.color_b[1] - self.color_a[1]) * t,
            self.color_a[2] + (self.color_b[2] - self.color_a[2]) * t,
        ]
    }
}

/// Binary coverage mask: union of disks, evaluated in layer coordinates.
#[derive(Clone, Debug, Default)]
pub struct Mask {
    pub disks: Vec<(f64, f64, f64)>,
}

impl Mask {
    fn hit(&self, x: f64, y: f64) -> bool {
        self.disks
            .iter()
            .any(|&(cx, cy, r)| (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r)
    }
}

#[derive(Clone, Debug)]
pub struct Layer {
    /// Pixels of image shift per unit grid offset.
    pub disparity: f64,
    pub texture: Texture,
    /// `None` covers everything (background).
    pub mask: Option<Mask>,
}

/// Layered scene description. Layers are ordered back to front and the
/// magnitudes of their disparities must not decrease toward the front.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub grid_size: u32,
    pub layers: Vec<Layer>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.layers.len() > 4 {
            return Err(Error::Config(format!(
                "scene needs 1..=4 layers, got {}",
                self.layers.len()
            )));
        }
        if self.layers[0].mask.is_some() {
            return Err(Error::Config("background layer must be unmasked".into()));
        }
        for w in self.layers.windows(2) {
            if w[1].disparity.abs() < w[0].disparity.abs() {
                return Err(Error::Config(
                    "front layers must not have smaller disparity magnitude".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn max_abs_disparity(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.disparity.abs())
            .fold(0.0, f64::max)
    }

    /// Non-fatal notes about disparities outside the sweep range the dataset
    /// is meant for. Test scenes may exceed it deliberately.
    pub fn range_warnings(&self, d_min: f64, d_max: f64) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.disparity < d_min || l.disparity > d_max)
            .map(|(i, l)| {
                format!(
                    "layer {i} disparity {} outside sweep range [{d_min}, {d_max}]",
                    l.disparity
                )
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Render every view of the grid plus per-view ground-truth disparity maps.
pub fn render_lightfield(
    spec: &SceneSpec,
) -> Result<(LightField<f32>, Vec<(GridCoord, Tensor<f32>)>)> {
    spec.validate()?;
    let g = spec.grid_size;
    let center = (g - 1) as f64 / 2.0;
    let coords: Vec<GridCoord> = (0..g)
        .flat_map(|v| (0..g).map(move |u| GridCoord::new(u, v)))
        .collect();

    let rendered: Vec<(GridCoord, Tensor<f32>, Tensor<f32>)> =
        exec::map_indexed(coords.len(), |i| {
            let id = coords[i];
            let (ou, ov) = (id.u as f64 - center, id.v as f64 - center);
            let mut img = Tensor::<f32>::zeros(spec.height, spec.width, 3);
            let mut disp = Tensor::<f32>::zeros(spec.height, spec.width, 1);
            for y in 0..spec.height {
                for x in 0..spec.width {
                    // front-most layer whose mask covers this pixel wins
                    let mut rgb = [0.0; 3];
                    let mut d = 0.0;
                    for layer in spec.layers.iter().rev() {
                        let lx = x as f64 - layer.disparity * ou;
                        let ly = y as f64 - layer.disparity * ov;
                        let covered = match &layer.mask {
                            None => true,
                            Some(m) => m.hit(lx, ly),
                        };
                        if covered {
                            rgb = layer.texture.eval(lx, ly);
                            d = layer.disparity;
                            break;
                        }
                    }
                    for (c, &v) in rgb.iter().enumerate() {
                        img.set(y, x, c, v as f32);
                    }
                    disp.set(y, x, 0, d as f32);
                }
            }
            if spec.noise_sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(i as u64);
                let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma > 0");
                for v in img.data_mut() {
                    *v = (*v + normal.sample(&mut rng) as f32).clamp(0.0, 1.0);
                }
            }
            (id, img, disp)
        });

    let mut lf = LightField::new(g);
    let mut disps = Vec::with_capacity(rendered.len());
    for (id, img, disp) in rendered {
        lf.views.insert(id, img);
        disps.push((id, disp));
    }
    Ok((lf, disps))
}

// ---------------------------------------------------------------------------
// Random scenes and datasets
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub count: u32,
    pub width: usize,
    pub height: usize,
    pub grid_size: u32,
    pub seed: u64,
    pub noise_sigma: f64,
    /// Largest layer disparity magnitude the generator will draw.
    pub d_max: f64,
}

impl GenConfig {
    pub fn new(count: u32) -> Self {
        GenConfig {
            count,
            width: 128,
            height: 128,
            grid_size: 8,
            seed: 0,
            noise_sigma: 0.01,
            d_max: 1.25,
        }
    }
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
    ]
}

fn random_texture<R: Rng>(rng: &mut R, extent: f64) -> Texture {
    // Ramp endpoints far enough apart that the pattern carries real contrast.
    let (color_a, color_b) = loop {
        let a = random_color(rng);
        let b = random_color(rng);
        let lum = |c: &[f64; 3]| (c[0] + c[1] + c[2]) / 3.0;
        if (lum(&a) - lum(&b)).abs() >= 0.25 {
            break (a, b);
        }
    };
    let pattern = match rng.gen_range(0..3u32) {
        0 => Pattern::Noise {
            seed: rng.gen(),
            cell: rng.gen_range(5.0..14.0),
            octaves: rng.gen_range(2..4),
        },
        1 => Pattern::Stripes {
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            wavelength: rng.gen_range(7.0..22.0),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        },
        _ => {
            let n = rng.gen_range(6..14);
            let bumps = (0..n)
                .map(|_| {
                    (
                        rng.gen_range(-0.2 * extent..1.2 * extent),
                        rng.gen_range(-0.2 * extent..1.2 * extent),
                        rng.gen_range(0.04 * extent..0.12 * extent),
                    )
                })
                .collect();
            Pattern::Blobs { bumps }
        }
    };
    Texture {
        pattern,
        color_a,
        color_b,
    }
}

/// Draw a random layered scene. Layer disparities are distinct, spread within
/// `±d_max`, and sorted back to front by magnitude.
pub fn random_scene<R: Rng>(cfg: &GenConfig, scene_seed: u64, rng: &mut R) -> SceneSpec {
    let extent = cfg.width.max(cfg.height) as f64;
    let n_layers = rng.gen_range(2..=4usize);
    let min_gap = 0.22 * cfg.d_max;
    let mut disps: Vec<f64> = Vec::new();
    while disps.len() < n_layers {
        let d = rng.gen_range(-cfg.d_max..cfg.d_max);
        if disps.iter().all(|&e| (e - d).abs() >= min_gap) {
            disps.push(d);
        }
    }
    disps.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());

    let mut layers = Vec::with_capacity(n_layers);
    for (i, &d) in disps.iter().enumerate() {
        let mask = if i == 0 {
            None
        } else {
            let n_disks = rng.gen_range(2..=4);
            let disks = (0..n_disks)
                .map(|_| {
                    (
                        rng.gen_range(0.0..cfg.width as f64),
                        rng.gen_range(0.0..cfg.height as f64),
                        rng.gen_range(0.09 * extent..0.22 * extent),
                    )
                })
                .collect();
            Some(Mask { disks })
        };
        layers.push(Layer {
            disparity: d,
            texture: random_texture(rng, extent),
            mask,
        });
    }
    SceneSpec {
        width: cfg.width,
        height: cfg.height,
        grid_size: cfg.grid_size,
        layers,
        noise_sigma: cfg.noise_sigma,
        seed: scene_seed,
    }
}

/// Generate `count` scenes under `out`, each a light-field directory with
/// `disp_{u}_{v}.lfv` ground-truth sidecars, plus a dataset manifest.
/// Deterministic under the seed.
pub fn make_dataset(cfg: &GenConfig, out: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let names: Vec<String> = (0..cfg.count).map(|i| format!("scene_{i:04}")).collect();

    let results = exec::map_indexed(cfg.count as usize, |i| -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(100 + i as u64);
        let scene_seed = cfg.seed ^ ((i as u64) << 32) ^ 0x5EED;
        let spec = random_scene(cfg, scene_seed, &mut rng);
        let (lf, disps) = render_lightfield(&spec)?;
        let dir = out.join(&names[i]);
        save_lightfield(&lf, &dir)?;
        for (id, disp) in &disps {
            save_lfv(disp, &dir.join(disparity_filename(id.u, id.v)))?;
        }
        Ok(())
    });
    for r in results {
        r?;
    }
    save_dataset_manifest(
        out,
        &DatasetManifest {
            count: cfg.count,
            seed: cfg.seed,
            scenes: names.clone(),
        },
    )?;
    Ok(names)
}
