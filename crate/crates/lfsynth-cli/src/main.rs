//! `lfsynth`: generate synthetic light fields, train the two-network view
//! synthesis pipeline, synthesize novel views, evaluate against baselines,
//! and verify every gradient against finite differences.
//!
//! Exit codes: 0 success, 1 check/eval/training failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lfsynth::eval::{evaluate, EvalOptions};
use lfsynth::gradcheck::{run_all, CheckSettings};
use lfsynth::lfio::{
    disparity_filename, extract_samples, load_dataset_manifest, load_lfv, load_lightfield,
    sample_novel_positions, save_image, save_ppm, GridCoord, TrainingSample, ViewCoord,
};
use lfsynth::nets::{load_model, save_model, Model};
use lfsynth::pipeline::synthesize;
use lfsynth::sweep::SweepConfig;
use lfsynth::synthgen::{make_dataset, GenConfig};
use lfsynth::train::{
    train_stage1_disparity, train_stage2_color, train_stage3_joint, TrainConfig, TrainLog,
    DESK_ITERS,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "lfsynth",
    version,
    about = "Light-field novel view synthesis from four corner views"
)]
struct Cli {
    /// Worker threads for data-parallel sections (default: all cores).
    #[arg(long, global = true, env = "LFSYNTH_THREADS")]
    threads: Option<usize>,

    /// Deterministic mode. Reduction orders are fixed and all randomness is
    /// seeded in this build regardless, so this flag is an explicit marker;
    /// results are reproducible at any --threads either way.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic light-field dataset with exact disparity ground truth.
    Gen(GenArgs),
    /// Train the disparity estimator and color predictor.
    Train(TrainArgs),
    /// Synthesize a novel view from a light field with a trained model.
    Synth(SynthArgs),
    /// Evaluate a model (and optionally the baselines) on a dataset.
    Eval(EvalArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of light fields.
    #[arg(long, default_value_t = 20)]
    count: u32,
    /// View size in pixels: one number for square views or WxH.
    #[arg(long, default_value = "128")]
    size: String,
    /// Angular grid resolution (grid x grid views).
    #[arg(long, default_value_t = 8)]
    grid: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Additive Gaussian sensor-noise sigma.
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    /// Largest layer disparity magnitude drawn, pixels per grid step.
    #[arg(long, default_value_t = 1.25)]
    d_max: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageSel {
    All,
    Disparity,
    Color,
    Joint,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by `gen`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = StageSel::All)]
    stage: StageSel,
    /// Per-stage iteration budgets "s1,s2,s3" (or one number for all three).
    /// Defaults are desk-scale budgets.
    #[arg(long)]
    iters: Option<String>,
    #[arg(long, default_value_t = 20)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Existing model to continue from (required for --stage color/joint).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Plane-sweep disparity levels.
    #[arg(long, default_value_t = 100)]
    levels: usize,
    #[arg(long, default_value_t = -21.0, allow_hyphen_values = true)]
    d_min: f64,
    #[arg(long, default_value_t = 21.0)]
    d_max: f64,
    /// Hidden channel widths of both networks.
    #[arg(long, default_value = "100,100,50")]
    widths: String,
    /// Kernel sizes (strictly decreasing odd numbers).
    #[arg(long, default_value = "7,5,3,1")]
    kernels: String,
    #[arg(long, default_value_t = 60)]
    patch: usize,
    #[arg(long, default_value_t = 16)]
    stride: usize,
    /// Novel view positions drawn per light field.
    #[arg(long, default_value_t = 4)]
    positions_per_lf: usize,
    #[arg(long, default_value_t = 0.01)]
    jacobian_step: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    model: PathBuf,
    /// Light-field directory.
    #[arg(long)]
    lf: PathBuf,
    /// Angular position "u,v"; fractional and out-of-hull values allowed.
    #[arg(long, allow_hyphen_values = true)]
    view: String,
    /// Output basename; writes <out>.lfv and <out>.ppm.
    #[arg(long)]
    out: PathBuf,
    /// Also write the estimated disparity to <out>.disp.lfv.
    #[arg(long)]
    save_disparity: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSON report path.
    #[arg(long)]
    report: PathBuf,
    /// Optional CSV dump of the per-view rows.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also evaluate the wta-blend and nearest-view baselines.
    #[arg(long)]
    baselines: bool,
    /// Views to evaluate, "u,v" separated by ';' (default: all non-corner).
    #[arg(long)]
    views: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    Double,
    Single,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Precision::Double)]
    precision: Precision,
    /// Test hook: corrupt one analytic gradient entry per check; the run
    /// must then fail.
    #[arg(long, hide = true)]
    perturb: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    #[cfg(feature = "parallel")]
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    #[cfg(not(feature = "parallel"))]
    if let Some(n) = cli.threads {
        eprintln!("note: built without the `parallel` feature; --threads {n} ignored");
    }

    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    }
}

// ---------------------------------------------------------------------------
// Argument parsing helpers
// ---------------------------------------------------------------------------

fn parse_size(s: &str) -> Result<(usize, usize)> {
    if let Some((w, h)) = s.split_once('x') {
        Ok((w.trim().parse()?, h.trim().parse()?))
    } else {
        let n: usize = s.trim().parse()?;
        Ok((n, n))
    }
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(Into::into))
        .collect()
}

fn parse_view(s: &str) -> Result<ViewCoord> {
    let (u, v) = s
        .split_once(',')
        .with_context(|| format!("view must be \"u,v\", got {s:?}"))?;
    Ok(ViewCoord::new(u.trim().parse()?, v.trim().parse()?))
}

fn parse_iters(s: Option<&str>) -> Result<[usize; 3]> {
    match s {
        None => Ok(DESK_ITERS),
        Some(text) => {
            let parts = parse_usize_list(text)?;
            match parts.as_slice() {
                [n] => Ok([*n; 3]),
                [a, b, c] => Ok([*a, *b, *c]),
                _ => bail!("--iters wants one or three numbers, got {text:?}"),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_gen(a: GenArgs) -> Result<ExitCode> {
    let (width, height) = parse_size(&a.size)?;
    let cfg = GenConfig {
        count: a.count,
        width,
        height,
        grid_size: a.grid,
        seed: a.seed,
        noise_sigma: a.noise,
        d_max: a.d_max,
    };
    let t0 = Instant::now();
    let names = make_dataset(&cfg, &a.out)?;
    println!(
        "wrote {} light fields ({width}x{height}, {}x{} grid, noise {}, |d| <= {}) to {} in {:.1}s",
        names.len(),
        a.grid,
        a.grid,
        a.noise,
        a.d_max,
        a.out.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_training_samples(
    data: &Path,
    cfg: &TrainConfig,
    patch: usize,
    stride: usize,
    positions_per_lf: usize,
) -> Result<Vec<TrainingSample<f32>>> {
    let manifest =
        load_dataset_manifest(data).with_context(|| format!("loading dataset {}", data.display()))?;
    if manifest.scenes.is_empty() {
        bail!("dataset {} has no scenes", data.display());
    }
    let gt_margin = cfg.kernels.iter().map(|k| k - 1).sum::<usize>();
    let mut samples = Vec::new();
    for (i, scene) in manifest.scenes.iter().enumerate() {
        let dir = data.join(scene);
        let lf = load_lightfield::<f32>(&dir)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(200 + i as u64);
        let positions = sample_novel_positions(&lf, positions_per_lf, &mut rng)?;

        // Scenes outside the sweep range still train, just poorly.
        let sidecar = dir.join(disparity_filename(0, 0));
        if let Ok(d) = load_lfv::<f32>(&sidecar) {
            let (lo, hi) = d
                .data()
                .iter()
                .fold((f64::MAX, f64::MIN), |(lo, hi), &v| {
                    (lo.min(v as f64), hi.max(v as f64))
                });
            if lo < cfg.sweep.d_min || hi > cfg.sweep.d_max {
                eprintln!(
                    "warning: {scene} disparities [{lo:.2}, {hi:.2}] exceed sweep range [{}, {}]",
                    cfg.sweep.d_min, cfg.sweep.d_max
                );
            }
        }
        samples.extend(extract_samples(&lf, scene, &positions, patch, stride, gt_margin)?);
    }
    println!(
        "extracted {} samples from {} scenes",
        samples.len(),
        manifest.scenes.len()
    );
    Ok(samples)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let sweep = SweepConfig::new(a.levels, a.d_min, a.d_max)?;
    let grid_size = {
        let manifest = load_dataset_manifest(&a.data)?;
        let first = manifest
            .scenes
            .first()
            .with_context(|| "empty dataset".to_string())?;
        load_lightfield::<f32>(&a.data.join(first))?.grid_size
    };
    let mut cfg = TrainConfig::new(sweep, grid_size);
    cfg.batch_size = a.batch;
    cfg.iters = parse_iters(a.iters.as_deref())?;
    cfg.adam.lr = a.lr;
    cfg.seed = a.seed;
    cfg.jacobian_step = a.jacobian_step;
    cfg.kernels = parse_usize_list(&a.kernels)?;
    cfg.widths = parse_usize_list(&a.widths)?;
    cfg.validate()?;

    let samples = load_training_samples(&a.data, &cfg, a.patch, a.stride, a.positions_per_lf)?;
    let mut log = TrainLog {
        echo_every: Some(100),
        ..Default::default()
    };

    let init: Option<Model<f32>> = match &a.init {
        Some(p) => Some(load_model(p)?),
        None => None,
    };
    let stage_path = |tag: &str| -> PathBuf {
        PathBuf::from(format!("{}.{tag}", a.out.display()))
    };

    let (w_d, w_c) = match a.stage {
        StageSel::All => {
            let t0 = Instant::now();
            println!("stage 1/3: disparity estimator ({} iters)", cfg.iters[0]);
            let w_d = train_stage1_disparity(&samples, &cfg, &mut log)?;
            save_model(
                &Model {
                    disparity: w_d.clone(),
                    color: cfg.init_color()?,
                    sweep: cfg.sweep,
                    grid_size,
                },
                &stage_path("stage1"),
            )?;
            println!("stage 2/3: color predictor ({} iters)", cfg.iters[1]);
            let w_c = train_stage2_color(&samples, &w_d, &cfg, &mut log)?;
            save_model(
                &Model {
                    disparity: w_d.clone(),
                    color: w_c.clone(),
                    sweep: cfg.sweep,
                    grid_size,
                },
                &stage_path("stage2"),
            )?;
            println!("stage 3/3: joint refinement ({} iters)", cfg.iters[2]);
            let (w_d, w_c) = train_stage3_joint(&samples, w_d, w_c, &cfg, &mut log)?;
            println!("training took {:.1}s", t0.elapsed().as_secs_f64());
            (w_d, w_c)
        }
        StageSel::Disparity => {
            let w_d = train_stage1_disparity(&samples, &cfg, &mut log)?;
            (w_d, cfg.init_color()?)
        }
        StageSel::Color => {
            let m = init.with_context(|| "--stage color needs --init with a trained disparity net")?;
            let w_c = train_stage2_color(&samples, &m.disparity, &cfg, &mut log)?;
            (m.disparity, w_c)
        }
        StageSel::Joint => {
            let m = init.with_context(|| "--stage joint needs --init with both nets trained")?;
            train_stage3_joint(&samples, m.disparity, m.color, &cfg, &mut log)?
        }
    };

    let model = Model {
        disparity: w_d,
        color: w_c,
        sweep: cfg.sweep,
        grid_size,
    };
    save_model(&model, &a.out)?;
    let log_path = PathBuf::from(format!("{}.metrics.log", a.out.display()));
    log.write_to(&log_path)?;
    println!("model written to {}", a.out.display());
    println!("metrics written to {}", log_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    let model: Model<f32> = load_model(&a.model)?;
    let lf = load_lightfield::<f32>(&a.lf)?;
    let q = parse_view(&a.view)?;
    if !q.inside_hull(lf.grid_size) {
        eprintln!(
            "warning: view ({}, {}) is outside the {}x{} grid hull; extrapolation is generally lower quality",
            q.u, q.v, lf.grid_size, lf.grid_size
        );
    }
    let out = synthesize(&model, &lf, q)?;
    let lfv = PathBuf::from(format!("{}.lfv", a.out.display()));
    let ppm = PathBuf::from(format!("{}.ppm", a.out.display()));
    save_image(&out.image, &lfv)?;
    save_ppm(&out.image, &ppm)?;
    if a.save_disparity {
        let dpath = PathBuf::from(format!("{}.disp.lfv", a.out.display()));
        save_image(&out.disparity.values, &dpath)?;
    }
    let (h, w, _) = out.image.shape();
    println!("synthesized {w}x{h} view at ({}, {}) -> {}", q.u, q.v, lfv.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let model: Model<f32> = load_model(&a.model)?;
    let positions = match &a.views {
        None => Vec::new(),
        Some(s) => s
            .split(';')
            .map(|t| {
                let vc = parse_view(t)?;
                Ok(GridCoord::new(vc.u as u32, vc.v as u32))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let opts = EvalOptions {
        positions,
        baselines: a.baselines,
    };
    let report = evaluate(&model, &a.data, &opts)?;
    std::fs::write(&a.report, report.to_json()?)
        .with_context(|| format!("writing {}", a.report.display()))?;
    if let Some(csv) = &a.csv {
        std::fs::write(csv, report.to_csv())
            .with_context(|| format!("writing {}", csv.display()))?;
    }
    for m in &report.methods {
        let occ = m
            .mean_psnr_occluded
            .map(|v| format!(", occluded {v:.2} dB"))
            .unwrap_or_default();
        println!(
            "{:>10}: PSNR {:.2} dB, SSIM {:.4}{occ}  ({} views)",
            m.method,
            m.mean_psnr,
            m.mean_ssim,
            m.views.len()
        );
    }
    println!("report written to {}", a.report.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let mut settings = match a.precision {
        Precision::Double => CheckSettings::double(a.seed),
        Precision::Single => CheckSettings::single(a.seed),
    };
    if a.perturb {
        settings.perturbation = 1.0;
    }
    let reports = match a.precision {
        Precision::Double => run_all::<f64>(&settings),
        Precision::Single => run_all::<f32>(&settings),
    };
    let mut worst: Option<&lfsynth::gradcheck::CheckReport> = None;
    for r in &reports {
        println!(
            "{:<28} max rel err {:>12.3e}  (tol {:.0e})  {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() && worst.map_or(true, |w| r.max_rel_err / r.tolerance > w.max_rel_err / w.tolerance) {
            worst = Some(r);
        }
    }
    if let Some(w) = worst {
        eprintln!(
            "gradcheck FAILED: {} at {:.3e} (tolerance {:.0e})",
            w.name, w.max_rel_err, w.tolerance
        );
        return Ok(ExitCode::from(1));
    }
    println!("all gradient checks passed");
    Ok(ExitCode::SUCCESS)
}
