//! `voxfuse` command-line tool.
//!
//! Exit codes: 0 on success, 2 for usage or configuration problems
//! (including unreadable inputs), 3 for failures while running.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use voxfuse::config::{DatasetSpec, PathKind, PriorConfig, PriorKind, RunConfig};
use voxfuse::diffusion::{add_noise, ddim_sample, gaussian_like, ConditioningBundle, Denoiser};
use voxfuse::geometry::{focus_point, poses_from_json, PoseRecord};
use voxfuse::metrics::Metrics;
use voxfuse::pipeline::{fit, make_dataset, make_denoiser, prepare};
use voxfuse::posedist::{fit_bspline_path, fit_ellipse_path, sample_novel_pose, PerturbSpec};
use voxfuse::recon::{evaluate, PriorMode};
use voxfuse::render::{render_image, RenderConfig};
use voxfuse::scenes::{load_dataset, save_dataset};
use voxfuse::{Image, VoxelField};

const CHECKPOINT_FILE: &str = "field.voxf";
const REPORT_FILE: &str = "report.json";
const LOSS_LOG_FILE: &str = "losses.jsonl";

#[derive(Parser, Debug)]
#[command(name = "voxfuse", version, about = "Few-view voxel radiance fields with a diffusion prior")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene and render its train/test views.
    MakeScene {
        /// Dataset spec JSON.
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct a voxel field from a dataset's training views.
    Fit {
        /// Dataset directory written by make-scene.
        #[arg(long)]
        dataset: PathBuf,
        /// Run config JSON; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Novel-view prior.
        #[arg(long, value_enum)]
        prior: Option<PriorArg>,
        /// How the prior acts on novel views.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Optimization iterations.
        #[arg(long)]
        iters: Option<usize>,
        /// Run seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the checkpoint, report and loss log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a checkpoint at the given poses (PNG color, PFM depth).
    Render {
        /// VOXF1 checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON array of pose records.
        #[arg(long)]
        poses: PathBuf,
        /// Map the poses into this dataset's normalized frame first.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Samples per ray.
        #[arg(long, default_value_t = 64)]
        samples: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset's train and test views.
    Eval {
        /// VOXF1 checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        dataset: PathBuf,
        /// Samples per ray.
        #[arg(long, default_value_t = 64)]
        samples: usize,
        /// Output metrics JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a camera path to poses and draw novel poses from it.
    SamplePoses {
        /// JSON array of pose records.
        #[arg(long)]
        poses: PathBuf,
        /// Path family.
        #[arg(long, value_enum, default_value_t = PathArg::Ellipse)]
        path_kind: PathArg,
        /// Number of poses to draw.
        #[arg(long)]
        n: usize,
        /// Sampling seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Position perturbation radius.
        #[arg(long, default_value_t = PerturbSpec::default().position_radius)]
        position_radius: f64,
        /// Look-at perturbation radius.
        #[arg(long, default_value_t = PerturbSpec::default().lookat_radius)]
        lookat_radius: f64,
        /// Maximum roll of the up vector in radians.
        #[arg(long, default_value_t = PerturbSpec::default().up_angle_max)]
        up_angle_max: f64,
        /// Output JSON array of pose records.
        #[arg(long)]
        out: PathBuf,
    },
    /// Noise a gray image at level t and sample a test view with the prior.
    DdimDemo {
        /// Dataset directory.
        #[arg(long)]
        dataset: PathBuf,
        /// Index into the dataset's test views.
        #[arg(long, default_value_t = 0)]
        pose_index: usize,
        /// Starting noise level in (0, 1].
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        /// DDIM steps.
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Guidance scale.
        #[arg(long, default_value_t = 3.0)]
        cfg: f64,
        /// Prior to sample from.
        #[arg(long, value_enum, default_value_t = PriorArg::Oracle)]
        prior: PriorArg,
        /// Noise seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PriorArg {
    None,
    Oracle,
    OracleNoisy,
}

impl From<PriorArg> for PriorKind {
    fn from(p: PriorArg) -> Self {
        match p {
            PriorArg::None => PriorKind::None,
            PriorArg::Oracle => PriorKind::Oracle,
            PriorArg::OracleNoisy => PriorKind::OracleNoisy,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Sample,
    Sds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PathArg {
    Ellipse,
    Bspline,
}

/// Marks a failure as a usage or configuration problem (exit 2).
#[derive(Debug)]
struct Usage(anyhow::Error);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T, E: Into<anyhow::Error>>(r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| Usage(e.into()).into())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    usage(fs::read(path).with_context(|| format!("reading {}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::MakeScene { spec, out } => make_scene_cmd(&spec, &out),
        Command::Fit { dataset, config, prior, mode, iters, seed, out } => {
            fit_cmd(&dataset, config.as_deref(), prior, mode, iters, seed, &out)
        }
        Command::Render { checkpoint, poses, dataset, samples, out } => {
            render_cmd(&checkpoint, &poses, dataset.as_deref(), samples, &out)
        }
        Command::Eval { checkpoint, dataset, samples, out } => eval_cmd(&checkpoint, &dataset, samples, &out),
        Command::SamplePoses { poses, path_kind, n, seed, position_radius, lookat_radius, up_angle_max, out } => {
            let perturb = PerturbSpec { position_radius, lookat_radius, up_angle_max };
            sample_poses_cmd(&poses, path_kind, n, seed, perturb, &out)
        }
        Command::DdimDemo { dataset, pose_index, t, k, cfg, prior, seed, out } => {
            ddim_demo_cmd(&dataset, pose_index, t, k, cfg, prior, seed, &out)
        }
    }
}

fn make_scene_cmd(spec: &Path, out: &Path) -> Result<()> {
    let spec = usage(DatasetSpec::from_json(&read(spec)?).with_context(|| format!("parsing {}", spec.display())))?;
    let dataset = make_dataset(&spec)?;
    create_dir(out)?;
    save_dataset(&dataset, out)?;
    println!("wrote {} train and {} test views to {}", dataset.views.train.len(), dataset.views.test.len(), out.display());
    Ok(())
}

fn fit_cmd(
    dataset: &Path,
    config: Option<&Path>,
    prior: Option<PriorArg>,
    mode: Option<ModeArg>,
    iters: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => usage(RunConfig::from_json(&read(p)?).with_context(|| format!("parsing {}", p.display())))?,
        None => RunConfig::default(),
    };
    if let Some(p) = prior {
        cfg.prior.kind = p.into();
    }
    if let Some(m) = mode {
        cfg.recon.mode = match m {
            ModeArg::Sample => PriorMode::Sample,
            ModeArg::Sds => PriorMode::Sds,
        };
    }
    if let Some(n) = iters {
        cfg.recon.iters = n;
    }
    if let Some(s) = seed {
        cfg.recon.seed = s;
    }
    usage(cfg.validate())?;
    let data = usage(load_dataset(dataset))?;
    let result = fit(&data, &cfg)?;

    create_dir(out)?;
    result.field.save(out.join(CHECKPOINT_FILE))?;
    let mut report = result.report;
    report.checkpoint = Some(CHECKPOINT_FILE.to_string());
    write_json(&out.join(REPORT_FILE), &report)?;
    let mut log = String::new();
    for r in &report.records {
        log.push_str(&serde_json::to_string(r)?);
        log.push('\n');
    }
    fs::write(out.join(LOSS_LOG_FILE), log).context("writing loss log")?;
    if let Some(m) = &report.heldout {
        println!("held-out PSNR {:.3} dB, SSIM {:.4}", m.mean_psnr, m.mean_ssim);
    }
    Ok(())
}

fn eval_render_config(samples: usize) -> RenderConfig {
    RenderConfig { n_samples: samples, ..RenderConfig::default() }.for_eval()
}

fn render_cmd(checkpoint: &Path, poses: &Path, dataset: Option<&Path>, samples: usize, out: &Path) -> Result<()> {
    let field = usage(VoxelField::load(checkpoint))?;
    let mut poses = usage(poses_from_json(&read(poses)?).context("parsing poses"))?;
    if let Some(d) = dataset {
        let data = usage(load_dataset(d))?;
        let prepared = usage(prepare(&data, PathKind::Ellipse))?;
        poses = poses.iter().map(|p| prepared.transform.apply_pose(p)).collect();
    }
    let render = eval_render_config(samples);
    usage(render.validate())?;
    create_dir(out)?;
    for (i, pose) in poses.iter().enumerate() {
        let cfg = RenderConfig { width: pose.width(), height: pose.height(), ..render };
        let r = render_image(&field, pose, &cfg)?;
        r.rgb.write_png(out.join(format!("{i:03}.png")))?;
        r.depth.write_pfm(out.join(format!("{i:03}_depth.pfm")))?;
    }
    println!("rendered {} views to {}", poses.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    train: Metrics,
    test: Option<Metrics>,
}

fn eval_cmd(checkpoint: &Path, dataset: &Path, samples: usize, out: &Path) -> Result<()> {
    let field = usage(VoxelField::load(checkpoint))?;
    let data = usage(load_dataset(dataset))?;
    let prepared = usage(prepare(&data, PathKind::Ellipse))?;
    let render = eval_render_config(samples);
    usage(render.validate())?;
    let report = EvalReport {
        train: evaluate(&field, &prepared.train, &render)?,
        test: if prepared.test.is_empty() { None } else { Some(evaluate(&field, &prepared.test, &render)?) },
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(out, &report)?;
    match &report.test {
        Some(t) => println!("train PSNR {:.3} dB, test PSNR {:.3} dB", report.train.mean_psnr, t.mean_psnr),
        None => println!("train PSNR {:.3} dB", report.train.mean_psnr),
    }
    Ok(())
}

fn sample_poses_cmd(poses: &Path, kind: PathArg, n: usize, seed: u64, perturb: PerturbSpec, out: &Path) -> Result<()> {
    use rand::SeedableRng;
    let poses = usage(poses_from_json(&read(poses)?).context("parsing poses"))?;
    usage(perturb.validate())?;
    let path = usage(match kind {
        PathArg::Ellipse => focus_point(&poses).and_then(|f| fit_ellipse_path(&poses, f)),
        PathArg::Bspline => fit_bspline_path(&poses),
    })?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let sampled: Vec<PoseRecord> =
        (0..n).map(|_| sample_novel_pose(&path, &perturb, &mut rng).map(|p| p.to_record())).collect::<voxfuse::Result<_>>()?;
    write_json(out, &sampled)?;
    println!("wrote {n} poses to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn ddim_demo_cmd(
    dataset: &Path,
    index: usize,
    t: f64,
    k: usize,
    cfg_scale: f64,
    prior: PriorArg,
    seed: u64,
    out: &Path,
) -> Result<()> {
    use rand::SeedableRng;
    let data = usage(load_dataset(dataset))?;
    let prepared = usage(prepare(&data, PathKind::Ellipse))?;
    let Some(view) = prepared.test.get(index) else {
        return Err(Usage(anyhow::anyhow!("pose index {index} out of range ({} test views)", prepared.test.len())).into());
    };
    if !(t > 0.0 && t <= 1.0) || k == 0 {
        return Err(Usage(anyhow::anyhow!("need t in (0, 1] and k >= 1")).into());
    }
    let prior_cfg = PriorConfig { kind: prior.into(), ..PriorConfig::default() };
    let Some(denoiser) = make_denoiser(&prior_cfg, &prepared.scene)? else {
        bail!(Usage(anyhow::anyhow!("ddim-demo needs an oracle prior")));
    };
    let pose = *view.pose();
    let start = Image::filled(pose.width() as usize, pose.height() as usize, 3, 0.5);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let eps = gaussian_like(&start, &mut rng);
    let z = add_noise(&start, t, &eps)?;
    let cond = ConditioningBundle::for_pose(pose, seed);
    let sample = ddim_sample(&denoiser as &dyn Denoiser, &cond, &z, t, k, cfg_scale)?;
    create_dir(out)?;
    sample.map(|v| v.clamp(0.0, 1.0)).write_png(out.join("sample.png"))?;
    sample.write_pfm(out.join("sample.pfm"))?;
    view.image().write_png(out.join("reference.png"))?;
    println!("wrote sample for test view {index} to {}", out.display());
    Ok(())
}
