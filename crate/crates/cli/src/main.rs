//! `render-pretrain`: synthetic datasets, pre-training, rendering, meshing
//! and gradient checks from the command line.
//!
//! Exit codes: 0 success, 1 numeric failure (diverged run, failed gradient
//! check), 2 usage or format error.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use log::{info, warn};

use render_pretrain::config::RunConfig;
use render_pretrain::geometry::Camera;
use render_pretrain::image::{write_pfm, write_ppm};
use render_pretrain::meshing::extract_mesh;
use render_pretrain::rng::{stream, Stream};
use render_pretrain::synth::{make_dataset, AnalyticScene, Dataset, RingSpec};
use render_pretrain::training::gradcheck::{gradcheck, micro_scene};
use render_pretrain::training::pretrain::write_csv;
use render_pretrain::training::{evaluate_frames, render_view, Checkpoint, StepLog, Trainer};
use render_pretrain::Error;

#[derive(Parser)]
#[command(
    name = "render-pretrain",
    about = "Point-cloud pre-training through differentiable SDF rendering"
)]
struct Cli {
    /// Worker threads for rendering, meshing and normal estimation.
    /// Outputs do not depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Renders an analytic scene from a camera ring into a dataset directory.
    Synth(SynthArgs),
    /// Trains on a dataset directory and writes a checkpoint and a CSV log.
    Pretrain(PretrainArgs),
    /// Renders color, depth and accumulated weight for each camera in a file.
    Render(RenderArgs),
    /// Extracts the zero level set of a checkpoint's SDF as an OBJ mesh.
    Mesh(MeshArgs),
    /// Compares analytic and finite-difference gradients on a micro scene.
    Gradcheck(GradcheckArgs),
    /// Reports held-out metrics of a checkpoint on a dataset.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene JSON; the built-in demo scene if omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    views: usize,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Number of leading views fused into the point cloud.
    #[arg(long, default_value_t = 5)]
    fused: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write. The log goes next to it with a `.csv` extension
    /// unless `--log` is given.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    /// Base settings applied before the config file (indoor, outdoor, desk).
    #[arg(long)]
    preset: Option<String>,
    /// `key = value` config file applied after the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override; may repeat. Applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Stops once this many steps are done. The learning-rate schedule still
    /// spans `iters`, so `--resume` later continues the same run.
    #[arg(long, value_name = "STEPS")]
    stop_after: Option<usize>,
    /// Continues from a checkpoint on the same dataset. Only `--iters` may
    /// change the stored settings, and a changed `--iters` reshapes the
    /// remaining schedule.
    #[arg(long, conflicts_with_all = ["preset", "config", "overrides", "seed"])]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A camera object or an array of them. With several cameras the
    /// outputs are numbered `<prefix>_000_rgb.ppm` and so on.
    #[arg(long)]
    camera: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Expected image width; must match the camera intrinsics.
    #[arg(long)]
    width: Option<usize>,
    /// Expected image height; must match the camera intrinsics.
    #[arg(long)]
    height: Option<usize>,
    /// Samples per ray; the checkpoint's `render_samples` if omitted.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct MeshArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Lattice points per axis.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 0.0)]
    iso: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    rays: usize,
    #[arg(long, default_value_t = 2)]
    samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    rel_tol: f64,
    /// Differences below this are not judged relatively.
    #[arg(long, default_value_t = 1e-8)]
    abs_tol: f64,
    /// Scales one analytic gradient entry before comparing.
    #[arg(long, hide = true)]
    corrupt_adjoint: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Samples per ray; the checkpoint's `render_samples` if omitted.
    #[arg(long)]
    samples: Option<usize>,
    /// Evaluate every view instead of the held-out split.
    #[arg(long)]
    all_views: bool,
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Numeric(_)) { 1 } else { 2 };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        msg: msg.into(),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn synth(a: &SynthArgs) -> CliResult {
    let scene = match &a.scene {
        Some(p) => AnalyticScene::from_json(&read_text(p)?)?,
        None => AnalyticScene::demo(),
    };
    let data = make_dataset(
        &scene,
        a.views,
        a.resolution,
        a.fused,
        &RingSpec::default(),
        &mut stream(a.seed, Stream::Synth, 0),
    )?;
    data.write_dir(&a.out)?;
    println!(
        "wrote {} views and {} points to {}",
        data.frames.len(),
        data.cloud.len(),
        a.out.display()
    );
    Ok(())
}

fn build_config(a: &PretrainArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &a.preset {
        cfg.apply_preset(p)?;
    }
    if let Some(p) = &a.config {
        cfg.apply_text(&read_text(p)?)
            .map_err(|e| usage(format!("{}: {e}", p.display())))?;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iters {
        cfg.iters = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Mean loss over the last tenth of the logged steps.
fn tail_loss(log: &[StepLog]) -> f64 {
    let n = (log.len() / 10).max(1).min(log.len());
    log[log.len() - n..].iter().map(|r| r.loss).sum::<f64>() / n as f64
}

fn pretrain(a: &PretrainArgs) -> CliResult {
    let data = Dataset::read_dir(&a.data)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let mut ckpt = Checkpoint::load(p)?;
            if let Some(n) = a.iters {
                ckpt.config.iters = n;
            }
            Trainer::resume(ckpt, &data)?
        }
        None => Trainer::new(build_config(a)?, &data)?,
    };
    let iters = trainer.cfg.iters;
    let every = (iters / 20).max(1);
    let until = a.stop_after.map_or(iters, |n| n.min(iters));
    trainer.run_until(until, |row| {
        if (row.step + 1) % every == 0 {
            info!(
                "step {} loss {:.5} lr {:.3e}",
                row.step + 1,
                row.loss,
                row.lr
            );
        }
    })?;
    let ckpt = trainer.checkpoint()?;
    ckpt.save(&a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let mut w = BufWriter::new(fs::File::create(&log_path)?);
    write_csv(&mut w, &trainer.log)?;
    w.flush()?;
    let m = trainer.evaluate_heldout()?;
    let loss = if trainer.log.is_empty() {
        f64::NAN
    } else {
        tail_loss(&trainer.log)
    };
    println!(
        "final loss={loss:.6} psnr={:.4} depth_mae={:.6}",
        m.psnr_rgb, m.mae_depth
    );
    Ok(())
}

fn render(a: &RenderArgs) -> CliResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let cameras = Camera::parse_json(&read_text(&a.camera)?)?;
    for (i, cam) in cameras.iter().enumerate() {
        let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
        if a.width.is_some_and(|x| x != w) || a.height.is_some_and(|y| y != h) {
            return Err(usage(format!(
                "camera {i} is {w}x{h}, which disagrees with the requested resolution"
            )));
        }
    }
    let samples = a.samples.unwrap_or(ckpt.config.render_samples);
    let stem = a.out.to_string_lossy().into_owned();
    for (i, cam) in cameras.iter().enumerate() {
        let view = render_view(&ckpt.volume, &ckpt.model.fields, cam, samples)?;
        let prefix = if cameras.len() == 1 {
            stem.clone()
        } else {
            format!("{stem}_{i:03}")
        };
        let create = |suffix: &str| -> CliResult<BufWriter<fs::File>> {
            Ok(BufWriter::new(fs::File::create(format!(
                "{prefix}_{suffix}"
            ))?))
        };
        let mut f = create("rgb.ppm")?;
        write_ppm(&mut f, &view.rgb)?;
        f.flush()?;
        let mut f = create("depth.pfm")?;
        write_pfm(&mut f, &view.depth)?;
        f.flush()?;
        let mut f = create("acc.pfm")?;
        write_pfm(&mut f, &view.acc)?;
        f.flush()?;
    }
    println!("rendered {} view(s) to {stem}", cameras.len());
    Ok(())
}

fn mesh(a: &MeshArgs) -> CliResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mesh = extract_mesh(&ckpt.volume, &ckpt.model.fields, a.resolution, a.iso)?;
    if mesh.is_empty() {
        warn!("the field never crosses {}; writing an empty mesh", a.iso);
    }
    let mut w = BufWriter::new(fs::File::create(&a.out)?);
    mesh.write_obj(&mut w)?;
    w.flush()?;
    println!(
        "vertices={} triangles={}",
        mesh.vertices.len(),
        mesh.triangles.len()
    );
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs) -> CliResult {
    let scene = micro_scene(a.seed, a.rays, a.samples, false)?;
    let report = gradcheck(&scene, a.step, a.rel_tol, a.abs_tol, a.corrupt_adjoint)?;
    println!(
        "loss {:.6e} h {:e} rel_tol {:e} abs_tol {:e}",
        report.loss, report.h, report.rel_tol, report.abs_tol
    );
    for g in &report.groups {
        println!(
            "{:<9} scalars {:>5} worst_rel {:.3e} worst_abs {:.3e} failures {}",
            g.group.name(),
            g.scalars,
            g.worst_rel,
            g.worst_abs,
            g.failures
        );
    }
    if report.passed() {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            msg: "gradcheck failed".into(),
        })
    }
}

fn eval(a: &EvalArgs) -> CliResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = Dataset::read_dir(&a.data)?;
    if ckpt.check_dataset(&data).is_err() {
        warn!(
            "{} is not the dataset this checkpoint was trained on",
            a.data.display()
        );
    }
    let frames = if a.all_views {
        &data.frames[..]
    } else {
        &data.frames[data.heldout_indices()]
    };
    let samples = a.samples.unwrap_or(ckpt.config.render_samples);
    let m = evaluate_frames(&ckpt.volume, &ckpt.model.fields, frames, samples)?;
    println!(
        "psnr={:.4} depth_mae={:.6} coverage={:.4}",
        m.psnr_rgb, m.mae_depth, m.weight_coverage
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let version = format!(
        "{} (config schema {})",
        env!("CARGO_PKG_VERSION"),
        RunConfig::schema_hash()
    );
    let matches = Cli::command().version(&*version.leak()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Render(a) => render(a),
        Command::Mesh(a) => mesh(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
