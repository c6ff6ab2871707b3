//! The `bags` command line: train, render, animate, export, eval, bench.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{
    export_viewer_bundle, load_checkpoint, load_dataset, read_pose_file, save_checkpoint, Checkpoint, Dataset,
};
use crate::losses::{PriorProvider, RemoteConfig, RemoteProvider, ZeroProvider};
use crate::render::{render_forward, Camera, Image, Intrinsics, WorldSplat};
use crate::synthetic::ArmScene;
use crate::trainer::{evaluate, Event, Model, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "bags", version, about = "Animatable Gaussian splatting with neural bones")]
pub struct Cli {
    /// Worker threads for rendering and training (default: one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Render a checkpoint at a time and camera.
    Render(RenderArgs),
    /// Render the canonical model posed by a keyframe file.
    Animate(AnimateArgs),
    /// Write the viewer bundle and its JSON sidecar.
    Export(ExportArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Time forward renders.
    Bench(BenchArgs),
}

#[derive(Clone, Debug, PartialEq)]
pub enum PriorSpec {
    Zero,
    Oracle,
    Remote(String),
}

fn parse_prior(s: &str) -> std::result::Result<PriorSpec, String> {
    match s {
        "zero" => Ok(PriorSpec::Zero),
        "oracle" => Ok(PriorSpec::Oracle),
        _ => match s.strip_prefix("remote:") {
            Some(url) if !url.is_empty() => Ok(PriorSpec::Remote(url.to_string())),
            _ => Err(format!("expected zero, oracle or remote:URL, got {s:?}")),
        },
    }
}

fn parse_resolution(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    if w == 0 || h == 0 {
        return Err("resolution must be non-zero".into());
    }
    Ok((w, h))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with `[train]` and `[remote]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "zero", value_parser = parse_prior)]
    pub prior: PriorSpec,
    #[arg(long)]
    pub warmup_iterations: Option<usize>,
    #[arg(long)]
    pub joint_iterations: Option<usize>,
    /// Resume from this checkpoint (its stored config is used).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CameraArgs {
    /// Dataset whose frame camera `--frame` refers to.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Use this training frame's camera (and time, unless `--time` is given).
    #[arg(long, requires = "manifest")]
    pub frame: Option<usize>,
    /// Normalized time in [0, 1].
    #[arg(long)]
    pub time: Option<f64>,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub azimuth: f64,
    #[arg(long, default_value_t = 15.0, allow_negative_numbers = true)]
    pub elevation: f64,
    /// Orbit radius in scene extents.
    #[arg(long, default_value_t = 3.0)]
    pub distance: f64,
    /// Horizontal field of view, degrees.
    #[arg(long, default_value_t = 45.0)]
    pub fov: f64,
    #[arg(long, value_parser = parse_resolution)]
    pub resolution: Option<(usize, usize)>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// PNG path, or a directory with `--orbit`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub camera: CameraArgs,
    /// Render N views evenly spaced in azimuth.
    #[arg(long)]
    pub orbit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnimateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Keyframe JSON.
    #[arg(long)]
    pub pose: PathBuf,
    /// Directory for `frame_NNN.png`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub camera: CameraArgs,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Bundle path; the sidecar is written to `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_parser = parse_resolution, default_value = "256x256")]
    pub resolution: (usize, usize),
    #[arg(long, default_value_t = 20)]
    pub iterations: usize,
    /// Normalized time of the posed model.
    #[arg(long, default_value_t = 0.5)]
    pub time: f64,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. }
        | Error::Image { .. }
        | Error::Dataset(_)
        | Error::EmptySequence
        | Error::FrameDimension { .. }
        | Error::NonMonotoneTime { .. }
        | Error::Format(_)
        | Error::Checksum
        | Error::Version { .. } => 3,
        Error::Divergence { .. } | Error::NonFinite(_) => 4,
        _ => 1,
    }
}

/// `[train]` and `[remote]` tables; unknown keys are errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub train: TrainConfig,
    pub remote: RemoteConfig,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Defaults, then the file, then flags.
pub fn layered_config(args: &TrainArgs) -> Result<ConfigFile> {
    let mut c = match &args.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    if let Some(s) = args.seed {
        c.train.seed = s;
    }
    if let Some(n) = args.warmup_iterations {
        c.train.warmup_iterations = n;
    }
    if let Some(n) = args.joint_iterations {
        c.train.joint_iterations = n;
    }
    if let PriorSpec::Remote(url) = &args.prior {
        c.remote.url = url.clone();
    }
    c.train.validate()?;
    Ok(c)
}

/// Parses `std::env::args`, runs, and returns the exit status.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BAGS_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        // a second build in the same process keeps the first pool
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() && rayon::current_num_threads() != n {
            log::warn!("thread pool already running with {} threads", rayon::current_num_threads());
        }
    }
    match cli.command {
        Command::Train(a) => train(&a).map(|_| ()),
        Command::Render(a) => render(&a),
        Command::Animate(a) => animate(&a),
        Command::Export(a) => export(&a),
        Command::Eval(a) => eval(&a).map(|_| ()),
        Command::Bench(a) => bench(&a).map(|_| ()),
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<String> {
    let s = serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))?;
    // a closed pipe is not an error for a report
    let _ = writeln!(std::io::stdout().lock(), "{s}");
    Ok(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn build_provider(spec: &PriorSpec, manifest: &Path, remote: &RemoteConfig) -> Result<Box<dyn PriorProvider>> {
    Ok(match spec {
        PriorSpec::Zero => Box::new(ZeroProvider),
        PriorSpec::Oracle => match ArmScene::for_manifest(manifest)? {
            Some(scene) => Box::new(scene.oracle()),
            None => {
                return Err(Error::Config(format!(
                    "--prior oracle needs a generated scene beside {}",
                    manifest.display()
                )))
            }
        },
        PriorSpec::Remote(_) => Box::new(RemoteProvider::new(remote.clone())?),
    })
}

fn tagged<T: Serialize>(kind: &str, v: &T) -> Result<String> {
    let mut value = serde_json::to_value(v).map_err(|e| Error::Format(e.to_string()))?;
    if let serde_json::Value::Object(m) = &mut value {
        m.insert("event".into(), kind.into());
    }
    serde_json::to_string(&value).map_err(|e| Error::Format(e.to_string()))
}

/// Paths `train` writes under `--out`.
pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join("checkpoint.bags")
}

pub fn metrics_path(out: &Path) -> PathBuf {
    out.join("metrics.jsonl")
}

pub fn train(args: &TrainArgs) -> Result<crate::trainer::EvalReport> {
    let dataset = load_dataset(&args.manifest)?;
    create_dir(&args.out)?;
    let resumed = match &args.checkpoint {
        Some(p) => {
            if args.config.is_some() || args.seed.is_some() || args.warmup_iterations.is_some() || args.joint_iterations.is_some() {
                return Err(Error::Config("a resumed run uses its stored config; drop the config flags".into()));
            }
            Some(load_checkpoint(p)?)
        }
        None => None,
    };
    let file = match &resumed {
        Some(ck) => {
            let mut f = match &args.config {
                Some(p) => ConfigFile::load(p)?,
                None => ConfigFile::default(),
            };
            f.train = ck.config.clone();
            if let PriorSpec::Remote(url) = &args.prior {
                f.remote.url = url.clone();
            }
            f
        }
        None => layered_config(args)?,
    };
    let provider = build_provider(&args.prior, &args.manifest, &file.remote)?;
    let mut trainer = match resumed {
        Some(ck) => Trainer::resume(ck.config, &dataset, provider.as_ref(), ck.model, ck.state)?,
        None => Trainer::new(file.train.clone(), &dataset, provider.as_ref())?,
    };
    let metrics = metrics_path(&args.out);
    let f = File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
    let mut log_file = BufWriter::new(f);
    let ckpt = checkpoint_path(&args.out);
    let interval = trainer.config.checkpoint_interval;
    let start = Instant::now();
    let result = trainer.run(&mut |t, ev| {
        let line = match ev {
            Event::Step(m) => tagged("step", m)?,
            Event::Eval(r) => {
                log::info!(
                    "{} iteration {}: psnr {:.2} iou {:.4} rigid {:.3e} ({:.0}s)",
                    r.stage.name(),
                    r.iteration,
                    r.psnr,
                    r.iou,
                    r.rigid_loss,
                    start.elapsed().as_secs_f64()
                );
                tagged("eval", r)?
            }
        };
        writeln!(log_file, "{line}").map_err(|e| Error::io(&metrics, e))?;
        if let Event::Step(_) = ev {
            let it = t.global_iteration();
            if interval > 0 && it % interval == 0 && !t.is_done() {
                log_file.flush().map_err(|e| Error::io(&metrics, e))?;
                save_checkpoint(&Checkpoint::from_trainer(t), &ckpt)?;
            }
        }
        Ok(())
    });
    log_file.flush().map_err(|e| Error::io(&metrics, e))?;
    match result {
        Ok(report) => {
            save_checkpoint(&Checkpoint::from_trainer(&trainer), &ckpt)?;
            print_json(&report)?;
            Ok(report)
        }
        Err(e) => {
            if let Error::Divergence { .. } = e {
                let dump = args.out.join("diverged.bags");
                save_checkpoint(&Checkpoint::from_trainer(&trainer), &dump)?;
                let info = serde_json::json!({
                    "error": e.to_string(),
                    "stage": trainer.state.stage,
                    "iteration": trainer.state.iteration,
                    "state": dump,
                });
                write_text(&args.out.join("diverged.json"), &info.to_string())?;
                log::error!("state written to {}", dump.display());
            }
            Err(e)
        }
    }
}

fn centroid(splats: &[WorldSplat]) -> Vector3<f64> {
    splats.iter().map(|s| s.mean).sum::<Vector3<f64>>() / splats.len().max(1) as f64
}

/// Camera and time from the flags. Orbit cameras look at the centroid of
/// `center_of`, which receives the chosen time.
fn resolve_camera(
    args: &CameraArgs,
    model: &Model,
    azimuth: f64,
    center_of: &dyn Fn(f64) -> Result<Vec<WorldSplat>>,
) -> Result<(Camera, f64)> {
    if let Some(k) = args.frame {
        let manifest = args.manifest.as_ref().expect("clap enforces --manifest");
        let dataset = load_dataset(manifest)?;
        let f = dataset
            .frames
            .get(k)
            .ok_or_else(|| Error::Config(format!("frame {k} of {}", dataset.frames.len())))?;
        let cam = match args.resolution {
            Some((w, h)) => f.camera.resized(w, h),
            None => f.camera,
        };
        return Ok((cam, args.time.unwrap_or(f.t_norm)));
    }
    let t = args.time.unwrap_or(0.5);
    let (w, h) = args.resolution.unwrap_or((256, 256));
    if !(args.fov > 0.0 && args.fov < 180.0) || !(args.distance > 0.0) {
        return Err(Error::Config("fov must lie in (0, 180) and distance be positive".into()));
    }
    let center = centroid(&center_of(t.clamp(0.0, 1.0))?);
    let cam = Camera::orbit(
        center,
        args.distance * model.extent,
        azimuth,
        args.elevation,
        Intrinsics::from_fov(args.fov, w, h),
    );
    Ok((cam, t))
}

fn save_png(img: &Image, path: &Path) -> Result<()> {
    std::fs::write(path, img.to_png()?).map_err(|e| Error::io(path, e))
}

pub fn render(args: &RenderArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let model = &ck.model;
    let posed = |t: f64| model.splats(t, model.frame_for_time(t));
    match args.orbit {
        None => {
            let (cam, t) = resolve_camera(&args.camera, model, args.camera.azimuth, &posed)?;
            save_png(&model.render(&cam, t)?.color, &args.out)
        }
        Some(0) => Err(Error::Config("--orbit needs at least one view".into())),
        Some(n) => {
            if args.camera.frame.is_some() {
                return Err(Error::Config("--orbit and --frame are exclusive".into()));
            }
            create_dir(&args.out)?;
            for i in 0..n {
                let az = args.camera.azimuth + 360.0 * i as f64 / n as f64;
                let (cam, t) = resolve_camera(&args.camera, model, az, &posed)?;
                save_png(&model.render(&cam, t)?.color, &args.out.join(format!("orbit_{i:03}.png")))?;
            }
            Ok(())
        }
    }
}

/// Canonical model under the pose file, moved by the reference frame's root.
pub fn animate(args: &AnimateArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let pose = read_pose_file(&args.pose)?;
    let model = &ck.model;
    let canonical = model.rig.canonical_pose()?;
    if canonical.len() != pose.bone_count {
        return Err(Error::Config(format!(
            "pose file has {} bones, model has {}",
            pose.bone_count,
            canonical.len()
        )));
    }
    let reference = ck.state.reference;
    let rest = |_: f64| Ok(model.canonical_splats(reference));
    let (cam, _) = resolve_camera(&args.camera, model, args.camera.azimuth, &rest)?;
    create_dir(&args.out)?;
    for f in 0..pose.frames {
        let splats = model.posed_splats(&pose.deltas_at(f, &canonical)?, reference)?;
        let out = render_forward(&splats, &cam, model.background, &model.settings);
        save_png(&out.color, &args.out.join(format!("frame_{f:03}.png")))?;
    }
    Ok(())
}

pub fn export(args: &ExportArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let meta = export_viewer_bundle(&ck.model, &args.out)?;
    print_json(&meta)?;
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<crate::trainer::EvalReport> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let dataset: Dataset = load_dataset(&args.manifest)?;
    let mut report = evaluate(&ck.model, &dataset)?;
    report.stage = ck.state.stage;
    report.iteration = ck.state.global_iteration(&ck.config);
    let line = print_json(&report)?;
    if let Some(p) = &args.out {
        write_text(p, &line)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub splats: usize,
    pub width: usize,
    pub height: usize,
    pub threads: usize,
    pub iterations: usize,
    pub mean_fps: f64,
    pub median_fps: f64,
    pub mean_ms: f64,
    pub median_ms: f64,
}

/// Times `iterations` forward renders of fixed splats after one untimed render.
pub fn bench_splats(splats: &[WorldSplat], cam: &Camera, model: &Model, iterations: usize) -> Result<BenchReport> {
    if iterations == 0 {
        return Err(Error::Config("bench needs at least one iteration".into()));
    }
    render_forward(splats, cam, model.background, &model.settings);
    let mut ms: Vec<f64> = (0..iterations)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(render_forward(splats, cam, model.background, &model.settings));
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    ms.sort_by(f64::total_cmp);
    let mean_ms = ms.iter().sum::<f64>() / iterations as f64;
    let median_ms = if iterations % 2 == 1 {
        ms[iterations / 2]
    } else {
        0.5 * (ms[iterations / 2 - 1] + ms[iterations / 2])
    };
    Ok(BenchReport {
        splats: splats.len(),
        width: cam.width,
        height: cam.height,
        threads: rayon::current_num_threads(),
        iterations,
        mean_fps: 1e3 / mean_ms,
        median_fps: 1e3 / median_ms,
        mean_ms,
        median_ms,
    })
}

pub fn bench(args: &BenchArgs) -> Result<BenchReport> {
    if args.iterations == 0 {
        return Err(Error::Config("bench needs at least one iteration".into()));
    }
    let ck = load_checkpoint(&args.checkpoint)?;
    let model = &ck.model;
    let t = args.time.clamp(0.0, 1.0);
    let splats = model.splats(t, model.frame_for_time(t))?;
    let (w, h) = args.resolution;
    let cam = Camera::orbit(centroid(&splats), 3.0 * model.extent, 0.0, 15.0, Intrinsics::from_fov(45.0, w, h));
    let report = bench_splats(&splats, &cam, model, args.iterations)?;
    let line = print_json(&report)?;
    if let Some(p) = &args.out {
        write_text(p, &line)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("bags").chain(args.iter().copied()))
    }

    #[test]
    fn flag_parsing() {
        assert_eq!(parse_prior("remote:http://x/y").unwrap(), PriorSpec::Remote("http://x/y".into()));
        assert!(parse_prior("remote:").is_err());
        assert!(parse_prior("diffusion").is_err());
        assert_eq!(parse_resolution("320x240").unwrap(), (320, 240));
        assert!(parse_resolution("320").is_err());
        assert!(parse_resolution("0x2").is_err());
        assert!(parse(&["train", "--manifest", "m.json"]).is_err());
        assert!(parse(&["render", "--checkpoint", "c", "--out", "o.png", "--frame", "2"]).is_err());
        assert!(parse(&["bench", "--checkpoint", "c", "--bogus"]).is_err());
        let c = parse(&["--threads", "3", "render", "--checkpoint", "c", "--out", "o", "--azimuth", "-40"]).unwrap();
        assert_eq!(c.threads, Some(3));
        match c.command {
            Command::Render(r) => assert_eq!(r.camera.azimuth, -40.0),
            _ => panic!(),
        }
    }

    #[test]
    fn config_layering_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nseed = 5\njoint_iterations = 7\n[train.weights]\nrigid = 0.0\n[remote]\nretries = 3\n").unwrap();
        let Command::Train(mut a) = parse(&["train", "--manifest", "m", "--out", "o", "--config", p.to_str().unwrap(), "--seed", "9"])
            .unwrap()
            .command
        else {
            panic!()
        };
        let c = layered_config(&a).unwrap();
        assert_eq!((c.train.seed, c.train.joint_iterations, c.train.weights.rigid), (9, 7, 0.0));
        assert_eq!(c.remote.retries, 3);
        std::fs::write(&p, "[train]\nsed = 5\n").unwrap();
        assert!(matches!(layered_config(&a), Err(Error::Config(_))));
        std::fs::write(&p, "[trian]\nseed = 5\n").unwrap();
        assert!(matches!(layered_config(&a), Err(Error::Config(_))));
        a.config = Some(dir.path().join("missing.toml"));
        let e = layered_config(&a).unwrap_err();
        assert_eq!(exit_code(&e), 3);
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            exit_code(&Error::Config("x".into())),
            exit_code(&Error::io("p", std::io::Error::other("x"))),
            exit_code(&Error::Divergence {
                stage: "joint",
                iteration: 1,
                message: "nan".into(),
            }),
            exit_code(&Error::InvalidInput("x".into())),
        ];
        assert_eq!(codes, [2, 3, 4, 1]);
    }
}
