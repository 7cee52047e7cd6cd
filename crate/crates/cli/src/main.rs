use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use primfield_core::config::AppConfig;
use primfield_core::dataset::{
    self, frame_file, read_color_png, read_dataset, read_u16_png, write_color_png, write_dataset, write_depth_png,
    write_semantic_raw, write_u16_png, Dataset, EvalKind,
};
use primfield_core::edit::EditState;
use primfield_core::edit_script::EditScript;
use primfield_core::field::RadianceField;
use primfield_core::geometry::{Frame, Intrinsics, Pose, Vec3};
use primfield_core::metrics::{psnr, ssim};
use primfield_core::pipeline::Mapper;
use primfield_core::registry::Registry;
use primfield_core::render::render_image;
use primfield_core::synth::{add_depth_noise, emit_trajectory, raytrace_frame, SceneSpec, TrajectoryKind};
use primfield_core::train::{write_log_csv, Holdout, TrainMode, Trainer};
use primfield_core::volume::{Grid, SemanticVolume};

const VOLUME_FILE: &str = "volume.bin";
const REGISTRY_FILE: &str = "registry.txt";
const FIELD_FILE: &str = "field.bin";
const EDIT_FILE: &str = "edit.txt";

#[derive(Parser)]
#[command(name = "primfield", version, about = "Primitive-aware radiance field reconstruction from posed RGB-D")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// `key = value` configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Detect planes and fuse a dataset into a semantic volume.
    Fuse(FuseArgs),
    /// Train the radiance field.
    Train(TrainArgs),
    /// Render color, depth and semantic images.
    Render(RenderArgs),
    /// PSNR/SSIM of rendered images against ground truth.
    Eval(EvalArgs),
    /// Apply an edit script to a model.
    EditApply(EditApplyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    BoxRoom,
    SingleWall,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "box-room")]
    preset: Preset,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    train: usize,
    /// Held-out views: half interpolation, half extrapolation.
    #[arg(long, default_value_t = 10)]
    eval: usize,
    /// Depth noise sigma in meters.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Extrapolation margin (radians along the arc, meters of lift).
    #[arg(long, default_value_t = 0.15)]
    margin: f64,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Skip plane detection (dense-only volume).
    #[arg(long)]
    planes_disabled: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Batch,
    Incremental,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model directory (from `fuse` in batch mode; created in incremental mode).
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Total steps (one epoch of this many iterations).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Views {
    Eval,
    Train,
    All,
    Interpolation,
    Extrapolation,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Dataset whose cameras are rendered.
    #[arg(long, conflicts_with = "cameras")]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "eval")]
    views: Views,
    /// Pose file (`index` + 16 row-major values per line); needs `--intrinsics`.
    #[arg(long, requires = "intrinsics")]
    cameras: Option<PathBuf>,
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    /// Edit script applied before rendering.
    #[arg(long)]
    edit: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    rendered: PathBuf,
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Args)]
struct EditApplyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    edit: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            // same code clap uses for bad arguments
            let usage = matches!(e.downcast_ref(), Some(primfield_core::Error::Usage(_)));
            std::process::ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let mut cfg = AppConfig::small_frames();
    if let Some(path) = &cli.config {
        cfg.load_into(path)?;
    }
    cfg.train.seed = cli.seed;
    cfg.mapping.registry.seed = cli.seed;
    match cli.command {
        Command::Synth(a) => synth(&a, cli.seed),
        Command::Fuse(a) => fuse(&a, cfg),
        Command::Train(a) => train(&a, cfg),
        Command::Render(a) => render(&a, &cfg),
        Command::Eval(a) => eval(&a),
        Command::EditApply(a) => edit_apply(&a),
    }
}

fn synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let spec = match a.preset {
        Preset::BoxRoom => SceneSpec::box_room(),
        Preset::SingleWall => SceneSpec::single_wall(),
    };
    if a.train < 2 && a.eval > 0 {
        bail!("held-out views need at least 2 training views");
    }
    let intr = SceneSpec::default_intrinsics();
    let arc = spec.default_arc();
    let train = arc.poses(a.train)?;
    let n_interp = a.eval.div_ceil(2);
    let n_extrap = a.eval - n_interp;
    let mut poses = train.clone();
    let mut eval = BTreeMap::new();
    if n_interp > 0 {
        for p in emit_trajectory(&arc, &train, TrajectoryKind::Interpolation, n_interp, a.margin)? {
            eval.insert(poses.len(), EvalKind::Interpolation);
            poses.push(p);
        }
    }
    if n_extrap > 0 {
        for p in emit_trajectory(&arc, &train, TrajectoryKind::Extrapolation, n_extrap, a.margin)? {
            eval.insert(poses.len(), EvalKind::Extrapolation);
            poses.push(p);
        }
    }
    let frames = poses
        .iter()
        .enumerate()
        .map(|(i, p)| add_depth_noise(&raytrace_frame(&spec, p, &intr, i), a.noise, seed))
        .collect::<primfield_core::Result<Vec<_>>>()?;
    write_dataset(&a.out, &intr, &frames, &eval, true)?;
    log::info!("wrote {} frames ({} held out) to {}", frames.len(), eval.len(), a.out.display());
    Ok(())
}

/// Aligned grid over the back-projected valid depth of `frames`.
fn grid_for(frames: &[Frame], voxel: f64) -> Result<Grid> {
    let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
    for f in frames {
        for row in 0..f.height() {
            for col in 0..f.width() {
                if let Some(p) = f.backproject_pixel(col, row) {
                    lo = lo.inf(&p);
                    hi = hi.sup(&p);
                }
            }
        }
    }
    if !lo.iter().all(|v| v.is_finite()) {
        bail!("no valid depth in the dataset");
    }
    Ok(Grid::aligned(lo, hi, voxel)?)
}

fn scene_radius(grid: &Grid) -> f64 {
    0.5 * (grid.max() - grid.min()).norm()
}

fn write_semantics(dir: &Path, frames: &[Frame]) -> Result<()> {
    std::fs::create_dir_all(dir.join("semantic"))?;
    for f in frames {
        let ids: Vec<u16> = f.semantic.iter().map(|&s| s.min(u16::MAX as u32) as u16).collect();
        write_u16_png(&frame_file(dir, "semantic", f.index), f.width(), f.height(), &ids)?;
    }
    Ok(())
}

fn write_mapping(dir: &Path, mapper: &Mapper) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    mapper.volume.save(&dir.join(VOLUME_FILE))?;
    mapper.registry.save(&dir.join(REGISTRY_FILE))?;
    write_semantics(dir, &mapper.frames)?;
    let mut report = String::from("frame detected alive removed E->D E->P D->E D->P P->E P->D demoted_dead\n");
    for r in &mapper.reports {
        let t = &r.fusion.transitions;
        let _ = writeln!(
            report,
            "{} {} {} {} {} {} {} {} {} {} {}",
            r.frame,
            r.detected,
            r.alive_planes,
            r.removed.len(),
            t[0][1],
            t[0][2],
            t[1][0],
            t[1][2],
            t[2][0],
            t[2][1],
            r.fusion.demoted_dead
        );
    }
    std::fs::write(dir.join("fusion_report.txt"), report)?;
    Ok(())
}

fn load_training(data: &Path) -> Result<(Dataset, Vec<Frame>)> {
    let ds = read_dataset(data)?;
    let frames = ds.training_frames();
    if frames.is_empty() {
        return Err(primfield_core::Error::Usage(format!("dataset {} has no training frames", data.display())).into());
    }
    Ok((ds, frames))
}

fn fuse(a: &FuseArgs, mut cfg: AppConfig) -> Result<()> {
    cfg.mapping.planes_disabled |= a.planes_disabled;
    cfg.validate()?;
    let (_, frames) = load_training(&a.data)?;
    let grid = grid_for(&frames, cfg.voxel_size)?;
    let mut mapper = Mapper::new(grid, cfg.mapping)?;
    mapper.ingest_all(frames)?;
    write_mapping(&a.out, &mapper)?;
    log::info!(
        "{} alive planes, {} occupied voxels of {}",
        mapper.registry.alive_count(),
        mapper.volume.occupied_count(),
        grid.len()
    );
    Ok(())
}

fn train(a: &TrainArgs, mut cfg: AppConfig) -> Result<()> {
    if let Some(m) = a.mode {
        cfg.train.mode = match m {
            ModeArg::Batch => TrainMode::Batch,
            ModeArg::Incremental => TrainMode::Incremental,
        };
    }
    if let Some(s) = a.steps {
        cfg.train.iters_per_epoch = s;
        cfg.train.epochs = 1;
    }
    if let Some(b) = a.batch {
        cfg.train.rays_per_batch = b;
    }
    cfg.validate()?;
    let (ds, mut frames) = load_training(&a.data)?;
    let holdout = Holdout::from_frames(&ds.eval_frames(EvalKind::Interpolation));
    std::fs::create_dir_all(&a.model)?;
    let trainer = match cfg.train.mode {
        TrainMode::Batch => {
            let mut vol = SemanticVolume::load(&a.model.join(VOLUME_FILE)).context("batch mode needs a fused model")?;
            let registry = Registry::load(cfg.mapping.registry, &a.model.join(REGISTRY_FILE))?;
            for f in &mut frames {
                let path = frame_file(&a.model, "semantic", f.index);
                let (_, _, ids) = read_u16_png(&path)?;
                if ids.len() != f.semantic.len() {
                    bail!("{} does not match the frame size", path.display());
                }
                f.semantic = ids.into_iter().map(u32::from).collect();
            }
            let mut t = Trainer::new(cfg.train, cfg.field, cfg.render, &vol)?;
            let edit = EditState::new(vol.grid);
            let radius = scene_radius(&vol.grid);
            t.run_batch(&mut vol, &registry, &edit, &frames, radius, &holdout)?;
            vol.save(&a.model.join(VOLUME_FILE))?;
            t
        }
        TrainMode::Incremental => {
            let grid = grid_for(&frames, cfg.voxel_size)?;
            let mut mapper = Mapper::new(grid, cfg.mapping)?;
            let mut t = Trainer::new(cfg.train, cfg.field, cfg.render, &mapper.volume)?;
            t.run_incremental(&mut mapper, frames, scene_radius(&grid), &holdout)?;
            write_mapping(&a.model, &mapper)?;
            t
        }
    };
    trainer.field.save(&a.model.join(FIELD_FILE))?;
    write_log_csv(&a.model.join("log.csv"), &trainer.log)?;
    if let Some(last) = trainer.log.last() {
        log::info!("final holdout PSNR {:.2} dB after {} steps", last.psnr_holdout, last.step);
    }
    Ok(())
}

fn load_model(dir: &Path, cfg: &AppConfig) -> Result<(SemanticVolume, Registry, EditState)> {
    let vol = SemanticVolume::load(&dir.join(VOLUME_FILE))?;
    let registry = Registry::load(cfg.mapping.registry, &dir.join(REGISTRY_FILE))?;
    let edit_path = dir.join(EDIT_FILE);
    let edit = if edit_path.exists() {
        let text = std::fs::read_to_string(&edit_path)?;
        EditState::from_text(vol.grid, &text)?
    } else {
        EditState::new(vol.grid)
    };
    Ok((vol, registry, edit))
}

fn render(a: &RenderArgs, cfg: &AppConfig) -> Result<()> {
    let (mut vol, mut registry, mut edit) = load_model(&a.model, cfg)?;
    let field = RadianceField::load(&a.model.join(FIELD_FILE))?;
    if let Some(script) = &a.edit {
        EditScript::load(script)?.apply(&mut vol, &mut registry, &mut edit)?;
    }
    let (intr, cams): (Intrinsics, Vec<(usize, Pose)>) = match (&a.data, &a.cameras) {
        (Some(data), _) => {
            let ds = read_dataset(data)?;
            let keep = |f: &Frame| match a.views {
                Views::All => true,
                Views::Train => !ds.eval.contains_key(&f.index),
                Views::Eval => ds.eval.contains_key(&f.index),
                Views::Interpolation => ds.eval.get(&f.index) == Some(&EvalKind::Interpolation),
                Views::Extrapolation => ds.eval.get(&f.index) == Some(&EvalKind::Extrapolation),
            };
            let cams = ds.frames.iter().filter(|f| keep(f)).map(|f| (f.index, f.pose)).collect();
            (ds.intrinsics, cams)
        }
        (None, Some(cams)) => {
            let intr_path = a.intrinsics.as_ref().expect("clap requires intrinsics");
            let intr = dataset::parse_intrinsics(&std::fs::read_to_string(intr_path)?)?;
            (intr, dataset::parse_poses(&std::fs::read_to_string(cams)?)?)
        }
        (None, None) => bail!("give either --data or --cameras"),
    };
    if cams.is_empty() {
        bail!("no cameras selected");
    }
    for sub in ["color", "depth", "semantic"] {
        std::fs::create_dir_all(a.out.join(sub))?;
    }
    let mut poses = String::new();
    for (index, pose) in &cams {
        let img = render_image(pose, &intr, &vol, &registry, &field, &edit, &cfg.render);
        write_color_png(&frame_file(&a.out, "color", *index), img.width, img.height, &img.color)?;
        write_depth_png(&frame_file(&a.out, "depth", *index), img.width, img.height, &img.depth)?;
        write_semantic_raw(&a.out.join("semantic").join(format!("{index:06}.f32")), &img.semantic)?;
        poses.push_str(&dataset::format_pose_line(*index, pose));
        poses.push('\n');
        log::info!("view {index}: {} samples", img.samples);
    }
    std::fs::write(a.out.join("poses.txt"), poses)?;
    std::fs::write(a.out.join("intrinsics.txt"), dataset::format_intrinsics(&intr))?;
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(a.rendered.join("color"))
        .with_context(|| format!("reading {}", a.rendered.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no rendered color images in {}", a.rendered.display());
    }
    println!("{:<12} {:>9} {:>7}", "view", "psnr_db", "ssim");
    let (mut sp, mut ss) = (0.0, 0.0);
    for p in &names {
        let name = p.file_name().expect("file");
        let (w, h, got) = read_color_png(p)?;
        let (tw, th, want) = read_color_png(&a.truth.join("color").join(name))?;
        if (w, h) != (tw, th) {
            bail!("{} is {w}x{h}, ground truth is {tw}x{th}", name.to_string_lossy());
        }
        let (ps, si) = (psnr(&got, &want)?, ssim(&got, &want, w, h)?);
        println!("{:<12} {:>9.3} {:>7.4}", name.to_string_lossy(), ps, si);
        sp += ps;
        ss += si;
    }
    let n = names.len() as f64;
    println!("{:<12} {:>9.3} {:>7.4}", "mean", sp / n, ss / n);
    Ok(())
}

fn edit_apply(a: &EditApplyArgs) -> Result<()> {
    let cfg = AppConfig::default();
    let (mut vol, mut registry, mut edit) = load_model(&a.model, &cfg)?;
    EditScript::load(&a.edit)?.apply(&mut vol, &mut registry, &mut edit)?;
    std::fs::create_dir_all(&a.out)?;
    vol.save(&a.out.join(VOLUME_FILE))?;
    registry.save(&a.out.join(REGISTRY_FILE))?;
    std::fs::write(a.out.join(EDIT_FILE), edit.to_text())?;
    let field = a.model.join(FIELD_FILE);
    if field.exists() {
        std::fs::copy(&field, a.out.join(FIELD_FILE))?;
    }
    log::info!("{} voxels carry an edit transform", edit.edited_count());
    Ok(())
}
