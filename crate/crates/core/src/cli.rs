//! Command-line front end: `synth → localize → train → render → eval`.
//!
//! Exit codes: 0 on success, 2 for invalid input (arguments, files, configs),
//! 3 when a solver fails.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use nalgebra::Vector3;

use crate::ba::{FrameMasks, KeyframePolicy, LocalizeInput, Trajectory};
use crate::field::{HexPlaneField, FieldError};
use crate::geometry::PoseSE3;
use crate::io::{
    load_dataset, read_p6, read_tum_trajectory, write_dataset, write_p6, write_tum_trajectory, Dataset, IoError,
    RunConfig,
};
use crate::localize::{localize, LocalizeError, MaskMode};
use crate::metrics::{align, psnr, ssim, EvalReport, MetricsError, ReportRow};
use crate::render::{is_holdout, render_image, scene_bounds, train, RenderError, TrainingView};
use crate::synth::{NoisyFlow, SceneSpec, SyntheticScene, SynthError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "hexslam", version, about = "Motion-masked localization and space-time radiance fields")]
struct Cli {
    /// Seed for scene textures, flow noise, field initialization and ray sampling.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReportFormat {
    Csv,
    Table,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Alignment {
    /// Similarity (rotation, translation, scale).
    Sim3,
    /// Rigid (rotation, translation).
    Se3,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Synth {
        /// Scene TOML file, or the name of a built-in scene (`box-orbit`).
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
        /// Standard deviation of Gaussian noise added to all flow pixels.
        #[arg(long, default_value_t = 0.1)]
        flow_noise: f64,
    },
    /// Estimate camera poses from a dataset's flow.
    Localize {
        #[arg(long)]
        data: PathBuf,
        /// `none`, `ms` (motion masks) or `ms+ss` (motion and semantic masks).
        #[arg(long, default_value = "ms")]
        masks: MaskMode,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit a space-time radiance field to a dataset and trajectory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training log (`iter,loss,l_rgb,l_tv_sigma,l_tv_rgb,psnr_holdout`).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Hold out frames `i` with `i mod N = N / 2`; 0 trains on everything.
        #[arg(long, default_value_t = 0)]
        holdout: usize,
    },
    /// Render one view of a trained field.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// TUM trajectory file (with `--frame`) or seven numbers `tx,ty,tz,qx,qy,qz,qw`.
        #[arg(long, allow_hyphen_values = true)]
        pose: String,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// Normalized time in `[0, 1]`.
        #[arg(long)]
        time: f64,
        /// `intrinsics.txt` of the dataset.
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Absolute trajectory error between two TUM files.
    EvalTraj {
        #[arg(long)]
        est: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, value_enum, default_value_t = Alignment::Sim3)]
        align: Alignment,
        #[arg(long, value_enum)]
        report: Option<ReportFormat>,
    },
    /// PSNR and SSIM of rendered images against ground truth with the same file names.
    EvalNvs {
        #[arg(long)]
        renders: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
        report: ReportFormat,
    },
    /// synth, localize, train, render held-out views and report.
    Pipeline {
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "ms")]
        masks: MaskMode,
        #[arg(long, default_value_t = 0.1)]
        flow_noise: f64,
        #[arg(long, default_value_t = 5)]
        holdout: usize,
        #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
        report: ReportFormat,
    },
}

/// Failure classified by exit code.
#[derive(Debug)]
enum CliError {
    Invalid(String),
    Solver(String),
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<FieldError> for CliError {
    fn from(e: FieldError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> Self {
        match e {
            RenderError::NonFinite { .. } => CliError::Solver(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<LocalizeError> for CliError {
    fn from(e: LocalizeError) -> Self {
        use crate::ba::BaError;
        let invalid = matches!(
            e,
            LocalizeError::MissingSemantic
                | LocalizeError::Ba(BaError::InvalidArgument(_) | BaError::Flow { .. })
        );
        if invalid {
            CliError::Invalid(e.to_string())
        } else {
            CliError::Solver(e.to_string())
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(CliError::Invalid(m)) => {
            eprintln!("error: {m}");
            EXIT_INVALID
        }
        Err(CliError::Solver(m)) => {
            eprintln!("solver failure: {m}");
            EXIT_SOLVER
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth { spec, out, flow_noise } => {
            synth(&spec, &out, flow_noise, seed)?;
            Ok(())
        }
        Command::Localize {
            data,
            masks,
            out,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ds = load_dataset(&data)?;
            let traj = run_localize(&ds, masks, &cfg)?;
            write_tum_trajectory(&traj, &out)?;
            if let Some(gt) = &ds.ground_truth {
                println!("ate_rms_m {:.6}", align(&traj, gt, true)?.rms());
            }
            Ok(())
        }
        Command::Train {
            data,
            traj,
            config,
            out,
            log,
            holdout,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ds = load_dataset(&data)?;
            let traj = read_tum_trajectory(&traj)?;
            let field = run_train(&ds, traj.poses(), &cfg, holdout, seed, log.as_deref())?;
            save_field(&field, &out)
        }
        Command::Render {
            ckpt,
            pose,
            frame,
            time,
            intrinsics,
            out,
            samples,
        } => {
            let field = load_field(&ckpt)?;
            let pose = parse_pose(&pose, frame)?;
            let k = crate::io::load_intrinsics(&intrinsics)?;
            let img = render_image(&field, &k, &pose, time, samples, crate::render::TrainConfig::default().near)?;
            write_p6(&img, &out)?;
            Ok(())
        }
        Command::EvalTraj {
            est,
            reference,
            align: alignment,
            report,
        } => {
            let est_t = read_tum_trajectory(&est)?;
            let ref_t = read_tum_trajectory(&reference)?;
            let with_scale = matches!(alignment, Alignment::Sim3);
            let ate = align(&est_t, &ref_t, with_scale)?.rms();
            match report {
                None => println!("ate_rms_m {ate:.6}"),
                Some(f) => {
                    let name = est.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    let rep = EvalReport {
                        rows: vec![ReportRow {
                            name,
                            ate_rms: Some(ate),
                            psnr: None,
                            ssim: None,
                        }],
                        alignment: alignment_name(alignment).into(),
                    };
                    print_report(&rep, f);
                }
            }
            Ok(())
        }
        Command::EvalNvs { renders, gt, report } => {
            let rep = eval_nvs(&renders, &gt)?;
            print_report(&rep, report);
            Ok(())
        }
        Command::Pipeline {
            spec,
            out,
            config,
            masks,
            flow_noise,
            holdout,
            report,
        } => {
            let rep = pipeline(&spec, &out, config.as_deref(), masks, flow_noise, holdout, seed)?;
            std::fs::write(out.join("report.csv"), rep.to_csv()).map_err(|e| CliError::Invalid(e.to_string()))?;
            print_report(&rep, report);
            Ok(())
        }
    }
}

fn alignment_name(a: Alignment) -> &'static str {
    match a {
        Alignment::Sim3 => "sim3",
        Alignment::Se3 => "se3",
    }
}

fn print_report(rep: &EvalReport, format: ReportFormat) {
    match format {
        ReportFormat::Csv => print!("{}", rep.to_csv()),
        ReportFormat::Table => print!("{}", rep.to_table()),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

/// A scene TOML file, or a built-in scene name.
fn load_spec(spec: &str) -> Result<SceneSpec, CliError> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("{spec}: {e}")))?;
        return toml::from_str(&text).map_err(|e| CliError::Invalid(format!("{spec}: {e}")));
    }
    match spec {
        "box-orbit" => Ok(SceneSpec::box_orbit()),
        _ => Err(CliError::Invalid(format!("no scene file or built-in scene named '{spec}'"))),
    }
}

fn synth(spec: &str, out: &Path, flow_noise: f64, seed: u64) -> Result<SceneSpec, CliError> {
    if !(flow_noise >= 0.0 && flow_noise.is_finite()) {
        return Err(CliError::Invalid(format!("flow noise must be ≥ 0, got {flow_noise}")));
    }
    let spec = load_spec(spec)?;
    let scene = SyntheticScene::new(spec.clone(), seed)?;
    let frames = scene.generate();
    let noisy = NoisyFlow {
        inner: scene.clone(),
        noise_sigma: flow_noise,
        outlier_fraction: 0.0,
        seed,
    };
    write_dataset(out, &frames, &scene.intrinsics(), &noisy)?;
    info!("wrote {} frames of '{}' to {}", frames.len(), spec.name, out.display());
    Ok(spec)
}

fn run_localize(ds: &Dataset, mode: MaskMode, cfg: &RunConfig) -> Result<Trajectory, CliError> {
    let flow = ds.flow();
    let input = LocalizeInput {
        intrinsics: ds.intrinsics,
        timestamps: &ds.timestamps,
        flow: &flow,
        masks: None,
        initial: None,
        keyframes: None,
    };
    let empty = FrameMasks::new();
    let semantic = match mode {
        MaskMode::MotionSemantic => Some(ds.semantic_masks.as_ref().unwrap_or(&empty)),
        _ => None,
    };
    let out = localize(&input, mode, semantic, &cfg.ba, &cfg.mask, &KeyframePolicy::default())?;
    for r in &out.reports {
        info!(
            "keyframe {}: mask coverage {:.3}{}",
            r.frame,
            r.coverage,
            if r.discarded { " (discarded)" } else { "" }
        );
    }
    Ok(out.result.trajectory)
}

fn run_train(
    ds: &Dataset,
    poses: &[PoseSE3],
    cfg: &RunConfig,
    holdout: usize,
    seed: u64,
    log: Option<&Path>,
) -> Result<HexPlaneField, CliError> {
    if poses.len() != ds.frame_count() {
        return Err(CliError::Invalid(format!(
            "trajectory has {} poses for {} frames",
            poses.len(),
            ds.frame_count()
        )));
    }
    let (train_views, held) = split_views(ds, poses, holdout);
    let tc = crate::render::TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let bounds = match cfg.field.bounds {
        Some(b) => b,
        None => scene_bounds(&ds.intrinsics, poses, tc.far)?,
    };
    let fc = &cfg.field;
    let field = HexPlaneField::new(bounds, fc.resolution(), fc.ranks, fc.feature_dim, fc.hidden_width, seed)?;
    let mut file = match log {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let out = train(
        field,
        &train_views,
        &held,
        &ds.intrinsics,
        &tc,
        file.as_mut().map(|f| f as &mut dyn std::io::Write),
    )?;
    if let Some(p) = out.final_psnr {
        info!("held-out PSNR {p:.2} dB");
    }
    Ok(out.field)
}

fn split_views(ds: &Dataset, poses: &[PoseSE3], holdout: usize) -> (Vec<TrainingView>, Vec<TrainingView>) {
    let mut train_views = Vec::new();
    let mut held = Vec::new();
    for (i, img) in ds.images.iter().enumerate() {
        let v = TrainingView {
            image: img.clone(),
            pose: poses[i],
            time: ds.normalized_time(i),
        };
        if is_holdout(i, holdout) {
            held.push(v);
        } else {
            train_views.push(v);
        }
    }
    (train_views, held)
}

fn save_field(field: &HexPlaneField, path: &Path) -> Result<(), CliError> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?,
    );
    field.save(&mut f)?;
    std::io::Write::flush(&mut f).map_err(|e| CliError::Invalid(e.to_string()))
}

fn load_field(path: &Path) -> Result<HexPlaneField, CliError> {
    let f = std::fs::File::open(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    Ok(HexPlaneField::load(&mut std::io::BufReader::new(f))?)
}

fn parse_pose(arg: &str, frame: usize) -> Result<PoseSE3, CliError> {
    let path = Path::new(arg);
    if path.is_file() {
        let t = read_tum_trajectory(path)?;
        return t
            .poses()
            .get(frame)
            .copied()
            .ok_or_else(|| CliError::Invalid(format!("trajectory has no frame {frame}")));
    }
    let v: Vec<f64> = arg
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Invalid(format!("pose '{arg}': {e}")))?;
    if v.len() != 7 {
        return Err(CliError::Invalid(format!(
            "pose needs tx,ty,tz,qx,qy,qz,qw or a trajectory file, got '{arg}'"
        )));
    }
    PoseSE3::from_quaternion_xyzw(Vector3::new(v[0], v[1], v[2]), v[3], v[4], v[5], v[6])
        .map_err(|e| CliError::Invalid(e.to_string()))
}

fn eval_nvs(renders: &Path, gt: &Path) -> Result<EvalReport, CliError> {
    let entries = std::fs::read_dir(renders).map_err(|e| CliError::Invalid(format!("{}: {e}", renders.display())))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ppm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::Invalid(format!("no .ppm renders in {}", renders.display())));
    }
    let mut rows = Vec::new();
    for n in names {
        let a = read_p6(&renders.join(&n))?;
        let b = read_p6(&gt.join(&n))?;
        rows.push(ReportRow {
            name: n.trim_end_matches(".ppm").to_string(),
            ate_rms: None,
            psnr: Some(psnr(&a, &b)?),
            ssim: Some(ssim(&a, &b)?),
        });
    }
    Ok(EvalReport {
        rows,
        alignment: "sim3".into(),
    })
}

fn pipeline(
    spec: &str,
    out: &Path,
    config: Option<&Path>,
    mode: MaskMode,
    flow_noise: f64,
    holdout: usize,
    seed: u64,
) -> Result<EvalReport, CliError> {
    let cfg = load_config(config)?;
    let data = out.join("data");
    let spec = synth(spec, &data, flow_noise, seed)?;
    let ds = load_dataset(&data)?;
    let est = run_localize(&ds, mode, &cfg)?;
    write_tum_trajectory(&est, &out.join("traj_est.txt"))?;

    // Radiance fields are trained in the ground-truth frame so held-out views
    // can be compared pixel for pixel; the estimate is mapped there first.
    let (ate, poses) = match &ds.ground_truth {
        Some(gt) => {
            let a = align(&est, gt, true)?;
            (Some(a.rms()), est.poses().iter().map(|p| a.apply_pose(p)).collect::<Vec<_>>())
        }
        None => (None, est.poses().to_vec()),
    };
    let field = run_train(&ds, &poses, &cfg, holdout, seed, Some(&out.join("train_log.csv")))?;
    save_field(&field, &out.join("field.ckpt"))?;

    let renders = out.join("renders");
    std::fs::create_dir_all(&renders).map_err(|e| CliError::Invalid(e.to_string()))?;
    let (mut psnr_sum, mut ssim_sum, mut count) = (0.0, 0.0, 0usize);
    for i in (0..ds.frame_count()).filter(|&i| is_holdout(i, holdout)) {
        let img = render_image(
            &field,
            &ds.intrinsics,
            &poses[i],
            ds.normalized_time(i),
            cfg.train.samples_per_ray,
            cfg.train.near,
        )?;
        write_p6(&img, &renders.join(format!("{i:04}.ppm")))?;
        psnr_sum += psnr(&img, &ds.images[i])?;
        ssim_sum += ssim(&img, &ds.images[i])?;
        count += 1;
    }
    let mean = |s: f64| (count > 0).then(|| s / count as f64);
    Ok(EvalReport {
        rows: vec![ReportRow {
            name: spec.name,
            ate_rms: ate,
            psnr: mean(psnr_sum),
            ssim: mean(ssim_sum),
        }],
        alignment: "sim3".into(),
    })
}
