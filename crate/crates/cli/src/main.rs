mod config;
mod draw;

use anyhow::{Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use config::FileConfig;
use orbvo::eval::{align_similarity, evaluate, trajectory_svg, Trajectory};
use orbvo::geometry::PoseVector6;
use orbvo::io::{load_kitti_poses, load_sequence_dir, read_png, save_kitti_poses, save_scene, write_png};
use orbvo::model::{Model, Sequence};
use orbvo::networks::{pose_forward, reduce_attention, HeadSelect, NetConfig, PoseInputVars};
use orbvo::orb::{assemble_pose_inputs, extract_orb, orb_tensor_for, write_binary, write_json, OrbParams, PoseInputs, PoseVariant};
use orbvo::soa::{infer_sequence_strided, run_sequence, write_trace_jsonl, AdaptConfig};
use orbvo::synth::{generate_scene, DEFAULT_MOTION};
use orbvo::train::{train_toy, TrainConfig};
use orbvo::{to_grayscale, Error};
use orbvo_autodiff::{Graph, TensorError};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Worker count for the matrix kernels; defaults to the available parallelism.
const THREADS_ENV: &str = "ORBVO_THREADS";

#[derive(Parser)]
#[command(name = "orbvo", about = "ORB-guided self-supervised visual odometry")]
struct Cli {
    /// Single worker; outputs are bit-identical across runs.
    #[arg(long, global = true)]
    deterministic: bool,
    /// JSON object of flag values; flags given on the command line win.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect and describe ORB features in one image.
    OrbExtract(OrbExtractArgs),
    /// Train both networks on a generated scene.
    TrainToy(TrainArgs),
    /// Estimate a trajectory without adaptation.
    Infer(InferArgs),
    /// Estimate a trajectory with selective online adaptation.
    Adapt(AdaptArgs),
    /// Score an estimated trajectory against ground truth.
    Eval(EvalArgs),
    /// Render the cross-attention heatmap for a frame pair.
    AttnViz(AttnVizArgs),
    /// Write a generated scene in KITTI layout.
    Synth(SynthArgs),
}

#[derive(Args)]
struct OrbExtractArgs {
    image: Option<PathBuf>,
    /// `.json` writes JSON, anything else the binary format.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    viz: Option<PathBuf>,
    #[arg(long)]
    n_features: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    fast_threshold: Option<f32>,
}

#[derive(Clone, Copy, ValueEnum, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
enum VariantArg {
    Concatenate,
    Attention,
}

impl From<VariantArg> for PoseVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Concatenate => PoseVariant::Concatenate,
            VariantArg::Attention => PoseVariant::Attention,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    /// Frames in the training scene.
    #[arg(long)]
    frames: Option<usize>,
    /// `WxH`, both multiples of 32.
    #[arg(long)]
    size: Option<String>,
    /// Loss curve JSON; defaults to the model path with `.curve.json`.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    seq_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    frames: Option<usize>,
    /// Window step, default frames - 1.
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    seq_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Window step, default frames - 1.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, overrides_with = "no_selective")]
    selective: bool,
    #[arg(long, overrides_with = "selective")]
    no_selective: bool,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Also write the adapted parameters.
    #[arg(long)]
    save_model: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    est: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct AttnVizArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    frame_a: Option<PathBuf>,
    #[arg(long)]
    frame_b: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Head index or `mean`.
    #[arg(long)]
    head: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    size: Option<String>,
    /// Per-frame motion `tx,ty,tz,rx,ry,rz`.
    #[arg(long, allow_hyphen_values = true)]
    motion: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidInput(msg.into()).into()
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| invalid(format!("missing required --{flag}")))
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let parsed = s.split_once(['x', 'X']).and_then(|(w, h)| Some((w.trim().parse().ok()?, h.trim().parse().ok()?)));
    parsed.ok_or_else(|| invalid(format!("size `{s}` is not WxH")))
}

fn parse_motion(s: &str) -> Result<PoseVector6> {
    let vals: Vec<f64> = s.split(',').map(|t| t.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| invalid(format!("motion `{s}` is not six numbers")))?;
    vals.try_into().map_err(|v: Vec<f64>| invalid(format!("motion needs 6 values, got {}", v.len())))
}

fn parse_head(s: &str) -> Result<HeadSelect> {
    if s == "mean" {
        return Ok(HeadSelect::Mean);
    }
    s.parse().map(HeadSelect::Head).map_err(|_| invalid(format!("head `{s}` is neither an index nor `mean`")))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_sequence(dir: &Path) -> Result<Sequence> {
    let d = load_sequence_dir(dir)?;
    Ok(Sequence::new(d.frames, d.intrinsics, &OrbParams::default())?)
}

fn orb_extract(a: OrbExtractArgs, cfg: &FileConfig) -> Result<()> {
    let image = required(cfg.pick("image", a.image)?, "image")?;
    let out = required(cfg.pick("out", a.out)?, "out")?;
    let viz: Option<PathBuf> = cfg.pick("viz", a.viz)?;
    let defaults = OrbParams::default();
    let params = OrbParams {
        n_features: cfg.pick("n-features", a.n_features)?.unwrap_or(defaults.n_features),
        levels: cfg.pick("levels", a.levels)?.unwrap_or(defaults.levels),
        fast_threshold: cfg.pick("fast-threshold", a.fast_threshold)?.unwrap_or(defaults.fast_threshold),
        ..defaults
    };
    cfg.finish()?;
    let gray = to_grayscale(&read_png(&image)?)?;
    let set = extract_orb(&gray, &params.fitted_to(gray.width, gray.height))?;
    if out.extension().is_some_and(|e| e == "json") {
        write_file(&out, write_json(&set)?)?;
    } else {
        write_file(&out, write_binary(&set))?;
    }
    if let Some(viz) = viz {
        write_png(&draw::keypoint_overlay(&gray, &set), &viz)?;
    }
    println!("{} keypoints -> {}", set.keypoints.len(), out.display());
    Ok(())
}

fn train(a: TrainArgs, cfg: &FileConfig) -> Result<()> {
    let seed = cfg.pick("seed", a.seed)?.unwrap_or(0);
    let out = required(cfg.pick("out", a.out)?, "out")?;
    let variant: PoseVariant = cfg.pick("variant", a.variant)?.unwrap_or(VariantArg::Attention).into();
    let defaults = TrainConfig::default();
    let tc = TrainConfig {
        iterations: cfg.pick("iters", a.iters)?.unwrap_or(defaults.iterations),
        lr: cfg.pick("lr", a.lr)?.unwrap_or(defaults.lr),
        seed,
        ..defaults
    };
    let frames = cfg.pick("frames", a.frames)?.unwrap_or(9);
    let (w, h) = parse_size(&cfg.pick("size", a.size)?.unwrap_or_else(|| "64x64".into()))?;
    let curve_path = cfg.pick("curve", a.curve)?.unwrap_or_else(|| out.with_extension("curve.json"));
    cfg.finish()?;
    let scene = generate_scene(seed, frames, w, h, DEFAULT_MOTION)?;
    let data = [Sequence::new(scene.images, scene.intrinsics, &OrbParams::default())?];
    let mut model = Model::init(NetConfig::new(variant), seed)?;
    let curve = train_toy(&mut model, &data, &tc)?;
    model.save(&out)?;
    write_file(&curve_path, curve.to_json()?)?;
    let totals = curve.totals();
    if let (Some(first), Some(last)) = (totals.first(), totals.last()) {
        println!("loss {first:.6} -> {last:.6} over {} iterations", totals.len());
    }
    Ok(())
}

fn infer(a: InferArgs, cfg: &FileConfig) -> Result<()> {
    let model = Model::load(&required(cfg.pick("model", a.model)?, "model")?)?;
    let dir = required(cfg.pick("seq-dir", a.seq_dir)?, "seq-dir")?;
    let out = required(cfg.pick("out", a.out)?, "out")?;
    let frames = cfg.pick("frames", a.frames)?.unwrap_or(3);
    let stride = cfg.pick("stride", a.stride)?.unwrap_or(frames.saturating_sub(1));
    cfg.finish()?;
    let seq = load_sequence(&dir)?;
    let r = infer_sequence_strided(&model, &seq, frames, stride)?;
    save_kitti_poses(&r.trajectory, &out)?;
    println!("{} poses -> {}", r.trajectory.len(), out.display());
    Ok(())
}

fn adapt(a: AdaptArgs, cfg: &FileConfig) -> Result<()> {
    let mut model = Model::load(&required(cfg.pick("model", a.model)?, "model")?)?;
    let dir = required(cfg.pick("seq-dir", a.seq_dir)?, "seq-dir")?;
    let out = required(cfg.pick("out", a.out)?, "out")?;
    let defaults = AdaptConfig::default();
    let selective_flag = if a.selective { Some(true) } else if a.no_selective { Some(false) } else { None };
    let ac = AdaptConfig {
        k: cfg.pick("k", a.k)?.unwrap_or(defaults.k),
        frames_per_snippet: cfg.pick("frames", a.frames)?.unwrap_or(defaults.frames_per_snippet),
        lr: cfg.pick("lr", a.lr)?.unwrap_or(defaults.lr),
        alpha: cfg.pick("alpha", a.alpha)?.unwrap_or(defaults.alpha),
        selective: cfg.pick("selective", selective_flag)?.unwrap_or(defaults.selective),
        stride: cfg.pick("stride", a.stride)?,
    };
    let trace: Option<PathBuf> = cfg.pick("trace", a.trace)?;
    let save_model: Option<PathBuf> = cfg.pick("save-model", a.save_model)?;
    cfg.finish()?;
    ac.validate()?;
    let seq = load_sequence(&dir)?;
    let r = run_sequence(&mut model, &seq, &ac)?;
    save_kitti_poses(&r.trajectory, &out)?;
    if let Some(path) = trace {
        let mut buf = Vec::new();
        write_trace_jsonl(&r.traces, &mut buf)?;
        write_file(&path, buf)?;
    }
    if let Some(path) = save_model {
        model.save(&path)?;
    }
    let skipped = r.traces.iter().filter(|t| t.skipped).count();
    println!("{} poses -> {} ({} snippets, {skipped} skipped)", r.trajectory.len(), out.display(), r.traces.len());
    Ok(())
}

fn eval(a: EvalArgs, cfg: &FileConfig) -> Result<()> {
    let est = Trajectory::from_poses(load_kitti_poses(&required(cfg.pick("est", a.est)?, "est")?)?);
    let gt = Trajectory::from_poses(load_kitti_poses(&required(cfg.pick("gt", a.gt)?, "gt")?)?);
    let out = required(cfg.pick("out", a.out)?, "out")?;
    let plot: Option<PathBuf> = cfg.pick("plot", a.plot)?;
    cfg.finish()?;
    let report = evaluate(&est, &gt)?;
    write_file(&out, serde_json::to_string_pretty(&report)?)?;
    if let Some(plot) = plot {
        write_file(&plot, trajectory_svg(&est, &gt, &align_similarity(&est, &gt)?))?;
    }
    println!("ate_rmse {:.6} trans_err {:.4}% rot_err {:.4} deg/100m", report.ate_rmse, report.trans_err, report.rot_err);
    Ok(())
}

fn attn_viz(a: AttnVizArgs, cfg: &FileConfig) -> Result<()> {
    let model = Model::load(&required(cfg.pick("model", a.model)?, "model")?)?;
    let fa = read_png(&required(cfg.pick("frame-a", a.frame_a)?, "frame-a")?)?;
    let fb = read_png(&required(cfg.pick("frame-b", a.frame_b)?, "frame-b")?)?;
    let out = required(cfg.pick("out", a.out)?, "out")?;
    let head = parse_head(&cfg.pick("head", a.head)?.unwrap_or_else(|| "mean".into()))?;
    cfg.finish()?;
    if model.variant() != PoseVariant::Attention {
        return Err(invalid("no attention record: the model uses the concatenate variant"));
    }
    let params = OrbParams::default();
    let inputs = assemble_pose_inputs(&fa, &fb, &orb_tensor_for(&fa, &params)?, &orb_tensor_for(&fb, &params)?, PoseVariant::Attention)?;
    let PoseInputs::Attention { rgb, orb } = inputs else {
        return Err(invalid("no attention record: pose inputs were assembled without ORB features"));
    };
    let g = Graph::<f32>::unchecked();
    let vars = PoseInputVars::Attention { rgb: g.constant(rgb), orb: g.constant(orb) };
    let pose = pose_forward(&g, &model.params, &model.config, vars)?;
    let record = pose.attention.ok_or_else(|| invalid("no attention record"))?;
    let weights: Vec<f64> = g.value(record).data().iter().map(|&v| f64::from(v)).collect();
    let hm = reduce_attention(&weights, model.config.heads, fa.width, fa.height, head)?;
    write_png(&draw::heatmap_image(&hm.heatmap, fa.width, fa.height), &out)?;
    println!("{}x{} heatmap from a {}x{} grid -> {}", fa.width, fa.height, hm.grid_cols, hm.grid_rows, out.display());
    Ok(())
}

fn synth(a: SynthArgs, cfg: &FileConfig) -> Result<()> {
    let seed = cfg.pick("seed", a.seed)?.unwrap_or(0);
    let frames = cfg.pick("frames", a.frames)?.unwrap_or(9);
    let (w, h) = parse_size(&cfg.pick("size", a.size)?.unwrap_or_else(|| "64x64".into()))?;
    let motion = match cfg.pick::<String>("motion", a.motion)? {
        Some(m) => parse_motion(&m)?,
        None => DEFAULT_MOTION,
    };
    let out = required(cfg.pick("out", a.out)?, "out")?;
    cfg.finish()?;
    let scene = generate_scene(seed, frames, w, h, motion)?;
    save_scene(&scene, &out)?;
    println!("{frames} frames of {w}x{h} -> {}", out.display());
    Ok(())
}

fn configure_threads(deterministic: bool) -> Result<()> {
    let n = if deterministic {
        1
    } else {
        match std::env::var(THREADS_ENV) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => n,
                _ => return Err(invalid(format!("{THREADS_ENV}=`{v}` is not a positive integer"))),
            },
            Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    };
    // Read once by the matrix kernels on first use; nothing has run yet.
    std::env::set_var("MATMUL_NUM_THREADS", n.to_string());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    let deterministic = cfg.flag("deterministic", cli.deterministic)?;
    configure_threads(deterministic)?;
    match cli.command {
        Command::OrbExtract(a) => orb_extract(a, &cfg),
        Command::TrainToy(a) => train(a, &cfg),
        Command::Infer(a) => infer(a, &cfg),
        Command::Adapt(a) => adapt(a, &cfg),
        Command::Eval(a) => eval(a, &cfg),
        Command::AttnViz(a) => attn_viz(a, &cfg),
        Command::Synth(a) => synth(a, &cfg),
    }
}

fn exit_code(kind: &str) -> u8 {
    match kind {
        "io" => 2,
        "numeric_fault" => 4,
        _ => 3,
    }
}

fn tensor_kind(e: &TensorError) -> &'static str {
    match e {
        TensorError::NumericFault(_) => "numeric_fault",
        TensorError::Io(_) => "io",
        TensorError::Manifest(_) => "manifest",
        _ => "tensor",
    }
}

fn classify(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return e.kind();
        }
        if let Some(e) = cause.downcast_ref::<TensorError>() {
            return tensor_kind(e);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return "json";
        }
    }
    "invalid_input"
}

fn version_text() -> String {
    format!(
        "{} (params {} v{}, features ORBF v{})",
        env!("CARGO_PKG_VERSION"),
        orbvo_autodiff::PARAM_FORMAT,
        orbvo_autodiff::PARAM_FORMAT_VERSION,
        orbvo::orb::ORBF_VERSION
    )
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let matches = match Cli::command().version(version_text()).try_get_matches() {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) if e.kind() == clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            let _ = e.print();
            return ExitCode::from(3);
        }
        Err(e) => {
            eprintln!("usage: {}", one_line(&e.to_string().replace("error: ", "")));
            return ExitCode::from(3);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("usage: {}", one_line(&e.to_string()));
            return ExitCode::from(3);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = classify(&e);
            eprintln!("{kind}: {}", one_line(&format!("{e:#}")));
            ExitCode::from(exit_code(kind))
        }
    }
}
