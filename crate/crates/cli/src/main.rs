//! Command-line frontend: synthetic data, training, generation,
//! evaluation, and artifact inspection.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage error.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use facemotion::dataset::{
    generate_synthetic_dataset, load_clips, read_clip, split_dataset, MANIFEST_FILE,
};
use facemotion::diffusion::{DEFAULT_BETA_END, DEFAULT_BETA_START, REFERENCE_STEPS};
use facemotion::eval::evaluate_run;
use facemotion::pipeline::{export_for_renderer, generate_talking_motion, read_render_export};
use facemotion::trainer::train_model;
use facemotion::{
    load_model, ConditionBundle, DatasetManifest, DenoiserConfig, GenerationRequest, HeadPoseMode,
    LandmarkBasis, ModelKind, ModelSet, ParameterLayout, ScheduleSpec, SplitTag, SyntheticSpec,
    TrainConfig,
};

const OUT_ENV: &str = "FACEMOTION_OUT";

#[derive(Parser)]
#[command(
    name = "facemotion",
    version,
    about = "Diffusion-based 3DMM facial motion: data, training, sampling, metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic audio/phoneme/text/motion dataset
    GenData(GenDataArgs),
    /// Train one submodel on the train split
    Train(TrainArgs),
    /// Sample motion for a split and export it for rendering
    Generate(GenerateArgs),
    /// Score generated motion against ground truth (F-LMD / M-LMD)
    Eval(EvalArgs),
    /// Describe a dataset, checkpoint, or render export
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of clips
    #[arg(long, default_value_t = 200)]
    clips: usize,
    /// Frames per clip
    #[arg(long, default_value_t = 96)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory [env fallback: FACEMOTION_OUT]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Audio feature width
    #[arg(long, default_value_t = 32)]
    audio_dim: usize,
    /// Text embedding width
    #[arg(long, default_value_t = 64)]
    text_dim: usize,
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
    /// Train fraction of the train/test split
    #[arg(long, default_value_t = 0.8)]
    split: f64,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Lips,
    Expression,
    Pose,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> ModelKind {
        match k {
            KindArg::Lips => ModelKind::Lips,
            KindArg::Expression => ModelKind::Expression,
            KindArg::Pose => ModelKind::Pose,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn tag(self) -> Option<SplitTag> {
        match self {
            SplitArg::Train => Some(SplitTag::Train),
            SplitArg::Test => Some(SplitTag::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Which submodel to train
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Dataset directory (as written by gen-data)
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint/log directory [env fallback: FACEMOTION_OUT]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Start from paper-scale defaults instead of desk-scale ones
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Training window length in frames
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Diffusion steps (respaced from the 1000-step reference)
    #[arg(long)]
    t_steps: Option<usize>,
    /// Extra checkpoint cadence in steps; 0 keeps only the final model
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Train the zero-condition ablation baseline
    #[arg(long)]
    unconditional: bool,
    /// Model width
    #[arg(long)]
    hidden: Option<usize>,
    /// Decoder block count
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Dataset directory providing the conditions
    #[arg(long)]
    dataset: PathBuf,
    /// Directory holding lips.fmot, expression.fmot, pose.fmot
    #[arg(long)]
    models: PathBuf,
    /// Output directory for .render files [env fallback: FACEMOTION_OUT]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Which split to condition on
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Frames per generation chunk
    #[arg(long, default_value_t = 64)]
    chunk: usize,
    /// Frames to generate per clip (default: the clip length)
    #[arg(long)]
    total_frames: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Freeze head pose to the first frame
    #[arg(long)]
    no_head_pose: bool,
    /// Diffusion steps at sampling time (respaced reference 1000)
    #[arg(long)]
    t_steps: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of generated .render files
    #[arg(long)]
    gen: PathBuf,
    /// Dataset directory with the ground truth
    #[arg(long)]
    dataset: PathBuf,
    /// Which split to score
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Seed of the motion-to-landmark projection
    #[arg(long, default_value_t = 0)]
    basis_seed: u64,
    /// Where report.txt and report.tsv go (default: the gen directory)
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// manifest.json (or its directory), a .fmot checkpoint, or a .render export
    path: PathBuf,
}

/// Flag combination that clap alone cannot reject; maps to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn resolve_out(flag: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .ok_or_else(|| usage(format!("no output directory: pass --out or set {OUT_ENV}")))
}

fn schedule_from(t_steps: Option<usize>) -> ScheduleSpec {
    match t_steps {
        None => ScheduleSpec::desk_default(),
        Some(t) if t == REFERENCE_STEPS => {
            ScheduleSpec::linear(REFERENCE_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
        }
        Some(t) => ScheduleSpec::respaced(t),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code().clamp(0, 2) as u8;
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Inspect(args) => cmd_inspect(args),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let out = resolve_out(args.out)?;
    let spec = SyntheticSpec {
        clips: args.clips,
        frames: args.frames,
        seed: args.seed,
        audio_dim: args.audio_dim,
        text_dim: args.text_dim,
        fps: args.fps,
        ..SyntheticSpec::default()
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    if !(args.split > 0.0 && args.split < 1.0) {
        return Err(usage(format!("--split must lie in (0, 1), got {}", args.split)));
    }
    let layout = ParameterLayout::standard();
    let manifest = generate_synthetic_dataset(&spec, &layout, &out)?;
    let (train, test) = split_dataset(&manifest, args.split, args.seed)?;
    let mut clips: Vec<_> = train.clips.into_iter().chain(test.clips).collect();
    clips.sort_by(|a, b| a.id.cmp(&b.id));
    let n_train = clips.iter().filter(|e| e.split == SplitTag::Train).count();
    let n_test = clips.len() - n_train;
    let manifest = DatasetManifest { clips, ..manifest };
    let path = out.join(MANIFEST_FILE);
    manifest.save(&path)?;
    println!(
        "wrote {} clips ({n_train} train / {n_test} test), {} frames each",
        manifest.clips.len(),
        args.frames
    );
    println!("{}", path.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let out = resolve_out(args.out)?;
    let kind: ModelKind = args.kind.into();
    let manifest = DatasetManifest::load(&args.dataset.join(MANIFEST_FILE))?;
    let layout = ParameterLayout::standard();
    let clips = load_clips(&args.dataset, &manifest, Some(SplitTag::Train))
        .context("loading train split")?;

    let mut config = if args.paper_scale {
        TrainConfig::paper_scale(kind)
    } else {
        TrainConfig::desk(kind)
    };
    if let Some(v) = args.steps {
        config.steps = v;
    }
    if let Some(v) = args.batch {
        config.batch_size = v;
    }
    if let Some(v) = args.window {
        config.window = v;
    }
    if let Some(v) = args.lr {
        config.learning_rate = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if args.t_steps.is_some() {
        config.schedule = schedule_from(args.t_steps);
    }
    config.checkpoint_every = args.checkpoint_every;
    config.unconditional = args.unconditional;
    config.validate().map_err(|e| usage(e.to_string()))?;

    let mut model_config = if args.paper_scale {
        DenoiserConfig::paper_scale(kind)
    } else {
        DenoiserConfig::desk(kind)
    };
    model_config.audio_dim = manifest.audio_dim;
    model_config.text_dim = manifest.text_dim;
    model_config.vocab = manifest.vocab;
    if let Some(v) = args.hidden {
        model_config.hidden = v;
    }
    if let Some(v) = args.layers {
        model_config.layers = v;
    }
    if let Some(v) = args.heads {
        model_config.heads = v;
    }
    if model_config.n_max < config.window {
        model_config.n_max = config.window;
    }
    model_config.validate().map_err(|e| usage(e.to_string()))?;

    fs::create_dir_all(&out)?;
    let (_, report) = train_model(&clips, &layout, &model_config, &config, Some(&out))?;
    println!(
        "trained {} for {} steps on {} clips: loss {:.4} -> {:.4} in {} ms",
        kind.name(),
        config.steps,
        clips.len(),
        report.initial_avg,
        report.final_avg,
        report.wall_ms
    );
    for path in &report.checkpoints {
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<()> {
    let out = resolve_out(args.out)?;
    let manifest = DatasetManifest::load(&args.dataset.join(MANIFEST_FILE))?;
    let layout = ParameterLayout::standard();
    let models = ModelSet::new(
        load_model(&args.models.join("lips.fmot"))?,
        load_model(&args.models.join("expression.fmot"))?,
        load_model(&args.models.join("pose.fmot"))?,
    )?;
    if args.chunk == 0 || args.chunk > models.max_chunk() {
        return Err(usage(format!(
            "--chunk must lie in [1, {}], got {}",
            models.max_chunk(),
            args.chunk
        )));
    }
    let schedule = schedule_from(args.t_steps);
    let head_pose = if args.no_head_pose {
        HeadPoseMode::Frozen
    } else {
        HeadPoseMode::Generated
    };
    fs::create_dir_all(&out)?;
    let entries: Vec<_> = manifest.entries(args.split.tag()).cloned().collect();
    if entries.is_empty() {
        anyhow::bail!("no clips in the requested split");
    }
    for (i, entry) in entries.iter().enumerate() {
        let clip = read_clip(&args.dataset, &manifest, entry)?;
        let frames = clip.num_frames();
        let total_frames = args.total_frames.unwrap_or(frames);
        if total_frames > frames {
            return Err(usage(format!(
                "--total-frames {total_frames} exceeds the {frames} condition frames of {}",
                entry.id
            )));
        }
        let request = GenerationRequest {
            bundle: ConditionBundle {
                audio: clip.audio.clone(),
                phonemes: clip.phonemes.clone(),
                text_embedding: clip.text_embedding.clone(),
                first_frame: clip.motion.first_frame().to_vec(),
            },
            chunk: args.chunk,
            total_frames,
            seed: args.seed.wrapping_add(i as u64),
            head_pose,
            schedule: schedule.clone(),
            fps: clip.motion.fps(),
        };
        let result = generate_talking_motion(&models, &layout, &request)?;
        let path = out.join(format!("{}.render", entry.id));
        export_for_renderer(&result.motion, &layout, &path)?;
        println!(
            "{}: {} frames, {} chunks, max pose seam {:.4}",
            entry.id,
            result.motion.num_frames(),
            result.boundaries.len() + 1,
            result
                .seams
                .iter()
                .map(|s| s.pose)
                .fold(0.0f64, f64::max)
        );
    }
    println!("exported {} clips to {}", entries.len(), out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let manifest = DatasetManifest::load(&args.dataset.join(MANIFEST_FILE))?;
    let view = DatasetManifest {
        clips: manifest.entries(args.split.tag()).cloned().collect(),
        ..manifest
    };
    let basis = LandmarkBasis::new(args.basis_seed, ParameterLayout::standard())?;
    let report = evaluate_run(&args.gen, &args.dataset, &view, &basis)?;
    print!("{}", report.text_table());
    let report_dir = args
        .report
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| args.gen.clone());
    fs::create_dir_all(&report_dir)?;
    fs::write(report_dir.join("report.txt"), report.text_table())?;
    fs::write(report_dir.join("report.tsv"), report.tsv())?;
    println!("report in {}", report_dir.display());
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> anyhow::Result<()> {
    let path = &args.path;
    let manifest_path = if path.is_dir() {
        Some(path.join(MANIFEST_FILE))
    } else if path.file_name().map(|n| n == MANIFEST_FILE).unwrap_or(false) {
        Some(path.clone())
    } else {
        None
    };
    if let Some(manifest_path) = manifest_path {
        return inspect_dataset(&manifest_path);
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("fmot") => inspect_checkpoint(path),
        Some("render") => inspect_render(path),
        _ => anyhow::bail!(
            "cannot inspect {}: expected a dataset directory, manifest.json, .fmot, or .render",
            path.display()
        ),
    }
}

fn inspect_dataset(manifest_path: &Path) -> anyhow::Result<()> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let n_train = manifest.entries(Some(SplitTag::Train)).count();
    let n_test = manifest.entries(Some(SplitTag::Test)).count();
    let frames: u64 = manifest.clips.iter().map(|e| e.frames as u64).sum();
    println!("dataset {}", manifest_path.display());
    println!(
        "clips: {} ({n_train} train / {n_test} test), {frames} frames total",
        manifest.clips.len()
    );
    println!(
        "audio dim: {}, text dim: {}, vocab: {}",
        manifest.audio_dim, manifest.text_dim, manifest.vocab
    );
    Ok(())
}

fn inspect_checkpoint(path: &Path) -> anyhow::Result<()> {
    let model = load_model(path)?;
    let c = model.config();
    println!("checkpoint {}", path.display());
    println!("kind: {}, motion dim: {}", c.kind.name(), c.motion_dim());
    println!(
        "hidden: {}, layers: {}, heads: {}, encoder blocks: {}, n_max: {}",
        c.hidden, c.layers, c.heads, c.encoder_blocks, c.n_max
    );
    println!(
        "vocab: {}, audio dim: {}, text dim: {}",
        c.vocab, c.audio_dim, c.text_dim
    );
    println!("parameters: {}", model.param_count());
    Ok(())
}

fn inspect_render(path: &Path) -> anyhow::Result<()> {
    let (motion, layout) = read_render_export(path)?;
    println!("render export {}", path.display());
    println!(
        "frames: {}, dim: {}, fps: {}",
        motion.num_frames(),
        motion.dim(),
        motion.fps()
    );
    let mouth: Vec<String> = layout.mouth_indices().iter().map(|i| i.to_string()).collect();
    println!("mouth indices: {}", mouth.join(" "));
    Ok(())
}
