//! Subcommands of the `outview` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use outview::ar::{ArConfig, ArModel};
use outview::codebook::{fit_codebook, Codebook};
use outview::corpus::{
    corpus_images, curriculum_schedule, load_corpus, mean_nll, mean_unknown_fraction, sample_corpus, save_corpus,
    train_curriculum, CorpusConfig, Example, PairSample, Stage, TrainOptions,
};
use outview::experiments::{
    consistency_scenes, run_consistency, scene_input, summarize_consistency, tokenize_stages,
    CONSISTENCY_MAX_HOLE_FRACTION,
};
use outview::geometry::{CameraIntrinsics, DepthMap, Pose};
use outview::grid::Image;
use outview::pipeline::{init_scene, render_view, synthesize_panorama, Generator, InputView, PipelineConfig, Strategy};
use outview::scene_io::{load_scene, save_scene};
use outview::world::RoomSpec;

use crate::server::{Server, DEFAULT_ADDR};
use crate::service::{coverage_png, data_dir_from_env, default_intrinsics, fixture_input, Service, ServiceError, DEFAULT_CAPACITY};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] outview::Error),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: Box<CliError> },
}

/// Tags a failed file operation with its path.
fn at<T, E: Into<CliError>>(path: &Path, r: std::result::Result<T, E>) -> CliResult<T> {
    r.map_err(|e| CliError::File {
        path: path.to_path_buf(),
        source: Box::new(e.into()),
    })
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "outview", version, about = "Explore a room from one RGB-D image")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a training corpus of view pairs from procedural rooms
    GenWorld(GenWorldArgs),
    /// Fit the k-means token codebook on a corpus
    FitCodebook(FitCodebookArgs),
    /// Train the autoregressive model through a rotation curriculum
    TrainAr(TrainArArgs),
    /// Lift one RGB-D image and outpaint a panorama into a scene directory
    Synth(SynthArgs),
    /// Render a scene directory at a pose
    Render(RenderArgs),
    /// Score view consistency of each strategy on seeded scenes (JSON lines)
    EvalConsistency(EvalConsistencyArgs),
    /// Serve sessions over line-delimited JSON on a local socket
    Serve(ServeArgs),
}

/// `base,target,stage_len` rotation curriculum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Curriculum {
    pub base: f64,
    pub target: f64,
    pub stage_len: usize,
}

impl Curriculum {
    pub fn schedule(&self) -> outview::Result<Vec<Stage>> {
        curriculum_schedule(self.base, self.target, self.stage_len)
    }
}

pub fn parse_curriculum(s: &str) -> Result<Curriculum, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [b, t, n] = parts.as_slice() else {
        return Err("expected base,target,stage_len".into());
    };
    let c = Curriculum {
        base: b.parse().map_err(|e| format!("base: {e}"))?,
        target: t.parse().map_err(|e| format!("target: {e}"))?,
        stage_len: n.parse().map_err(|e| format!("stage_len: {e}"))?,
    };
    c.schedule().map_err(|e| e.to_string())?;
    Ok(c)
}

fn parse_intrinsics(s: &str) -> Result<[f64; 4], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected fx,fy,cx,cy".to_string())
}

#[derive(Debug, Args)]
pub struct GeneratorArgs {
    /// Codebook file written by fit-codebook
    #[arg(long, requires = "model")]
    pub codebook: Option<PathBuf>,
    /// Model checkpoint written by train-ar
    #[arg(long, requires = "codebook")]
    pub model: Option<PathBuf>,
}

impl GeneratorArgs {
    pub fn load(&self) -> CliResult<Option<Arc<Generator>>> {
        match (&self.codebook, &self.model) {
            (Some(c), Some(m)) => Ok(Some(Arc::new(Generator::new(at(c, Codebook::load(c))?, at(m, ArModel::load(m))?)?))),
            _ => Ok(None),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenWorldArgs {
    /// Output corpus directory
    #[arg(long)]
    pub out: PathBuf,
    /// Number of rooms; the first eight are the shipped fixtures
    #[arg(long, default_value_t = 8)]
    pub rooms: usize,
    #[arg(long, default_value_t = 16)]
    pub pairs_per_room: usize,
    #[arg(long, default_value = "30,120,50", value_parser = parse_curriculum)]
    pub curriculum: Curriculum,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct FitCodebookArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = outview::codebook::DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub codebook: PathBuf,
    /// Output checkpoint
    #[arg(long)]
    pub out: PathBuf,
    /// Rotation curriculum base,target,stage_len in degrees and steps
    #[arg(long, default_value = "30,120,50", value_parser = parse_curriculum)]
    pub curriculum: Curriculum,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 3.0)]
    pub lr: f64,
    /// Learning rate of the last step; linear decay from --lr
    #[arg(long, default_value_t = 0.05)]
    pub lr_final: f64,
    /// Minibatch sampling seed
    #[arg(long, default_value_t = 3)]
    pub seed: u64,
    #[arg(long, default_value_t = 7)]
    pub model_seed: u64,
    #[arg(long, default_value_t = 32)]
    pub embed: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    /// Continue from this checkpoint instead of a fresh model
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Corpus of separate pairs to report held-out NLL on
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    /// Log every n-th step (the last step of each stage is always logged)
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["fixture", "image"])))]
pub struct SynthArgs {
    /// Use the oracle view of a fixture room as input
    #[arg(long)]
    pub fixture: Option<usize>,
    /// Heading of the fixture camera, degrees
    #[arg(long, default_value_t = 0.0, requires = "fixture")]
    pub heading: f64,
    /// Input RGB PNG
    #[arg(long, requires = "depth")]
    pub image: Option<PathBuf>,
    /// Input depth as a 16-bit PNG in millimetres (0 = missing)
    #[arg(long, requires = "image")]
    pub depth: Option<PathBuf>,
    /// fx,fy,cx,cy in pixels; defaults to a 90 degree field of view
    #[arg(long, value_parser = parse_intrinsics)]
    pub intrinsics: Option<[f64; 4]>,
    #[command(flatten)]
    pub generator: GeneratorArgs,
    #[arg(long, default_value_t = Strategy::SupportFirst)]
    pub strategy: Strategy,
    #[arg(long, default_value_t = outview::pipeline::DEFAULT_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = outview::ar::DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Panorama yaw extent, degrees
    #[arg(long, default_value_t = outview::pipeline::DEFAULT_SUPPORT_YAW, allow_negative_numbers = true)]
    pub yaw: f64,
    /// Panorama pitch extent, degrees
    #[arg(long, default_value_t = outview::pipeline::DEFAULT_SUPPORT_PITCH, allow_negative_numbers = true)]
    pub pitch: f64,
    /// Output scene directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub yaw: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub pitch: f64,
    /// Meters forward (negative steps back)
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub step: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write per-pixel coverage as a grayscale PNG
    #[arg(long)]
    pub coverage: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalConsistencyArgs {
    #[command(flatten)]
    pub generator: GeneratorArgs,
    #[arg(long, default_value_t = 20)]
    pub scenes: usize,
    /// View change in degrees; the sign alternates between scenes
    #[arg(long, default_value_t = 35.0, allow_negative_numbers = true)]
    pub yaw: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub pitch: f64,
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    #[arg(long, default_value_t = outview::ar::DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long, default_value_t = CONSISTENCY_MAX_HOLE_FRACTION)]
    pub max_hole: f64,
    /// Scene i uses seed seed_base + i
    #[arg(long, default_value_t = 100)]
    pub seed_base: u64,
    /// Strategies to run; all three by default
    #[arg(long, value_delimiter = ',')]
    pub strategies: Vec<Strategy>,
    /// Write the report here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = DEFAULT_ADDR)]
    pub addr: String,
    #[arg(long, default_value_t = DEFAULT_CAPACITY)]
    pub capacity: usize,
    /// Session store and default scene location; defaults to $OUTVIEW_DATA_DIR
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[command(flatten)]
    pub generator: GeneratorArgs,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenWorld(a) => gen_world(&a),
        Command::FitCodebook(a) => fit(&a),
        Command::TrainAr(a) => train(&a),
        Command::Synth(a) => synth(&a),
        Command::Render(a) => render(&a),
        Command::EvalConsistency(a) => eval_consistency(&a),
        Command::Serve(a) => serve(&a),
    }
}

fn print_line(v: serde_json::Value) {
    println!("{v}");
}

fn gen_world(a: &GenWorldArgs) -> CliResult<()> {
    let rooms: Vec<RoomSpec> = (0..a.rooms as u64).map(RoomSpec::random).collect();
    let schedule = a.curriculum.schedule()?;
    let cfg = CorpusConfig::default();
    let stages = sample_corpus(&rooms, a.pairs_per_room, &schedule, &cfg, a.seed)?;
    let manifest = save_corpus(&a.out, &rooms, &schedule, &cfg, a.seed, &stages)?;
    print_line(json!({
        "out": a.out.display().to_string(),
        "pairs": manifest.pairs.len(),
        "stages": schedule.len(),
        "unknown_fraction": mean_unknown_fraction(&stages),
    }));
    Ok(())
}

fn fit(a: &FitCodebookArgs) -> CliResult<()> {
    let (manifest, stages) = at(&a.corpus, load_corpus(&a.corpus))?;
    let images = corpus_images(&stages);
    let codebook = fit_codebook(&images, a.k, manifest.config.patch, a.seed)?;
    codebook.save(&a.out)?;
    print_line(json!({
        "out": a.out.display().to_string(),
        "k": codebook.k(),
        "patch": codebook.patch(),
        "images": images.len(),
    }));
    Ok(())
}

/// Pairs for each scheduled stage: the corpus's own stages when the
/// schedules agree, otherwise every pair whose rotation fits the stage.
fn stage_pairs(corpus_schedule: &[Stage], corpus: &[Vec<PairSample>], schedule: &[Stage]) -> CliResult<Vec<Vec<PairSample>>> {
    let same = corpus_schedule.len() == schedule.len()
        && corpus_schedule
            .iter()
            .zip(schedule)
            .all(|(a, b)| a.max_rotation == b.max_rotation);
    if same {
        return Ok(corpus.to_vec());
    }
    schedule
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let pairs: Vec<PairSample> = corpus
                .iter()
                .flatten()
                .filter(|p| p.rotation_deg <= s.max_rotation + 1e-9)
                .cloned()
                .collect();
            if pairs.is_empty() && s.iterations > 0 {
                return Err(CliError::Invalid(format!(
                    "no corpus pair within {} degrees for stage {i}",
                    s.max_rotation
                )));
            }
            Ok(pairs)
        })
        .collect()
}

fn train(a: &TrainArArgs) -> CliResult<()> {
    let codebook = at(&a.codebook, Codebook::load(&a.codebook))?;
    let (manifest, corpus) = at(&a.corpus, load_corpus(&a.corpus))?;
    let schedule = a.curriculum.schedule()?;
    let pairs = stage_pairs(&manifest.schedule, &corpus, &schedule)?;
    let kf = manifest.config.known_fraction;
    let stages = tokenize_stages(&pairs, &codebook, kf)?;
    let heldout: Option<Vec<Example>> = match &a.heldout {
        Some(dir) => Some(tokenize_stages(&at(dir, load_corpus(dir))?.1, &codebook, kf)?.into_iter().flatten().collect()),
        None => None,
    };
    let mut model = match &a.init {
        Some(path) => at(path, ArModel::load(path))?,
        None => ArModel::new(
            ArConfig {
                vocab: codebook.k(),
                embed_dim: a.embed,
                layers: a.layers,
                kernel: a.kernel,
                channels: a.channels,
            },
            a.model_seed,
        )?,
    };
    if model.config().vocab != codebook.k() {
        return Err(CliError::Invalid(format!(
            "model vocabulary {} does not match codebook size {}",
            model.config().vocab,
            codebook.k()
        )));
    }
    for (i, (s, examples)) in schedule.iter().zip(&stages).enumerate() {
        print_line(json!({
            "event": "stage",
            "stage": i + 1,
            "stages": schedule.len(),
            "max_rotation": s.max_rotation,
            "iterations": s.iterations,
            "examples": examples.len(),
        }));
    }
    if let Some(h) = &heldout {
        print_line(json!({ "event": "heldout", "when": "initial", "nll": mean_nll(&model, h)? }));
    }
    let opts = TrainOptions {
        batch_size: a.batch,
        lr: a.lr,
        lr_final: a.lr_final,
        seed: a.seed,
    };
    let mut stage_ends = Vec::new();
    let mut end = 0;
    for s in &schedule {
        end += s.iterations;
        stage_ends.push(end);
    }
    let every = a.log_every.max(1);
    let losses = train_curriculum(&mut model, &schedule, &stages, &opts, |l| {
        if l.step % every == 0 || stage_ends.contains(&l.step) {
            print_line(json!({
                "event": "step",
                "step": l.step,
                "stage": l.stage + 1,
                "max_rotation": l.max_rotation,
                "lr": l.lr,
                "loss": l.loss,
            }));
        }
    })?;
    model.save(&a.out)?;
    let mut done = json!({
        "event": "done",
        "out": a.out.display().to_string(),
        "steps": losses.len(),
        "final_loss": losses.last(),
    });
    if let Some(h) = &heldout {
        done["heldout_nll"] = json!(mean_nll(&model, h)?);
    }
    print_line(done);
    Ok(())
}

fn synth_input(a: &SynthArgs) -> CliResult<(InputView, CameraIntrinsics)> {
    let intrinsics = |w: usize, h: usize| -> outview::Result<CameraIntrinsics> {
        match a.intrinsics {
            Some([fx, fy, cx, cy]) => CameraIntrinsics::new(fx, fy, cx, cy, w, h),
            None => default_intrinsics(w, h),
        }
    };
    if let Some(f) = a.fixture {
        let k = match a.intrinsics {
            Some(_) => Some(intrinsics(64, 64)?),
            None => None,
        };
        return Ok(fixture_input(f, a.heading, k)?);
    }
    let (Some(image), Some(depth)) = (&a.image, &a.depth) else {
        return Err(CliError::Invalid("--image and --depth are required without --fixture".into()));
    };
    let image = at(image, Image::load_png(image))?;
    let depth = at(depth, DepthMap::load_png_mm(depth))?;
    if (image.width(), image.height()) != (depth.width(), depth.height()) {
        return Err(CliError::Invalid(format!(
            "image is {}x{} but depth is {}x{}",
            image.width(),
            image.height(),
            depth.width(),
            depth.height()
        )));
    }
    let k = intrinsics(image.width(), image.height())?;
    Ok((
        InputView {
            image,
            depth,
            pose: Pose::identity(),
        },
        k,
    ))
}

fn synth(a: &SynthArgs) -> CliResult<()> {
    let (input, intrinsics) = synth_input(a)?;
    let config = PipelineConfig {
        samples: a.samples,
        temperature: a.temperature,
        support_yaw: a.yaw.abs(),
        support_pitch: a.pitch.abs(),
        ..PipelineConfig::default()
    };
    let mut state = init_scene(&[input], intrinsics, config, a.strategy, a.seed)?;
    state.generator = a.generator.load()?;
    let mut stderr = std::io::stderr();
    synthesize_panorama(&mut state, a.yaw.abs(), a.pitch.abs(), |p| {
        let _ = writeln!(stderr, "{}", json!({ "event": "progress", "direction": p.direction, "completed": p.completed, "total": p.total, "new_points": p.report.new_points }));
    })?;
    save_scene(&state, &a.out)?;
    print_line(json!({
        "out": a.out.display().to_string(),
        "strategy": state.strategy,
        "supports": state.support_views.len(),
        "points": state.point_count(),
    }));
    Ok(())
}

fn render(a: &RenderArgs) -> CliResult<()> {
    let state = at(&a.scene, load_scene(&a.scene))?;
    let pose = state
        .base_pose
        .compose(&Pose::from_yaw_pitch(a.yaw, a.pitch))
        .stepped_forward(a.step);
    let view = render_view(&state, &pose)?;
    view.image.save_png(&a.out)?;
    if let Some(path) = &a.coverage {
        fs::write(path, coverage_png(&view.coverage)?)?;
    }
    print_line(json!({
        "out": a.out.display().to_string(),
        "hole_fraction": view.hole_fraction,
        "outpainted": view.outpainted,
    }));
    Ok(())
}

fn eval_consistency(a: &EvalConsistencyArgs) -> CliResult<()> {
    let generator = a
        .generator
        .load()?
        .ok_or_else(|| CliError::Invalid("eval-consistency needs --codebook and --model".into()))?;
    let strategies: Vec<Strategy> = if a.strategies.is_empty() {
        Strategy::ALL.to_vec()
    } else {
        a.strategies.clone()
    };
    let config = PipelineConfig {
        samples: a.samples,
        temperature: a.temperature,
        max_hole_fraction: a.max_hole,
        ..PipelineConfig::default()
    };
    config.validate()?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(std::io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(std::io::stdout()),
    };
    let rooms = RoomSpec::fixtures();
    let intrinsics = CameraIntrinsics::desk();
    let mut table = Vec::new();
    for scene in consistency_scenes(&rooms, a.scenes, a.yaw, a.pitch, a.seed_base) {
        let input = scene_input(&scene, &rooms, &intrinsics)?;
        let mut means = [None; 3];
        for &strategy in &strategies {
            let mut line = json!({
                "scene": scene.index,
                "room": scene.room,
                "strategy": strategy,
                "seed": scene.seed,
                "yaw": scene.yaw,
                "pitch": scene.pitch,
            });
            match run_consistency(&scene, &input, intrinsics, generator.clone(), &config, strategy) {
                Ok(r) => {
                    if let Some(i) = Strategy::ALL.iter().position(|&s| s == strategy) {
                        means[i] = Some(r.mean.capped());
                    }
                    line["report"] = serde_json::to_value(r)?;
                }
                Err(e) => line["error"] = json!(e.to_string()),
            }
            writeln!(out, "{line}")?;
            out.flush()?;
        }
        table.push(means);
    }
    if strategies.len() == 3 && Strategy::ALL.iter().all(|s| strategies.contains(s)) {
        let s = summarize_consistency(&table);
        writeln!(out, "{}", json!({ "summary": s, "ordered_fraction": s.ordered_fraction() }))?;
    }
    out.flush()?;
    Ok(())
}

fn serve(a: &ServeArgs) -> CliResult<()> {
    let data_dir = a.data_dir.clone().unwrap_or_else(data_dir_from_env);
    let service = Arc::new(Service::new(&data_dir, a.capacity, a.generator.load()?)?);
    let server = Server::bind(&a.addr, service)?;
    print_line(json!({
        "listening": server.local_addr()?.to_string(),
        "data_dir": data_dir.display().to_string(),
    }));
    std::io::stdout().flush()?;
    server.run()?;
    Ok(())
}
