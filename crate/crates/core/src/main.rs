use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use consent::eval::{ablate, evaluate_images, ImageResult, DEFAULT_BUCKETS};
use consent::image::{BoxXywh, RgbImage};
use consent::model::{load_model, save_model, ConsentModel, ModelConfig};
use consent::morphology::{vote_profiles, SigmaMode};
use consent::synth::{
    generate_dataset, generate_rps, load_dataset, write_dataset, RpsConfig, Split, SynthConfig, Task,
};
use consent::train::{
    dataset_profiles, default_alpha_grid, encode_split, image_results, predict_image, predict_split, train,
    validate_alpha_profiles, TrainConfig,
};
use consent::{Error, Result};

#[derive(Parser)]
#[command(name = "consent", version, about = "Context-dependent bold word classification")]
struct Cli {
    /// Suppress progress and summary output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Score a model or the voting baseline on a dataset split.
    Eval(EvalArgs),
    /// Score the voting baseline (same as `eval --baseline-vote`).
    BaselineVote(EvalArgs),
    /// Classify the words of one image.
    Predict(PredictArgs),
    /// Train a grid of embedding sizes and stack counts.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct Common {
    /// JSON config with optional `synth`, `rps`, `train` and `model` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    /// Images to render (games with --rps).
    #[arg(long)]
    images: Option<usize>,
    /// Generate the rock-paper-scissors task instead.
    #[arg(long)]
    rps: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the model, log and run manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SigmaArg {
    Pooled,
    WordMeans,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with_all = ["baseline_vote", "ground_truth"])]
    model: Option<PathBuf>,
    /// Use morphology voting instead of a model.
    #[arg(long, conflicts_with = "ground_truth")]
    baseline_vote: bool,
    /// Voting threshold; chosen on the val split when omitted.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum, default_value = "pooled")]
    sigma: SigmaArg,
    /// Score the ground truth against itself.
    #[arg(long)]
    ground_truth: bool,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Where to write the JSON report.
    #[arg(long, alias = "out")]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Binary PPM input.
    #[arg(long)]
    image: PathBuf,
    /// JSON list of word boxes, each `[x, y, w, h]` or `{"box": [x, y, w, h]}`.
    #[arg(long)]
    boxes: PathBuf,
    /// Write a copy of the image with blue boxes on bold and green on other words.
    #[arg(long)]
    annotate: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "32,64,128,256")]
    embed_dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5")]
    stacks: Vec<usize>,
    /// Where to write the JSON grid.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    synth: SynthConfig,
    rps: RpsConfig,
    train: TrainConfig,
    model: ModelConfig,
}

impl Common {
    fn load(&self) -> Result<FileConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => FileConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.synth.seed = s;
            cfg.rps.seed = s;
            cfg.train.seed = s;
        }
        Ok(cfg)
    }
}

struct Out {
    quiet: bool,
}

impl Out {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes") + "\n"
}

fn cmd_gen(args: &GenArgs, out: &Out) -> Result<()> {
    let mut cfg = args.common.load()?;
    let manifest = if args.rps {
        if let Some(n) = args.images {
            cfg.rps.sequences = n;
            cfg.rps.split_sizes = None;
        }
        let games = generate_rps(&cfg.rps)?;
        write_dataset(&args.out, Task::Rps, &games)?
    } else {
        if let Some(n) = args.images {
            cfg.synth.images = n;
        }
        generate_dataset(&cfg.synth, &args.out)?
    };
    let (bold, words) = manifest.label_counts();
    let positive = if args.rps { "win" } else { "bold" };
    out.say(format!("wrote {}", args.out.join("manifest.json").display()));
    out.say(format!(
        "{} images, {words} words, {bold} {positive}",
        manifest.images.len()
    ));
    let splits: Vec<String> = manifest
        .split_counts()
        .iter()
        .map(|(s, n)| format!("{} {n}", s.as_str()))
        .collect();
    out.say(format!("splits: {}", splits.join(", ")));
    Ok(())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'static str,
    config: &'a FileConfig,
    train_images: usize,
    val_images: usize,
    best_epoch: Option<usize>,
    model_file: &'static str,
    log_file: &'static str,
}

fn cmd_train(args: &TrainArgs, out: &Out) -> Result<()> {
    let mut cfg = args.common.load()?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    cfg.train.validate()?;
    cfg.model.validate()?;
    let data = load_dataset(&args.data)?;
    let train_imgs = data.load_split(Split::Train)?;
    let val_imgs = data.load_split(Split::Val)?;
    out.say(format!("{} train / {} val images", train_imgs.len(), val_imgs.len()));
    let train_split = encode_split(&train_imgs, &cfg.model, &cfg.train)?;
    let val_split = encode_split(&val_imgs, &cfg.model, &cfg.train)?;
    create_dir(&args.out)?;
    let model = ConsentModel::new(cfg.model.clone(), cfg.train.seed)?;
    let (model, log) = train(model, &train_split, &val_split, &cfg.train, Some(&args.out))?;
    for r in &log.epochs {
        let f1 = r.val_f1.map_or_else(|| "-".to_string(), |f| format!("{f:.4}"));
        out.say(format!(
            "epoch {:>3}  loss {:.6}  val f1 {f1}  {:.1}s",
            r.epoch, r.train_loss, r.wall_time_s
        ));
    }
    save_model(&model, &args.out.join("model.cnsnt"))?;
    write_file(&args.out.join("train_log.jsonl"), log.to_jsonl().as_bytes())?;
    let run = RunManifest {
        command: "train",
        config: &cfg,
        train_images: train_imgs.len(),
        val_images: val_imgs.len(),
        best_epoch: log.best_epoch,
        model_file: "model.cnsnt",
        log_file: "train_log.jsonl",
    };
    write_file(&args.out.join("run_manifest.json"), to_json(&run).as_bytes())?;
    out.say(format!("wrote {}", args.out.join("model.cnsnt").display()));
    Ok(())
}

fn cmd_eval(args: &EvalArgs, baseline: bool, out: &Out) -> Result<()> {
    let cfg = args.common.load()?;
    let data = load_dataset(&args.data)?;
    let split: Split = args.split.into();
    let images = data.load_split(split)?;
    if images.is_empty() {
        return Err(Error::EmptySplit(split.as_str()));
    }
    let (method, results) = if args.ground_truth {
        let r = images
            .iter()
            .map(|i| ImageResult {
                truth: i.labels(),
                pred: i.labels(),
            })
            .collect();
        ("ground truth".to_string(), r)
    } else if let Some(path) = &args.model {
        let model = load_model(path)?;
        let enc = encode_split(&images, model.config(), &cfg.train)?;
        let preds = predict_split(&model, &enc, cfg.train.batch_size)?;
        let ctx = if model.config().num_stacks == 0 {
            "without"
        } else {
            "with"
        };
        (format!("consent {ctx} context"), image_results(&enc, &preds))
    } else if baseline || args.baseline_vote {
        let mode = match args.sigma {
            SigmaArg::Pooled => SigmaMode::Pooled,
            SigmaArg::WordMeans => SigmaMode::WordMeans,
        };
        let alpha = match args.alpha {
            Some(a) => a,
            None => {
                let val = data.load_split(Split::Val)?;
                let labels: Vec<Vec<u8>> = val.iter().map(|i| i.labels()).collect();
                let choice = validate_alpha_profiles(&dataset_profiles(&val)?, &labels, &default_alpha_grid(), mode)?;
                out.say(format!("validated alpha {} (val f1 {:.4})", choice.alpha, choice.f1));
                choice.alpha
            }
        };
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::Config(format!(
                "alpha must be a non-negative number, got {alpha}"
            )));
        }
        let profiles = dataset_profiles(&images)?;
        let r = profiles
            .into_iter()
            .zip(&images)
            .map(|(p, img)| ImageResult {
                truth: img.labels(),
                pred: vote_profiles(p, alpha, mode),
            })
            .collect();
        (format!("morphology voting a={alpha}"), r)
    } else {
        return Err(Error::Config(
            "choose one of --model, --baseline-vote or --ground-truth".into(),
        ));
    };
    let report = evaluate_images(&method, &results, &DEFAULT_BUCKETS)?;
    if let Some(path) = &args.report {
        write_file(path, (report.to_json() + "\n").as_bytes())?;
    }
    if !out.quiet {
        print!("{}", report.table());
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BoxEntry {
    Plain(BoxXywh),
    Object {
        #[serde(rename = "box")]
        bbox: BoxXywh,
    },
}

#[derive(Serialize)]
struct PredictedWord {
    #[serde(rename = "box")]
    bbox: BoxXywh,
    label: u8,
    p_bold: f64,
}

#[derive(Serialize)]
struct Predictions {
    words: Vec<PredictedWord>,
}

const BOLD_RGB: [u8; 3] = [0, 0, 255];
const PLAIN_RGB: [u8; 3] = [0, 255, 0];

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let image = RgbImage::read_ppm(&args.image)?;
    let text = fs::read_to_string(&args.boxes).map_err(|e| Error::io(&args.boxes, e))?;
    let entries: Vec<BoxEntry> =
        serde_json::from_str(&text).map_err(|e| Error::json(args.boxes.display().to_string(), e))?;
    let boxes: Vec<BoxXywh> = entries
        .into_iter()
        .map(|e| match e {
            BoxEntry::Plain(b) | BoxEntry::Object { bbox: b } => b,
        })
        .collect();
    let preds = predict_image(&model, &image, &boxes)?;
    let words: Vec<PredictedWord> = preds
        .iter()
        .zip(&boxes)
        .map(|(p, &bbox)| PredictedWord {
            bbox,
            label: p.label,
            p_bold: p.p_bold,
        })
        .collect();
    if let Some(path) = &args.annotate {
        let mut canvas = image.clone();
        for w in &words {
            canvas.draw_box_outline(w.bbox, 2, if w.label == 1 { BOLD_RGB } else { PLAIN_RGB });
        }
        canvas.write_ppm(path)?;
    }
    print!("{}", to_json(&Predictions { words }));
    Ok(())
}

fn cmd_ablate(args: &AblateArgs, out: &Out) -> Result<()> {
    let cfg = args.common.load()?;
    cfg.train.validate()?;
    let data = load_dataset(&args.data)?;
    let train_split = encode_split(&data.load_split(Split::Train)?, &cfg.model, &cfg.train)?;
    let val_split = encode_split(&data.load_split(Split::Val)?, &cfg.model, &cfg.train)?;
    let grid = ablate(
        &train_split,
        &val_split,
        &cfg.model,
        &cfg.train,
        &args.embed_dims,
        &args.stacks,
    )?;
    if let Some(path) = &args.out {
        write_file(path, (grid.to_json() + "\n").as_bytes())?;
    }
    if !out.quiet {
        print!("{}", grid.table());
    }
    for c in &grid.cells {
        if let Some(e) = &c.error {
            out.say(format!("cell d={} T={} failed: {e}", c.embed_dim, c.num_stacks));
        }
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("CONSENT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("CONSENT_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: &Cli) -> Result<()> {
    configure_threads()?;
    let out = Out { quiet: cli.quiet };
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, &out),
        Command::Train(a) => cmd_train(a, &out),
        Command::Eval(a) => cmd_eval(a, false, &out),
        Command::BaselineVote(a) => cmd_eval(a, true, &out),
        Command::Predict(a) => cmd_predict(a),
        Command::Ablate(a) => cmd_ablate(a, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
