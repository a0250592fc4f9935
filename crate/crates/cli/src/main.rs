use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use manga_core::annotation::parse_page_annotation;
use manga_core::caption::MockCaptioner;
use manga_core::checkpoint::load_checkpoint;
use manga_core::diffusion::sample;
use manga_core::metrics::StubExtractor;
use manga_core::order::{default_gap_tolerance, order_panels};
use manga_core::panelize::{compose_page, PageImage, PanelImageStack};
use manga_core::pipeline::{build_dataset_dir, run_eval, run_train, write_synthetic_corpus, PipelineConfig};
use manga_core::script::{pad_scripts, split_story};
use manga_core::synth::SynthParams;
use manga_core::ErrorClass;
use serde_json::json;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

/// Multi-panel manga page generation: datasets, training, sampling and evaluation.
#[derive(Debug, Parser)]
#[command(name = "manga", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build training records from annotated pages.
    BuildDataset(BuildDatasetArgs),
    /// Print the reading order of the panels of one annotated page.
    OrderPanels(OrderPanelsArgs),
    /// Split a plain-text story into K panel scripts.
    SplitStory(SplitStoryArgs),
    /// Train the denoiser on a built dataset.
    Train(TrainArgs),
    /// Generate a page from a story with a trained checkpoint.
    Sample(SampleArgs),
    /// Compose full-page panel images into one page by pixel-wise minimum.
    Compose(ComposeArgs),
    /// Compute the Fréchet distance and CLIP-I between two image directories.
    Evaluate(EvaluateArgs),
    /// Write a synthetic annotated corpus (annotations/, images/, bubbles/).
    Synth(SynthArgs),
}

#[derive(Debug, clap::Args)]
struct BuildDatasetArgs {
    /// Directory of page annotation XML files.
    #[arg(long)]
    annotations: PathBuf,
    /// Directory of page images named <page_id>.png.
    #[arg(long)]
    images: PathBuf,
    /// Directory of bubble box files named <page_id>.json; text boxes are used when absent.
    #[arg(long)]
    bubbles: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Run configuration (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Maximum panels per page; pages with more are discarded.
    #[arg(long)]
    k_max: Option<usize>,
    /// Fraction of a token cell a bubble must cover to mask the token.
    #[arg(long)]
    coverage_threshold: Option<f64>,
}

#[derive(Debug, clap::Args)]
struct OrderPanelsArgs {
    /// Page annotation XML file.
    #[arg(long)]
    annotation: PathBuf,
    /// Gap tolerance in pixels; defaults to one scaled by page height.
    #[arg(long)]
    gap_tolerance: Option<f64>,
    /// Also print the cut tree behind the order.
    #[arg(long)]
    explain: bool,
}

#[derive(Debug, clap::Args)]
struct StoryInput {
    /// Story text.
    #[arg(long, conflicts_with = "story_file", required_unless_present = "story_file")]
    story: Option<String>,
    /// File holding the story text.
    #[arg(long)]
    story_file: Option<PathBuf>,
}

impl StoryInput {
    fn read(&self) -> Result<String> {
        match (&self.story, &self.story_file) {
            (Some(s), _) => Ok(s.clone()),
            (None, Some(p)) => fs::read_to_string(p).map_err(|e| data_error(format!("cannot read story file {}: {e}", p.display()))),
            (None, None) => Err(config_error("a story is required")),
        }
    }
}

#[derive(Debug, clap::Args)]
struct SplitStoryArgs {
    #[command(flatten)]
    input: StoryInput,
    /// Number of panel scripts.
    #[arg(long)]
    k: usize,
    /// Pad the scripts to this many panels with EMPTY.
    #[arg(long)]
    k_max: Option<usize>,
    /// Run configuration (JSON) supplying K_max.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    /// Run configuration (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by build-dataset.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output directory.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to resume from; training continues up to the configured step count.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Total optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Records per batch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// AdamW learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Root seed for initialization, shuffling and noise.
    #[arg(long, env = "MANGA_SEED")]
    seed: Option<u64>,
}

#[derive(Debug, clap::Args)]
struct SampleArgs {
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    input: StoryInput,
    /// Number of panels on the page.
    #[arg(long)]
    k: usize,
    /// Sampling seed.
    #[arg(long, env = "MANGA_SEED", default_value_t = 0)]
    seed: u64,
    /// Output page PNG.
    #[arg(long)]
    out: PathBuf,
    /// Also write each generated panel image into this directory.
    #[arg(long)]
    panels_dir: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct ComposeArgs {
    /// Full-page panel images, all the same size.
    #[arg(long, num_args = 1.., required = true)]
    panels: Vec<PathBuf>,
    /// Output page PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Extractor {
    /// 8x8 grayscale grid features.
    Stub,
}

#[derive(Debug, clap::Args)]
struct EvaluateArgs {
    /// Directory of generated PNG images.
    #[arg(long)]
    gen: PathBuf,
    /// Directory of reference PNG images, paired with --gen by sorted file name.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Feature extractor.
    #[arg(long, value_enum, default_value_t = Extractor::Stub)]
    extractor: Extractor,
    /// Output report JSON; printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct SynthArgs {
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of pages.
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Corpus seed.
    #[arg(long, env = "MANGA_SEED", default_value_t = 0)]
    seed: u64,
    /// Page height in pixels.
    #[arg(long, default_value_t = 64)]
    height: u32,
    /// Page width in pixels.
    #[arg(long, default_value_t = 48)]
    width: u32,
    /// Maximum panels per page.
    #[arg(long, default_value_t = 4)]
    k_max: usize,
}

/// Error carrying an explicit exit class for failures raised by the CLI itself.
#[derive(Debug)]
struct Classified(ErrorClass, String);

impl std::fmt::Display for Classified {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Classified {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Classified(ErrorClass::Config, msg.into()).into()
}

fn data_error(msg: impl Into<String>) -> anyhow::Error {
    Classified(ErrorClass::Data, msg.into()).into()
}

fn exit_class(err: &anyhow::Error) -> ErrorClass {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<manga_core::Error>() {
            return e.class();
        }
        if let Some(c) = cause.downcast_ref::<Classified>() {
            return c.0;
        }
    }
    ErrorClass::Runtime
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    Ok(cfg)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn build_dataset(args: BuildDatasetArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref()).context("config")?;
    if let Some(k) = args.k_max {
        cfg.k_max = k;
        cfg.model.k_max = k;
    }
    if let Some(t) = args.coverage_threshold {
        cfg.raster.coverage_threshold = t;
    }
    cfg.validate().context("config")?;
    let summary = build_dataset_dir(
        &args.annotations,
        &args.images,
        args.bubbles.as_deref(),
        &args.out,
        &MockCaptioner,
        cfg.k_max,
        cfg.raster_params(),
    )
    .context("build-dataset")?;
    for w in &summary.warnings {
        log::warn!("{w}");
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn order(args: OrderPanelsArgs) -> Result<()> {
    let text = fs::read_to_string(&args.annotation)
        .map_err(|e| data_error(format!("cannot read {}: {e}", args.annotation.display())))?;
    let parsed = parse_page_annotation(&text).context("parse annotation")?;
    for w in &parsed.warnings {
        log::warn!("{w}");
    }
    let ann = parsed.annotation;
    let tol = args.gap_tolerance.unwrap_or_else(|| default_gap_tolerance(ann.height));
    let result = order_panels(&ann.panel_boxes(), (ann.width, ann.height), tol).context("order-panels")?;
    let out = if args.explain {
        json!({ "page_id": ann.page_id, "order": result.permutation, "cut_tree": result.cut_tree })
    } else {
        json!({ "page_id": ann.page_id, "order": result.permutation })
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn split(args: SplitStoryArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref()).context("config")?;
    let k_max = args.k_max.unwrap_or(cfg.k_max);
    let story = args.input.read()?;
    let (scripts, warnings) = split_story(&story, args.k, k_max, None).context("split-story")?;
    for w in warnings {
        log::warn!("{w}");
    }
    let padded = pad_scripts(&scripts.scripts, k_max).context("pad-scripts")?;
    println!("{}", serde_json::to_string_pretty(&json!({ "k": scripts.k, "scripts": padded.scripts }))?);
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref()).context("config")?;
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.optimizer.lr = lr;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate().context("config")?;
    let every = cfg.train.log_every.max(1);
    let log = run_train(&cfg, &args.data, &args.out, args.resume.as_deref(), |step, loss| {
        if step % every == 0 {
            log::info!("step {step} loss {loss:.5}");
        }
    })
    .context("train")?;
    let n = log.losses.len();
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "steps_run": n,
            "final_loss": log.losses.last(),
            "smoothed_final_loss": (n > 0).then(|| log.smoothed(n, 100)),
            "checkpoint": args.out,
        }))?
    );
    Ok(())
}

/// Story to composed page: split, pad, sample, compose, write.
fn generate(args: SampleArgs) -> Result<()> {
    let story = args.input.read()?;
    let (cfg, state) = load_checkpoint(&args.ckpt).context("load checkpoint")?;
    let (scripts, warnings) = split_story(&story, args.k, cfg.k_max, None).context("split-story")?;
    for w in warnings {
        log::warn!("{w}");
    }
    let padded = pad_scripts(&scripts.scripts, cfg.k_max).context("pad-scripts")?;
    let stack = sample(
        &state.model,
        &cfg.codec(),
        &cfg.embedder(),
        &padded,
        &cfg.schedule().context("sample")?,
        (cfg.page_height, cfg.page_width),
        args.seed,
        &cfg.sampler,
    )
    .context("sample")?;
    let page = compose_page(&stack).context("compose")?;
    page.save_png(&args.out).context("write page")?;
    if let Some(dir) = &args.panels_dir {
        fs::create_dir_all(dir)?;
        for (i, img) in stack.images.iter().enumerate() {
            img.save_png(&dir.join(format!("panel_{i:02}.png"))).context("write panels")?;
        }
    }
    println!("{}", serde_json::to_string_pretty(&json!({ "out": args.out, "scripts": padded.scripts, "k": padded.k }))?);
    Ok(())
}

fn compose(args: ComposeArgs) -> Result<()> {
    let images = args
        .panels
        .iter()
        .map(|p| PageImage::load_png(p).with_context(|| format!("read panel {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let page = compose_page(&PanelImageStack::from_images(images)).context("compose")?;
    page.save_png(&args.out).context("write page")?;
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let report = match args.extractor {
        Extractor::Stub => run_eval(&args.gen, &args.reference, &StubExtractor),
    }
    .context("evaluate")?;
    let value = serde_json::to_value(&report)?;
    match &args.report {
        Some(p) => write_json(p, &value)?,
        None => println!("{}", serde_json::to_string_pretty(&value)?),
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    if args.count == 0 {
        return Err(config_error("--count must be positive"));
    }
    if args.height < 16 || args.width < 16 || args.k_max == 0 {
        return Err(config_error("pages must be at least 16x16 with k_max >= 1"));
    }
    let params = SynthParams {
        height: args.height,
        width: args.width,
        k_max: args.k_max,
        ..SynthParams::default()
    };
    write_synthetic_corpus(&args.out, args.count, args.seed, params).context("synth")?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildDataset(a) => build_dataset(a),
        Command::OrderPanels(a) => order(a),
        Command::SplitStory(a) => split(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => generate(a),
        Command::Compose(a) => compose(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Synth(a) => synth(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(match exit_class(&err) {
                ErrorClass::Config => EXIT_CONFIG,
                ErrorClass::Data => EXIT_DATA,
                ErrorClass::Runtime => EXIT_RUNTIME,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn every_argument_has_help() {
        let cmd = Cli::command();
        cmd.clone().debug_assert();
        for sub in cmd.get_subcommands() {
            assert!(sub.get_about().is_some(), "{} has no description", sub.get_name());
            for arg in sub.get_arguments() {
                let id = arg.get_id().as_str();
                if id == "help" || id == "version" {
                    continue;
                }
                assert!(arg.get_help().is_some(), "{} --{id} has no help", sub.get_name());
            }
        }
    }
}
