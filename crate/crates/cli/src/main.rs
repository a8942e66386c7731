//! `oodseg`: training, scoring, evaluation and experiment drivers.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use oodseg::experiments::ablation::{ablation_grid, AblationConfig};
use oodseg::experiments::coverage::{coverage_diagnostic, CoverageConfig};
use oodseg::experiments::losshist::{divergence_curves, loss_histogram_study, LossHistConfig};
use oodseg::experiments::pipeline;
use oodseg::experiments::samples::{compose_debug, sample_grid};
use oodseg::experiments::toy2d::{toy2d_run, Toy2dConfig};
use oodseg::trainer::JointState;
use oodseg::{ClassifierModel, FlowModel, OodScoreKind, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "oodseg", version, about = "Dense OOD detection with flow-generated negatives")]
struct Cli {
    /// TOML configuration for the chosen command; defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for all outputs of the command.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic shapes dataset (train and test manifests).
    Generate,
    /// Supervised pre-training of the dense classifier.
    PretrainCls(TrainArgs),
    /// Likelihood pre-training of the flow on inlier crops.
    PretrainFlow(TrainArgs),
    /// Joint fine-tuning of classifier and flow with pasted negatives.
    JointTrain(JointArgs),
    /// Write per-pixel anomaly scores and closed-set predictions.
    Score(ScoreArgs),
    /// Compute OOD and segmentation metrics from written scores.
    Evaluate(EvaluateArgs),
    /// Every pipeline stage in order.
    Pipeline,
    /// Two-moons toy with a far-field ring.
    Toy2d,
    /// Mode coverage of flow and GAN negatives on a Gaussian ring mixture.
    Coverage,
    /// Histograms of weighted negative losses for KL, reverse KL and JS.
    Losshist(ModelArgs),
    /// Loss/score, generator, pre-training and temperature grids.
    Ablate,
    /// Tiled PNG of flow samples.
    Samples(SamplesArgs),
    /// Tiled PNG of composed training inputs and their paste masks.
    ComposeDebug(ComposeArgs),
    /// Two-class divergence-to-uniform curves.
    Curves(CurvesArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training split manifest.
    #[arg(long)]
    train: PathBuf,
    /// Keep an existing checkpoint in the output directory instead of retraining.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct JointArgs {
    #[arg(long)]
    train: PathBuf,
    /// Pre-trained classifier checkpoint.
    #[arg(long)]
    classifier: PathBuf,
    /// Pre-trained flow checkpoint.
    #[arg(long)]
    flow: PathBuf,
    /// Continue from the joint checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    classifier: PathBuf,
    /// Split manifest to score.
    #[arg(long)]
    data: PathBuf,
    /// Score kind: jsd, msp, maxlogit, kl or rkl. Defaults to the config's.
    #[arg(long)]
    kind: Option<OodScoreKind>,
    /// Softmax temperature. Defaults to the config's value for the kind.
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory written by `score`.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 50)]
    bins: usize,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    flow: PathBuf,
}

#[derive(Args, Debug)]
struct SamplesArgs {
    #[arg(long)]
    flow: PathBuf,
    #[arg(long, default_value_t = 4)]
    rows: usize,
    #[arg(long, default_value_t = 4)]
    cols: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
}

#[derive(Args, Debug)]
struct ComposeArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    flow: PathBuf,
    #[arg(long, default_value_t = 4)]
    n: usize,
}

#[derive(Args, Debug)]
struct CurvesArgs {
    #[arg(long, default_value_t = 201)]
    resolution: usize,
}

/// Configuration types whose seed can be overridden from the command line.
trait Seeded {
    fn set_seed(&mut self, seed: u64);
}

macro_rules! seeded {
    ($($t:ty),*) => {
        $(impl Seeded for $t {
            fn set_seed(&mut self, seed: u64) {
                self.seed = seed;
            }
        })*
    };
}
seeded!(RunConfig, Toy2dConfig, CoverageConfig, LossHistConfig);

impl Seeded for AblationConfig {
    fn set_seed(&mut self, seed: u64) {
        self.run.seed = seed;
    }
}

fn load_config<T: DeserializeOwned + Default + Seeded>(cli: &Cli) -> Result<T> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => T::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(v)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn joint_state(cfg: &RunConfig, classifier: &Path, flow: &Path) -> Result<JointState> {
    let cls = ClassifierModel::load(classifier).with_context(|| format!("loading {}", classifier.display()))?;
    let flow = FlowModel::load(flow).with_context(|| format!("loading {}", flow.display()))?;
    Ok(JointState::new(cls, flow, cfg.classifier.joint_lr, cfg.flow.joint_lr))
}

fn run(cli: &Cli) -> Result<()> {
    let out = &cli.out_dir;
    match &cli.command {
        Command::Generate => {
            let cfg: RunConfig = load_config(cli)?;
            let (train, test) = pipeline::generate_stage(&cfg, out)?;
            println!("{}\n{}", train.display(), test.display());
        }
        Command::PretrainCls(a) => {
            let cfg: RunConfig = load_config(cli)?;
            if a.resume && out.join("classifier.ckpt").exists() {
                log::info!("classifier checkpoint present; skipping");
                return Ok(());
            }
            let hist = pipeline::pretrain_cls_stage(&cfg, &pipeline::load_split(&a.train)?, out)?;
            print_json(&serde_json::json!({ "cross_entropy": hist }))?;
        }
        Command::PretrainFlow(a) => {
            let cfg: RunConfig = load_config(cli)?;
            if a.resume && out.join("flow.ckpt").exists() {
                log::info!("flow checkpoint present; skipping");
                return Ok(());
            }
            let log = pipeline::pretrain_flow_stage(&cfg, &pipeline::load_split(&a.train)?, out)?;
            print_json(&log)?;
        }
        Command::JointTrain(a) => {
            let cfg: RunConfig = load_config(cli)?;
            let train = pipeline::load_split(&a.train)?;
            let (_, records) =
                pipeline::joint_stage(&cfg, &train, &a.classifier, &a.flow, out, a.resume, &mut |_, _| Ok(()))?;
            let summary: Vec<_> = records
                .iter()
                .map(|r| serde_json::json!({ "epoch": r.epoch, "cls": r.cls, "neg": r.neg, "nll": r.nll, "max_neg_pixel": r.max_neg_pixel }))
                .collect();
            print_json(&summary)?;
        }
        Command::Score(a) => {
            let cfg: RunConfig = load_config(cli)?;
            let kind = a.kind.unwrap_or(cfg.score.kind);
            let t = a.temperature.unwrap_or_else(|| cfg.score.temperature_for(kind));
            if t.is_nan() || t <= 0.0 || t.is_infinite() {
                bail!("temperature must be positive");
            }
            let n = pipeline::score_stage(&a.classifier, &pipeline::load_split(&a.data)?, kind, t, out)?;
            println!("scored {n} images with {kind} at T={t}");
        }
        Command::Evaluate(a) => {
            let report = pipeline::evaluate_stage(&a.scores, &pipeline::load_split(&a.data)?, out, a.bins)?;
            print_json(&report.result)?;
        }
        Command::Pipeline => {
            let cfg: RunConfig = load_config(cli)?;
            let s = pipeline::run_pipeline(&cfg, out)?;
            print_json(&s.eval.result)?;
        }
        Command::Toy2d => {
            let cfg: Toy2dConfig = load_config(cli)?;
            print_json(&toy2d_run(&cfg, out)?.1)?;
        }
        Command::Coverage => {
            let cfg: CoverageConfig = load_config(cli)?;
            let (report, _) = coverage_diagnostic(&cfg, out)?;
            print_json(&report.metrics)?;
        }
        Command::Losshist(a) => {
            let cfg: LossHistConfig = load_config(cli)?;
            let state = joint_state(&RunConfig::default(), &a.classifier, &a.flow)?;
            let (report, _) = loss_histogram_study(&state, &pipeline::load_split(&a.train)?, &cfg, out)?;
            print_json(&report.metrics)?;
        }
        Command::Ablate => {
            let cfg: AblationConfig = load_config(cli)?;
            let (report, _) = ablation_grid(&cfg, out)?;
            print_json(&report.metrics)?;
        }
        Command::Samples(a) => {
            let flow = FlowModel::load(&a.flow).with_context(|| format!("loading {}", a.flow.display()))?;
            std::fs::create_dir_all(out)?;
            let p = out.join("samples.png");
            sample_grid(&flow, a.rows, a.cols, (a.height, a.width), cli.seed.unwrap_or(0), &p)?;
            println!("{}", p.display());
        }
        Command::ComposeDebug(a) => {
            let cfg: RunConfig = load_config(cli)?;
            let state = joint_state(&cfg, &a.classifier, &a.flow)?;
            std::fs::create_dir_all(out)?;
            let p = out.join("compose_debug.png");
            let patch = (cfg.joint.patch_min, cfg.joint.patch_max);
            compose_debug(&state, &pipeline::load_split(&a.train)?, a.n, patch, cfg.seed, &p)?;
            println!("{}", p.display());
        }
        Command::Curves(a) => {
            divergence_curves(a.resolution, out)?;
            println!("{}", out.join("curves.csv").display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
