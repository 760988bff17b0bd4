use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use udtrans::checks::gradcheck_battery;
use udtrans::data::{gen_synthetic, save_sample, SynthSpec};
use udtrans::experiment::{eval_predictions, run_experiment, run_suite, suite_markdown, DatasetSource, ExperimentConfig, Suite};
use udtrans::segnet::{BackboneSpec, BlockType, ModelConfig, SkipStrategy, UdTransConfig};
use udtrans::train::TrainConfig;
use udtrans::Error;

#[derive(Parser)]
#[command(name = "udtrans", version, about = "Segmentation networks with learnable attention skip connections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the top-level seed (data, folds, init, training).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as PGM/PPM pairs.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Number of samples; defaults to the config's count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// k-fold training and evaluation of one config.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Run an ablation suite around a base config.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// skip_fig4, components_table6, order_fig6, dra_table7 or heads_layers_fig9.
        suite: String,
    },
    /// Score saved `<id>_pred.pgm` / `<id>_mask.pgm` pairs.
    Eval {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 2)]
        classes: usize,
    },
    /// Run the numeric gradient battery.
    Gradcheck,
    /// Print a complete example config.
    ExampleConfig,
}

fn example_config() -> ExperimentConfig {
    ExperimentConfig {
        name: "toy_udtrans".into(),
        dataset: DatasetSource::Synthetic {
            spec: SynthSpec::toy(64, 0),
            count: 200,
        },
        model: ModelConfig {
            backbone: BackboneSpec {
                in_channels: 1,
                height: 64,
                width: 64,
                widths: [8, 16, 32, 64],
                bottleneck: 64,
                block: BlockType::PlainConv,
            },
            skip: SkipStrategy::UdTrans(UdTransConfig {
                patch: 8,
                embed_dim: 32,
                heads: 4,
                layers: 2,
                ..UdTransConfig::table1()
            }),
            classes: 2,
        },
        train: TrainConfig {
            lr: 1e-3,
            lr_min: 0.0,
            max_epochs: 30,
            patience: 10,
            folds: 2,
            ..TrainConfig::default()
        },
        out_dir: "runs".into(),
        jobs: 1,
        save_checkpoints: true,
        save_predictions: false,
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_json_file(p)?,
        None => return Err(Error::Config("--config <path> is required".into())),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(jobs) = common.jobs {
        cfg.jobs = jobs;
    }
    Ok(cfg)
}

fn gen(common: &Common, count: Option<usize>) -> Result<serde_json::Value, Error> {
    let (mut spec, default_count, out) = match &common.config {
        Some(_) => {
            let cfg = load(common)?;
            let DatasetSource::Synthetic { spec, count } = cfg.dataset else {
                return Err(Error::Config("gen needs a config with a synthetic dataset".into()));
            };
            (spec, count, cfg.out_dir.join(&cfg.name).join("data"))
        }
        None => (
            SynthSpec::toy(64, 0),
            200,
            common.out.clone().unwrap_or_else(|| PathBuf::from("data")),
        ),
    };
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let out = common.out.clone().unwrap_or(out);
    let n = count.unwrap_or(default_count);
    let samples = gen_synthetic(&spec, n)?;
    for s in &samples {
        save_sample(&out, s)?;
    }
    Ok(json!({ "written": samples.len(), "dir": out }))
}

fn run(cli: Cli) -> Result<serde_json::Value, Error> {
    match cli.command {
        Command::Gen { common, count } => gen(&common, count),
        Command::Train { common } => {
            let cfg = load(&common)?;
            let r = run_experiment(&cfg)?;
            eprintln!("{}", std::fs::read_to_string(cfg.run_dir().join("report.md"))?);
            Ok(json!({
                "name": r.name,
                "dir": cfg.run_dir(),
                "split_hash": r.split_hash,
                "aggregate": r.aggregate,
                "warnings": r.warnings,
            }))
        }
        Command::Ablate { common, suite } => {
            let suite = Suite::parse(&suite)?;
            let cfg = load(&common)?;
            let report = run_suite(&cfg, suite)?;
            eprintln!("{}", suite_markdown(&report));
            let failed: Vec<_> = report.rows.iter().filter(|r| r.error.is_some()).map(|r| &r.label).collect();
            Ok(json!({
                "suite": suite.name(),
                "dir": cfg.out_dir.join(suite.name()),
                "rows": report.rows.len(),
                "shared_split": report.shared_split,
                "failed": failed,
            }))
        }
        Command::Eval { dir, classes } => {
            let s = eval_predictions(&dir, classes)?;
            Ok(json!({
                "samples": s.samples.len(),
                "dice_mean": s.dice_mean,
                "dice_std": s.dice_std,
                "hd95_mean": s.hd95_mean,
                "hd95_std": s.hd95_std,
                "per_sample": s.samples,
            }))
        }
        Command::Gradcheck => {
            let checks = gradcheck_battery()?;
            for c in &checks {
                let status = if c.passed() { "ok" } else { "FAIL" };
                eprintln!("{status:4} {:24} rel err {:.2e} (tol {:.0e}, {} scalars)", c.name, c.max_rel_err, c.tolerance, c.scalars);
            }
            let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.clone()).collect();
            if !failed.is_empty() {
                return Err(Error::Invalid(format!("gradient checks failed: {}", failed.join(", "))));
            }
            Ok(json!({ "checks": checks.len(), "passed": true }))
        }
        Command::ExampleConfig => Ok(serde_json::to_value(example_config())?),
    }
}

fn error_summary(e: &Error) -> serde_json::Value {
    let mut chain = Vec::new();
    let mut cur: &dyn std::error::Error = e;
    chain.push(cur.to_string());
    while let Some(next) = cur.source() {
        chain.push(next.to_string());
        cur = next;
    }
    json!({ "error": { "kind": e.kind(), "message": e.to_string(), "chain": chain } })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json values serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            println!("{}", error_summary(&e));
            ExitCode::FAILURE
        }
    }
}
