use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use graphonomy::gradpaths::{self, GradPath};
use graphonomy::render::render_samples;
use graphonomy::synth::{generate, GenSpec};
use graphonomy::train::{evaluate_model, load_split, train, AnyModel, ExperimentConfig, TrainOptions};
use graphonomy::{Error, Result};

#[derive(Parser)]
#[command(name = "graphonomy", version, about = "Graph reasoning and transfer across label taxonomies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Overrides the seed from the config or spec.
    #[arg(long, env = "GRAPHONOMY_SEED", global = true)]
    seed: Option<u64>,
    /// Worker threads for generation and batched evaluation.
    #[arg(long, default_value_t = 1, global = true)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Base checkpoint for incremental training.
        #[arg(long)]
        from: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to evaluate instead of the config's own.
        #[arg(long)]
        from: Option<PathBuf>,
        /// A domain name, a comma-separated list, or `all`.
        #[arg(long, default_value = "all")]
        domain: String,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        /// Restrict to one path; repeatable.
        #[arg(long)]
        path: Vec<String>,
        #[arg(long, default_value_t = gradpaths::DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = gradpaths::DEFAULT_INSTANCES)]
        instances: usize,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write PPM images of inputs, ground truth, and predictions.
    Render {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, default_value = "all")]
        domain: String,
        #[arg(long)]
        out: PathBuf,
        /// Number of test scenes to render per domain.
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("JSON values serialize"));
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_model(cfg: &ExperimentConfig, from: Option<PathBuf>) -> Result<AnyModel> {
    let path = from.unwrap_or_else(|| cfg.checkpoint_path());
    Ok(AnyModel::load(&path)?.0)
}

fn select_domains(model: &AnyModel, arg: &str) -> Result<Vec<String>> {
    let all = model.domains();
    if arg == "all" {
        return Ok(all);
    }
    arg.split(',')
        .map(|d| {
            let d = d.trim().to_string();
            if all.contains(&d) {
                Ok(d)
            } else {
                Err(Error::Config(format!(
                    "checkpoint has no domain '{d}' (has {})",
                    all.join(", ")
                )))
            }
        })
        .collect()
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Gen { spec, out, common } => {
            let mut spec = GenSpec::load(&spec)?;
            if let Some(s) = common.seed {
                spec.seed = s;
            }
            let summary = generate(&spec, &out, common.workers)?;
            let domains: serde_json::Map<String, serde_json::Value> = summary
                .into_iter()
                .map(|(d, (tr, te))| (d, serde_json::json!({"train": tr, "test": te})))
                .collect();
            print_json(&serde_json::json!({"out": out, "seed": spec.seed, "domains": domains}));
        }
        Command::Train {
            config,
            from,
            common,
        } => {
            let cfg = load_config(&config, common.seed)?;
            let outcome = train(
                &cfg,
                &TrainOptions {
                    workers: common.workers,
                    from,
                },
            )?;
            print_json(&serde_json::json!({
                "checkpoint": outcome.checkpoint,
                "log": outcome.log_path,
                "sha256": outcome.manifest.sha256,
                "iterations": outcome.log.len(),
                "final_loss": outcome.log.last().map(|r| r.loss),
            }));
        }
        Command::Eval {
            config,
            from,
            domain,
            out,
            common,
        } => {
            let cfg = load_config(&config, common.seed)?;
            let model = load_model(&cfg, from)?;
            let domains = select_domains(&model, &domain)?;
            let report = evaluate_model(&model, &cfg.paths.data, Some(&domains), common.workers)?;
            let value = serde_json::to_value(&report).expect("report serializes");
            if let Some(path) = out {
                write_json(&path, &value)?;
            }
            print_json(&value);
        }
        Command::Gradcheck {
            path,
            tol,
            instances,
            out,
            common,
        } => {
            let paths: Vec<GradPath> = if path.is_empty() {
                GradPath::ALL.to_vec()
            } else {
                path.iter().map(|p| p.parse()).collect::<Result<_>>()?
            };
            let reports = gradpaths::check_paths(&paths, instances, common.seed.unwrap_or(0), tol)?;
            let mut failed = false;
            for r in &reports {
                failed |= !r.passed();
                println!(
                    "{:<20} {}  max_rel_error={:.3e}  checked={}  skipped={}  failures={}",
                    r.path.as_str(),
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.report.max_rel_error,
                    r.report.checked,
                    r.report.skipped,
                    r.report.failures.len(),
                );
            }
            if let Some(p) = out {
                write_json(&p, &serde_json::to_value(&reports).expect("report serializes"))?;
            }
            if failed {
                eprintln!("gradcheck failed at tol {tol:e}");
                return Ok(1);
            }
        }
        Command::Render {
            config,
            from,
            domain,
            out,
            count,
            common,
        } => {
            let cfg = load_config(&config, common.seed)?;
            let model = load_model(&cfg, from)?;
            let domains = select_domains(&model, &domain)?;
            let mut written = Vec::new();
            for d in &domains {
                let samples = load_split(&cfg.paths.data, d, "test")?;
                let picked: Vec<(usize, _)> = samples.iter().enumerate().take(count).collect();
                written.extend(render_samples(&model, &picked, std::slice::from_ref(d), &out.join(d))?);
            }
            print_json(&serde_json::json!({"written": written}));
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
