use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use exagree_cli::llm::HttpBackend;
use exagree_cli::pipeline::{self, SynthOptions, SynthTask, TargetInput};
use exagree_cli::server::{self, ServerConfig, SearchOverrides};
use exagree_cli::{CliError, Result, RunDir};
use exagree_core::elicitation::PreferenceBackend;
use exagree_core::models::TrainConfig;
use exagree_core::saem::ExplainerKind;
use exagree_core::{DmanConfig, Exploration, MhmnConfig, RashomonConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "exagree", version, about = "Search a Rashomon set for models whose explanations match a stakeholder ranking")]
struct Cli {
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    run: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Logistic,
    Mlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExplorationArg {
    LineSearch,
    Rejection,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Default,
    Subgroup,
    TwoDominant,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task and start a run.
    Synth {
        #[arg(long, value_enum, default_value = "default")]
        task: TaskArg,
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        p: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0.2)]
        valid_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Start a run from a CSV file.
    Ingest {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        label: String,
        #[arg(long)]
        subgroup: Option<String>,
        #[arg(long, default_value_t = 0.2)]
        valid_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Train the reference model and its permutation importances.
    TrainRef {
        #[arg(long, value_enum, default_value = "logistic")]
        model: ModelKind,
        #[arg(long, value_delimiter = ',')]
        hidden: Option<Vec<usize>>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 5)]
        fis_repeats: usize,
        #[arg(long, default_value_t = 0)]
        fis_seed: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample masks inside the Rashomon set and record their attributions.
    Sample {
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, value_enum, default_value = "line-search")]
        exploration: ExplorationArg,
        /// Half-width of the rejection proposal box around the all-ones mask.
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long, default_value_t = 50_000)]
        max_attempts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit the mask-to-attribution surrogate.
    Dman {
        #[arg(long, default_value_t = 2000)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        /// Mini-batch size; 0 trains full-batch.
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 0.8)]
        min_r2: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Record a stakeholder target.
    Target {
        #[arg(long, group = "input")]
        text: Option<String>,
        #[arg(long, group = "input")]
        file: Option<PathBuf>,
        /// Comma-separated 1-based ranks, one per feature.
        #[arg(long, group = "input", value_delimiter = ',')]
        ranking: Option<Vec<usize>>,
        /// Comma-separated signs (+, - or 0) to go with --ranking.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        signs: Option<Vec<String>>,
        /// Send the text to the backend named by EXAGREE_LLM_ENDPOINT.
        #[arg(long)]
        llm: bool,
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        stakeholder: Option<String>,
    },
    /// Optimize mask heads toward a target and select the SAEM.
    Search {
        #[arg(long)]
        target: Option<String>,
        #[arg(long, default_value_t = 50)]
        heads: usize,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        lambda_sparsity: Option<f64>,
        #[arg(long)]
        lambda_diversity: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score reference and SAEM explanations against each target.
    Eval {
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5,0.75,1.0")]
        k: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare explainers and models against the ground truth.
    Audit {
        #[arg(long, value_delimiter = ',', default_value = "0.25")]
        k: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        explainers: Option<Vec<String>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Repeat sampling, surrogate fitting and search at several ε.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2")]
        epsilons: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5,0.75,1.0")]
        k: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize the run.
    Report {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the /v1 API over the runs next to --run (or --runs).
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        runs: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        llm: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rebuild the run from its manifest into --out and compare outputs.
    Replay {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn print<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn backend(enabled: bool) -> Result<Option<HttpBackend>> {
    if !enabled {
        return Ok(None);
    }
    HttpBackend::from_env()
        .map(Some)
        .ok_or_else(|| CliError::Invalid(format!("--llm needs {}", exagree_cli::llm::ENV_ENDPOINT)))
}

fn parse_signs(raw: &[String]) -> Result<Vec<i8>> {
    raw.iter()
        .map(|s| match s.trim() {
            "+" | "+1" | "1" => Ok(1),
            "-" | "-1" => Ok(-1),
            "0" | "" => Ok(0),
            other => Err(CliError::Invalid(format!("invalid sign {other:?}"))),
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.run.as_path();
    match cli.command {
        Command::Synth {
            task,
            n,
            p,
            noise,
            valid_fraction,
            seed,
            force,
        } => {
            let task = match task {
                TaskArg::Default => SynthTask::Default,
                TaskArg::Subgroup => SynthTask::Subgroup,
                TaskArg::TwoDominant => SynthTask::TwoDominant,
            };
            let opts = SynthOptions {
                task,
                n,
                p,
                noise_std: noise,
                seed,
                valid_fraction,
            };
            let run = pipeline::synth(root, &opts, force)?;
            print(&run.manifest.dataset)
        }
        Command::Ingest {
            csv,
            label,
            subgroup,
            valid_fraction,
            seed,
            force,
        } => {
            let run = pipeline::ingest(root, &csv, &label, subgroup.as_deref(), seed, valid_fraction, force)?;
            print(&run.manifest.dataset)
        }
        Command::TrainRef {
            model,
            hidden,
            epochs,
            fis_repeats,
            fis_seed,
            seed,
        } => {
            let mut cfg = match model {
                ModelKind::Logistic => TrainConfig::logistic(seed),
                ModelKind::Mlp => TrainConfig::mlp(seed),
            };
            if let (ModelKind::Mlp, Some(h)) = (model, hidden) {
                cfg.hidden = h;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let mut run = RunDir::open(root)?;
            print(&pipeline::train_reference(&mut run, cfg, fis_seed, fis_repeats)?)
        }
        Command::Sample {
            epsilon,
            samples,
            exploration,
            radius,
            max_attempts,
            seed,
        } => {
            let cfg = RashomonConfig {
                epsilon,
                n_samples: samples,
                seed,
                exploration: match exploration {
                    ExplorationArg::LineSearch => Exploration::BoundaryLineSearch,
                    ExplorationArg::Rejection => Exploration::Rejection,
                },
                proposal_radius: radius,
                max_attempts,
                ..Default::default()
            };
            let mut run = RunDir::open(root)?;
            print(&pipeline::sample(&mut run, cfg)?)
        }
        Command::Dman {
            epochs,
            lr,
            batch,
            min_r2,
            seed,
        } => {
            let cfg = DmanConfig {
                epochs,
                lr,
                batch_size: (batch > 0).then_some(batch),
                min_r2,
                seed,
                ..Default::default()
            };
            let mut run = RunDir::open(root)?;
            print(&pipeline::dman(&mut run, cfg)?)
        }
        Command::Target {
            text,
            file,
            ranking,
            signs,
            llm,
            id,
            stakeholder,
        } => {
            let input = match (text, file, ranking) {
                (Some(text), _, _) => TargetInput::Text {
                    text,
                    stakeholder_id: stakeholder,
                },
                (_, Some(f), _) => TargetInput::Text {
                    text: std::fs::read_to_string(f)?,
                    stakeholder_id: stakeholder,
                },
                (_, _, Some(ranking)) => TargetInput::Ranking {
                    ranking,
                    signs: signs.as_deref().map(parse_signs).transpose()?,
                    stakeholder_id: stakeholder,
                },
                _ => return Err(CliError::Invalid("one of --text, --file or --ranking is required".into())),
            };
            let b = backend(llm)?;
            let mut run = RunDir::open(root)?;
            let record = pipeline::target(&mut run, &input, id.as_deref(), b.as_ref().map(|b| b as &dyn PreferenceBackend))?;
            print(&record)
        }
        Command::Search {
            target,
            heads,
            epochs,
            lr,
            beta,
            lambda_sparsity,
            lambda_diversity,
            seed,
        } => {
            let overrides = SearchOverrides {
                heads: Some(heads),
                epochs: Some(epochs),
                lr,
                beta,
                lambda_sparsity,
                lambda_diversity,
                seed: Some(seed),
                ..Default::default()
            };
            let mut run = RunDir::open(root)?;
            let base = run.manifest.config.mhmn.clone().unwrap_or_else(MhmnConfig::default);
            let cfg = overrides.apply(base);
            let result = pipeline::search(&mut run, target.as_deref(), cfg, &|done, total| {
                if done % 50 == 0 || done == total {
                    eprintln!("search: {done}/{total}");
                }
            })?;
            print(&serde_json::json!({
                "target_id": result.target_id,
                "best_candidate": result.saem.best_candidate,
                "spearman_vs_target": result.saem.spearman_vs_target,
                "identity_spearman": result.saem.identity_spearman,
                "validation_loss": result.saem.validation_loss,
                "best_mask": result.saem.best_mask.values,
            }))
        }
        Command::Eval { k, .. } => {
            let mut run = RunDir::open(root)?;
            let report = pipeline::eval(&mut run, &k)?;
            print!("{}", pipeline::render_blocks(&report.blocks)?);
            Ok(())
        }
        Command::Audit { k, explainers, seed } => {
            let explainers = match explainers {
                Some(names) => names
                    .iter()
                    .map(|n| n.parse::<ExplainerKind>())
                    .collect::<Result<Vec<_>, _>>()?,
                None => ExplainerKind::all(),
            };
            let mut run = RunDir::open(root)?;
            pipeline::audit(&mut run, &k, &explainers, seed)?;
            print!("{}", std::fs::read_to_string(run.path("reports/audit.txt"))?);
            Ok(())
        }
        Command::Ablate { epsilons, k, .. } => {
            let mut run = RunDir::open(root)?;
            let report = pipeline::ablate(&mut run, &epsilons, &k, &|m| eprintln!("ablate: {m}"))?;
            print!("{}", report.render());
            Ok(())
        }
        Command::Report { .. } => {
            let mut run = RunDir::open(root)?;
            print!("{}", pipeline::report(&mut run)?);
            Ok(())
        }
        Command::Serve {
            port,
            host,
            runs,
            workers,
            llm,
            ..
        } => {
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| CliError::Invalid(format!("bad address: {e}")))?;
            let runs_root = runs.unwrap_or_else(|| server::runs_root_of(root));
            let backend = backend(llm)?.map(|b| Box::new(b) as Box<dyn PreferenceBackend + Send + Sync>);
            let cfg = ServerConfig {
                runs_root,
                workers,
                backend,
            };
            let rt = tokio::runtime::Runtime::new()?;
            eprintln!("serving {} on http://{addr}", cfg.runs_root.display());
            rt.block_on(server::serve(cfg, addr))?;
            Ok(())
        }
        Command::Replay { out, .. } => {
            let checks = pipeline::replay(root, Path::new(&out))?;
            print(&checks)?;
            if checks.iter().all(|c| c.identical) {
                Ok(())
            } else {
                Err(CliError::Internal("replay produced different artifacts".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
