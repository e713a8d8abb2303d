//! Command-line driver: dataset generation, pre-training, adaptation,
//! evaluation, and report rendering. Exit codes: 0 on success, 2 on
//! configuration errors, 3 on numerical aborts.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stal3d::autograd::{load_checkpoint, save_checkpoint};
use stal3d::error::PipelineError;
use stal3d::pipeline::{
    adapt, closed_gap_markdown, eval_csv, eval_markdown, evaluate, pretrain, write_pr_curves,
    ClosedGapFixture, EvalReport, RunConfig,
};
use stal3d::simworld::{load_dir, save_dir, Dataset, LabelMode, PairSpec};

#[derive(Parser)]
#[command(name = "stal3d", about = "Cross-domain 3D detection on synthetic point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a source/target dataset pair from a domain-pair spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n_source: Option<usize>,
        #[arg(long)]
        n_target: Option<usize>,
    },
    /// Supervised pre-training on a labeled source dataset.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Self-training plus adversarial adaptation toward a target dataset.
    Adapt {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluate on the target ground truth after each round
        /// (opens a separate eval-only labeled handle).
        #[arg(long, default_value_t = false)]
        eval: bool,
    },
    /// Evaluate a checkpoint on a labeled dataset.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render closed-gap tables and evaluation summaries.
    Report {
        /// Reference fixture of published AP triples.
        #[arg(long)]
        closed_gap_fixture: Option<PathBuf>,
        /// Evaluation JSON files (written by `eval` or `adapt --eval`).
        #[arg(long, value_delimiter = ',')]
        evals: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
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

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig, PipelineError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &PathBuf, body: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| PipelineError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    std::fs::write(path, body).map_err(|e| PipelineError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Gen {
            spec,
            out,
            seed,
            n_source,
            n_target,
        } => {
            let pair = PairSpec::load(&spec)?;
            let n_s = n_source.unwrap_or(pair.n_source);
            let n_t = n_target.unwrap_or(pair.n_target);
            let (source, target) =
                stal3d::simworld::make_domain_pair(&pair.source, &pair.target, n_s, n_t, seed);
            save_dir(&source, &out.join("source"))?;
            save_dir(&target, &out.join("target"))?;
            println!(
                "generated {} source and {} target scenes under {}",
                source.len(),
                target.len(),
                out.display()
            );
            Ok(())
        }
        Command::Pretrain {
            config,
            source,
            out,
            seed,
            epochs,
        } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(e) = epochs {
                cfg.pretrain_epochs = e;
            }
            let data = load_dir(&source, LabelMode::Load)?;
            let (params, _log) = pretrain(&data, &cfg, Some(&out))?;
            println!(
                "pretrained {} steps; checkpoint at {}",
                params.step,
                out.join("checkpoint.ckpt").display()
            );
            Ok(())
        }
        Command::Adapt {
            config,
            source,
            target,
            init,
            out,
            rounds,
            seed,
            eval,
        } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(r) = rounds {
                cfg.rounds = r;
            }
            let source_data = load_dir(&source, LabelMode::Load)?;
            // Training must not see target ground truth.
            let target_data = load_dir(&target, LabelMode::Withhold)?;
            let eval_data: Option<Dataset> = if eval {
                Some(load_dir(&target, LabelMode::Load)?)
            } else {
                None
            };
            let params = load_checkpoint(&init)?;
            let outcome = adapt(
                &source_data,
                &target_data,
                params,
                &cfg,
                Some(&out),
                eval_data.as_ref(),
            )?;
            save_checkpoint(&out.join("checkpoint.ckpt"), &outcome.params, false)?;
            for r in &outcome.rounds {
                match &r.eval {
                    Some(e) => println!(
                        "round {}: churn {:.3}, target mAP_BEV {:.2}, mAP_3D {:.2}",
                        r.round, r.churn, e.mean_ap_bev, e.mean_ap_3d
                    ),
                    None => println!("round {}: churn {:.3}", r.round, r.churn),
                }
            }
            println!("final checkpoint at {}", out.join("checkpoint.ckpt").display());
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            dataset,
            out,
        } => {
            let cfg = load_config(&config, None)?;
            let data = load_dir(&dataset, LabelMode::Load)?;
            let params = load_checkpoint(&checkpoint)?;
            let report = evaluate(&params, &data, &cfg)?;
            let body = serde_json::to_string_pretty(&report).expect("report serializes");
            write_text(&out, &body)?;
            println!(
                "mAP_BEV {:.2}, mAP_3D {:.2} -> {}",
                report.mean_ap_bev,
                report.mean_ap_3d,
                out.display()
            );
            Ok(())
        }
        Command::Report {
            closed_gap_fixture,
            evals,
            out,
        } => {
            std::fs::create_dir_all(&out).map_err(|e| PipelineError::Io {
                path: out.display().to_string(),
                source: e,
            })?;
            if let Some(path) = closed_gap_fixture {
                let fixture = ClosedGapFixture::load(&path)?;
                let md = closed_gap_markdown(&fixture);
                write_text(&out.join("closed_gap.md"), &md)?;
                println!("closed-gap table -> {}", out.join("closed_gap.md").display());
            }
            if !evals.is_empty() {
                let mut loaded: Vec<(String, EvalReport)> = Vec::new();
                for path in &evals {
                    let body = std::fs::read_to_string(path).map_err(|e| PipelineError::Io {
                        path: path.display().to_string(),
                        source: e,
                    })?;
                    let report: EvalReport =
                        serde_json::from_str(&body).map_err(|e| {
                            PipelineError::Config(stal3d::error::ConfigError::Parse {
                                path: path.display().to_string(),
                                source: e,
                            })
                        })?;
                    let name = path
                        .file_stem()
                        .map(|s| s.to_string_lossy().to_string())
                        .unwrap_or_else(|| "eval".into());
                    loaded.push((name, report));
                }
                let mut md = String::from("# Evaluation summary\n\n");
                for (name, report) in &loaded {
                    md.push_str(&eval_markdown(name, report));
                    md.push('\n');
                }
                write_text(&out.join("evals.md"), &md)?;
                write_text(&out.join("evals.csv"), &eval_csv(&loaded))?;
                for (name, report) in &loaded {
                    write_pr_curves(report, &out.join("pr_curves"), name).map_err(|e| {
                        PipelineError::Io {
                            path: out.display().to_string(),
                            source: e,
                        }
                    })?;
                }
                println!("evaluation summaries -> {}", out.display());
            }
            Ok(())
        }
    }
}
