use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use graphsolve::collect::{install, load_problems, run_collection};
use graphsolve::harness::{load_dataset, read_runs, run_benchmark, write_runs, Report};
use graphsolve::knowledge::write_experience_file;
use graphsolve::normalize::RawQuestion;
use graphsolve::orchestrator::{write_trace_file, Pipeline, PipelineConfig};

#[derive(Parser)]
#[command(name = "graphsolve", version, about = "Answer graph reasoning questions with a team of LLM agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one question read from a text file.
    Solve {
        #[arg(long)]
        question_file: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for the trace file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve every `{id, question}` line of a JSONL file.
    SolveBatch {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Build the experience base from training and validation sets.
    Collect {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_exp: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Run a benchmark dataset and write traces and reports.
    Bench {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Rebuild a report from persisted benchmark runs.
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// Print JSON instead of the text table.
        #[arg(long)]
        json: bool,
    },
    /// Embed the configured documentation and experiences and save the index.
    Index {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

async fn build(config: Option<&Path>) -> Result<Pipeline> {
    let config = load_config(config)?;
    Ok(Pipeline::from_config(config).await?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_questions(path: &Path) -> Result<Vec<RawQuestion>> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(line).with_context(|| format!("line {}", n + 1))?;
        let Some(question) = v.get("question").and_then(|q| q.as_str()) else {
            bail!("line {}: missing `question`", n + 1);
        };
        let id = match v.get("id") {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(other) => other.to_string(),
            None => format!("{:05}", out.len()),
        };
        out.push(RawQuestion::new(question).with_id(id));
    }
    Ok(out)
}

async fn run(command: Command) -> Result<bool> {
    match command {
        Command::Solve {
            question_file,
            config,
            out,
        } => {
            let text = std::fs::read_to_string(&question_file)
                .with_context(|| format!("reading {}", question_file.display()))?;
            let pipeline = build(config.as_deref()).await?;
            let (answer, trace) = pipeline.solve(&RawQuestion::new(text.trim())).await;
            if let Some(dir) = out {
                let path = write_trace_file(&dir, &trace, 0, &trace)?;
                eprintln!("trace written to {}", path.display());
            }
            println!("{}", answer.text);
            Ok(!trace.infrastructure_failure)
        }
        Command::SolveBatch {
            dataset,
            config,
            out,
            parallel,
        } => {
            let questions = read_questions(&dataset)?;
            let pipeline = build(config.as_deref()).await?;
            let parallel = parallel.unwrap_or(pipeline.config().parallelism);
            let results = pipeline.solve_batch(&questions, parallel).await;
            let mut ok = true;
            for (i, (answer, trace)) in results.iter().enumerate() {
                write_trace_file(&out, trace, i, trace)?;
                ok &= !trace.infrastructure_failure;
                println!(
                    "{}\t{}",
                    trace.question_id.as_deref().unwrap_or("-"),
                    serde_json::to_string(&answer.text)?
                );
            }
            Ok(ok)
        }
        Command::Collect {
            train,
            valid,
            out,
            n_exp,
            config,
            parallel,
        } => {
            let train = load_problems(&train)?;
            let valid = load_problems(&valid)?;
            let pipeline = build(config.as_deref()).await?;
            let n_exp = n_exp.unwrap_or(pipeline.config().n_exp);
            if n_exp == 0 {
                bail!("--n-exp must be positive");
            }
            let parallel = parallel.unwrap_or(pipeline.config().parallelism);
            let report = run_collection(&train, &valid, &pipeline, n_exp, parallel).await;
            std::fs::create_dir_all(&out)?;
            write_experience_file(out.join("experiences.json"), &report.selected)?;
            write_text(
                &out.join("collection.json"),
                &(serde_json::to_string_pretty(&report)? + "\n"),
            )?;
            let mut kb = pipeline.knowledge().write().await;
            install(&mut kb, &report.selected).await?;
            kb.save(out.join("index"))?;
            println!(
                "{} candidates, {} experiences selected",
                report.pool.len(),
                report.selected.len()
            );
            Ok(true)
        }
        Command::Bench {
            dataset,
            config,
            out,
            parallel,
        } => {
            let items = load_dataset(&dataset)?;
            let pipeline = build(config.as_deref()).await?;
            let parallel = parallel.unwrap_or(pipeline.config().parallelism);
            let (report, runs) = run_benchmark(&pipeline, &items, parallel).await;
            write_runs(out.join("runs"), &runs)?;
            write_text(&out.join("report.json"), &report.to_json()?)?;
            write_text(&out.join("report.txt"), &report.to_table())?;
            print!("{}", report.to_table());
            Ok(report.infrastructure_failures == 0)
        }
        Command::Report { runs, json } => {
            let report = Report::from_runs(&read_runs(&runs)?);
            if json {
                print!("{}", report.to_json()?);
            } else {
                print!("{}", report.to_table());
            }
            Ok(true)
        }
        Command::Index { config, out } => {
            let config = load_config(config.as_deref())?;
            let kb = config.build_knowledge().await?;
            kb.save(&out)?;
            println!(
                "{} documentation entries, {} experiences",
                kb.doc_count(),
                kb.experience_count()
            );
            Ok(true)
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli.command).await {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("infrastructure failure; see traces");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
