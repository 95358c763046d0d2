use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use handtask::config::PipelineConfig;
use handtask::error::PipelineError;
use handtask::io::{read_labeled, write_labeled, StreamReader};
use handtask::pipeline::{run, train_model, ModelFile, RunInputs};
use handtask::report::{read_rows, read_truth, render_summary, summarize};
use handtask::simgen::{gen_cycles, profiles_with_sigma, write_truth, CyclePlan, DEFAULT_CHANNEL_SIGMA};
use handtask::timeline::{render_text, CsvRowWriter};
use handtask::types::TaskLabel;

const USAGE: u8 = 2;
const DATA: u8 = 3;
const RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(name = "handtask", version, about = "Hand-task recognition and timing over sensor streams")]
struct Cli {
    /// TOML config file; any key may also be given with --set.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set tree.max_depth=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a labeled NDJSON or CSV dataset.
    Train {
        /// Labeled dataset; `-` reads standard input.
        #[arg(long)]
        data: PathBuf,
        /// Where to write the model file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a frame stream through the model and emit report rows.
    Run {
        #[arg(long)]
        model: PathBuf,
        /// Frame stream; `-` or absent reads standard input.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Labeled history that seeds the retraining dataset.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Report destination; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic labeled frame stream and its ground-truth events.
    Simulate {
        #[arg(long, default_value_t = 50)]
        cycles: usize,
        /// Defaults to the `seed` config key.
        #[arg(long)]
        seed: Option<u64>,
        /// NDJSON frames; `-` writes standard output.
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth events CSV.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Per-channel noise standard deviation.
        #[arg(long, default_value_t = DEFAULT_CHANNEL_SIGMA)]
        sigma: f64,
        /// Force a duration: `cycle:task:seconds`, e.g. `3:Joining:39`. Repeatable.
        #[arg(long, value_parser = parse_inject)]
        inject: Vec<(usize, TaskLabel, f64)>,
    },
    /// Summarize report rows, optionally against ground truth.
    Report {
        #[arg(long)]
        rows: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Text,
}

fn parse_inject(s: &str) -> Result<(usize, TaskLabel, f64), String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [cycle, task, secs] = parts[..] else {
        return Err(format!("expected cycle:task:seconds, got {s:?}"));
    };
    let cycle = cycle.trim().parse().map_err(|e| format!("cycle {cycle:?}: {e}"))?;
    let task = task.parse().map_err(|_| format!("unknown task {task:?}"))?;
    let secs = secs.trim().parse().map_err(|e| format!("seconds {secs:?}: {e}"))?;
    Ok((cycle, task, secs))
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait Classify<T> {
    fn code(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn code(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

fn pipeline_code(e: &PipelineError) -> u8 {
    match e {
        PipelineError::Config(_) | PipelineError::Sim(_) => USAGE,
        e if e.is_data_error() => DATA,
        _ => RUNTIME,
    }
}

fn pipeline<T>(r: Result<T, PipelineError>) -> Result<T, Failure> {
    r.map_err(|e| Failure { code: pipeline_code(&e), error: e.into() })
}

fn open_input(path: Option<&Path>) -> anyhow::Result<Box<dyn BufRead>> {
    match path {
        None => Ok(Box::new(io::stdin().lock())),
        Some(p) if p == Path::new("-") => Ok(Box::new(io::stdin().lock())),
        Some(p) => {
            let f = File::open(p).with_context(|| format!("cannot open {}", p.display()))?;
            Ok(Box::new(BufReader::new(f)))
        }
    }
}

fn open_output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    match path {
        None => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
        Some(p) if p == Path::new("-") => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
        Some(p) => {
            let f = File::create(p).with_context(|| format!("cannot create {}", p.display()))?;
            Ok(Box::new(BufWriter::new(f)))
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("config {}", p.display())).code(USAGE)?,
        None => PipelineConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o).with_context(|| format!("--set {o}")).code(USAGE)?;
    }
    cfg.validate().code(USAGE)?;
    Ok(cfg)
}

fn cmd_train(cfg: &PipelineConfig, data: &Path, out: &Path) -> Result<(), Failure> {
    let input = open_input(Some(data)).code(DATA)?;
    let samples = read_labeled(input, &cfg.schema).with_context(|| format!("reading {}", data.display())).code(DATA)?;
    let trained = pipeline(train_model(samples, cfg))?;
    std::fs::write(out, trained.model.to_json())
        .with_context(|| format!("writing {}", out.display()))
        .code(RUNTIME)?;

    let mut report = String::new();
    if let Some(eval) = &trained.model.snapshot.eval {
        report += &format!("holdout accuracy: {:.4}\n", eval.accuracy);
        report += &format!("mean predict latency: {:.6} ms\n", eval.mean_predict_latency * 1e3);
        report += "confusion (rows = truth, columns = predicted):\n";
        for (label, row) in TaskLabel::ALL.iter().zip(&eval.confusion) {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:>7}")).collect();
            report += &format!("  {:<20}{}\n", label.display_name(), cells.join(""));
        }
    }
    report += &format!("leaves: {}\n", trained.leaf_count);
    report += "channel contribution:\n";
    for (ch, rate) in &trained.contribution {
        report += &format!("  {:<12}{rate:.3}\n", ch.as_str());
    }
    print!("{report}");
    Ok(())
}

fn cmd_run(
    cfg: &PipelineConfig,
    model: &Path,
    input: Option<&Path>,
    history: Option<&Path>,
    format: Format,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let text = std::fs::read_to_string(model).with_context(|| format!("reading {}", model.display())).code(DATA)?;
    let model = ModelFile::from_json(&text).with_context(|| format!("model {}", model.display())).code(DATA)?;
    let history = match history {
        Some(p) => {
            let r = open_input(Some(p)).code(DATA)?;
            Some(read_labeled(r, &cfg.schema).with_context(|| format!("reading {}", p.display())).code(DATA)?)
        }
        None => None,
    };
    let reader = StreamReader::frames(open_input(input).code(DATA)?, cfg.schema.clone());
    let mut sink = open_output(out).code(RUNTIME)?;

    let inputs = RunInputs { model, history };
    let result = match format {
        Format::Csv => {
            let mut w = CsvRowWriter::new(&mut sink, true).code(RUNTIME)?;
            let mut write_err = None;
            let res = run(reader, inputs, cfg, &mut |row| {
                if write_err.is_none() {
                    write_err = w.write(row).err();
                }
            });
            if let Some(e) = write_err {
                return Err(e).code(RUNTIME);
            }
            pipeline(res)?
        }
        Format::Text => {
            let res = pipeline(run(reader, inputs, cfg, &mut |_| {}))?;
            sink.write_all(render_text(&res.rows).as_bytes()).code(RUNTIME)?;
            res
        }
    };
    sink.flush().code(RUNTIME)?;
    eprintln!(
        "frames: {}  events: {}  final model version: {}  dropped batches: {}  mean latency: {:.4} ms",
        result.frames,
        result.rows.len(),
        result.final_version,
        result.dropped_batches,
        result.mean_latency * 1e3
    );
    if let Some(acc) = result.frame_accuracy() {
        eprintln!("frame accuracy: {acc:.4}");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    cfg: &PipelineConfig,
    cycles: usize,
    seed: Option<u64>,
    out: &Path,
    truth: Option<&Path>,
    sigma: f64,
    inject: &[(usize, TaskLabel, f64)],
) -> Result<(), Failure> {
    let plan = CyclePlan { overrides: inject.to_vec(), ..CyclePlan::default() };
    let sim = gen_cycles(&plan, &profiles_with_sigma(sigma), &cfg.schema, cycles, seed.unwrap_or(cfg.seed))
        .map_err(PipelineError::from);
    let sim = pipeline(sim)?;
    let mut w = open_output(Some(out)).code(RUNTIME)?;
    write_labeled(&mut w, &sim.frames, &cfg.schema).code(RUNTIME)?;
    w.flush().code(RUNTIME)?;
    if let Some(p) = truth {
        let f = File::create(p).with_context(|| format!("cannot create {}", p.display())).code(RUNTIME)?;
        write_truth(BufWriter::new(f), &sim.truth).code(RUNTIME)?;
    }
    Ok(())
}

fn cmd_report(rows: &Path, truth: Option<&Path>) -> Result<(), Failure> {
    let rows = pipeline(read_rows(open_input(Some(rows)).code(DATA)?))?;
    let truth = match truth {
        Some(p) => Some(pipeline(read_truth(open_input(Some(p)).code(DATA)?))?),
        None => None,
    };
    print!("{}", render_summary(&summarize(&rows, truth.as_deref())));
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Train { data, out } => cmd_train(&cfg, data, out),
        Command::Run { model, input, history, format, out } => {
            cmd_run(&cfg, model, input.as_deref(), history.as_deref(), *format, out.as_deref())
        }
        Command::Simulate { cycles, seed, out, truth, sigma, inject } => {
            if *cycles == 0 {
                return Err(anyhow!("--cycles must be at least 1")).code(USAGE);
            }
            cmd_simulate(&cfg, *cycles, *seed, out, truth.as_deref(), *sigma, inject)
        }
        Command::Report { rows, truth } => cmd_report(rows, truth.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { 0 });
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
