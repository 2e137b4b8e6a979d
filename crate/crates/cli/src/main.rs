mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

use tendist::explain;
use tendist::inputs::random_inputs;
use tendist::io::{from_json, read_binary, to_json, write_binary};
use tendist::sim::trace::Stats;
use tendist::sim::Simulator;
use tendist::tensor::{lower_to_cin, sequential_evaluate, DenseTensor};

use config::{Problem, ProblemArgs};

#[derive(Parser, Debug)]
#[command(name = "tendist", version, about = "Distributed tensor algebra on a simulated machine")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Place the inputs, run the schedule and report communication.
    Run(RunArgs),
    /// Print the placement statements and the statement after each command.
    Explain {
        #[command(flatten)]
        problem: ProblemArgs,
    },
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Compare against the sequential evaluator.
    #[arg(long)]
    verify: bool,
    /// Stats JSON path.
    #[arg(long, default_value = "stats.json")]
    stats: PathBuf,
    /// Per-edge CSV path.
    #[arg(long, value_name = "FILE")]
    edges_csv: Option<PathBuf>,
    /// Write every communication event, one per line.
    #[arg(long, value_name = "FILE")]
    dump_trace: Option<PathBuf>,
    /// Worker threads for task bodies.
    #[arg(long, env = "TENDIST_WORKERS", default_value_t = 1)]
    workers: usize,
    /// Also print the lowering pipeline.
    #[arg(long)]
    explain: bool,
    /// Load an input instead of generating it; `.json` or binary.
    #[arg(long = "input", value_name = "NAME=FILE")]
    inputs: Vec<String>,
    /// Write the result tensor; `.json` or binary.
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
}

enum Failure {
    Config(anyhow::Error),
    Verify(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Config(e)
    }
}

fn is_json(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "json")
}

fn load_tensor(p: &Path) -> Result<DenseTensor> {
    let ctx = || format!("reading {}", p.display());
    if is_json(p) {
        from_json(&std::fs::read_to_string(p).with_context(ctx)?).with_context(ctx)
    } else {
        read_binary(File::open(p).with_context(ctx)?).with_context(ctx)
    }
}

fn save_tensor(t: &DenseTensor, p: &Path) -> Result<()> {
    let ctx = || format!("writing {}", p.display());
    if is_json(p) {
        std::fs::write(p, to_json(t)).with_context(ctx)
    } else {
        write_binary(t, BufWriter::new(File::create(p).with_context(ctx)?)).with_context(ctx)
    }
}

fn explain_text(p: &Problem) -> Result<String> {
    let mut out = String::new();
    for (name, d) in &p.dists {
        out.push_str(&format!("# placement {name}: {}\n{}\n", d.spec(), explain::placement(d)));
    }
    if let Some(stmt) = &p.stmt {
        out.push_str(&explain::pipeline(stmt, &p.schedule, &p.machine).map_err(|e| anyhow!("{e}"))?);
    }
    Ok(out)
}

fn run(a: &RunArgs) -> Result<(), Failure> {
    let p = a.problem.resolve(false)?;
    let stmt = p.stmt.as_ref().expect("run resolves a statement");
    if a.explain {
        print!("{}", explain_text(&p)?);
    }
    let scheduled = p
        .schedule
        .apply(lower_to_cin(stmt), Some(&p.machine))
        .map_err(|e| anyhow!("schedule: {e}"))?;
    let mut inputs = random_inputs(stmt, a.problem.seed);
    for item in &a.inputs {
        let (name, path) = item
            .split_once('=')
            .ok_or_else(|| anyhow!("--input {item:?} is not NAME=FILE"))?;
        if !inputs.contains_key(name) {
            return Err(anyhow!("--input names {name}, which is not an input").into());
        }
        inputs.insert(name.to_string(), load_tensor(Path::new(path))?);
    }
    let sim = Simulator::new(p.machine.clone()).with_workers(a.workers);
    let result = sim
        .run(&scheduled, &p.dists, &inputs)
        .map_err(|e| anyhow!("simulation: {e}"))?;
    let out_name = stmt.lhs().name();
    let got = &result.outputs[out_name];

    let stats = result.trace.stats();
    let mut doc = stats.to_json(p.label.clone());
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    doc["timestamp"] = stamp.into();
    let text = serde_json::to_string_pretty(&doc).map_err(|e| anyhow!("{e}"))?;
    std::fs::write(&a.stats, text + "\n").with_context(|| format!("writing {}", a.stats.display()))?;
    if let Some(path) = &a.edges_csv {
        write_edges(&stats, path)?;
    }
    if let Some(path) = &a.dump_trace {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("writing {}", path.display()))?);
        for e in &result.trace.events {
            writeln!(w, "{e}").map_err(|e| anyhow!("{e}"))?;
        }
        w.flush().map_err(|e| anyhow!("{e}"))?;
    }
    if let Some(path) = &a.output {
        save_tensor(got, path)?;
    }
    let t = &stats.totals;
    println!(
        "messages={} elements={} copies={} reductions={} placement_elements={} max_memory={}",
        t.messages,
        t.elements,
        t.copy_messages,
        t.reduce_messages,
        t.placement_elements,
        result.trace.max_memory()
    );
    if a.verify {
        let want = sequential_evaluate(stmt, &inputs).map_err(|e| anyhow!("{e}"))?;
        let diff = got.max_abs_diff(&want);
        if got.bit_eq(&want) {
            println!("PASS max_abs_diff={diff}");
        } else {
            println!("FAIL max_abs_diff={diff}");
            return Err(Failure::Verify(format!("{out_name} differs from the sequential result")));
        }
    }
    Ok(())
}

fn write_edges(stats: &Stats, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["src", "dst", "messages", "elements"])?;
    for e in &stats.per_edge {
        w.write_record([e.src.to_string(), e.dst.to_string(), e.messages.to_string(), e.elements.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.cmd {
        Cmd::Run(a) => run(a),
        Cmd::Explain { problem } => problem
            .resolve(true)
            .and_then(|p| explain_text(&p))
            .map(|t| print!("{t}"))
            .map_err(Failure::Config),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
