use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedbench::config::RawSettings;
use fedbench::run::run_experiment;
use fedbench::tables::{render_plotdata, render_transition_csv, render_transition_text, transition_table};
use fedbench::{classify, Failure};

/// Session-churn federated learning benchmark.
#[derive(Parser)]
#[command(name = "fedbench", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run experiments; each writes metrics.csv, summary.json, and
    /// bound_report.json into its output directory.
    Run(RunCommand),
    /// Tabulate post-transition accuracy from one or more metrics files.
    Transitions(TransitionsCommand),
    /// Export train-phase accuracy curves as a long-format CSV.
    Plotdata(PlotdataCommand),
}

#[derive(Args)]
struct RunCommand {
    /// Optional key=value settings file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,

    #[command(flatten)]
    settings: RawSettings,
}

#[derive(Args)]
struct TransitionsCommand {
    /// Metrics files to combine; variants may be spread across files.
    #[arg(long, required = true, num_args = 1..)]
    metrics: Vec<PathBuf>,

    /// Rounds averaged at the start of each session. [default: 10]
    #[arg(long)]
    window: Option<usize>,

    /// Where the CSV table goes. [default: transitions.csv]
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PlotdataCommand {
    /// Metrics file to export.
    #[arg(long)]
    metrics: PathBuf,

    /// Where the plot CSV goes. [default: plotdata.csv]
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(cmd) => cmd_run(cmd),
        Command::Transitions(cmd) => cmd_transitions(cmd),
        Command::Plotdata(cmd) => cmd_plotdata(cmd),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("fedbench: {}", failure.message());
            ExitCode::from(failure.exit_code())
        }
    }
}

fn cmd_run(cmd: RunCommand) -> Result<(), Failure> {
    let mut raw = cmd.settings;
    if let Some(path) = &cmd.config {
        let file = RawSettings::from_file(path).map_err(|e| Failure::Config(e.to_string()))?;
        raw = raw.or(file);
    }
    let settings = raw.resolve().map_err(|e| Failure::Config(e.to_string()))?;
    let artifacts = run_experiment(&settings).map_err(classify)?;
    for a in &artifacts {
        let scale = match a.similarity_scale {
            Some(r) => format!(" R={r}"),
            None => String::new(),
        };
        println!(
            "{} variant={} seed={}{} final_test_accuracy={:.4}",
            a.dir.display(),
            a.variant.name(),
            a.seed,
            scale,
            a.final_test_accuracy,
        );
    }
    Ok(())
}

fn cmd_transitions(cmd: TransitionsCommand) -> Result<(), Failure> {
    let window = cmd.window.unwrap_or(10);
    if window < 1 {
        return Err(Failure::Config("window must be at least 1".into()));
    }
    let mut rows = Vec::new();
    for path in &cmd.metrics {
        let mut part = fedbench::metrics::read_metrics(path)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        rows.append(&mut part);
    }
    let table = transition_table(&rows, window).map_err(|e| Failure::Runtime(e.to_string()))?;
    let output = cmd.output.unwrap_or_else(|| PathBuf::from("transitions.csv"));
    std::fs::write(&output, render_transition_csv(&table))
        .map_err(|e| Failure::Runtime(format!("{}: {e}", output.display())))?;
    print!("{}", render_transition_text(&table));
    println!("wrote {}", output.display());
    Ok(())
}

fn cmd_plotdata(cmd: PlotdataCommand) -> Result<(), Failure> {
    let rows = fedbench::metrics::read_metrics(&cmd.metrics)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", cmd.metrics.display())))?;
    let text = render_plotdata(&rows);
    let output = cmd.output.unwrap_or_else(|| PathBuf::from("plotdata.csv"));
    std::fs::write(&output, &text)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", output.display())))?;
    println!("wrote {} rows to {}", text.lines().count() - 1, output.display());
    Ok(())
}
