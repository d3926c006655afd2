use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pipescope_cli::pipeline::{RunOptions, Stage};
use pipescope_cli::{output_dir, parse_stages, prepare, train_junctions, CliError};

#[derive(Parser)]
#[command(name = "pipescope", version, about = "Acoustic pipe network discovery and leak imaging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Image on the scenario network instead of the discovered one.
    #[arg(long)]
    ground_truth_topology: bool,
    /// Also write every raw probe repeat under probe/raw.
    #[arg(long)]
    dump_traces: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run several stages in order (all by default).
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of simulate,probe,discover,image,detect.
        #[arg(long)]
        stages: Option<String>,
    },
    Simulate(Common),
    Probe(Common),
    Discover(Common),
    Image(Common),
    Detect(Common),
    /// Fit junction class curves from the scenario's training sweep.
    TrainJunctions {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run_stages(common: &Common, stages: Vec<Stage>) -> Result<(), CliError> {
    let scn = prepare(&common.scenario, common.seed)?;
    let opts = RunOptions {
        out: output_dir(&scn, common.out.as_deref()),
        stages,
        ground_truth_topology: common.ground_truth_topology,
        dump_traces: common.dump_traces,
    };
    let report = pipescope_cli::run(&scn, &opts)?;
    for leak in &report.leaks {
        let h = &leak.hypothesis;
        println!(
            "leak candidate on {} at {:.3} m (prominence {:.1} dB{})",
            h.segment_name,
            h.arc,
            h.prominence_db,
            if h.low_confidence { ", low confidence" } else { "" }
        );
    }
    println!("report written to {}", opts.out.join(pipescope_cli::pipeline::layout::REPORT).display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { common, stages } => {
            let stages = match stages {
                Some(s) => parse_stages(&s)?,
                None => Stage::ALL.to_vec(),
            };
            run_stages(&common, stages)
        }
        Command::Simulate(c) => run_stages(&c, vec![Stage::Simulate]),
        Command::Probe(c) => run_stages(&c, vec![Stage::Probe]),
        Command::Discover(c) => run_stages(&c, vec![Stage::Discover]),
        Command::Image(c) => run_stages(&c, vec![Stage::Image]),
        Command::Detect(c) => run_stages(&c, vec![Stage::Detect]),
        Command::TrainJunctions { scenario, out, seed } => {
            let scn = prepare(&scenario, seed)?;
            let out = output_dir(&scn, out.as_deref());
            let text = train_junctions(&scn, &out)?;
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
