use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dsvm::harness::config::RunConfig;
use dsvm::harness::presets::{list_presets, load_preset};
use dsvm::harness::scenario::{run_scenario, ScenarioError, ScenarioOutcome, WORKERS_ENV};

/// Distributed SVM training under data poisoning, with defenses.
#[derive(Parser)]
#[command(name = "dsvm", version, after_help = "Set DSVM_WORKERS to bound the worker thread count.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario from a TOML config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's top-level seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        emit_svg: bool,
    },
    /// Run one of the shipped presets.
    Preset {
        name: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        emit_svg: bool,
    },
    /// List shipped presets.
    ListPresets,
}

fn report(outcome: &ScenarioOutcome, out: &std::path::Path) {
    println!("{}: {} run(s), outputs in {}", outcome.name, outcome.runs.len(), out.display());
    for (spec, trace) in &outcome.runs {
        let last = trace.final_report();
        println!(
            "  {:<28} rounds {:>4}  global risk {:.4}  gap {:.3e}  rejections {}",
            spec.label,
            trace.rounds(),
            last.global_risk,
            last.consensus_gap,
            trace.rejection_count()
        );
    }
}

fn execute(cfg: RunConfig, seed: Option<u64>, out: PathBuf, emit_svg: bool) -> Result<(), ScenarioError> {
    let mut cfg = cfg;
    if let Some(seed) = seed {
        cfg.set_seed(seed);
    }
    let outcome = run_scenario(&cfg, Some(&out), emit_svg)?;
    report(&outcome, &out);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out, emit_svg } => {
            RunConfig::load(&config).map_err(ScenarioError::from).and_then(|cfg| execute(cfg, seed, out, emit_svg))
        }
        Command::Preset { name, seed, out, emit_svg } => {
            let out = out.unwrap_or_else(|| PathBuf::from("out").join(&name));
            load_preset(&name).map_err(ScenarioError::from).and_then(|cfg| execute(cfg, seed, out, emit_svg))
        }
        Command::ListPresets => list_presets().map_err(ScenarioError::from).map(|catalog| {
            for p in catalog {
                println!("{:<6} {}", p.name, p.description);
                println!("       runs: {}", p.runs.join(", "));
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let ScenarioError::Workers(_) = e {
                eprintln!("hint: unset {WORKERS_ENV} or give it a positive integer");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
