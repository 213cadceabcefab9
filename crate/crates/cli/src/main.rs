use std::path::PathBuf;
use std::process::ExitCode;

use aif_core::experiments::{
    load_outputs, summarize_by_variant, write_outputs, Scenario, ScenarioContext, Summary,
};
use aif_core::genmodel::{fk_training_set, AnalyticFk, GprModel, GprParams};
use aif_core::AifError;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "aif-arm", version, about = "Active-inference planar arm experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every trial of a scenario file and write logs to a directory.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        /// Suppress the summary table.
        #[arg(long)]
        quiet: bool,
    },
    /// Print the summary table of a previous run.
    Summarize { dir: PathBuf },
    /// Fit a GPR forward model to the analytic kinematics and save it.
    FitGpr {
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1.0,1.0")]
        links: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "-1.5,0.0")]
        lower: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1.5,2.7")]
        upper: Vec<f64>,
        #[arg(long, default_value_t = GprParams::default().length_scale)]
        length_scale: f64,
    },
}

fn print_table(summaries: &[(String, Summary)]) {
    println!(
        "{:<28} {:>6} {:>9} {:>12} {:>12} {:>12} {:>12} {:>10}",
        "scenario", "trials", "converged", "joint_mean", "joint_std", "ee_mean", "ee_std", "vfe_final"
    );
    for (label, s) in summaries {
        println!(
            "{:<28} {:>6} {:>9} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>10.4}",
            label,
            s.trials,
            s.converged,
            s.mean_final_joint_err_rad,
            s.std_final_joint_err_rad,
            s.mean_final_ee_err_m,
            s.std_final_ee_err_m,
            s.mean_vfe_final
        );
        if let Some(t) = s.mean_tracking_err_rad {
            println!("{:<28} mean tracking error {t:.6} rad", "");
        }
    }
}

fn labelled(scenario: &str, records: &[aif_core::experiments::TrialRecord]) -> Result<Vec<(String, Summary)>, AifError> {
    Ok(summarize_by_variant(scenario, records)?
        .into_iter()
        .map(|(variant, s)| {
            let label = if variant.is_empty() {
                scenario.to_string()
            } else {
                format!("{scenario}/{variant}")
            };
            (label, s)
        })
        .collect())
}

fn execute(cli: Cli) -> Result<(), AifError> {
    match cli.command {
        Command::Run {
            scenario,
            out,
            seed,
            trials,
            quiet,
        } => {
            let mut s = Scenario::load(&scenario)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            if let Some(trials) = trials {
                s.trials = trials;
            }
            let ctx = ScenarioContext::new(&s)?;
            log::info!("running {} ({} trials, {} steps)", s.name, s.trials, s.duration);
            let records = ctx.run()?;
            let name = s.name.to_string();
            write_outputs(&out, &name, &records)?;
            if !quiet {
                print_table(&labelled(&name, &records)?);
            }
        }
        Command::Summarize { dir } => {
            let (name, records) = load_outputs(&dir)?;
            print_table(&labelled(&name, &records)?);
        }
        Command::FitGpr {
            samples,
            out,
            links,
            lower,
            upper,
            length_scale,
        } => {
            let fk = AnalyticFk::with_links(&links)?;
            let (x, y) = fk_training_set(&fk, samples, &lower, &upper)?;
            let params = GprParams {
                length_scale,
                ..GprParams::default()
            };
            GprModel::fit(x, y, params)?.save(&out)?;
            log::info!("wrote {} samples to {}", samples, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_divergence() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
