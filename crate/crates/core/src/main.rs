use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dropmuon::costmodel::CostRegime;
use dropmuon::harness::{self, load_json_arg, HarnessError};
use dropmuon::sampling::SamplingScheme;
use dropmuon::verify::{self, Suite};

#[derive(Parser)]
#[command(name = "dropmuon", version, about = "Layer-subset LMO optimizer: experiments, cost model and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write CSV files plus summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides "out" in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cost-optimal sampling probabilities for a smoothness table.
    OptimalProbs {
        /// Table JSON, inline or a file path.
        #[arg(long)]
        table: String,
        /// Cost parameters JSON, inline or a file path.
        #[arg(long)]
        cost: String,
        #[arg(long, default_value = "smooth")]
        regime: CostRegime,
    },
    /// Run verification checks; exits nonzero if any fails.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
        /// Sample count for the marginal checks.
        #[arg(long)]
        draws: Option<usize>,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic against empirical marginals of a sampling scheme.
    Marginals {
        /// Scheme JSON, inline or a file path.
        #[arg(long)]
        scheme: String,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Predicted total cost of a scheme.
    Cost {
        #[arg(long)]
        scheme: String,
        #[arg(long)]
        cost: String,
        #[arg(long)]
        table: String,
        #[arg(long, default_value = "smooth")]
        regime: CostRegime,
        /// Initial suboptimality.
        #[arg(long, default_value_t = 1.0)]
        delta0: f64,
        /// Target accuracy.
        #[arg(long, default_value_t = 1.0)]
        eps: f64,
    },
}

fn print_json(value: &impl serde::Serialize) -> Result<(), HarnessError> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(", ")
}

fn fmt_z(z: Option<f64>) -> String {
    z.map_or_else(|| "inf".to_string(), |z| format!("{z:+.2}"))
}

fn dispatch(cmd: Command) -> Result<bool, HarnessError> {
    match cmd {
        Command::Run { config, seed, out } => {
            let summary = harness::cmd_run(&config, seed, out.as_deref())?;
            for r in &summary.runs {
                eprintln!("{} seed {}: f {:.6e} -> {:.6e}", r.variant, r.seed, r.initial_f, r.final_f);
            }
            for s in &summary.speedups {
                let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
                eprintln!(
                    "{} vs {} at target {:e}: arithmetic {} geometric {} predicted {}",
                    s.variant,
                    s.baseline,
                    s.target,
                    show(s.arithmetic_mean),
                    show(s.geometric_mean),
                    show(s.predicted)
                );
            }
            Ok(true)
        }
        Command::OptimalProbs { table, cost, regime } => {
            let report = harness::cmd_optimal_probs(&table, &cost, regime)?;
            eprintln!("p = ({})", fmt_vec(&report.p));
            eprintln!("verdict: {}", report.verdict);
            print_json(&report)?;
            Ok(true)
        }
        Command::Verify { suite, draws, out } => {
            let report = verify::run_suite(suite, draws);
            for c in &report.checks {
                eprintln!("{} {} ({:.1}s)", if c.passed { "PASS" } else { "FAIL" }, c.name, c.elapsed_seconds);
                for f in &c.failures {
                    eprintln!("    {f}");
                }
            }
            if let Some(path) = out {
                let text = serde_json::to_string_pretty(&report)? + "\n";
                std::fs::write(&path, text)
                    .map_err(|source| HarnessError::Io { path: path.display().to_string(), source })?;
            }
            print_json(&report)?;
            Ok(report.passed)
        }
        Command::Marginals { scheme, draws, seed } => {
            let scheme: SamplingScheme = load_json_arg(&scheme)?;
            scheme.validate().map_err(|e| HarnessError::Config { path: "scheme".into(), message: e.to_string() })?;
            let rows = verify::empirical_marginals(&scheme, draws, seed);
            eprintln!("layer  F analytic  F empirical    z_F  Q analytic  Q empirical    z_Q");
            for r in &rows {
                eprintln!(
                    "{:>5}  {:>10.6}  {:>11.6}  {:>5}  {:>10.6}  {:>11.6}  {:>5}",
                    r.layer,
                    r.f_analytic,
                    r.f_empirical,
                    fmt_z(r.f_z),
                    r.q_analytic,
                    r.q_empirical,
                    fmt_z(r.q_z)
                );
            }
            print_json(&rows)?;
            Ok(true)
        }
        Command::Cost { scheme, cost, table, regime, delta0, eps } => {
            print_json(&harness::cmd_cost(&scheme, &cost, &table, regime, delta0, eps)?)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
