//! `kronnet`: run named experiments and gradient-flow checks.
//!
//! Exit codes: 0 success, 2 configuration error, 3 non-finite loss,
//! 4 failed theory check, 1 anything else (I/O).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kronnet::experiment::{in_pool, run_experiment, ExperimentConfig, EXPERIMENTS};
use kronnet::theory::{run_check, write_check_report, CheckSizes, TheoryCheck};
use kronnet::KronError;

#[derive(Parser)]
#[command(name = "kronnet", version, about = "Kronecker networks with Rowdy activations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every scheme of a named experiment for every seed.
    Run {
        /// Named experiment; optional when --config is given.
        experiment: Option<String>,
        /// Start from a configuration file (e.g. saved print-config output).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one key, `section.key=value`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one gradient-flow check and write a CSV report.
    Theory {
        /// early-dominance, matrices-fd, dldt-identity, lambda0, cond-k or appendix-b.
        check: String,
        /// Number of seeds (0..S) or a comma-separated seed list.
        #[arg(long, default_value = "20")]
        seeds: String,
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
    },
    /// Print the fully resolved configuration of a named experiment.
    PrintConfig {
        experiment: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// List the named experiments and theory checks.
    List,
}

enum Failure {
    Error(KronError),
    /// Theory rows that did not pass.
    Check(usize),
}

impl From<KronError> for Failure {
    fn from(e: KronError) -> Self {
        Failure::Error(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(n)) => {
            eprintln!("kronnet: {n} check row(s) failed");
            ExitCode::from(4)
        }
        Err(Failure::Error(e)) => {
            eprintln!("kronnet: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &KronError) -> u8 {
    match e {
        KronError::Config(_) | KronError::UnknownName { .. } | KronError::Precondition(_) => 2,
        KronError::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn resolve_config(
    experiment: Option<&str>,
    file: Option<&PathBuf>,
    overrides: &[String],
) -> Result<ExperimentConfig, KronError> {
    let mut cfg = match (file, experiment) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| KronError::Config(format!("cannot read {}: {e}", path.display())))?;
            ExperimentConfig::from_toml(&text)?
        }
        (None, Some(name)) => ExperimentConfig::named(name)?,
        (None, None) => return Err(KronError::Config("give an experiment name or --config".into())),
    };
    if let (Some(_), Some(name)) = (file, experiment) {
        if cfg.run.experiment != name {
            return Err(KronError::Config(format!(
                "config file is for `{}`, not `{name}`",
                cfg.run.experiment
            )));
        }
    }
    for o in overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, KronError> {
    let bad = || KronError::Config(format!("invalid seed list `{s}`"));
    if s.contains(',') {
        s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
    } else {
        let n: u64 = s.trim().parse().map_err(|_| bad())?;
        Ok((0..n).collect())
    }
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run {
            experiment,
            config,
            overrides,
            seeds,
            out,
        } => {
            let mut cfg = resolve_config(experiment.as_deref(), config.as_ref(), &overrides)?;
            if let Some(s) = seeds {
                if s.is_empty() {
                    return Err(KronError::Config("empty seed list".into()).into());
                }
                cfg.run.seeds = s;
            }
            if let Some(dir) = out {
                cfg.run.out_dir = dir.to_string_lossy().into_owned();
            }
            let outcome = run_experiment(&cfg)?;
            println!(
                "{}: {} run(s) written to {}",
                cfg.run.experiment,
                outcome.runs.len(),
                outcome.out_dir.display()
            );
            for r in &outcome.runs {
                println!(
                    "  {:<8} seed {:<3} final loss {:.6e}{}",
                    r.scheme.to_string(),
                    r.seed,
                    r.record.final_loss,
                    r.record.final_metric.map(|m| format!("  metric {m:.6e}")).unwrap_or_default()
                );
            }
            if let Some(r) = outcome.first_nonfinite() {
                let iteration = r.record.nonfinite_at.unwrap_or_default();
                eprintln!("kronnet: {} seed {} stopped early", r.scheme, r.seed);
                return Err(KronError::NonFinite { iteration }.into());
            }
            Ok(())
        }
        Command::Theory {
            check,
            seeds,
            out,
            n,
            k,
            m,
            d,
        } => {
            let check: TheoryCheck = check.parse()?;
            let seeds = parse_seeds(&seeds)?;
            let sizes = CheckSizes { n, k, m, d };
            let rows = in_pool(|| run_check(check, &seeds, sizes))??;
            write_check_report(&out, &rows)?;
            let failed = rows.iter().filter(|r| !r.pass).count();
            for r in rows.iter().filter(|r| r.seed.is_none()) {
                println!(
                    "{check} {}: {} (lhs {:.6e}, rhs {:.6e})",
                    r.quantity,
                    if r.pass { "pass" } else { "FAIL" },
                    r.lhs,
                    r.rhs
                );
            }
            println!("{check}: {} row(s), {failed} failed, report {}", rows.len(), out.display());
            if failed > 0 {
                return Err(Failure::Check(failed));
            }
            Ok(())
        }
        Command::PrintConfig {
            experiment,
            overrides,
        } => {
            let cfg = resolve_config(Some(&experiment), None, &overrides)?;
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
        Command::List => {
            println!("experiments:");
            for e in EXPERIMENTS {
                println!("  {e}");
            }
            println!("theory checks:");
            for c in TheoryCheck::ALL {
                println!("  {c}");
            }
            Ok(())
        }
    }
}
