//! Batch front end: run, sweep and validate experiment configs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use impulse_mfg::config::ExperimentConfig;
use impulse_mfg::error::Error;
use impulse_mfg::io;
use impulse_mfg::runner;

#[derive(Parser)]
#[command(name = "impulse-mfg", about = "Solvers for Fokker-Planck equations of jumping particles, impulse-control QVI and mean field games on torus grids", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a config and write its artifact directory.
    Run {
        config: PathBuf,
        /// Validate and build inputs, write nothing.
        #[arg(long)]
        dry_run: bool,
        /// Output directory (defaults to the config's [output].dir or
        /// "<config stem>_out").
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rerun a config once per parameter value; writes one subdirectory per
    /// value plus a combined sweep.csv.
    Sweep {
        config: PathBuf,
        /// One of: epsilon, n, nt, N, theta.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a config; exit 0 when well-formed.
    Validate { config: PathBuf },
}

fn out_dir_for(config: &PathBuf, cfg: &ExperimentConfig, cli_out: Option<PathBuf>) -> PathBuf {
    if let Some(o) = cli_out {
        return o;
    }
    if let Some(out) = &cfg.output {
        return out.dir.clone();
    }
    let stem = config
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "run".into());
    PathBuf::from(format!("{stem}_out"))
}

fn thread_cap() -> usize {
    std::env::var("IMPULSE_MFG_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn exit_code_for(err: &Error) -> ExitCode {
    match err {
        Error::Config(_) | Error::InvalidInput(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, dry_run, out } => {
            let (cfg, base) = match ExperimentConfig::from_path(&config) {
                Ok(v) => v,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return ExitCode::from(2);
                }
            };
            if dry_run {
                return match cfg.validate(&base) {
                    Ok(()) => {
                        println!("ok: {} validates", config.display());
                        ExitCode::SUCCESS
                    }
                    Err(e) => {
                        eprintln!("config error: {e}");
                        ExitCode::from(2)
                    }
                };
            }
            let out_dir = out_dir_for(&config, &cfg, out);
            match runner::run(&cfg, &base, &out_dir) {
                Ok(outcome) => {
                    let summary = outcome.out_dir.join("summary.txt");
                    if let Ok(text) = std::fs::read_to_string(&summary) {
                        print!("{text}");
                    }
                    if outcome.report.pass {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    exit_code_for(&e)
                }
            }
        }
        Command::Sweep { config, param, values, out } => {
            let (cfg, base) = match ExperimentConfig::from_path(&config) {
                Ok(v) => v,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return ExitCode::from(2);
                }
            };
            if values.is_empty() {
                eprintln!("config error: empty sweep values");
                return ExitCode::from(2);
            }
            if !runner::SWEEP_PARAMS.contains(&param.as_str()) {
                eprintln!(
                    "config error: unknown sweep parameter '{param}' (expected one of {:?})",
                    runner::SWEEP_PARAMS
                );
                return ExitCode::from(2);
            }
            let out_root = out_dir_for(&config, &cfg, out);
            if let Err(e) = std::fs::create_dir_all(&out_root) {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
            let cap = thread_cap();
            let mut results: Vec<Option<Result<runner::RunOutcome, Error>>> =
                (0..values.len()).map(|_| None).collect();
            for chunk_start in (0..values.len()).step_by(cap) {
                let chunk_end = (chunk_start + cap).min(values.len());
                let slots = &mut results[chunk_start..chunk_end];
                let vals = &values[chunk_start..chunk_end];
                std::thread::scope(|scope| {
                    for (slot, &value) in slots.iter_mut().zip(vals) {
                        let cfg = &cfg;
                        let base = &base;
                        let out_root = &out_root;
                        let param = &param;
                        scope.spawn(move || {
                            *slot = Some(runner::run_sweep_entry(
                                cfg, base, out_root, param, value,
                            ));
                        });
                    }
                });
            }
            let mut rows = Vec::new();
            let mut all_pass = true;
            for (value, result) in values.iter().zip(results) {
                match result.expect("sweep slot filled") {
                    Ok(outcome) => {
                        all_pass &= outcome.report.pass;
                        let get = |k: &str| {
                            outcome
                                .report
                                .metrics
                                .get(k)
                                .cloned()
                                .unwrap_or_else(|| "nan".into())
                        };
                        rows.push(vec![
                            param.clone(),
                            io::fmt_f64(*value),
                            get("d_identity_finest"),
                            get("int_a_m_finest"),
                            get("duality_identity"),
                            get("oracle_l1_final"),
                            get("iterations"),
                            if outcome.report.pass { "1" } else { "0" }.to_string(),
                        ]);
                    }
                    Err(e) => {
                        eprintln!("error at {param} = {value}: {e}");
                        return exit_code_for(&e);
                    }
                }
            }
            if let Err(e) = io::write_csv(
                &out_root.join("sweep.csv"),
                "param,value,d_identity_finest,int_a_m_finest,duality_identity,oracle_l1_final,iterations,pass",
                &rows,
            ) {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
            if all_pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Command::Validate { config } => match ExperimentConfig::from_path(&config)
            .and_then(|(cfg, base)| cfg.validate(&base))
        {
            Ok(()) => {
                println!("ok: {} validates", config.display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("config error: {e}");
                ExitCode::from(2)
            }
        },
    }
}
