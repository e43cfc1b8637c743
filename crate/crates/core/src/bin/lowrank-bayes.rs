use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lowrank_bayes::experiment::{
    read_rows, report, run_with_threads, write_outputs, write_report, ExperimentSpec, ResultTable,
    EIGENVALUES_FILE, RESULTS_FILE,
};
use lowrank_bayes::verify::{run_criterion, VerifyOptions, CRITERIA};
use lowrank_bayes::{Error, Result};

#[derive(Parser)]
#[command(
    name = "lowrank-bayes",
    version,
    about = "Low-rank posterior approximation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment spec and write results, manifest and plots.
    Run {
        #[arg(long)]
        spec: PathBuf,
        /// Output directory; overrides `out` in the spec (default `results`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base seed; overrides `seed` in the spec.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "LOWRANK_BAYES_THREADS")]
        threads: Option<usize>,
        #[arg(long)]
        dense_fallback_dim: Option<usize>,
    },
    /// Summarize a results directory or CSV file.
    Report {
        path: PathBuf,
        /// Where to write `report.txt` and plots (default: next to the CSV).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the acceptance criteria (all of them when none are given).
    Verify {
        criteria: Vec<u32>,
        #[arg(long, default_value_t = VerifyOptions::default().seed)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run {
            spec,
            out,
            seed,
            threads,
            dense_fallback_dim,
        } => cmd_run(&spec, out, seed, threads, dense_fallback_dim),
        Command::Report { path, out } => cmd_report(&path, out),
        Command::Verify { criteria, seed } => cmd_verify(&criteria, seed),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn cmd_run(
    path: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    threads: Option<usize>,
    dense_fallback_dim: Option<usize>,
) -> Result<ExitCode> {
    let mut spec = ExperimentSpec::from_file(path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(d) = dense_fallback_dim {
        spec.dense_fallback_dim = d;
    }
    if out.is_some() {
        spec.out = out;
    }
    if threads.is_some() {
        spec.threads = threads;
    }
    spec.validate()?;
    let dir = spec.out.clone().unwrap_or_else(|| PathBuf::from("results"));
    let output = run_with_threads(&spec, spec.threads)?;
    let mut written = write_outputs(&output, &dir)?;
    let rep = report(&output.table)?;
    written.extend(write_report(
        &rep,
        &output.table,
        &output.eigenvalues,
        &dir,
    )?);
    written.sort();
    written.dedup();
    println!(
        "{} rows, config hash {}",
        output.table.rows.len(),
        output.manifest.config_hash
    );
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(path: &Path, out: Option<PathBuf>) -> Result<ExitCode> {
    let (csv, dir) = if path.is_dir() {
        (path.join(RESULTS_FILE), path.to_path_buf())
    } else {
        (
            path.to_path_buf(),
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
        )
    };
    let table = ResultTable::read_file(&csv)?;
    let eig_path = dir.join(EIGENVALUES_FILE);
    let eigenvalues = if eig_path.is_file() {
        let f = std::fs::File::open(&eig_path)
            .map_err(|e| Error::Config(format!("cannot open {}: {e}", eig_path.display())))?;
        read_rows(f)?
    } else {
        Vec::new()
    };
    let rep = report(&table)?;
    print!("{}", rep.text);
    for p in write_report(&rep, &table, &eigenvalues, &out.unwrap_or(dir))? {
        println!("wrote {}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(criteria: &[u32], seed: u64) -> Result<ExitCode> {
    let opts = VerifyOptions { seed };
    let ids: Vec<u32> = if criteria.is_empty() {
        CRITERIA.iter().map(|c| c.0).collect()
    } else {
        criteria.to_vec()
    };
    let mut failed = 0;
    for id in ids {
        let r = run_criterion(id, &opts)?;
        println!("{r}");
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        Ok(ExitCode::from(3))
    } else {
        Ok(ExitCode::SUCCESS)
    }
}
