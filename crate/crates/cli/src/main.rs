use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tha_cli::config::{ConfigError, ScenarioConfig};
use tha_cli::{execute, output_dir, selftest_configs};
use tha_core::grid::GridSpec;
use tha_core::kernels::{twisted_kernel_physical, ScaleTriple};

#[derive(Parser)]
#[command(name = "tha", about = "Numerical experiments for tri-parameter twisted harmonic analysis")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "THA_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario described by a TOML config.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config's `output`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the twisted Poisson kernel at one scale triple as CSV.
    DumpKernel {
        /// Radii `r1,r2,r3`.
        #[arg(long, value_delimiter = ',', required = true)]
        r: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        m: usize,
        #[arg(long, default_value_t = 128)]
        n: usize,
        #[arg(long, default_value_t = 16.0)]
        period: f64,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run small versions of the scenarios with must-pass checks.
    Selftest {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_BAD_INPUT: u8 = 2;

fn run_one(cfg: &ScenarioConfig, out: &Path) -> Result<bool, ExitCode> {
    match execute(cfg, out) {
        Ok(report) => {
            println!("{}:", cfg.scenario.name());
            for c in &report.checks {
                println!("  {}", c.line());
            }
            println!("  outputs in {}", out.display());
            Ok(report.passed())
        }
        Err(e) => {
            eprintln!("error in {}: {e:#}", cfg.scenario.name());
            Err(ExitCode::from(EXIT_CHECK_FAILED))
        }
    }
}

fn verdict(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK_FAILED)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("cannot configure {t} threads: {e}");
            return ExitCode::from(EXIT_BAD_INPUT);
        }
    }
    match cli.command {
        Command::Run { config, out } => {
            let cfg = match ScenarioConfig::load(&config) {
                Ok(cfg) => cfg,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(EXIT_BAD_INPUT);
                }
            };
            let dir = output_dir(&cfg, out.as_deref());
            match run_one(&cfg, &dir) {
                Ok(ok) => verdict(ok),
                Err(code) => code,
            }
        }
        Command::DumpKernel { r, m, n, period, out } => {
            let result = (|| -> anyhow::Result<()> {
                if r.len() != 3 {
                    anyhow::bail!("--r needs three radii, got {}", r.len());
                }
                let spec = GridSpec::new(m, n, period)?;
                let triple = ScaleTriple::new(r[0], r[1], r[2])?;
                let kernel = twisted_kernel_physical(&spec, &triple)?;
                match out {
                    Some(path) => kernel.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))?,
                    None => {
                        let stdout = std::io::stdout();
                        let mut lock = stdout.lock();
                        kernel.write_csv(&mut lock)?;
                        lock.flush()?;
                    }
                }
                Ok(())
            })();
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("{e:#}");
                    ExitCode::from(EXIT_BAD_INPUT)
                }
            }
        }
        Command::Selftest { out } => {
            let temp;
            let root = match out {
                Some(dir) => dir,
                None => match tempfile::tempdir() {
                    Ok(t) => {
                        temp = t;
                        temp.path().to_path_buf()
                    }
                    Err(e) => {
                        eprintln!("cannot create a temporary directory: {e}");
                        return ExitCode::from(EXIT_CHECK_FAILED);
                    }
                },
            };
            let mut ok = true;
            for cfg in selftest_configs() {
                if let Err(e) = cfg.validate() {
                    let e: ConfigError = e;
                    eprintln!("{e}");
                    return ExitCode::from(EXIT_BAD_INPUT);
                }
                match run_one(&cfg, &root.join(cfg.scenario.name())) {
                    Ok(passed) => ok &= passed,
                    Err(_) => ok = false,
                }
            }
            println!("selftest: {}", if ok { "PASS" } else { "FAIL" });
            verdict(ok)
        }
    }
}
