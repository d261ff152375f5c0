use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tvmf_lab::Error;
use tvmf_lab_cli::{emit_curves, exit_code, load_dataset_config, load_suite, parse_toml, run_suite, CurveFile};

#[derive(Parser)]
#[command(name = "tvmf-lab", version, about = "Contrastive training under distribution shift")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every config of a suite for every seed.
    Run {
        suite: PathBuf,
        /// Overrides the suite's output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Comma separated seeds, overriding the suite's list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Cap queue size and epochs for a quick laptop run.
        #[arg(long)]
        desk: bool,
    },
    /// Generate a dataset and write it as CSV.
    GenData { config: PathBuf, out: PathBuf },
    /// Export similarity and margin curves.
    Curves { spec: PathBuf },
}

fn run(cli: Cli) -> Result<i32, Error> {
    match cli.cmd {
        Command::Run {
            suite,
            out_dir,
            seeds,
            desk,
        } => {
            let mut s = load_suite(&suite)?;
            if let Some(d) = out_dir {
                s.out_dir = d;
            }
            if let Some(seeds) = seeds {
                s.seeds = seeds;
            }
            if desk {
                s.shrink_for_desk();
            }
            let outcome = run_suite(&s)?;
            for f in &outcome.manifest.failed {
                eprintln!("run {} seed {} failed: {}", f.name, f.seed, f.error);
            }
            println!(
                "{} runs completed, {} failed, output in {}",
                outcome.manifest.completed.len(),
                outcome.manifest.failed.len(),
                s.out_dir.display()
            );
            Ok(if outcome.ok() { 0 } else { 2 })
        }
        Command::GenData { config, out } => {
            let cfg = load_dataset_config(&config)?;
            cfg.validate()?;
            let data = cfg.generate()?;
            data.write_csv(BufWriter::new(File::create(&out)?))?;
            println!("{} rows written to {}", data.len(), out.display());
            Ok(0)
        }
        Command::Curves { spec } => {
            let c: CurveFile = parse_toml(&std::fs::read_to_string(&spec)?)?;
            std::fs::create_dir_all(&c.out_dir)?;
            for f in emit_curves(&c.out_dir, &c.kappas, &c.kappa_pairs, c.resolution)? {
                println!("{}", f.display());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
