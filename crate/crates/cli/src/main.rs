use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gazesynth::scene::ProfileId;
use gazesynth_cli::commands::{self, parse_cases, parse_seeds};
use gazesynth_cli::{CliError, CliResult, WorkbenchConfig};

#[derive(Parser)]
#[command(name = "gazesynth", version, about = "Synthetic gaze dataset generation, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON workbench config; defaults to the desk cohort.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, render and preprocess a cohort (both profiles unless --profile).
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        profile: Option<ProfileId>,
    },
    /// Train and evaluate experiment cases on stored datasets.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated case ids.
        #[arg(long, default_value = "1,2,3,4,5")]
        cases: String,
        /// Comma-separated training seeds; defaults to the config's seeds.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Print a comparison table and export error distributions.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Preprocess externally labelled frames into a dataset.
    Import {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "I")]
        profile: ProfileId,
        /// Fail if any record could not be imported.
        #[arg(long)]
        strict: bool,
        manifest: PathBuf,
    },
}

fn setup(common: &Common) -> CliResult<(WorkbenchConfig, PathBuf)> {
    let config = match &common.config {
        Some(path) => WorkbenchConfig::load(path)?,
        None => WorkbenchConfig::default(),
    };
    let out = common.out.clone().unwrap_or_else(|| config.output_dir.clone());
    Ok((config, out))
}

fn describe(dir: &Path, profile: ProfileId, users: usize, samples: usize) -> String {
    format!("profile {profile}: {users} users, {samples} samples -> {}", dir.display())
}

fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Generate { common, profile } => {
            let (config, out) = setup(&common)?;
            let profiles = profile.map_or_else(|| vec![ProfileId::U, ProfileId::I], |p| vec![p]);
            for m in commands::generate(&config, &profiles, &out)? {
                let dir = gazesynth_cli::manifest::dataset_dir(&out, m.profile);
                println!("{}", describe(&dir, m.profile, m.users.len(), m.sample_count()));
            }
        }
        Command::Run { common, cases, seeds } => {
            let (config, out) = setup(&common)?;
            let cases = parse_cases(&cases)?;
            let seeds = match seeds {
                Some(s) => parse_seeds(&s)?,
                None => config.seeds.clone(),
            };
            for path in commands::run(&config, &cases, &seeds, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Report { common, reports } => {
            let (_, out) = setup(&common)?;
            print!("{}", commands::report(&reports, &out)?);
        }
        Command::Import { common, profile, strict, manifest } => {
            let (config, out) = setup(&common)?;
            let s = commands::import(&config, &manifest, profile, &out)?;
            let imported = s.manifest.sample_count();
            if imported == 0 && s.failures.is_empty() {
                eprintln!("warning: {} has no records; wrote an empty dataset", manifest.display());
            }
            for f in &s.failures {
                eprintln!("record {} ({}): {}", f.index, f.image, f.reason);
            }
            println!("{}", describe(&s.dir, profile, s.manifest.users.len(), imported));
            if !s.failures.is_empty() {
                eprintln!("{} of {} records failed", s.failures.len(), s.failures.len() + imported);
                if strict {
                    return Err(CliError::runtime(format!("{} records failed to import", s.failures.len())));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
