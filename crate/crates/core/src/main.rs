use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use radialform::config::{Pipelines, RunConfig};
use radialform::run::{compare, list_presets, load_manifest, run, PipelineOutcome};

#[derive(Parser)]
#[command(name = "radialform", version, about = "Radial normal forms of metrics on ends")]
struct Cli {
    /// Worker threads for per-seed work.
    #[arg(long, global = true, env = "RADIALFORM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipelines selected in a JSON config.
    Run {
        config: PathBuf,
        /// Output directory (overrides `output` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated pipelines (overrides the config selection).
        #[arg(long)]
        pipelines: Option<String>,
    },
    /// Numeric diff of two run manifests.
    Compare { a: PathBuf, b: PathBuf },
    /// Print the built-in end models.
    ListPresets,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match cli.command {
        Command::ListPresets => {
            print!("{}", list_presets());
            ExitCode::SUCCESS
        }
        Command::Compare { a, b } => {
            let (ma, mb) = match (load_manifest(&a), load_manifest(&b)) {
                (Ok(x), Ok(y)) => (x, y),
                (Err(e), _) | (_, Err(e)) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let rep = compare(&ma, &mb);
            print!("{}", rep.render());
            if rep.regressions() > 0 {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            }
        }
        Command::Run { config, out, pipelines } => {
            let mut cfg = match RunConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            if let Some(list) = pipelines {
                match Pipelines::from_list(&list) {
                    Ok(p) => cfg.pipelines = p,
                    Err(e) => {
                        eprintln!("error: {e}");
                        return ExitCode::from(2);
                    }
                }
            }
            if let Some(o) = out {
                cfg.output = o;
            }
            let dir = cfg.output.clone();
            match run(&cfg, &dir) {
                Ok(m) => {
                    for (name, o) in &m.pipelines {
                        println!("{name}: {:?}", o.status);
                        if !PipelineOutcome::ok(o) {
                            for msg in &o.messages {
                                println!("  {msg}");
                            }
                        }
                    }
                    println!("manifest: {}", dir.join("manifest.json").display());
                    if m.pass {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::FAILURE
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
    }
}
