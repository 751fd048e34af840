use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use manifold_flow::commands::{self, exit};
use manifold_flow::config::{Resolved, RunConfig};
use manifold_flow::Error;

#[derive(Parser)]
#[command(name = "mflow", version, about = "Conditional normalizing flows on manifold-valued fields")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the sampling temperature.
    #[arg(long, global = true)]
    temperature: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset and its manifest.
    Synth,
    /// Train the conditional model on the manifest's training split.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate target fields from source field files.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Source field files; the test split when omitted.
        #[arg(long, num_args = 1..)]
        inputs: Vec<PathBuf>,
    },
    /// Evaluate generated fields against references.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Generated field files, paired in order with `--references`.
        #[arg(long, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        references: Vec<PathBuf>,
    },
    /// Run the verification suite.
    Check {
        /// Skip the coupling scale clamp in forward passes.
        #[arg(long)]
        inject_fault: bool,
    },
}

fn resolve(c: &Common) -> manifold_flow::Result<Resolved> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(t) = c.threads {
        cfg.threads = t;
    }
    if let Some(o) = &c.out {
        cfg.out.clone_from(o);
    }
    if let Some(t) = c.temperature {
        cfg.eval.temperatures = vec![t];
    }
    cfg.validate()
}

fn run(cli: Cli) -> manifold_flow::Result<i32> {
    let r = resolve(&cli.common)?;
    if r.config.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(r.config.threads)
            .build_global()
            .map_err(|e| Error::Config { key: "threads".into(), msg: e.to_string() })?;
    }
    commands::echo_config(&r)?;
    let checkpoint = |p: &Option<PathBuf>| p.clone().unwrap_or_else(|| r.checkpoint_path());
    match cli.command {
        Command::Synth => {
            let n = commands::cmd_synth(&r)?;
            println!("wrote {n} field files and {}", r.manifest_path().display());
        }
        Command::Train { resume } => {
            let s = commands::cmd_train(&r, resume.as_deref())?;
            println!("trained {} steps, final nll {}, checkpoint {}", s.steps, s.final_loss, s.checkpoint.display());
        }
        Command::Generate { checkpoint: ck, inputs } => {
            let recs = commands::cmd_generate(&r, &checkpoint(&ck), &inputs, r.config.eval.temperatures[0])?;
            for rec in &recs {
                println!("{} -> {}", rec.input.display(), rec.output.display());
            }
        }
        Command::Eval { checkpoint: ck, inputs, references } => {
            let rep = commands::cmd_eval(&r, &checkpoint(&ck), &inputs, &references)?;
            println!("mean reconstruction error {:.6}", rep.mean_reconstruction_error);
            if let Some(b) = rep.baseline_error {
                println!("Fréchet-mean baseline {b:.6}");
            }
            println!("dominance {:.3}", rep.dominance);
            for (k, v) in &rep.iou {
                println!("IoU {k} {v:.3}");
            }
            for (k, t) in &rep.thresholds {
                println!("{} {k} value={:.6} bound={:.6}", if t.passed { "PASS" } else { "FAIL" }, t.value, t.bound);
            }
            if !rep.all_thresholds_pass() {
                return Ok(exit::THRESHOLD);
            }
        }
        Command::Check { inject_fault } => {
            let rep = commands::cmd_check(&r, inject_fault)?;
            for line in commands::check_lines(&rep) {
                println!("{line}");
            }
            if !rep.passed {
                return Ok(exit::THRESHOLD);
            }
        }
    }
    Ok(exit::OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(c) => c,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            commands::exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
