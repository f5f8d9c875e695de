use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use delta_cli::config::{Overrides, RunConfig};
use delta_cli::error::Result;
use delta_cli::{eval, gen, infer, inspect, train};

#[derive(Parser)]
#[command(name = "delta", version = concat!(env!("CARGO_PKG_VERSION"), "-", env!("DELTA_GIT_DESCRIBE")), about = "Multi-temporal change question answering and segmentation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run config (or a previous run_manifest.json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of scenes to generate.
    #[arg(long, global = true)]
    scenes: Option<usize>,
    /// Temporal phases per scene.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    no_cea: bool,
    #[arg(long, global = true)]
    no_cpe: bool,
    #[arg(long, global = true)]
    no_lca: bool,
    #[arg(long, global = true)]
    symmetric_queries: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate and verify a synthetic dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Warm-up, stage-1 and stage-2 training on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer one question about 2 or 3 images.
    Infer {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, num_args = 2..=3, required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        question: String,
        /// `box:x1,y1,x2,y2`, `point:x,y` or `none`.
        #[arg(long, default_value = "none")]
        prompt: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score trained runs on the held-out split; one report per run.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required = true)]
        run: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise a dataset, run directory or report.
    Inspect { path: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let o = Overrides {
        seed: c.seed,
        scenes: c.scenes,
        k: c.k,
        no_cea: c.no_cea,
        no_cpe: c.no_cpe,
        no_lca: c.no_lca,
        symmetric_queries: c.symmetric_queries,
    };
    let cfg = RunConfig::load(c.config.as_deref())?.resolve(&o)?;
    match cli.cmd {
        Cmd::Gen { out } => {
            gen::cmd_gen(&cfg, &out)?;
        }
        Cmd::Train { data, out } => {
            train::cmd_train(&cfg, &data, &out)?;
        }
        Cmd::Infer {
            run,
            images,
            question,
            prompt,
            out,
        } => {
            let p = infer::parse_prompt(&prompt)?;
            let r = infer::cmd_infer(&run, &images, &question, &p, cfg.eval.max_new, &out)?;
            println!("{}", r.answer);
        }
        Cmd::Eval { data, run, out } => {
            let rows = eval::cmd_eval(&cfg.eval, cfg.seed, &run, &data, &out)?;
            println!("{}", serde_json::to_string_pretty(&rows).expect("rows serialize"));
        }
        Cmd::Inspect { path } => {
            let v = inspect::cmd_inspect(&path)?;
            println!("{}", serde_json::to_string_pretty(&v).expect("summary serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
