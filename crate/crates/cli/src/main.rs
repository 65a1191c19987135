use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gcn_nas::data::Split;
use gcn_nas::search::SearchMode;
use gcn_nas::supernet::DEFAULT_THRESHOLD;
use gcn_nas::{NasError, Result};
use gcn_nas_cli::*;

#[derive(Parser)]
#[command(name = "gcnnas", version, about = "Architecture search for skeleton-action graph convolutional networks")]
struct Cli {
    /// Caps the worker threads used for parallel evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset file.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(d) = &self.data {
            cfg.data.path = Some(d.clone());
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Continuous,
    Sampled,
}

#[derive(Clone, Copy, ValueEnum)]
enum StreamArg {
    Joint,
    Bone,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic skeleton-action dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Search an architecture on the dataset's validation split.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Derive the module selection from an exported alpha file.
    DeriveArch {
        #[arg(long)]
        alpha: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the finalized network for an architecture file.
    Train {
        #[command(flatten)]
        common: Common,
        /// `arch.json` or `arch.txt`.
        #[arg(long)]
        arch: PathBuf,
        #[arg(long, value_enum)]
        stream: Option<StreamArg>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Score-level fusion of two checkpoints (typically joint and bone).
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        first: PathBuf,
        #[arg(long)]
        second: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

fn fmt_topk(topk: &[(usize, f64)]) -> String {
    topk.iter().map(|(k, a)| format!("top{k}={:.2}%", 100.0 * a)).collect::<Vec<_>>().join(" ")
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| NasError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenData { common } => {
            let s = cmd_gen_data(&common.load()?)?;
            println!(
                "wrote {} samples ({} classes; train {} / val {} / test {}) to {}",
                s.samples,
                s.classes,
                s.train,
                s.val,
                s.test,
                s.path.display()
            );
        }
        Command::Search { common, mode } => {
            let mut cfg = common.load()?;
            if let Some(m) = mode {
                cfg.search.mode = match m {
                    ModeArg::Continuous => SearchMode::Continuous,
                    ModeArg::Sampled => SearchMode::Sampled,
                };
            }
            let r = cmd_search(&cfg)?;
            match r.best_fitness {
                Some(f) => println!("search finished after {} iterations, best fitness {f:.4}", r.iterations),
                None => println!("search finished after {} iterations without evaluating a population", r.iterations),
            }
            print!("{}", r.architecture.to_table());
        }
        Command::DeriveArch { alpha, threshold, out } => {
            print!("{}", cmd_derive_arch(&alpha, threshold, &out)?.to_table());
        }
        Command::Train { common, arch, stream } => {
            let mut cfg = common.load()?;
            if let Some(s) = stream {
                cfg.data.stream = match s {
                    StreamArg::Joint => Stream::Joint,
                    StreamArg::Bone => Stream::Bone,
                };
            }
            let r = cmd_train(&cfg, &arch)?;
            println!("final training loss {:.4}, train top1={:.2}%", r.final_loss, 100.0 * r.train_top1);
            if let Some(v) = r.final_val {
                println!("validation {} loss={:.4}", fmt_topk(&v.topk), v.loss);
            }
        }
        Command::Eval { common, checkpoint, split } => {
            let r = cmd_eval(&common.load()?, &checkpoint, split.into())?;
            println!("{} samples: {} loss={:.4}", r.samples, fmt_topk(&r.topk), r.loss);
        }
        Command::Fuse { common, first, second, split } => {
            let r = cmd_fuse(&common.load()?, &first, &second, split.into())?;
            println!("first  {}", fmt_topk(&r.first));
            println!("second {}", fmt_topk(&r.second));
            println!("fused  {}", fmt_topk(&r.fused));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", format_error(&e));
            ExitCode::FAILURE
        }
    }
}
