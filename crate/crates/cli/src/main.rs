use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use curlm::pipeline::{self, RunConfig};
use curlm::Result;

#[derive(Parser)]
#[command(name = "curlm", version, about = "Curriculum masked-LM pretraining pipeline")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean the corpus into instances.jsonl.
    Preprocess,
    /// Train the BPE tokenizer on the preprocessed instances.
    TrainTokenizer,
    /// Induce word clusters and, given a mapping, the tag lexicon.
    InduceClasses,
    /// Train the model, optionally continuing from a checkpoint.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a minimal-pair suite.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        suite: Option<PathBuf>,
    },
    /// Generate a minimal-pair suite and training corpus from a grammar.
    GenSuite {
        #[arg(long)]
        grammar: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| curlm::Error::config("--config is required"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.output_dir = out.clone();
    }
    if let Command::GenSuite { grammar: Some(g) } = &cli.command {
        cfg.paths.grammar = Some(g.clone());
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Preprocess => {
            let r = pipeline::cmd_preprocess(&cfg)?;
            println!(
                "lines_in={} instances_out={} words_out={}",
                r.lines_in, r.instances_out, r.words_out
            );
        }
        Command::TrainTokenizer => {
            let tok = pipeline::cmd_train_tokenizer(&cfg)?;
            println!("vocab_size={}", tok.vocab_size());
        }
        Command::InduceClasses => {
            let a = pipeline::cmd_induce_classes(&cfg)?;
            println!("clusters={} types={}", a.num_clusters, a.clusters.len());
        }
        Command::Train { resume } => {
            let s = pipeline::cmd_train(&cfg, resume.as_deref())?;
            println!("steps={} from={}", s.steps, s.start_step);
            for (task, loss) in &s.final_losses {
                println!("{task} loss={loss:.4}");
            }
        }
        Command::Eval { checkpoint, suite } => {
            let e = pipeline::cmd_eval(&cfg, checkpoint, suite.as_deref())?;
            println!(
                "checkpoint_step={} macro={:.4} ppx={:.4}",
                e.row.checkpoint_step, e.row.macro_average, e.row.ppx
            );
        }
        Command::GenSuite { .. } => {
            let g = pipeline::cmd_gen_suite(&cfg)?;
            println!("pairs={} sentences={}", g.pairs, g.sentences);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
