use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tgdecode::cli::{self, MethodName, ReportFormat, RunConfig};
use tgdecode::Result;

#[derive(Parser)]
#[command(name = "tgdecode", version, about = "Trainable greedy decoding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<ReportFormat>,
    #[arg(long, global = true, value_enum)]
    method: Option<MethodName>,
    #[arg(long, global = true)]
    beam_k: Option<usize>,
    #[arg(long, global = true)]
    len_norm: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and vocabularies.
    GenData,
    /// Train the base model by maximum likelihood.
    TrainBase,
    /// Build the pseudo-parallel corpus from k-best lists.
    Distill,
    /// Train an actor on the pseudo corpus with the base frozen.
    TrainActor,
    /// Fine-tune a copy of the base model on the pseudo corpus.
    TrainCont,
    /// Decode a source file sentence by sentence.
    Decode {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        trace: bool,
    },
    /// Score a hypothesis file against the test references.
    Eval {
        #[arg(long)]
        hyp: Option<PathBuf>,
    },
    /// Time decoding methods on the test set.
    Bench {
        #[arg(long, value_delimiter = ',', value_enum)]
        methods: Vec<MethodName>,
    },
    /// Likelihood matrix and norm diagnostics.
    Probe,
    /// Train one actor per value of a configuration axis.
    Sweep {
        #[arg(long)]
        axis: Option<String>,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Run every stage end to end.
    Pipeline,
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let c = &cli.common;
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::desk(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = &c.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(f) = c.format {
        cfg.format = f;
    }
    if let Some(m) = c.method {
        cfg.decode.method = m;
    }
    if let Some(k) = c.beam_k {
        cfg.decode.beam_k = k;
    }
    if c.len_norm {
        cfg.decode.len_norm = true;
    }
    match &cli.command {
        Command::Decode { input, trace } => {
            if input.is_some() {
                cfg.paths.input = input.clone();
            }
            cfg.decode.trace |= *trace;
        }
        Command::Eval { hyp: Some(h) } => cfg.paths.hyp = Some(h.clone()),
        Command::Bench { methods } if !methods.is_empty() => cfg.bench.methods = methods.clone(),
        Command::Sweep { axis, values } => {
            if axis.is_some() {
                cfg.sweep.axis = axis.clone();
            }
            if !values.is_empty() {
                cfg.sweep.values = values.clone();
            }
        }
        _ => {}
    }
    Ok(cfg)
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    match &cli.command {
        Command::GenData => print(&cli::cmd_gen_data(&cfg)?),
        Command::TrainBase => print(&cli::cmd_train_base(&cfg)?),
        Command::Distill => print(&cli::cmd_distill(&cfg)?),
        Command::TrainActor => print(&cli::cmd_train_actor(&cfg)?),
        Command::TrainCont => print(&cli::cmd_train_cont(&cfg)?),
        Command::Decode { .. } => print(&cli::cmd_decode(&cfg, cfg.decode.method)?),
        Command::Eval { .. } => {
            let r = cli::cmd_eval(&cfg)?;
            println!("BLEU {:.2}  TER {:.2}", r.bleu, r.ter);
            Ok(())
        }
        Command::Bench { .. } => {
            print!("{}", cli::cmd_bench(&cfg)?.to_csv());
            Ok(())
        }
        Command::Probe => {
            let r = cli::cmd_probe(&cfg)?;
            print!("{}{}", r.likelihood_csv(), r.norms_csv());
            Ok(())
        }
        Command::Sweep { .. } => {
            print!("{}", tgdecode::distill::sweep_csv(&cli::cmd_sweep(&cfg)?));
            Ok(())
        }
        Command::Pipeline => {
            print!("{}", cli::cmd_pipeline(&cfg)?.table.to_csv());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
