use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dynprompt_core::corpus::{synthetic, write_corpus};
use dynprompt_cli::chat::{run_repl, ChatSession};
use dynprompt_cli::sweep::sweep;
use dynprompt_cli::workflow::{adapt, eval, pretrain};
use dynprompt_cli::{CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "dynprompt", version, about = "Pre-train, adapt, evaluate and chat with prompt-tuned dialogue models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a backbone language model from scratch on --corpus.
    Pretrain(Common),
    /// Adapt a pre-trained --backbone to the dialogue --corpus, once per seed.
    Adapt(Common),
    /// Generate and score responses for the --test corpus.
    Eval(Common),
    /// Run adapt + eval across prompt sizes or model sizes.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// prompt_size or model_size
        #[arg(long)]
        axis: Option<String>,
    },
    /// Talk to an adapted model.
    Chat(Common),
    /// Write a generated corpus.
    Synth(SynthArgs),
}

#[derive(Args, Default)]
struct Common {
    /// Configuration file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed or comma-separated seeds.
    #[arg(long, value_name = "N[,N...]")]
    seed: Option<String>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "finetune|softprompt|ptuning|prefix|dynamic")]
    strategy: Option<String>,
    #[arg(long, value_name = "K")]
    prompt_size: Option<usize>,
    #[arg(long, value_name = "PATH")]
    backbone: Option<PathBuf>,
    /// Checkpoint file(s) or adapt output directory.
    #[arg(long, value_name = "PATH[,PATH...]")]
    adapter: Option<String>,
    /// Training corpus (the base corpus for pretrain).
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    /// Test corpus for eval and sweep.
    #[arg(long, value_name = "PATH")]
    test: Option<PathBuf>,
    /// Base corpus for pre-training model-size sweep backbones.
    #[arg(long, value_name = "PATH")]
    base: Option<PathBuf>,
    /// Any other setting, e.g. --set train.batch_size=8.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Templated base language for pre-training.
    Base,
    /// Context-conditional key → value lookup dialogues.
    Lookup,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(value_enum)]
    kind: SynthKind,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    dialogues: usize,
    #[arg(long, default_value_t = 64)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the lookup permutation; keep it fixed across splits.
    #[arg(long, default_value_t = 0)]
    task_seed: u64,
}

impl Common {
    fn resolve(&self, corpus_key: &str) -> CliResult<RunConfig> {
        let mut overrides = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        let path = |p: &PathBuf| p.display().to_string();
        let flags = [
            ("run.seeds", self.seed.clone()),
            ("run.out", self.out.as_ref().map(path)),
            ("adapter.strategy", self.strategy.clone()),
            ("adapter.prompt_size", self.prompt_size.map(|k| k.to_string())),
            ("run.backbone", self.backbone.as_ref().map(path)),
            ("run.adapter", self.adapter.clone()),
            (corpus_key, self.corpus.as_ref().map(path)),
            ("corpus.test", self.test.as_ref().map(path)),
            ("corpus.base", self.base.as_ref().map(path)),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        }
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

fn synth(args: &SynthArgs) -> CliResult<()> {
    let dialogues = match args.kind {
        SynthKind::Base => synthetic::base_language(args.dialogues, args.classes, args.seed),
        SynthKind::Lookup => {
            synthetic::lookup_dialogues(args.dialogues, args.classes, args.task_seed, args.seed)
        }
    };
    write_corpus(&args.out, &dialogues)?;
    println!("wrote {} dialogues to {}", dialogues.len(), args.out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Pretrain(c) => {
            let out = pretrain(&c.resolve("corpus.base")?)?;
            println!(
                "backbone {} (checksum {:016x}, best valid loss {:.4})",
                out.checkpoint.display(),
                out.checksum,
                out.best_valid
            );
        }
        Command::Adapt(c) => {
            for r in adapt(&c.resolve("corpus.train")?)? {
                println!(
                    "seed {}: {} (best valid loss {:.4} at epoch {}, {} trainable parameters)",
                    r.seed,
                    r.checkpoint.display(),
                    r.best_valid,
                    r.best_epoch,
                    r.trainable_params
                );
            }
        }
        Command::Eval(c) => {
            let out = eval(&c.resolve("corpus.test")?)?;
            for (seed, file, report) in &out.reports {
                println!("seed {seed}: {} (digest {})", file.display(), report.digest());
            }
            println!("summary: {}", out.summary.display());
        }
        Command::Sweep { common, axis } => {
            let mut cfg = common.resolve("corpus.train")?;
            if let Some(a) = axis {
                cfg = cfg.with("sweep.axis", a.replace('-', "_"))?;
            }
            let out = sweep(&cfg)?;
            println!(
                "{}: {} cells run, {} already complete",
                out.csv.display(),
                out.ran.len(),
                out.skipped.len()
            );
        }
        Command::Chat(c) => {
            let mut session = ChatSession::open(&c.resolve("corpus.train")?)?;
            run_repl(&mut session, io::stdin().lock(), io::stdout().lock())?;
        }
        Command::Synth(args) => synth(&args)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
