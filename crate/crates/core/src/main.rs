//! Command-line entry point. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

use std::io::Read;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use sumalign::cli as commands;
use sumalign::config::RunConfig;
use sumalign::Error;

#[derive(Parser)]
#[command(
    name = "sumalign",
    version,
    about = "Train and evaluate a desk-scale code summarization model"
)]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override [paths].out_dir.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Override the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Load corpora, train the subword vocabulary, build the action-word
    /// table, and write all artifacts.
    Prepare {
        /// Training JSONL ({"code": ..., "summary": ...} per line).
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        /// Drop train samples whose code also appears in the test split.
        #[arg(long)]
        dedup: bool,
    },
    /// Joint multi-task pretraining of the shared encoder.
    Pretrain {
        #[arg(long)]
        steps: Option<u64>,
        /// Comma-separated subset of AWP,ULM,MLM.
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<String>>,
    },
    /// Fine-tune encoder + decoder on code-to-summary generation.
    Finetune {
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        freeze_encoder: bool,
        /// Start from random weights instead of the pretrained checkpoint.
        #[arg(long)]
        random_init: bool,
    },
    /// Summarize code read from a file or standard input.
    Summarize {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Score generated summaries (model-driven, or a hypothesis/reference
    /// file pair) with BLEU, METEOR, and ROUGE-L.
    Evaluate {
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        hypotheses: Option<PathBuf>,
        #[arg(long)]
        references: Option<PathBuf>,
        /// Second hypothesis file for paired significance tests.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Run the four-way task ablation (all tasks and each one removed).
    Ablate,
    /// Dump decoder cross-attention weights for a code/summary pair as JSON.
    ExportAttention {
        #[arg(long)]
        code_file: PathBuf,
        #[arg(long)]
        summary: String,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    if let Some(out) = cli.out_dir {
        cfg.paths.out_dir = out;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    match cli.command {
        Cmd::Prepare { train, valid, test, dedup } => {
            if let Some(t) = train {
                cfg.paths.train = Some(t);
            }
            if let Some(v) = valid {
                cfg.paths.valid = Some(v);
            }
            if let Some(t) = test {
                cfg.paths.test = Some(t);
            }
            if dedup {
                cfg.corpus.dedup = true;
            }
            let report = commands::cmd_prepare(&cfg)?;
            println!(
                "prepared {} train samples ({} skipped), vocabulary {}, {} action-word classes",
                report.train_loaded, report.train_skipped, report.vocab_size, report.n_classes
            );
            if let Some(d) = report.dedup_removed {
                println!("dedup removed {d} duplicate training samples");
            }
        }
        Cmd::Pretrain { steps, tasks } => {
            if let Some(s) = steps {
                cfg.pretrain.steps = s;
            }
            if let Some(t) = tasks {
                cfg.pretrain.tasks = t;
            }
            let path = commands::cmd_pretrain(&cfg)?;
            println!("wrote {}", path.display());
        }
        Cmd::Finetune { steps, freeze_encoder, random_init } => {
            if let Some(s) = steps {
                cfg.finetune.steps = s;
            }
            if freeze_encoder {
                cfg.finetune.freeze_encoder = true;
            }
            if random_init {
                cfg.finetune.random_init = true;
            }
            let path = commands::cmd_finetune(&cfg)?;
            println!("wrote {}", path.display());
        }
        Cmd::Summarize { input } => {
            let code = match input {
                Some(path) => std::fs::read_to_string(&path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?,
                None => {
                    let mut buf = String::new();
                    std::io::stdin()
                        .read_to_string(&mut buf)
                        .map_err(|e| Error::io("<stdin>", e))?;
                    buf
                }
            };
            let summary = commands::cmd_summarize(&cfg, &code)?;
            println!("{summary}");
        }
        Cmd::Evaluate { split, hypotheses, references, baseline } => {
            if let Some(s) = split {
                cfg.eval.split = s;
            }
            let out = commands::cmd_evaluate(
                &cfg,
                hypotheses.as_deref(),
                references.as_deref(),
                baseline.as_deref(),
            )?;
            println!(
                "BLEU {:.2}  METEOR {:.2}  ROUGE-L {:.2}  (corpus BLEU {:.2}, n = {})",
                out.scores.bleu.mean_pct,
                out.scores.meteor.mean_pct,
                out.scores.rouge_l.mean_pct,
                out.scores.corpus_bleu_pct,
                out.scores.n
            );
        }
        Cmd::Ablate => {
            let outcome = commands::cmd_ablate(&cfg)?;
            let rows: Vec<(String, f64, f64, f64)> = outcome
                .rows
                .iter()
                .map(|r| (r.label.clone(), r.bleu, r.meteor, r.rouge_l))
                .collect();
            print!("{}", sumalign::metrics::render_table(&rows));
            if !outcome.failures.is_empty() {
                return Err(Error::Model(format!(
                    "{} ablation configuration(s) failed",
                    outcome.failures.len()
                )));
            }
        }
        Cmd::ExportAttention { code_file, summary } => {
            let code = std::fs::read_to_string(&code_file)
                .map_err(|e| Error::io(code_file.display().to_string(), e))?;
            let json = commands::cmd_export_attention(&cfg, &code, &summary)?;
            println!("{json}");
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
