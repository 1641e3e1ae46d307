use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use endoqa_core::data::DatasetKind;
use endoqa_core::harness::{
    self, read_pairs, AskAnswer, DatagenArgs, RunConfig, OUTPUT_ROOT_ENV,
};

#[derive(Parser)]
#[command(name = "endoqa", version, about = "Visual question answering over synthetic surgical scenes")]
struct Cli {
    /// Root for default output locations.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = "runs")]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic annotated dataset with both QA modes and a split.
    Datagen {
        #[arg(long, default_value = "endovis")]
        dataset: DatasetKind,
        #[arg(long, default_value_t = 14)]
        sequences: u32,
        #[arg(long, default_value_t = 20)]
        frames: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        /// Held-out sequence count (default: 3 of every 14).
        #[arg(long)]
        test_sequences: Option<usize>,
        /// Default: <output-root>/data/<dataset>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a WordPiece vocabulary on a dataset's questions and answers.
    TokenizerTrain {
        #[arg(long)]
        data: PathBuf,
        /// Default: <data>/vocab.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
    },
    /// Train a model; keeps the best checkpoint and writes a log.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Default: <output-root>/train.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write JSON and CSV reports.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (default: the one recorded in the checkpoint).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// train | test
        #[arg(long)]
        split: Option<String>,
        /// Extra `key=value` overrides.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Default: <output-root>/eval.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep patch grids and encoder variants.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Also sweep clip features (sentence mode).
        #[arg(long)]
        temporal_sweep: bool,
        /// Default: <output-root>/ablate.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report parameter counts for both encoder variants.
    Params {
        #[command(flatten)]
        run: RunArgs,
        /// Default: <output-root>/params.json.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Answer one question about one image (or a three-frame clip).
    Ask {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "image", required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        question: String,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
}

/// Run configuration: file, then flags, then `--set` pairs.
#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// full | test
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// endovis | cholec
    #[arg(long)]
    dataset: Option<String>,
    /// classification | sentence
    #[arg(long)]
    mode: Option<String>,
    /// baseline | resmlp
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    patches: Option<usize>,
    #[arg(long)]
    temporal: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beam_width: Option<usize>,
    /// Byte-stable outputs (zeroed wall-clock columns).
    #[arg(long)]
    deterministic: bool,
}

fn parse_set(s: &str) -> Result<(String, String)> {
    let Some((k, v)) = s.split_once('=') else {
        bail!("--set expects KEY=VALUE, got `{s}`");
    };
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

impl RunArgs {
    fn pairs(&self) -> Result<Vec<(String, String)>> {
        let mut pairs = match &self.config {
            Some(path) => read_pairs(path)?,
            None => Vec::new(),
        };
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        push("profile", self.profile.clone());
        push("data_dir", self.data.as_deref().map(path_str));
        push("vocab", self.vocab.as_deref().map(path_str));
        push("dataset", self.dataset.clone());
        push("mode", self.mode.clone());
        push("variant", self.variant.clone());
        push("patches", self.patches.map(|v| v.to_string()));
        push("temporal", self.temporal.then(|| "true".into()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("beam_width", self.beam_width.map(|v| v.to_string()));
        push("deterministic", self.deterministic.then(|| "true".into()));
        for s in &self.sets {
            pairs.push(parse_set(s)?);
        }
        Ok(pairs)
    }

    fn config(&self) -> Result<RunConfig> {
        Ok(RunConfig::from_pairs(&self.pairs()?)?)
    }
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.output_root;
    match cli.command {
        Command::Datagen {
            dataset,
            sequences,
            frames,
            seed,
            image_size,
            test_sequences,
            out,
        } => {
            let out = out.unwrap_or_else(|| root.join("data").join(dataset.as_str()));
            let s = harness::cmd_datagen(&DatagenArgs {
                dataset,
                sequences,
                frames_per_sequence: frames,
                seed,
                image_size,
                test_sequences,
                out: out.clone(),
            })?;
            println!("wrote {} frames to {}", s.frames, out.display());
            println!("qa pairs: {} classification, {} sentence", s.qa_classification, s.qa_sentence);
            println!("split: train {:?} test {:?}", s.train_sequences, s.test_sequences);
        }
        Command::TokenizerTrain { data, out, size, min_freq } => {
            let out = out.unwrap_or_else(|| data.join("vocab.txt"));
            let vocab = harness::cmd_tokenizer_train(&data, &out, size, min_freq)?;
            println!("wrote {} tokens to {}", vocab.len(), out.display());
        }
        Command::Train { run, out } => {
            let cfg = run.config()?;
            let out = out.unwrap_or_else(|| root.join("train"));
            let s = harness::cmd_train(&cfg, &out)?;
            for r in &s.records {
                let metrics: Vec<String> = r.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
                println!("epoch {} loss {:.4} {}", r.epoch, r.loss, metrics.join(" "));
            }
            println!(
                "trained on {} samples ({} steps); best epoch {} score {:.4}",
                s.train_samples, s.steps, s.best_epoch, s.best_score
            );
            println!("checkpoint {}", s.checkpoint.display());
            println!("log {}", s.log.display());
        }
        Command::Eval {
            checkpoint,
            data,
            vocab,
            split,
            sets,
            out,
        } => {
            let mut overrides = Vec::new();
            if let Some(d) = data {
                overrides.push(("data_dir".to_string(), path_str(&d)));
            }
            if let Some(v) = vocab {
                overrides.push(("vocab".to_string(), path_str(&v)));
            }
            if let Some(s) = split {
                overrides.push(("eval_split".to_string(), s));
            }
            for s in &sets {
                overrides.push(parse_set(s)?);
            }
            let out = out.unwrap_or_else(|| root.join("eval"));
            let report = harness::cmd_eval(&checkpoint, &overrides, &out)?;
            for (k, v) in report.csv_fields().iter().skip(report.config.len()) {
                println!("{k}: {v}");
            }
            println!("report {}", out.join("report.json").display());
        }
        Command::Ablate { run, temporal_sweep, out } => {
            let cfg = run.config()?;
            let out = out.unwrap_or_else(|| root.join("ablate"));
            let rows = harness::cmd_ablate(&cfg, &out, temporal_sweep)?;
            for r in &rows {
                let cells: Vec<String> = r.fields.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!("{}", cells.join(" "));
            }
            println!("wrote {} rows to {}", rows.len(), out.join("ablation.csv").display());
        }
        Command::Params { run, json } => {
            let cfg = run.config()?;
            let report = harness::cmd_params(&cfg)?;
            println!("vocab size {} ({})", report.vocab_size, report.vocab_source);
            println!("baseline feed-forward tail per layer: {}", report.baseline_ffn_per_layer);
            for r in &report.readings {
                println!("cross_channel_hidden = {}", r.cross_channel_hidden);
                for v in [&r.baseline, &r.resmlp] {
                    println!("  {:<8} encoder {:>12}  model {:>12}", v.variant, v.encoder_total, v.model_total);
                    for (g, c) in &v.encoder_groups {
                        println!("    {g:<22} {c:>12}");
                    }
                }
                println!(
                    "  resmlp/baseline = {:.4} ({:+.2}% fewer); smaller-resmlp direction {}",
                    r.ratio,
                    r.reduction_percent,
                    if r.matches_reference_direction { "matches" } else { "does not match" }
                );
            }
            println!(
                "reference: resmlp {}M vs baseline {}M ({}% fewer); not reproducible from the stated configuration",
                report.reference_resmlp_millions, report.reference_baseline_millions, report.reference_reduction_percent
            );
            let json = json.unwrap_or_else(|| root.join("params.json"));
            if let Some(parent) = json.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).with_context(|| format!("{}", parent.display()))?;
            }
            endoqa_core::data::write_json(&json, &report)?;
            println!("json {}", json.display());
        }
        Command::Ask {
            checkpoint,
            images,
            question,
            vocab,
            sets,
        } => {
            let mut overrides = Vec::new();
            if let Some(v) = vocab {
                overrides.push(("vocab".to_string(), path_str(&v)));
            }
            for s in &sets {
                overrides.push(parse_set(s)?);
            }
            let model = harness::load_model(&checkpoint, &overrides)?;
            match harness::cmd_ask(&model, &images, &question)? {
                AskAnswer::Labels(top) => {
                    for (label, p) in top {
                        println!("{label}\t{p:.6}");
                    }
                }
                AskAnswer::Sentence(s) => println!("{s}"),
            }
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let reason = match e.kind() {
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => "missing subcommand (see --help)",
                _ => text.lines().next().unwrap_or("invalid arguments"),
            };
            eprintln!("error: usage: {}", one_line(reason.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
