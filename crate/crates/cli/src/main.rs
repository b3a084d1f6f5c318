use std::path::PathBuf;
use std::process::ExitCode;

use chatprof_core::corpus::{generate_synthetic_corpus, ingest_corpus};
use chatprof_core::pipeline::{
    self, analyze, compare_generation_files, evaluate, finetune, load_pairs, load_vocabulary, mine_pairs,
    prepare_vocabulary, pretrain, run_all, write_json, write_manifest, Dataset, RunConfig, BEST_CHECKPOINT,
    FINAL_CHECKPOINT, FINETUNE_DIR, PRETRAIN_DIR,
};
use chatprof_core::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "chatprof",
    version,
    about = "Contrastive user-profile pre-training and personalized generation"
)]
struct Cli {
    /// Run configuration, TOML (.toml) or JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override as dotted.key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a JSON Lines corpus and write its normalized form.
    Ingest {
        /// Corpus to read; defaults to paths.corpus.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Write the planted-topic synthetic corpus.
    Synth,
    /// Build the vocabulary and mine all pair shards.
    MinePairs,
    /// Contrastive pre-training of both encoders.
    Pretrain,
    /// Generation fine-tuning.
    Finetune {
        /// Encoder checkpoint to start from; random initialization otherwise.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Beam-decode and score the test split.
    Evaluate {
        /// Defaults to the best fine-tuning checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Representation diagnostics of an encoder checkpoint.
    Analyze {
        /// Defaults to the final pre-training checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comparison checkpoint; the seeded random initialization otherwise.
        #[arg(long)]
        before: Option<PathBuf>,
    },
    /// Paired t-test of one metric between two generation files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value = "persona_f1")]
        metric: String,
    },
    /// Every stage in sequence.
    RunAll,
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    base.with_overrides(&cli.overrides)
}

fn prepared(cfg: &RunConfig) -> Result<Dataset> {
    cfg.validate()?;
    Dataset::load(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = config(&cli)?;
    let out = cfg.paths.output_dir.clone();
    match cli.command {
        Command::Ingest { input } => {
            if let Some(p) = input {
                cfg.paths.corpus = Some(p);
            }
            let path = cfg
                .paths
                .corpus
                .clone()
                .ok_or_else(|| Error::Usage("no corpus given; pass --input or set paths.corpus".into()))?;
            if !path.exists() {
                return Err(Error::Data(format!("corpus {} not found", path.display())));
            }
            write_manifest(&cfg, "ingest")?;
            let (corpus, report) = ingest_corpus(&path)?;
            let dest = out.join("corpus.jsonl");
            corpus.write_jsonl(&dest)?;
            println!(
                "ingested {} records ({} skipped) from {} users into {}",
                report.valid,
                report.skipped,
                corpus.num_users(),
                dest.display()
            );
        }
        Command::Synth => {
            write_manifest(&cfg, "synth")?;
            let synth = generate_synthetic_corpus(&cfg.synthetic)?;
            let dest = out.join("corpus.jsonl");
            synth.corpus.write_jsonl(&dest)?;
            write_json(&out.join("topics.json"), &synth.user_topics)?;
            println!(
                "wrote {} responses from {} users to {}",
                synth.corpus.num_triples(),
                synth.corpus.num_users(),
                dest.display()
            );
        }
        Command::MinePairs => {
            let data = prepared(&cfg)?;
            write_manifest(&cfg, "mine-pairs")?;
            prepare_vocabulary(&cfg, &data)?;
            let (_, counts) = mine_pairs(&cfg, &data)?;
            println!("response pairs: {}", counts.response);
            println!("augmented sequence pairs: {}", counts.augmented);
            println!("user pairs: {}", counts.user);
        }
        Command::Pretrain => {
            let data = prepared(&cfg)?;
            let vocab = load_vocabulary(&cfg)?;
            let pairs = load_pairs(&cfg, &data)?;
            let outcome = pretrain(&cfg, &data, &vocab, &pairs)?;
            for (i, l) in outcome.epoch_losses.iter().enumerate() {
                println!("epoch {}: l_total {l:.6}", i + 1);
            }
            println!("checkpoint: {}", outcome.checkpoint.display());
        }
        Command::Finetune { pretrained } => {
            let data = prepared(&cfg)?;
            let vocab = load_vocabulary(&cfg)?;
            let outcome = finetune(&cfg, &data, &vocab, pretrained.as_deref())?;
            for e in &outcome.epochs {
                match e.valid_loss {
                    Some(v) => println!("epoch {}: train {:.6} valid {v:.6}", e.epoch, e.train_loss),
                    None => println!("epoch {}: train {:.6}", e.epoch, e.train_loss),
                }
            }
            println!("best epoch {}: {}", outcome.best_epoch, outcome.best.display());
        }
        Command::Evaluate { checkpoint } => {
            let data = prepared(&cfg)?;
            let vocab = load_vocabulary(&cfg)?;
            let ckpt = checkpoint.unwrap_or_else(|| out.join(FINETUNE_DIR).join(BEST_CHECKPOINT));
            let outcome = evaluate(&cfg, &data, &vocab, &ckpt)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&outcome.report).expect("serializable")
            );
        }
        Command::Analyze { checkpoint, before } => {
            let data = prepared(&cfg)?;
            let vocab = load_vocabulary(&cfg)?;
            let ckpt = checkpoint.unwrap_or_else(|| out.join(PRETRAIN_DIR).join(FINAL_CHECKPOINT));
            let artifact = analyze(&cfg, &data, &vocab, &ckpt, before.as_deref())?;
            for (name, snap) in [("before", &artifact.before), ("after", &artifact.after)] {
                if let Some(s) = &snap.separation {
                    println!(
                        "{name}: utterance gap {:.4}, profile gap {:.4}",
                        s.utterance_gap, s.profile_gap
                    );
                }
            }
            println!("artifacts in {}", out.join(pipeline::ANALYSIS_DIR).display());
        }
        Command::Compare { a, b, metric } => {
            let t = compare_generation_files(&a, &b, &metric)?;
            println!("{metric}: t = {:.6}, df = {}, p = {:.6}", t.t, t.df, t.p_value);
        }
        Command::RunAll => {
            let outcome = run_all(&cfg)?;
            let c = outcome.shard_counts;
            println!(
                "pairs: response {} augmented {} user {}",
                c.response, c.augmented, c.user
            );
            println!(
                "{}",
                serde_json::to_string_pretty(&outcome.report).expect("serializable")
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
