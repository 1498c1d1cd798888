//! Command-line interface: synthetic corpora, training, decoding,
//! evaluation, topic inspection, and attention dumps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use uss_core::checkpoint;
use uss_core::config::{synth_spec_from_file, TrainConfig};
use uss_core::corpus::{load_raw, mask_side, save_raw, tokenize};
use uss_core::decoder::DecodeParams;
use uss_core::eval::evaluate;
use uss_core::synth;
use uss_core::trainer::{restore, train};
use uss_core::utm::{top_words, topic_coherence_npmi};

#[derive(Parser)]
#[command(
    name = "uss",
    version,
    about = "Side-information-aware abstractive summarization"
)]
struct Cli {
    /// Worker threads for evaluation decoding; 1 guarantees determinism.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (train/val/test JSONL files).
    Synth {
        /// Generator spec file (`key = value`).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a corpus directory containing train.jsonl and
    /// optionally val.jsonl.
    Train {
        /// Training config file (`key = value`).
        #[arg(long)]
        config: PathBuf,
        /// Corpus directory.
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for checkpoints and the metrics log.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Decode summaries for a corpus file; prints `id<TAB>summary` lines.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus file to summarize.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        min_len: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Score beam-search decodes against references and write a CSV report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus file with references.
        #[arg(long)]
        corpus: PathBuf,
        /// Report CSV path.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        min_len: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Print top words per topic and an NPMI coherence score.
    Topics {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Words per topic.
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Corpus file for document-level co-occurrence counts.
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Dump decoder attention weights for the first input sample as CSV.
    InspectAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus file; the first sample is traced.
        #[arg(long)]
        input: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn decode_with_overrides(
    cfg: &TrainConfig,
    beam: Option<usize>,
    alpha: Option<f64>,
    min_len: Option<usize>,
    max_len: Option<usize>,
) -> DecodeParams {
    let mut d = cfg.decode_params();
    if let Some(b) = beam {
        d.beam = b;
    }
    if let Some(a) = alpha {
        d.alpha = a;
    }
    if let Some(m) = min_len {
        d.min_len = m;
    }
    if let Some(m) = max_len {
        d.max_len = m;
    }
    d
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Synth { spec, seed, out } => {
            let spec = synth_spec_from_file(&spec)?;
            let corpus = synth::generate(&spec, seed)?;
            fs::create_dir_all(&out)?;
            save_raw(&out.join("train.jsonl"), &corpus.train)?;
            save_raw(&out.join("val.jsonl"), &corpus.val)?;
            save_raw(&out.join("test.jsonl"), &corpus.test)?;
            println!(
                "wrote {} train / {} val / {} test samples to {}",
                corpus.train.len(),
                corpus.val.len(),
                corpus.test.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            corpus,
            out_dir,
        } => {
            let mut cfg = TrainConfig::from_file(&config)?;
            if cli.threads != 1 {
                cfg.threads = cli.threads;
            }
            let train_raw = load_raw(&corpus.join("train.jsonl"))?;
            let val_path = corpus.join("val.jsonl");
            let val_raw = if val_path.exists() {
                load_raw(&val_path)?
            } else {
                Vec::new()
            };
            let outcome = train(&cfg, &train_raw, &val_raw, Some(&out_dir))?;
            let last = outcome.metrics.last().expect("at least one step");
            println!(
                "trained {} steps; final loss {:.4}; validation ROUGE-L {:.4}",
                cfg.steps,
                last.loss_total,
                outcome.validations.last().map(|(_, s)| *s).unwrap_or(0.0)
            );
            println!("final checkpoint: {}", out_dir.join("final.ussckpt").display());
            Ok(())
        }
        Command::Generate {
            checkpoint,
            input,
            beam,
            alpha,
            min_len,
            max_len,
        } => {
            let ckpt = checkpoint::load(&checkpoint)?;
            let (cfg, model, pipeline) = restore(ckpt)?;
            let decode = decode_with_overrides(&cfg, beam, alpha, min_len, max_len);
            let raws = load_raw(&input)?;
            let mut samples = pipeline.encode_all(&raws)?;
            if cfg.mask_side {
                mask_side(&mut samples);
            }
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            for sample in &samples {
                let item = pipeline.item(sample, model.cfg.topics);
                let ids = model.summarize(&item, &decode)?;
                writeln!(w, "{}\t{}", sample.id, pipeline.vocab.decode(&ids))?;
            }
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            corpus,
            report,
            beam,
            alpha,
            min_len,
            max_len,
        } => {
            let ckpt = checkpoint::load(&checkpoint)?;
            let (cfg, model, pipeline) = restore(ckpt)?;
            let decode = decode_with_overrides(&cfg, beam, alpha, min_len, max_len);
            let raws = load_raw(&corpus)?;
            let mut samples = pipeline.encode_all(&raws)?;
            if cfg.mask_side {
                mask_side(&mut samples);
            }
            let result = evaluate(&model, &pipeline, &samples, &decode, cli.threads)?;
            result.write_csv(&report)?;
            println!(
                "samples {}  R1 {:.4}  R2 {:.4}  RL {:.4}",
                result.rows.len(),
                result.aggregate.r1_f,
                result.aggregate.r2_f,
                result.aggregate.rl_f
            );
            Ok(())
        }
        Command::Topics {
            checkpoint,
            k,
            corpus,
        } => {
            let ckpt = checkpoint::load(&checkpoint)?;
            let (_cfg, model, pipeline) = restore(ckpt)?;
            let k = k.min(pipeline.topic_vocab.len());
            let tops = top_words(model.params.get("utm.w_phi"), &pipeline.topic_vocab, k);
            let raws = load_raw(&corpus)?;
            let docs: Vec<Vec<String>> = raws.iter().map(|r| tokenize(&r.document)).collect();
            let npmi = topic_coherence_npmi(&tops, &docs);
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            for (i, words) in tops.iter().enumerate() {
                writeln!(w, "topic_{i}\t{}", words.join(" "))?;
            }
            writeln!(w, "npmi\t{npmi:.6}")?;
            Ok(())
        }
        Command::InspectAttention {
            checkpoint,
            input,
            out,
        } => {
            let ckpt = checkpoint::load(&checkpoint)?;
            let (cfg, model, pipeline) = restore(ckpt)?;
            let raws = load_raw(&input)?;
            let first = raws.first().ok_or_else(|| {
                std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty input")
            })?;
            let mut sample = pipeline.encode(first)?;
            if cfg.mask_side {
                sample.side = uss_core::corpus::Side::Absent;
            }
            let item = pipeline.item(&sample, model.cfg.topics);
            let (summary, traces) = model.trace_attention(&item, &cfg.decode_params())?;
            write_attention_csv(&out, &traces)?;
            println!("{}\t{}", sample.id, pipeline.vocab.decode(&summary));
            println!("wrote {} steps to {}", traces.len(), out.display());
            Ok(())
        }
    }
}

fn write_attention_csv(
    path: &Path,
    traces: &[uss_core::decoder::AttentionTrace],
) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "step,kind,index,weight")?;
    for (step, trace) in traces.iter().enumerate() {
        for (i, v) in trace.z_o.iter().enumerate() {
            writeln!(w, "{step},topic,{i},{v:.12}")?;
        }
        for (i, v) in trace.z_d.iter().enumerate() {
            writeln!(w, "{step},doc,{i},{v:.12}")?;
        }
        for (i, v) in trace.z_s.iter().enumerate() {
            writeln!(w, "{step},side,{i},{v:.12}")?;
        }
    }
    w.flush()
}
