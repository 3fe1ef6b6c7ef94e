//! `lsttts` command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lsttts::checkpoint::load_checkpoint;
use lsttts::corpus::{generate_toy_corpus, Corpus};
use lsttts::diagnostics::{dump_attention, eval_content_integrity, eval_style_transfer, RunConfig};
use lsttts::gradsuite::{gradient_suite, SUITE_TOL};
use lsttts::infer::{synthesize, SynthesisRequest};
use lsttts::train::Trainer;
use lsttts::{LstTts, MelSpectrogram, PhonemeSequence};

#[derive(Parser)]
#[command(name = "lsttts", version, about = "Local style token text-to-speech toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// `key = value` run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy corpus into a directory.
    GenCorpus {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes metrics.csv, model.ckpt and config.txt.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus directory (generated from the config when absent).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Synthesize with a style reference mel.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        /// Space- or comma-separated phoneme ids.
        #[arg(long)]
        phonemes: String,
        #[arg(long)]
        style_ref: PathBuf,
        #[arg(long)]
        speaker_ref: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Prefix for attention map dumps.
        #[arg(long)]
        attention: Option<PathBuf>,
        #[arg(long)]
        max_frames: Option<usize>,
    },
    /// Synthesize with styles sampled from the local token codebook.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        phonemes: String,
        #[arg(long)]
        speaker_ref: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        attention: Option<PathBuf>,
        #[arg(long)]
        max_frames: Option<usize>,
    },
    /// Finite-difference gradient suite; exit 0 iff every check passes.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of seeds per check.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Proxy metrics for a trained checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Report file (printed to stdout as well).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print checkpoint metadata and parameter shapes.
    InspectCkpt {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

/// Usage problems detected after argument parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: String) -> anyhow::Error {
    anyhow!(UsageError(msg))
}

fn load_run_config(args: &ConfigArgs) -> Result<RunConfig> {
    let text = match &args.config {
        Some(p) => fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = args.set.clone();
    if let Some(s) = args.seed {
        overrides.push(format!("seed={s}"));
    }
    RunConfig::parse(&text, &overrides).map_err(|e| usage(e.to_string()))
}

fn parse_phonemes(s: &str, vocab: usize) -> Result<PhonemeSequence> {
    let ids = s
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().map_err(|_| usage(format!("bad phoneme id `{t}`"))))
        .collect::<Result<Vec<_>>>()?;
    PhonemeSequence::new(ids, vocab).map_err(|e| usage(e.to_string()))
}

fn load_model(path: &Path) -> Result<LstTts<f32>> {
    Ok(load_checkpoint::<f32>(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .model)
}

fn corpus_for(cfg: &RunConfig, dir: Option<&Path>) -> Result<Corpus<f32>> {
    Ok(match dir {
        Some(d) => Corpus::import(d).with_context(|| format!("reading corpus {}", d.display()))?,
        None => generate_toy_corpus(&cfg.corpus)?,
    })
}

fn write_outputs(out: &Path, result: &lsttts::infer::SynthesisResult<f32>, attention: Option<&PathBuf>) -> Result<()> {
    result.mel.save(out)?;
    println!(
        "frames={} stop_frame={} style_length={}",
        result.mel.len(),
        result.stop_frame.map_or("none".into(), |s| s.to_string()),
        result.style_length_used
    );
    if let Some(prefix) = attention {
        let files = dump_attention(&result.attention, prefix)?;
        println!("attention_files={}", files.len());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { cfg, out } => {
            let rc = load_run_config(&cfg)?;
            let corpus = generate_toy_corpus::<f32>(&rc.corpus)?;
            corpus.export(&out)?;
            println!("utterances={} speakers={}", corpus.utterances.len(), corpus.speakers.len());
        }
        Command::Train { cfg, corpus, out, resume } => {
            let rc = load_run_config(&cfg)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let resolved = rc.to_text();
            fs::write(out.join("config.txt"), &resolved)?;
            eprint!("{resolved}");
            let corpus = corpus_for(&rc, corpus.as_deref())?;
            let mut tc = rc.train.clone();
            tc.metrics_path = Some(out.join("metrics.csv"));
            tc.ckpt_path = Some(out.join("model.ckpt"));
            let mut trainer = match resume {
                Some(p) => Trainer::resume(load_checkpoint(&p)?, &corpus, &tc)?,
                None => Trainer::new(LstTts::new(rc.model.clone())?, &corpus, &tc)?,
            };
            let report = trainer.run(&corpus, &tc)?;
            if let Some(last) = report.losses.last() {
                println!("step={} loss_total={}", trainer.step, last[0]);
            }
        }
        Command::Synth { ckpt, phonemes, style_ref, speaker_ref, out, attention, max_frames } => {
            let model = load_model(&ckpt)?;
            let c = parse_phonemes(&phonemes, model.config.vocab)?;
            let style = model.features(&MelSpectrogram::load(&style_ref)?, &style_ref.display().to_string())?;
            let speaker = match speaker_ref {
                Some(p) => Some(model.features(&MelSpectrogram::load(&p)?, &p.display().to_string())?),
                None => None,
            };
            let mut req = SynthesisRequest::reference(c, style, speaker);
            req.max_frames = max_frames;
            write_outputs(&out, &synthesize(&model, &req)?, attention.as_ref())?;
        }
        Command::Sample { ckpt, phonemes, speaker_ref, seed, out, attention, max_frames } => {
            let model = load_model(&ckpt)?;
            let c = parse_phonemes(&phonemes, model.config.vocab)?;
            let speaker = match speaker_ref {
                Some(p) => Some(model.features(&MelSpectrogram::load(&p)?, &p.display().to_string())?),
                None => None,
            };
            let mut req = SynthesisRequest::sampled(c, speaker, seed);
            req.max_frames = max_frames;
            write_outputs(&out, &synthesize(&model, &req)?, attention.as_ref())?;
        }
        Command::Gradcheck { cfg, seeds } => {
            let rc = load_run_config(&cfg)?;
            if seeds == 0 {
                bail!(usage("--seeds must be positive".into()));
            }
            let base = rc.train.seed;
            let seeds: Vec<u64> = (0..seeds).map(|i| base.wrapping_add(i)).collect();
            let entries = gradient_suite(&seeds)?;
            let mut ok = true;
            for e in &entries {
                let verdict = if e.passes() { "ok" } else { "FAIL" };
                ok &= e.passes();
                println!(
                    "{:<28} max_rel_error={:.3e} checked={} excluded={} worst=({:.3e}, {:.3e}) {verdict}",
                    e.name, e.max_rel_error, e.checked, e.excluded, e.worst_values.0, e.worst_values.1
                );
            }
            if !ok {
                bail!("gradient check above tolerance {SUITE_TOL:e}");
            }
        }
        Command::Eval { cfg, ckpt, corpus, out } => {
            let rc = load_run_config(&cfg)?;
            let model = load_model(&ckpt)?;
            let corpus = corpus_for(&rc, corpus.as_deref())?;
            let seeds: Vec<u64> = (0..rc.eval_trials as u64).map(|i| rc.eval_seed.wrapping_add(i)).collect();
            let a = eval_style_transfer(&model, &corpus, &seeds, rc.max_frames)?;
            let b = eval_content_integrity(&model, &corpus, &seeds, rc.max_frames)?;
            let text = format!("{}\n{}", a.to_text(), b.to_text());
            print!("{text}");
            if let Some(p) = out {
                fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::InspectCkpt { ckpt } => {
            let c = load_checkpoint::<f32>(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            println!("step = {}", c.step);
            println!("adam_step = {}", c.adam.as_ref().map_or("none".into(), |a| a.step.to_string()));
            println!("average_speaker = {}", c.model.average_speaker.is_some());
            print!("{}", c.model.config.to_text());
            println!("parameters = {} ({} scalars)", c.model.params.len(), c.model.params.num_scalars());
            for (_, p) in c.model.params.iter() {
                println!("{} {:?} norm={:.6}", p.name, p.value.shape(), p.value.sq_norm().sqrt());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let usage_error = e.downcast_ref::<UsageError>().is_some();
            let kind = if usage_error { "usage" } else { "runtime" };
            eprintln!("error: {kind}: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(if usage_error { 2 } else { 1 })
        }
    }
}
