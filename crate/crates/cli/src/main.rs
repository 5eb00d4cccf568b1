mod config;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mapgn_core::corpus::{load_paired, load_unpaired, synth_corpus, write_paired, write_unpaired};
use mapgn_core::experiment::{
    decode_texts, encode_pairs, encode_sentences, fine_tune, grad_check_config, model_grad_check,
};
use mapgn_core::masking::{build_pretrain_example, masking_report, preview_line};
use mapgn_core::metrics::evaluate;
use mapgn_core::model::{ModelConfig, Params};
use mapgn_core::rng::keyed_rng;
use mapgn_core::tensor::Float;
use mapgn_core::training::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use mapgn_core::training::trainer::{
    transfer_params, write_loss_row, StepRecord, TrainData, Trainer, LOSS_LOG_HEADER,
};
use mapgn_core::vocab::Vocab;
use serde_json::json;

use config::{config_help, Dtype, MaskingChoice, RunConfig};

const INIT_KEY: u64 = 1;
const SYNTH_KEY: u64 = 2;
const PREVIEW_KEY: u64 = 3;

#[derive(Debug)]
pub struct CliError {
    kind: &'static str,
    code: u8,
    message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { kind: "config", code: 2, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Self { kind: "data", code: 3, message: message.into() }
    }
}

impl From<mapgn_core::Error> for CliError {
    fn from(e: mapgn_core::Error) -> Self {
        use mapgn_core::Error as E;
        let (kind, code) = match &e {
            E::NonFinite(_) => ("numeric", 4),
            E::Shape { .. } | E::Contract(_) => ("internal", 1),
            _ => ("data", 3),
        };
        Self { kind, code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "mapgn",
    version,
    about = "Pointer-generator seq2seq with span-masked pre-training",
    after_long_help = config_help()
)]
struct Cli {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true, env = "MAPGN_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the configuration's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as JSON.
    PrintConfig,
    /// Generate the synthetic spoken-to-normalized corpus.
    SynthData {
        #[arg(long, env = "MAPGN_DATA_DIR")]
        out: PathBuf,
    },
    /// Build a character vocabulary from text or TSV files.
    BuildVocab {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long, env = "MAPGN_VOCAB")]
        out: PathBuf,
    },
    /// Span-masked pre-training on unpaired sentences.
    Pretrain {
        #[arg(long, env = "MAPGN_VOCAB")]
        vocab: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Masking preset; overrides the configuration.
        #[arg(long)]
        masking: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Loss log CSV (step,loss,lr,seconds).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from a checkpoint with optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Supervised training on pairs, optionally from a pre-trained checkpoint.
    Finetune {
        #[arg(long, env = "MAPGN_VOCAB")]
        vocab: PathBuf,
        #[arg(long)]
        train: PathBuf,
        /// Validation pairs for best-checkpoint selection.
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Pre-trained checkpoint to transfer parameters from; omit for a
        /// randomly initialized baseline.
        #[arg(long)]
        init_from: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, conflicts_with = "init_from")]
        resume: Option<PathBuf>,
    },
    /// Decode sources (text lines, or the first column of a .tsv file).
    Decode {
        #[arg(long, env = "MAPGN_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long, env = "MAPGN_VOCAB")]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output file; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score hypotheses against references (text lines, or the second column
    /// of a .tsv file).
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Report JSON; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-sentence CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Free-form key=value labels copied into the report, e.g.
        /// method=mapgn pairs=500.
        #[arg(long = "label", value_parser = parse_label)]
        labels: Vec<(String, String)>,
    },
    /// Show corrupted examples or masking statistics.
    MaskPreview {
        #[arg(long, env = "MAPGN_VOCAB")]
        vocab: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        masking: Option<String>,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Print statistics over this many corruptions instead of examples.
        #[arg(long)]
        stats: Option<usize>,
    },
    /// Finite-difference check of the full model's gradients (64-bit).
    GradCheck {
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Wide CSV of BLEU-3 by training-set size and method from evaluate
    /// reports labelled with pairs=N and method=NAME.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_label(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

fn is_tsv(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "tsv")
}

/// Raw lines without skipping blanks, so line `i` stays sentence `i`.
fn read_lines(p: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
    Ok(text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l).to_string()).collect())
}

fn write_out(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => {
            let mut s = std::io::stdout().lock();
            s.write_all(text.as_bytes())?;
        }
    }
    Ok(())
}

fn load_vocab(p: &Path) -> Result<Vocab> {
    Vocab::load(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
}

fn model_for(cfg: &RunConfig, vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    }
}

struct LossLog {
    out: Option<BufWriter<File>>,
    every: u64,
}

impl LossLog {
    fn open(path: Option<&Path>, every: u64, append: bool) -> Result<Self> {
        let out = match path {
            None => None,
            Some(p) => {
                let fresh = !append || !p.exists();
                let f = File::options().create(true).append(append).write(true).truncate(!append).open(p)?;
                let mut w = BufWriter::new(f);
                if fresh {
                    writeln!(w, "{LOSS_LOG_HEADER}")?;
                }
                Some(w)
            }
        };
        Ok(Self { out, every: every.max(1) })
    }

    fn record(&mut self, r: &StepRecord) -> mapgn_core::Result<()> {
        if let Some(w) = &mut self.out {
            if r.step == 1 || r.step % self.every == 0 {
                write_loss_row(w, r)?;
            }
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        if let Some(w) = &mut self.out {
            w.flush()?;
        }
        Ok(())
    }
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut rules = cfg.synth.rules.clone();
    rules.seed = cfg.seed;
    let corpus = synth_corpus(&rules, cfg.synth.unpaired, cfg.synth.sizes(), &mut keyed_rng(cfg.seed, SYNTH_KEY))?;
    write_unpaired(&out.join("unpaired.txt"), &corpus.unpaired)?;
    write_paired(&out.join("train.tsv"), &corpus.train)?;
    write_paired(&out.join("valid.tsv"), &corpus.valid)?;
    write_paired(&out.join("test.tsv"), &corpus.test)?;
    std::fs::write(out.join("rules.json"), serde_json::to_string_pretty(&rules).expect("serializable"))?;
    println!(
        "{}",
        json!({
            "unpaired": corpus.unpaired.len(),
            "train": corpus.train.len(),
            "valid": corpus.valid.len(),
            "test": corpus.test.len(),
            "alphabet": rules.alphabet().len(),
        })
    );
    Ok(())
}

fn cmd_build_vocab(cfg: &RunConfig, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut texts = Vec::new();
    for p in inputs {
        if is_tsv(p) {
            for (a, b) in load_paired(p, cfg.data.max_chars)? {
                texts.push(a);
                texts.push(b);
            }
        } else {
            texts.extend(load_unpaired(p, cfg.data.max_chars)?);
        }
    }
    let vocab = Vocab::build(texts.iter().map(|s| s.as_str()), cfg.vocab.min_count, cfg.vocab.max_size)?;
    vocab.save(out)?;
    println!("{}", json!({ "size": vocab.len(), "sha256": vocab.sha256() }));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_loop<F: Float>(
    trainer: &mut Trainer<F>,
    vocab: &Vocab,
    valid: &[(String, String)],
    cfg: &RunConfig,
    out: &Path,
    log: Option<&Path>,
    append_log: bool,
) -> Result<(Params<F>, serde_json::Value)> {
    let mut log = LossLog::open(log, trainer.config.log_every, append_log)?;
    let every = trainer.config.checkpoint_every;
    let sha = vocab.sha256();
    let result = fine_tune(trainer, vocab, valid, &cfg.decode.limits(), |t, r| {
        log.record(r)?;
        if every > 0 && r.step % every == 0 {
            save_checkpoint(out, &t.checkpoint_meta(&sha), &t.params, Some(&t.optimizer))?;
        }
        Ok(())
    })?;
    log.finish()?;
    let final_step = trainer.step_count();
    let meta = trainer.checkpoint_meta(&sha);
    let is_final = result.selection.is_none_or(|s| s.step == final_step);
    if is_final {
        save_checkpoint(out, &meta, &result.params, Some(&trainer.optimizer))?;
    } else {
        let meta = mapgn_core::training::checkpoint::CheckpointMeta {
            step: result.selection.map_or(final_step, |s| s.step),
            ..meta
        };
        save_checkpoint(out, &meta, &result.params, None)?;
    }
    let last = result.records.last();
    let summary = json!({
        "steps": final_step,
        "final_loss": last.map(|r| r.loss),
        "final_token_loss": last.map(|r| r.token_loss),
        "selection": result.selection,
        "checkpoint": out.display().to_string(),
    });
    Ok((result.params, summary))
}

fn cmd_pretrain<F: Float>(
    cfg: &RunConfig,
    vocab_path: &Path,
    data: &Path,
    masking: Option<&str>,
    out: &Path,
    log: Option<&Path>,
    resume: Option<&Path>,
) -> Result<()> {
    let vocab = load_vocab(vocab_path)?;
    let spec = match masking {
        Some(name) => MaskingChoice::Preset(name.to_string()).resolve().map_err(|e| CliError::config(e.to_string()))?,
        None => cfg.masking.resolve().map_err(|e| CliError::config(e.to_string()))?,
    };
    let sentences = encode_sentences(&vocab, &load_unpaired(data, cfg.data.max_chars)?);
    let train = cfg.train_config(&cfg.pretrain);
    let data = TrainData::Unpaired { sentences, spec };
    let mut trainer = match resume {
        Some(p) => {
            let ck: Checkpoint<F> = load_checkpoint(p)?;
            ck.expect_vocab(&vocab)?;
            Trainer::resume(ck, train, data)?
        }
        None => {
            let model = model_for(cfg, &vocab);
            let params = Params::init(&model, &mut keyed_rng(cfg.seed, INIT_KEY));
            Trainer::new(model, train, params, data)?
        }
    };
    let (_, summary) = train_loop(&mut trainer, &vocab, &[], cfg, out, log, resume.is_some())?;
    println!("{summary}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_finetune<F: Float>(
    cfg: &RunConfig,
    vocab_path: &Path,
    train_path: &Path,
    valid_path: Option<&Path>,
    init_from: Option<&Path>,
    out: &Path,
    log: Option<&Path>,
    resume: Option<&Path>,
) -> Result<()> {
    let vocab = load_vocab(vocab_path)?;
    let pairs = load_paired(train_path, cfg.data.max_chars)?;
    let valid = match valid_path {
        Some(p) => load_paired(p, cfg.data.max_chars)?,
        None => Vec::new(),
    };
    let train = cfg.train_config(&cfg.finetune);
    let data = TrainData::Paired(encode_pairs(&vocab, &pairs));
    let model = model_for(cfg, &vocab);
    let mut transfer = None;
    let mut trainer = if let Some(p) = resume {
        let ck: Checkpoint<F> = load_checkpoint(p)?;
        ck.expect_vocab(&vocab)?;
        Trainer::resume(ck, train, data)?
    } else {
        let mut rng = keyed_rng(cfg.seed, INIT_KEY);
        let params = match init_from {
            Some(p) => {
                let ck: Checkpoint<F> = load_checkpoint(p)?;
                ck.expect_vocab(&vocab)?;
                let (params, report) = transfer_params(&ck.params, &model, &mut rng)?;
                transfer = Some(json!({
                    "from": p.display().to_string(),
                    "copied": report.copied.len(),
                    "fresh": report.fresh,
                    "dropped": report.dropped,
                }));
                params
            }
            None => Params::init(&model, &mut rng),
        };
        Trainer::new(model, train, params, data)?
    };
    let (_, mut summary) = train_loop(&mut trainer, &vocab, &valid, cfg, out, log, resume.is_some())?;
    summary["transfer"] = transfer.unwrap_or(serde_json::Value::Null);
    println!("{summary}");
    Ok(())
}

fn cmd_decode<F: Float>(cfg: &RunConfig, checkpoint: &Path, vocab_path: &Path, input: &Path, out: Option<&Path>) -> Result<()> {
    let vocab = load_vocab(vocab_path)?;
    let ck: Checkpoint<F> = load_checkpoint(checkpoint)?;
    ck.expect_vocab(&vocab)?;
    let sources: Vec<String> = if is_tsv(input) {
        load_paired(input, cfg.data.max_chars)?.into_iter().map(|p| p.0).collect()
    } else {
        read_lines(input)?
    };
    let hyps = decode_texts(&ck.params, &ck.meta.model, &vocab, &sources, &cfg.decode.limits())?;
    let mut text = String::new();
    for h in hyps {
        text.push_str(&h);
        text.push('\n');
    }
    write_out(out, &text)
}

fn cmd_evaluate(
    cfg: &RunConfig,
    hyp: &Path,
    reference: &Path,
    out: Option<&Path>,
    csv: Option<&Path>,
    labels: &[(String, String)],
) -> Result<()> {
    let hyps = read_lines(hyp)?;
    let refs: Vec<String> = if is_tsv(reference) {
        load_paired(reference, cfg.data.max_chars)?.into_iter().map(|p| p.1).collect()
    } else {
        read_lines(reference)?
    };
    if hyps.len() != refs.len() {
        return Err(CliError::data(format!(
            "{} hypotheses in {} but {} references in {}",
            hyps.len(),
            hyp.display(),
            refs.len(),
            reference.display()
        )));
    }
    let report = evaluate(&hyps, &refs)?;
    if let Some(p) = csv {
        std::fs::write(p, report.rows_csv())?;
    }
    let labels: BTreeMap<&str, &str> = labels.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    let mut value = serde_json::to_value(&report).expect("serializable");
    value["labels"] = json!(labels);
    write_out(out, &format!("{}\n", serde_json::to_string_pretty(&value).expect("serializable")))
}

fn cmd_mask_preview(
    cfg: &RunConfig,
    vocab_path: &Path,
    data: &Path,
    masking: Option<&str>,
    count: usize,
    stats: Option<usize>,
) -> Result<()> {
    let vocab = load_vocab(vocab_path)?;
    let spec = match masking {
        Some(name) => MaskingChoice::Preset(name.to_string()).resolve().map_err(|e| CliError::config(e.to_string()))?,
        None => cfg.masking.resolve().map_err(|e| CliError::config(e.to_string()))?,
    };
    let sentences: Vec<_> = encode_sentences(&vocab, &load_unpaired(data, cfg.data.max_chars)?)
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect();
    let mut rng = keyed_rng(cfg.seed, PREVIEW_KEY);
    if let Some(n) = stats {
        let s = masking_report(&sentences, &spec, vocab.len(), &mut rng, n)?;
        let (m, r, u) = s.fractions();
        let value = json!({
            "spec": spec,
            "positions": s.positions,
            "fractions": { "mask": m, "random": r, "unchanged": u },
            "random_in_span_rate": s.containment_rate(),
            "special_random": s.special_random,
            "span_length_violations": s.span_length_violations,
            "outside_span_changes": s.outside_span_changes,
        });
        return write_out(None, &format!("{}\n", serde_json::to_string_pretty(&value).expect("serializable")));
    }
    let mut text = String::from("original\tencoder_input\tdecoder_input\ttargets\ta\tb\n");
    for s in sentences.iter().take(count) {
        let ex = build_pretrain_example(s, &spec, vocab.len(), &mut rng)?;
        text.push_str(&preview_line(&vocab, s, &ex)?);
        text.push('\n');
    }
    write_out(None, &text)
}

fn cmd_grad_check(cfg: &RunConfig, tol: f64) -> Result<()> {
    let started = std::time::Instant::now();
    let r = model_grad_check(&grad_check_config(), cfg.seed)?;
    println!(
        "{}",
        json!({
            "max_rel_err": r.max_rel_err,
            "tensors": r.tensors,
            "coordinates": r.coordinates,
            "tolerance": tol,
            "seconds": started.elapsed().as_secs_f64(),
        })
    );
    if r.max_rel_err < tol {
        Ok(())
    } else {
        Err(CliError {
            kind: "numeric",
            code: 4,
            message: format!("gradient check failed: max relative error {} >= {tol}", r.max_rel_err),
        })
    }
}

fn cmd_report(inputs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    // (pairs, method) -> BLEU-3 values over runs.
    let mut cells: BTreeMap<(u64, String), Vec<f64>> = BTreeMap::new();
    for p in inputs {
        let text = std::fs::read_to_string(p)?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
        let label = |k: &str| v["labels"][k].as_str().map(str::to_string);
        let (Some(pairs), Some(method)) = (label("pairs"), label("method")) else {
            return Err(CliError::data(format!("{}: report lacks pairs= and method= labels", p.display())));
        };
        let pairs: u64 = pairs
            .parse()
            .map_err(|_| CliError::data(format!("{}: pairs label {pairs:?} is not a number", p.display())))?;
        let bleu = v["bleu3"]
            .as_f64()
            .ok_or_else(|| CliError::data(format!("{}: missing bleu3", p.display())))?;
        cells.entry((pairs, method)).or_default().push(bleu);
    }
    let methods: Vec<String> = cells.keys().map(|(_, m)| m.clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let sizes: Vec<u64> = cells.keys().map(|(n, _)| *n).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let mut text = format!("pairs,{}\n", methods.join(","));
    for n in sizes {
        let row: Vec<String> = methods
            .iter()
            .map(|m| match cells.get(&(n, m.clone())) {
                Some(v) => format!("{:.6}", v.iter().sum::<f64>() / v.len() as f64),
                None => String::new(),
            })
            .collect();
        text.push_str(&format!("{n},{}\n", row.join(",")));
    }
    write_out(out, &text)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    macro_rules! typed {
        ($f:ident($($arg:expr),*)) => {
            match cfg.dtype {
                Dtype::F32 => $f::<f32>($($arg),*),
                Dtype::F64 => $f::<f64>($($arg),*),
            }
        };
    }
    match &cli.command {
        Command::PrintConfig => {
            write_out(None, &format!("{}\n", serde_json::to_string_pretty(&cfg).expect("serializable")))
        }
        Command::SynthData { out } => cmd_synth(&cfg, out),
        Command::BuildVocab { input, out } => cmd_build_vocab(&cfg, input, out),
        Command::Pretrain { vocab, data, masking, out, log, resume } => {
            typed!(cmd_pretrain(&cfg, vocab, data, masking.as_deref(), out, log.as_deref(), resume.as_deref()))
        }
        Command::Finetune { vocab, train, valid, init_from, out, log, resume } => typed!(cmd_finetune(
            &cfg,
            vocab,
            train,
            valid.as_deref(),
            init_from.as_deref(),
            out,
            log.as_deref(),
            resume.as_deref()
        )),
        Command::Decode { checkpoint, vocab, input, out } => {
            typed!(cmd_decode(&cfg, checkpoint, vocab, input, out.as_deref()))
        }
        Command::Evaluate { hyp, reference, out, csv, labels } => {
            cmd_evaluate(&cfg, hyp, reference, out.as_deref(), csv.as_deref(), labels)
        }
        Command::MaskPreview { vocab, data, masking, count, stats } => {
            cmd_mask_preview(&cfg, vocab, data, masking.as_deref(), *count, *stats)
        }
        Command::GradCheck { tol } => cmd_grad_check(&cfg, *tol),
        Command::Report { input, out } => cmd_report(input, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind, "message": e.message }));
            ExitCode::from(e.code)
        }
    }
}
