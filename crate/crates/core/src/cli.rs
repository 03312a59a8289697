//! Command-line entry point: synth, prepare, train, evaluate, decode, analyze.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{build_rank_table, cdf_csv, cdf_curve, snapshot, summary_csv, write_text, Axis, SummaryRow, Weighting};
use crate::ctc::dump_alpha_beta;
use crate::data::{self, generate_synthetic, load_prepared, Checkpoint, Corpus, SynthSpec, Utterance};
use crate::decode::{beam_decode_lexicon, Lexicon, DEFAULT_BEAM_WIDTH};
use crate::error::Error;
use crate::features::FeatureConfig;
use crate::metrics::{cer, word_errors, write_error_csv};
use crate::net::{metrics_csv, transcribe, Heads, Model, Preset, TrainConfig, Trainer, Transcripts};
use crate::vocab::{normalize_transcript, UNK};

#[derive(Debug, Parser)]
#[command(name = "mtl-ctc", version, about = "Word/character multi-task CTC speech recognition")]
pub struct Cli {
    /// Log progress to standard error (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic corpus of tone-burst "speech".
    Synth(SynthArgs),
    /// Split a manifest, build vocabularies and cache features.
    Prepare(PrepareArgs),
    /// Train a model on a prepared directory.
    Train(TrainArgs),
    /// Score a checkpoint on a prepared split.
    Evaluate(EvalArgs),
    /// Write transcripts for a prepared split.
    Decode(DecodeArgs),
    /// Recognized-word CDFs for every checkpoint of a run.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub utterances: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON or TOML file with synthesis settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of trailing manifest entries held out for validation.
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
    #[arg(long, default_value_t = 1)]
    pub min_count: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML file with training settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// both, word or char.
    #[arg(long)]
    pub heads: Option<Heads>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Valid,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Valid)]
    pub split: Split,
    /// Also decode the character head with lexicon-constrained beam search.
    #[arg(long)]
    pub beam_width: Option<usize>,
    /// Word list for beam search; defaults to the word vocabulary.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Write the character-head CTC alpha/beta tables of this utterance.
    #[arg(long)]
    pub dump_ctc: Option<String>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Valid)]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Training output directory holding `checkpoint_<epoch>.bin` files.
    #[arg(long)]
    pub run: PathBuf,
    /// Defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also emit occurrence-weighted curves.
    #[arg(long)]
    pub weighted: bool,
}

/// Training settings readable from a config file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    epochs: Option<usize>,
    seed: Option<u64>,
    lambda: Option<f64>,
    preset: Option<Preset>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    heads: Option<Heads>,
}

/// Effective training settings: flags, then the config file, then defaults.
pub fn resolve_train_config(args: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let file: TrainFile = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainFile::default(),
    };
    let d = TrainConfig::default();
    let mut cfg = TrainConfig {
        epochs: args.epochs.or(file.epochs).unwrap_or(d.epochs),
        batch_size: args.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
        lambda: args.lambda.or(file.lambda).unwrap_or(d.lambda),
        seed: args.seed.or(file.seed).unwrap_or(d.seed),
        preset: args.preset.or(file.preset).unwrap_or(d.preset),
        heads: args.heads.or(file.heads).unwrap_or(d.heads),
        adam: d.adam,
    };
    cfg.adam.learning_rate = args.lr.or(file.learning_rate).unwrap_or(d.adam.learning_rate);
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))?;
    Ok(())
}

fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    let mut spec: SynthSpec = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            if path.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text)?
            } else {
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
        }
        None => SynthSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(noise) = args.noise {
        spec.noise_level = noise;
    }
    create_dir(&args.out)?;
    let manifest = generate_synthetic(&spec, args.utterances, &args.out)?;
    println!("wrote {} utterances to {}", manifest.len(), args.out.display());
    Ok(())
}

fn prepare(args: &PrepareArgs) -> anyhow::Result<()> {
    create_dir(&args.out)?;
    let info = data::prepare(&args.manifest, &args.out, args.holdout, args.min_count, &FeatureConfig::default())?;
    println!(
        "prepared {} training and {} validation utterances (oov train {:.4}, valid {:.4})",
        info.train_utterances, info.valid_utterances, info.train_oov_rate, info.valid_oov_rate
    );
    Ok(())
}

#[derive(Serialize)]
struct RunEcho<'a> {
    data: &'a Path,
    train: &'a TrainConfig,
    network: &'a crate::net::NetworkConfig,
    char_vocab_hash: String,
    word_vocab_hash: String,
}

fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = resolve_train_config(args)?;
    let corpus = load_prepared(&args.data)?;
    let network = cfg.network(&corpus.chars, &corpus.words);
    create_dir(&args.out)?;
    let echo = RunEcho {
        data: &args.data,
        train: &cfg,
        network: &network,
        char_vocab_hash: corpus.chars.content_hash(),
        word_vocab_hash: corpus.words.content_hash(),
    };
    write_json(&args.out.join("run_config.json"), &echo)?;
    let run_value = serde_json::to_value(&echo)?;

    let mut trainer = Trainer::<f32>::new(network, cfg)?;
    let mut steps = String::from("epoch,step,loss,loss_word,loss_char\n");
    let mut recognized = String::from("epoch,head,word,count\n");
    let reports = trainer.run(&corpus, |t, report| {
        let ck = Checkpoint {
            network: t.model.config().clone(),
            char_vocab_hash: corpus.chars.content_hash(),
            word_vocab_hash: corpus.words.content_hash(),
            epoch: report.epoch,
            run: run_value.clone(),
            params: t.model.params().clone(),
            buffers: t.model.buffers().clone(),
            adam: t.adam.clone(),
        };
        ck.save(&args.out.join(format!("checkpoint_{}.bin", report.epoch)))?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for (i, l) in report.step_losses.iter().enumerate() {
            writeln!(steps, "{},{},{},{},{}", report.epoch, i + 1, l.total, opt(l.word), opt(l.char)).unwrap();
        }
        for (head, rec) in &report.recognized {
            for (w, c) in &rec.counts {
                writeln!(recognized, "{},{head},{w},{c}", report.epoch).unwrap();
            }
        }
        eprintln!("{}", report.csv_row());
        Ok(())
    })?;
    write_text(&args.out.join("metrics.csv"), &metrics_csv(&reports))?;
    write_text(&args.out.join("steps.csv"), &steps)?;
    write_text(&args.out.join("recognized.csv"), &recognized)?;
    println!("trained {} epochs into {}", reports.len(), args.out.display());
    Ok(())
}

fn load_model(data: &Path, checkpoint: &Path) -> anyhow::Result<(Corpus, Checkpoint, Model<f32>)> {
    let corpus = load_prepared(data)?;
    let ck = Checkpoint::load_for(checkpoint, &corpus.chars, &corpus.words)?;
    let model = Model::from_parts(ck.network.clone(), ck.params.clone(), ck.buffers.clone())?;
    Ok((corpus, ck, model))
}

fn split(corpus: &Corpus, which: Split) -> &[Utterance] {
    match which {
        Split::Train => &corpus.train,
        Split::Valid => &corpus.valid,
    }
}

fn evaluate(args: &EvalArgs) -> anyhow::Result<()> {
    let (corpus, ck, model) = load_model(&args.data, &args.checkpoint)?;
    let utts = split(&corpus, args.split);
    if utts.is_empty() {
        bail!("split {:?} is empty", args.split);
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    create_dir(&out)?;
    let refs: Vec<String> = utts.iter().map(|u| u.transcript.clone()).collect();
    let ids: Vec<String> = utts.iter().map(|u| u.id.clone()).collect();
    let t = transcribe(&model, utts, &corpus.chars, &corpus.words)?;

    let mut lines = vec![format!("checkpoint epoch {}, {} utterances", ck.epoch, utts.len())];
    let mut score = |name: &str, hyps: &[String]| -> anyhow::Result<()> {
        let (rate, per_utt) = word_errors(&refs, hyps)?;
        write_error_csv(&out.join(format!("errors_{name}.csv")), &ids, &per_utt)?;
        lines.push(format!(
            "{name}: WER {:.4} ({} errors / {} words), CER {:.4}",
            rate.rate(),
            rate.ops.total(),
            rate.reference_tokens,
            cer(&refs, hyps)?
        ));
        Ok(())
    };
    for (name, hyps) in [("word", &t.word), ("char", &t.char), ("combined", &t.combined)] {
        if let Some(h) = hyps {
            score(name, h)?;
        }
    }

    if args.beam_width.is_some() || args.lexicon.is_some() {
        if !model.heads().has_char() {
            bail!("beam search needs a character head");
        }
        let lex = match &args.lexicon {
            Some(path) => Lexicon::load(path, &corpus.chars)?,
            None => Lexicon::from_words(
                corpus.words.units().iter().map(String::as_str).filter(|w| !w.starts_with('<')),
                &corpus.chars,
            )?,
        };
        let space = corpus.chars.space_index().context("character alphabet has no space")?;
        let width = args.beam_width.unwrap_or(DEFAULT_BEAM_WIDTH);
        let mut hyps = Vec::with_capacity(utts.len());
        for u in utts {
            let post = model.posteriors(u.features.view())?;
            let p = post.char.expect("char head");
            let text = match beam_decode_lexicon(&p, &lex, space, width) {
                Ok(labels) => normalize_transcript(&corpus.chars.decode(&labels)),
                Err(Error::NoCompleteHypothesis) => String::new(),
                Err(e) => return Err(e.into()),
            };
            hyps.push(text);
        }
        score("char-beam", &hyps)?;
    }
    if let Some(c) = &t.combined {
        let unk = c.iter().flat_map(|s| s.split(' ')).filter(|w| *w == UNK).count();
        lines.push(format!(
            "unknowns substituted {}, dropped {}, remaining {unk}",
            t.unk_substituted, t.unk_dropped
        ));
    }

    if let Some(id) = &args.dump_ctc {
        let u = utts
            .iter()
            .find(|u| &u.id == id)
            .with_context(|| format!("no utterance {id:?} in split"))?;
        let post = model.posteriors(u.features.view())?;
        for (head, p, z) in [("char", &post.char, &u.chars), ("word", &post.word, &u.words)] {
            if let Some(p) = p {
                let path = out.join(format!("ctc_{id}_{head}.csv"));
                dump_alpha_beta(p, z, &path)?;
                lines.push(format!("wrote {}", path.display()));
            }
        }
    }
    let report = lines.join("\n") + "\n";
    write_text(&out.join("evaluation.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn transcripts_tsv(utts: &[Utterance], t: &Transcripts) -> String {
    let cols: Vec<(&str, &Vec<String>)> = [("word", &t.word), ("char", &t.char), ("combined", &t.combined)]
        .into_iter()
        .filter_map(|(n, v)| v.as_ref().map(|v| (n, v)))
        .collect();
    let mut out = String::from("id\treference");
    for (n, _) in &cols {
        write!(out, "\t{n}").unwrap();
    }
    out.push('\n');
    for (i, u) in utts.iter().enumerate() {
        write!(out, "{}\t{}", u.id, u.transcript).unwrap();
        for (_, v) in &cols {
            write!(out, "\t{}", v[i]).unwrap();
        }
        out.push('\n');
    }
    out
}

fn decode(args: &DecodeArgs) -> anyhow::Result<()> {
    let (corpus, _, model) = load_model(&args.data, &args.checkpoint)?;
    let utts = split(&corpus, args.split);
    let t = transcribe(&model, utts, &corpus.chars, &corpus.words)?;
    create_dir(&args.out)?;
    write_text(&args.out.join("transcripts.tsv"), &transcripts_tsv(utts, &t))?;
    println!("decoded {} utterances into {}", utts.len(), args.out.join("transcripts.tsv").display());
    Ok(())
}

/// `checkpoint_<epoch>.bin` files of a run, by epoch.
pub fn run_checkpoints(run: &Path) -> anyhow::Result<Vec<(usize, PathBuf)>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(run).with_context(|| format!("reading {}", run.display()))? {
        let path = entry?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("checkpoint_"))
            .and_then(|n| n.strip_suffix(".bin"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(epoch) = epoch {
            found.push((epoch, path));
        }
    }
    found.sort();
    if found.is_empty() {
        bail!("no checkpoint_<epoch>.bin files in {}", run.display());
    }
    Ok(found)
}

fn analyze(args: &AnalyzeArgs) -> anyhow::Result<()> {
    let corpus = load_prepared(&args.data)?;
    if corpus.valid.is_empty() {
        bail!("{}: no validation utterances to analyze", args.data.display());
    }
    let out = args.out.clone().unwrap_or_else(|| args.run.clone());
    create_dir(&out)?;
    let table = build_rank_table(&corpus.train_counts)?;
    let weightings: &[Weighting] = if args.weighted {
        &[Weighting::Types, Weighting::Tokens]
    } else {
        &[Weighting::Types]
    };

    let mut records: Vec<(String, Vec<crate::analysis::RecognizedWordRecord>)> = Vec::new();
    for (epoch, path) in run_checkpoints(&args.run)? {
        let ck = Checkpoint::load_for(&path, &corpus.chars, &corpus.words)?;
        let model = Model::<f32>::from_parts(ck.network.clone(), ck.params, ck.buffers)?;
        let heads = model.heads();
        for head in ["word", "char"] {
            let present = if head == "word" { heads.has_word() } else { heads.has_char() };
            if !present {
                continue;
            }
            let rec = snapshot(epoch, &model, &corpus.valid, head, &corpus.chars, &corpus.words)?;
            match records.iter_mut().find(|(h, _)| h == head) {
                Some((_, list)) => list.push(rec),
                None => records.push((head.to_string(), vec![rec])),
            }
        }
    }

    let mut summary = Vec::new();
    let mut unranked = String::from("epoch,head,word\n");
    for (head, recs) in &records {
        for &w in weightings {
            let suffix = if w == Weighting::Tokens { "_tokens" } else { "" };
            let model_name = format!("{head}{suffix}");
            for axis in Axis::ALL {
                let curves: Vec<_> = recs.iter().map(|r| (r.epoch, cdf_curve(r, &table, axis, w))).collect();
                write_text(
                    &out.join(format!("cdf_{head}_{axis}{suffix}.csv")),
                    &cdf_csv(curves.iter().map(|(e, c)| (*e, c))),
                )?;
                for (epoch, c) in &curves {
                    summary.push(SummaryRow {
                        epoch: *epoch,
                        model: model_name.clone(),
                        axis,
                        auc: c.auc(),
                    });
                    if axis == Axis::Frequency && w == Weighting::Types {
                        for word in &c.excluded {
                            writeln!(unranked, "{epoch},{head},{word}").unwrap();
                        }
                    }
                }
            }
        }
    }
    summary.sort_by(|a, b| (a.epoch, &a.model, a.axis).cmp(&(b.epoch, &b.model, b.axis)));
    write_text(&out.join("curves_summary.csv"), &summary_csv(&summary))?;
    write_text(&out.join("unranked.csv"), &unranked)?;
    println!("wrote curves for {} heads into {}", records.len(), out.display());
    Ok(())
}

pub fn execute(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Decode(a) => decode(a),
        Command::Analyze(a) => analyze(a),
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            1
        }
    }
}

fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain().map(|c| c.to_string()) {
        if msg.contains(&cause) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&cause);
    }
    msg.replace('\n', " ")
}
