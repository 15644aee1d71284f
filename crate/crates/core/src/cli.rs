//! Command-line front end: `train`, `translate`, `score`, `gradcheck`, `synth`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::{RunConfig, KEYS};
use crate::data::{encode_corpus, load_parallel, Vocabulary};
use crate::decoding::{translate_file, TranslateOptions, DEFAULT_BEAM};
use crate::error::{NmtError, Result};
use crate::evaluation::score_files;
use crate::gradcheck::{gradcheck, GradcheckConfig, THRESHOLD};
use crate::model::{derive_seed, AttentionMode, Model, ModelMode};
use crate::synth::{generate, SynthConfig, Task};
use crate::trainer::{best_checkpoint, train, OutputDir, STREAM_INIT, STREAM_SYNTH};

#[derive(Parser, Debug)]
#[command(name = "msnmt", version, about = "Multi-source LSTM translation: train, translate, score")]
pub struct Cli {
    /// Run seed; overrides `seed` from a config file
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes vocabularies, checkpoints, report.tsv and a `best` marker
    Train(TrainArgs),
    /// Beam-search translation of line-aligned source files
    Translate(TranslateArgs),
    /// Corpus BLEU of a hypothesis file against one reference file
    Score(ScoreArgs),
    /// Compare analytic gradients with central finite differences
    Gradcheck(GradcheckArgs),
    /// Write a synthetic corpus as train/dev/test splits
    Synth(SynthArgs),
}

#[derive(Args, Debug, Default)]
#[command(after_help = key_table())]
pub struct TrainArgs {
    /// Config file of `key = value` lines; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from the latest checkpoint in out_dir
    #[arg(long)]
    pub resume: bool,
    /// Any config key as `key=value`; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub attention: Option<String>,
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub window: Option<String>,
    #[arg(long)]
    pub dropout: Option<String>,
    #[arg(long)]
    pub init_range: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub halve_after: Option<String>,
    #[arg(long)]
    pub clip: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub max_len: Option<String>,
    #[arg(long)]
    pub vocab_size: Option<String>,
    #[arg(long)]
    pub train_src1: Option<String>,
    #[arg(long)]
    pub train_src2: Option<String>,
    #[arg(long)]
    pub train_tgt: Option<String>,
    #[arg(long)]
    pub dev_src1: Option<String>,
    #[arg(long)]
    pub dev_src2: Option<String>,
    #[arg(long)]
    pub dev_tgt: Option<String>,
    #[arg(long)]
    pub out_dir: Option<String>,
}

fn key_table() -> String {
    let mut s = String::from("Config keys (flag --key or file line `key = value`):\n");
    for (k, d, h) in KEYS {
        let d = if d.is_empty() { "unset" } else { d };
        s.push_str(&format!("  {k:<12} {h} [default: {d}]\n"));
    }
    s
}

impl TrainArgs {
    fn overrides(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("mode", &self.mode),
            ("attention", &self.attention),
            ("layers", &self.layers),
            ("hidden", &self.hidden),
            ("window", &self.window),
            ("dropout", &self.dropout),
            ("init_range", &self.init_range),
            ("epochs", &self.epochs),
            ("lr", &self.lr),
            ("halve_after", &self.halve_after),
            ("clip", &self.clip),
            ("batch_size", &self.batch_size),
            ("max_len", &self.max_len),
            ("vocab_size", &self.vocab_size),
            ("train_src1", &self.train_src1),
            ("train_src2", &self.train_src2),
            ("train_tgt", &self.train_tgt),
            ("dev_src1", &self.dev_src1),
            ("dev_src2", &self.dev_src2),
            ("dev_tgt", &self.dev_tgt),
            ("out_dir", &self.out_dir),
        ]
    }

    /// Defaults, then the config file, then `--set`, then named flags.
    pub fn resolve(&self, seed: Option<u64>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let mut errs = Vec::new();
        for s in &self.sets {
            match s.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = cfg.set(k.trim(), v) {
                        errs.push(e);
                    }
                }
                None => errs.push(format!("--set expects KEY=VALUE, got `{s}`")),
            }
        }
        for (k, v) in self.overrides() {
            if let Some(v) = v {
                if let Err(e) = cfg.set(k, v) {
                    errs.push(e);
                }
            }
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if !errs.is_empty() {
            return Err(NmtError::Config(errs));
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    /// Checkpoint file, or a training output directory (uses its `best` marker)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory holding src1.vocab, src2.vocab and tgt.vocab [default: the checkpoint's directory]
    #[arg(long)]
    pub vocab_dir: Option<PathBuf>,
    /// Expected model mode; a different checkpoint mode is rejected
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub src1: PathBuf,
    #[arg(long)]
    pub src2: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BEAM)]
    pub beam: usize,
    /// Fixed output length cap [default: 2 x longest source + 5]
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Write per-step attention weights as TSV
    #[arg(long)]
    pub dump_attention: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub lowercase: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "single")]
    pub mode: String,
    #[arg(long, default_value = "none")]
    pub attention: String,
    /// Check all six mode and attention combinations
    #[arg(long)]
    pub all: bool,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub hidden: usize,
    #[arg(long, default_value_t = 20)]
    pub vocab: usize,
    #[arg(long, default_value_t = 5)]
    pub length: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    /// Perturb this parameter's analytic gradient (the check must then fail)
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value = "copy")]
    pub task: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub train: usize,
    #[arg(long, default_value_t = 100)]
    pub dev: usize,
    #[arg(long, default_value_t = 100)]
    pub test: usize,
    /// Word types for the copy task
    #[arg(long, default_value_t = 50)]
    pub vocab: usize,
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a, cli.seed),
        Command::Translate(a) => cmd_translate(&a),
        Command::Score(a) => cmd_score(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a, cli.seed.unwrap_or(1)),
        Command::Synth(a) => cmd_synth(&a, cli.seed.unwrap_or(1)),
    }
}

const VOCAB_FILES: [&str; 2] = ["src1.vocab", "src2.vocab"];
const TGT_VOCAB_FILE: &str = "tgt.vocab";

fn latest_checkpoint(dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| NmtError::io(dir, e))?;
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(|e| NmtError::io(dir, e))?;
        let name = entry.file_name();
        let Some(n) = name
            .to_str()
            .and_then(|s| s.strip_prefix("checkpoint-epoch"))
            .and_then(|s| s.parse::<usize>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| n > *b) {
            best = Some((n, entry.path()));
        }
    }
    Ok(best)
}

fn cmd_train(a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let cfg = a.resolve(seed)?;
    cfg.validate_for_training()?;
    eprintln!("resolved configuration:\n{}", cfg.to_text());
    let out_dir = cfg.out_dir.clone().expect("validated");
    let n_src = cfg.mode.sources();

    let mut paths: Vec<&Path> = vec![cfg.train_src1.as_deref().expect("validated")];
    if n_src == 2 {
        paths.push(cfg.train_src2.as_deref().expect("validated"));
    }
    paths.push(cfg.train_tgt.as_deref().expect("validated"));
    let corpus = load_parallel(&paths, cfg.max_len)?;
    eprintln!(
        "training tuples: {} kept, {} dropped over max_len {}",
        corpus.tuples.len(),
        corpus.dropped,
        cfg.max_len
    );

    fs::create_dir_all(&out_dir).map_err(|e| NmtError::io(&out_dir, e))?;
    let cap = if cfg.vocab_size == 0 { usize::MAX } else { cfg.vocab_size };
    let vocabs: Vec<Vocabulary> = if a.resume {
        let mut v: Vec<Vocabulary> = VOCAB_FILES[..n_src]
            .iter()
            .map(|f| Vocabulary::load(&out_dir.join(f)))
            .collect::<Result<_>>()?;
        v.push(Vocabulary::load(&out_dir.join(TGT_VOCAB_FILE))?);
        v
    } else {
        let v: Vec<Vocabulary> = (0..=n_src)
            .map(|k| Vocabulary::build(corpus.side(k), cap))
            .collect::<Result<_>>()?;
        for (k, voc) in v.iter().enumerate() {
            let name = if k == n_src { TGT_VOCAB_FILE } else { VOCAB_FILES[k] };
            voc.save(&out_dir.join(name))?;
        }
        v
    };
    let fingerprints: Vec<String> = vocabs.iter().map(Vocabulary::fingerprint).collect();
    let (src_vocabs, tgt_vocab) = vocabs.split_at(n_src);
    let src_refs: Vec<&Vocabulary> = src_vocabs.iter().collect();
    let tgt_vocab = &tgt_vocab[0];
    let train_set = encode_corpus(&corpus, &src_refs, tgt_vocab);

    let dev_set = match (&cfg.dev_src1, &cfg.dev_tgt) {
        (Some(s1), Some(t)) => {
            let mut p: Vec<&Path> = vec![s1];
            if let Some(s2) = &cfg.dev_src2 {
                p.push(s2);
            }
            p.push(t);
            Some(encode_corpus(&load_parallel(&p, usize::MAX)?, &src_refs, tgt_vocab))
        }
        _ => None,
    };

    let model_cfg = cfg.model_config(src_vocabs.iter().map(Vocabulary::len).collect(), tgt_vocab.len());
    let (mut model, completed) = if a.resume {
        let (epoch, path) = latest_checkpoint(&out_dir)?.ok_or_else(|| {
            NmtError::Argument(format!("--resume: no checkpoint in {}", out_dir.display()))
        })?;
        let ck = checkpoint::load(&path)?;
        if ck.model.config != model_cfg {
            return Err(NmtError::Compatibility(format!(
                "{} was trained with a different model configuration",
                path.display()
            )));
        }
        if ck.vocab_fingerprints != fingerprints {
            return Err(NmtError::Compatibility(format!(
                "{} does not match the vocabularies in {}",
                path.display(),
                out_dir.display()
            )));
        }
        eprintln!("resuming after epoch {epoch}");
        (ck.model, ck.epoch)
    } else {
        (
            Model::new(model_cfg, derive_seed(cfg.seed, STREAM_INIT), cfg.init_range())?,
            0,
        )
    };
    let resolved = out_dir.join("config.txt");
    fs::write(&resolved, cfg.to_text()).map_err(|e| NmtError::io(&resolved, e))?;

    let out = OutputDir {
        dir: out_dir,
        vocab_fingerprints: fingerprints,
    };
    let report = train(
        &mut model,
        &train_set,
        dev_set.as_deref(),
        &cfg.train_config(),
        Some(&out),
        completed,
        |r| {
            eprintln!(
                "epoch {} lr {:.4} train_nll {:.4} dev_ppl {} clipped {:.3} max_norm {:.3} ({:.1}s)",
                r.epoch,
                r.lr,
                r.train_nll,
                r.dev_ppl.map_or("NA".into(), |p| format!("{p:.3}")),
                r.grad_scale_rate,
                r.max_grad_norm,
                r.seconds
            )
        },
    )?;
    if let Some(b) = report.best_epoch {
        eprintln!("best epoch: {b}");
    }
    Ok(())
}

fn cmd_translate(a: &TranslateArgs) -> Result<()> {
    let ck_path = if a.checkpoint.is_dir() {
        best_checkpoint(&a.checkpoint)?
    } else {
        a.checkpoint.clone()
    };
    let ck = checkpoint::load(&ck_path)?;
    let model = ck.model;
    if let Some(m) = &a.mode {
        let want: ModelMode = m.parse().map_err(NmtError::Argument)?;
        if want != model.config.mode {
            return Err(NmtError::Compatibility(format!(
                "checkpoint {} holds a {} model, not {want}",
                ck_path.display(),
                model.config.mode
            )));
        }
    }
    let mut inputs: Vec<&Path> = vec![&a.src1];
    if let Some(s2) = &a.src2 {
        inputs.push(s2);
    }
    if inputs.len() != model.config.sources() {
        return Err(NmtError::Compatibility(format!(
            "checkpoint {} is a {} model and takes {} source file(s), got {}",
            ck_path.display(),
            model.config.mode,
            model.config.sources(),
            inputs.len()
        )));
    }
    let vocab_dir = match &a.vocab_dir {
        Some(d) => d.clone(),
        None => ck_path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let src_vocabs: Vec<Vocabulary> = VOCAB_FILES[..inputs.len()]
        .iter()
        .map(|f| Vocabulary::load(&vocab_dir.join(f)))
        .collect::<Result<_>>()?;
    let tgt_vocab = Vocabulary::load(&vocab_dir.join(TGT_VOCAB_FILE))?;
    let mut fps: Vec<String> = src_vocabs.iter().map(Vocabulary::fingerprint).collect();
    fps.push(tgt_vocab.fingerprint());
    if fps != ck.vocab_fingerprints {
        return Err(NmtError::Compatibility(format!(
            "vocabularies in {} do not match checkpoint {}",
            vocab_dir.display(),
            ck_path.display()
        )));
    }
    let opts = TranslateOptions {
        beam: a.beam,
        max_len: a.max_len,
        dump_attention: a.dump_attention.clone(),
    };
    if opts.dump_attention.is_some() && model.config.attention == AttentionMode::None {
        eprintln!("note: model has no attention; the attention dump will hold only a header");
    }
    let refs: Vec<&Vocabulary> = src_vocabs.iter().collect();
    let n = translate_file(&model, &refs, &tgt_vocab, &inputs, &a.output, &opts)?;
    eprintln!("translated {n} lines with {}", ck_path.display());
    Ok(())
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let report = score_files(&a.hyp, &a.reference, a.lowercase)?;
    println!("{report}");
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, seed: u64) -> Result<()> {
    let combos: Vec<(ModelMode, AttentionMode)> = if a.all {
        ModelMode::ALL
            .iter()
            .flat_map(|&m| [AttentionMode::None, AttentionMode::LocalP].map(|att| (m, att)))
            .collect()
    } else {
        vec![(
            a.mode.parse().map_err(NmtError::Argument)?,
            a.attention.parse().map_err(NmtError::Argument)?,
        )]
    };
    let mut failed = Vec::new();
    for (mode, att) in combos {
        let mut cfg = GradcheckConfig::new(mode, att);
        cfg.layers = a.layers;
        cfg.hidden = a.hidden;
        cfg.vocab = a.vocab;
        cfg.length = a.length;
        cfg.epsilon = a.epsilon;
        cfg.seed = seed;
        let report = gradcheck(&cfg, a.corrupt.as_deref())?;
        println!("# {mode} {att}: worst relative error {:.3e}", report.worst());
        println!("parameter\tmax_rel_error\tmax_abs_error");
        for p in &report.params {
            println!("{}\t{:.3e}\t{:.3e}", p.name, p.max_rel_error, p.max_abs_error);
        }
        failed.extend(report.failures().into_iter().map(|n| format!("{mode}/{att}:{n}")));
    }
    if failed.is_empty() {
        println!("gradient check passed (threshold {THRESHOLD:e})");
        Ok(())
    } else {
        Err(NmtError::Numeric(format!(
            "gradient check failed (threshold {THRESHOLD:e}) for: {}",
            failed.join(", ")
        )))
    }
}

fn cmd_synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let task: Task = a.task.parse().map_err(NmtError::Argument)?;
    let cfg = match task {
        Task::Copy => SynthConfig::copy(a.vocab),
        Task::Triangulate => SynthConfig::triangulate(),
    };
    let base = derive_seed(seed, STREAM_SYNTH);
    for (k, (stem, n)) in [("train", a.train), ("dev", a.dev), ("test", a.test)].into_iter().enumerate() {
        let corpus = generate(&cfg, n, derive_seed(base, k as u64))?;
        corpus.write(&a.out, stem)?;
    }
    eprintln!(
        "wrote {task} corpus ({} / {} / {} lines) to {}",
        a.train,
        a.dev,
        a.test,
        a.out.display()
    );
    Ok(())
}
