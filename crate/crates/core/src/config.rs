//! Flat `key = value` run configuration with command-line overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{NmtError, Result};
use crate::model::{AttentionMode, ModelConfig, ModelMode};
use crate::trainer::TrainConfig;

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("mode", "single", "single | multi-basic | multi-childsum"),
    ("attention", "none", "none | local-p"),
    ("layers", "4", "LSTM layers in every encoder and the decoder"),
    ("hidden", "1000", "hidden and embedding size"),
    ("window", "10", "local attention half-width D"),
    ("dropout", "0.2 (0.3 with attention)", "dropout rate on layer inputs"),
    ("init_range", "0.1 (0.08 with attention)", "uniform init range"),
    ("epochs", "15", "training epochs"),
    ("lr", "1.0 (0.7 with attention)", "initial learning rate"),
    ("halve_after", "10", "halve the learning rate every epoch after this one"),
    ("clip", "5.0", "rescale gradients whose global norm exceeds this"),
    ("batch_size", "128", "sentences per minibatch"),
    ("max_len", "50", "drop training tuples with a longer side"),
    ("vocab_size", "0", "vocabulary cap per language including reserved ids (0 keeps all)"),
    ("seed", "1", "run seed"),
    ("train_src1", "", "first source, training side"),
    ("train_src2", "", "second source, training side (multi modes)"),
    ("train_tgt", "", "target, training side"),
    ("dev_src1", "", "first source, dev side"),
    ("dev_src2", "", "second source, dev side"),
    ("dev_tgt", "", "target, dev side"),
    ("out_dir", "", "directory for checkpoints, vocabularies and reports"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: ModelMode,
    pub attention: AttentionMode,
    pub layers: usize,
    pub hidden: usize,
    pub window: usize,
    pub dropout: Option<f64>,
    pub init_range: Option<f64>,
    pub epochs: usize,
    pub lr: Option<f64>,
    pub halve_after: usize,
    pub clip: f64,
    pub batch_size: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub train_src1: Option<PathBuf>,
    pub train_src2: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub dev_src1: Option<PathBuf>,
    pub dev_src2: Option<PathBuf>,
    pub dev_tgt: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: ModelMode::Single,
            attention: AttentionMode::None,
            layers: 4,
            hidden: 1000,
            window: 10,
            dropout: None,
            init_range: None,
            epochs: 15,
            lr: None,
            halve_after: 10,
            clip: 5.0,
            batch_size: 128,
            max_len: 50,
            vocab_size: 0,
            seed: 1,
            train_src1: None,
            train_src2: None,
            train_tgt: None,
            dev_src1: None,
            dev_src2: None,
            dev_tgt: None,
            out_dir: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}`: cannot parse `{value}`"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let path = || Some(PathBuf::from(v));
        match key {
            "mode" => self.mode = v.parse().map_err(|e| format!("`mode`: {e}"))?,
            "attention" => self.attention = v.parse().map_err(|e| format!("`attention`: {e}"))?,
            "layers" => self.layers = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "window" => self.window = parse(key, v)?,
            "dropout" => self.dropout = Some(parse(key, v)?),
            "init_range" => self.init_range = Some(parse(key, v)?),
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = Some(parse(key, v)?),
            "halve_after" => self.halve_after = parse(key, v)?,
            "clip" => self.clip = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "vocab_size" => self.vocab_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "train_src1" => self.train_src1 = path(),
            "train_src2" => self.train_src2 = path(),
            "train_tgt" => self.train_tgt = path(),
            "dev_src1" => self.dev_src1 = path(),
            "dev_src2" => self.dev_src2 = path(),
            "dev_tgt" => self.dev_tgt = path(),
            "out_dir" => self.out_dir = path(),
            _ => return Err(format!("unknown config key `{key}`")),
        }
        Ok(())
    }

    /// Applies a config file. Blank lines and `#` comments are skipped; every
    /// problem in the file is reported together.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| NmtError::io(path, e))?;
        let mut errs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v) {
                        errs.push(format!("{}:{}: {e}", path.display(), n + 1));
                    }
                }
                None => errs.push(format!("{}:{}: expected `key = value`", path.display(), n + 1)),
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(NmtError::Config(errs))
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or(if self.has_attention() { 0.7 } else { 1.0 })
    }

    pub fn dropout(&self) -> f64 {
        self.dropout.unwrap_or(if self.has_attention() { 0.3 } else { 0.2 })
    }

    pub fn init_range(&self) -> f64 {
        self.init_range.unwrap_or(if self.has_attention() { 0.08 } else { 0.1 })
    }

    fn has_attention(&self) -> bool {
        self.attention == AttentionMode::LocalP
    }

    /// Problems that make a training run impossible, all at once.
    pub fn validate_for_training(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (key, val) in [
            ("train_src1", &self.train_src1),
            ("train_tgt", &self.train_tgt),
            ("out_dir", &self.out_dir),
        ] {
            if val.is_none() {
                errs.push(format!("missing required key `{key}`"));
            }
        }
        let multi = self.mode.sources() == 2;
        if multi && self.train_src2.is_none() {
            errs.push(format!("mode {} needs `train_src2`", self.mode));
        }
        if !multi && self.train_src2.is_some() {
            errs.push(format!("mode {} takes one source but `train_src2` is set", self.mode));
        }
        let dev_given = [&self.dev_src1, &self.dev_src2, &self.dev_tgt]
            .iter()
            .any(|p| p.is_some());
        if dev_given {
            if self.dev_src1.is_none() || self.dev_tgt.is_none() {
                errs.push("dev data needs both `dev_src1` and `dev_tgt`".to_string());
            }
            if multi != self.dev_src2.is_some() {
                errs.push(format!("`dev_src2` must be set exactly when mode {} has two sources", self.mode));
            }
        }
        if self.vocab_size != 0 && self.vocab_size <= crate::data::RESERVED.len() {
            errs.push(format!("`vocab_size` must exceed {} or be 0", crate::data::RESERVED.len()));
        }
        if self.max_len == 0 {
            errs.push("`max_len` must be at least 1".to_string());
        }
        if !(self.init_range() > 0.0) {
            errs.push("`init_range` must be positive".to_string());
        }
        let probe = ModelConfig {
            mode: self.mode,
            attention: self.attention,
            layers: self.layers,
            hidden: self.hidden,
            src_vocab: vec![crate::data::RESERVED.len() + 1; self.mode.sources()],
            tgt_vocab: crate::data::RESERVED.len() + 1,
            window: self.window,
            dropout: self.dropout(),
        };
        if let Err(NmtError::Config(e)) = probe.validate() {
            errs.extend(e);
        }
        if let Err(NmtError::Config(e)) = self.train_config().validate() {
            errs.extend(e);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(NmtError::Config(errs))
        }
    }

    pub fn model_config(&self, src_vocab: Vec<usize>, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            attention: self.attention,
            layers: self.layers,
            hidden: self.hidden,
            src_vocab,
            tgt_vocab,
            window: self.window,
            dropout: self.dropout(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr0: self.lr(),
            halve_after_epoch: self.halve_after,
            clip_threshold: self.clip,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    /// Fully resolved configuration in file syntax.
    pub fn to_text(&self) -> String {
        let p = |x: &Option<PathBuf>| x.as_ref().map_or(String::new(), |p| p.display().to_string());
        let mut s = String::new();
        let _ = writeln!(s, "mode = {}", self.mode);
        let _ = writeln!(s, "attention = {}", self.attention);
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let _ = writeln!(s, "window = {}", self.window);
        let _ = writeln!(s, "dropout = {}", self.dropout());
        let _ = writeln!(s, "init_range = {}", self.init_range());
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "lr = {}", self.lr());
        let _ = writeln!(s, "halve_after = {}", self.halve_after);
        let _ = writeln!(s, "clip = {}", self.clip);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "max_len = {}", self.max_len);
        let _ = writeln!(s, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        for (k, v) in [
            ("train_src1", &self.train_src1),
            ("train_src2", &self.train_src2),
            ("train_tgt", &self.train_tgt),
            ("dev_src1", &self.dev_src1),
            ("dev_src2", &self.dev_src2),
            ("dev_tgt", &self.dev_tgt),
            ("out_dir", &self.out_dir),
        ] {
            if v.is_some() {
                let _ = writeln!(s, "{k} = {}", p(v));
            }
        }
        s
    }
}
