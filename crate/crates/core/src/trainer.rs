//! Minibatch SGD with step-halving learning rate, global-norm gradient
//! rescaling, per-epoch dev perplexity and checkpointing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint;
use crate::data::{batchify, Batch, Example};
use crate::error::{NmtError, Result};
use crate::model::{derive_seed, LossSummary, Model};
use crate::numerics::{ParamSet, Parameter};

/// Named random sub-streams derived from the run seed.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_DROPOUT: u64 = 2;
pub const STREAM_SHUFFLE: u64 = 3;
pub const STREAM_SYNTH: u64 = 4;

pub const REPORT_HEADER: &str = "epoch\tlr\ttrain_nll\tdev_ppl\tgrad_scale_rate";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub halve_after_epoch: usize,
    pub clip_threshold: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale recipe: 15 epochs, halving after the 10th, clip at 5.
    pub fn recipe(attention: bool) -> Self {
        TrainConfig {
            epochs: 15,
            lr0: if attention { 0.7 } else { 1.0 },
            halve_after_epoch: 10,
            clip_threshold: 5.0,
            batch_size: 128,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("epochs must be at least 1".to_string());
        }
        if !(self.lr0 > 0.0) {
            errs.push(format!("lr must be positive, got {}", self.lr0));
        }
        if !(self.clip_threshold > 0.0) {
            errs.push(format!("clip must be positive, got {}", self.clip_threshold));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be at least 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(NmtError::Config(errs))
        }
    }
}

/// Learning rate for a 1-based epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch == 0 || epoch > cfg.epochs {
        return Err(NmtError::Argument(format!(
            "epoch {epoch} outside 1..={}",
            cfg.epochs
        )));
    }
    let halvings = epoch.saturating_sub(cfg.halve_after_epoch);
    Ok(cfg.lr0 * 0.5f64.powi(halvings as i32))
}

pub fn global_norm<P: ParamSet + ?Sized>(params: &P) -> f64 {
    params.parameters().iter().map(|p| p.grad.sum_sq()).sum::<f64>().sqrt()
}

/// Rescales every gradient by `threshold / norm` when the global norm
/// exceeds `threshold`. Returns the factor applied (1.0 when untouched).
pub fn clip_rescale<P: ParamSet + ?Sized>(params: &mut P, threshold: f64) -> Result<f64> {
    let norm = global_norm(params);
    if !norm.is_finite() {
        return Err(NmtError::Numeric(format!("gradient norm is {norm}")));
    }
    if norm <= threshold {
        return Ok(1.0);
    }
    let scale = threshold / norm;
    for p in params.parameters_mut() {
        p.grad.scale(scale);
    }
    Ok(scale)
}

/// `value -= lr * grad`, then clears the gradients.
pub fn sgd_step<P: ParamSet + ?Sized>(params: &mut P, lr: f64) {
    for p in params.parameters_mut() {
        let Parameter { value, grad, .. } = p;
        for (v, g) in value.as_mut_slice().iter_mut().zip(grad.as_slice()) {
            *v -= lr * g;
        }
        grad.fill(0.0);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-token training NLL (dropout active).
    pub train_nll: f64,
    pub dev_ppl: Option<f64>,
    /// Fraction of steps whose gradient was rescaled.
    pub grad_scale_rate: f64,
    pub max_grad_norm: f64,
    pub steps: usize,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn tsv_row(&self) -> String {
        let dev = self.dev_ppl.map_or("NA".to_string(), |p| format!("{p:.6}"));
        format!(
            "{}\t{:.6}\t{:.6}\t{}\t{:.4}",
            self.epoch, self.lr, self.train_nll, dev, self.grad_scale_rate
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

/// Where to write checkpoints and reports.
#[derive(Clone, Debug)]
pub struct OutputDir {
    pub dir: PathBuf,
    pub vocab_fingerprints: Vec<String>,
}

impl OutputDir {
    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("checkpoint-epoch{epoch}"))
    }

    pub fn report_path(&self) -> PathBuf {
        self.dir.join("report.tsv")
    }

    pub fn best_path(&self) -> PathBuf {
        self.dir.join("best")
    }

    pub fn timing_path(&self) -> PathBuf {
        self.dir.join("timing.tsv")
    }
}

/// Reads the checkpoint named by the `best` marker in `dir`.
pub fn best_checkpoint(dir: &Path) -> Result<PathBuf> {
    let marker = dir.join("best");
    let name = fs::read_to_string(&marker).map_err(|e| NmtError::io(&marker, e))?;
    Ok(dir.join(name.trim()))
}

/// Summed NLL over `examples` in evaluation mode.
pub fn evaluate(model: &Model, examples: &[Example], batch_size: usize) -> Result<LossSummary> {
    let mut total = LossSummary::default();
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = Batch::from_examples(&chunk.iter().collect::<Vec<_>>());
        total.add(model.loss(&batch, false, 0)?);
    }
    Ok(total)
}

/// One pass over the training data at the epoch's learning rate.
pub fn train_epoch(model: &mut Model, examples: &[Example], cfg: &TrainConfig, epoch: usize) -> Result<EpochRecord> {
    let start = Instant::now();
    let lr = lr_at(epoch, cfg)?;
    let batches = batchify(examples, cfg.batch_size, derive_seed(derive_seed(cfg.seed, STREAM_SHUFFLE), epoch as u64))?;
    let dropout_base = derive_seed(cfg.seed, STREAM_DROPOUT);
    let mut total = LossSummary::default();
    let mut rescaled = 0usize;
    let mut max_norm = 0.0f64;
    for (b, batch) in batches.iter().enumerate() {
        let seed = derive_seed(dropout_base, ((epoch as u64) << 32) | b as u64);
        let (loss, tape) = model.forward_loss(batch, true, seed)?;
        total.add(loss);
        model.params.zero_grads();
        model.backward(&tape)?;
        let inv = 1.0 / batch.len() as f64;
        for p in model.params.parameters_mut() {
            p.grad.scale(inv);
        }
        max_norm = max_norm.max(global_norm(&model.params));
        if clip_rescale(&mut model.params, cfg.clip_threshold)? < 1.0 {
            rescaled += 1;
        }
        sgd_step(&mut model.params, lr);
    }
    Ok(EpochRecord {
        epoch,
        lr,
        train_nll: total.total_nll / total.predicted_tokens.max(1) as f64,
        dev_ppl: None,
        grad_scale_rate: rescaled as f64 / batches.len().max(1) as f64,
        max_grad_norm: max_norm,
        steps: batches.len(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| NmtError::io(path, e))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| NmtError::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| NmtError::io(path, e))
}

/// Keeps the header and the first `completed` rows of an existing report and
/// returns the best dev perplexity among them.
fn restore_report(out: &OutputDir, completed: usize) -> Result<Option<(usize, f64)>> {
    let path = out.report_path();
    let text = fs::read_to_string(&path).unwrap_or_default();
    let rows: Vec<&str> = text.lines().skip(1).take(completed).collect();
    if rows.len() != completed {
        return Err(NmtError::Argument(format!(
            "{} has {} epoch rows, resume needs {completed}",
            path.display(),
            rows.len()
        )));
    }
    let mut best: Option<(usize, f64)> = None;
    for row in &rows {
        let cols: Vec<&str> = row.split('\t').collect();
        if let (Some(e), Some(p)) = (cols.first(), cols.get(3)) {
            if let (Ok(e), Ok(p)) = (e.parse::<usize>(), p.parse::<f64>()) {
                if best.map_or(true, |(_, b)| p < b) {
                    best = Some((e, p));
                }
            }
        }
    }
    let mut kept = String::from(REPORT_HEADER);
    kept.push('\n');
    for row in rows {
        kept.push_str(row);
        kept.push('\n');
    }
    write_file(&path, &kept)?;
    Ok(best)
}

/// Trains from `completed` finished epochs up to `cfg.epochs`. With an output
/// directory, each epoch writes a checkpoint, a report row and the `best`
/// marker (lowest dev perplexity, or the latest epoch without dev data).
pub fn train(
    model: &mut Model,
    train_set: &[Example],
    dev_set: Option<&[Example]>,
    cfg: &TrainConfig,
    out: Option<&OutputDir>,
    completed: usize,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(NmtError::Argument("training set is empty".into()));
    }
    let mut best = None;
    if let Some(o) = out {
        fs::create_dir_all(&o.dir).map_err(|e| NmtError::io(&o.dir, e))?;
        if completed == 0 {
            write_file(&o.report_path(), &format!("{REPORT_HEADER}\n"))?;
            write_file(&o.timing_path(), "epoch\tseconds\n")?;
        } else {
            best = restore_report(o, completed)?;
        }
    }
    let mut report = TrainReport::default();
    for epoch in completed + 1..=cfg.epochs {
        let mut rec = train_epoch(model, train_set, cfg, epoch)?;
        if let Some(dev) = dev_set.filter(|d| !d.is_empty()) {
            rec.dev_ppl = Some(evaluate(model, dev, cfg.batch_size)?.perplexity()?);
        }
        let improved = match (rec.dev_ppl, best) {
            (Some(p), Some((_, b))) => p < b,
            _ => true,
        };
        if improved {
            best = Some((epoch, rec.dev_ppl.unwrap_or(f64::INFINITY)));
        }
        if let Some(o) = out {
            let ck = o.checkpoint_path(epoch);
            checkpoint::save(&ck, model, &o.vocab_fingerprints, epoch)?;
            append_line(&o.report_path(), &rec.tsv_row())?;
            append_line(&o.timing_path(), &format!("{epoch}\t{:.3}", rec.seconds))?;
            if improved {
                write_file(&o.best_path(), &format!("checkpoint-epoch{epoch}\n"))?;
            }
        }
        progress(&rec);
        report.epochs.push(rec);
    }
    report.best_epoch = best.map(|(e, _)| e);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn recipe_schedule() {
        let cfg = TrainConfig::recipe(false);
        let lrs: Vec<f64> = (1..=15).map(|e| lr_at(e, &cfg).unwrap()).collect();
        let mut expected = vec![1.0; 10];
        expected.extend([0.5, 0.25, 0.125, 0.0625, 0.03125]);
        assert_eq!(lrs, expected);
        assert!(lr_at(0, &cfg).is_err());
        assert!(lr_at(16, &cfg).is_err());
        assert_eq!(lr_at(11, &TrainConfig::recipe(true)).unwrap(), 0.35);
    }

    fn params(values: &[&[f64]]) -> Vec<Parameter> {
        values
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let mut p = Parameter::zeros(format!("p{i}"), 1, g.len());
                p.grad = Tensor::vector(g.to_vec());
                p
            })
            .collect()
    }

    #[test]
    fn clipping_examples() {
        let mut p = params(&[&[3.0], &[0.0]]);
        assert_eq!(clip_rescale(&mut p, 5.0).unwrap(), 1.0);
        assert_eq!(p[0].grad.as_slice(), &[3.0]);
        let mut p = params(&[&[10.0]]);
        assert_eq!(clip_rescale(&mut p, 5.0).unwrap(), 0.5);
        assert_eq!(p[0].grad.as_slice(), &[5.0]);
        let mut p = params(&[&[f64::NAN]]);
        assert!(matches!(clip_rescale(&mut p, 5.0), Err(NmtError::Numeric(_))));
    }

    #[test]
    fn sgd_examples() {
        let mut p = params(&[&[0.2]]);
        p[0].value = Tensor::vector(vec![1.0]);
        let mut q = p.clone();
        sgd_step(&mut q, 0.0);
        assert_eq!(q[0].value.as_slice(), &[1.0]);
        sgd_step(&mut p, 1.0);
        assert_eq!(p[0].value.as_slice(), &[0.8]);
        assert_eq!(p[0].grad.as_slice(), &[0.0]);

        // frozen gradient: two half steps equal one full step
        let mut a = params(&[&[0.25, -0.5]]);
        let mut b = a.clone();
        sgd_step(&mut a, 1.0);
        for _ in 0..2 {
            b[0].grad = Tensor::vector(vec![0.25, -0.5]);
            sgd_step(&mut b, 0.5);
        }
        assert_eq!(a[0].value, b[0].value);
    }

    #[test]
    fn validation_collects_every_problem() {
        let mut cfg = TrainConfig::recipe(false);
        cfg.epochs = 0;
        cfg.batch_size = 0;
        match cfg.validate() {
            Err(NmtError::Config(v)) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
