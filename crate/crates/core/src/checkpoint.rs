//! Versioned binary checkpoints: model config, vocabulary fingerprints, the
//! epoch counter and every named parameter, bit-exact.
//!
//! Layout (little endian): magic, u32 version, length-prefixed config text,
//! fingerprint list, u64 epoch, parameter records (name, rows, cols, f64
//! values), then a sha256 of everything before it.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{NmtError, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::numerics::ParamSet;

const MAGIC: &[u8; 8] = b"MSNMTCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Source fingerprints in order, then the target's.
    pub vocab_fingerprints: Vec<String>,
    /// Number of completed epochs.
    pub epoch: usize,
}

pub fn config_to_text(cfg: &ModelConfig) -> String {
    let vocabs: Vec<String> = cfg.src_vocab.iter().map(|v| v.to_string()).collect();
    format!(
        "mode={}\nattention={}\nlayers={}\nhidden={}\nsrc_vocab={}\ntgt_vocab={}\nwindow={}\ndropout={:?}\n",
        cfg.mode,
        cfg.attention,
        cfg.layers,
        cfg.hidden,
        vocabs.join(","),
        cfg.tgt_vocab,
        cfg.window,
        cfg.dropout
    )
}

pub fn config_from_text(text: &str) -> Result<ModelConfig> {
    let bad = |m: String| NmtError::Checkpoint(m);
    let mut get = std::collections::HashMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed config line `{line}`")))?;
        get.insert(k, v);
    }
    let field = |k: &str| get.get(k).copied().ok_or_else(|| bad(format!("config lacks `{k}`")));
    let num = |k: &str| -> Result<usize> {
        field(k)?
            .parse()
            .map_err(|_| bad(format!("config `{k}` is not an integer")))
    };
    let cfg = ModelConfig {
        mode: field("mode")?.parse().map_err(bad)?,
        attention: field("attention")?.parse().map_err(bad)?,
        layers: num("layers")?,
        hidden: num("hidden")?,
        src_vocab: field("src_vocab")?
            .split(',')
            .map(|s| s.parse().map_err(|_| bad("bad src_vocab".into())))
            .collect::<Result<_>>()?,
        tgt_vocab: num("tgt_vocab")?,
        window: num("window")?,
        dropout: field("dropout")?
            .parse()
            .map_err(|_| bad("bad dropout".into()))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

pub fn to_bytes(model: &Model, vocab_fingerprints: &[String], epoch: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_bytes(&mut out, config_to_text(&model.config).as_bytes());
    out.extend_from_slice(&(vocab_fingerprints.len() as u32).to_le_bytes());
    for f in vocab_fingerprints {
        put_bytes(&mut out, f.as_bytes());
    }
    out.extend_from_slice(&(epoch as u64).to_le_bytes());
    let params = model.params.parameters();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        put_bytes(&mut out, p.name.as_bytes());
        out.extend_from_slice(&(p.value.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u64).to_le_bytes());
        for v in p.value.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(NmtError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| NmtError::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(NmtError::Checkpoint("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(NmtError::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(NmtError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let config = config_from_text(&r.string()?)?;
    let nf = r.u32()? as usize;
    let vocab_fingerprints = (0..nf).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let epoch = r.u64()? as usize;
    let mut params = ModelParams::zeros(&config);
    let np = r.u32()? as usize;
    {
        let mut slots = params.parameters_mut();
        if np != slots.len() {
            return Err(NmtError::Checkpoint(format!(
                "checkpoint has {np} parameters, config implies {}",
                slots.len()
            )));
        }
        for slot in slots.iter_mut() {
            let name = r.string()?;
            let (rows, cols) = (r.u64()? as usize, r.u64()? as usize);
            if name != slot.name || (rows, cols) != slot.shape() {
                return Err(NmtError::Checkpoint(format!(
                    "parameter `{name}` {rows}x{cols} does not match `{}` {:?}",
                    slot.name,
                    slot.shape()
                )));
            }
            for v in slot.value.as_mut_slice() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            }
        }
    }
    if r.pos != body.len() {
        return Err(NmtError::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(Checkpoint {
        model: Model { config, params },
        vocab_fingerprints,
        epoch,
    })
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save(path: &Path, model: &Model, vocab_fingerprints: &[String], epoch: usize) -> Result<()> {
    let bytes = to_bytes(model, vocab_fingerprints, epoch);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| NmtError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| NmtError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| NmtError::io(path, e))?;
    from_bytes(&bytes)
}
