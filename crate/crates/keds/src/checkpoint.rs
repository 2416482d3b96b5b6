//! `KEDC` checkpoints.
//!
//! ```text
//! "KEDC" | version u32 | step u64 | config digest u64
//! total steps u64 | optimizer steps (m, a) u64 u64
//! settings: len u32, JSON {train, composer, composer_seed}
//! segments: count u32, then per segment: name len u32, name, KEDB block
//! rng: seed [u8; 32] | stream u64 | word_pos u128
//! ```
//!
//! Segments are named `phi_m.<param>`, `phi_a.<param>`, `opt_m.m.<param>`,
//! `opt_m.v.<param>`, `opt_a.m.<param>` and `opt_a.v.<param>`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use keds_core::bkp::BkpParams;
use keds_core::encoders::ComposerConfig;
use keds_core::numeric::Tensor;
use keds_core::store::EmbeddingMatrix;
use keds_core::trainer::{Checkpoint, OptimizerState, RngState, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{eof_as, Error, FormatError, Result};
use crate::kedb;

pub const MAGIC: [u8; 4] = *b"KEDC";
pub const VERSION: u32 = 1;

/// The frozen composer a checkpoint was trained against. It is rebuilt from
/// its seed rather than stored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComposerStamp {
    pub config: ComposerConfig,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Settings {
    train: TrainConfig,
    composer: ComposerConfig,
    composer_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub checkpoint: Checkpoint,
    pub composer: ComposerStamp,
}

fn segments(c: &Checkpoint) -> Vec<(String, &Tensor<f32>)> {
    let mut out = Vec::new();
    for (stream, params, opt) in [("m", &c.phi_m, &c.opt_m), ("a", &c.phi_a, &c.opt_a)] {
        let named = params.named_tensors();
        for (name, t) in &named {
            out.push((format!("phi_{stream}.{name}"), *t));
        }
        for ((name, _), t) in named.iter().zip(&opt.m) {
            out.push((format!("opt_{stream}.m.{name}"), t));
        }
        for ((name, _), t) in named.iter().zip(&opt.v) {
            out.push((format!("opt_{stream}.v.{name}"), t));
        }
    }
    out
}

fn as_matrix(t: &Tensor<f32>) -> std::io::Result<EmbeddingMatrix> {
    match t.shape() {
        [_, cols] => EmbeddingMatrix::new(*cols, t.data().to_vec(), false).map_err(std::io::Error::other),
        s => Err(std::io::Error::other(format!("cannot store a tensor of shape {s:?}"))),
    }
}

pub fn write_checkpoint<W: Write>(w: &mut W, file: &CheckpointFile) -> std::io::Result<()> {
    let c = &file.checkpoint;
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&c.step.to_le_bytes())?;
    w.write_all(&c.config.digest().to_le_bytes())?;
    w.write_all(&c.total_steps.to_le_bytes())?;
    w.write_all(&c.opt_m.step.to_le_bytes())?;
    w.write_all(&c.opt_a.step.to_le_bytes())?;
    let settings = serde_json::to_vec(&Settings {
        train: c.config.clone(),
        composer: file.composer.config,
        composer_seed: file.composer.seed,
    })?;
    w.write_all(&(settings.len() as u32).to_le_bytes())?;
    w.write_all(&settings)?;
    let segs = segments(c);
    w.write_all(&(segs.len() as u32).to_le_bytes())?;
    for (name, t) in segs {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        kedb::write_matrix(w, &as_matrix(t)?)?;
    }
    w.write_all(&c.rng.seed)?;
    w.write_all(&c.rng.stream.to_le_bytes())?;
    w.write_all(&c.rng.word_pos.to_le_bytes())
}

fn array<const N: usize, R: Read>(r: &mut R, what: &'static str) -> Result<[u8; N], FormatError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(eof_as(what))?;
    Ok(b)
}

fn u32_at<R: Read>(r: &mut R, what: &'static str) -> Result<u32, FormatError> {
    array(r, what).map(u32::from_le_bytes)
}

fn u64_at<R: Read>(r: &mut R, what: &'static str) -> Result<u64, FormatError> {
    array(r, what).map(u64::from_le_bytes)
}

fn bytes<R: Read>(r: &mut R, len: usize, what: &'static str) -> Result<Vec<u8>, FormatError> {
    let mut b = Vec::new();
    r.take(len as u64).read_to_end(&mut b)?;
    if b.len() != len {
        return Err(FormatError::Truncated(what));
    }
    Ok(b)
}

/// Moves the named segments into `params` and a fresh optimizer state,
/// checking every shape against the configured architecture.
fn take_stream(
    stored: &mut HashMap<String, Tensor<f32>>,
    stream: &str,
    mut params: BkpParams,
    opt_step: u64,
) -> Result<(BkpParams, OptimizerState), FormatError> {
    let names: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let mut take = |key: String, shape: &[usize]| {
        let t = stored
            .remove(&key)
            .ok_or_else(|| FormatError::Invalid(format!("missing segment {key}")))?;
        if t.shape() != shape {
            return Err(FormatError::Invalid(format!(
                "segment {key} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    let mut m = Vec::with_capacity(names.len());
    let mut v = Vec::with_capacity(names.len());
    let mut values = Vec::with_capacity(names.len());
    for (name, shape) in &names {
        values.push(take(format!("phi_{stream}.{name}"), shape)?);
        m.push(take(format!("opt_{stream}.m.{name}"), shape)?);
        v.push(take(format!("opt_{stream}.v.{name}"), shape)?);
    }
    for (slot, t) in params.tensors_mut().into_iter().zip(values) {
        *slot = t;
    }
    Ok((params, OptimizerState { step: opt_step, m, v }))
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<CheckpointFile, FormatError> {
    let magic: [u8; 4] = array(r, "KEDC header")?;
    if magic != MAGIC {
        return Err(FormatError::Magic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = u32_at(r, "KEDC header")?;
    if version != VERSION {
        return Err(FormatError::Version {
            what: "KEDC",
            found: version,
        });
    }
    let step = u64_at(r, "KEDC header")?;
    let digest = u64_at(r, "KEDC header")?;
    let total_steps = u64_at(r, "KEDC header")?;
    let opt_m_step = u64_at(r, "KEDC header")?;
    let opt_a_step = u64_at(r, "KEDC header")?;
    let len = u32_at(r, "KEDC settings")? as usize;
    let settings: Settings = serde_json::from_slice(&bytes(r, len, "KEDC settings")?)
        .map_err(|e| FormatError::Invalid(format!("settings: {e}")))?;
    if settings.train.digest() != digest {
        return Err(FormatError::Invalid("training config does not match the header digest".into()));
    }
    let count = u32_at(r, "KEDC segment table")?;
    let mut stored = HashMap::new();
    for _ in 0..count {
        let len = u32_at(r, "KEDC segment name")? as usize;
        let name = String::from_utf8(bytes(r, len, "KEDC segment name")?)
            .map_err(|_| FormatError::Invalid("segment name is not UTF-8".into()))?;
        let m = kedb::read_matrix(r)?;
        let t = Tensor::matrix(m.count(), m.dim(), m.into_values())?;
        if stored.insert(name.clone(), t).is_some() {
            return Err(FormatError::Invalid(format!("duplicate segment {name}")));
        }
    }
    let bkp = settings.train.bkp;
    let (phi_m, opt_m) = take_stream(&mut stored, "m", BkpParams::init(bkp, 0)?, opt_m_step)?;
    let (phi_a, opt_a) = take_stream(&mut stored, "a", BkpParams::init(bkp, 0)?, opt_a_step)?;
    if let Some(name) = stored.keys().next() {
        return Err(FormatError::Invalid(format!("unexpected segment {name}")));
    }
    let rng = RngState {
        seed: array(r, "KEDC rng state")?,
        stream: u64_at(r, "KEDC rng state")?,
        word_pos: u128::from_le_bytes(array(r, "KEDC rng state")?),
    };
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(FormatError::Invalid("trailing bytes after the rng state".into()));
    }
    Ok(CheckpointFile {
        checkpoint: Checkpoint {
            config: settings.train,
            step,
            total_steps,
            phi_m,
            phi_a,
            opt_m,
            opt_a,
            rng,
        },
        composer: ComposerStamp {
            config: settings.composer,
            seed: settings.composer_seed,
        },
    })
}

pub fn save(path: &Path, file: &CheckpointFile) -> Result<()> {
    let f = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, file).and_then(|_| w.flush()).map_err(Error::io(path))
}

pub fn load(path: &Path) -> Result<CheckpointFile> {
    let f = File::open(path).map_err(Error::io(path))?;
    read_checkpoint(&mut BufReader::new(f)).map_err(Error::format(path))
}
