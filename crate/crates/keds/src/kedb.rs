//! `KEDB` embedding files: a 24-byte little-endian header followed by
//! `count * dim` row-major f32 values.
//!
//! ```text
//! 0..4    "KEDB"
//! 4..8    version (u32)
//! 8..12   dim (u32)
//! 12..20  count (u64)
//! 20      normalized flag (u8)
//! 21..24  padding
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use keds_core::store::EmbeddingMatrix;

use crate::error::{eof_as, Error, FormatError, Result};

pub const MAGIC: [u8; 4] = *b"KEDB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

pub fn write_matrix<W: Write>(w: &mut W, m: &EmbeddingMatrix) -> std::io::Result<()> {
    let dim = u32::try_from(m.dim()).map_err(|_| std::io::Error::other("dimension does not fit in u32"))?;
    let mut header = [0u8; HEADER_LEN];
    header[0..4].copy_from_slice(&MAGIC);
    header[4..8].copy_from_slice(&VERSION.to_le_bytes());
    header[8..12].copy_from_slice(&dim.to_le_bytes());
    header[12..20].copy_from_slice(&(m.count() as u64).to_le_bytes());
    header[20] = m.is_normalized() as u8;
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(m.values().len() * 4);
    for x in m.values() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_matrix<R: Read>(r: &mut R) -> Result<EmbeddingMatrix, FormatError> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header).map_err(eof_as("KEDB header"))?;
    let magic: [u8; 4] = header[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::Magic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(FormatError::Version {
            what: "KEDB",
            found: version,
        });
    }
    let dim = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
    let count = u64::from_le_bytes(header[12..20].try_into().expect("8 bytes"));
    let normalized = match header[20] {
        0 => false,
        1 => true,
        f => return Err(FormatError::Invalid(format!("normalized flag {f} is neither 0 nor 1"))),
    };
    let len = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(dim))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| FormatError::Invalid(format!("{count} rows of width {dim} overflow")))?;
    // Read through `take` so a lying header cannot force a huge allocation.
    let mut bytes = Vec::new();
    r.take(len as u64).read_to_end(&mut bytes)?;
    if bytes.len() != len {
        return Err(FormatError::Truncated("KEDB values"));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(EmbeddingMatrix::new(dim, values, normalized)?)
}

pub fn save(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    write_matrix(&mut w, m).and_then(|_| w.flush()).map_err(Error::io(path))
}

/// Loads a whole file; bytes past the declared rows are an error.
pub fn load(path: &Path) -> Result<EmbeddingMatrix> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut r = BufReader::new(file);
    let m = read_matrix(&mut r).map_err(Error::format(path))?;
    let mut extra = [0u8; 1];
    match r.read(&mut extra).map_err(Error::io(path))? {
        0 => Ok(m),
        _ => Err(Error::Format {
            path: path.into(),
            source: FormatError::Invalid("trailing bytes after the last row".into()),
        }),
    }
}
