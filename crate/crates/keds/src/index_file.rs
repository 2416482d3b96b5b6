//! `KEDI` index files. The indexed rows live in their own `KEDB` file; this
//! stores only what search adds on top of them.
//!
//! ```text
//! "KEDI" | version u32 | kind u8 (0 flat, 1 ivf) | 3 pad | rows u64
//! ivf only: nprobe u64 | centroids as a KEDB block | per list: len u64, ids u64...
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use keds_core::store::{EmbeddingMatrix, FlatIndex, IvfIndex, SearchIndex};

use crate::error::{eof_as, Error, FormatError, Result};
use crate::kedb;

pub const MAGIC: [u8; 4] = *b"KEDI";
pub const VERSION: u32 = 1;

pub fn write_index<W: Write>(w: &mut W, index: &SearchIndex) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let kind = match index {
        SearchIndex::Flat(_) => 0u8,
        SearchIndex::Ivf { .. } => 1,
    };
    w.write_all(&[kind, 0, 0, 0])?;
    w.write_all(&(index.matrix().count() as u64).to_le_bytes())?;
    if let SearchIndex::Ivf { index, nprobe } = index {
        w.write_all(&(*nprobe as u64).to_le_bytes())?;
        let centroids = EmbeddingMatrix::new(index.matrix().dim(), index.centroids().to_vec(), false)
            .map_err(std::io::Error::other)?;
        kedb::write_matrix(w, &centroids)?;
        for list in index.posting_lists() {
            w.write_all(&(list.len() as u64).to_le_bytes())?;
            for &id in list {
                w.write_all(&(id as u64).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R, what: &'static str) -> Result<u64, FormatError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(eof_as(what))?;
    Ok(u64::from_le_bytes(b))
}

/// Rebuilds the index over `matrix`, which must be the rows it was built on.
pub fn read_index<R: Read>(r: &mut R, matrix: Arc<EmbeddingMatrix>) -> Result<SearchIndex, FormatError> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head).map_err(eof_as("KEDI header"))?;
    let magic: [u8; 4] = head[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::Magic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(FormatError::Version {
            what: "KEDI",
            found: version,
        });
    }
    let rows = read_u64(r, "KEDI header")?;
    if rows != matrix.count() as u64 {
        return Err(FormatError::Invalid(format!(
            "index covers {rows} rows but the embedding file has {}",
            matrix.count()
        )));
    }
    match head[8] {
        0 => Ok(SearchIndex::Flat(FlatIndex::new(matrix))),
        1 => {
            let nprobe = read_u64(r, "KEDI nprobe")? as usize;
            let centroids = kedb::read_matrix(r)?;
            if centroids.dim() != matrix.dim() {
                return Err(FormatError::Invalid(format!(
                    "centroid width {} differs from row width {}",
                    centroids.dim(),
                    matrix.dim()
                )));
            }
            let mut lists = Vec::with_capacity(centroids.count());
            for _ in 0..centroids.count() {
                let len = read_u64(r, "KEDI posting list")?;
                if len > rows {
                    return Err(FormatError::Invalid(format!("posting list of {len} ids over {rows} rows")));
                }
                let list = (0..len)
                    .map(|_| read_u64(r, "KEDI posting list").map(|id| id as usize))
                    .collect::<Result<Vec<_>, _>>()?;
                lists.push(list);
            }
            let index = IvfIndex::from_parts(matrix, centroids.into_values(), lists)?;
            if nprobe == 0 || nprobe > index.partitions() {
                return Err(FormatError::Invalid(format!(
                    "nprobe {nprobe} outside 1..={}",
                    index.partitions()
                )));
            }
            Ok(SearchIndex::Ivf { index, nprobe })
        }
        k => Err(FormatError::Invalid(format!("unknown index kind {k}"))),
    }
}

pub fn save(path: &Path, index: &SearchIndex) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    write_index(&mut w, index).and_then(|_| w.flush()).map_err(Error::io(path))
}

pub fn load(path: &Path, matrix: Arc<EmbeddingMatrix>) -> Result<SearchIndex> {
    let file = File::open(path).map_err(Error::io(path))?;
    read_index(&mut BufReader::new(file), matrix).map_err(Error::format(path))
}
