//! File formats and in-memory containers shared by every analysis.

mod label;
mod tensor;
mod trace;

pub use label::{LabelKind, LabelMap};
pub use tensor::{read_tensor, read_tensor_with, write_tensor, DType, ReadOptions, Tensor, MAGIC, VERSION};
pub use trace::{read_trace, TaskTrace, TraceRecord, TRACE_HEADER};

use std::path::Path;

use crate::{Error, Result};

/// Reads an `MTKT` file from disk, rejecting non-finite values.
pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let file = std::fs::File::open(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    read_tensor(std::io::BufReader::new(file))
}

/// Writes an `MTKT` file to disk and returns the byte count.
pub fn save_tensor(t: &Tensor, path: &Path) -> Result<usize> {
    let file = std::fs::File::create(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = std::io::BufWriter::new(file);
    let n = write_tensor(t, &mut w)?;
    std::io::Write::flush(&mut w).map_err(|source| Error::Io {
        offset: n as u64,
        source,
    })?;
    Ok(n)
}
