//! Output directory with metadata headers and a manifest.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::io::{write_tensor, Tensor};
use crate::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST: &str = "manifest.toml";

/// Identifies the run that produced an artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunMetadata {
    pub command: String,
    pub seed: u64,
    pub config_digest: String,
}

impl RunMetadata {
    /// `#` comment lines prefixed to every CSV.
    pub fn csv_header(&self) -> String {
        format!(
            "# mtl-lab {TOOL_VERSION}\n# command: {}\n# seed: {}\n# config-sha256: {}\n",
            self.command, self.seed, self.config_digest
        )
    }
}

pub struct OutputSink {
    dir: PathBuf,
    meta: RunMetadata,
    written: Vec<(String, String)>,
}

impl OutputSink {
    pub fn create(dir: &Path, meta: RunMetadata) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|source| Error::File {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(OutputSink {
            dir: dir.to_path_buf(),
            meta,
            written: Vec::new(),
        })
    }

    pub fn meta(&self) -> &RunMetadata {
        &self.meta
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|source| Error::File {
            path: path.clone(),
            source,
        })?;
        self.written.push((name.to_string(), hex::encode(Sha256::digest(bytes))));
        Ok(path)
    }

    /// Writes a CSV with the metadata header, then `header` and `rows`.
    pub fn csv<I, R>(&mut self, name: &str, header: &[&str], rows: I) -> Result<PathBuf>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator,
        R::Item: AsRef<[u8]>,
    {
        let mut buf = self.meta.csv_header().into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(header).map_err(csv_err)?;
            for row in rows {
                w.write_record(row).map_err(csv_err)?;
            }
            w.flush().map_err(|source| Error::Io { offset: 0, source })?;
        }
        self.put(name, &buf)
    }

    pub fn tensor(&mut self, name: &str, t: &Tensor) -> Result<PathBuf> {
        let mut buf = Vec::with_capacity(t.encoded_len());
        write_tensor(t, &mut buf)?;
        self.put(name, &buf)
    }

    /// Records every artifact with its digest; MTKT files carry no header of
    /// their own, so the manifest is their metadata.
    pub fn finish(mut self) -> Result<Vec<PathBuf>> {
        let mut text = format!(
            "tool = \"mtl-lab\"\nversion = \"{TOOL_VERSION}\"\ncommand = \"{}\"\nseed = {}\nconfig_sha256 = \"{}\"\n",
            self.meta.command, self.meta.seed, self.meta.config_digest
        );
        for (name, digest) in &self.written {
            text.push_str(&format!("\n[[artifact]]\nfile = \"{name}\"\nsha256 = \"{digest}\"\n"));
        }
        let mut paths: Vec<PathBuf> = self.written.iter().map(|(n, _)| self.dir.join(n)).collect();
        let path = self.dir.join(MANIFEST);
        std::fs::write(&path, text).map_err(|source| Error::File {
            path: path.clone(),
            source,
        })?;
        self.written.clear();
        paths.push(path);
        Ok(paths)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format {
        field: "csv",
        message: e.to_string(),
    }
}

/// Shortest round-trip decimal form.
pub fn num(x: f64) -> String {
    format!("{x}")
}
