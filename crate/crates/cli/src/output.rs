//! Staged artifacts, committed to the output directory only once a command
//! has produced all of them.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use tcmap_core::ntg1;
use tcmap_core::raster::Grid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum GridFormat {
    Ntg1,
    Csv,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Input files read by a command, with their content digests.
#[derive(Debug, Default)]
pub struct Inputs {
    digests: BTreeMap<String, String>,
}

impl Inputs {
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.digests.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn grid(&mut self, path: &Path) -> Result<Grid> {
        let bytes = self.read(path)?;
        ntg1::decode(&bytes).with_context(|| format!("decoding {}", path.display()))
    }

    /// Records a file read by someone else, such as a manifest member.
    pub fn record(&mut self, path: &Path) -> Result<()> {
        self.read(path).map(drop)
    }
}

#[derive(Debug)]
pub struct Artifacts {
    format: GridFormat,
    files: BTreeMap<String, Vec<u8>>,
}

#[derive(Serialize)]
struct RunReport<'a> {
    command: &'a str,
    seed: u64,
    inputs: &'a BTreeMap<String, String>,
    outputs: BTreeMap<&'a str, String>,
}

impl Artifacts {
    pub fn new(format: GridFormat) -> Self {
        Artifacts { format, files: BTreeMap::new() }
    }

    pub fn bytes(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.insert(name.into(), bytes);
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut v = serde_json::to_vec_pretty(value)?;
        v.push(b'\n');
        self.bytes(name, v);
        Ok(())
    }

    pub fn text(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
        let mut v = Vec::new();
        f(&mut v)?;
        self.bytes(name, v);
        Ok(())
    }

    /// Adds a grid under `stem` with the extension of the chosen format.
    pub fn grid(&mut self, stem: &str, grid: &Grid) -> Result<()> {
        match self.format {
            GridFormat::Ntg1 => self.bytes(format!("{stem}.ntg1"), ntg1::encode(grid)),
            GridFormat::Csv => {
                let mut v = Vec::new();
                writeln!(v, "row,col,value")?;
                for r in 0..grid.height() {
                    for c in 0..grid.width() {
                        let i = grid.index(r, c);
                        if grid.is_valid(i) {
                            writeln!(v, "{r},{c},{}", grid.get_f64(i))?;
                        } else {
                            writeln!(v, "{r},{c},")?;
                        }
                    }
                }
                self.bytes(format!("{stem}.csv"), v);
            }
        }
        Ok(())
    }

    /// Adds `run.json` describing the run, then writes every file to a
    /// temporary name in `dir` before renaming any of them into place.
    pub fn commit(mut self, dir: &Path, command: &str, seed: u64, inputs: &Inputs) -> Result<Vec<PathBuf>> {
        let outputs = self.files.iter().map(|(k, v)| (k.as_str(), sha256_hex(v))).collect();
        let report = RunReport { command, seed, inputs: &inputs.digests, outputs };
        let mut v = serde_json::to_vec_pretty(&report)?;
        v.push(b'\n');
        self.files.insert("run.json".into(), v);

        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut staged = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            let mut tmp = tempfile::Builder::new().prefix(".tcmap-").tempfile_in(dir)?;
            tmp.write_all(bytes)?;
            tmp.as_file().sync_all()?;
            staged.push((tmp, dir.join(name)));
        }
        let mut written = Vec::with_capacity(staged.len());
        for (tmp, path) in staged {
            tmp.persist(&path).with_context(|| format!("writing {}", path.display()))?;
            written.push(path);
        }
        Ok(written)
    }
}
