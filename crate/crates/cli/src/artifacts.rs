use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::UsageError;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// SHA-256 of the resolved settings as canonical JSON.
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_time_s: f64,
}

pub fn manifest_name(command: &str) -> String {
    format!("{command}.manifest.json")
}

enum Dest {
    Dir(PathBuf),
    Stdout,
}

/// Bookkeeping for one command: where outputs go and what to put in its
/// manifest.
pub struct Session {
    command: &'static str,
    started: Instant,
    dest: Dest,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    seed: Option<u64>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let mut file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    io::copy(&mut file, &mut hasher).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&hasher.finalize()))
}

/// Serialises with a trailing newline.
pub fn json_bytes<T: Serialize + ?Sized>(value: &T) -> anyhow::Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(io::BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

pub fn csv_bytes<R: Serialize>(rows: impl IntoIterator<Item = R>) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    Ok(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)
}

/// Writes via a temporary sibling file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".{}.tmp", std::process::id()));
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

impl Session {
    /// Fails with a usage error when `-o` is missing.
    pub fn new(command: &'static str, output: Option<&str>, seed: Option<u64>) -> anyhow::Result<Self> {
        let dest = match output {
            Some("-") => Dest::Stdout,
            Some(dir) => {
                let dir = PathBuf::from(dir);
                std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                Dest::Dir(dir)
            }
            None => return Err(UsageError(format!("`{command}` needs an output directory (-o DIR or -o -)")).into()),
        };
        Ok(Self {
            command,
            started: Instant::now(),
            dest,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
        })
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256,
        });
        Ok(())
    }

    /// Writes `name` into the output directory. With `-o -` only the
    /// command's primary output is written, to standard output.
    pub fn emit(&mut self, name: &str, bytes: &[u8], primary: bool) -> anyhow::Result<()> {
        match &self.dest {
            Dest::Dir(dir) => {
                let path = dir.join(name);
                write_atomic(&path, bytes)?;
                self.outputs.push(FileDigest {
                    path: path.display().to_string(),
                    sha256: sha256_bytes(bytes),
                });
            }
            Dest::Stdout if primary => {
                let mut out = io::stdout().lock();
                out.write_all(bytes)?;
                out.flush()?;
                self.outputs.push(FileDigest {
                    path: "-".into(),
                    sha256: sha256_bytes(bytes),
                });
            }
            Dest::Stdout => log::info!("{name} not written with -o -"),
        }
        Ok(())
    }

    pub fn finish<C: Serialize>(self, config: &C) -> anyhow::Result<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            config_hash: sha256_bytes(&serde_json::to_vec(config)?),
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        let bytes = json_bytes(&manifest)?;
        match &self.dest {
            Dest::Dir(dir) => write_atomic(&dir.join(manifest_name(self.command)), &bytes)?,
            Dest::Stdout => io::stderr().write_all(&bytes)?,
        }
        Ok(())
    }
}
