use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use actseg::io::{read_catalog, write_atomic};
use actseg::segcore::ClassCatalog;
use serde::Serialize;

pub const CATALOG: &str = "catalog.txt";
pub const FEATURES: &str = "features";
pub const GROUND_TRUTH: &str = "groundTruth";
pub const TIMESTAMPS: &str = "timestamps";
pub const MANIFEST: &str = "run_manifest.json";

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Io(String),
    Numeric(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Io(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Io(m) | Failure::Numeric(m) => m,
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

pub fn usage<T>(msg: impl Into<String>) -> CmdResult<T> {
    Err(Failure::Usage(msg.into()))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    Ok(write_atomic(path, contents.as_ref())?)
}

pub fn pool(jobs: usize) -> CmdResult<rayon::ThreadPool> {
    if jobs == 0 {
        return usage("--jobs must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Failure::Usage(format!("thread pool: {e}")))
}

/// Files in `dir` sorted by name, as `(stem, path)`.
pub fn list_files(dir: &Path, extensions: &[&str]) -> CmdResult<Vec<(String, PathBuf)>> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?
            .path();
        if !path.is_file() {
            continue;
        }
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if !extensions.is_empty() && !extensions.contains(&ext) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        out.push((stem.to_string(), path.clone()));
    }
    out.sort();
    if out.is_empty() {
        return Err(Failure::Io(format!("{}: no input files", dir.display())));
    }
    Ok(out)
}

pub const FEATURE_EXTENSIONS: &[&str] = &["feat", "csv", "txt"];

/// Feature files from a directory, or a single feature file.
pub fn feature_inputs(path: &Path) -> CmdResult<Vec<(String, PathBuf)>> {
    if path.is_dir() {
        list_files(path, FEATURE_EXTENSIONS)
    } else {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Failure::Io(format!("{}: no such file", path.display())))?;
        Ok(vec![(stem.to_string(), path.to_path_buf())])
    }
}

pub fn load_catalog(path: &Path) -> CmdResult<ClassCatalog> {
    Ok(read_catalog(path)?)
}

/// Sibling of a path inside a directory, failing with exit code 2 if absent.
pub fn required(dir: &Path, name: &str, ext: &str) -> CmdResult<PathBuf> {
    let p = dir.join(format!("{name}.{ext}"));
    if !p.is_file() {
        return Err(Failure::Io(format!("{}: missing file", p.display())));
    }
    Ok(p)
}

#[derive(Serialize)]
pub struct Manifest {
    command: String,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    versions: BTreeMap<&'static str, &'static str>,
    wall_time_secs: f64,
    #[serde(skip)]
    started: Instant,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("actseg", env!("CARGO_PKG_VERSION"));
        Self {
            command: command.to_string(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            versions,
            wall_time_secs: 0.0,
            started: Instant::now(),
        }
    }

    pub fn set_config(&mut self, config: serde_json::Value) {
        self.config = config;
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.display().to_string());
    }

    pub fn write(mut self, path: &Path) -> CmdResult {
        self.wall_time_secs = self.started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes") + "\n";
        write_file(path, text)
    }
}
