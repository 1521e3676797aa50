//! Stage output directories: every directory holds the resolved config, the
//! stage's files and a provenance record with the sha256 of each file and of
//! each input directory's files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nextpoi::config::RunConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CONFIG_FILE: &str = "config.json";
pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRef {
    pub path: String,
    pub stage: String,
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub inputs: Vec<InputRef>,
    pub files: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// A stage directory being written.
pub struct Output {
    pub dir: PathBuf,
    stage: String,
    inputs: Vec<InputRef>,
    files: Vec<String>,
}

impl Output {
    pub fn create(dir: &Path, stage: &str, cfg: &RunConfig, inputs: &[&Artifact]) -> Result<Output> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let mut out = Output {
            dir: dir.to_path_buf(),
            stage: stage.into(),
            inputs: inputs
                .iter()
                .map(|a| InputRef { path: a.dir.display().to_string(), stage: a.provenance.stage.clone(), files: a.provenance.files.clone() })
                .collect(),
            files: Vec::new(),
        };
        out.write(CONFIG_FILE, cfg.to_json().as_bytes())?;
        Ok(out)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, bytes).with_context(|| format!("cannot write {}", p.display()))?;
        self.track(name);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let s = serde_json::to_string_pretty(value)?;
        self.write(name, s.as_bytes())
    }

    /// Registers a file written by other code.
    pub fn track(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.into());
        }
    }

    pub fn finish(self) -> Result<Artifact> {
        let mut files = BTreeMap::new();
        for f in &self.files {
            files.insert(f.clone(), sha256_file(&self.path(f))?);
        }
        let provenance = Provenance { stage: self.stage, inputs: self.inputs, files };
        let p = self.dir.join(PROVENANCE_FILE);
        fs::write(&p, serde_json::to_string_pretty(&provenance)?).with_context(|| format!("cannot write {}", p.display()))?;
        let dir = fs::canonicalize(&self.dir).with_context(|| format!("cannot resolve {}", self.dir.display()))?;
        Ok(Artifact { dir, provenance })
    }
}

/// A finished stage directory.
#[derive(Debug, Clone)]
pub struct Artifact {
    pub dir: PathBuf,
    pub provenance: Provenance,
}

impl Artifact {
    pub fn open(dir: &Path) -> Result<Artifact> {
        let p = dir.join(PROVENANCE_FILE);
        if !p.is_file() {
            bail!("missing artifact: {} (not a stage output directory)", p.display());
        }
        let text = fs::read_to_string(&p).with_context(|| format!("cannot read {}", p.display()))?;
        let provenance: Provenance = serde_json::from_str(&text).with_context(|| format!("invalid {}", p.display()))?;
        let dir = fs::canonicalize(dir).with_context(|| format!("cannot resolve {}", dir.display()))?;
        Ok(Artifact { dir, provenance })
    }

    /// Path of a recorded file, verified against its recorded hash.
    pub fn file(&self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        let Some(want) = self.provenance.files.get(name) else {
            bail!("missing artifact: {} ({} output has no {name})", p.display(), self.provenance.stage);
        };
        if !p.is_file() {
            bail!("missing artifact: {}", p.display());
        }
        let got = sha256_file(&p)?;
        if &got != want {
            bail!("artifact {} changed since it was written (sha256 {got}, recorded {want})", p.display());
        }
        Ok(p)
    }

    pub fn read(&self, name: &str) -> Result<String> {
        let p = self.file(name)?;
        fs::read_to_string(&p).with_context(|| format!("cannot read {}", p.display()))
    }

    pub fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T> {
        serde_json::from_str(&self.read(name)?).with_context(|| format!("invalid {}", self.dir.join(name).display()))
    }

    pub fn config(&self) -> Result<RunConfig> {
        let p = self.file(CONFIG_FILE)?;
        Ok(RunConfig::load(&p)?)
    }

    pub fn stage(&self) -> &str {
        &self.provenance.stage
    }
}

/// The directories upstream of (and including) one stage, by stage name.
/// Each stage's first input is its primary parent.
pub struct Chain {
    pub by_stage: BTreeMap<String, Artifact>,
    pub head: Artifact,
}

impl Chain {
    pub fn resolve(dir: &Path) -> Result<Chain> {
        let head = Artifact::open(dir)?;
        let mut by_stage = BTreeMap::new();
        let mut cur = Some(head.clone());
        while let Some(a) = cur {
            cur = match a.provenance.inputs.first() {
                Some(i) => Some(Artifact::open(Path::new(&i.path)).with_context(|| format!("resolving input of {}", a.dir.display()))?),
                None => None,
            };
            by_stage.entry(a.provenance.stage.clone()).or_insert(a);
        }
        Ok(Chain { by_stage, head })
    }

    pub fn get(&self, stage: &str) -> Option<&Artifact> {
        self.by_stage.get(stage)
    }

    pub fn require(&self, stage: &str) -> Result<&Artifact> {
        self.get(stage).with_context(|| format!("missing artifact: no {stage} stage upstream of {}", self.head.dir.display()))
    }
}
