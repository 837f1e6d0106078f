//! Run directories: the manifest, atomic file writes, artifact hashing and
//! advisory lock files.
//!
//! Layout of a run directory:
//!
//! ```text
//! manifest.json
//! dataset.csv
//! models/        reference model and its permutation importances
//! rashomon/      masks.csv, losses.csv, attributions.csv, manifest.json
//! dman/          surrogate parameters
//! targets/{tid}/ target.json, result.json, trace.csv, mask.csv
//! reports/
//! ```

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use exagree_core::data::{SubgroupSpec, SyntheticSpec};
use exagree_core::dman::DmanConfig;
use exagree_core::metrics::GapConfig;
use exagree_core::models::TrainConfig;
use exagree_core::{FeatureMeta, MhmnConfig, RashomonConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Data,
    Reference,
    Rashomon,
    Dman,
    Targets,
    Saem,
    Reports,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Data,
        Stage::Reference,
        Stage::Rashomon,
        Stage::Dman,
        Stage::Targets,
        Stage::Saem,
        Stage::Reports,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Reference => "reference",
            Stage::Rashomon => "rashomon",
            Stage::Dman => "dman",
            Stage::Targets => "targets",
            Stage::Saem => "saem",
            Stage::Reports => "reports",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic { spec: SyntheticSpec },
    Subgroup { spec: SubgroupSpec },
    Csv { path: String, label_column: String, subgroup_column: Option<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub name: String,
    pub source: DatasetSource,
    pub file: String,
    pub sha256: String,
    pub n: usize,
    pub p: usize,
    pub feature_meta: Vec<FeatureMeta>,
    pub subgroup_column: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub split: u64,
    pub reference: u64,
    pub rashomon: u64,
    /// Permutation-importance seed shared by the reference explanation, the
    /// attribution dataset and SAEM candidate scoring.
    pub fis: u64,
    pub dman: u64,
    pub saem: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub valid_fraction: f64,
    pub fis_repeats: usize,
    pub reference: Option<TrainConfig>,
    pub rashomon: Option<RashomonConfig>,
    pub dman: Option<DmanConfig>,
    pub mhmn: Option<MhmnConfig>,
    pub ks: Vec<f64>,
    pub gap: GapConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            valid_fraction: 0.2,
            fis_repeats: 5,
            reference: None,
            rashomon: None,
            dman: None,
            mhmn: None,
            ks: vec![0.1, 0.25, 0.5, 0.75, 1.0],
            gap: GapConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: String,
    pub updated_at: String,
    pub dataset: Option<DatasetRecord>,
    pub seeds: Seeds,
    pub config: RunConfig,
    /// Completed stages with their completion time.
    pub stages: BTreeMap<Stage, String>,
    /// Relative path → sha256 of every artifact written by a stage.
    pub artifacts: BTreeMap<String, String>,
    pub default_target: Option<String>,
}

impl RunManifest {
    pub fn new(run_id: impl Into<String>) -> Self {
        let now = timestamp();
        Self {
            run_id: run_id.into(),
            created_at: now.clone(),
            updated_at: now,
            dataset: None,
            seeds: Seeds::default(),
            config: RunConfig::default(),
            stages: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            default_target: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.stages.contains_key(&stage)
    }

    /// First stage among `needed` (in pipeline order) that has not completed.
    pub fn first_missing(&self, needed: &[Stage]) -> Option<Stage> {
        let mut needed = needed.to_vec();
        needed.sort();
        needed.into_iter().find(|s| !self.is_complete(*s))
    }
}

pub fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_bytes(&fs::read(path)?))
}

/// Write `bytes` to a temporary sibling of `path`, sync it, then rename it
/// over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", uuid::Uuid::new_v4().simple()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Run `write` against a fresh staging directory, then move every file it
/// produced into `dest` one atomic rename at a time. Returns the moved file
/// names.
pub fn write_staged<F>(dest: &Path, write: F) -> Result<Vec<String>>
where
    F: FnOnce(&Path) -> Result<()>,
{
    let parent = dest.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let staging = parent.join(format!(".staging-{}", uuid::Uuid::new_v4().simple()));
    fs::create_dir_all(&staging)?;
    let outcome = write(&staging).and_then(|()| {
        fs::create_dir_all(dest)?;
        let mut names = Vec::new();
        for entry in fs::read_dir(&staging)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            fs::rename(entry.path(), dest.join(&name))?;
            names.push(name);
        }
        names.sort();
        Ok(names)
    });
    let _ = fs::remove_dir_all(&staging);
    outcome
}

/// Advisory lock held for as long as the guard lives. Creating the file
/// with `create_new` is the acquisition; a second holder gets `Busy`.
#[derive(Debug)]
pub struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    pub fn acquire(path: &Path, holder: &str) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        match OpenOptions::new().write(true).create_new(true).open(path) {
            Ok(mut f) => {
                writeln!(f, "{holder} pid={}", std::process::id())?;
                Ok(Self { path: path.to_path_buf() })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let who = fs::read_to_string(path).unwrap_or_default();
                Err(CliError::Busy(format!("{} is held by {}", path.display(), who.trim())))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// A run directory and its loaded manifest.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    pub manifest: RunManifest,
}

impl RunDir {
    /// Start a new run in `root`. An existing manifest is only replaced
    /// when `force` is set.
    pub fn create(root: &Path, force: bool) -> Result<Self> {
        if root.join(MANIFEST).exists() && !force {
            return Err(CliError::Invalid(format!(
                "{} already holds a run; pass --force to start over",
                root.display()
            )));
        }
        fs::create_dir_all(root)?;
        let run_id = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
        Ok(Self {
            root: root.to_path_buf(),
            manifest: RunManifest::new(run_id),
        })
    }

    /// Load the manifest and check every recorded artifact against its hash.
    pub fn open(root: &Path) -> Result<Self> {
        let run = Self::open_unverified(root)?;
        run.verify()?;
        Ok(run)
    }

    pub fn open_unverified(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        if !path.exists() {
            return Err(CliError::NoManifest(root.to_path_buf()));
        }
        let manifest: RunManifest = serde_json::from_slice(&fs::read(&path)?)?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn verify(&self) -> Result<()> {
        for (rel, expected) in &self.manifest.artifacts {
            let path = self.root.join(rel);
            if !path.exists() {
                return Err(CliError::HashMismatch {
                    path: rel.clone(),
                    expected: expected.clone(),
                    actual: "<missing>".into(),
                });
            }
            let actual = sha256_file(&path)?;
            if &actual != expected {
                return Err(CliError::HashMismatch {
                    path: rel.clone(),
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Writes the manifest, stamping `updated_at`. A manifest identical to
    /// the one on disk is left untouched.
    pub fn save(&mut self) -> Result<()> {
        let path = self.root.join(MANIFEST);
        if let Some(mut disk) = fs::read(&path).ok().and_then(|b| serde_json::from_slice::<RunManifest>(&b).ok()) {
            disk.updated_at.clone_from(&self.manifest.updated_at);
            if disk == self.manifest {
                return Ok(());
            }
        }
        self.manifest.updated_at = timestamp();
        atomic_write(&self.root.join(MANIFEST), &self.manifest.to_bytes()?)
    }

    /// Fails with the first incomplete stage among `needed`.
    pub fn require(&self, needed: &[Stage]) -> Result<()> {
        match self.manifest.first_missing(needed) {
            Some(s) => Err(CliError::StageMissing(s.name())),
            None => Ok(()),
        }
    }

    /// Mark `stage` complete. Re-running a stage up to `dman` changes the
    /// inputs of everything after it, so later stages are marked
    /// incomplete; adding targets, results or reports invalidates nothing.
    pub fn complete(&mut self, stage: Stage) {
        if stage <= Stage::Dman {
            self.manifest.stages.retain(|s, _| *s <= stage);
        }
        self.manifest.stages.insert(stage, timestamp());
    }

    pub fn record_artifact(&mut self, rel: &str) -> Result<()> {
        let hash = sha256_file(&self.root.join(rel))?;
        self.manifest.artifacts.insert(rel.to_string(), hash);
        Ok(())
    }

    /// Atomically write a file under the run and record its hash.
    pub fn write_artifact(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        atomic_write(&self.root.join(rel), bytes)?;
        self.record_artifact(rel)
    }

    /// Stage files into `rel_dir` with [`write_staged`] and record them all.
    pub fn write_artifact_dir<F>(&mut self, rel_dir: &str, write: F) -> Result<()>
    where
        F: FnOnce(&Path) -> Result<()>,
    {
        let names = write_staged(&self.root.join(rel_dir), write)?;
        for n in names {
            self.record_artifact(&format!("{rel_dir}/{n}"))?;
        }
        Ok(())
    }

    pub fn lock(&self) -> Result<LockGuard> {
        LockGuard::acquire(&self.root.join("run.lock"), "stage")
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.manifest
            .dataset
            .as_ref()
            .map(|d| d.feature_meta.iter().map(|m| m.name.clone()).collect())
            .unwrap_or_default()
    }
}
