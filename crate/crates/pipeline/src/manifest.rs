//! Append-only record of the stage runs of one experiment.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};
use crate::stage::Stage;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the experiment directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StageRef {
    pub stage: Stage,
    pub run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub run: usize,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: Vec<StageRef>,
    pub outputs: Vec<Artifact>,
    /// Run-specific files (timings) that carry no reproducibility claim.
    #[serde(default)]
    pub logs: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    pub wall_time_s: f64,
    #[serde(default)]
    pub summary: serde_json::Value,
}

impl StageRecord {
    pub fn reference(&self) -> StageRef {
        StageRef {
            stage: self.stage,
            run: self.run,
        }
    }

    /// Output directory relative to the experiment directory.
    pub fn dir(&self) -> String {
        run_dir(self.stage, self.run)
    }
}

pub fn run_dir(stage: Stage, run: usize) -> String {
    format!("{}/run-{run}", stage.name())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub experiment_id: String,
    /// Hash of the configuration of the latest run.
    pub config_hash: String,
    pub records: Vec<StageRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| PipelineError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(crate::hex(&h.finalize()))
}

/// Every regular file under `dir`, sorted by relative path.
pub fn collect_artifacts(exp_dir: &Path, dir: &Path) -> Result<Vec<Artifact>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e
                .path()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| dir.to_path_buf());
            PipelineError::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        out.push(Artifact {
            path: relative(exp_dir, entry.path())?,
            sha256: sha256_file(entry.path())?,
        });
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

pub fn relative(base: &Path, path: &Path) -> Result<String> {
    let rel = path.strip_prefix(base).map_err(|_| {
        PipelineError::Manifest(format!("{} is outside {}", path.display(), base.display()))
    })?;
    Ok(rel
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/"))
}

impl ExperimentManifest {
    pub fn new(experiment_id: &str) -> Self {
        ExperimentManifest {
            experiment_id: experiment_id.to_string(),
            config_hash: String::new(),
            records: Vec::new(),
        }
    }

    pub fn path(exp_dir: &Path) -> PathBuf {
        exp_dir.join(MANIFEST_FILE)
    }

    pub fn load(exp_dir: &Path) -> Result<Self> {
        let p = Self::path(exp_dir);
        let text = fs::read_to_string(&p).map_err(|e| PipelineError::io(&p, e))?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::Manifest(format!("{}: {e}", p.display())))
    }

    pub fn load_or_new(exp_dir: &Path, experiment_id: &str) -> Result<Self> {
        if Self::path(exp_dir).exists() {
            let m = Self::load(exp_dir)?;
            if m.experiment_id != experiment_id {
                return Err(PipelineError::Manifest(format!(
                    "{} belongs to experiment `{}`, not `{experiment_id}`",
                    exp_dir.display(),
                    m.experiment_id
                )));
            }
            Ok(m)
        } else {
            Ok(Self::new(experiment_id))
        }
    }

    /// Writes through a temporary file so a crash never leaves a truncated
    /// manifest.
    pub fn save(&self, exp_dir: &Path) -> Result<()> {
        fs::create_dir_all(exp_dir).map_err(|e| PipelineError::io(exp_dir, e))?;
        let p = Self::path(exp_dir);
        let tmp = exp_dir.join(format!("{MANIFEST_FILE}.tmp"));
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&tmp, text).map_err(|e| PipelineError::io(&tmp, e))?;
        fs::rename(&tmp, &p).map_err(|e| PipelineError::io(&p, e))
    }

    pub fn latest(&self, stage: Stage) -> Option<&StageRecord> {
        self.records.iter().rev().find(|r| r.stage == stage)
    }

    pub fn get(&self, r: StageRef) -> Option<&StageRecord> {
        self.records
            .iter()
            .find(|x| x.stage == r.stage && x.run == r.run)
    }

    pub fn next_run(&self, stage: Stage) -> usize {
        self.records.iter().filter(|r| r.stage == stage).count()
    }

    /// Appends `record`, which must be the next run of its stage and only
    /// reference recorded inputs.
    pub fn append(&mut self, record: StageRecord) -> Result<()> {
        if record.run != self.next_run(record.stage) {
            return Err(PipelineError::Manifest(format!(
                "run {} of `{}` out of sequence",
                record.run, record.stage
            )));
        }
        for i in &record.inputs {
            if self.get(*i).is_none() {
                return Err(PipelineError::Manifest(format!(
                    "input {}/run-{} is not recorded",
                    i.stage, i.run
                )));
            }
        }
        self.config_hash = record.config_hash.clone();
        self.records.push(record);
        Ok(())
    }

    /// Every output exists with its recorded hash, and every record's inputs
    /// precede it.
    pub fn verify(&self, exp_dir: &Path) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            for i in &r.inputs {
                if !seen.contains(i) {
                    return Err(PipelineError::Manifest(format!(
                        "{}/run-{} uses {}/run-{}, which is recorded after it",
                        r.stage, r.run, i.stage, i.run
                    )));
                }
            }
            for a in &r.outputs {
                let p = exp_dir.join(&a.path);
                if !p.is_file() {
                    return Err(PipelineError::Manifest(format!(
                        "artifact {} is missing",
                        a.path
                    )));
                }
                if sha256_file(&p)? != a.sha256 {
                    return Err(PipelineError::Manifest(format!(
                        "artifact {} was modified",
                        a.path
                    )));
                }
            }
            seen.insert(r.reference());
        }
        Ok(())
    }

    /// Recorded output paths, for link checks.
    pub fn artifact_paths(&self) -> BTreeSet<&str> {
        self.records
            .iter()
            .flat_map(|r| r.outputs.iter().map(|a| a.path.as_str()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(stage: Stage, run: usize, inputs: Vec<StageRef>) -> StageRecord {
        StageRecord {
            stage,
            run,
            seed: 0,
            config_hash: "c".into(),
            inputs,
            outputs: vec![],
            logs: vec![],
            seeds: BTreeMap::new(),
            wall_time_s: 0.0,
            summary: serde_json::Value::Null,
        }
    }

    #[test]
    fn append_only_sequence() {
        let mut m = ExperimentManifest::new("e");
        m.append(record(Stage::Ingest, 0, vec![])).unwrap();
        assert!(m.append(record(Stage::Ingest, 0, vec![])).is_err());
        let dep = StageRef {
            stage: Stage::TrainSsiAll,
            run: 0,
        };
        assert!(m.append(record(Stage::Compose, 0, vec![dep])).is_err());
        m.append(record(Stage::Ingest, 1, vec![])).unwrap();
        assert_eq!(m.latest(Stage::Ingest).unwrap().run, 1);
        assert_eq!(m.next_run(Stage::Ingest), 2);
        assert_eq!(m.records.len(), 2);
    }

    #[test]
    fn verify_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ingest/run-0");
        fs::create_dir_all(&out).unwrap();
        fs::write(out.join("a.txt"), "hello").unwrap();
        let mut r = record(Stage::Ingest, 0, vec![]);
        r.outputs = collect_artifacts(dir.path(), &out).unwrap();
        assert_eq!(r.outputs[0].path, "ingest/run-0/a.txt");
        let mut m = ExperimentManifest::new("e");
        m.append(r).unwrap();
        m.save(dir.path()).unwrap();
        let m = ExperimentManifest::load(dir.path()).unwrap();
        m.verify(dir.path()).unwrap();
        fs::write(out.join("a.txt"), "hellO").unwrap();
        assert!(m.verify(dir.path()).is_err());
        fs::remove_file(out.join("a.txt")).unwrap();
        assert!(m.verify(dir.path()).is_err());
    }

    #[test]
    fn foreign_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        ExperimentManifest::new("a").save(dir.path()).unwrap();
        assert!(ExperimentManifest::load_or_new(dir.path(), "b").is_err());
        assert!(ExperimentManifest::load_or_new(dir.path(), "a").is_ok());
    }
}
