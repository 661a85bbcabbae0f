use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Promptgen,
    Generation,
    Judge,
    Filter,
    Export,
    Train,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Promptgen,
        Stage::Generation,
        Stage::Judge,
        Stage::Filter,
        Stage::Export,
        Stage::Train,
        Stage::Eval,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// The stage this one consumes; stages form a linear chain.
    pub fn upstream(self) -> Option<Stage> {
        self.index().checked_sub(1).map(|i| Self::ALL[i])
    }

    pub fn downstream(self) -> &'static [Stage] {
        &Self::ALL[self.index() + 1..]
    }

    /// Command name on the CLI.
    pub fn command(self) -> &'static str {
        match self {
            Stage::Promptgen => "prompts",
            Stage::Generation => "generate",
            Stage::Judge => "judge",
            Stage::Filter => "filter",
            Stage::Export => "export",
            Stage::Train => "train",
            Stage::Eval => "eval",
        }
    }

    pub fn from_command(name: &str) -> Option<Stage> {
        Self::ALL.into_iter().find(|s| s.command() == name)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.command())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    #[default]
    Pending,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    /// Digest of the stage's inputs (config subset and upstream artifacts).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    /// Digest of the stage's output artifacts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub updated_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub prompts: u64,
    pub images: u64,
    pub pairs: u64,
    pub rejections: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("cannot mark {stage} complete: {upstream} is {status:?}")]
    Dependency {
        stage: Stage,
        upstream: Stage,
        status: StageStatus,
    },
    #[error("manifest belongs to run {found:?}, expected {expected:?}")]
    RunMismatch { expected: String, found: String },
    #[error("manifest {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_digest: String,
    pub stages: BTreeMap<Stage, StageRecord>,
    pub counters: Counters,
}

/// Input digests for a stage update.
#[derive(Debug, Clone, Default)]
pub struct StageDigests {
    pub fingerprint: Option<String>,
    pub artifact_digest: Option<String>,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn new(run_id: &str, config_digest: &str) -> Self {
        Self {
            run_id: run_id.to_string(),
            config_digest: config_digest.to_string(),
            stages: Stage::ALL.iter().map(|&s| (s, StageRecord::default())).collect(),
            counters: Counters::default(),
        }
    }

    pub fn record(&self, stage: Stage) -> &StageRecord {
        static PENDING: StageRecord = StageRecord {
            status: StageStatus::Pending,
            fingerprint: None,
            artifact_digest: None,
            error: None,
            updated_at: None,
        };
        self.stages.get(&stage).unwrap_or(&PENDING)
    }

    pub fn status(&self, stage: Stage) -> StageStatus {
        self.record(stage).status
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.status(stage) == StageStatus::Complete
    }

    /// First stage that is not complete; `None` when the run is done.
    pub fn resume_point(&self) -> Option<Stage> {
        Stage::ALL.into_iter().find(|&s| !self.is_complete(s))
    }

    /// Apply a status change. Completing a stage requires its upstream to be
    /// complete; any change other than a no-op completion resets downstream
    /// stages to pending.
    pub fn apply(
        &mut self,
        stage: Stage,
        status: StageStatus,
        digests: StageDigests,
    ) -> Result<(), ManifestError> {
        if status == StageStatus::Complete {
            if let Some(up) = stage.upstream() {
                let st = self.status(up);
                if st != StageStatus::Complete {
                    return Err(ManifestError::Dependency {
                        stage,
                        upstream: up,
                        status: st,
                    });
                }
            }
        }
        let prev = self.record(stage).clone();
        let unchanged = prev.status == StageStatus::Complete
            && status == StageStatus::Complete
            && prev.artifact_digest == digests.artifact_digest
            && prev.fingerprint == digests.fingerprint;
        self.stages.insert(
            stage,
            StageRecord {
                status,
                fingerprint: digests.fingerprint,
                artifact_digest: digests.artifact_digest,
                error: digests.error,
                updated_at: Some(Utc::now()),
            },
        );
        if !unchanged {
            for &d in stage.downstream() {
                if let Some(r) = self.stages.get_mut(&d) {
                    if r.status != StageStatus::Pending {
                        r.status = StageStatus::Pending;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let io = |message: String| ManifestError::Io {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| io(e.to_string()))
    }

    /// Write through a temporary file and rename so readers never see a
    /// partial manifest.
    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let io = |message: String| ManifestError::Io {
            path: path.display().to_string(),
            message,
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io(e.to_string()))?;
        }
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_vec_pretty(self).map_err(|e| io(e.to_string()))?;
        std::fs::write(&tmp, body).map_err(|e| io(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| io(e.to_string()))
    }
}

/// Load (or create) the manifest at `path`, apply one update and persist it.
pub fn update_manifest(
    path: &Path,
    run_id: &str,
    config_digest: &str,
    stage: Stage,
    status: StageStatus,
    digests: StageDigests,
) -> Result<RunManifest, ManifestError> {
    let mut m = if path.exists() {
        let m = RunManifest::load(path)?;
        if m.run_id != run_id {
            return Err(ManifestError::RunMismatch {
                expected: run_id.to_string(),
                found: m.run_id,
            });
        }
        m
    } else {
        RunManifest::new(run_id, config_digest)
    };
    m.config_digest = config_digest.to_string();
    m.apply(stage, status, digests)?;
    m.save(path)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn done(m: &mut RunManifest, s: Stage) {
        m.apply(s, StageStatus::Complete, StageDigests::default()).unwrap();
    }

    #[test]
    fn chain_order() {
        assert_eq!(Stage::Promptgen.upstream(), None);
        assert_eq!(Stage::Filter.upstream(), Some(Stage::Judge));
        assert_eq!(Stage::Train.downstream(), &[Stage::Eval]);
        assert_eq!(Stage::from_command("generate"), Some(Stage::Generation));
        assert_eq!(Stage::from_command("loop"), None);
    }

    #[test]
    fn transitions() {
        let mut m = RunManifest::new("R1", "c");
        done(&mut m, Stage::Promptgen);
        done(&mut m, Stage::Generation);
        done(&mut m, Stage::Judge);
        let mut fresh = RunManifest::new("R1", "c");
        done(&mut fresh, Stage::Promptgen);
        done(&mut fresh, Stage::Generation);
        assert!(matches!(
            fresh.apply(Stage::Filter, StageStatus::Complete, StageDigests::default()),
            Err(ManifestError::Dependency { upstream: Stage::Judge, .. })
        ));
        assert_eq!(m.resume_point(), Some(Stage::Filter));
    }

    #[test]
    fn changed_stage_resets_downstream() {
        let mut m = RunManifest::new("R1", "c");
        for s in Stage::ALL {
            done(&mut m, s);
        }
        assert_eq!(m.resume_point(), None);
        m.apply(
            Stage::Filter,
            StageStatus::Complete,
            StageDigests {
                artifact_digest: Some("new".into()),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(m.is_complete(Stage::Judge));
        assert_eq!(m.status(Stage::Export), StageStatus::Pending);
        assert_eq!(m.resume_point(), Some(Stage::Export));
    }

    #[test]
    fn atomic_save_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        update_manifest(&path, "R1", "c", Stage::Promptgen, StageStatus::Complete, Default::default())
            .unwrap();
        let m = update_manifest(&path, "R1", "c", Stage::Generation, StageStatus::Failed, Default::default())
            .unwrap();
        assert!(!path.with_extension("json.tmp").exists());
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.resume_point(), Some(Stage::Generation));
        assert!(matches!(
            update_manifest(&path, "R2", "c", Stage::Promptgen, StageStatus::Complete, Default::default()),
            Err(ManifestError::RunMismatch { .. })
        ));
    }
}
