//! Run manifests: a single JSON document describing what a run did and
//! wrote.
//!
//! Everything except `created_unix` lives inside the `hashed` body;
//! `config_hash` is the SHA-256 of that body's canonical JSON, so two runs
//! with the same seeds and configuration produce byte-identical bodies and
//! hashes while timestamps stay outside the hashed region.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Outcome of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Checkpoint roles and bookkeeping of one improvement iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationState {
    pub t: u32,
    pub policy_ckpt: String,
    pub ref_ckpt: String,
    pub init_ckpt: String,
    pub lambda: f64,
    pub rng_seed: u64,
    pub steps: u64,
}

/// Per-iteration statistics the manifest carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub t: u32,
    pub lambda: f64,
    pub dataset_size: usize,
    pub dropped_prompts: usize,
    pub mean_judge_confidence: f64,
    /// Fraction of records the noise detector marked, before warm-up
    /// masking.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector_flag_rate: Option<f64>,
    /// Flags actually applied to the loss (after warm-up masking).
    pub applied_flags: usize,
    pub steps: u64,
    pub final_loss: f64,
}

/// The deterministic region of the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestBody {
    pub run_seed: u64,
    pub resolved_config: serde_json::Value,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<String>,
    pub iteration_states: Vec<IterationState>,
    pub iteration_stats: Vec<IterationStats>,
}

impl ManifestBody {
    pub fn new(run_seed: u64, resolved_config: serde_json::Value) -> Self {
        Self {
            run_seed,
            resolved_config,
            stages: Vec::new(),
            artifacts: Vec::new(),
            iteration_states: Vec::new(),
            iteration_stats: Vec::new(),
        }
    }

    pub fn record_stage(&mut self, name: &str, outcome: &str, detail: Option<String>) {
        self.stages.push(StageRecord {
            name: name.to_string(),
            outcome: outcome.to_string(),
            detail,
        });
    }

    pub fn record_artifact(&mut self, rel_path: &str) {
        self.artifacts.push(rel_path.to_string());
    }

    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json()?.as_bytes());
        Ok(hex_string(&hasher.finalize()))
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// The full manifest document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    /// Wall-clock write time; excluded from the hashed region.
    pub created_unix: u64,
    pub config_hash: String,
    pub hashed: ManifestBody,
}

impl RunManifest {
    pub fn finalize(body: ManifestBody) -> Result<Self> {
        let config_hash = body.hash()?;
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Ok(Self {
            format_version: 1,
            created_unix,
            config_hash,
            hashed: body,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let manifest: RunManifest = serde_json::from_str(&text)?;
        let expect = manifest.hashed.hash()?;
        if manifest.config_hash != expect {
            return Err(Error::Pipeline(format!(
                "manifest hash mismatch: recorded {} computed {}",
                manifest.config_hash, expect
            )));
        }
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body() -> ManifestBody {
        let mut b = ManifestBody::new(42, serde_json::json!({"beta": 0.1}));
        b.record_stage("seed-dpo", "ok", None);
        b.record_artifact("pi_0.ckpt");
        b
    }

    #[test]
    fn hash_ignores_timestamp() {
        let a = RunManifest::finalize(body()).unwrap();
        let mut b = RunManifest::finalize(body()).unwrap();
        b.created_unix = a.created_unix.wrapping_add(1234);
        assert_eq!(a.config_hash, b.config_hash);
        assert_eq!(
            a.hashed.canonical_json().unwrap(),
            b.hashed.canonical_json().unwrap()
        );
    }

    #[test]
    fn hash_tracks_body_changes() {
        let a = RunManifest::finalize(body()).unwrap();
        let mut changed = body();
        changed.run_seed = 43;
        let b = RunManifest::finalize(changed).unwrap();
        assert_ne!(a.config_hash, b.config_hash);
    }

    #[test]
    fn save_load_verifies_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = RunManifest::finalize(body()).unwrap();
        m.save(&path).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(m, back);

        // Tamper with the body on disk.
        let mut doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        doc["hashed"]["run_seed"] = serde_json::json!(77);
        std::fs::write(&path, serde_json::to_string(&doc).unwrap()).unwrap();
        assert!(RunManifest::load(&path).is_err());
    }
}
