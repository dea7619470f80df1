//! Stage manifests: each pipeline command writes a small JSON record of the
//! exact configuration slice it ran under, the artifacts it produced (with
//! content hashes), and the fingerprints of its upstream stages. Downstream
//! commands verify that chain before consuming anything, so a config edit or
//! a mutated artifact surfaces as an explicit staleness error instead of a
//! silently inconsistent run.

use super::PipelineError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const MANIFEST_SCHEMA: &str = "faultgram-manifest/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub schema: String,
    pub stage: String,
    /// Hash of the stage's config slice plus its upstream fingerprints;
    /// recomputable from the current config for staleness checks.
    pub fingerprint: String,
    /// Upstream stage name -> fingerprint, plus raw data inputs by path.
    pub inputs: BTreeMap<String, String>,
    /// Artifact path (relative to the run dir) -> content hash.
    pub outputs: BTreeMap<String, String>,
    /// Stage-specific bookkeeping (counts, scores); purely informational.
    pub details: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String, PipelineError> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Fingerprint of a stage: its name, the serialized config slices it
/// depends on, and its input hashes, all length-delimited.
pub fn fingerprint(stage: &str, parts: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    for part in parts {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn manifest_path(run_dir: &Path, stage: &str) -> PathBuf {
    run_dir.join(format!("{stage}.manifest.json"))
}

pub fn write_manifest(run_dir: &Path, manifest: &StageManifest) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    std::fs::write(manifest_path(run_dir, &manifest.stage), text)?;
    Ok(())
}

pub fn load_manifest(run_dir: &Path, stage: &str) -> Result<StageManifest, PipelineError> {
    let path = manifest_path(run_dir, stage);
    let text = std::fs::read_to_string(&path).map_err(|_| PipelineError::MissingArtifact {
        stage: stage.to_string(),
        path: path.clone(),
    })?;
    let manifest: StageManifest = serde_json::from_str(&text)?;
    if manifest.schema != MANIFEST_SCHEMA {
        return Err(PipelineError::StaleUpstream {
            stage: stage.to_string(),
            detail: format!("manifest schema {:?} is not {MANIFEST_SCHEMA:?}", manifest.schema),
        });
    }
    Ok(manifest)
}

/// Load an upstream stage's manifest and verify it is current: its
/// fingerprint must equal the one recomputed from the live config
/// (`expected_fingerprint`), every raw `file:` input it consumed must still
/// hash the same, and every artifact it recorded must still exist with the
/// recorded content hash.
pub fn check_upstream(
    run_dir: &Path,
    stage: &str,
    expected_fingerprint: &str,
) -> Result<StageManifest, PipelineError> {
    let manifest = load_manifest(run_dir, stage)?;
    if manifest.fingerprint != expected_fingerprint {
        return Err(PipelineError::StaleUpstream {
            stage: stage.to_string(),
            detail: "artifacts were produced under a different configuration; rerun the stage"
                .to_string(),
        });
    }
    for (key, want) in &manifest.inputs {
        let Some(raw) = key.strip_prefix("file:") else {
            continue; // upstream fingerprints, already covered above
        };
        let path = PathBuf::from(raw);
        if !path.exists() {
            return Err(PipelineError::MissingArtifact {
                stage: stage.to_string(),
                path,
            });
        }
        if &hash_file(&path)? != want {
            return Err(PipelineError::StaleUpstream {
                stage: stage.to_string(),
                detail: format!("input {raw} was modified after the stage consumed it"),
            });
        }
    }
    for (rel, want) in &manifest.outputs {
        let path = run_dir.join(rel);
        if !path.exists() {
            return Err(PipelineError::MissingArtifact {
                stage: stage.to_string(),
                path,
            });
        }
        let got = hash_file(&path)?;
        if &got != want {
            return Err(PipelineError::StaleUpstream {
                stage: stage.to_string(),
                detail: format!("{rel} was modified after the stage wrote it"),
            });
        }
    }
    Ok(manifest)
}
