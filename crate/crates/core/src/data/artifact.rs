//! Versioned model artifacts.
//!
//! A JSON document holding, per sub-program, the family, conditioning
//! layout, fixed constants and the posterior (mean and row-major lower
//! Cholesky factor, or a point mass). Floats are written with shortest
//! round-trip formatting, so save then load reproduces every bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::distributions::GaussianChol;
use crate::patient_model::{layout_table, LayoutEntry, SubProgramId};
use crate::subprograms::{Family, FittedSubProgram, FixedConstants, Posterior, Registry, SubProgramError, SubProgramSpec};

pub const MODEL_FORMAT: &str = "genhai.model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed artifact: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported artifact {format} version {version}")]
    Version { format: String, version: u32 },
    #[error("artifact is missing sub-program {0}")]
    Missing(&'static str),
    #[error("artifact lists sub-program {0} twice")]
    Duplicate(&'static str),
    #[error("{subprogram}: {reason}")]
    Invalid { subprogram: String, reason: String },
    #[error("provenance hash mismatch: stored {stored}, computed {computed}")]
    Hash { stored: String, computed: String },
    #[error(transparent)]
    SubProgram(#[from] SubProgramError),
}

/// Where a model came from. Every field is optional so that hand-built
/// registries can be saved too.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<serde_json::Value>,
    /// Sub-programs fitted in this run; others were carried over.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trained: Vec<SubProgramId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PosteriorDoc {
    Gaussian { mean: Vec<f64>, chol: Vec<Vec<f64>> },
    PointMass { theta: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubProgramDoc {
    pub name: SubProgramId,
    pub family: Family,
    pub input_dim: usize,
    pub conditioning: Vec<String>,
    pub fixed: FixedConstants,
    pub posterior: PosteriorDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArtifact {
    pub format: String,
    pub version: u32,
    /// SHA-256 over the compact JSON of `provenance` and `subprograms`.
    pub provenance_hash: String,
    pub provenance: Provenance,
    pub layout_table: Vec<LayoutEntry>,
    pub subprograms: Vec<SubProgramDoc>,
}

fn posterior_doc(p: &Posterior) -> PosteriorDoc {
    match p {
        Posterior::PointMass(t) => PosteriorDoc::PointMass { theta: t.clone() },
        Posterior::Gaussian(g) => {
            let d = g.dim();
            let flat = g.chol();
            PosteriorDoc::Gaussian {
                mean: g.mean().to_vec(),
                chol: (0..d).map(|i| flat[i * d..i * d + i + 1].to_vec()).collect(),
            }
        }
    }
}

fn hash_content(provenance: &Provenance, subprograms: &[SubProgramDoc]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(provenance).expect("provenance serializes"));
    h.update(b"\n");
    h.update(serde_json::to_vec(subprograms).expect("sub-programs serialize"));
    hex::encode(h.finalize())
}

impl ModelArtifact {
    pub fn from_registry(registry: &Registry, provenance: Provenance) -> Self {
        let subprograms: Vec<SubProgramDoc> = registry
            .iter()
            .map(|p| SubProgramDoc {
                name: p.id(),
                family: p.spec.family,
                input_dim: p.spec.input_dim,
                conditioning: p.id().layout().iter().map(|f| f.to_string()).collect(),
                fixed: p.spec.fixed,
                posterior: posterior_doc(&p.posterior),
            })
            .collect();
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            provenance_hash: hash_content(&provenance, &subprograms),
            provenance,
            layout_table: layout_table(),
            subprograms,
        }
    }

    /// Check version, hash, layout and posterior invariants, then rebuild
    /// the registry.
    pub fn to_registry(&self) -> Result<Registry, ArtifactError> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(ArtifactError::Version {
                format: self.format.clone(),
                version: self.version,
            });
        }
        let computed = hash_content(&self.provenance, &self.subprograms);
        if computed != self.provenance_hash {
            return Err(ArtifactError::Hash {
                stored: self.provenance_hash.clone(),
                computed,
            });
        }
        let mut seen = [false; 13];
        for doc in &self.subprograms {
            let i = doc.name.index();
            if std::mem::replace(&mut seen[i], true) {
                return Err(ArtifactError::Duplicate(doc.name.name()));
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(ArtifactError::Missing(SubProgramId::ALL[i].name()));
        }
        let programs = self.subprograms.iter().map(doc_to_program).collect::<Result<Vec<_>, _>>()?;
        Ok(Registry::new(programs)?)
    }
}

fn doc_to_program(doc: &SubProgramDoc) -> Result<FittedSubProgram, ArtifactError> {
    let invalid = |reason: String| ArtifactError::Invalid {
        subprogram: doc.name.name().into(),
        reason,
    };
    let spec = SubProgramSpec {
        name: doc.name,
        family: doc.family,
        input_dim: doc.input_dim,
        fixed: doc.fixed,
    };
    spec.validate()?;
    let want: Vec<String> = doc.name.layout().iter().map(|f| f.to_string()).collect();
    if doc.conditioning != want {
        return Err(invalid(format!("conditioning layout {:?} differs from {:?}", doc.conditioning, want)));
    }
    let posterior = match &doc.posterior {
        PosteriorDoc::PointMass { theta } => Posterior::PointMass(theta.clone()),
        PosteriorDoc::Gaussian { mean, chol } => {
            let d = mean.len();
            if chol.len() != d || chol.iter().enumerate().any(|(i, row)| row.len() != i + 1) {
                return Err(invalid(format!("cholesky rows must have lengths 1..={d}")));
            }
            let mut flat = vec![0.0; d * d];
            for (i, row) in chol.iter().enumerate() {
                flat[i * d..i * d + i + 1].copy_from_slice(row);
            }
            Posterior::Gaussian(GaussianChol::new(mean.clone(), flat).map_err(|e| invalid(e.to_string()))?)
        }
    };
    Ok(FittedSubProgram::new(spec, posterior)?)
}

pub fn save_model(registry: &Registry, provenance: Provenance, path: &Path) -> Result<ModelArtifact, ArtifactError> {
    let artifact = ModelArtifact::from_registry(registry, provenance);
    let mut bytes = serde_json::to_vec_pretty(&artifact)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(artifact)
}

pub fn load_artifact(path: &Path) -> Result<ModelArtifact, ArtifactError> {
    let bytes = fs::read(path).map_err(|source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let artifact: ModelArtifact = serde_json::from_slice(&bytes)?;
    artifact.to_registry()?;
    Ok(artifact)
}

pub fn load_model(path: &Path) -> Result<Registry, ArtifactError> {
    load_artifact(path)?.to_registry()
}
