//! JSON manifests naming the FVOL files of a run. Relative paths are resolved
//! against the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::fvol::{read_labels, read_scalar};
use crate::error::{Error, Result};
use crate::fields::{LabelMap, ScalarField};
use crate::pipeline::EvalSet;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCase {
    pub image: PathBuf,
    pub labels: PathBuf,
}

/// Inputs of a full pipeline run. Training stages only ever see the atlas and
/// the unlabeled images; `unlabeled_truth` and `test` feed evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineManifest {
    pub num_classes: usize,
    pub atlas_image: PathBuf,
    pub atlas_labels: PathBuf,
    pub unlabeled: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unlabeled_truth: Option<Vec<PathBuf>>,
    #[serde(default)]
    pub test: Vec<LabeledCase>,
}

/// Image/label pairs for standalone segmenter training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsManifest {
    pub num_classes: usize,
    pub pairs: Vec<LabeledCase>,
}

fn read_json<M: for<'de> Deserialize<'de>>(path: &Path) -> Result<M> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn write_json<M: Serialize>(value: &M, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Manifest(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Everything a pipeline manifest points at, loaded and cross-checked.
#[derive(Debug, Clone)]
pub struct PipelineData<T> {
    pub atlas: ScalarField<T>,
    pub atlas_labels: LabelMap,
    pub unlabeled: Vec<ScalarField<T>>,
    pub unlabeled_paths: Vec<PathBuf>,
    pub eval: EvalSet<T>,
}

fn load_case<T: Real>(base: &Path, case: &LabeledCase, k: usize) -> Result<(ScalarField<T>, LabelMap)> {
    let img = read_scalar(resolve(base, &case.image))?;
    let labels = read_labels(resolve(base, &case.labels), Some(k))?;
    img.dims().ensure_same(&labels.dims())?;
    Ok((img, labels))
}

impl PipelineManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        Ok((read_json(path)?, base_dir(path)))
    }

    pub fn read_data<T: Real>(&self, base: &Path) -> Result<PipelineData<T>> {
        let k = self.num_classes;
        let atlas: ScalarField<T> = read_scalar(resolve(base, &self.atlas_image))?;
        let atlas_labels = read_labels(resolve(base, &self.atlas_labels), Some(k))?;
        let dims = atlas.dims();
        dims.ensure_same(&atlas_labels.dims())?;
        let unlabeled_paths: Vec<PathBuf> = self.unlabeled.iter().map(|p| resolve(base, p)).collect();
        let unlabeled = unlabeled_paths
            .iter()
            .map(|p| {
                let img: ScalarField<T> = read_scalar(p)?;
                dims.ensure_same(&img.dims())?;
                Ok(img)
            })
            .collect::<Result<Vec<_>>>()?;
        let unlabeled_truth = match &self.unlabeled_truth {
            None => None,
            Some(paths) => {
                if paths.len() != self.unlabeled.len() {
                    return Err(Error::Manifest(format!(
                        "{} truth maps for {} unlabeled images",
                        paths.len(),
                        self.unlabeled.len()
                    )));
                }
                Some(
                    paths
                        .iter()
                        .map(|p| {
                            let l = read_labels(resolve(base, p), Some(k))?;
                            dims.ensure_same(&l.dims())?;
                            Ok(l)
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            }
        };
        let test = self
            .test
            .iter()
            .map(|c| {
                let case = load_case(base, c, k)?;
                dims.ensure_same(&case.0.dims())?;
                Ok(case)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PipelineData {
            atlas,
            atlas_labels,
            unlabeled,
            unlabeled_paths,
            eval: EvalSet { unlabeled_truth, test },
        })
    }
}

impl PairsManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        Ok((read_json(path)?, base_dir(path)))
    }

    pub fn read_pairs<T: Real>(&self, base: &Path) -> Result<Vec<(ScalarField<T>, LabelMap)>> {
        if self.pairs.is_empty() {
            return Err(Error::Empty("training pairs"));
        }
        self.pairs.iter().map(|c| load_case(base, c, self.num_classes)).collect()
    }
}
