//! Versioned JSON model files.
//!
//! Floats are written in shortest round-trip form and parsed exactly, so
//! `load(save(m))` reproduces every number bit for bit. Feature vectors are
//! stored sparsely; covariance factors as packed lower triangles.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::corpus::{FeaturizerConfig, LabelId, LabelSet};
use crate::error::{Error, Result};
use crate::inference::{ConfidenceTable, TrainReport, TrainedModel, VariationalState};
use crate::kernel::KernelHyper;
use crate::predict::DEFAULT_KNN;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeDefaults {
    pub knn: usize,
    pub tie_rule: String,
}

impl Default for DecodeDefaults {
    fn default() -> Self {
        DecodeDefaults {
            knn: DEFAULT_KNN,
            tie_rule: "lowest_label_id".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    pub index: Vec<usize>,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub featurizer: Option<FeaturizerConfig>,
    pub labels: LabelSet,
    pub hyper: KernelHyper,
    pub mu: Vec<Vec<f64>>,
    /// Row-major packed lower triangles of the covariance factors.
    pub chol: Vec<Vec<f64>>,
    pub confidences: ConfidenceTable,
    pub feature_dim: usize,
    pub train_features: Vec<SparseVector>,
    pub train_candidates: Vec<Vec<Vec<LabelId>>>,
    pub elbo: f64,
    pub decode: DecodeDefaults,
}

fn pack_lower(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows())
        .flat_map(|i| (0..=i).map(move |j| m[(i, j)]))
        .collect()
}

fn unpack_lower(packed: &[f64], n: usize) -> Result<DMatrix<f64>> {
    if packed.len() != n * (n + 1) / 2 {
        return Err(Error::Shape(format!(
            "packed factor has {} entries, expected {} for dimension {n}",
            packed.len(),
            n * (n + 1) / 2
        )));
    }
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            m[(i, j)] = packed[k];
            k += 1;
        }
    }
    Ok(m)
}

impl ModelFile {
    pub fn from_model(model: &TrainedModel, decode: DecodeDefaults) -> Self {
        let feature_dim = model.train_features.first().map_or(0, Vec::len);
        ModelFile {
            format_version: FORMAT_VERSION,
            featurizer: model.featurizer,
            labels: model.label_set.clone(),
            hyper: model.hyper.clone(),
            mu: model
                .state
                .mu
                .iter()
                .map(|m| m.as_slice().to_vec())
                .collect(),
            chol: model.state.chol.iter().map(pack_lower).collect(),
            confidences: model.confidences.clone(),
            feature_dim,
            train_features: model
                .train_features
                .iter()
                .map(|f| {
                    let (index, value) = f
                        .iter()
                        .enumerate()
                        .filter(|(_, v)| v.to_bits() != 0)
                        .map(|(i, v)| (i, *v))
                        .unzip();
                    SparseVector { index, value }
                })
                .collect(),
            train_candidates: model.train_candidates.clone(),
            elbo: model.elbo,
            decode,
        }
    }

    pub fn into_model(self) -> Result<(TrainedModel, DecodeDefaults)> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        self.hyper.validate()?;
        let n_labels = self.labels.len();
        let n_tokens: usize = self.train_candidates.iter().map(Vec::len).sum();
        if self.hyper.theta.len() != n_labels
            || self.mu.len() != n_labels + 1
            || self.chol.len() != n_labels + 1
        {
            return Err(Error::Shape(
                "block count does not match the label set".into(),
            ));
        }
        let dims = |b: usize| {
            if b < n_labels {
                n_tokens
            } else {
                n_labels * n_labels
            }
        };
        let mu: Vec<DVector<f64>> = self.mu.into_iter().map(DVector::from_vec).collect();
        let chol = self
            .chol
            .iter()
            .enumerate()
            .map(|(b, packed)| unpack_lower(packed, dims(b)))
            .collect::<Result<Vec<_>>>()?;
        if mu.iter().enumerate().any(|(b, m)| m.len() != dims(b)) {
            return Err(Error::Shape(
                "mean block length does not match the training data".into(),
            ));
        }
        if self.train_features.len() != n_tokens {
            return Err(Error::Shape(
                "feature count does not match the training candidates".into(),
            ));
        }
        let train_features = self
            .train_features
            .into_iter()
            .map(|sv| {
                let mut dense = vec![0.0; self.feature_dim];
                for (&i, &v) in sv.index.iter().zip(&sv.value) {
                    *dense.get_mut(i).ok_or_else(|| {
                        Error::Shape(format!(
                            "feature index {i} outside dimension {}",
                            self.feature_dim
                        ))
                    })? = v;
                }
                Ok(dense)
            })
            .collect::<Result<Vec<_>>>()?;
        if self.decode.knn == 0 {
            return Err(Error::Config("stored K_nn must be at least 1".into()));
        }
        let model = TrainedModel {
            label_set: self.labels,
            featurizer: self.featurizer,
            hyper: self.hyper,
            state: VariationalState { mu, chol },
            confidences: self.confidences,
            train_features,
            train_candidates: self.train_candidates,
            elbo: self.elbo,
            report: TrainReport::default(),
        };
        if !model.confidences.matches(&model.factor_set()?) {
            return Err(Error::Shape(
                "confidence table does not match the training candidates".into(),
            ));
        }
        Ok((model, self.decode))
    }
}

pub fn to_json(model: &TrainedModel, decode: &DecodeDefaults) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ModelFile::from_model(
        model,
        decode.clone(),
    ))?)
}

pub fn from_json(text: &str) -> Result<(TrainedModel, DecodeDefaults)> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64);
    if found != Some(FORMAT_VERSION as u64) {
        return Err(Error::Version {
            found: found.map_or(0, |v| v as u32),
            expected: FORMAT_VERSION,
        });
    }
    let file: ModelFile = serde_json::from_value(value)?;
    file.into_model()
}

pub fn save(model: &TrainedModel, decode: &DecodeDefaults, path: &Path) -> Result<()> {
    fs::write(path, to_json(model, decode)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(TrainedModel, DecodeDefaults)> {
    from_json(&fs::read_to_string(path)?)
}
