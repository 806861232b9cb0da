use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::read_tensor;
use crate::error::{Error, Result};
use crate::numkit::Matrix;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub query: Vec<usize>,
    pub database: Vec<usize>,
    pub train: Vec<usize>,
}

impl Split {
    /// Checks uniqueness within each list, query/database disjointness,
    /// `train ⊆ database`, and (when `n` is known) index bounds.
    pub fn validate(&self, n: Option<usize>) -> Result<()> {
        let unique = |name: &str, idx: &[usize]| -> Result<HashSet<usize>> {
            let set: HashSet<usize> = idx.iter().copied().collect();
            if set.len() != idx.len() {
                return Err(Error::InvalidManifest(format!(
                    "{name} split has duplicate indices"
                )));
            }
            if let Some(n) = n {
                if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                    return Err(Error::InvalidManifest(format!(
                        "{name} index {bad} out of range for {n} samples"
                    )));
                }
            }
            Ok(set)
        };
        unique("query", &self.query)?;
        let database = unique("database", &self.database)?;
        unique("train", &self.train)?;
        if let Some(&i) = self.query.iter().find(|i| database.contains(i)) {
            return Err(Error::InvalidManifest(format!(
                "sample {i} is in both query and database splits"
            )));
        }
        if let Some(&i) = self.train.iter().find(|i| !database.contains(i)) {
            return Err(Error::InvalidManifest(format!(
                "train sample {i} is not in the database split"
            )));
        }
        Ok(())
    }
}

/// `manifest.json`. Paths are relative to the manifest's directory unless
/// absolute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub tokens_path: PathBuf,
    pub teacher_features_path: PathBuf,
    pub classifier_path: PathBuf,
    pub labels_path: PathBuf,
    /// Token mixing matrix of synthetic datasets; absent for exported data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixing_path: Option<PathBuf>,
    pub split: Split,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::json(format!("parsing manifest {}", path.display()), e))?;
        manifest.split.validate(None)?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json("serialising manifest", e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Borrowed `P × d_in` token grid of one sample.
#[derive(Debug, Clone, Copy)]
pub struct TokenSample<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> TokenSample<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::shape("TokenSample::new", &[data.len()], &[dim]));
        }
        Ok(TokenSample { data, dim })
    }

    pub fn num_tokens(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token(&self, p: usize) -> &'a [f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }
}

/// All token grids of a dataset, `N × P × d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBank {
    n: usize,
    tokens: usize,
    dim: usize,
    data: Vec<f64>,
}

impl TokenBank {
    pub fn new(n: usize, tokens: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || tokens == 0 || dim == 0 || data.len() != n * tokens * dim {
            return Err(Error::shape(
                "TokenBank::new",
                &[n, tokens, dim],
                &[data.len()],
            ));
        }
        Ok(TokenBank {
            n,
            tokens,
            dim,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn tokens_per_sample(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.n, self.tokens, self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn sample(&self, i: usize) -> TokenSample<'_> {
        let stride = self.tokens * self.dim;
        TokenSample {
            data: &self.data[i * stride..(i + 1) * stride],
            dim: self.dim,
        }
    }
}

/// A manifest together with every tensor it references, validated.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub tokens: TokenBank,
    pub teacher_features: Matrix,
    pub classifier: Matrix,
    pub labels: Matrix,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

        let tokens = read_tensor(&resolve(base, &manifest.tokens_path))?;
        let tokens = match *tokens.shape() {
            [n, p, d] => TokenBank::new(n, p, d, tokens.into_data())?,
            _ => {
                return Err(Error::InvalidManifest(format!(
                    "tokens must be N x P x d_in, got shape {:?}",
                    tokens.shape()
                )))
            }
        };
        let teacher_features =
            read_tensor(&resolve(base, &manifest.teacher_features_path))?.into_matrix()?;
        let classifier = read_tensor(&resolve(base, &manifest.classifier_path))?.into_matrix()?;
        let labels = read_tensor(&resolve(base, &manifest.labels_path))?.into_matrix()?;

        let dataset = Dataset {
            manifest,
            tokens,
            teacher_features,
            classifier,
            labels,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if self.teacher_features.rows() != n || self.labels.rows() != n {
            return Err(Error::InvalidManifest(format!(
                "sample counts disagree: tokens {n}, teacher features {}, labels {}",
                self.teacher_features.rows(),
                self.labels.rows()
            )));
        }
        if self.classifier.cols() != self.teacher_features.cols() {
            return Err(Error::shape(
                "classifier vs teacher features",
                &self.classifier.shape(),
                &self.teacher_features.shape(),
            ));
        }
        for i in 0..n {
            let row = self.labels.row(i);
            if row.iter().any(|&x| x != 0.0 && x != 1.0) {
                return Err(Error::InvalidManifest(format!(
                    "labels row {i} is not multi-hot"
                )));
            }
            if !row.contains(&1.0) {
                return Err(Error::InvalidManifest(format!(
                    "sample {i} has no positive label"
                )));
            }
        }
        self.manifest.split.validate(Some(n))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.teacher_features.cols()
    }
}
