//! The fixed teacher: pre-extracted features `v` and the soft labels
//! `softmax(W0 v / tau)` obtained from complete (unmasked) inputs.
//!
//! Soft labels only depend on fixed inputs and fixed weights, so they are
//! computed once when the bank is built.

use crate::error::{Error, Result};
use crate::numkit::{softmax, Matrix};

pub const DEFAULT_TAU: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct TeacherBank {
    features: Matrix,
    classifier: Matrix,
    tau: f64,
    soft_labels: Matrix,
}

impl TeacherBank {
    pub fn build(features: Matrix, classifier: Matrix, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid(
                "tau",
                format!("must be positive, got {tau}"),
            ));
        }
        if features.cols() != classifier.cols() {
            return Err(Error::shape(
                "teacher features vs classifier",
                &features.shape(),
                &classifier.shape(),
            ));
        }
        let k = classifier.rows();
        let mut soft_labels = Matrix::zeros(features.rows(), k);
        for i in 0..features.rows() {
            let logits = classifier.mul_vec(features.row(i))?;
            soft_labels
                .row_mut(i)
                .copy_from_slice(&softmax(&logits, tau)?);
        }
        Ok(TeacherBank {
            features,
            classifier,
            tau,
            soft_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.rows()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn classifier(&self) -> &Matrix {
        &self.classifier
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn soft_labels(&self) -> &Matrix {
        &self.soft_labels
    }

    pub fn feature(&self, i: usize) -> Result<&[f64]> {
        self.check(i)?;
        Ok(self.features.row(i))
    }

    pub fn soft_label(&self, i: usize) -> Result<&[f64]> {
        self.check(i)?;
        Ok(self.soft_labels.row(i))
    }

    fn check(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.len(),
            });
        }
        Ok(())
    }
}
