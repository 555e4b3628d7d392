//! Eigengrasp basis: PCA over a human pose dataset, with conversion between
//! low-dimensional weight vectors and full 45-D poses.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::pose_model::{HandPose, POSE_DIM};

pub const DEFAULT_K: usize = 10;

/// Eigengrasp coordinates `w`, one per retained component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EigengraspWeights(pub Vec<f64>);

impl EigengraspWeights {
    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigengraspBasis {
    dim: usize,
    k: usize,
    centered: bool,
    mean: Vec<f64>,
    eigenvalues: Vec<f64>,
    /// `k` rows of length `dim`, row-major.
    components: Vec<f64>,
}

impl EigengraspBasis {
    /// PCA of `dataset`. Eigenvalues use the population (1/N) covariance, or
    /// the second-moment matrix when `centered` is false.
    pub fn compute(dataset: &[HandPose], k: usize, centered: bool) -> Result<Self> {
        let n = dataset.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "PCA needs at least 2 poses, got {n}"
            )));
        }
        if k == 0 || k > POSE_DIM.min(n) {
            return Err(Error::InvalidArgument(format!(
                "k = {k} out of range 1..={}",
                POSE_DIM.min(n)
            )));
        }
        for pose in dataset {
            ensure_finite(pose.as_slice(), "pose dataset")?;
        }

        let mut mean = vec![0.0; POSE_DIM];
        for pose in dataset {
            for (m, v) in mean.iter_mut().zip(pose.as_slice()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);

        let mut scatter = DMatrix::<f64>::zeros(POSE_DIM, POSE_DIM);
        let mut row = [0.0; POSE_DIM];
        for pose in dataset {
            for (i, v) in pose.as_slice().iter().enumerate() {
                row[i] = if centered { v - mean[i] } else { *v };
            }
            for i in 0..POSE_DIM {
                for j in i..POSE_DIM {
                    scatter[(i, j)] += row[i] * row[j];
                }
            }
        }
        for i in 0..POSE_DIM {
            for j in i..POSE_DIM {
                let v = scatter[(i, j)] / n as f64;
                scatter[(i, j)] = v;
                scatter[(j, i)] = v;
            }
        }

        let peak = dataset
            .iter()
            .flat_map(|p| p.as_slice().iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let eig = SymmetricEigen::new(scatter);
        let top = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
        // Rounding in the mean leaves eigenvalues of order eps * scale^2 on
        // degenerate data; those are reported as exact zeros.
        let noise = POSE_DIM as f64 * f64::EPSILON * top.max(peak * peak);
        let mut order: Vec<usize> = (0..POSE_DIM).collect();
        // Stable sort keeps ties in eigensolver order, so the result is deterministic.
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

        let mut eigenvalues = Vec::with_capacity(k);
        let mut components = Vec::with_capacity(k * POSE_DIM);
        for &c in order.iter().take(k) {
            let lambda = eig.eigenvalues[c];
            eigenvalues.push(if lambda <= noise { 0.0 } else { lambda });
            let col = eig.eigenvectors.column(c);
            let pivot = (0..POSE_DIM).fold(0, |best, i| {
                if col[i].abs() > col[best].abs() {
                    i
                } else {
                    best
                }
            });
            let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
            components.extend(col.iter().map(|v| sign * v));
        }

        Ok(Self {
            dim: POSE_DIM,
            k,
            centered,
            mean,
            eigenvalues,
            components,
        })
    }

    /// The leading `k` components of this basis.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k {
            return Err(Error::InvalidArgument(format!("k = {k} out of range 1..={}", self.k)));
        }
        Ok(Self {
            k,
            eigenvalues: self.eigenvalues[..k].to_vec(),
            components: self.components[..k * self.dim].to_vec(),
            ..self.clone()
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn centered(&self) -> bool {
        self.centered
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.dim..(i + 1) * self.dim]
    }

    /// Pose for eigengrasp weights: `mean + sum w_i e_i` when centered,
    /// `sum w_i e_i` otherwise.
    pub fn synthesize(&self, w: &EigengraspWeights) -> Result<HandPose> {
        self.check_weights(w)?;
        let mut theta = if self.centered {
            self.mean.clone()
        } else {
            vec![0.0; self.dim]
        };
        for (i, wi) in w.0.iter().enumerate() {
            for (t, e) in theta.iter_mut().zip(self.component(i)) {
                *t += wi * e;
            }
        }
        HandPose::from_slice(&theta)
    }

    pub fn project(&self, pose: &HandPose) -> EigengraspWeights {
        let centered: Vec<f64> = pose
            .as_slice()
            .iter()
            .zip(&self.mean)
            .map(|(t, m)| if self.centered { t - m } else { *t })
            .collect();
        EigengraspWeights(
            (0..self.k)
                .map(|i| self.component(i).iter().zip(&centered).map(|(e, c)| e * c).sum())
                .collect(),
        )
    }

    pub fn check_weights(&self, w: &EigengraspWeights) -> Result<()> {
        if w.len() != self.k {
            return Err(Error::Dimension {
                what: "eigengrasp weights",
                expected: self.k,
                got: w.len(),
            });
        }
        ensure_finite(&w.0, "eigengrasp weights")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let basis: Self = serde_json::from_str(text)?;
        basis.validate()?;
        Ok(basis)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("basis serializes")
    }

    fn validate(&self) -> Result<()> {
        if self.dim != POSE_DIM {
            return Err(Error::Dimension {
                what: "basis dim",
                expected: POSE_DIM,
                got: self.dim,
            });
        }
        if self.k == 0 || self.k > POSE_DIM {
            return Err(Error::Format(format!("basis k = {} out of range", self.k)));
        }
        let checks = [
            ("basis mean", self.mean.len(), POSE_DIM),
            ("basis eigenvalues", self.eigenvalues.len(), self.k),
            ("basis components", self.components.len(), self.k * POSE_DIM),
        ];
        for (what, got, expected) in checks {
            if got != expected {
                return Err(Error::Dimension { what, expected, got });
            }
        }
        ensure_finite(&self.mean, "basis mean")?;
        ensure_finite(&self.components, "basis components")?;
        ensure_finite(&self.eigenvalues, "basis eigenvalues")
    }
}

/// Free-function form of [`EigengraspBasis::compute`].
pub fn compute_basis(dataset: &[HandPose], k: usize, centered: bool) -> Result<EigengraspBasis> {
    EigengraspBasis::compute(dataset, k, centered)
}

/// Fraction of total variance captured by the first `k` eigenvalues of a
/// full-rank (k = 45) basis.
pub fn explained_ratio(full_spectrum: &[f64], k: usize) -> f64 {
    let total: f64 = full_spectrum.iter().sum();
    if total <= 0.0 {
        return 1.0;
    }
    full_spectrum.iter().take(k).sum::<f64>() / total
}
