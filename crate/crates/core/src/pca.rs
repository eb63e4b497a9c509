//! Principal component analysis sized by retained variance.
//!
//! The basis is the smallest set of leading eigenvectors of the sample
//! covariance (unbiased, `N - 1`) whose eigenvalues reach the requested
//! fraction of the total variance. Each component is sign-normalized so its
//! largest-magnitude entry is positive, which makes fits reproducible.

use nalgebra::{DMatrix, SymmetricEigen, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vectorize::FeatureVectorSet;

pub const DEFAULT_RETAIN: f64 = 0.95;

/// Above this input dimension the covariance matrix is not formed explicitly.
pub const COVARIANCE_PATH_MAX_DIM: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PcaSolver {
    /// Covariance eigendecomposition up to [`COVARIANCE_PATH_MAX_DIM`], SVD beyond.
    #[default]
    Auto,
    Covariance,
    Svd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PcaRepr", into = "PcaRepr")]
pub struct PcaModel {
    mean: Vec<f64>,
    components: Vec<Vec<f64>>,
    explained_variance: Vec<f64>,
    retain_target: f64,
    retain_actual: f64,
}

#[derive(Serialize, Deserialize)]
struct PcaRepr {
    mean: Vec<f64>,
    components: Vec<Vec<f64>>,
    explained_variance: Vec<f64>,
    retain_target: f64,
    retain_actual: f64,
}

impl From<PcaModel> for PcaRepr {
    fn from(m: PcaModel) -> Self {
        PcaRepr {
            mean: m.mean,
            components: m.components,
            explained_variance: m.explained_variance,
            retain_target: m.retain_target,
            retain_actual: m.retain_actual,
        }
    }
}

impl TryFrom<PcaRepr> for PcaModel {
    type Error = Error;

    fn try_from(r: PcaRepr) -> Result<Self> {
        PcaModel::from_parts(
            r.mean,
            r.components,
            r.explained_variance,
            r.retain_target,
            r.retain_actual,
        )
    }
}

impl PcaModel {
    /// Assembles a model from raw parts, checking shapes and ordering.
    ///
    /// Orthonormality is not re-verified here; fitted models satisfy it by
    /// construction.
    pub fn from_parts(
        mean: Vec<f64>,
        components: Vec<Vec<f64>>,
        explained_variance: Vec<f64>,
        retain_target: f64,
        retain_actual: f64,
    ) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::validation("pca.mean", "input dimension must be positive"));
        }
        if components.is_empty() || components.len() > d {
            return Err(Error::validation(
                "pca.components",
                format!("need between 1 and {d} components, found {}", components.len()),
            ));
        }
        if let Some(c) = components.iter().find(|c| c.len() != d) {
            return Err(Error::dim_mismatch("pca component", d, c.len()));
        }
        if explained_variance.len() != components.len() {
            return Err(Error::dim_mismatch(
                "pca.explained_variance",
                components.len(),
                explained_variance.len(),
            ));
        }
        if explained_variance.windows(2).any(|w| w[1] > w[0]) || explained_variance.iter().any(|v| *v < 0.0) {
            return Err(Error::validation(
                "pca.explained_variance",
                "must be non-negative and non-increasing",
            ));
        }
        if !(retain_target > 0.0 && retain_target <= 1.0) {
            return Err(Error::validation("pca.retain_target", "must lie in (0, 1]"));
        }
        Ok(PcaModel {
            mean,
            components,
            explained_variance,
            retain_target,
            retain_actual,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    pub fn retain_target(&self) -> f64 {
        self.retain_target
    }

    pub fn retain_actual(&self) -> f64 {
        self.retain_actual
    }

    /// Projects one vector onto the basis.
    pub fn project_one(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input_dim());
        self.components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(w, (xi, mi))| w * (xi - mi))
                    .sum()
            })
            .collect()
    }

    /// Maps reduced coordinates back to input space.
    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for (c, zk) in self.components.iter().zip(z) {
            x.iter_mut().zip(c).for_each(|(xi, ci)| *xi += zk * ci);
        }
        x
    }
}

/// Smallest `B` whose leading eigenvalues reach `retain` of the total, and the
/// fraction actually retained. `eigenvalues` must be sorted descending.
pub fn components_for_retention(eigenvalues: &[f64], retain: f64) -> (usize, f64) {
    let total: f64 = eigenvalues.iter().sum();
    let goal = retain * total;
    let mut cum = 0.0;
    for (k, v) in eigenvalues.iter().enumerate() {
        cum += v;
        if cum >= goal {
            return (k + 1, (cum / total).min(1.0));
        }
    }
    // Rounding in the running sum can leave `cum` a hair under `goal` when retain = 1.
    (eigenvalues.len(), 1.0)
}

pub fn fit_pca(x: &FeatureVectorSet, retain: f64) -> Result<PcaModel> {
    fit_pca_with(x, retain, PcaSolver::Auto)
}

pub fn fit_pca_with(x: &FeatureVectorSet, retain: f64, solver: PcaSolver) -> Result<PcaModel> {
    if !(retain > 0.0 && retain <= 1.0) {
        return Err(Error::InvalidConfig(format!("retain must lie in (0, 1], got {retain}")));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "PCA needs at least 2 vectors, found {n}"
        )));
    }
    let d = x.dim();
    let mut mean = vec![0.0; d];
    for v in x.iter() {
        mean.iter_mut().zip(v).for_each(|(m, vi)| *m += vi);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| x.vector(i)[j] - mean[j]);

    let use_svd = match solver {
        PcaSolver::Auto => d > COVARIANCE_PATH_MAX_DIM,
        PcaSolver::Covariance => false,
        PcaSolver::Svd => true,
    };
    // (eigenvalue, eigenvector) pairs in decomposition order.
    let mut pairs: Vec<(f64, Vec<f64>)> = if use_svd {
        let svd = SVD::new(centered, false, true);
        let v_t = svd.v_t.expect("SVD was asked for V^T");
        svd.singular_values
            .iter()
            .enumerate()
            .map(|(k, s)| (s * s / (n - 1) as f64, v_t.row(k).iter().copied().collect()))
            .collect()
    } else {
        let cov = centered.tr_mul(&centered) / (n - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        eig.eigenvalues
            .iter()
            .enumerate()
            .map(|(k, &ev)| (ev, eig.eigenvectors.column(k).iter().copied().collect()))
            .collect()
    };
    for p in pairs.iter_mut() {
        p.0 = p.0.max(0.0);
    }
    // Stable sort keeps the decomposition's own order among equal eigenvalues.
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

    let eigenvalues: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let total: f64 = eigenvalues.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateData(
            "all vectors are identical (zero total variance)".into(),
        ));
    }
    let (b, actual) = components_for_retention(&eigenvalues, retain);
    let mut components = Vec::with_capacity(b);
    let mut explained = Vec::with_capacity(b);
    for (ev, mut v) in pairs.into_iter().take(b) {
        orient(&mut v);
        components.push(v);
        explained.push(ev);
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance: explained,
        retain_target: retain,
        retain_actual: actual,
    })
}

/// Flips `v` so its largest-magnitude entry (first one, on ties) is positive.
fn orient(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub fn project(model: &PcaModel, x: &FeatureVectorSet) -> Result<FeatureVectorSet> {
    if x.dim() != model.input_dim() {
        return Err(Error::dim_mismatch("PCA input", model.input_dim(), x.dim()));
    }
    let mut data = Vec::with_capacity(x.len() * model.n_components());
    for v in x.iter() {
        data.extend(model.project_one(v));
    }
    FeatureVectorSet::from_flat(model.n_components(), data)
}
