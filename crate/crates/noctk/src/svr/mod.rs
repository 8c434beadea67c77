//! Learning-based latency model: epsilon-SVR with an RBF kernel, trained by
//! SMO on the dual, plus feature extraction and the network prediction
//! engine.

pub mod features;
pub mod grid;
pub mod smo;

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Feature layout version; bumped when the slot assignment changes.
pub const FEATURE_LAYOUT_VERSION: u32 = 1;

pub const CQ_FEATURES: usize = 11;
pub const SQ_FEATURES: usize = 19;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Channel-queue vector (11 slots).
    Cq,
    /// Source-queue vector (19 slots).
    Sq,
    /// Free-form vector for generic regression use.
    Custom(u16),
}

impl FeatureKind {
    pub fn len(&self) -> usize {
        match self {
            FeatureKind::Cq => CQ_FEATURES,
            FeatureKind::Sq => SQ_FEATURES,
            FeatureKind::Custom(n) => *n as usize,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub kind: FeatureKind,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(kind: FeatureKind, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), kind.len(), "feature length does not match kind");
        FeatureVector { kind, values }
    }

    pub fn custom(values: Vec<f64>) -> Self {
        let kind = FeatureKind::Custom(values.len() as u16);
        FeatureVector { kind, values }
    }
}

/// RBF kernel `exp(-gamma * ||x - x'||^2)`.
pub fn rbf_kernel(x: &[f64], y: &[f64], gamma: f64) -> f64 {
    assert_eq!(x.len(), y.len(), "kernel operands must have equal length");
    assert!(gamma > 0.0, "gamma must be positive");
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-gamma * d2).exp()
}

/// Per-feature standardization fitted on the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(rows: &[Vec<f64>]) -> Scaler {
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut std = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Scaler { mean, std }
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvrParams {
    pub c: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SvrParams {
    fn default() -> Self {
        SvrParams { c: 8.0, epsilon: 0.1, gamma: 0.25, tol: 1e-3, max_iter: 500_000 }
    }
}

/// A trained regressor: support vectors (standardized), dual coefficients,
/// bias, kernel width, and the training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub layout_version: u32,
    pub kind: FeatureKind,
    pub support_vectors: Vec<Vec<f64>>,
    pub dual_coeffs: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
    pub c: f64,
    pub epsilon: f64,
    pub cv_rmse: Option<f64>,
    pub scaler: Scaler,
}

impl TrainedModel {
    /// Predict a single target value.
    pub fn predict(&self, x: &FeatureVector) -> f64 {
        assert_eq!(x.kind.len(), self.kind.len(), "feature kind mismatch");
        let z = self.scaler.transform(&x.values);
        self.predict_standardized(&z)
    }

    fn predict_standardized(&self, z: &[f64]) -> f64 {
        let mut acc = self.bias;
        for (sv, coeff) in self.support_vectors.iter().zip(&self.dual_coeffs) {
            acc += coeff * rbf_kernel(sv, z, self.gamma);
        }
        acc
    }

    pub fn predict_batch(&self, xs: &[FeatureVector]) -> Vec<f64> {
        xs.iter().map(|x| self.predict(x)).collect()
    }

    pub fn check_compatible(&self, kind: FeatureKind) -> Result<()> {
        if self.layout_version != FEATURE_LAYOUT_VERSION {
            return Err(Error::Version(format!(
                "model feature layout v{} but this build expects v{}",
                self.layout_version, FEATURE_LAYOUT_VERSION
            )));
        }
        if self.kind != kind {
            return Err(Error::Version(format!(
                "model trained for {:?} features, asked to predict {kind:?}",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Train an epsilon-SVR on the samples. Returns the model plus warnings
/// (e.g. identical feature rows with conflicting targets).
pub fn train_svr(
    samples: &[(FeatureVector, f64)],
    params: &SvrParams,
) -> Result<(TrainedModel, Vec<String>)> {
    if samples.len() < 2 {
        return Err(Error::Config("training needs at least 2 samples".into()));
    }
    if params.c <= 0.0 || params.epsilon < 0.0 || params.gamma <= 0.0 {
        return Err(Error::Config("SVR parameters must be positive".into()));
    }
    let kind = samples[0].0.kind;
    for (x, _) in samples {
        if x.kind != kind || x.values.len() != kind.len() {
            return Err(Error::Config("mixed feature kinds in training set".into()));
        }
    }

    let rows: Vec<Vec<f64>> = samples.iter().map(|(x, _)| x.values.clone()).collect();
    let scaler = Scaler::fit(&rows);
    let z: Vec<Vec<f64>> = rows.iter().map(|r| scaler.transform(r)).collect();
    let y: Vec<f64> = samples.iter().map(|&(_, t)| t).collect();

    // degenerate duplicates: identical features, conflicting targets
    let mut warnings = Vec::new();
    {
        use std::collections::HashMap;
        let mut seen: HashMap<Vec<u64>, f64> = HashMap::new();
        for (row, &t) in z.iter().zip(&y) {
            let key: Vec<u64> = row.iter().map(|v| (v * 1e9).round() as i64 as u64).collect();
            match seen.entry(key) {
                std::collections::hash_map::Entry::Occupied(e) => {
                    if (e.get() - t).abs() > 2.0 * params.epsilon {
                        warnings.push(format!(
                            "identical feature rows with conflicting targets ({} vs {t}); slack absorbs",
                            e.get()
                        ));
                    }
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(t);
                }
            }
        }
    }

    let l = z.len();
    let mut kernel = vec![0.0; l * l];
    for i in 0..l {
        for j in i..l {
            let k = rbf_kernel(&z[i], &z[j], params.gamma);
            kernel[i * l + j] = k;
            kernel[j * l + i] = k;
        }
    }
    let cfg = smo::SmoConfig {
        c: params.c,
        epsilon: params.epsilon,
        tol: params.tol,
        max_iter: params.max_iter,
    };
    let sol = smo::solve(&kernel, &y, &cfg);

    let mut support_vectors = Vec::new();
    let mut dual_coeffs = Vec::new();
    for (i, &b) in sol.beta.iter().enumerate() {
        if b.abs() > 1e-12 {
            support_vectors.push(z[i].clone());
            dual_coeffs.push(b);
        }
    }
    let model = TrainedModel {
        layout_version: FEATURE_LAYOUT_VERSION,
        kind,
        support_vectors,
        dual_coeffs,
        bias: sol.bias,
        gamma: params.gamma,
        c: params.c,
        epsilon: params.epsilon,
        cv_rmse: None,
        scaler,
    };
    Ok((model, warnings))
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    if pred.is_empty() {
        return 0.0;
    }
    let mse: f64 =
        pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
    mse.sqrt()
}

/// Squared correlation coefficient between predictions and targets.
pub fn squared_correlation(pred: &[f64], truth: &[f64]) -> f64 {
    let n = pred.len() as f64;
    if pred.is_empty() {
        return 1.0;
    }
    let mp = pred.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vt = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        cov += (p - mp) * (t - mt);
        vp += (p - mp) * (p - mp);
        vt += (t - mt) * (t - mt);
    }
    if vp <= 0.0 || vt <= 0.0 {
        return 1.0;
    }
    (cov * cov) / (vp * vt)
}
