//! Cross-validated grid search over (C, epsilon, gamma).

use super::{rmse, train_svr, FeatureVector, SvrParams, TrainedModel};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;

#[derive(Debug, Clone)]
pub struct GridSpec {
    pub c: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl Default for GridSpec {
    /// Powers-of-two ranges in the spirit of the usual SVM tooling advice:
    /// C in 2^-3..2^7, gamma in 2^-7..2^3 (stride 2^2), epsilon fixed set.
    fn default() -> Self {
        GridSpec {
            c: (-3..=7).step_by(2).map(|e| 2f64.powi(e)).collect(),
            epsilon: vec![0.1, 0.5, 1.0],
            gamma: (-7..=3).step_by(2).map(|e| 2f64.powi(e)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridPoint {
    pub c: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub cv_rmse: f64,
}

#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub best: SvrParams,
    pub best_rmse: f64,
    pub surface: Vec<GridPoint>,
}

/// Canonically ordered copy of the samples, so every downstream step
/// (fold split, SMO iteration order) is invariant to the incoming order.
fn canonical_order(samples: &[(FeatureVector, f64)]) -> Vec<(FeatureVector, f64)> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|(xa, ya), (xb, yb)| {
        xa.values
            .iter()
            .map(|v| v.to_bits())
            .cmp(xb.values.iter().map(|v| v.to_bits()))
            .then(ya.to_bits().cmp(&yb.to_bits()))
    });
    sorted
}

/// Deterministic fold assignment: a seeded shuffle dealt round-robin.
fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut fold = vec![0usize; n];
    for (pos, &idx) in order.iter().enumerate() {
        fold[idx] = pos % folds;
    }
    fold
}

/// 5-fold (by default) cross-validated grid search; returns the argmin-RMSE
/// triple and the full RMSE surface.
pub fn grid_search(
    samples: &[(FeatureVector, f64)],
    grid: &GridSpec,
    folds: usize,
    seed: u64,
) -> Result<GridSearchResult> {
    if samples.len() < folds {
        return Err(Error::Config(format!(
            "need at least {folds} samples for {folds}-fold cross-validation"
        )));
    }
    if grid.c.is_empty() || grid.epsilon.is_empty() || grid.gamma.is_empty() {
        return Err(Error::Config("grid must not be empty".into()));
    }
    let samples = canonical_order(samples);
    let samples = samples.as_slice();
    let fold = fold_assignment(samples.len(), folds, seed);
    let mut surface = Vec::new();
    let mut best: Option<GridPoint> = None;
    for &c in &grid.c {
        for &epsilon in &grid.epsilon {
            for &gamma in &grid.gamma {
                let params = SvrParams { c, epsilon, gamma, ..Default::default() };
                let mut preds = Vec::with_capacity(samples.len());
                let mut truths = Vec::with_capacity(samples.len());
                for k in 0..folds {
                    let train: Vec<(FeatureVector, f64)> = samples
                        .iter()
                        .zip(&fold)
                        .filter(|(_, &f)| f != k)
                        .map(|(s, _)| s.clone())
                        .collect();
                    let test: Vec<&(FeatureVector, f64)> = samples
                        .iter()
                        .zip(&fold)
                        .filter(|(_, &f)| f == k)
                        .map(|(s, _)| s)
                        .collect();
                    if train.len() < 2 || test.is_empty() {
                        continue;
                    }
                    let (model, _) = train_svr(&train, &params)?;
                    for (x, y) in test {
                        preds.push(model.predict(x));
                        truths.push(*y);
                    }
                }
                let cv = rmse(&preds, &truths);
                let point = GridPoint { c, epsilon, gamma, cv_rmse: cv };
                let better = best.as_ref().map(|b| cv < b.cv_rmse).unwrap_or(true);
                if better {
                    best = Some(point.clone());
                }
                surface.push(point);
            }
        }
    }
    let b = best.unwrap();
    Ok(GridSearchResult {
        best: SvrParams { c: b.c, epsilon: b.epsilon, gamma: b.gamma, ..Default::default() },
        best_rmse: b.cv_rmse,
        surface,
    })
}

/// Train on all samples with grid-searched parameters; stores the CV RMSE.
pub fn train_with_grid(
    samples: &[(FeatureVector, f64)],
    grid: &GridSpec,
    folds: usize,
    seed: u64,
) -> Result<(TrainedModel, GridSearchResult)> {
    let gs = grid_search(samples, grid, folds, seed)?;
    let (mut model, _) = train_svr(samples, &gs.best)?;
    model.cv_rmse = Some(gs.best_rmse);
    Ok((model, gs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svr::FeatureVector;

    fn synth(n: usize) -> Vec<(FeatureVector, f64)> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        (0..n)
            .map(|_| {
                let a: f64 = rng.gen_range(-2.0..2.0);
                let b: f64 = rng.gen_range(-2.0..2.0);
                (FeatureVector::custom(vec![a, b]), (a - b).tanh() + 0.5 * a)
            })
            .collect()
    }

    #[test]
    fn one_point_grid_returns_it() {
        let grid = GridSpec { c: vec![2.0], epsilon: vec![0.1], gamma: vec![0.5] };
        let s = synth(30);
        let r = grid_search(&s, &grid, 5, 1).unwrap();
        assert_eq!(r.surface.len(), 1);
        assert_eq!(r.best.c, 2.0);
        assert_eq!(r.best.gamma, 0.5);
    }

    #[test]
    fn duplicate_grid_points_have_identical_rmse() {
        let grid = GridSpec { c: vec![2.0, 2.0], epsilon: vec![0.1], gamma: vec![0.5] };
        let s = synth(30);
        let r = grid_search(&s, &grid, 5, 1).unwrap();
        assert_eq!(r.surface.len(), 2);
        assert_eq!(r.surface[0].cv_rmse, r.surface[1].cv_rmse);
    }

    #[test]
    fn argmin_beats_every_other_surface_point() {
        let grid = GridSpec {
            c: vec![0.125, 2.0, 32.0],
            epsilon: vec![0.05, 0.2],
            gamma: vec![0.1, 0.5, 2.0],
        };
        let s = synth(40);
        let r = grid_search(&s, &grid, 5, 7).unwrap();
        for p in &r.surface {
            assert!(r.best_rmse <= p.cv_rmse + 1e-12);
        }
    }

    #[test]
    fn result_invariant_to_sample_order() {
        let grid = GridSpec { c: vec![1.0, 8.0], epsilon: vec![0.1], gamma: vec![0.3] };
        let s = synth(25);
        let r1 = grid_search(&s, &grid, 5, 3).unwrap();
        let mut rev = s.clone();
        rev.reverse();
        let r2 = grid_search(&rev, &grid, 5, 3).unwrap();
        assert_eq!(r1.best_rmse, r2.best_rmse);
        assert_eq!(r1.best.c, r2.best.c);
    }
}
