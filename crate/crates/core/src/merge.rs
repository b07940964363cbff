//! Weighted merging of same-architecture models.
//!
//! A merge is `Σ_t w_t · M_t` with `w` on the probability simplex, applied
//! elementwise to every tensor. Group merges and the final cross-group merge
//! use the same operation.

use std::borrow::Borrow;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{load_checkpoint, CheckpointError, Tensor, TensorMap};

/// Tolerance on `Σ w = 1`.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("nothing to merge")]
    Empty,
    #[error("{models} models but {weights} weights")]
    LengthMismatch { models: usize, weights: usize },
    #[error("model {model} has no tensor {tensor:?}")]
    MissingTensor { model: usize, tensor: String },
    #[error("model {model} has {found} tensors, expected {expected}")]
    TensorCount {
        model: usize,
        expected: usize,
        found: usize,
    },
    #[error("tensor {tensor:?}: model {model} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        tensor: String,
        model: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid merge weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("recipe {path}: {message}")]
    Recipe { path: String, message: String },
}

/// Non-negative weights summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct WeightVector(Vec<f32>);

impl WeightVector {
    pub fn new(values: Vec<f32>) -> Result<Self, MergeError> {
        if values.is_empty() {
            return Err(MergeError::InvalidWeights("empty weight vector".into()));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(MergeError::InvalidWeights(format!(
                "weight {v} is negative or non-finite"
            )));
        }
        let sum: f64 = values.iter().map(|&v| v as f64).sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(MergeError::InvalidWeights(format!("weights sum to {sum}")));
        }
        Ok(Self(values))
    }

    pub fn uniform(n: usize) -> Result<Self, MergeError> {
        project_simplex(&vec![1.0; n])
    }

    /// `1` at `index`, `0` elsewhere.
    pub fn one_hot(n: usize, index: usize) -> Result<Self, MergeError> {
        let mut v = vec![0.0; n];
        *v.get_mut(index)
            .ok_or_else(|| MergeError::InvalidWeights(format!("index {index} out of range for {n}")))? = 1.0;
        Self::new(v)
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().map(|&v| v as f64).sum()
    }
}

impl TryFrom<Vec<f32>> for WeightVector {
    type Error = MergeError;

    fn try_from(v: Vec<f32>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<WeightVector> for Vec<f32> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

/// Clamps negatives to zero and rescales to unit sum. An all-zero vector maps
/// to the uniform vector.
pub fn project_simplex(raw: &[f32]) -> Result<WeightVector, MergeError> {
    if raw.is_empty() {
        return Err(MergeError::InvalidWeights("cannot project an empty vector".into()));
    }
    if raw.iter().any(|v| v.is_nan()) {
        return Err(MergeError::InvalidWeights("NaN in raw weights".into()));
    }
    let clamped: Vec<f64> = raw.iter().map(|&v| (v as f64).max(0.0)).collect();
    let sum: f64 = clamped.iter().sum();
    let values = if sum == 0.0 || !sum.is_finite() {
        if sum.is_infinite() {
            // only the infinite entries survive
            let n = clamped.iter().filter(|v| v.is_infinite()).count() as f64;
            clamped
                .iter()
                .map(|v| if v.is_infinite() { (1.0 / n) as f32 } else { 0.0 })
                .collect()
        } else {
            vec![(1.0 / raw.len() as f64) as f32; raw.len()]
        }
    } else {
        clamped.iter().map(|v| (v / sum) as f32).collect()
    };
    Ok(WeightVector(values))
}

/// Two-level weights flattened to one vector: `outer[g] · inner[g][t]`,
/// ordered group by group.
pub fn flatten_weights(outer: &WeightVector, inner: &[WeightVector]) -> Result<WeightVector, MergeError> {
    if outer.len() != inner.len() {
        return Err(MergeError::LengthMismatch {
            models: inner.len(),
            weights: outer.len(),
        });
    }
    let flat: Vec<f32> = outer
        .values()
        .iter()
        .zip(inner)
        .flat_map(|(&wg, w)| w.values().iter().map(move |&wt| (wg as f64 * wt as f64) as f32))
        .collect();
    project_simplex(&flat)
}

fn check_compatible<M: Borrow<TensorMap>>(models: &[M]) -> Result<(), MergeError> {
    let first = models.first().ok_or(MergeError::Empty)?.borrow();
    for (i, m) in models.iter().enumerate().skip(1) {
        let m = m.borrow();
        if m.len() != first.len() {
            return Err(MergeError::TensorCount {
                model: i,
                expected: first.len(),
                found: m.len(),
            });
        }
        for t in first.iter() {
            let other = m.get(&t.name).ok_or_else(|| MergeError::MissingTensor {
                model: i,
                tensor: t.name.clone(),
            })?;
            if other.shape != t.shape {
                return Err(MergeError::ShapeMismatch {
                    tensor: t.name.clone(),
                    model: i,
                    expected: t.shape.clone(),
                    found: other.shape.clone(),
                });
            }
        }
    }
    Ok(())
}

/// `Σ_t w[t] · models[t]`, tensor by tensor.
///
/// Each element is accumulated in f64 in model order and cast to f32 once.
/// Zero-weight models are skipped, so a one-hot weight returns a bitwise copy.
pub fn merge_weighted<M: Borrow<TensorMap> + Sync>(models: &[M], w: &WeightVector) -> Result<TensorMap, MergeError> {
    if models.len() != w.len() {
        return Err(MergeError::LengthMismatch {
            models: models.len(),
            weights: w.len(),
        });
    }
    check_compatible(models)?;
    let first = models[0].borrow();
    let active: Vec<(f64, &TensorMap)> = w
        .values()
        .iter()
        .zip(models)
        .filter(|(wt, _)| **wt != 0.0)
        .map(|(&wt, m)| (wt as f64, m.borrow()))
        .collect();

    let tensors: Vec<Tensor> = first
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|t| {
            let sources: Vec<(f64, &[f32])> = active
                .iter()
                .map(|(wt, m)| (*wt, m.get(&t.name).expect("checked").data.as_slice()))
                .collect();
            let data = (0..t.data.len())
                .map(|i| {
                    let mut acc: Option<f64> = None;
                    for (wt, src) in &sources {
                        let term = wt * src[i] as f64;
                        acc = Some(match acc {
                            Some(a) => a + term,
                            None => term,
                        });
                    }
                    acc.unwrap_or(0.0) as f32
                })
                .collect();
            Tensor::new(t.name.clone(), t.shape.clone(), data)
        })
        .collect();
    Ok(tensors.into_iter().collect())
}

/// Final cross-group merge: `Σ_g w_g · M_merged,g`.
pub fn merge_groups<M: Borrow<TensorMap> + Sync>(
    group_models: &[M],
    w_g: &WeightVector,
) -> Result<TensorMap, MergeError> {
    merge_weighted(group_models, w_g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeEntry {
    pub path: PathBuf,
    pub weight: f32,
}

/// A serialized merge: which checkpoints, with which weights, at which stage
/// (a group name or `"final"`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecipe {
    pub stage: String,
    pub models: Vec<RecipeEntry>,
}

impl MergeRecipe {
    pub fn new(stage: impl Into<String>, paths: Vec<PathBuf>, w: &WeightVector) -> Result<Self, MergeError> {
        if paths.len() != w.len() {
            return Err(MergeError::LengthMismatch {
                models: paths.len(),
                weights: w.len(),
            });
        }
        Ok(Self {
            stage: stage.into(),
            models: paths
                .into_iter()
                .zip(w.values())
                .map(|(path, &weight)| RecipeEntry { path, weight })
                .collect(),
        })
    }

    pub fn weights(&self) -> Result<WeightVector, MergeError> {
        WeightVector::new(self.models.iter().map(|e| e.weight).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), MergeError> {
        let mut bytes = serde_json::to_vec_pretty(self).map_err(|e| MergeError::Recipe {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        bytes.push(b'\n');
        fs::write(path, bytes).map_err(|e| MergeError::Recipe {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, MergeError> {
        let err = |message: String| MergeError::Recipe {
            path: path.display().to_string(),
            message,
        };
        let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))
    }

    /// Loads every referenced checkpoint (relative paths resolve against
    /// `root`) and merges them.
    pub fn apply(&self, root: &Path) -> Result<TensorMap, MergeError> {
        let models = self
            .models
            .iter()
            .map(|e| load_checkpoint(root.join(&e.path)))
            .collect::<Result<Vec<_>, _>>()?;
        merge_weighted(&models, &self.weights()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_model(v: f32) -> TensorMap {
        [Tensor::scalar("x", v)].into_iter().collect()
    }

    fn vector_model(v: &[f32]) -> TensorMap {
        [Tensor::new("t", vec![v.len()], v.to_vec())].into_iter().collect()
    }

    fn w(v: &[f32]) -> WeightVector {
        WeightVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn projection_cases() {
        assert_eq!(project_simplex(&[2.0, 2.0]).unwrap().values(), [0.5, 0.5]);
        assert_eq!(project_simplex(&[-1.0, 3.0]).unwrap().values(), [0.0, 1.0]);
        let u = project_simplex(&[0.0, 0.0, 0.0]).unwrap();
        assert!(u.values().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-7));
        assert!(project_simplex(&[]).is_err());
        assert_eq!(project_simplex(&[f32::INFINITY, 1.0]).unwrap().values(), [1.0, 0.0]);
    }

    #[test]
    fn weight_vector_validation() {
        assert!(WeightVector::new(vec![0.5, 0.6]).is_err());
        assert!(WeightVector::new(vec![-0.5, 1.5]).is_err());
        assert!(WeightVector::new(vec![]).is_err());
        let parsed: Result<WeightVector, _> = serde_json::from_str("[0.25,0.75]");
        assert_eq!(parsed.unwrap().values(), [0.25, 0.75]);
        assert!(serde_json::from_str::<WeightVector>("[0.3,0.3]").is_err());
    }

    #[test]
    fn arithmetic_cases() {
        let m = merge_weighted(&[vector_model(&[1.0, 3.0]), vector_model(&[3.0, 5.0])], &w(&[0.5, 0.5])).unwrap();
        assert_eq!(m.get("t").unwrap().data, [2.0, 4.0]);
        let m = merge_weighted(&[scalar_model(4.0), scalar_model(8.0)], &w(&[0.25, 0.75])).unwrap();
        assert_eq!(m.get("x").unwrap().data, [7.0]);
        let g = WeightVector::uniform(3).unwrap();
        let m = merge_groups(&[scalar_model(3.0), scalar_model(6.0), scalar_model(9.0)], &g).unwrap();
        assert!((m.get("x").unwrap().data[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn one_hot_is_bitwise_copy() {
        let a = vector_model(&[-0.0, 1.5, -2.25]);
        let b = vector_model(&[7.0, -3.0, 0.0]);
        let m = merge_weighted(&[&a, &b], &WeightVector::one_hot(2, 0).unwrap()).unwrap();
        assert!(m.bitwise_eq(&a));
    }

    #[test]
    fn incompatible_models_are_named() {
        let a = vector_model(&[1.0, 2.0]);
        let b = vector_model(&[1.0]);
        match merge_weighted(&[a.clone(), b], &w(&[0.5, 0.5])) {
            Err(MergeError::ShapeMismatch { tensor, model: 1, .. }) => assert_eq!(tensor, "t"),
            other => panic!("{other:?}"),
        }
        match merge_weighted(&[a.clone(), scalar_model(1.0)], &w(&[0.5, 0.5])) {
            Err(MergeError::MissingTensor { tensor, .. }) => assert_eq!(tensor, "t"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            merge_weighted(&[a], &w(&[0.5, 0.5])),
            Err(MergeError::LengthMismatch { .. })
        ));
        assert!(matches!(
            merge_weighted::<TensorMap>(&[], &w(&[1.0])),
            Err(MergeError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn recipe_round_trip_and_apply() {
        let dir = tempfile::tempdir().unwrap();
        crate::save_checkpoint(&scalar_model(4.0), dir.path().join("a.emcp")).unwrap();
        crate::save_checkpoint(&scalar_model(8.0), dir.path().join("b.emcp")).unwrap();
        let recipe = MergeRecipe::new("SC", vec!["a.emcp".into(), "b.emcp".into()], &w(&[0.25, 0.75])).unwrap();
        let path = dir.path().join("recipe.json");
        recipe.save(&path).unwrap();
        let back = MergeRecipe::load(&path).unwrap();
        assert_eq!(back, recipe);
        assert_eq!(back.apply(dir.path()).unwrap().get("x").unwrap().data, [7.0]);
    }

    fn arb_models(n: usize, len: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
        prop::collection::vec(prop::collection::vec(-10.0f32..10.0, len), n)
    }

    proptest! {
        #[test]
        fn convexity(models in arb_models(4, 6), raw in prop::collection::vec(0.0f32..1.0, 4)) {
            let wv = project_simplex(&raw).unwrap();
            let maps: Vec<TensorMap> = models.iter().map(|m| vector_model(m)).collect();
            let merged = merge_weighted(&maps, &wv).unwrap();
            for (i, v) in merged.get("t").unwrap().data.iter().enumerate() {
                let lo = models.iter().map(|m| m[i]).fold(f32::INFINITY, f32::min);
                let hi = models.iter().map(|m| m[i]).fold(f32::NEG_INFINITY, f32::max);
                prop_assert!(*v >= lo - 1e-5 && *v <= hi + 1e-5);
            }
        }

        #[test]
        fn scaling_commutes(models in arb_models(3, 5), raw in prop::collection::vec(0.0f32..1.0, 3), lambda in -4.0f32..4.0) {
            let wv = project_simplex(&raw).unwrap();
            let maps: Vec<TensorMap> = models.iter().map(|m| vector_model(m)).collect();
            let scaled: Vec<TensorMap> = models
                .iter()
                .map(|m| vector_model(&m.iter().map(|v| v * lambda).collect::<Vec<_>>()))
                .collect();
            let a = merge_weighted(&maps, &wv).unwrap();
            let b = merge_weighted(&scaled, &wv).unwrap();
            for (x, y) in a.get("t").unwrap().data.iter().zip(&b.get("t").unwrap().data) {
                prop_assert!((x * lambda - y).abs() < 1e-4);
            }
        }

        #[test]
        fn permutation_consistency(models in arb_models(4, 5), raw in prop::collection::vec(0.0f32..1.0, 4), rot in 0usize..4) {
            let wv = project_simplex(&raw).unwrap();
            let maps: Vec<TensorMap> = models.iter().map(|m| vector_model(m)).collect();
            let mut pm = maps.clone();
            pm.rotate_left(rot);
            let mut pw = wv.values().to_vec();
            pw.rotate_left(rot);
            let a = merge_weighted(&maps, &wv).unwrap();
            let b = merge_weighted(&pm, &WeightVector(pw)).unwrap();
            for (x, y) in a.get("t").unwrap().data.iter().zip(&b.get("t").unwrap().data) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }

        #[test]
        fn projection_lands_on_simplex(raw in prop::collection::vec(-5.0f32..5.0, 1..12)) {
            let wv = project_simplex(&raw).unwrap();
            prop_assert!(wv.values().iter().all(|&v| v >= 0.0));
            prop_assert!((wv.sum() - 1.0).abs() < SIMPLEX_TOL);
        }
    }
}
