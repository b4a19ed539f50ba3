use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::scene::{Scene, SceneSequence, WIND_SPEED_CHANNEL};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel z-score statistics, fit on turbine cells of the training
/// split. Non-turbine cells stay at 0 under `apply` and `invert`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Scenes shared between overlapping windows are counted once.
    pub fn fit(train: &[SceneSequence]) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        let mut scenes: Vec<&Scene> = Vec::new();
        for seq in train {
            for s in &seq.scenes {
                if seen.insert(s.timestamp) {
                    scenes.push(s);
                }
            }
        }
        let first = scenes
            .first()
            .ok_or_else(|| Error::Contract("cannot fit normalizer on an empty split".into()))?;
        let f = first.num_features();
        let plane = first.height() * first.width();
        let mut mean = vec![0.0; f];
        let mut std = vec![0.0; f];
        for c in 0..f {
            let values = || {
                scenes.iter().flat_map(move |s| {
                    let ch = &s.features.data()[c * plane..(c + 1) * plane];
                    ch.iter().zip(&s.valid_mask).filter(|(_, &m)| m).map(|(v, _)| *v)
                })
            };
            let n = values().count() as f64;
            let m = values().sum::<f64>() / n;
            let var = values().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            if !(var.sqrt() > 0.0) {
                return Err(Error::Contract(format!(
                    "feature {c} has zero variance on the training split"
                )));
            }
            mean[c] = m;
            std[c] = var.sqrt();
        }
        Ok(Self { mean, std })
    }

    fn map_scene(&self, scene: &Scene, f: impl Fn(f64, f64, f64) -> f64) -> Scene {
        let plane = scene.height() * scene.width();
        let mut data = scene.features.data().to_vec();
        for (c, ch) in data.chunks_mut(plane).enumerate() {
            for (v, &m) in ch.iter_mut().zip(&scene.valid_mask) {
                if m {
                    *v = f(*v, self.mean[c], self.std[c]);
                }
            }
        }
        Scene {
            features: Tensor::new(scene.features.shape().to_vec(), data).expect("same shape"),
            valid_mask: scene.valid_mask.clone(),
            timestamp: scene.timestamp,
        }
    }

    pub fn apply(&self, scene: &Scene) -> Scene {
        self.map_scene(scene, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, scene: &Scene) -> Scene {
        self.map_scene(scene, |v, m, s| v * s + m)
    }

    pub fn normalize_target(&self, v: f64) -> f64 {
        (v - self.mean[WIND_SPEED_CHANNEL]) / self.std[WIND_SPEED_CHANNEL]
    }

    pub fn denormalize_target(&self, v: f64) -> f64 {
        v * self.std[WIND_SPEED_CHANNEL] + self.mean[WIND_SPEED_CHANNEL]
    }

    /// Normalizes scenes and targets. Scenes shared between windows stay
    /// shared in the output.
    pub fn apply_dataset(&self, seqs: &[SceneSequence]) -> Vec<SceneSequence> {
        let mut cache: HashMap<*const Scene, Arc<Scene>> = HashMap::new();
        seqs.iter()
            .map(|seq| {
                let scenes = seq
                    .scenes
                    .iter()
                    .map(|s| {
                        cache
                            .entry(Arc::as_ptr(s))
                            .or_insert_with(|| Arc::new(self.apply(s)))
                            .clone()
                    })
                    .collect();
                SceneSequence {
                    scenes,
                    target: seq.target.map(|v| self.normalize_target(v)),
                    horizon_minutes: seq.horizon_minutes,
                }
            })
            .collect()
    }
}
