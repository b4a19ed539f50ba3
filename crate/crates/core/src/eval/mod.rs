//! Inference, the persistence baseline, metric reports, prediction curves
//! and the ablation runner.

pub mod ablation;
pub mod report;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::config::{AblationSpec, ModelConfig};
use crate::data::{FeatureStats, SceneSequence, TurbineLayout, WIND_SPEED_CHANNEL};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Mode};
use crate::param::{Checkpoint, ParamStore};
use crate::spatial::{stack_batch, Windformer};
use crate::tensor::Scalar;

pub use ablation::{fit_forecaster, run_ablation, AblationRun};
pub use report::{
    evaluate, export_prediction_curve, write_curve_csv, CurvePoint, MetricsReport, ReportRow,
};

/// Eval-mode forward passes over normalized sequences, `batch_size` at a
/// time. Returns one row of normalized forecasts per sequence.
pub fn predict_normalized<T: Scalar>(
    model: &Windformer,
    params: &ParamStore<T>,
    seqs: &[SceneSequence],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(batch_size.max(1)) {
        let refs: Vec<&SceneSequence> = chunk.iter().collect();
        let (x, _) = stack_batch::<T>(&refs)?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, params, Mode::Eval);
        let y = model.forward(&ctx, ctx.input(x))?;
        let v = y.value();
        let l = v.shape()[1];
        out.extend(v.data().chunks(l).map(|r| r.iter().map(|x| x.as_f64()).collect()));
    }
    Ok(out)
}

/// Anything that maps raw sequences to physical-unit forecasts at every
/// turbine.
pub trait Predictor {
    fn name(&self) -> String;

    fn predict(&self, seqs: &[SceneSequence]) -> Result<Vec<Vec<f64>>>;
}

/// Forecasts each turbine's last observed wind speed.
#[derive(Clone, Debug)]
pub struct Persistence {
    pub layout: TurbineLayout,
}

pub fn persistence_baseline(seq: &SceneSequence, layout: &TurbineLayout) -> Vec<f64> {
    seq.scenes[seq.len() - 1].turbine_channel(layout, WIND_SPEED_CHANNEL)
}

impl Predictor for Persistence {
    fn name(&self) -> String {
        "persistence".into()
    }

    fn predict(&self, seqs: &[SceneSequence]) -> Result<Vec<Vec<f64>>> {
        Ok(seqs.iter().map(|s| persistence_baseline(s, &self.layout)).collect())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ForecasterMeta {
    model: ModelConfig,
    spec: AblationSpec,
    layout: TurbineLayout,
    stats: FeatureStats,
    horizon_minutes: u32,
}

/// A trained model with the layout and normalization it was trained with.
#[derive(Clone, Debug)]
pub struct Forecaster {
    pub model: Windformer,
    pub params: ParamStore<f32>,
    pub layout: TurbineLayout,
    pub stats: FeatureStats,
    pub horizon_minutes: u32,
    pub batch_size: usize,
}

impl Forecaster {
    pub fn checkpoint(&self) -> Checkpoint<f32> {
        let meta = ForecasterMeta {
            model: self.model.cfg.clone(),
            spec: self.model.spec,
            layout: self.layout.clone(),
            stats: self.stats.clone(),
            horizon_minutes: self.horizon_minutes,
        };
        Checkpoint {
            params: self.params.clone(),
            metadata: serde_json::to_value(meta).expect("metadata serializes"),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint<f32>) -> Result<Self> {
        let meta: ForecasterMeta = serde_json::from_value(ckpt.metadata)
            .map_err(|e| Error::Checkpoint(format!("bad forecaster metadata: {e}")))?;
        let mut params = ParamStore::new();
        let model = Windformer::new(
            &meta.model,
            meta.spec,
            &meta.layout,
            &mut params,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        params.copy_values_from(&ckpt.params)?;
        Ok(Self {
            model,
            params,
            layout: meta.layout,
            stats: meta.stats,
            horizon_minutes: meta.horizon_minutes,
            batch_size: 16,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

impl Predictor for Forecaster {
    fn name(&self) -> String {
        self.model.spec.label()
    }

    fn predict(&self, seqs: &[SceneSequence]) -> Result<Vec<Vec<f64>>> {
        if let Some(s) = seqs.iter().find(|s| s.horizon_minutes != self.horizon_minutes) {
            return Err(Error::Config(format!(
                "model forecasts {} min ahead but the data has horizon {} min",
                self.horizon_minutes, s.horizon_minutes
            )));
        }
        let norm = self.stats.apply_dataset(seqs);
        let preds = predict_normalized(&self.model, &self.params, &norm, self.batch_size)?;
        Ok(preds
            .into_iter()
            .map(|r| r.into_iter().map(|v| self.stats.denormalize_target(v)).collect())
            .collect())
    }
}
