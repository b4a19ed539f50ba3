use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AblationSpec, ModelConfig, TrainConfig};
use crate::data::{PreparedData, TurbineLayout};
use crate::error::{Error, Result};
use crate::eval::report::{evaluate, MetricsReport};
use crate::eval::{Forecaster, Persistence};
use crate::param::ParamStore;
use crate::spatial::Windformer;
use crate::training::{train, TrainOutcome};

fn check_data(data: &PreparedData, model: &ModelConfig, train_cfg: &TrainConfig) -> Result<()> {
    let first = &data.train[0];
    if first.horizon_minutes != train_cfg.horizon_minutes {
        return Err(Error::Config(format!(
            "data were built for a {} min horizon, training asks for {} min",
            first.horizon_minutes, train_cfg.horizon_minutes
        )));
    }
    if first.len() != model.seq_len {
        return Err(Error::Config(format!(
            "sequences hold {} scenes, model expects seq_len {}",
            first.len(),
            model.seq_len
        )));
    }
    let f = first.scenes[0].num_features();
    if f != model.num_features {
        return Err(Error::Config(format!(
            "scenes have {f} features, model expects {}",
            model.num_features
        )));
    }
    Ok(())
}

/// Builds the model for `spec` from the run seed and trains it; the
/// forecaster holds the best-validation parameters.
pub fn fit_forecaster(
    spec: AblationSpec,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    layout: &TurbineLayout,
    data: &PreparedData,
) -> Result<(Forecaster, TrainOutcome)> {
    check_data(data, model_cfg, train_cfg)?;
    let mut params = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let model = Windformer::new(model_cfg, spec, layout, &mut params, &mut rng)?;
    let outcome = train(
        &model,
        params,
        &data.train_norm,
        &data.val_norm,
        &data.stats,
        train_cfg,
    )?;
    let forecaster = Forecaster {
        model,
        params: outcome.best.clone(),
        layout: layout.clone(),
        stats: data.stats.clone(),
        horizon_minutes: train_cfg.horizon_minutes,
        batch_size: train_cfg.batch_size,
    };
    Ok((forecaster, outcome))
}

pub struct AblationRun {
    pub spec: AblationSpec,
    pub forecaster: Forecaster,
    pub outcome: TrainOutcome,
}

/// Trains every spec of the grid under the same seed and configuration and
/// reports test errors in grid order, preceded by the persistence baseline.
pub fn run_ablation(
    grid: &[AblationSpec],
    data: &PreparedData,
    layout: &TurbineLayout,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &str,
) -> Result<(MetricsReport, Vec<AblationRun>)> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = grid.iter().find(|s| !seen.insert(**s)) {
        return Err(Error::Config(format!("ablation grid lists {} twice", dup.label())));
    }
    check_data(data, model_cfg, train_cfg)?;
    let mut report = evaluate(
        &Persistence {
            layout: layout.clone(),
        },
        &data.test,
        dataset,
    )?;
    let mut runs = Vec::with_capacity(grid.len());
    for &spec in grid {
        log::info!("ablation: training {}", spec.label());
        let (forecaster, outcome) = fit_forecaster(spec, model_cfg, train_cfg, layout, data)?;
        report.extend(evaluate(&forecaster, &data.test, dataset)?);
        runs.push(AblationRun {
            spec,
            forecaster,
            outcome,
        });
    }
    report.check()?;
    Ok((report, runs))
}
