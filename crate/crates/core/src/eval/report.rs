use std::io::Write;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::config::HORIZONS;
use crate::data::{SceneSequence, TurbineLayout};
use crate::error::{Error, Result};
use crate::eval::Predictor;
use crate::training::ErrorAccumulator;

/// Errors of one model on one dataset at one horizon, in m/s units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub model: String,
    pub horizon_minutes: u32,
    pub mse: f64,
    pub mae: f64,
    pub samples: usize,
}

impl ReportRow {
    /// `MSE >= 0`, `MAE >= 0` and `MAE <= sqrt(MSE)` up to rounding.
    pub fn check(&self) -> Result<()> {
        let ok = self.mse >= 0.0 && self.mae >= 0.0 && self.mae <= self.mse.sqrt() * (1.0 + 1e-12);
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "report row {}/{} at {} min violates metric invariants: mse {} mae {}",
                self.dataset, self.model, self.horizon_minutes, self.mse, self.mae
            )))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub const COLUMNS: [&'static str; 6] =
        ["dataset", "model", "horizon_minutes", "mse", "mae", "samples"];

    pub fn extend(&mut self, other: MetricsReport) {
        self.rows.extend(other.rows);
    }

    pub fn check(&self) -> Result<()> {
        self.rows.iter().try_for_each(ReportRow::check)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::COLUMNS)?;
        for r in &self.rows {
            w.write_record([
                r.dataset.clone(),
                r.model.clone(),
                r.horizon_minutes.to_string(),
                r.mse.to_string(),
                r.mae.to_string(),
                r.samples.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One table per dataset with MSE then MAE columns for 30, 60 and 90
    /// minutes, three decimals, `-` where a horizon was not evaluated.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let mut datasets: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !datasets.contains(&r.dataset.as_str()) {
                datasets.push(&r.dataset);
            }
        }
        for ds in datasets {
            let rows: Vec<&ReportRow> = self.rows.iter().filter(|r| r.dataset == ds).collect();
            let mut models: Vec<&str> = Vec::new();
            for r in &rows {
                if !models.contains(&r.model.as_str()) {
                    models.push(&r.model);
                }
            }
            out.push_str(&format!("Dataset: {ds}\n"));
            out.push_str("| Model | MSE 30 min | MSE 60 min | MSE 90 min | MAE 30 min | MAE 60 min | MAE 90 min |\n");
            out.push_str("|---|---|---|---|---|---|---|\n");
            for m in models {
                let cell = |h: u32, mse: bool| {
                    rows.iter()
                        .find(|r| r.model == m && r.horizon_minutes == h)
                        .map_or("-".to_string(), |r| format!("{:.3}", if mse { r.mse } else { r.mae }))
                };
                let mut line = format!("| {m} |");
                for mse in [true, false] {
                    for h in HORIZONS {
                        line.push_str(&format!(" {} |", cell(h, mse)));
                    }
                }
                out.push_str(&line);
                out.push('\n');
            }
        }
        out
    }
}

fn horizon_of(seqs: &[SceneSequence]) -> Result<u32> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::Contract("cannot evaluate on an empty test set".into()))?;
    if seqs.iter().any(|s| s.horizon_minutes != first.horizon_minutes) {
        return Err(Error::Contract("test sequences mix horizons".into()));
    }
    Ok(first.horizon_minutes)
}

/// Physical-unit MSE and MAE over every turbine and timestamp of `test`.
pub fn evaluate(
    predictor: &dyn Predictor,
    test: &[SceneSequence],
    dataset: &str,
) -> Result<MetricsReport> {
    let horizon = horizon_of(test)?;
    let preds = predictor.predict(test)?;
    let mut acc = ErrorAccumulator::default();
    for (p, s) in preds.iter().zip(test) {
        if p.len() != s.target.numel() {
            return Err(Error::shape("evaluate", &[p.len()], s.target.shape()));
        }
        acc.extend(p, s.target.data());
    }
    let row = ReportRow {
        dataset: dataset.to_string(),
        model: predictor.name(),
        horizon_minutes: horizon,
        mse: acc.mse(),
        mae: acc.mae(),
        samples: acc.count,
    };
    row.check()?;
    Ok(MetricsReport { rows: vec![row] })
}

/// One point of a single turbine's forecast curve, keyed by the time being
/// forecast.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub timestamp: i64,
    pub actual: f64,
    pub predicted: f64,
}

pub fn export_prediction_curve(
    predictor: &dyn Predictor,
    seqs: &[SceneSequence],
    layout: &TurbineLayout,
    turbine_id: &str,
    range: RangeInclusive<i64>,
) -> Result<Vec<CurvePoint>> {
    let idx = layout
        .turbines
        .iter()
        .position(|t| t.id == turbine_id)
        .ok_or_else(|| Error::Config(format!("turbine {turbine_id} is not in the layout")))?;
    let picked: Vec<SceneSequence> = seqs
        .iter()
        .filter(|s| range.contains(&s.target_timestamp()))
        .cloned()
        .collect();
    if picked.is_empty() {
        return Ok(Vec::new());
    }
    let preds = predictor.predict(&picked)?;
    Ok(picked
        .iter()
        .zip(preds)
        .map(|(s, p)| CurvePoint {
            timestamp: s.target_timestamp(),
            actual: s.target.data()[idx],
            predicted: p[idx],
        })
        .collect())
}

pub fn write_curve_csv<W: Write>(points: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp", "actual", "predicted"])?;
    for p in points {
        w.write_record([p.timestamp.to_string(), p.actual.to_string(), p.predicted.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
