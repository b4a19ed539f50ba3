use std::collections::BTreeMap;
use std::sync::Arc;

use crate::data::layout::TurbineLayout;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Model channels derived from the five raw meteorological features; wind
/// direction is split into its sine and cosine.
pub const CHANNEL_NAMES: [&str; 6] = [
    "wind_speed",
    "wind_dir_sin",
    "wind_dir_cos",
    "pressure",
    "temperature",
    "air_density",
];
pub const NUM_CHANNELS: usize = CHANNEL_NAMES.len();
pub const WIND_SPEED_CHANNEL: usize = 0;

/// One turbine's raw measurement row.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub turbine_id: String,
    pub wind_speed: f64,
    pub wind_direction_deg: f64,
    pub pressure: f64,
    pub temperature: f64,
    pub air_density: f64,
}

impl RawRecord {
    pub fn is_finite(&self) -> bool {
        [
            self.wind_speed,
            self.wind_direction_deg,
            self.pressure,
            self.temperature,
            self.air_density,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn to_channels(&self) -> TurbineRecord {
        let theta = self.wind_direction_deg.to_radians();
        TurbineRecord {
            turbine_id: self.turbine_id.clone(),
            features: vec![
                self.wind_speed,
                theta.sin(),
                theta.cos(),
                self.pressure,
                self.temperature,
                self.air_density,
            ],
        }
    }
}

/// All raw records sharing one timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub timestamp: i64,
    pub records: Vec<RawRecord>,
}

/// One turbine's channel vector at a given instant.
#[derive(Clone, Debug, PartialEq)]
pub struct TurbineRecord {
    pub turbine_id: String,
    pub features: Vec<f64>,
}

/// A gridded snapshot `[F, H, W]` of all turbines at one timestamp
/// (minutes since the epoch). Cells without a turbine hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub features: Tensor<f64>,
    pub valid_mask: Vec<bool>,
    pub timestamp: i64,
}

impl Scene {
    pub fn num_features(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn value(&self, feature: usize, row: usize, col: usize) -> f64 {
        self.features.at(&[feature, row, col])
    }

    /// Channel values of every turbine, in layout order.
    pub fn extract_turbine_values(&self, layout: &TurbineLayout) -> Vec<TurbineRecord> {
        layout
            .turbines
            .iter()
            .map(|t| TurbineRecord {
                turbine_id: t.id.clone(),
                features: (0..self.num_features())
                    .map(|f| self.value(f, t.row, t.col))
                    .collect(),
            })
            .collect()
    }

    /// The given channel at every turbine cell, in layout order.
    pub fn turbine_channel(&self, layout: &TurbineLayout, channel: usize) -> Vec<f64> {
        layout
            .turbines
            .iter()
            .map(|t| self.value(channel, t.row, t.col))
            .collect()
    }
}

/// Places per-turbine records onto the layout grid.
pub fn embed_to_grid(
    records: &[TurbineRecord],
    layout: &TurbineLayout,
    timestamp: i64,
) -> Result<Scene> {
    let index = layout.index_by_id();
    let f = records
        .first()
        .map(|r| r.features.len())
        .ok_or_else(|| Error::Ingest(format!("no records at timestamp {timestamp}")))?;
    let mut slots: Vec<Option<&TurbineRecord>> = vec![None; layout.num_turbines()];
    let mut rejected = Vec::new();
    for r in records {
        let &i = index.get(r.turbine_id.as_str()).ok_or_else(|| {
            Error::Ingest(format!("unknown turbine id {} at timestamp {timestamp}", r.turbine_id))
        })?;
        if r.features.len() != f {
            return Err(Error::Ingest(format!(
                "turbine {} has {} features, expected {f}",
                r.turbine_id,
                r.features.len()
            )));
        }
        if r.features.iter().any(|v| !v.is_finite()) {
            rejected.push(r.turbine_id.as_str());
            continue;
        }
        slots[i] = Some(r);
    }
    if !rejected.is_empty() {
        return Err(Error::Ingest(format!(
            "{} record(s) rejected for non-finite features at timestamp {timestamp}: {}",
            rejected.len(),
            rejected.join(", ")
        )));
    }
    let (h, w) = (layout.grid_height, layout.grid_width);
    let mut data = vec![0.0; f * h * w];
    for (i, slot) in slots.iter().enumerate() {
        let r = slot.ok_or_else(|| {
            Error::Ingest(format!(
                "missing record for turbine {} at timestamp {timestamp}",
                layout.turbines[i].id
            ))
        })?;
        let cell = layout.cell_index(i);
        for (c, v) in r.features.iter().enumerate() {
            data[c * h * w + cell] = *v;
        }
    }
    Ok(Scene {
        features: Tensor::new(vec![f, h, w], data)?,
        valid_mask: layout.valid_mask(),
        timestamp,
    })
}

/// `T` consecutive scenes plus the wind speed at every turbine `horizon`
/// minutes after the last one.
#[derive(Clone, Debug)]
pub struct SceneSequence {
    pub scenes: Vec<Arc<Scene>>,
    pub target: Tensor<f64>,
    pub horizon_minutes: u32,
}

impl SceneSequence {
    pub fn new(scenes: Vec<Arc<Scene>>, target: Tensor<f64>, horizon_minutes: u32) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Contract("a scene sequence needs at least one scene".into()));
        }
        let steps: Vec<i64> = scenes.windows(2).map(|p| p[1].timestamp - p[0].timestamp).collect();
        if steps.iter().any(|&d| d <= 0 || d != steps[0]) {
            return Err(Error::Contract(
                "scene timestamps must be strictly increasing and equally spaced".into(),
            ));
        }
        if !target.is_finite() {
            return Err(Error::Contract("sequence target is not finite".into()));
        }
        Ok(Self {
            scenes,
            target,
            horizon_minutes,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn last_timestamp(&self) -> i64 {
        self.scenes[self.scenes.len() - 1].timestamp
    }

    pub fn target_timestamp(&self) -> i64 {
        self.last_timestamp() + i64::from(self.horizon_minutes)
    }
}

/// Outcome counters of turning frames into sequences.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub rows: usize,
    pub rejected_records: usize,
    pub incomplete_timestamps: usize,
    pub gap_skipped_windows: usize,
    pub sequences: usize,
}

/// Sliding windows of `seq_len` equally spaced scenes with the target at
/// `horizon_minutes` past the window's end. Windows crossing a missing
/// timestamp are skipped and counted.
pub fn build_sequences(
    scenes: Vec<Scene>,
    layout: &TurbineLayout,
    horizon_minutes: u32,
    seq_len: usize,
    report: &mut IngestReport,
) -> Result<Vec<SceneSequence>> {
    if seq_len == 0 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    let by_time: BTreeMap<i64, Arc<Scene>> =
        scenes.into_iter().map(|s| (s.timestamp, Arc::new(s))).collect();
    let times: Vec<i64> = by_time.keys().copied().collect();
    let step = times
        .windows(2)
        .map(|p| p[1] - p[0])
        .min()
        .ok_or_else(|| Error::Ingest("need at least two timestamps".into()))?;
    if i64::from(horizon_minutes) % step != 0 || horizon_minutes == 0 {
        return Err(Error::Config(format!(
            "horizon {horizon_minutes} min is not a positive multiple of the {step} min data step"
        )));
    }
    let last = *times.last().expect("non-empty");
    let mut out = Vec::new();
    for &start in &times {
        let mut needed: Vec<i64> = (0..seq_len as i64).map(|k| start + k * step).collect();
        let target_time = needed[seq_len - 1] + i64::from(horizon_minutes);
        needed.push(target_time);
        if target_time > last {
            break;
        }
        if needed.iter().any(|t| !by_time.contains_key(t)) {
            report.gap_skipped_windows += 1;
            continue;
        }
        let window: Vec<Arc<Scene>> = needed[..seq_len].iter().map(|t| by_time[t].clone()).collect();
        let target = Tensor::from_vec(
            by_time[&target_time].turbine_channel(layout, WIND_SPEED_CHANNEL),
        );
        out.push(SceneSequence::new(window, target, horizon_minutes)?);
    }
    report.sequences = out.len();
    Ok(out)
}

/// Embeds raw frames, dropping non-finite records and the timestamps they
/// leave incomplete, then builds sequences.
pub fn frames_to_sequences(
    frames: &[Frame],
    layout: &TurbineLayout,
    horizon_minutes: u32,
    seq_len: usize,
) -> Result<(Vec<SceneSequence>, IngestReport)> {
    let mut report = IngestReport::default();
    let mut scenes = Vec::with_capacity(frames.len());
    let index = layout.index_by_id();
    for frame in frames {
        report.rows += frame.records.len();
        let finite: Vec<TurbineRecord> = frame
            .records
            .iter()
            .filter(|r| r.is_finite())
            .map(RawRecord::to_channels)
            .collect();
        report.rejected_records += frame.records.len() - finite.len();
        if let Some(r) = finite.iter().find(|r| !index.contains_key(r.turbine_id.as_str())) {
            return Err(Error::Ingest(format!(
                "unknown turbine id {} at timestamp {}",
                r.turbine_id, frame.timestamp
            )));
        }
        if finite.len() < layout.num_turbines() {
            report.incomplete_timestamps += 1;
            continue;
        }
        scenes.push(embed_to_grid(&finite, layout, frame.timestamp)?);
    }
    if report.rejected_records > 0 {
        log::warn!(
            "{} record(s) rejected for non-finite features",
            report.rejected_records
        );
    }
    let seqs = build_sequences(scenes, layout, horizon_minutes, seq_len, &mut report)?;
    if report.gap_skipped_windows > 0 {
        log::info!("{} window(s) skipped across gaps", report.gap_skipped_windows);
    }
    Ok((seqs, report))
}
