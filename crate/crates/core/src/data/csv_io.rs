//! Long-format turbine CSV: one row per (timestamp, turbine).
//!
//! ```text
//! timestamp,turbine_id,wind_speed,wind_direction_deg,pressure,temperature,air_density
//! 0,T000,8.31,271.5,1012.9,14.2,1.224
//! ```
//!
//! `timestamp` is an integer count of minutes since the epoch.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::layout::TurbineLayout;
use crate::data::scene::{frames_to_sequences, Frame, IngestReport, RawRecord, SceneSequence};
use crate::error::{Error, Result};

pub const CSV_COLUMNS: [&str; 7] = [
    "timestamp",
    "turbine_id",
    "wind_speed",
    "wind_direction_deg",
    "pressure",
    "temperature",
    "air_density",
];

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    timestamp: i64,
    turbine_id: String,
    wind_speed: f64,
    wind_direction_deg: f64,
    pressure: f64,
    temperature: f64,
    air_density: f64,
}

pub fn read_frames<R: Read>(reader: R) -> Result<Vec<Frame>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != CSV_COLUMNS {
        return Err(Error::Ingest(format!(
            "expected header {}, found {}",
            CSV_COLUMNS.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut by_time: BTreeMap<i64, Vec<RawRecord>> = BTreeMap::new();
    for result in rdr.deserialize::<Row>() {
        let row = result.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Ingest(format!("malformed row at line {line}: {e}"))
        })?;
        by_time.entry(row.timestamp).or_default().push(RawRecord {
            turbine_id: row.turbine_id,
            wind_speed: row.wind_speed,
            wind_direction_deg: row.wind_direction_deg,
            pressure: row.pressure,
            temperature: row.temperature,
            air_density: row.air_density,
        });
    }
    Ok(by_time
        .into_iter()
        .map(|(timestamp, records)| Frame { timestamp, records })
        .collect())
}

pub fn write_frames<W: Write>(writer: W, frames: &[Frame]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for f in frames {
        for r in &f.records {
            wtr.serialize(Row {
                timestamp: f.timestamp,
                turbine_id: r.turbine_id.clone(),
                wind_speed: r.wind_speed,
                wind_direction_deg: r.wind_direction_deg,
                pressure: r.pressure,
                temperature: r.temperature,
                air_density: r.air_density,
            })?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a CSV file and slices it into sequences of `seq_len` scenes.
pub fn load_csv_dataset(
    path: impl AsRef<Path>,
    layout: &TurbineLayout,
    horizon_minutes: u32,
    seq_len: usize,
) -> Result<(Vec<SceneSequence>, IngestReport)> {
    let file = std::fs::File::open(path)?;
    let frames = read_frames(std::io::BufReader::new(file))?;
    frames_to_sequences(&frames, layout, horizon_minutes, seq_len)
}
