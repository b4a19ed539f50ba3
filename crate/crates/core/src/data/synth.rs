//! Synthetic wake-field generator.
//!
//! Each grid row carries its own inflow series `a_r(t)`, built from a common
//! AR(1) process plus a row-specific one. The inflow advects west to east
//! at `wake_speed_cells_per_step`, so the speed at `(r, c)` is
//! `a_r(t - c / v)` plus i.i.d. measurement noise. Upstream turbines
//! therefore carry the future of downstream ones. The remaining channels
//! are smooth AR(1) weather plus small per-turbine noise.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::layout::TurbineLayout;
use crate::data::scene::{frames_to_sequences, Frame, RawRecord, SceneSequence};
use crate::error::{Error, Result};

const AR_COEF: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WakeConfig {
    pub steps: usize,
    pub seed: u64,
    pub wake_speed_cells_per_step: f64,
    pub noise_std: f64,
    pub step_minutes: u32,
    pub mean_speed: f64,
}

impl Default for WakeConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            seed: 0,
            wake_speed_cells_per_step: 2.0,
            noise_std: 0.1,
            step_minutes: 10,
            mean_speed: 8.0,
        }
    }
}

/// Unit-variance AR(1) series of length `n`.
fn ar1<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let innov = (1.0 - AR_COEF * AR_COEF).sqrt();
    let mut x: f64 = StandardNormal.sample(rng);
    (0..n)
        .map(|_| {
            let v = x;
            let e: f64 = StandardNormal.sample(rng);
            x = AR_COEF * x + innov * e;
            v
        })
        .collect()
}

/// Raw per-timestamp records for every turbine, timestamps
/// `0, step_minutes, 2 * step_minutes, ...`.
pub fn synthesize_frames(layout: &TurbineLayout, cfg: &WakeConfig) -> Result<Vec<Frame>> {
    let v = cfg.wake_speed_cells_per_step;
    if !(v > 0.0) || !(cfg.noise_std >= 0.0) || cfg.step_minutes == 0 {
        return Err(Error::Config(
            "wake speed and step must be positive and noise_std non-negative".into(),
        ));
    }
    layout.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Inflow is needed back to t = -(W - 1) / v.
    let lead = ((layout.grid_width.saturating_sub(1)) as f64 / v).ceil() as usize + 1;
    let len = cfg.steps + lead;
    let common = ar1(len, &mut rng);
    let inflow: Vec<Vec<f64>> = (0..layout.grid_height)
        .map(|_| {
            let own = ar1(len, &mut rng);
            common
                .iter()
                .zip(&own)
                .map(|(g, h)| (cfg.mean_speed + 1.5 * g + h).max(0.0))
                .collect()
        })
        .collect();
    let direction = ar1(cfg.steps, &mut rng);
    let pressure = ar1(cfg.steps, &mut rng);
    let temperature = ar1(cfg.steps, &mut rng);

    let at = |row: &[f64], tau: f64| -> f64 {
        let x = tau + lead as f64;
        let i = x.floor();
        let frac = x - i;
        let i = i as usize;
        if frac == 0.0 {
            row[i]
        } else {
            row[i] * (1.0 - frac) + row[i + 1] * frac
        }
    };
    let noise = Normal::new(0.0, cfg.noise_std).expect("checked above");
    let jitter = Normal::new(0.0, 0.05).expect("constant");
    let mut frames = Vec::with_capacity(cfg.steps);
    for t in 0..cfg.steps {
        let records = layout
            .turbines
            .iter()
            .map(|tb| {
                let tau = t as f64 - tb.col as f64 / v;
                let clean = at(&inflow[tb.row], tau);
                let speed = if cfg.noise_std > 0.0 {
                    clean + noise.sample(&mut rng)
                } else {
                    clean
                };
                RawRecord {
                    turbine_id: tb.id.clone(),
                    wind_speed: speed,
                    wind_direction_deg: 270.0 + 10.0 * direction[t] + jitter.sample(&mut rng),
                    pressure: 1013.0 + 3.0 * pressure[t] + jitter.sample(&mut rng),
                    temperature: 15.0 + 2.0 * temperature[t] + jitter.sample(&mut rng),
                    air_density: 1.225 - 0.008 * temperature[t] + 0.002 * pressure[t]
                        + 0.01 * jitter.sample(&mut rng),
                }
            })
            .collect();
        frames.push(Frame {
            timestamp: t as i64 * i64::from(cfg.step_minutes),
            records,
        });
    }
    Ok(frames)
}

pub fn synthesize_wake_dataset(
    layout: &TurbineLayout,
    cfg: &WakeConfig,
    horizon_minutes: u32,
    seq_len: usize,
) -> Result<Vec<SceneSequence>> {
    if horizon_minutes == 0 || horizon_minutes % cfg.step_minutes != 0 {
        return Err(Error::Config(format!(
            "horizon {horizon_minutes} min is not a positive multiple of the {} min step",
            cfg.step_minutes
        )));
    }
    let horizon_steps = (horizon_minutes / cfg.step_minutes) as usize;
    if cfg.steps < seq_len + horizon_steps {
        return Err(Error::Config(format!(
            "{} steps cannot hold a window of {seq_len} plus a {horizon_steps}-step horizon",
            cfg.steps
        )));
    }
    let frames = synthesize_frames(layout, cfg)?;
    Ok(frames_to_sequences(&frames, layout, horizon_minutes, seq_len)?.0)
}
