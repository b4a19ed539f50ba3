use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurbinePlacement {
    pub id: String,
    pub row: usize,
    pub col: usize,
}

/// Where each of the `L` turbines sits on an `H x W` grid.
///
/// Stored on disk as TOML:
///
/// ```toml
/// grid_height = 16
/// grid_width = 16
/// cell_resolution_km = 2.0
///
/// [[turbines]]
/// id = "T000"
/// row = 0
/// col = 3
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurbineLayout {
    pub grid_height: usize,
    pub grid_width: usize,
    pub cell_resolution_km: f64,
    pub turbines: Vec<TurbinePlacement>,
}

impl TurbineLayout {
    pub fn new(
        grid_height: usize,
        grid_width: usize,
        cell_resolution_km: f64,
        turbines: Vec<TurbinePlacement>,
    ) -> Result<Self> {
        let layout = Self {
            grid_height,
            grid_width,
            cell_resolution_km,
            turbines,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_height == 0 || self.grid_width == 0 {
            return Err(Error::Config("layout grid must be non-empty".into()));
        }
        if self.turbines.is_empty() {
            return Err(Error::Config("layout has no turbines".into()));
        }
        if !(self.cell_resolution_km > 0.0) {
            return Err(Error::Config("cell resolution must be positive".into()));
        }
        let mut cells = HashSet::new();
        let mut ids = HashSet::new();
        for t in &self.turbines {
            if t.row >= self.grid_height || t.col >= self.grid_width {
                return Err(Error::Config(format!(
                    "turbine {} at ({}, {}) lies outside the {}x{} grid",
                    t.id, t.row, t.col, self.grid_height, self.grid_width
                )));
            }
            if !cells.insert((t.row, t.col)) {
                return Err(Error::Config(format!(
                    "turbine {} shares cell ({}, {}) with another turbine",
                    t.id, t.row, t.col
                )));
            }
            if !ids.insert(t.id.as_str()) {
                return Err(Error::Config(format!("duplicate turbine id {}", t.id)));
            }
        }
        Ok(())
    }

    /// `L` turbines placed on distinct cells chosen uniformly at random.
    pub fn random(grid_height: usize, grid_width: usize, count: usize, seed: u64) -> Result<Self> {
        let cells = grid_height * grid_width;
        if count == 0 || count > cells {
            return Err(Error::Config(format!(
                "cannot place {count} turbines on a {grid_height}x{grid_width} grid"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = sample(&mut rng, cells, count).into_vec();
        chosen.sort_unstable();
        let turbines = chosen
            .into_iter()
            .enumerate()
            .map(|(i, cell)| TurbinePlacement {
                id: format!("T{i:03}"),
                row: cell / grid_width,
                col: cell % grid_width,
            })
            .collect();
        Self::new(grid_height, grid_width, 2.0, turbines)
    }

    /// Every cell holds a turbine, ids in row-major order.
    pub fn full(grid_height: usize, grid_width: usize) -> Result<Self> {
        let turbines = (0..grid_height * grid_width)
            .map(|cell| TurbinePlacement {
                id: format!("T{cell:03}"),
                row: cell / grid_width,
                col: cell % grid_width,
            })
            .collect();
        Self::new(grid_height, grid_width, 2.0, turbines)
    }

    pub fn num_turbines(&self) -> usize {
        self.turbines.len()
    }

    pub fn num_cells(&self) -> usize {
        self.grid_height * self.grid_width
    }

    /// Row-major flat cell index of turbine `i`.
    pub fn cell_index(&self, i: usize) -> usize {
        let t = &self.turbines[i];
        t.row * self.grid_width + t.col
    }

    pub fn index_by_id(&self) -> HashMap<&str, usize> {
        self.turbines
            .iter()
            .enumerate()
            .map(|(i, t)| (t.id.as_str(), i))
            .collect()
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.num_cells()];
        for i in 0..self.num_turbines() {
            mask[self.cell_index(i)] = true;
        }
        mask
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let layout: Self = toml::from_str(s)?;
        layout.validate()?;
        Ok(layout)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("layout serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }
}
