//! Serializable model, training and ablation settings.
//!
//! Every architectural choice is spelled out here; `validate` refuses a
//! config whose dimensions cannot fit together and names the constraint
//! that failed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synth::WakeConfig;
use crate::error::{Error, Result};

/// The gate of the channel fusion module, written out so the choice is
/// visible in every saved config.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionGate {
    #[serde(rename = "sigmoid(detail+global)")]
    DetailPlusGlobal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedNorm {
    LayerNorm,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Scenes per input sequence (`T`).
    pub seq_len: usize,
    pub num_features: usize,
    pub hidden_channels: usize,
    pub gru_kernel: usize,
    /// Stage-1 embedding width `C1`; doubles at each merge.
    pub embed_dim: usize,
    pub embed_norm: EmbedNorm,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: usize,
    pub rel_pos_bias: bool,
    pub fusion_reduction: usize,
    pub fusion_gate: FusionGate,
    /// Hidden width of the flattened (non-convolutional) Bi-GRU variant.
    pub flat_hidden: usize,
    /// Per-cell channels decoded from the flattened Bi-GRU state.
    pub flat_decode_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seq_len: 4,
            num_features: crate::data::NUM_CHANNELS,
            hidden_channels: 32,
            gru_kernel: 3,
            embed_dim: 48,
            embed_norm: EmbedNorm::LayerNorm,
            depths: vec![2, 2, 2],
            heads: vec![3, 6, 12],
            window_size: 4,
            mlp_ratio: 4,
            rel_pos_bias: true,
            fusion_reduction: 4,
            fusion_gate: FusionGate::DetailPlusGlobal,
            flat_hidden: 64,
            flat_decode_channels: 4,
        }
    }
}

impl ModelConfig {
    pub fn num_stages(&self) -> usize {
        self.heads.len()
    }

    /// Width of stage `s` (0-based).
    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    /// Grid dims are padded up to a multiple of this.
    pub fn pad_multiple(&self) -> usize {
        self.window_size << (self.num_stages() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.seq_len == 0 {
            return fail("seq_len must be at least 1".into());
        }
        if self.num_features == 0 || self.hidden_channels == 0 || self.embed_dim == 0 {
            return fail("num_features, hidden_channels and embed_dim must be positive".into());
        }
        if self.gru_kernel % 2 == 0 {
            return fail(format!("gru_kernel must be odd, got {}", self.gru_kernel));
        }
        if self.heads.is_empty() {
            return fail("at least one stage is required".into());
        }
        if self.depths.len() != self.heads.len() {
            return fail(format!(
                "depths has {} stages but heads has {}",
                self.depths.len(),
                self.heads.len()
            ));
        }
        if let Some(d) = self.depths.iter().find(|&&d| d != 2) {
            return fail(format!(
                "every stage depth must be 2 (one W-MSA and one SW-MSA block), got {d}"
            ));
        }
        for (s, &h) in self.heads.iter().enumerate() {
            let c = self.stage_dim(s);
            if h == 0 || c % h != 0 {
                return fail(format!(
                    "stage {} width {c} is not divisible by its {h} heads",
                    s + 1
                ));
            }
        }
        if self.window_size == 0 {
            return fail("window_size must be positive".into());
        }
        if self.mlp_ratio == 0 || self.fusion_reduction == 0 {
            return fail("mlp_ratio and fusion_reduction must be positive".into());
        }
        if self.flat_hidden == 0 || self.flat_decode_channels == 0 {
            return fail("flat_hidden and flat_decode_channels must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Desk-scale default.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub horizon_minutes: u32,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Caps the number of training sequences drawn per epoch.
    pub max_train_sequences: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 4e-3,
            weight_decay: 1e-4,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            horizon_minutes: 30,
            max_steps: None,
            max_train_sequences: None,
        }
    }
}

pub const HORIZONS: [u32; 3] = [30, 60, 90];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !HORIZONS.contains(&self.horizon_minutes) {
            return Err(Error::Config(format!(
                "horizon_minutes must be one of 30, 60, 90, got {}",
                self.horizon_minutes
            )));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalVariant {
    Empty,
    BiConvrnn,
    BiConvlstm,
    BiGru,
    Convgru,
    BiConvgru,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpatialVariant {
    Empty,
    Cnn,
    Window,
    ShiftWindow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionVariant {
    Empty,
    GlobalOnly,
    DetailOnly,
    Full,
}

macro_rules! variant_names {
    ($ty:ty { $($v:ident => $s:literal),* $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$(<$ty>::$v),*];

            pub fn name(self) -> &'static str {
                match self { $(<$ty>::$v => $s),* }
            }
        }

        impl std::str::FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(<$ty>::$v),)*
                    _ => Err(Error::Config(format!(
                        "unknown {} variant {s:?}", stringify!($ty)
                    ))),
                }
            }
        }

        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

variant_names!(TemporalVariant {
    Empty => "empty",
    BiConvrnn => "bi-convrnn",
    BiConvlstm => "bi-convlstm",
    BiGru => "bi-gru",
    Convgru => "convgru",
    BiConvgru => "bi-convgru",
});

variant_names!(SpatialVariant {
    Empty => "empty",
    Cnn => "cnn",
    Window => "window",
    ShiftWindow => "shift-window",
});

variant_names!(FusionVariant {
    Empty => "empty",
    GlobalOnly => "global-only",
    DetailOnly => "detail-only",
    Full => "full",
});

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    pub temporal: TemporalVariant,
    pub spatial: SpatialVariant,
    pub fusion: FusionVariant,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            temporal: TemporalVariant::BiConvgru,
            spatial: SpatialVariant::ShiftWindow,
            fusion: FusionVariant::Full,
        }
    }
}

impl AblationSpec {
    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.temporal, self.spatial, self.fusion)
    }

    /// The three single-module sweeps: each varies one module and
    /// keeps the others at their defaults.
    pub fn full_grid() -> Vec<AblationSpec> {
        let base = AblationSpec::default();
        let mut grid = vec![base];
        for &t in TemporalVariant::ALL {
            grid.push(AblationSpec { temporal: t, ..base });
        }
        for &s in SpatialVariant::ALL {
            grid.push(AblationSpec { spatial: s, ..base });
        }
        for &f in FusionVariant::ALL {
            grid.push(AblationSpec { fusion: f, ..base });
        }
        let mut seen = std::collections::HashSet::new();
        grid.retain(|s| seen.insert(*s));
        grid
    }
}

/// Where a run's sequences come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Layout TOML; when absent a random layout is drawn.
    pub layout: Option<PathBuf>,
    /// Measurement CSV; when absent data are synthesized.
    pub csv: Option<PathBuf>,
    pub grid_height: usize,
    pub grid_width: usize,
    pub turbines: usize,
    pub layout_seed: u64,
    pub synthetic: WakeConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            layout: None,
            csv: None,
            grid_height: 16,
            grid_width: 16,
            turbines: 200,
            layout_seed: 0,
            synthetic: WakeConfig::default(),
        }
    }
}

/// The complete run file read by the command-line tool.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: AblationGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub spec: AblationSpec,
    pub grid: Vec<AblationSpec>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            spec: AblationSpec::default(),
            grid: AblationSpec::full_grid(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.ablation.grid.is_empty() {
            return Err(Error::Config("ablation grid is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.ablation.grid {
            if !seen.insert(*s) {
                return Err(Error::Config(format!(
                    "ablation grid lists {} twice",
                    s.label()
                )));
            }
        }
        Ok(())
    }
}
