//! Model and training hyperparameters.
//!
//! Everything here serializes to TOML so that a resolved configuration can
//! be echoed into checkpoints and reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One convolutional layer of a branch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kernel: usize,
    pub filters: usize,
    /// 2×2 max-pooling after the layer's ReLU.
    pub pool: bool,
}

impl LayerSpec {
    pub const fn new(kernel: usize, filters: usize, pool: bool) -> Self {
        Self { kernel, filters, pool }
    }
}

/// A resolution-specific CNN branch together with the geometry of the band
/// subset it consumes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    /// Band names routed to this branch; their count is the input channel count.
    pub bands: Vec<String>,
    /// Full-image height of the band subset.
    pub height: usize,
    /// Full-image width of the band subset.
    pub width: usize,
    pub layers: Vec<LayerSpec>,
    pub fc_out: usize,
}

impl BranchSpec {
    pub fn channels(&self) -> usize {
        self.bands.len()
    }

    /// Whether the filter counts start at 32, double for a while, then
    /// halve down to a final 64.
    pub fn follows_filter_regime(&self) -> bool {
        let f: Vec<usize> = self.layers.iter().map(|l| l.filters).collect();
        if f.first() != Some(&32) || f.last() != Some(&64) {
            return false;
        }
        let mut shrinking = false;
        f.windows(2).all(|w| {
            if w[1] == w[0] * 2 && !shrinking {
                true
            } else if w[1] * 2 == w[0] {
                shrinking = true;
                true
            } else {
                false
            }
        })
    }

    pub fn pools(&self) -> bool {
        self.layers.iter().any(|l| l.pool)
    }

    /// Spatial sizes `(h, w)` of a patch before the first layer and after
    /// every layer.
    pub fn spatial_trace(&self, grid: usize) -> Result<Vec<(usize, usize)>> {
        let mut h = self.height / grid;
        let mut w = self.width / grid;
        let mut trace = vec![(h, w)];
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.pool {
                if h < 2 || w < 2 {
                    return Err(Error::config(format!(
                        "pooling after layer {} would shrink a {h}x{w} map to zero",
                        i + 1
                    )));
                }
                h /= 2;
                w /= 2;
            }
            trace.push((h, w));
        }
        Ok(trace)
    }

    /// Width of the flattened last feature map fed to the branch FC layer.
    pub fn fc_in(&self, grid: usize) -> Result<usize> {
        let (h, w) = *self.spatial_trace(grid)?.last().unwrap();
        let c = self.layers.last().map_or(self.channels(), |l| l.filters);
        Ok(c * h * w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LstmMode {
    /// One parameter set per direction, shared across patch positions.
    Shared,
    /// A separate parameter set for every patch position and direction.
    PerPosition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of non-overlapping patches R; must be a perfect square.
    pub patches: usize,
    /// Number of classes C.
    pub classes: usize,
    pub branches: Vec<BranchSpec>,
    /// ReLU after each branch FC layer (the fusion FC stays linear).
    pub branch_fc_relu: bool,
    /// Width of the fused local descriptor.
    pub descriptor_width: usize,
    /// LSTM hidden width per direction.
    pub hidden: usize,
    pub lstm_mode: LstmMode,
    /// Number of attention rows T.
    pub attention_heads: usize,
    /// Width of the tanh attention layer.
    pub attention_width: usize,
    pub threshold: f64,
}

/// Sentinel-2 band names per resolution group, finest first.
pub const SENTINEL2_GROUPS: [&[&str]; 3] = [
    &["B02", "B03", "B04", "B08"],
    &["B05", "B06", "B07", "B8A", "B11", "B12"],
    &["B01", "B09"],
];

/// Default conv stack for branch `k` of `count`: the finest branch uses a
/// 5×5 entry layer and pools twice, middle branches use 3×3 kernels and
/// pool once, the coarsest branch uses 2×2 kernels and never pools.
pub fn default_layers(k: usize, count: usize) -> Vec<LayerSpec> {
    let filters = [32, 64, 128, 64];
    let (kernels, pools): ([usize; 4], [bool; 4]) = if k == 0 {
        ([5, 3, 3, 3], [true, true, false, false])
    } else if k + 1 == count {
        ([2, 2, 2, 2], [false; 4])
    } else {
        ([3, 3, 3, 3], [true, false, false, false])
    };
    (0..4).map(|i| LayerSpec::new(kernels[i], filters[i], pools[i])).collect()
}

/// Band count and full-image size of one resolution group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetShape {
    pub bands: Vec<String>,
    pub height: usize,
    pub width: usize,
}

impl ModelConfig {
    /// Default architecture for the given input geometry.
    pub fn for_geometry(subsets: &[SubsetShape], classes: usize) -> Self {
        let branches = subsets
            .iter()
            .enumerate()
            .map(|(k, s)| BranchSpec {
                bands: s.bands.clone(),
                height: s.height,
                width: s.width,
                layers: default_layers(k, subsets.len()),
                fc_out: 128,
            })
            .collect();
        Self {
            patches: 16,
            classes,
            branches,
            branch_fc_relu: true,
            descriptor_width: 128,
            hidden: 128,
            lstm_mode: LstmMode::Shared,
            attention_heads: 4,
            attention_width: 64,
            threshold: 0.5,
        }
    }

    /// Full-size Sentinel-2 geometry: 120×120 (10 m), 60×60 (20 m), 20×20 (60 m), 43 classes.
    pub fn bigearthnet() -> Self {
        Self::for_geometry(&sentinel2_subsets([120, 60, 20]), 43)
    }

    /// Desk-scale geometry used by the synthetic `tiny` profile.
    pub fn tiny(classes: usize) -> Self {
        Self::for_geometry(&sentinel2_subsets([24, 12, 4]), classes)
    }

    /// Small configuration for finite-difference checks: R=4, C=3, d_ψ=6,
    /// hidden 5, T=2 and 6×6 finest patches.
    pub fn shrunken() -> Self {
        let branch = |bands: &[&str], side: usize, layers: Vec<LayerSpec>, fc_out| BranchSpec {
            bands: bands.iter().map(|b| b.to_string()).collect(),
            height: side,
            width: side,
            layers,
            fc_out,
        };
        Self {
            patches: 4,
            classes: 3,
            branches: vec![
                branch(
                    &["B02", "B03"],
                    12,
                    vec![LayerSpec::new(5, 3, true), LayerSpec::new(3, 4, true)],
                    4,
                ),
                branch(
                    &["B05", "B06", "B07"],
                    6,
                    vec![LayerSpec::new(3, 3, true), LayerSpec::new(3, 2, false)],
                    3,
                ),
                branch(&["B01"], 2, vec![LayerSpec::new(2, 2, false), LayerSpec::new(2, 3, false)], 2),
            ],
            branch_fc_relu: true,
            descriptor_width: 6,
            hidden: 5,
            lstm_mode: LstmMode::Shared,
            attention_heads: 2,
            attention_width: 3,
            threshold: 0.5,
        }
    }

    /// Side length of the square patch grid.
    pub fn grid(&self) -> usize {
        (self.patches as f64).sqrt().round() as usize
    }

    /// Width of a sequential descriptor: both LSTM directions concatenated.
    pub fn sequential_width(&self) -> usize {
        2 * self.hidden
    }

    /// Input width of the classifier: the vectorized image descriptor.
    pub fn classifier_in(&self) -> usize {
        self.sequential_width() * self.attention_heads
    }

    pub fn fusion_in(&self) -> usize {
        self.branches.iter().map(|b| b.fc_out).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid();
        if self.patches == 0 || grid * grid != self.patches {
            return Err(Error::config(format!("patches = {} is not a perfect square", self.patches)));
        }
        if self.branches.is_empty() {
            return Err(Error::config("at least one branch is required"));
        }
        for (name, v) in [
            ("classes", self.classes),
            ("descriptor_width", self.descriptor_width),
            ("hidden", self.hidden),
            ("attention_heads", self.attention_heads),
            ("attention_width", self.attention_width),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        for (k, b) in self.branches.iter().enumerate() {
            if b.bands.is_empty() || b.fc_out == 0 {
                return Err(Error::config(format!("branch {k}: needs bands and fc_out > 0")));
            }
            if b.height % grid != 0 || b.width % grid != 0 {
                return Err(Error::config(format!(
                    "branch {k}: {}x{} image is not divisible into a {grid}x{grid} patch grid",
                    b.height, b.width
                )));
            }
            if b.height == 0 || b.width == 0 {
                return Err(Error::config(format!("branch {k}: empty image")));
            }
            if b.layers.iter().any(|l| l.kernel == 0 || l.filters == 0) {
                return Err(Error::config(format!("branch {k}: zero kernel or filter count")));
            }
            b.spatial_trace(grid).map_err(|e| Error::config(format!("branch {k}: {e}")))?;
        }
        Ok(())
    }

    /// Checks that the model consumes exactly the given input geometry and
    /// class count, naming the first field that differs.
    pub fn check_against(&self, subsets: &[SubsetShape], classes: usize) -> Result<()> {
        if self.classes != classes {
            return Err(Error::config(format!(
                "model.classes: config has {}, dataset has {classes}",
                self.classes
            )));
        }
        if self.branches.len() != subsets.len() {
            return Err(Error::config(format!(
                "model.branches: config has {} branches, dataset has {} band subsets",
                self.branches.len(),
                subsets.len()
            )));
        }
        for (k, (b, s)) in self.branches.iter().zip(subsets).enumerate() {
            if b.bands.len() != s.bands.len() {
                return Err(Error::config(format!(
                    "model.branches[{k}].bands: config has {} bands, dataset has {}",
                    b.bands.len(),
                    s.bands.len()
                )));
            }
            if (b.height, b.width) != (s.height, s.width) {
                return Err(Error::config(format!(
                    "model.branches[{k}].height/width: config has {}x{}, dataset has {}x{}",
                    b.height, b.width, s.height, s.width
                )));
            }
        }
        Ok(())
    }
}

pub fn sentinel2_subsets(sides: [usize; 3]) -> Vec<SubsetShape> {
    SENTINEL2_GROUPS
        .iter()
        .zip(sides)
        .map(|(bands, side)| SubsetShape {
            bands: bands.iter().map(|b| b.to_string()).collect(),
            height: side,
            width: side,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Uniform Xavier/Glorot weights, zero biases.
    Xavier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub init: InitScheme,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            init: InitScheme::Xavier,
            seed: 42,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("train.learning_rate {} must be > 0", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Fully resolved configuration of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("run config: {e}")))
    }

    /// Applies a possibly partial TOML document on top of `self`. Keys absent
    /// from `text` keep their current values; unknown keys are rejected.
    pub fn overlay_toml(&self, text: &str) -> Result<Self> {
        let patch: toml::Table = text.parse().map_err(|e| Error::config(format!("run config: {e}")))?;
        let mut base = toml::Table::try_from(self).expect("run config serializes");
        merge(&mut base, patch, "")?;
        base.try_into().map_err(|e| Error::config(format!("run config: {e}")))
    }
}

fn merge(base: &mut toml::Table, patch: toml::Table, prefix: &str) -> Result<()> {
    for (key, value) in patch {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p, &path)?,
            (Some(slot), v) => *slot = v,
            (None, _) => return Err(Error::config(format!("{path}: unknown key"))),
        }
    }
    Ok(())
}
