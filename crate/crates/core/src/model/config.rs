use serde::{Deserialize, Serialize};

use super::ModelError;

/// How the coarse positional table is applied in the stem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosMode {
    /// Table bilinearly upsampled to the input raster, scaled per channel.
    #[default]
    Grid,
    /// No positional embedding (ablation).
    Off,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stage_blocks: [usize; 4],
    pub stage_channels: [usize; 4],
    /// Attention window per stage as `(rows, cols)`.
    pub window_sizes: [(usize, usize); 4],
    /// 0-based indices (over all blocks) of blocks using global attention.
    pub global_blocks: Vec<usize>,
    pub heads: [usize; 4],
    pub mlp_ratio: usize,
    pub decoder_channels: usize,
    pub num_classes: usize,
    pub drop_path_max: f64,
    pub pos_table_shape: (usize, usize),
    pub pos_mode: PosMode,
    pub input_hw: (usize, usize),
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 6,
            stem_channels: 96,
            stage_blocks: [1, 2, 7, 2],
            stage_channels: [96, 192, 384, 768],
            window_sizes: [(8, 64), (16, 128), (16, 128), (8, 64)],
            global_blocks: vec![5, 7, 9, 11],
            heads: [1, 2, 4, 8],
            mlp_ratio: 4,
            decoder_channels: 256,
            num_classes: 19,
            drop_path_max: 0.1,
            pos_table_shape: (4, 128),
            pos_mode: PosMode::Grid,
            input_hw: (64, 2048),
            ln_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset keeping every structural mechanism of the default.
    pub fn toy() -> Self {
        Self {
            stem_channels: 16,
            stage_blocks: [1, 1, 2, 1],
            stage_channels: [16, 32, 64, 128],
            window_sizes: [(4, 16), (8, 32), (8, 32), (4, 16)],
            global_blocks: vec![2, 4],
            decoder_channels: 32,
            input_hw: (16, 256),
            ..Self::default()
        }
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_blocks.iter().sum()
    }

    /// Stage index of every block, in order.
    pub fn block_stages(&self) -> Vec<usize> {
        self.stage_blocks.iter().enumerate().flat_map(|(s, &n)| std::iter::repeat_n(s, n)).collect()
    }

    /// Stochastic-depth rate of block `i`, ramping linearly from 0 to `drop_path_max`.
    pub fn drop_rate(&self, block: usize) -> f64 {
        let n = self.total_blocks();
        if n <= 1 {
            0.0
        } else {
            self.drop_path_max * block as f64 / (n - 1) as f64
        }
    }

    pub fn is_global(&self, block: usize) -> bool {
        self.global_blocks.contains(&block)
    }

    /// `(H, W)` of the stage-`s` feature map for the configured input.
    pub fn stage_hw(&self, s: usize) -> (usize, usize) {
        let (h, w) = self.input_hw;
        (h >> s, w >> s)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.in_channels == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return fail("in_channels, num_classes and mlp_ratio must be positive".into());
        }
        if self.stem_channels != self.stage_channels[0] {
            return fail(format!(
                "stem_channels {} must equal the first stage width {}",
                self.stem_channels, self.stage_channels[0]
            ));
        }
        for s in 0..3 {
            if self.stage_channels[s + 1] != 2 * self.stage_channels[s] {
                return fail(format!("stage_channels {:?} must double per stage", self.stage_channels));
            }
        }
        for s in 0..4 {
            let (c, h) = (self.stage_channels[s], self.heads[s]);
            if h == 0 || c % h != 0 {
                return fail(format!("stage {s}: {c} channels not divisible by {h} heads"));
            }
            let (r, k) = self.window_sizes[s];
            if r == 0 || k == 0 {
                return fail(format!("stage {s}: empty window {:?}", self.window_sizes[s]));
            }
        }
        let n = self.total_blocks();
        if n == 0 || self.stage_blocks.contains(&0) {
            return fail(format!("every stage needs at least one block, got {:?}", self.stage_blocks));
        }
        if let Some(&g) = self.global_blocks.iter().find(|&&g| g >= n) {
            return fail(format!("global block {g} outside 0..{}", n - 1));
        }
        if self.decoder_channels == 0 || self.decoder_channels % 4 != 0 {
            return fail(format!("decoder_channels {} must be a positive multiple of 4", self.decoder_channels));
        }
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return fail(format!("input {h}x{w} must be a positive multiple of 8 in both dims"));
        }
        if !(0.0..1.0).contains(&self.drop_path_max) {
            return fail(format!("drop_path_max {} outside [0, 1)", self.drop_path_max));
        }
        if self.pos_mode == PosMode::Grid && (self.pos_table_shape.0 == 0 || self.pos_table_shape.1 == 0) {
            return fail("pos_table_shape must be non-empty".into());
        }
        Ok(())
    }
}
