use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of resolution levels in the registration UNet.
pub const SDAT_DEPTH: usize = 4;
/// Number of resolution levels in the enhancement UNet.
pub const EDP_DEPTH: usize = 3;
/// Standard-conv kernel size per registration encoder level.
pub const SDAT_KERNELS: [usize; SDAT_DEPTH] = [7, 5, 3, 3];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub window_frames: usize,
    pub base_width: usize,
    pub sdat_depth: usize,
    pub edp_depth: usize,
    pub state_dim: usize,
    pub attn_heads: usize,
    pub attn_window: usize,
    /// Scan the four token orders; otherwise only the forward raster order.
    pub four_directions: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            window_frames: 5,
            base_width: 8,
            sdat_depth: SDAT_DEPTH,
            edp_depth: EDP_DEPTH,
            state_dim: 8,
            attn_heads: 2,
            attn_window: 8,
            four_directions: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used by the gradient suite.
    pub fn tiny() -> Self {
        Self {
            in_channels: 1,
            window_frames: 3,
            base_width: 2,
            state_dim: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !matches!(self.in_channels, 1 | 3) {
            return fail(format!("in_channels must be 1 or 3, got {}", self.in_channels));
        }
        if self.window_frames % 2 == 0 {
            return fail(format!("window_frames must be odd, got {}", self.window_frames));
        }
        if self.base_width < 2 {
            return fail(format!("base_width must be at least 2, got {}", self.base_width));
        }
        if self.sdat_depth != SDAT_DEPTH || self.edp_depth != EDP_DEPTH {
            return fail(format!(
                "depths are fixed at {SDAT_DEPTH}/{EDP_DEPTH}, got {}/{}",
                self.sdat_depth, self.edp_depth
            ));
        }
        if self.state_dim == 0 {
            return fail("state_dim must be positive".into());
        }
        if self.attn_heads == 0 || self.base_width % self.attn_heads != 0 {
            return fail(format!(
                "base_width {} not divisible by {} heads",
                self.base_width, self.attn_heads
            ));
        }
        if self.attn_window == 0 {
            return fail("attn_window must be positive".into());
        }
        Ok(())
    }

    /// Width of registration level `level` (0-based).
    pub fn sdat_width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Width of enhancement level `level` (0-based).
    pub fn edp_width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial extents must survive three halvings.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok = shape.len() == 5
            && shape[1] == self.in_channels
            && shape[2] == self.window_frames
            && shape[3] % 8 == 0
            && shape[4] % 8 == 0;
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                shape,
                format!(
                    "expected N×{}×{}×H×W with H, W divisible by 8",
                    self.in_channels, self.window_frames
                ),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            ModelConfig {
                window_frames: 4,
                ..Default::default()
            },
            ModelConfig {
                in_channels: 2,
                ..Default::default()
            },
            ModelConfig {
                base_width: 9,
                ..Default::default()
            },
            ModelConfig {
                sdat_depth: 3,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn input_extents() {
        let cfg = ModelConfig::default();
        assert!(cfg.check_input(&[1, 3, 5, 32, 32]).is_ok());
        assert!(cfg.check_input(&[1, 3, 5, 20, 32]).is_err());
        assert!(cfg.check_input(&[1, 1, 5, 32, 32]).is_err());
    }
}
