use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{NUM_KEYPOINTS, POINT_DIM};

/// Network dimensions and surrogate geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub c_voxel: usize,
    pub c_bev: usize,
    pub c_compressed: usize,
    /// Hidden width of the box-feature compression map.
    pub compress_hidden: usize,
    pub c_tr: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Hidden width of the four output heads.
    pub head_hidden: usize,
    pub n_max: usize,
    pub voxel_size: f64,
    pub pillar_size: f64,
    /// Growth of the box used to collect BEV pillars.
    pub bev_margin: f64,
    /// Feed compressed BEV box features into the point tokens.
    pub box_feat: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Dimensions used for the full-size model.
    pub fn full() -> Self {
        ModelConfig {
            c_voxel: 32,
            c_bev: 512,
            c_compressed: 32,
            compress_hidden: 5 * 512,
            c_tr: 256,
            layers: 4,
            heads: 8,
            ffn: 256,
            head_hidden: 256,
            n_max: 1024,
            voxel_size: 0.1,
            pillar_size: 0.2,
            bev_margin: 0.5,
            box_feat: true,
        }
    }

    /// CPU-sized default.
    pub fn desk() -> Self {
        ModelConfig {
            c_voxel: 16,
            c_bev: 64,
            c_compressed: 32,
            compress_hidden: 5 * 64,
            c_tr: 64,
            layers: 2,
            heads: 4,
            ffn: 128,
            head_hidden: 64,
            n_max: 256,
            voxel_size: 0.1,
            pillar_size: 0.2,
            bev_margin: 0.5,
            box_feat: true,
        }
    }

    /// Minimal dimensions for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            c_voxel: 4,
            c_bev: 4,
            c_compressed: 4,
            compress_hidden: 6,
            c_tr: 8,
            layers: 2,
            heads: 2,
            ffn: 8,
            head_hidden: 6,
            n_max: 12,
            voxel_size: 0.1,
            pillar_size: 0.2,
            bev_margin: 0.5,
            box_feat: true,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    /// Width of `P_cat` before projection.
    pub fn p_cat_width(&self) -> usize {
        POINT_DIM + self.c_voxel + self.c_compressed
    }

    pub fn seg_classes(&self) -> usize {
        NUM_KEYPOINTS + 1
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("c_voxel", self.c_voxel),
            ("c_bev", self.c_bev),
            ("c_compressed", self.c_compressed),
            ("compress_hidden", self.compress_hidden),
            ("c_tr", self.c_tr),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("head_hidden", self.head_hidden),
            ("n_max", self.n_max),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.c_tr.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "c_tr {} is not divisible by {} heads",
                self.c_tr, self.heads
            )));
        }
        for (name, v) in [
            ("voxel_size", self.voxel_size),
            ("pillar_size", self.pillar_size),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.bev_margin >= 0.0) {
            return Err(Error::Config("bev_margin must be >= 0".into()));
        }
        Ok(())
    }
}
