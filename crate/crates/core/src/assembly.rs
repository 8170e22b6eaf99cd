//! Per-box token construction: sampling/padding to `N_max`, box-feature
//! compression, the `P_cat` concatenation and its projection to the
//! transformer width.

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{canonicalize, Box3D, Point, POINT_DIM};
use crate::graph::{Graph, Var};
use crate::num::Real;
use crate::params::{Bound, Mlp, ParamId};
use crate::stage1::{bev_layout, voxelize, BevLayout, BEV_SAMPLES};

/// Canonical points of one box, sampled or zero-padded to `N_max` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxSample {
    /// `N_max × (3 + C_point)`; padded rows are zero.
    pub points: Array2<f64>,
    pub mask: Vec<bool>,
    /// Index into the box's canonical point list for every row.
    pub source: Vec<Option<usize>>,
}

impl BoxSample {
    pub fn n_max(&self) -> usize {
        self.mask.len()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// True for boxes without any points.
    pub fn is_empty(&self) -> bool {
        self.valid_count() == 0
    }
}

/// Keeps a uniform random subset of `n_max` points when there are more,
/// otherwise keeps all points in order and appends masked zero rows.
pub fn sample_pad<R: Rng + ?Sized>(canonical: &[Point], n_max: usize, rng: &mut R) -> BoxSample {
    assert!(n_max >= 1, "n_max must be at least 1");
    let kept: Vec<usize> = if canonical.len() > n_max {
        index::sample(rng, canonical.len(), n_max).into_vec()
    } else {
        (0..canonical.len()).collect()
    };
    let mut points = Array2::zeros((n_max, POINT_DIM));
    let mut mask = vec![false; n_max];
    let mut source = vec![None; n_max];
    for (row, &i) in kept.iter().enumerate() {
        points.row_mut(row).assign(&ndarray::aview1(&canonical[i].to_array()));
        mask[row] = true;
        source[row] = Some(i);
    }
    BoxSample { points, mask, source }
}

/// Stage-1 inputs for one box.
#[derive(Clone, Debug, PartialEq)]
pub enum Stage1Input {
    /// Trainable surrogate: voxel statistics, the voxel of every sample row
    /// and the BEV pillar layout.
    Surrogate {
        voxel_stats: Array2<f64>,
        row_voxel: Vec<Option<usize>>,
        bev: BevLayout,
    },
    /// Fixed features exported by an external first stage.
    Precomputed { p_voxel: Array2<f64>, bev: Array2<f64> },
}

/// Everything the network needs for one box.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxInput {
    pub sample: BoxSample,
    pub stage1: Stage1Input,
    /// All canonical points inside the box, in scene order.
    pub canonical: Vec<Point>,
}

/// Crops, canonicalizes, samples and voxelizes the points of one box.
pub fn prepare_box<R: Rng + ?Sized>(
    scene_points: &[Point],
    b: &Box3D,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<BoxInput> {
    let inside: Vec<Point> = scene_points
        .iter()
        .copied()
        .filter(|p| b.contains(p.position()))
        .collect();
    let canonical = canonicalize(&inside, b);
    let sample = sample_pad(&canonical, config.n_max, rng);
    let grid = voxelize(&canonical, [config.voxel_size; 3])?;
    let row_voxel = sample.source.iter().map(|s| s.map(|i| grid.point_voxel[i])).collect();
    let bev = bev_layout(scene_points, b, config.pillar_size, config.bev_margin);
    Ok(BoxInput {
        sample,
        stage1: Stage1Input::Surrogate {
            voxel_stats: grid.stats(),
            row_voxel,
            bev,
        },
        canonical,
    })
}

/// Flattens `B` (`5 × C_BEV`) and maps it to `1 × C_compressed`.
pub fn compress_box_feat<T: Real>(
    g: &mut Graph<T>,
    params: &Bound,
    compress: &Mlp,
    bev: Var,
    config: &ModelConfig,
) -> Result<Var> {
    let (r, c) = g.shape(bev);
    if (r, c) != (BEV_SAMPLES, config.c_bev) {
        return Err(Error::shape(
            "box features B",
            format!("{}x{}", BEV_SAMPLES, config.c_bev),
            format!("{r}x{c}"),
        ));
    }
    let flat = g.reshape(bev, 1, r * c);
    Ok(compress.forward(g, params, flat))
}

/// The intermediate feature chain of one box.
#[derive(Clone, Copy, Debug)]
pub struct Tokens {
    pub p_point: Var,
    pub p_voxel: Var,
    pub p_box: Var,
    pub p_cat: Var,
    pub x_point: Var,
}

/// Concatenates `[P_point ‖ P_voxel ‖ P_box]` row-wise and projects with a
/// bias-free linear map. `compressed` is replicated onto valid rows only;
/// `None` leaves the box slice zero.
pub fn assemble_tokens<T: Real>(
    g: &mut Graph<T>,
    sample: &BoxSample,
    p_voxel: Var,
    compressed: Option<Var>,
    projection: Var,
    config: &ModelConfig,
) -> Result<Tokens> {
    let n = sample.n_max();
    let p_point = g.constant(sample.points.mapv(T::lit));
    let (vr, vc) = g.shape(p_voxel);
    let box_width = compressed.map(|c| g.shape(c).1).unwrap_or(config.c_compressed);
    let (pr, pc) = g.shape(projection);
    let width = POINT_DIM + vc + box_width;
    if vr != n || vc != config.c_voxel || box_width != config.c_compressed || pr != width || pc != config.c_tr {
        return Err(Error::shape(
            "P_cat components (point, voxel, box -> projection)",
            format!(
                "{n} rows of {}+{}+{} -> {}x{}",
                POINT_DIM,
                config.c_voxel,
                config.c_compressed,
                config.p_cat_width(),
                config.c_tr
            ),
            format!("{vr} rows of {POINT_DIM}+{vc}+{box_width} -> {pr}x{pc}"),
        ));
    }
    let p_box = match compressed {
        Some(c) => {
            let rows = sample.mask.iter().map(|&m| if m { Some(0) } else { None }).collect();
            g.gather_rows(c, rows)
        }
        None => g.constant(Array2::zeros((n, config.c_compressed))),
    };
    let p_cat = g.concat_cols(&[p_point, p_voxel, p_box]);
    let x_point = g.matmul(p_cat, projection);
    Ok(Tokens {
        p_point,
        p_voxel,
        p_box,
        p_cat,
        x_point,
    })
}

/// Parameter handles of the token builder.
#[derive(Clone, Copy, Debug)]
pub struct AssemblyIds {
    pub compress: Option<Mlp>,
    pub projection: ParamId,
}
