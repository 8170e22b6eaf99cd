//! Stage-1 surrogate: box-relative voxel features gathered back to points
//! and bilinearly sampled BEV pillar features at five box locations, plus a
//! binary file format for swapping in precomputed first-stage features.
//!
//! Everything here is built in the box's canonical frame, so the features
//! are invariant to rigid motions of the scene.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::{Box3D, Point, C_POINT};
use crate::graph::{Graph, Var};
use crate::num::Real;
use crate::params::{Bound, Mlp};

/// Width of the per-voxel and per-pillar statistics fed to the encoders.
pub const STATS_DIM: usize = 7;
/// Number of BEV sample locations per box.
pub const BEV_SAMPLES: usize = 5;
/// Sample locations in fixed order.
pub const BEV_SAMPLE_NAMES: [&str; BEV_SAMPLES] = ["center", "front", "back", "left", "right"];

const COUNT_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Voxel {
    pub index: [i64; 3],
    /// Indices into the voxelized point slice.
    pub points: Vec<usize>,
    pub mean: [f64; 3],
    pub mean_features: [f64; C_POINT],
}

/// Sparse voxel grid; voxels are ordered by their integer index.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub voxel_size: [f64; 3],
    pub voxels: Vec<Voxel>,
    /// Voxel (position in `voxels`) of every input point.
    pub point_voxel: Vec<usize>,
}

pub fn voxel_index(p: [f64; 3], size: [f64; 3]) -> [i64; 3] {
    [
        (p[0] / size[0]).floor() as i64,
        (p[1] / size[1]).floor() as i64,
        (p[2] / size[2]).floor() as i64,
    ]
}

/// Assigns every point to the voxel `floor(coordinate / size)`.
pub fn voxelize(points: &[Point], voxel_size: [f64; 3]) -> Result<VoxelGrid> {
    if voxel_size.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::Config(format!("voxel size must be positive, got {voxel_size:?}")));
    }
    if let Some(i) = points.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("point {i} passed to voxelize")));
    }
    let mut map: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        map.entry(voxel_index(p.position(), voxel_size)).or_default().push(i);
    }
    let mut point_voxel = vec![0; points.len()];
    let voxels = map
        .into_iter()
        .enumerate()
        .map(|(vi, (index, members))| {
            let n = members.len() as f64;
            let mut mean = [0.0; 3];
            let mut mean_features = [0.0; C_POINT];
            for &i in &members {
                point_voxel[i] = vi;
                let p = &points[i];
                for k in 0..3 {
                    mean[k] += p.position()[k] / n;
                    mean_features[k] += p.features()[k] / n;
                }
            }
            Voxel {
                index,
                points: members,
                mean,
                mean_features,
            }
        })
        .collect();
    Ok(VoxelGrid {
        voxel_size,
        voxels,
        point_voxel,
    })
}

impl VoxelGrid {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Encoder input per voxel: mean offset from the voxel center (in voxel
    /// units), scaled count, mean extra features.
    pub fn stats(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.voxels.len(), STATS_DIM));
        for (mut row, v) in m.rows_mut().into_iter().zip(&self.voxels) {
            for k in 0..3 {
                let center = (v.index[k] as f64 + 0.5) * self.voxel_size[k];
                row[k] = (v.mean[k] - center) / self.voxel_size[k];
            }
            row[3] = v.points.len() as f64 * COUNT_SCALE;
            for k in 0..C_POINT {
                row[4 + k] = v.mean_features[k];
            }
        }
        m
    }
}

/// Per-voxel encoder output gathered to sample rows: row `i` receives the
/// feature of voxel `row_voxel[i]`, or zeros for padded rows.
pub fn encode_voxels<T: Real>(
    g: &mut Graph<T>,
    params: &Bound,
    encoder: &Mlp,
    voxel_stats: &Array2<f64>,
    row_voxel: &[Option<usize>],
) -> Var {
    let stats = g.constant(voxel_stats.mapv(T::lit));
    let feats = encoder.forward(g, params, stats);
    g.gather_rows(feats, row_voxel.to_vec())
}

/// Box-relative pillar layout: pooled pillar statistics and the fixed
/// bilinear weights that sample them at the five box locations.
#[derive(Clone, Debug, PartialEq)]
pub struct BevLayout {
    pub pillar_size: f64,
    pub pillars: Vec<[i64; 2]>,
    /// `pillars × STATS_DIM`.
    pub stats: Array2<f64>,
    /// `BEV_SAMPLES × pillars`.
    pub weights: Array2<f64>,
    /// Canonical-frame BEV sample locations.
    pub samples: [[f64; 2]; BEV_SAMPLES],
}

/// Canonical-frame sample locations: center, then the front, back, left and
/// right edge midpoints.
pub fn bev_sample_points(b: &Box3D) -> [[f64; 2]; BEV_SAMPLES] {
    let hl = 0.5 * b.dims[0];
    let hw = 0.5 * b.dims[1];
    [[0.0, 0.0], [hl, 0.0], [-hl, 0.0], [0.0, hw], [0.0, -hw]]
}

/// Builds the pillar grid over the box neighborhood (box grown by `margin`).
pub fn bev_layout(scene_points: &[Point], b: &Box3D, pillar_size: f64, margin: f64) -> BevLayout {
    let mut map: BTreeMap<[i64; 2], Vec<Point>> = BTreeMap::new();
    for p in scene_points {
        let q = b.to_local(p.position());
        if (0..3).all(|k| q[k].abs() <= 0.5 * b.dims[k] + margin) {
            let key = [(q[0] / pillar_size).floor() as i64, (q[1] / pillar_size).floor() as i64];
            map.entry(key).or_default().push(Point::new(q, p.intensity, p.elongation, p.timestamp));
        }
    }
    let pillars: Vec<[i64; 2]> = map.keys().copied().collect();
    let mut stats = Array2::zeros((pillars.len(), STATS_DIM));
    for (mut row, (key, pts)) in stats.rows_mut().into_iter().zip(&map) {
        let n = pts.len() as f64;
        for p in pts {
            row[0] += (p.x / pillar_size - (key[0] as f64 + 0.5)) / n;
            row[1] += (p.y / pillar_size - (key[1] as f64 + 0.5)) / n;
            row[2] += p.z / n;
            for (k, f) in p.features().iter().enumerate() {
                row[4 + k] += f / n;
            }
        }
        row[3] = n * COUNT_SCALE;
    }
    let samples = bev_sample_points(b);
    let lookup: BTreeMap<[i64; 2], usize> = pillars.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let mut weights = Array2::zeros((BEV_SAMPLES, pillars.len()));
    for (s, [u, v]) in samples.iter().enumerate() {
        // Pillar features live at pillar centers.
        let fx = u / pillar_size - 0.5;
        let fy = v / pillar_size - 0.5;
        let i0 = fx.floor();
        let j0 = fy.floor();
        let ax = fx - i0;
        let ay = fy - j0;
        for (di, wx) in [(0, 1.0 - ax), (1, ax)] {
            for (dj, wy) in [(0, 1.0 - ay), (1, ay)] {
                let key = [i0 as i64 + di, j0 as i64 + dj];
                if let Some(&pi) = lookup.get(&key) {
                    weights[[s, pi]] += wx * wy;
                }
            }
        }
    }
    BevLayout {
        pillar_size,
        pillars,
        stats,
        weights,
        samples,
    }
}

/// `B` (`5 × C_BEV`): bilinear samples of the encoded pillar map.
pub fn box_bev_features<T: Real>(
    g: &mut Graph<T>,
    params: &Bound,
    encoder: &Mlp,
    layout: &BevLayout,
    c_bev: usize,
) -> Var {
    if layout.pillars.is_empty() {
        return g.constant(Array2::zeros((BEV_SAMPLES, c_bev)));
    }
    let stats = g.constant(layout.stats.mapv(T::lit));
    let feats = encoder.forward(g, params, stats);
    let w = g.constant(layout.weights.mapv(T::lit));
    g.matmul(w, feats)
}

const FEATURE_MAGIC: &[u8; 8] = b"KPFEAT01";

/// Dimensions recorded in a precomputed-feature file header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureDims {
    pub c_voxel: usize,
    pub c_bev: usize,
    pub n_max: usize,
}

/// First-stage outputs for one box, keyed by `(scene id, box index)`.
/// `p_voxel` rows follow the box's in-box point order.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecomputedFeatures {
    pub scene_id: String,
    pub box_index: usize,
    /// `n_max × c_voxel`.
    pub p_voxel: Array2<f32>,
    /// `BEV_SAMPLES × c_bev`.
    pub bev: Array2<f32>,
}

fn write_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    w.write_all(&(v as u32).to_le_bytes())
}

/// Writes a precomputed-feature file (little-endian `f32`).
pub fn save_precomputed(path: impl AsRef<Path>, dims: FeatureDims, records: &[PrecomputedFeatures]) -> Result<()> {
    let path = path.as_ref();
    for r in records {
        if r.p_voxel.dim() != (dims.n_max, dims.c_voxel) {
            return Err(Error::shape(
                "P_voxel",
                format!("{}x{}", dims.n_max, dims.c_voxel),
                format!("{}x{}", r.p_voxel.nrows(), r.p_voxel.ncols()),
            ));
        }
        if r.bev.dim() != (BEV_SAMPLES, dims.c_bev) {
            return Err(Error::shape(
                "B",
                format!("{}x{}", BEV_SAMPLES, dims.c_bev),
                format!("{}x{}", r.bev.nrows(), r.bev.ncols()),
            ));
        }
    }
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(FEATURE_MAGIC).map_err(io)?;
    write_u32(&mut w, dims.c_voxel).map_err(io)?;
    write_u32(&mut w, dims.c_bev).map_err(io)?;
    write_u32(&mut w, dims.n_max).map_err(io)?;
    for r in records {
        write_u32(&mut w, r.scene_id.len()).map_err(io)?;
        w.write_all(r.scene_id.as_bytes()).map_err(io)?;
        write_u32(&mut w, r.box_index).map_err(io)?;
        for v in r.p_voxel.iter().chain(r.bev.iter()) {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.data.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(out)
    }

    fn u32(&mut self) -> Option<usize> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

/// Loads the stored features of one box, checking the header dimensions
/// against `expected`.
pub fn load_precomputed(
    path: impl AsRef<Path>,
    expected: FeatureDims,
    scene_id: &str,
    box_index: usize,
) -> Result<PrecomputedFeatures> {
    let path = path.as_ref();
    let mut data = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut data)
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { data: &data, pos: 0 };
    let truncated = |what: &str, need: usize, have: usize| Error::shape(what, format!("{need} bytes"), format!("{have} bytes"));
    if c.take(8) != Some(FEATURE_MAGIC.as_slice()) {
        return Err(Error::Config(format!("{}: not a feature file", path.display())));
    }
    let header = (c.u32(), c.u32(), c.u32());
    let (Some(c_voxel), Some(c_bev), Some(n_max)) = header else {
        return Err(truncated("header", 20, data.len()));
    };
    let dims = FeatureDims { c_voxel, c_bev, n_max };
    if dims != expected {
        return Err(Error::shape(
            "feature file (C_voxel, C_BEV, N_max)",
            format!("({}, {}, {})", expected.c_voxel, expected.c_bev, expected.n_max),
            format!("({c_voxel}, {c_bev}, {n_max})"),
        ));
    }
    let payload = (n_max * c_voxel + BEV_SAMPLES * c_bev) * 4;
    while c.pos < data.len() {
        let start = c.pos;
        let id_len = c.u32().ok_or_else(|| truncated("record header", 4, data.len() - start))?;
        let id = c
            .take(id_len)
            .ok_or_else(|| truncated("record id", id_len, data.len() - start - 4))?;
        let idx = c.u32().ok_or_else(|| truncated("record header", 4, 0))?;
        let body_start = c.pos;
        let body = c
            .take(payload)
            .ok_or_else(|| truncated("record payload", payload, data.len() - body_start))?;
        if id == scene_id.as_bytes() && idx == box_index {
            let floats: Vec<f32> = body
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let (pv, bev) = floats.split_at(n_max * c_voxel);
            return Ok(PrecomputedFeatures {
                scene_id: scene_id.to_string(),
                box_index,
                p_voxel: Array2::from_shape_vec((n_max, c_voxel), pv.to_vec()).expect("sized above"),
                bev: Array2::from_shape_vec((BEV_SAMPLES, c_bev), bev.to_vec()).expect("sized above"),
            });
        }
    }
    Err(Error::NotFound(format!("features for scene {scene_id} box {box_index}")))
}
