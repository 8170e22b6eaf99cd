//! The keypoint transformer: learnable keypoint queries joined with point
//! tokens, pre-norm self-attention blocks and four output heads.

use ndarray::Array2;
use rand::Rng;

use crate::assembly::{assemble_tokens, compress_box_feat, BoxInput, Stage1Input, Tokens};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{decanonicalize, Box3D, KeypointSet, KeypointState, Vec3, NUM_KEYPOINTS};
use crate::graph::{Graph, Var};
use crate::num::Real;
use crate::params::{Bound, Mlp, ParamId, ParamStore};
use crate::stage1::{box_bev_features, encode_voxels, BEV_SAMPLES, STATS_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormIds {
    fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, width: usize) -> Self {
        LayerNormIds {
            gamma: store.insert_ones(&format!("{prefix}.gamma"), 1, width),
            beta: store.insert_zeros(&format!("{prefix}.beta"), 1, width),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockIds {
    pub ln1: LayerNormIds,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2: LayerNormIds,
    pub ff: Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadIds {
    pub xy: Mlp,
    pub z: Mlp,
    pub vis: Mlp,
    pub seg: Mlp,
}

/// Handles of every parameter in a [`KptrModel`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelIds {
    pub voxel: Mlp,
    pub pillar: Option<Mlp>,
    pub compress: Option<Mlp>,
    pub projection: ParamId,
    pub queries: ParamId,
    pub blocks: Vec<BlockIds>,
    pub final_norm: LayerNormIds,
    pub heads: HeadIds,
}

/// Stage-1 surrogate plus keypoint transformer with named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct KptrModel<T: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub ids: ModelIds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Run the blocks on valid rows plus one shared padded row. Padded
    /// tokens are identical and masked as keys, so the result is the same
    /// as the full sequence.
    pub compact_padding: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { compact_padding: true }
    }
}

/// Graph handles of one box's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub tokens: Tokens,
    /// `N_kp × C_tr` after the final norm.
    pub x_kp: Var,
    /// `N_max × C_tr` after the final norm.
    pub x_point: Var,
    /// `N_kp × 2`, canonical meters.
    pub xy: Var,
    /// `N_kp × 1`, canonical meters.
    pub z: Var,
    /// `N_kp × 1` visibility logits.
    pub vis_logit: Var,
    /// `N_kp × 1` visibility probabilities.
    pub vis: Var,
    /// `N_max × (N_kp + 1)` segmentation logits.
    pub seg: Var,
}

/// Network outputs for one box, detached from the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct PosePrediction {
    pub xy: Array2<f64>,
    pub z: Array2<f64>,
    pub vis: Vec<f64>,
    pub seg: Array2<f64>,
}

impl PosePrediction {
    pub fn from_output<T: Real>(g: &Graph<T>, out: &ForwardOutput) -> Self {
        let f = |v: Var| g.value(v).mapv(|x| x.to_f64_lossy());
        PosePrediction {
            xy: f(out.xy),
            z: f(out.z),
            vis: g.value(out.vis).iter().map(|x| x.to_f64_lossy()).collect(),
            seg: f(out.seg),
        }
    }

    /// Canonical-frame keypoints.
    pub fn local_keypoints(&self) -> [Vec3; NUM_KEYPOINTS] {
        std::array::from_fn(|i| [self.xy[[i, 0]], self.xy[[i, 1]], self.z[[i, 0]]])
    }

    /// Prediction used for boxes without points: box center, all invisible.
    pub fn empty(n_max: usize) -> Self {
        PosePrediction {
            xy: Array2::zeros((NUM_KEYPOINTS, 2)),
            z: Array2::zeros((NUM_KEYPOINTS, 1)),
            vis: vec![0.0; NUM_KEYPOINTS],
            seg: Array2::zeros((n_max, NUM_KEYPOINTS + 1)),
        }
    }
}

pub const DEFAULT_VIS_THRESHOLD: f64 = 0.5;

/// World-frame keypoints; visibility flag is `vis >= threshold`.
pub fn decode(pred: &PosePrediction, b: &Box3D, threshold: f64) -> KeypointSet {
    let positions = decanonicalize(&pred.local_keypoints(), b);
    let states = std::array::from_fn(|i| {
        if pred.vis[i] >= threshold {
            KeypointState::Visible
        } else {
            KeypointState::Occluded
        }
    });
    let mut set = KeypointSet::new(positions, states);
    set.visibility = Some(std::array::from_fn(|i| pred.vis[i]));
    set
}

impl<T: Real> KptrModel<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut s = ParamStore::new();
        let voxel = Mlp::new(&mut s, "stage1.voxel", STATS_DIM, c.c_voxel, c.c_voxel, rng);
        let pillar = c
            .box_feat
            .then(|| Mlp::new(&mut s, "stage1.pillar", STATS_DIM, c.c_bev, c.c_bev, rng));
        let compress = c.box_feat.then(|| {
            Mlp::new(
                &mut s,
                "compress",
                BEV_SAMPLES * c.c_bev,
                c.compress_hidden,
                c.c_compressed,
                rng,
            )
        });
        let projection = s.insert_weight("input.proj", c.p_cat_width(), c.c_tr, rng);
        let queries = s.insert("queries", {
            let bound = (6.0 / (NUM_KEYPOINTS + c.c_tr) as f64).sqrt();
            Array2::from_shape_fn((NUM_KEYPOINTS, c.c_tr), |_| T::lit(rng.gen_range(-bound..bound)))
        });
        let blocks = (0..c.layers)
            .map(|i| {
                let p = format!("block{i}");
                BlockIds {
                    ln1: LayerNormIds::new(&mut s, &format!("{p}.ln1"), c.c_tr),
                    wq: s.insert_weight(&format!("{p}.attn.wq"), c.c_tr, c.c_tr, rng),
                    bq: s.insert_zeros(&format!("{p}.attn.bq"), 1, c.c_tr),
                    wk: s.insert_weight(&format!("{p}.attn.wk"), c.c_tr, c.c_tr, rng),
                    bk: s.insert_zeros(&format!("{p}.attn.bk"), 1, c.c_tr),
                    wv: s.insert_weight(&format!("{p}.attn.wv"), c.c_tr, c.c_tr, rng),
                    bv: s.insert_zeros(&format!("{p}.attn.bv"), 1, c.c_tr),
                    wo: s.insert_weight(&format!("{p}.attn.wo"), c.c_tr, c.c_tr, rng),
                    bo: s.insert_zeros(&format!("{p}.attn.bo"), 1, c.c_tr),
                    ln2: LayerNormIds::new(&mut s, &format!("{p}.ln2"), c.c_tr),
                    ff: Mlp::new(&mut s, &format!("{p}.ff"), c.c_tr, c.ffn, c.c_tr, rng),
                }
            })
            .collect();
        let final_norm = LayerNormIds::new(&mut s, "final_norm", c.c_tr);
        let heads = HeadIds {
            xy: Mlp::new(&mut s, "head.xy", c.c_tr, c.head_hidden, 2, rng),
            z: Mlp::new(&mut s, "head.z", c.c_tr, c.head_hidden, 1, rng),
            vis: Mlp::new(&mut s, "head.vis", c.c_tr, c.head_hidden, 1, rng),
            seg: Mlp::new(&mut s, "head.seg", c.c_tr, c.head_hidden, c.seg_classes(), rng),
        };
        Ok(KptrModel {
            config,
            store: s,
            ids: ModelIds {
                voxel,
                pillar,
                compress,
                projection,
                queries,
                blocks,
                final_norm,
                heads,
            },
        })
    }

    /// Correctly shaped parameters with constant values, for counting and
    /// shape checks.
    pub fn placeholder(config: ModelConfig) -> Result<Self> {
        KptrModel::new(config, &mut rand::rngs::mock::StepRng::new(0, 0))
    }

    /// Rebuilds a model around an existing parameter store, checking that
    /// every expected parameter is present with the right shape.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let template = KptrModel::<T>::placeholder(config)?;
        if template.store.len() != store.len() {
            return Err(Error::shape(
                "parameter count",
                template.store.len().to_string(),
                store.len().to_string(),
            ));
        }
        for (id, p) in template.store.iter() {
            let got = store
                .by_name(&p.name)
                .ok_or_else(|| Error::NotFound(format!("parameter {}", p.name)))?;
            if got.value.dim() != p.value.dim() {
                return Err(Error::shape(
                    &p.name,
                    format!("{:?}", p.value.dim()),
                    format!("{:?}", got.value.dim()),
                ));
            }
            if store.id(&p.name) != Some(id) {
                return Err(Error::Config(format!("parameter {} out of order", p.name)));
            }
        }
        Ok(KptrModel {
            config: template.config,
            store,
            ids: template.ids,
        })
    }

    pub fn cast<U: Real>(&self) -> KptrModel<U> {
        KptrModel {
            config: self.config.clone(),
            store: self.store.cast(),
            ids: self.ids.clone(),
        }
    }

    /// Scalar counts of the transformer (everything except the stage-1
    /// encoders), by group.
    pub fn kptr_breakdown(&self) -> Vec<(String, usize)> {
        self.store
            .group_counts()
            .into_iter()
            .filter(|(g, _)| !g.starts_with("stage1"))
            .collect()
    }

    pub fn kptr_param_count(&self) -> usize {
        self.kptr_breakdown().iter().map(|(_, n)| n).sum()
    }

    /// Builds the forward graph for one box.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, input: &BoxInput, opts: ForwardOptions) -> Result<ForwardOutput> {
        let c = &self.config;
        let sample = &input.sample;
        if sample.n_max() != c.n_max {
            return Err(Error::shape("sample rows", c.n_max.to_string(), sample.n_max().to_string()));
        }
        let (p_voxel, bev) = match &input.stage1 {
            Stage1Input::Surrogate {
                voxel_stats,
                row_voxel,
                bev,
            } => {
                let pv = encode_voxels(g, p, &self.ids.voxel, voxel_stats, row_voxel);
                let b = self
                    .ids
                    .pillar
                    .map(|pillar| box_bev_features(g, p, &pillar, bev, c.c_bev));
                (pv, b)
            }
            Stage1Input::Precomputed { p_voxel, bev } => {
                let pv = g.constant(p_voxel.mapv(T::lit));
                (pv, c.box_feat.then(|| g.constant(bev.mapv(T::lit))))
            }
        };
        let compressed = match (self.ids.compress, bev) {
            (Some(m), Some(b)) => Some(compress_box_feat(g, p, &m, b, c)?),
            _ => None,
        };
        let tokens = assemble_tokens(g, sample, p_voxel, compressed, p.var(self.ids.projection), c)?;

        // Rows of the point stream actually run through the blocks.
        let (rows, scatter): (Vec<usize>, Vec<usize>) = if opts.compact_padding {
            let mut rows: Vec<usize> = (0..c.n_max).filter(|&r| sample.mask[r]).collect();
            let pad = sample.mask.iter().position(|m| !m);
            if let Some(pr) = pad {
                rows.push(pr);
            }
            // Padded rows all map to the shared row after the valid ones.
            let valid = sample.valid_count();
            let mut next = 0;
            let pos = sample
                .mask
                .iter()
                .map(|&m| {
                    if m {
                        next += 1;
                        next - 1
                    } else {
                        valid
                    }
                })
                .collect();
            (rows, pos)
        } else {
            ((0..c.n_max).collect(), (0..c.n_max).collect())
        };
        let x_rows = if opts.compact_padding {
            g.gather_rows(tokens.x_point, rows.iter().map(|&r| Some(r)).collect())
        } else {
            tokens.x_point
        };
        let mut key_mask = vec![true; NUM_KEYPOINTS];
        key_mask.extend(rows.iter().map(|&r| sample.mask[r]));

        let queries = p.var(self.ids.queries);
        let mut x = g.concat_rows(&[queries, x_rows]);
        for (i, b) in self.ids.blocks.iter().enumerate() {
            let h = b.ln1.forward(g, p, x);
            let q = g.linear(h, p.var(b.wq), p.var(b.bq));
            let k = g.linear(h, p.var(b.wk), p.var(b.bk));
            let v = g.linear(h, p.var(b.wv), p.var(b.bv));
            let a = g.attention(q, k, v, c.heads, &key_mask);
            let a = g.linear(a, p.var(b.wo), p.var(b.bo));
            x = g.add(x, a);
            let h = b.ln2.forward(g, p, x);
            let f = b.ff.forward(g, p, h);
            x = g.add(x, f);
            if let Some(bad) = g.value(x).iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "activation {bad} after transformer block {i}"
                )));
            }
        }
        let x = self.ids.final_norm.forward(g, p, x);
        let total = NUM_KEYPOINTS + rows.len();
        let x_kp = g.slice_rows(x, 0, NUM_KEYPOINTS);
        let x_pt_rows = g.slice_rows(x, NUM_KEYPOINTS, total);
        let heads = &self.ids.heads;
        let xy = heads.xy.forward(g, p, x_kp);
        let z = heads.z.forward(g, p, x_kp);
        let vis_logit = heads.vis.forward(g, p, x_kp);
        let vis = g.sigmoid(vis_logit);
        let seg_rows = heads.seg.forward(g, p, x_pt_rows);
        let (x_point, seg) = if opts.compact_padding {
            let back: Vec<Option<usize>> = scatter.iter().map(|&i| Some(i)).collect();
            (g.gather_rows(x_pt_rows, back.clone()), g.gather_rows(seg_rows, back))
        } else {
            (x_pt_rows, seg_rows)
        };
        Ok(ForwardOutput {
            tokens,
            x_kp,
            x_point,
            xy,
            z,
            vis_logit,
            vis,
            seg,
        })
    }

    /// Inference for one box without gradients.
    pub fn predict(&self, input: &BoxInput) -> Result<PosePrediction> {
        if input.sample.is_empty() {
            return Ok(PosePrediction::empty(self.config.n_max));
        }
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.store, |_| false);
        let out = self.forward(&mut g, &p, input, ForwardOptions::default())?;
        Ok(PosePrediction::from_output(&g, &out))
    }
}
