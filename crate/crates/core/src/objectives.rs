//! Pseudo segmentation labels and the four-term training loss.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::assembly::BoxSample;
use crate::error::{Error, Result};
use crate::geometry::{dist3, KeypointState, Vec3, NUM_KEYPOINTS};
use crate::graph::{Graph, Var};
use crate::kptr::ForwardOutput;
use crate::num::Real;

pub const BACKGROUND: usize = 0;
pub const SMOOTH_L1_BETA: f64 = 1.0;
pub const BCE_EPS: f64 = 1e-7;

/// Labels every valid row of `sample`: each annotated keypoint claims its
/// `k` nearest valid points (ties by row); a point claimed several times
/// goes to the closest keypoint, ties to the lower keypoint index.
/// Keypoint `i` is class `i + 1`, everything else background.
pub fn pseudo_seg_labels(
    sample: &BoxSample,
    keypoints: &[Vec3; NUM_KEYPOINTS],
    states: &[KeypointState; NUM_KEYPOINTS],
    k: usize,
) -> Vec<usize> {
    assert!(k >= 1, "k must be at least 1");
    let n = sample.n_max();
    let valid: Vec<usize> = (0..n).filter(|&r| sample.mask[r]).collect();
    let pos = |r: usize| [sample.points[[r, 0]], sample.points[[r, 1]], sample.points[[r, 2]]];
    // (distance, keypoint) of the current owner of each row.
    let mut owner: Vec<Option<(f64, usize)>> = vec![None; n];
    for (j, kp) in keypoints.iter().enumerate() {
        if !states[j].is_annotated() {
            continue;
        }
        let mut by_dist: Vec<(f64, usize)> = valid.iter().map(|&r| (dist3(pos(r), *kp), r)).collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d, r) in by_dist.iter().take(k) {
            // Keypoints are visited in increasing index, so a strict
            // comparison keeps the lower index on equal distance.
            if owner[r].is_none_or(|(od, _)| d < od) {
                owner[r] = Some((d, j));
            }
        }
    }
    owner
        .into_iter()
        .map(|o| o.map_or(BACKGROUND, |(_, j)| j + 1))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub xy: f64,
    pub z: f64,
    pub vis: f64,
    pub kpseg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            xy: 5.0,
            z: 1.0,
            vis: 1.0,
            kpseg: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    /// Nearest points labeled per keypoint.
    pub k: usize,
    /// Regress occluded keypoints as well as visible ones.
    pub include_occluded: bool,
    /// Segmentation auxiliary loss on/off.
    pub seg_aux: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            weights: LossWeights::default(),
            k: 5,
            include_occluded: false,
            seg_aux: true,
        }
    }
}

/// Supervision of one box in its canonical frame.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxTargets {
    pub xy: Array2<f64>,
    pub xy_weight: Array2<f64>,
    pub z: Array2<f64>,
    pub z_weight: Array2<f64>,
    pub vis: Array2<f64>,
    pub vis_weight: Array2<f64>,
    pub seg_labels: Vec<usize>,
    pub seg_mask: Vec<bool>,
}

impl BoxTargets {
    pub fn new(
        sample: &BoxSample,
        keypoints: &[Vec3; NUM_KEYPOINTS],
        states: &[KeypointState; NUM_KEYPOINTS],
        config: &ObjectiveConfig,
    ) -> Self {
        let mut t = BoxTargets {
            xy: Array2::zeros((NUM_KEYPOINTS, 2)),
            xy_weight: Array2::zeros((NUM_KEYPOINTS, 2)),
            z: Array2::zeros((NUM_KEYPOINTS, 1)),
            z_weight: Array2::zeros((NUM_KEYPOINTS, 1)),
            vis: Array2::zeros((NUM_KEYPOINTS, 1)),
            vis_weight: Array2::zeros((NUM_KEYPOINTS, 1)),
            seg_labels: pseudo_seg_labels(sample, keypoints, states, config.k),
            seg_mask: sample.mask.clone(),
        };
        for (i, (p, s)) in keypoints.iter().zip(states).enumerate() {
            let regress = match s {
                KeypointState::Visible => true,
                KeypointState::Occluded => config.include_occluded,
                KeypointState::Absent => false,
            };
            if regress {
                t.xy[[i, 0]] = p[0];
                t.xy[[i, 1]] = p[1];
                t.z[[i, 0]] = p[2];
                t.xy_weight.row_mut(i).fill(1.0);
                t.z_weight[[i, 0]] = 1.0;
            }
            if s.is_annotated() {
                t.vis[[i, 0]] = if *s == KeypointState::Visible { 1.0 } else { 0.0 };
                t.vis_weight[[i, 0]] = 1.0;
            }
        }
        t
    }
}

/// The four loss nodes of a batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub xy: Var,
    pub z: Var,
    pub vis: Var,
    pub kpseg: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub xy: f64,
    pub z: f64,
    pub vis: f64,
    pub kpseg: f64,
    pub total: f64,
    /// Regressed keypoints.
    pub regressed: usize,
    /// Keypoints supervised for visibility.
    pub vis_count: usize,
    /// Valid points supervised for segmentation.
    pub seg_points: usize,
}

fn stack<T: Real>(parts: impl Iterator<Item = Array2<f64>>) -> Array2<T> {
    let parts: Vec<Array2<f64>> = parts.collect();
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views)
        .expect("consistent widths")
        .mapv(T::lit)
}

/// Batch losses: every component is a mean over all contributing
/// elements of all boxes.
pub fn batch_losses<T: Real>(g: &mut Graph<T>, outputs: &[ForwardOutput], targets: &[BoxTargets]) -> LossVars {
    assert_eq!(outputs.len(), targets.len());
    assert!(!outputs.is_empty(), "empty batch");
    let cat = |g: &mut Graph<T>, f: &dyn Fn(&ForwardOutput) -> Var| {
        let parts: Vec<Var> = outputs.iter().map(f).collect();
        if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_rows(&parts)
        }
    };
    let xy = cat(g, &|o| o.xy);
    let z = cat(g, &|o| o.z);
    let vis = cat(g, &|o| o.vis);
    let seg = cat(g, &|o| o.seg);
    let beta = T::lit(SMOOTH_L1_BETA);
    let l_xy = g.smooth_l1_loss(
        xy,
        &stack(targets.iter().map(|t| t.xy.clone())),
        &stack(targets.iter().map(|t| t.xy_weight.clone())),
        beta,
    );
    let l_z = g.smooth_l1_loss(
        z,
        &stack(targets.iter().map(|t| t.z.clone())),
        &stack(targets.iter().map(|t| t.z_weight.clone())),
        beta,
    );
    let l_vis = g.bce_loss(
        vis,
        &stack(targets.iter().map(|t| t.vis.clone())),
        &stack(targets.iter().map(|t| t.vis_weight.clone())),
        T::lit(BCE_EPS),
    );
    let labels: Vec<usize> = targets.iter().flat_map(|t| t.seg_labels.iter().copied()).collect();
    let mask: Vec<bool> = targets.iter().flat_map(|t| t.seg_mask.iter().copied()).collect();
    if !mask.iter().any(|m| *m) {
        log::warn!("segmentation loss over a batch without valid points");
    }
    let l_seg = g.softmax_ce_loss(seg, &labels, &mask);
    LossVars {
        xy: l_xy,
        z: l_z,
        vis: l_vis,
        kpseg: l_seg,
    }
}

/// `λ1·L_xy + λ2·L_z + λ3·L_vis + λ4·L_kpseg`, accumulated left to right in
/// `T`. With `seg_aux` off the segmentation term is dropped.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    losses: &LossVars,
    targets: &[BoxTargets],
    config: &ObjectiveConfig,
) -> Result<(Var, LossBreakdown)> {
    let w = &config.weights;
    let mut terms = vec![
        ("xy", losses.xy, w.xy),
        ("z", losses.z, w.z),
        ("vis", losses.vis, w.vis),
    ];
    if config.seg_aux {
        terms.push(("kpseg", losses.kpseg, w.kpseg));
    }
    for (name, v, _) in &terms {
        if !g.scalar(*v).is_finite() {
            return Err(Error::NonFinite(format!("loss component {name}")));
        }
    }
    let weighted: Vec<(Var, T)> = terms.iter().map(|(_, v, w)| (*v, T::lit(*w))).collect();
    let total = g.weighted_sum(&weighted);
    let kpseg = if config.seg_aux {
        g.scalar(losses.kpseg).to_f64_lossy()
    } else {
        0.0
    };
    let breakdown = LossBreakdown {
        xy: g.scalar(losses.xy).to_f64_lossy(),
        z: g.scalar(losses.z).to_f64_lossy(),
        vis: g.scalar(losses.vis).to_f64_lossy(),
        kpseg,
        total: g.scalar(total).to_f64_lossy(),
        regressed: targets
            .iter()
            .map(|t| t.z_weight.iter().filter(|w| **w > 0.0).count())
            .sum(),
        vis_count: targets
            .iter()
            .map(|t| t.vis_weight.iter().filter(|w| **w > 0.0).count())
            .sum(),
        seg_points: targets.iter().map(|t| t.seg_mask.iter().filter(|m| **m).count()).sum(),
    };
    Ok((total, breakdown))
}

/// Recomputes the weighted sum from logged components in `T`, in the same
/// order as [`total_loss`].
pub fn weighted_total<T: Real>(b: &LossBreakdown, w: &LossWeights) -> T {
    let mut total = T::zero();
    for (x, l) in [(b.xy, w.xy), (b.z, w.z), (b.vis, w.vis), (b.kpseg, w.kpseg)] {
        total += T::lit(l) * T::lit(x);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::sample_pad;
    use crate::geometry::Point;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_of(xs: &[[f64; 3]], n_max: usize) -> BoxSample {
        let pts: Vec<Point> = xs.iter().map(|p| Point::new(*p, 0.0, 0.0, 0.0)).collect();
        sample_pad(&pts, n_max, &mut ChaCha8Rng::seed_from_u64(0))
    }

    fn absent() -> [KeypointState; NUM_KEYPOINTS] {
        [KeypointState::Absent; NUM_KEYPOINTS]
    }

    #[test]
    fn single_keypoint_two_nearest() {
        let s = sample_of(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0], [4.0, 0.0, 0.0]], 8);
        let mut kps = [[0.0; 3]; NUM_KEYPOINTS];
        kps[0] = [0.9, 0.0, 0.0];
        let mut st = absent();
        st[0] = KeypointState::Visible;
        let labels = pseudo_seg_labels(&s, &kps, &st, 2);
        assert_eq!(labels, vec![1, 1, 0, 0, 0, 0, 0, 0]);
        assert!(pseudo_seg_labels(&s, &kps, &absent(), 2).iter().all(|l| *l == 0));
    }

    #[test]
    fn conflicts_prefer_closer_then_lower_index() {
        let s = sample_of(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], 2);
        let mut kps = [[0.0; 3]; NUM_KEYPOINTS];
        let mut st = absent();
        kps[3] = [0.2, 0.0, 0.0];
        kps[5] = [0.1, 0.0, 0.0];
        st[3] = KeypointState::Occluded;
        st[5] = KeypointState::Visible;
        assert_eq!(pseudo_seg_labels(&s, &kps, &st, 1), vec![6, 0]);
        kps[5] = [0.2, 0.0, 0.0];
        assert_eq!(pseudo_seg_labels(&s, &kps, &st, 1), vec![4, 0]);
    }

    fn eval_losses(pred_xy: Array2<f64>, pred_z: Array2<f64>, t: &BoxTargets) -> (f64, f64) {
        let mut g = Graph::<f64>::new();
        let xy = g.param(pred_xy);
        let z = g.param(pred_z);
        let lxy = g.smooth_l1_loss(xy, &t.xy, &t.xy_weight, 1.0);
        let lz = g.smooth_l1_loss(z, &t.z, &t.z_weight, 1.0);
        (g.scalar(lxy), g.scalar(lz))
    }

    #[test]
    fn regression_examples() {
        let s = sample_of(&[[0.0, 0.0, 0.0]], 4);
        let mut kps = [[0.0; 3]; NUM_KEYPOINTS];
        kps[2] = [0.3, -0.2, 0.5];
        let mut st = absent();
        st[2] = KeypointState::Visible;
        let t = BoxTargets::new(&s, &kps, &st, &ObjectiveConfig::default());
        let mut xy = t.xy.clone();
        let mut z = t.z.clone();
        assert_eq!(eval_losses(xy.clone(), z.clone(), &t), (0.0, 0.0));
        xy[[2, 0]] += 1.0;
        z[[2, 0]] += 2.0;
        let (lxy, lz) = eval_losses(xy.clone(), z.clone(), &t);
        assert!((lxy - 0.25).abs() < 1e-15 && (lz - 1.5).abs() < 1e-15);
        // Absent keypoints never contribute.
        let mut moved = kps;
        moved[7] = [9.0, 9.0, 9.0];
        let t2 = BoxTargets::new(&s, &moved, &st, &ObjectiveConfig::default());
        assert_eq!(eval_losses(xy, z, &t2), (lxy, lz));
    }

    #[test]
    fn occluded_regression_is_optional() {
        let s = sample_of(&[[0.0, 0.0, 0.0]], 2);
        let kps = [[0.1; 3]; NUM_KEYPOINTS];
        let mut st = absent();
        st[0] = KeypointState::Occluded;
        let off = BoxTargets::new(&s, &kps, &st, &ObjectiveConfig::default());
        assert_eq!(off.z_weight.sum(), 0.0);
        assert_eq!(off.vis_weight.sum(), 1.0);
        let on = BoxTargets::new(
            &s,
            &kps,
            &st,
            &ObjectiveConfig {
                include_occluded: true,
                ..Default::default()
            },
        );
        assert_eq!(on.xy_weight.sum(), 2.0);
    }

    #[test]
    fn weighted_total_examples() {
        let b = LossBreakdown {
            xy: 0.2,
            z: 0.1,
            vis: 0.3,
            kpseg: 0.4,
            ..Default::default()
        };
        assert!((weighted_total::<f64>(&b, &LossWeights::default()) - 1.8).abs() < 1e-12);
        assert_eq!(weighted_total::<f64>(&LossBreakdown::default(), &LossWeights::default()), 0.0);
        let seg_only = LossWeights {
            xy: 0.0,
            z: 0.0,
            vis: 0.0,
            kpseg: 1.0,
        };
        assert_eq!(weighted_total::<f64>(&b, &seg_only), 0.4);
    }
}
