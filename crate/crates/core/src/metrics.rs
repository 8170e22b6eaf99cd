//! Object matching, MPJPE and PEM with per-joint-group reporting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bev_center_distance, bev_iou, dist3, Box3D, KeypointSet, KeypointState, Scene, NUM_KEYPOINTS};

/// Penalty for unmatched keypoints.
pub const PEM_PENALTY: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "threshold")]
pub enum MatchGate {
    /// BEV center distance at most this many meters.
    CenterDistance(f64),
    /// BEV IoU strictly above this value.
    BevIou(f64),
}

impl Default for MatchGate {
    fn default() -> Self {
        MatchGate::CenterDistance(1.0)
    }
}

impl MatchGate {
    pub fn admits(&self, gt: &Box3D, pred: &Box3D) -> bool {
        match *self {
            MatchGate::CenterDistance(d) => bev_center_distance(gt, pred) <= d,
            MatchGate::BevIou(t) => bev_iou(gt, pred) > t,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(gt index, pred index)`, sorted by gt index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
}

impl MatchResult {
    pub fn total_distance(&self, gt: &[Box3D], pred: &[Box3D]) -> f64 {
        self.pairs.iter().map(|&(g, p)| bev_center_distance(&gt[g], &pred[p])).sum()
    }
}

/// Minimum-cost assignment of every row to a distinct column
/// (`rows <= cols`); returns the column of each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "more rows than columns");
    // Shortest augmenting paths with potentials; index 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if row_of[j] > 0 {
            out[row_of[j] - 1] = j - 1;
        }
    }
    out
}

/// One-to-one matching with the most gated pairs, then the least total
/// BEV center distance.
pub fn match_objects(gt: &[Box3D], pred: &[Box3D], gate: MatchGate) -> MatchResult {
    let admitted: Vec<Vec<Option<f64>>> = gt
        .iter()
        .map(|g| {
            pred.iter()
                .map(|p| gate.admits(g, p).then(|| bev_center_distance(g, p)))
                .collect()
        })
        .collect();
    let max_cost = admitted.iter().flatten().flatten().fold(0.0f64, |a, &b| a.max(b));
    // Any extra match outweighs every possible distance total.
    let big = (gt.len().min(pred.len()) as f64 + 1.0) * (max_cost + 1.0);
    let transpose = gt.len() > pred.len();
    let (rows, cols) = if transpose { (pred.len(), gt.len()) } else { (gt.len(), pred.len()) };
    let cost: Vec<Vec<f64>> = (0..rows)
        .map(|r| {
            (0..cols)
                .map(|c| {
                    let (g, p) = if transpose { (c, r) } else { (r, c) };
                    admitted[g][p].unwrap_or(big)
                })
                .collect()
        })
        .collect();
    let assignment = hungarian(&cost);
    let mut pairs: Vec<(usize, usize)> = assignment
        .iter()
        .enumerate()
        .map(|(r, &c)| if transpose { (c, r) } else { (r, c) })
        .filter(|&(g, p)| admitted[g][p].is_some())
        .collect();
    pairs.sort();
    let gts: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
    let preds: BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
    MatchResult {
        unmatched_gt: (0..gt.len()).filter(|i| !gts.contains(i)).collect(),
        unmatched_pred: (0..pred.len()).filter(|i| !preds.contains(i)).collect(),
        pairs,
    }
}

/// Joint groups in report order; the last entry covers all keypoints.
pub const JOINT_GROUPS: [(&str, &[usize]); 8] = [
    ("shoulders", &[1, 7]),
    ("elbows", &[2, 8]),
    ("wrists", &[3, 9]),
    ("hips", &[4, 10]),
    ("knees", &[5, 11]),
    ("ankles", &[6, 12]),
    ("head", &[0, 13]),
    ("all", &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13]),
];

/// Running sums for one joint group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupSums {
    pub matched_error: f64,
    pub matched: usize,
    pub unmatched: usize,
}

impl GroupSums {
    pub fn mpjpe(&self) -> Option<f64> {
        (self.matched > 0).then(|| self.matched_error / self.matched as f64)
    }

    pub fn pem(&self, penalty: f64) -> f64 {
        let n = self.matched + self.unmatched;
        if n == 0 {
            0.0
        } else {
            (self.matched_error + penalty * self.unmatched as f64) / n as f64
        }
    }

    fn add(&mut self, o: &GroupSums) {
        self.matched_error += o.matched_error;
        self.matched += o.matched;
        self.unmatched += o.unmatched;
    }
}

/// Per-group sums plus object counts; additive across scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSums {
    pub groups: [GroupSums; JOINT_GROUPS.len()],
    pub matched_objects: usize,
    pub false_negatives: usize,
    pub false_positives: usize,
}

impl Default for MetricSums {
    fn default() -> Self {
        MetricSums {
            groups: [GroupSums::default(); JOINT_GROUPS.len()],
            matched_objects: 0,
            false_negatives: 0,
            false_positives: 0,
        }
    }
}

impl MetricSums {
    pub fn add(&mut self, o: &MetricSums) {
        for (a, b) in self.groups.iter_mut().zip(&o.groups) {
            a.add(b);
        }
        self.matched_objects += o.matched_objects;
        self.false_negatives += o.false_negatives;
        self.false_positives += o.false_positives;
    }

    fn each_group(&mut self, kp: usize, mut f: impl FnMut(&mut GroupSums)) {
        for (g, (_, members)) in self.groups.iter_mut().zip(JOINT_GROUPS.iter()) {
            if members.contains(&kp) {
                f(g);
            }
        }
    }
}

/// Sums for one scene given a matching. GT keypoints count when annotated;
/// keypoints of unmatched predictions count when predicted visible.
pub fn scene_sums(
    gt: &[Option<KeypointSet>],
    pred: &[Option<KeypointSet>],
    matching: &MatchResult,
) -> MetricSums {
    let mut s = MetricSums {
        matched_objects: matching.pairs.len(),
        false_negatives: matching.unmatched_gt.len(),
        false_positives: matching.unmatched_pred.len(),
        ..Default::default()
    };
    for &(g, p) in &matching.pairs {
        let Some(gk) = &gt[g] else { continue };
        let pk = pred[p].as_ref();
        for i in 0..NUM_KEYPOINTS {
            if !gk.states[i].is_annotated() {
                continue;
            }
            match pk {
                Some(pk) => {
                    let e = dist3(gk.positions[i], pk.positions[i]);
                    s.each_group(i, |x| {
                        x.matched_error += e;
                        x.matched += 1;
                    });
                }
                // A matched box without a pose leaves its keypoints unmatched.
                None => s.each_group(i, |x| x.unmatched += 1),
            }
        }
    }
    for &g in &matching.unmatched_gt {
        if let Some(gk) = &gt[g] {
            for i in (0..NUM_KEYPOINTS).filter(|&i| gk.states[i].is_annotated()) {
                s.each_group(i, |x| x.unmatched += 1);
            }
        }
    }
    for &p in &matching.unmatched_pred {
        if let Some(pk) = &pred[p] {
            for i in (0..NUM_KEYPOINTS).filter(|&i| pk.states[i] == KeypointState::Visible) {
                s.each_group(i, |x| x.unmatched += 1);
            }
        }
    }
    s
}

/// Mean keypoint error over matched, annotated keypoints.
pub fn mpjpe(gt: &[Option<KeypointSet>], pred: &[Option<KeypointSet>], matching: &MatchResult) -> Option<f64> {
    scene_sums(gt, pred, matching).groups[JOINT_GROUPS.len() - 1].mpjpe()
}

/// Pose estimation metric with penalty `c` per unmatched keypoint.
pub fn pem(gt: &[Option<KeypointSet>], pred: &[Option<KeypointSet>], matching: &MatchResult, c: f64) -> f64 {
    scene_sums(gt, pred, matching).groups[JOINT_GROUPS.len() - 1].pem(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub mpjpe: Option<f64>,
    pub pem: f64,
    pub matched_keypoints: usize,
    pub unmatched_keypoints: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mpjpe: Option<f64>,
    pub pem: f64,
    pub groups: Vec<GroupReport>,
    pub matched_keypoints: usize,
    pub unmatched_keypoints: usize,
    pub matched_objects: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub scenes: usize,
}

impl EvalReport {
    pub fn from_sums(s: &MetricSums, penalty: f64, scenes: usize) -> Self {
        let groups: Vec<GroupReport> = JOINT_GROUPS
            .iter()
            .zip(&s.groups)
            .map(|((name, _), g)| GroupReport {
                group: name.to_string(),
                mpjpe: g.mpjpe(),
                pem: g.pem(penalty),
                matched_keypoints: g.matched,
                unmatched_keypoints: g.unmatched,
            })
            .collect();
        let all = groups.last().unwrap().clone();
        EvalReport {
            mpjpe: all.mpjpe,
            pem: all.pem,
            matched_keypoints: all.matched_keypoints,
            unmatched_keypoints: all.unmatched_keypoints,
            groups,
            matched_objects: s.matched_objects,
            false_positives: s.false_positives,
            false_negatives: s.false_negatives,
            scenes,
        }
    }

    /// Two-row text table (PEM, MPJPE) with one column per joint group.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<8}", "metric");
        for g in &self.groups {
            let _ = write!(out, "{:>11}", g.group);
        }
        out.push('\n');
        let _ = write!(out, "{:<8}", "PEM");
        for g in &self.groups {
            let _ = write!(out, "{:>11.4}", g.pem);
        }
        out.push('\n');
        let _ = write!(out, "{:<8}", "MPJPE");
        for g in &self.groups {
            match g.mpjpe {
                Some(v) => {
                    let _ = write!(out, "{v:>11.4}");
                }
                None => {
                    let _ = write!(out, "{:>11}", "-");
                }
            }
        }
        out.push('\n');
        let _ = writeln!(
            out,
            "objects: {} matched, {} false positive, {} false negative; keypoints: {} matched, {} unmatched",
            self.matched_objects, self.false_positives, self.false_negatives, self.matched_keypoints, self.unmatched_keypoints
        );
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub gate: MatchGate,
    pub penalty: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            gate: MatchGate::default(),
            penalty: PEM_PENALTY,
        }
    }
}

/// Pooled report over scenes paired by id.
pub fn report(gt_scenes: &[Scene], pred_scenes: &[Scene], config: &MetricConfig) -> Result<EvalReport> {
    if !(config.penalty >= 0.0) {
        return Err(Error::Config("PEM penalty must be >= 0".into()));
    }
    let preds: BTreeMap<&str, &Scene> = pred_scenes.iter().map(|s| (s.id.as_str(), s)).collect();
    let gts: BTreeSet<&str> = gt_scenes.iter().map(|s| s.id.as_str()).collect();
    let missing_pred: Vec<&str> = gt_scenes.iter().map(|s| s.id.as_str()).filter(|id| !preds.contains_key(id)).collect();
    let missing_gt: Vec<&str> = pred_scenes.iter().map(|s| s.id.as_str()).filter(|id| !gts.contains(id)).collect();
    if !missing_pred.is_empty() || !missing_gt.is_empty() {
        return Err(Error::NotFound(format!(
            "scene ids do not align; missing predictions: {missing_pred:?}; missing ground truth: {missing_gt:?}"
        )));
    }
    let mut total = MetricSums::default();
    for g in gt_scenes {
        let p = preds[g.id.as_str()];
        let m = match_objects(&g.boxes, &p.boxes, config.gate);
        total.add(&scene_sums(&g.keypoints, &p.keypoints, &m));
    }
    Ok(EvalReport::from_sums(&total, config.penalty, gt_scenes.len()))
}
