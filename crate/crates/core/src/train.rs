//! Training loop, evaluation and prediction.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::{prepare_box, BoxInput};
use crate::checkpoint::save_checkpoint;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{global_augment, normalize_yaw, AugmentParams, AugmentRanges, Box3D, KeypointSet, KeypointState, Scene};
use crate::graph::Graph;
use crate::kptr::{decode, ForwardOptions, KptrModel, PosePrediction};
use crate::metrics::{report, EvalReport, MetricConfig};
use crate::num::Real;
use crate::objectives::{batch_losses, total_loss, BoxTargets, LossBreakdown, ObjectiveConfig};
use crate::optim::{AdamW, AdamWConfig, OneCycle};
use crate::params::Bound;

/// Boxes the network is trained on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxSource {
    /// Ground-truth boxes.
    #[default]
    Gt,
    /// Perturbed copies of ground-truth boxes, emulating detector output.
    Jittered,
    /// Ground-truth boxes plus jittered copies.
    Mixed,
}

impl FromStr for BoxSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(BoxSource::Gt),
            "jittered" => Ok(BoxSource::Jittered),
            "mixed" => Ok(BoxSource::Mixed),
            other => Err(Error::Config(format!(
                "unknown box source `{other}` (expected gt, jittered or mixed)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JitterConfig {
    /// Uniform center offset per axis, meters.
    pub center: f64,
    /// Relative uniform change of each dimension.
    pub dims: f64,
    pub yaw_degrees: f64,
    /// Jittered copies per ground-truth box.
    pub copies: usize,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            center: 0.1,
            dims: 0.05,
            yaw_degrees: 5.0,
            copies: 2,
        }
    }
}

pub fn jitter_box<R: Rng + ?Sized>(b: &Box3D, j: &JitterConfig, rng: &mut R) -> Box3D {
    let mut u = |a: f64| if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
    let mut out = *b;
    for k in 0..3 {
        out.center[k] += u(j.center);
    }
    for k in 0..3 {
        out.dims[k] *= 1.0 + u(j.dims);
    }
    out.yaw = normalize_yaw(out.yaw + u(j.yaw_degrees.to_radians()));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub epochs: usize,
    /// Boxes per optimizer step.
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    /// First-moment coefficient range `[min, max]`.
    pub momentum: [f64; 2],
    pub warmup_frac: f64,
    pub seed: u64,
    pub box_source: BoxSource,
    pub jitter: JitterConfig,
    pub augment: bool,
    pub augment_ranges: AugmentRanges,
    pub freeze_stage1: bool,
    /// Stop after this many steps; the schedule is sized to match.
    pub max_steps: Option<usize>,
    pub vis_threshold: f64,
    pub metrics: MetricConfig,
    /// Evaluate on the validation set every this many epochs (and always
    /// after the last one).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn full() -> Self {
        TrainConfig {
            model: ModelConfig::full(),
            batch_size: 16,
            ..Self::desk()
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            objective: ObjectiveConfig::default(),
            epochs: 20,
            batch_size: 8,
            max_lr: 3e-3,
            weight_decay: 0.01,
            momentum: [0.85, 0.95],
            warmup_frac: 0.3,
            seed: 0,
            box_source: BoxSource::Gt,
            jitter: JitterConfig::default(),
            augment: true,
            augment_ranges: AugmentRanges::default(),
            freeze_stage1: false,
            max_steps: None,
            vis_threshold: crate::kptr::DEFAULT_VIS_THRESHOLD,
            metrics: MetricConfig::default(),
            eval_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.max_lr > 0.0) || !self.max_lr.is_finite() {
            return bad("max_lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        let [lo, hi] = self.momentum;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return bad("momentum must satisfy 0 <= min <= max < 1");
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must be in [0, 1)");
        }
        if !(self.vis_threshold > 0.0 && self.vis_threshold < 1.0) {
            return bad("vis_threshold must be in (0, 1)");
        }
        if self.objective.k == 0 {
            return bad("objective.k must be positive");
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        Ok(())
    }

    /// Parameters updated by the optimizer.
    pub fn trainable(&self) -> impl Fn(&str) -> bool + '_ {
        move |name: &str| !(self.freeze_stage1 && name.starts_with("stage1."))
    }
}

/// One supervised box.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub input: BoxInput,
    pub targets: BoxTargets,
}

/// Builds the supervision for `b`; `None` for boxes without points or
/// without annotated keypoints.
pub fn make_item<R: Rng + ?Sized>(
    scene: &Scene,
    b: &Box3D,
    keypoints: &KeypointSet,
    model: &ModelConfig,
    objective: &ObjectiveConfig,
    rng: &mut R,
) -> Result<Option<TrainItem>> {
    if keypoints.annotated_count() == 0 {
        return Ok(None);
    }
    let input = prepare_box(&scene.points, b, model, rng)?;
    if input.sample.is_empty() {
        return Ok(None);
    }
    let local = keypoints.positions.map(|p| b.to_local(p));
    let targets = BoxTargets::new(&input.sample, &local, &keypoints.states, objective);
    Ok(Some(TrainItem { input, targets }))
}

/// All training boxes of one pass over `scenes`, with augmentation and the
/// configured box source applied.
pub fn epoch_items<R: Rng + ?Sized>(scenes: &[Scene], config: &TrainConfig, rng: &mut R) -> Result<Vec<TrainItem>> {
    let mut items = Vec::new();
    for scene in scenes {
        let scene = if config.augment {
            global_augment(scene, &AugmentParams::sample(&config.augment_ranges, rng))?
        } else {
            scene.clone()
        };
        for (b, k) in scene.boxes.iter().zip(&scene.keypoints) {
            let Some(k) = k else { continue };
            let mut boxes = Vec::new();
            if config.box_source != BoxSource::Jittered {
                boxes.push(*b);
            }
            if config.box_source != BoxSource::Gt {
                for _ in 0..config.jitter.copies {
                    boxes.push(jitter_box(b, &config.jitter, rng));
                }
            }
            for bb in &boxes {
                if let Some(item) = make_item(&scene, bb, k, &config.model, &config.objective, rng)? {
                    items.push(item);
                }
            }
        }
    }
    Ok(items)
}

/// Forward and backward over one batch; returns the loss breakdown and the
/// gradient of every parameter (`None` for frozen ones).
pub fn batch_gradients<T: Real>(
    model: &KptrModel<T>,
    items: &[&TrainItem],
    objective: &ObjectiveConfig,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<(LossBreakdown, Vec<Option<Array2<T>>>)> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &model.store, trainable);
    let outputs = items
        .iter()
        .map(|it| model.forward(&mut g, &p, &it.input, ForwardOptions::default()))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<BoxTargets> = items.iter().map(|it| it.targets.clone()).collect();
    let losses = batch_losses(&mut g, &outputs, &targets);
    let (total, breakdown) = total_loss(&mut g, &losses, &targets, objective)?;
    let mut grads = g.backward(total);
    let out: Vec<Option<Array2<T>>> = p.vars().iter().map(|v| grads.take(*v)).collect();
    for ((_, param), grad) in model.store.iter().zip(&out) {
        if let Some(gr) = grad {
            if gr.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", param.name)));
            }
        }
    }
    Ok((breakdown, out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub items: usize,
    pub mean_loss: f64,
    pub val: Option<EvalReport>,
}

/// Where a run writes its files.
#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub steps: PathBuf,
    pub epochs: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub loss_plot: PathBuf,
}

impl RunArtifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        let dir = dir.into();
        RunArtifacts {
            config: dir.join("config.json"),
            steps: dir.join("steps.jsonl"),
            epochs: dir.join("epochs.jsonl"),
            last_checkpoint: dir.join("last.ckpt"),
            best_checkpoint: dir.join("best.ckpt"),
            loss_plot: dir.join("loss.svg"),
            dir,
        }
    }
}

pub struct TrainOutcome {
    pub model: KptrModel<f32>,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub best_val_pem: Option<f64>,
}

struct RunFiles {
    paths: RunArtifacts,
    steps: BufWriter<File>,
    epochs: BufWriter<File>,
}

impl RunFiles {
    fn create(paths: RunArtifacts, config: &TrainConfig) -> Result<Self> {
        std::fs::create_dir_all(&paths.dir).map_err(|e| Error::io(&paths.dir, e))?;
        let json = serde_json::to_string_pretty(config)?;
        std::fs::write(&paths.config, json).map_err(|e| Error::io(&paths.config, e))?;
        let open = |p: &Path| File::create(p).map(BufWriter::new).map_err(|e| Error::io(p, e));
        Ok(RunFiles {
            steps: open(&paths.steps)?,
            epochs: open(&paths.epochs)?,
            paths,
        })
    }

    fn line(w: &mut BufWriter<File>, path: &Path, value: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut *w, value)?;
        w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }
}

/// Trains a single-precision model. With `out` set, writes the run
/// directory; on a numerical failure the last good parameters are saved
/// before the error is returned.
pub fn train(config: &TrainConfig, train_scenes: &[Scene], val_scenes: &[Scene], out: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    if train_scenes.is_empty() {
        return Err(Error::NotFound("training scenes".into()));
    }
    let mut files = out.map(|d| RunFiles::create(RunArtifacts::new(d), config)).transpose()?;
    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(config.seed);
        r.set_stream(s);
        r
    };
    let mut init_rng = stream(0);
    let mut data_rng = stream(1);
    let mut model = KptrModel::<f32>::new(config.model.clone(), &mut init_rng)?;
    let trainable = config.trainable();

    let first = epoch_items(train_scenes, config, &mut data_rng)?;
    if first.is_empty() {
        return Err(Error::NotFound("training boxes with points and annotated keypoints".into()));
    }
    let steps_per_epoch = first.len().div_ceil(config.batch_size);
    let mut total_steps = steps_per_epoch * config.epochs;
    if let Some(m) = config.max_steps {
        total_steps = total_steps.min(m);
    }
    let schedule = OneCycle {
        max_lr: config.max_lr,
        total_steps,
        warmup_frac: config.warmup_frac,
        momentum_min: config.momentum[0],
        momentum_max: config.momentum[1],
        ..Default::default()
    };
    let mut opt = AdamW::<f32>::new(
        AdamWConfig {
            weight_decay: config.weight_decay,
            ..Default::default()
        },
        model.store.len(),
    );

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<f64> = None;
    let mut items = first;
    let mut step = 0;
    'epochs: for epoch in 0..config.epochs {
        if epoch > 0 {
            items = epoch_items(train_scenes, config, &mut data_rng)?;
        }
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut data_rng);
        let mut loss_sum = 0.0;
        let mut epoch_steps = 0;
        for chunk in order.chunks(config.batch_size) {
            if step >= total_steps {
                break;
            }
            let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
            let (loss, grads) = match batch_gradients(&model, &batch, &config.objective, &trainable) {
                Ok(v) => v,
                Err(e @ Error::NonFinite(_)) => {
                    if let Some(f) = &files {
                        save_checkpoint(
                            &f.paths.last_checkpoint,
                            &model,
                            serde_json::json!({"epoch": epoch, "step": step, "seed": config.seed, "aborted": e.to_string()}),
                        )?;
                    }
                    log::error!("aborting at step {step}: {e}");
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let lr = schedule.lr(step);
            let momentum = schedule.momentum(step);
            opt.step(&mut model.store, &grads, lr, momentum);
            let entry = StepLog {
                step,
                epoch,
                lr,
                momentum,
                loss,
            };
            if let Some(f) = &mut files {
                RunFiles::line(&mut f.steps, &f.paths.steps, &entry)?;
            }
            loss_sum += loss.total;
            epoch_steps += 1;
            steps.push(entry);
            step += 1;
        }
        let last_epoch = epoch + 1 == config.epochs || step >= total_steps;
        let val = if !val_scenes.is_empty() && ((epoch + 1) % config.eval_every == 0 || last_epoch) {
            Some(evaluate(&model, val_scenes, config.vis_threshold, &config.metrics)?.report)
        } else {
            None
        };
        let mean_loss = loss_sum / epoch_steps.max(1) as f64;
        log::info!(
            "epoch {epoch}: {epoch_steps} steps, mean loss {mean_loss:.5}{}",
            val.as_ref()
                .map(|v| format!(", val PEM {:.4}, MPJPE {:?}", v.pem, v.mpjpe))
                .unwrap_or_default()
        );
        let entry = EpochLog {
            epoch,
            steps: epoch_steps,
            items: items.len(),
            mean_loss,
            val,
        };
        if let Some(f) = &mut files {
            RunFiles::line(&mut f.epochs, &f.paths.epochs, &entry)?;
            let meta = serde_json::json!({"epoch": epoch, "step": step, "seed": config.seed});
            save_checkpoint(&f.paths.last_checkpoint, &model, meta.clone())?;
            if let Some(v) = &entry.val {
                if best.is_none_or(|b| v.pem < b) {
                    save_checkpoint(&f.paths.best_checkpoint, &model, meta)?;
                }
            }
        }
        if let Some(v) = &entry.val {
            if best.is_none_or(|b| v.pem < b) {
                best = Some(v.pem);
            }
        }
        epochs.push(entry);
        if last_epoch {
            break 'epochs;
        }
    }
    if let Some(f) = &files {
        let curve: Vec<(f64, f64)> = steps.iter().map(|s| (s.step as f64, s.loss.total)).collect();
        crate::plot::write_loss_plot(&f.paths.loss_plot, &curve)?;
    }
    Ok(TrainOutcome {
        model,
        steps,
        epochs,
        best_val_pem: best,
    })
}

/// Per-scene random stream used for point subsampling at inference.
fn scene_rng(scene_index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(0x5eed);
    r.set_stream(scene_index as u64);
    r
}

/// Runs the model on every box of `scene`; the output scene carries the
/// same boxes with predicted keypoints and no points.
pub fn predict_scene<T: Real>(model: &KptrModel<T>, scene: &Scene, scene_index: usize, threshold: f64) -> Result<Scene> {
    let mut rng = scene_rng(scene_index);
    let keypoints = scene
        .boxes
        .iter()
        .map(|b| {
            let input = prepare_box(&scene.points, b, &model.config, &mut rng)?;
            let pred = model.predict(&input)?;
            Ok(Some(decode(&pred, b, threshold)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        id: scene.id.clone(),
        points: Vec::new(),
        boxes: scene.boxes.clone(),
        keypoints,
    })
}

pub fn predict_scenes<T: Real>(model: &KptrModel<T>, scenes: &[Scene], threshold: f64) -> Result<Vec<Scene>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| predict_scene(model, s, i, threshold))
        .collect()
}

/// Evaluation result plus visibility accuracy on annotated keypoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: EvalReport,
    pub visibility_accuracy: Option<f64>,
}

/// Fraction of annotated keypoints whose predicted flag agrees with the
/// ground-truth state, pairing boxes by position in each scene.
pub fn visibility_accuracy(gt: &[Scene], pred: &[Scene]) -> Option<f64> {
    let mut right = 0usize;
    let mut total = 0usize;
    for (g, p) in gt.iter().zip(pred) {
        for (gk, pk) in g.keypoints.iter().zip(&p.keypoints) {
            let (Some(gk), Some(pk)) = (gk, pk) else { continue };
            for i in 0..gk.states.len() {
                if gk.states[i].is_annotated() {
                    total += 1;
                    let want = gk.states[i] == KeypointState::Visible;
                    let got = pk.states[i] == KeypointState::Visible;
                    right += usize::from(want == got);
                }
            }
        }
    }
    (total > 0).then(|| right as f64 / total as f64)
}

/// Predicts on the scenes' own boxes and scores the result.
pub fn evaluate<T: Real>(model: &KptrModel<T>, scenes: &[Scene], threshold: f64, metrics: &MetricConfig) -> Result<Evaluation> {
    let pred = predict_scenes(model, scenes, threshold)?;
    Ok(Evaluation {
        report: report(scenes, &pred, metrics)?,
        visibility_accuracy: visibility_accuracy(scenes, &pred),
    })
}

/// Prediction for a box without any points.
pub fn empty_box_prediction(b: &Box3D, n_max: usize) -> KeypointSet {
    decode(&PosePrediction::empty(n_max), b, 0.5)
}
