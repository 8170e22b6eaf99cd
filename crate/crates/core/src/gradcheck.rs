//! Analytic against central-difference gradients for every parameter group.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::Scene;
use crate::kptr::KptrModel;
use crate::num::Real;
use crate::objectives::ObjectiveConfig;
use crate::params::{group_of, ParamStore};
use crate::synth::{generate_scenes, GenConfig, SkeletonTemplate};
use crate::train::{batch_gradients, make_item, TrainItem};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub scalars: usize,
    pub max_abs_error: f64,
    /// Largest gradient magnitude in the group (analytic or numeric).
    pub scale: f64,
    /// `max_abs_error / scale`.
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub precision: String,
    pub step: f64,
    pub loss: f64,
    pub groups: Vec<GroupCheck>,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "gradcheck ({}, h = {:e}, loss = {:.6})\n{:<16}{:>8}{:>14}{:>14}{:>12}\n",
            self.precision, self.step, self.loss, "group", "scalars", "max |diff|", "max |grad|", "rel"
        );
        for g in &self.groups {
            s += &format!(
                "{:<16}{:>8}{:>14.3e}{:>14.3e}{:>12.3e}\n",
                g.group, g.scalars, g.max_abs_error, g.scale, g.rel_error
            );
        }
        s += &format!("max relative error {:.3e}\n", self.max_rel_error);
        s
    }
}

/// One synthetic box with its supervision.
pub fn synthetic_item(config: &ModelConfig, objective: &ObjectiveConfig, seed: u64) -> Result<TrainItem> {
    let gen = GenConfig {
        seed,
        humans_per_scene: (1, 1),
        ..Default::default()
    };
    let scenes: Vec<Scene> = generate_scenes(&gen, &SkeletonTemplate::default(), 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in &scenes {
        if let (Some(b), Some(Some(k))) = (s.boxes.first(), s.keypoints.first()) {
            if let Some(item) = make_item(s, b, k, config, objective, &mut rng)? {
                return Ok(item);
            }
        }
    }
    Err(Error::Generation("no usable synthetic box".into()))
}

fn loss_f64(model: &KptrModel<f64>, item: &TrainItem, objective: &ObjectiveConfig) -> Result<f64> {
    let (b, _) = batch_gradients(model, &[item], objective, &|_| false)?;
    Ok(b.total)
}

/// Analytic gradients in `T` against central differences of the loss
/// evaluated in 64-bit with the same parameters. Every scalar of every
/// parameter is perturbed.
pub fn gradcheck<T: Real>(model: &KptrModel<T>, item: &TrainItem, objective: &ObjectiveConfig, step: f64) -> Result<GradcheckReport> {
    let (breakdown, grads) = batch_gradients(model, &[item], objective, &|_| true)?;
    let mut probe: KptrModel<f64> = model.cast();
    let base: ParamStore<f64> = probe.store.clone();
    let mut groups: Vec<GroupCheck> = Vec::new();
    for (pi, (id, param)) in base.iter().enumerate() {
        // Logical (row-major) order regardless of the gradient's layout.
        let analytic: Vec<f64> = match &grads[pi] {
            Some(g) => g.iter().map(|x| x.to_f64_lossy()).collect(),
            None => vec![0.0; param.value.len()],
        };
        let group = group_of(&param.name);
        if groups.last().is_none_or(|g| g.group != group) {
            groups.push(GroupCheck {
                group: group.clone(),
                scalars: 0,
                max_abs_error: 0.0,
                scale: 0.0,
                rel_error: 0.0,
            });
        }
        let entry = groups.last_mut().unwrap();
        for (k, &a) in analytic.iter().enumerate() {
            let orig = param.value.as_slice().unwrap()[k];
            let mut eval = |v: f64| -> Result<f64> {
                probe.store.get_mut(id).value.as_slice_mut().unwrap()[k] = v;
                loss_f64(&probe, item, objective)
            };
            let plus = eval(orig + step)?;
            let minus = eval(orig - step)?;
            eval(orig)?;
            let numeric = (plus - minus) / (2.0 * step);
            entry.scalars += 1;
            entry.max_abs_error = entry.max_abs_error.max((a - numeric).abs());
            entry.scale = entry.scale.max(a.abs()).max(numeric.abs());
        }
    }
    for g in &mut groups {
        g.rel_error = if g.scale > 0.0 { g.max_abs_error / g.scale } else { g.max_abs_error };
    }
    let max_rel_error = groups.iter().map(|g| g.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        precision: T::NAME.to_string(),
        step,
        loss: breakdown.total,
        groups,
        max_rel_error,
    })
}

/// Tiny-config check from a seed. Differences are always taken in 64-bit,
/// so the step does not depend on `T`.
pub fn run_gradcheck<T: Real>(seed: u64) -> Result<GradcheckReport> {
    let config = ModelConfig::tiny();
    let objective = ObjectiveConfig::default();
    let model = KptrModel::<T>::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let item = synthetic_item(&config, &objective, seed)?;
    gradcheck(&model, &item, &objective, 1e-6)
}
