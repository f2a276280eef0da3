//! Scene metrics: contact-support IoU, motion / boundary collision ratios,
//! object collision rate and category KL divergence, plus the report
//! structure emitted by the evaluation tool.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::iou3d;
use crate::guidance::{boundary_violation, motion_collision, ScoreMode};
use crate::scene::{ConditionSet, ObjectInstance, Scene, SceneConfig};

/// Pairwise-overlap threshold below which contact counts as grazing, not
/// collision.
pub const COLLISION_TAU: f64 = 0.01;
/// Additive smoothing used by the category KL divergence.
pub const CKL_SMOOTHING: f64 = 1e-6;

/// Mean over contact boxes of the best 3D IoU any generated object reaches.
/// Matching is category-agnostic unless `category_constrained` is set.
pub fn iou_contact(
    scene: &Scene,
    cond: &ConditionSet,
    cfg: &SceneConfig,
    category_constrained: bool,
) -> Result<f64> {
    let contacts: Vec<_> = cond.contacts.iter().flatten().collect();
    if contacts.is_empty() {
        return Err(Error::Contract("iou_contact needs >= 1 contact box".into()));
    }
    let mut total = 0.0;
    for cb in &contacts {
        let cb_obj = cb.as_object();
        let mut best = 0.0f64;
        for obj in scene.non_empty(cfg) {
            if category_constrained && obj.category != cb.intended_category {
                continue;
            }
            best = best.max(iou3d(&cb_obj, obj)?);
        }
        total += best;
    }
    Ok(total / contacts.len() as f64)
}

/// Hard motion-collision score clamped to [0, 1].
pub fn col_mot(scene: &Scene, cond: &ConditionSet, cfg: &SceneConfig) -> Result<f64> {
    Ok(motion_collision(scene, &cond.free_space, ScoreMode::Hard, cfg)?.clamp(0.0, 1.0))
}

/// Hard boundary-violation score clamped to [0, 1].
pub fn r_out(scene: &Scene, cond: &ConditionSet, cfg: &SceneConfig) -> Result<f64> {
    Ok(boundary_violation(scene, &cond.floor, ScoreMode::Hard, cfg)?.clamp(0.0, 1.0))
}

/// Fraction of non-EMPTY objects colliding with some other object, where
/// colliding means pairwise 3D IoU above `COLLISION_TAU`.
pub fn col_obj(scene: &Scene, cfg: &SceneConfig) -> Result<f64> {
    let objs: Vec<&ObjectInstance> = scene.non_empty(cfg).collect();
    if objs.is_empty() {
        return Ok(0.0);
    }
    let mut colliding = vec![false; objs.len()];
    for i in 0..objs.len() {
        for j in (i + 1)..objs.len() {
            if iou3d(objs[i], objs[j])? > COLLISION_TAU {
                colliding[i] = true;
                colliding[j] = true;
            }
        }
    }
    Ok(colliding.iter().filter(|&&c| c).count() as f64 / objs.len() as f64)
}

fn category_distribution(scenes: &[Scene], cfg: &SceneConfig) -> Vec<f64> {
    let k = cfg.num_categories();
    let mut counts = vec![0.0f64; k];
    for scene in scenes {
        for obj in scene.non_empty(cfg) {
            counts[obj.category] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum::<f64>() + k as f64 * CKL_SMOOTHING;
    counts
        .iter()
        .map(|c| (c + CKL_SMOOTHING) / total)
        .collect()
}

/// KL(p_generated || p_reference) over non-EMPTY category frequencies with
/// additive smoothing on both sides.
pub fn ckl(generated: &[Scene], reference: &[Scene], cfg: &SceneConfig) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Contract("ckl needs non-empty scene sets".into()));
    }
    let p = category_distribution(generated, cfg);
    let q = category_distribution(reference, cfg);
    Ok(p.iter()
        .zip(&q)
        .map(|(&pi, &qi)| if pi > 0.0 { pi * (pi / qi).ln() } else { 0.0 })
        .sum::<f64>()
        .max(0.0))
}

/// Per-scene metric values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub iou_contact: f64,
    pub col_mot: f64,
    pub r_out: f64,
    pub col_obj: f64,
}

/// Whole-run report: per-scene rows, their means and the corpus-level
/// category divergence. Col_mot and Col_obj follow our operational
/// definitions; the source formulas are not public.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_scene: Vec<SceneMetrics>,
    pub mean_iou_contact: f64,
    pub mean_col_mot: f64,
    pub mean_r_out: f64,
    pub mean_col_obj: f64,
    pub ckl: f64,
    pub collision_tau: f64,
    pub category_constrained: bool,
    pub seed: Option<u64>,
}

impl MetricsReport {
    /// Fixed-width text table for terminal output.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str("scene  iou_contact  col_mot  r_out  col_obj\n");
        for (i, m) in self.per_scene.iter().enumerate() {
            s.push_str(&format!(
                "{:>5}  {:>11.4}  {:>7.4}  {:>5.4}  {:>7.4}\n",
                i, m.iou_contact, m.col_mot, m.r_out, m.col_obj
            ));
        }
        s.push_str(&format!(
            " mean  {:>11.4}  {:>7.4}  {:>5.4}  {:>7.4}\n",
            self.mean_iou_contact, self.mean_col_mot, self.mean_r_out, self.mean_col_obj
        ));
        s.push_str(&format!("ckl    {:.6}\n", self.ckl));
        s
    }
}

/// Evaluate generated scenes against their conditions and a reference set.
pub fn evaluate(
    generated: &[(Scene, ConditionSet)],
    reference: &[Scene],
    cfg: &SceneConfig,
    category_constrained: bool,
    seed: Option<u64>,
) -> Result<MetricsReport> {
    if generated.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    let per_scene: Vec<Result<SceneMetrics>> = generated
        .par_iter()
        .map(|(scene, cond)| {
            Ok(SceneMetrics {
                iou_contact: iou_contact(scene, cond, cfg, category_constrained)?,
                col_mot: col_mot(scene, cond, cfg)?,
                r_out: r_out(scene, cond, cfg)?,
                col_obj: col_obj(scene, cfg)?,
            })
        })
        .collect();
    let per_scene = per_scene.into_iter().collect::<Result<Vec<_>>>()?;
    let n = per_scene.len() as f64;
    let gen_scenes: Vec<Scene> = generated.iter().map(|(s, _)| s.clone()).collect();
    Ok(MetricsReport {
        mean_iou_contact: per_scene.iter().map(|m| m.iou_contact).sum::<f64>() / n,
        mean_col_mot: per_scene.iter().map(|m| m.col_mot).sum::<f64>() / n,
        mean_r_out: per_scene.iter().map(|m| m.r_out).sum::<f64>() / n,
        mean_col_obj: per_scene.iter().map(|m| m.col_obj).sum::<f64>() / n,
        ckl: ckl(&gen_scenes, reference, cfg)?,
        per_scene,
        collision_tau: COLLISION_TAU,
        category_constrained,
        seed,
    })
}
