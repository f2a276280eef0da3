//! Spatial collision guidance: motion-collision, boundary-violation and
//! object-collision scores (hard variants for metrics, soft differentiable
//! variants for gradients) and the clean-scene perturbation applied during
//! guided sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    footprint_unchecked, iou3d, raster_window, sdf2d, sdf2d_grad, sigmoid, vertical_overlap,
};
use crate::scene::{
    channels, decode_scene, ConditionSet, GridMask, NormalizationStats, ObjectInstance, Scene,
    SceneConfig, SceneTensor, GRID_RES,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Overall guidance strength gamma.
    pub gamma: f64,
    pub weight_motion: f64,
    pub weight_boundary: f64,
    pub weight_object: f64,
    pub enable_motion: bool,
    pub enable_boundary: bool,
    pub enable_object: bool,
    /// Soft-rasterization temperature in meters. Defaults to half a pixel.
    pub tau: f64,
    pub gradient_mode: GradientMode,
    /// Finite-difference step when `gradient_mode` is FiniteDifference.
    pub fd_step: f64,
    /// Guided attribute set; category and size channels stay untouched by
    /// default.
    pub guide_location: bool,
    pub guide_yaw: bool,
    /// Per-channel gradient clip in normalized units.
    pub clip: f64,
}

impl GuidanceConfig {
    pub fn default_for(scene_cfg: &SceneConfig) -> Self {
        GuidanceConfig {
            gamma: 1.0,
            weight_motion: 1.0,
            weight_boundary: 1.0,
            weight_object: 1.0,
            enable_motion: true,
            enable_boundary: true,
            enable_object: true,
            tau: scene_cfg.world_extent_m / GRID_RES as f64 / 2.0,
            gradient_mode: GradientMode::Analytic,
            fd_step: 1e-4,
            guide_location: true,
            guide_yaw: true,
            clip: 0.2,
        }
    }

    pub fn disabled(scene_cfg: &SceneConfig) -> Self {
        GuidanceConfig {
            enable_motion: false,
            enable_boundary: false,
            enable_object: false,
            ..Self::default_for(scene_cfg)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::Config("gamma must be >= 0".into()));
        }
        if self.fd_step <= 0.0 || self.tau <= 0.0 {
            return Err(Error::Config("tau and fd step must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreMode {
    Hard,
    Soft(f64),
}

fn object_mask_sum(obj: &ObjectInstance, mask: &GridMask, mode: ScoreMode) -> f64 {
    let fp = footprint_unchecked(obj);
    let margin = match mode {
        ScoreMode::Hard => mask.pixel_size(),
        ScoreMode::Soft(tau) => 20.0 * tau + mask.pixel_size(),
    };
    let mut acc = 0.0;
    for (row, col) in raster_window(&fp, mask.world_extent, margin) {
        if mask.get(row, col) == 0 {
            continue;
        }
        let (x, z) = mask.pixel_center(row, col);
        acc += match mode {
            ScoreMode::Hard => {
                if fp.contains([x, z]) {
                    1.0
                } else {
                    0.0
                }
            }
            ScoreMode::Soft(tau) => sigmoid(-sdf2d([x, z], obj) / tau),
        };
    }
    acc
}

/// Motion-collision score: ratio of free-space pixels covered by object
/// footprints, summed per object so overlapping objects double-count.
pub fn motion_collision(
    scene: &Scene,
    fs: &GridMask,
    mode: ScoreMode,
    cfg: &SceneConfig,
) -> Result<f64> {
    let denom = fs.count_set();
    if denom == 0 {
        return Err(Error::DegenerateInput(
            "free-space mask is empty; motion score undefined".into(),
        ));
    }
    let mut num = 0.0;
    for obj in scene.non_empty(cfg) {
        num += object_mask_sum(obj, fs, mode);
    }
    Ok(num / denom as f64)
}

/// Boundary-violation score against the complement of the floor plan.
pub fn boundary_violation(
    scene: &Scene,
    floor: &GridMask,
    mode: ScoreMode,
    cfg: &SceneConfig,
) -> Result<f64> {
    let outside = floor.complement();
    let denom = outside.count_set();
    if denom == 0 {
        return Err(Error::DegenerateInput(
            "floor covers the whole extent; boundary score undefined".into(),
        ));
    }
    let mut num = 0.0;
    for obj in scene.non_empty(cfg) {
        num += object_mask_sum(obj, &outside, mode);
    }
    Ok(num / denom as f64)
}

fn soft_intersection_volume(a: &ObjectInstance, b: &ObjectInstance, tau: f64, extent: f64) -> f64 {
    let v = vertical_overlap(a, b);
    if v <= 0.0 {
        return 0.0;
    }
    let grid = GridMask::zeros(extent);
    let px_area = grid.pixel_size() * grid.pixel_size();
    let fa = footprint_unchecked(a);
    let mut area = 0.0;
    for (row, col) in raster_window(&fa, extent, 20.0 * tau + grid.pixel_size()) {
        let (x, z) = grid.pixel_center(row, col);
        let sa = sigmoid(-sdf2d([x, z], a) / tau);
        if sa < 1e-9 {
            continue;
        }
        let sb = sigmoid(-sdf2d([x, z], b) / tau);
        area += sa * sb;
    }
    area * px_area * v
}

/// Object-collision score: sum of 3D IoU over ordered pairs (i != j). Soft
/// mode replaces the footprint intersection area by the soft-raster product
/// sum so the score is differentiable.
pub fn object_collision(scene: &Scene, mode: ScoreMode, cfg: &SceneConfig) -> Result<f64> {
    let objs: Vec<&ObjectInstance> = scene.non_empty(cfg).collect();
    let mut acc = 0.0;
    for i in 0..objs.len() {
        for j in (i + 1)..objs.len() {
            let pair = match mode {
                ScoreMode::Hard => iou3d(objs[i], objs[j])?,
                ScoreMode::Soft(tau) => {
                    let inter =
                        soft_intersection_volume(objs[i], objs[j], tau, cfg.world_extent_m);
                    let union = objs[i].volume() + objs[j].volume() - inter;
                    (inter / union).clamp(0.0, 1.0)
                }
            };
            acc += 2.0 * pair; // ordered-pair double count
        }
    }
    Ok(acc)
}

/// Combined soft objective with the configured term weights; used by the
/// finite-difference gradient path and by line-search style tests.
pub fn soft_objective(scene: &Scene, cond: &ConditionSet, cfg: &GuidanceConfig, scene_cfg: &SceneConfig) -> Result<f64> {
    let mode = ScoreMode::Soft(cfg.tau);
    let mut j = 0.0;
    if cfg.enable_motion {
        j += cfg.weight_motion * motion_collision(scene, &cond.free_space, mode, scene_cfg)?;
    }
    if cfg.enable_boundary {
        j += cfg.weight_boundary * boundary_violation(scene, &cond.floor, mode, scene_cfg)?;
    }
    if cfg.enable_object {
        j += cfg.weight_object * object_collision(scene, mode, scene_cfg)?;
    }
    Ok(j)
}

/// Hard combined objective (unit weights) for before/after comparisons.
pub fn hard_objective(scene: &Scene, cond: &ConditionSet, scene_cfg: &SceneConfig) -> Result<f64> {
    Ok(motion_collision(scene, &cond.free_space, ScoreMode::Hard, scene_cfg)?
        + boundary_violation(scene, &cond.floor, ScoreMode::Hard, scene_cfg)?
        + object_collision(scene, ScoreMode::Hard, scene_cfg)?)
}

/// Per-object gradient of the soft objective with respect to world-space
/// (x, y, z, yaw), aligned with scene rows. EMPTY rows stay zero.
pub fn pose_gradients(
    scene: &Scene,
    cond: &ConditionSet,
    cfg: &GuidanceConfig,
    scene_cfg: &SceneConfig,
) -> Result<Vec<[f64; 4]>> {
    match cfg.gradient_mode {
        GradientMode::Analytic => analytic_pose_gradients(scene, cond, cfg, scene_cfg),
        GradientMode::FiniteDifference => fd_pose_gradients(scene, cond, cfg, scene_cfg),
    }
}

fn analytic_pose_gradients(
    scene: &Scene,
    cond: &ConditionSet,
    cfg: &GuidanceConfig,
    scene_cfg: &SceneConfig,
) -> Result<Vec<[f64; 4]>> {
    let n = scene.objects.len();
    let mut grads = vec![[0.0; 4]; n];
    let tau = cfg.tau;
    let empty = scene_cfg.empty_index();
    let live: Vec<usize> = (0..n)
        .filter(|&i| scene.objects[i].category != empty)
        .collect();

    // Accumulate d(sum_p mask(p) * s_i(p)) / d pose_i for a weight mask.
    let mask_term = |obj: &ObjectInstance, mask: &GridMask, out: &mut [f64; 4], w: f64| {
        let fp = footprint_unchecked(obj);
        for (row, col) in raster_window(&fp, mask.world_extent, 20.0 * tau + mask.pixel_size()) {
            if mask.get(row, col) == 0 {
                continue;
            }
            let (x, z) = mask.pixel_center(row, col);
            let d = sdf2d([x, z], obj);
            let s = sigmoid(-d / tau);
            let coeff = w * s * (1.0 - s) * (-1.0 / tau);
            if coeff.abs() < 1e-14 {
                continue;
            }
            let g = sdf2d_grad([x, z], obj);
            out[0] += coeff * g[0];
            out[2] += coeff * g[1];
            out[3] += coeff * g[2];
        }
    };

    if cfg.enable_motion {
        let denom = cond.free_space.count_set();
        if denom == 0 {
            return Err(Error::DegenerateInput(
                "free-space mask is empty; motion score undefined".into(),
            ));
        }
        let w = cfg.weight_motion / denom as f64;
        for &i in &live {
            mask_term(&scene.objects[i], &cond.free_space, &mut grads[i], w);
        }
    }
    if cfg.enable_boundary {
        let outside = cond.floor.complement();
        let denom = outside.count_set();
        if denom == 0 {
            return Err(Error::DegenerateInput(
                "floor covers the whole extent; boundary score undefined".into(),
            ));
        }
        let w = cfg.weight_boundary / denom as f64;
        for &i in &live {
            mask_term(&scene.objects[i], &outside, &mut grads[i], w);
        }
    }
    if cfg.enable_object {
        let extent = scene_cfg.world_extent_m;
        let grid = GridMask::zeros(extent);
        let px_area = grid.pixel_size() * grid.pixel_size();
        for ai in 0..live.len() {
            for bi in (ai + 1)..live.len() {
                let (i, j) = (live[ai], live[bi]);
                let a = &scene.objects[i];
                let b = &scene.objects[j];
                let v = vertical_overlap(a, b);
                if v <= 0.0 {
                    continue;
                }
                // soft intersection area and its pose gradients
                let fa = footprint_unchecked(a);
                let fb = footprint_unchecked(b);
                let (alo, ahi) = fa.aabb();
                let (blo, bhi) = fb.aabb();
                let margin = 20.0 * tau;
                if alo[0] - margin > bhi[0] + margin
                    || blo[0] - margin > ahi[0] + margin
                    || alo[1] - margin > bhi[1] + margin
                    || blo[1] - margin > ahi[1] + margin
                {
                    continue;
                }
                let mut area = 0.0;
                let mut da = [0.0f64; 3]; // x, z, yaw for object a
                let mut db = [0.0f64; 3];
                for (row, col) in raster_window(&fa, extent, margin + grid.pixel_size()) {
                    let (x, z) = grid.pixel_center(row, col);
                    let sa = sigmoid(-sdf2d([x, z], a) / tau);
                    if sa < 1e-9 {
                        continue;
                    }
                    let sb = sigmoid(-sdf2d([x, z], b) / tau);
                    if sb < 1e-9 {
                        continue;
                    }
                    area += sa * sb;
                    let ga = sdf2d_grad([x, z], a);
                    let gb = sdf2d_grad([x, z], b);
                    let ca = sb * sa * (1.0 - sa) * (-1.0 / tau);
                    let cb = sa * sb * (1.0 - sb) * (-1.0 / tau);
                    for k in 0..3 {
                        da[k] += ca * ga[k];
                        db[k] += cb * gb[k];
                    }
                }
                let inter = area * px_area * v;
                let vol_sum = a.volume() + b.volume();
                let union = vol_sum - inter;
                if union <= 0.0 {
                    continue;
                }
                // IoU = w / (vol_sum - w) with w the soft intersection volume
                let diou_dw = vol_sum / (union * union);
                // ordered-pair double count and term weight
                let w_term = 2.0 * cfg.weight_object * diou_dw;
                let dw_area = px_area * v;
                grads[i][0] += w_term * dw_area * da[0];
                grads[i][2] += w_term * dw_area * da[1];
                grads[i][3] += w_term * dw_area * da[2];
                grads[j][0] += w_term * dw_area * db[0];
                grads[j][2] += w_term * dw_area * db[1];
                grads[j][3] += w_term * dw_area * db[2];
                // vertical overlap contribution through y locations
                let a_top = a.location[1] + a.size[1] / 2.0;
                let b_top = b.location[1] + b.size[1] / 2.0;
                let a_bot = a.location[1] - a.size[1] / 2.0;
                let b_bot = b.location[1] - b.size[1] / 2.0;
                let dv_dya = (if a_top < b_top { 1.0 } else { 0.0 })
                    - (if a_bot > b_bot { 1.0 } else { 0.0 });
                let dw_dv = area * px_area;
                grads[i][1] += w_term * dw_dv * dv_dya;
                grads[j][1] += w_term * dw_dv * (-dv_dya);
            }
        }
    }
    Ok(grads)
}

fn fd_pose_gradients(
    scene: &Scene,
    cond: &ConditionSet,
    cfg: &GuidanceConfig,
    scene_cfg: &SceneConfig,
) -> Result<Vec<[f64; 4]>> {
    let h = cfg.fd_step;
    let empty = scene_cfg.empty_index();
    let mut grads = vec![[0.0; 4]; scene.objects.len()];
    for i in 0..scene.objects.len() {
        if scene.objects[i].category == empty {
            continue;
        }
        for attr in 0..4 {
            let eval = |delta: f64| -> Result<f64> {
                let mut s = scene.clone();
                match attr {
                    0 => s.objects[i].location[0] += delta,
                    1 => s.objects[i].location[1] += delta,
                    2 => s.objects[i].location[2] += delta,
                    _ => s.objects[i].yaw += delta,
                }
                soft_objective(&s, cond, cfg, scene_cfg)
            };
            grads[i][attr] = (eval(h)? - eval(-h)?) / (2.0 * h);
        }
    }
    Ok(grads)
}

/// Perturb the clean-scene estimate down the gradient of the soft objective:
/// `x~0 = x^0 - gamma * g`, with `g` confined to the guided attribute
/// channels and clipped per channel.
pub fn guide_x0(
    x0_hat: &SceneTensor,
    cond: &ConditionSet,
    cfg: &GuidanceConfig,
    norm: &NormalizationStats,
    scene_cfg: &SceneConfig,
) -> Result<SceneTensor> {
    cfg.validate()?;
    let no_terms = !cfg.enable_motion && !cfg.enable_boundary && !cfg.enable_object;
    if cfg.gamma == 0.0 || no_terms {
        return Ok(x0_hat.clone());
    }
    let contact_count = cond.contact_count();
    let scene = decode_scene(x0_hat, norm, scene_cfg, contact_count)?;
    let pose = pose_gradients(&scene, cond, cfg, scene_cfg)?;
    let ch = channels(scene_cfg);
    let mut g = ndarray::Array2::<f64>::zeros(x0_hat.values.dim());
    for (i, pg) in pose.iter().enumerate() {
        if pg.iter().any(|v| !v.is_finite()) {
            let term = if cfg.enable_motion {
                "motion"
            } else if cfg.enable_boundary {
                "boundary"
            } else {
                "object"
            };
            return Err(Error::Guidance { term });
        }
        if cfg.guide_location {
            for axis in 0..3 {
                let scale = (match axis {
                    0 => norm.loc_max[0] - norm.loc_min[0],
                    1 => norm.loc_max[1] - norm.loc_min[1],
                    _ => norm.loc_max[2] - norm.loc_min[2],
                }) / 2.0;
                g[[i, ch.loc.start + axis]] = pg[axis] * scale;
            }
        }
        if cfg.guide_yaw {
            // yaw = atan2(sin_ch, cos_ch)
            let c = x0_hat.values[[i, ch.cos]];
            let s = x0_hat.values[[i, ch.sin]];
            let r2 = (c * c + s * s).max(1e-9);
            g[[i, ch.cos]] = pg[3] * (-s / r2);
            g[[i, ch.sin]] = pg[3] * (c / r2);
        }
    }
    let clip = cfg.clip;
    g.mapv_inplace(|v| v.clamp(-clip, clip));
    Ok(SceneTensor {
        values: &x0_hat.values - &(g * cfg.gamma),
    })
}
