//! Ancestral sampling with an optional collision-guidance hook on the
//! clean-scene estimate.

use ndarray::Array2;
use rand::Rng;

use super::model::{Denoiser, EncodedCondition};
use super::schedule::{normal_matrix, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::guidance::{guide_x0, GuidanceConfig};
use crate::scene::{decode_scene, ConditionSet, NormalizationStats, Scene, SceneConfig, SceneTensor};

/// One reverse step. Without `perturbed_x0` the mean is the direct
/// epsilon-parameterized reverse mean; with it the mean is the forward
/// posterior evaluated at the perturbed clean estimate.
pub fn ddpm_step(
    xt: &SceneTensor,
    t: usize,
    eps_hat: &Array2<f64>,
    sched: &DiffusionSchedule,
    perturbed_x0: Option<&SceneTensor>,
    rng: &mut impl Rng,
) -> Result<SceneTensor> {
    let mean = match perturbed_x0 {
        None => sched.eps_mean(xt, t, eps_hat)?,
        Some(x0) => sched.posterior_mean(x0, xt, t)?,
    };
    sched.step_from_mean(mean, t, rng)
}

/// Draw one scene tensor by running the full reverse chain from Gaussian
/// noise. `guidance` of `None` samples unguided.
pub fn sample_tensor(
    model: &Denoiser,
    cond: &ConditionSet,
    norm: &NormalizationStats,
    scene_cfg: &SceneConfig,
    sched: &DiffusionSchedule,
    guidance: Option<&GuidanceConfig>,
    rng: &mut impl Rng,
) -> Result<SceneTensor> {
    let enc = EncodedCondition::from_condition(cond, norm, scene_cfg, model.cfg.layout_point_count)?;
    let cache = model.precompute_condition(&enc)?;
    let n = scene_cfg.capacity;
    let d = scene_cfg.feature_dim();
    let mut xt = SceneTensor {
        values: normal_matrix(rng, n, d),
    };
    for t in (1..=sched.steps).rev() {
        let eps_hat = model.denoise_cached(&xt.values, t, &cache)?;
        let perturbed = match guidance {
            Some(g) if g.gamma > 0.0 => {
                let x0_hat = sched.predict_x0(&xt, t, &eps_hat)?;
                Some(guide_x0(&x0_hat, cond, g, norm, scene_cfg)?)
            }
            _ => None,
        };
        xt = ddpm_step(&xt, t, &eps_hat, sched, perturbed.as_ref(), rng)?;
        if xt.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!(
                "non-finite state after reverse step {t}"
            )));
        }
    }
    Ok(xt)
}

/// Sample and decode to a scene. Contact rows stay paired with the
/// conditioning contact boxes by position.
pub fn sample_scene(
    model: &Denoiser,
    cond: &ConditionSet,
    norm: &NormalizationStats,
    scene_cfg: &SceneConfig,
    sched: &DiffusionSchedule,
    guidance: Option<&GuidanceConfig>,
    rng: &mut impl Rng,
) -> Result<Scene> {
    let x0 = sample_tensor(model, cond, norm, scene_cfg, sched, guidance, rng)?;
    decode_scene(&x0, norm, scene_cfg, cond.contact_count())
}

/// Reuse one condition cache across several draws.
pub fn sample_scenes(
    model: &Denoiser,
    cond: &ConditionSet,
    norm: &NormalizationStats,
    scene_cfg: &SceneConfig,
    sched: &DiffusionSchedule,
    guidance: Option<&GuidanceConfig>,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Scene>> {
    (0..count)
        .map(|_| sample_scene(model, cond, norm, scene_cfg, sched, guidance, rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::model::ModelConfig;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    use crate::scene::{NormalizationStats, RoomType, SceneConfig};
    use crate::synthdata::{generate_scene, CorpusSpec};

    fn fixture() -> (
        SceneConfig,
        Denoiser,
        ConditionSet,
        NormalizationStats,
        DiffusionSchedule,
    ) {
        let scene_cfg = SceneConfig::desk_scale(RoomType::Bedroom);
        let spec = CorpusSpec::desk_scale(scene_cfg.clone(), 1, 31);
        let cs = generate_scene(&spec, 311).unwrap();
        let norm = NormalizationStats::from_scenes(std::iter::once(&cs.scene), &scene_cfg);
        let model_cfg = ModelConfig {
            hidden: 32,
            blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            point_hidden: [8, 16],
            layout_point_count: 50,
            ..ModelConfig::desk_scale(&scene_cfg)
        };
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let model = Denoiser::init(model_cfg, &mut rng);
        (
            scene_cfg,
            model,
            cs.cond,
            norm,
            DiffusionSchedule::default_t200(),
        )
    }

    #[test]
    fn step_mean_forms_agree_when_x0_is_unperturbed() {
        let sched = DiffusionSchedule::default_t200();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for t in [1, 2, 57, 200] {
            let xt = SceneTensor {
                values: normal_matrix(&mut rng, 3, 4),
            };
            let eps = normal_matrix(&mut rng, 3, 4);
            let x0 = sched.predict_x0(&xt, t, &eps).unwrap();
            let mut ra = ChaCha12Rng::seed_from_u64(9);
            let mut rb = ChaCha12Rng::seed_from_u64(9);
            let a = ddpm_step(&xt, t, &eps, &sched, None, &mut ra).unwrap();
            let b = ddpm_step(&xt, t, &eps, &sched, Some(&x0), &mut rb).unwrap();
            let err = (&a.values - &b.values)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-9, "step forms differ by {err} at t={t}");
        }
    }

    #[test]
    fn sampled_scene_is_valid_and_deterministic() {
        let (scene_cfg, model, cond, norm, sched) = fixture();
        let mut ra = ChaCha12Rng::seed_from_u64(123);
        let a = sample_scene(&model, &cond, &norm, &scene_cfg, &sched, None, &mut ra).unwrap();
        a.validate(&scene_cfg).unwrap();
        assert_eq!(a.contact_count, cond.contact_count());
        let mut rb = ChaCha12Rng::seed_from_u64(123);
        let b = sample_scene(&model, &cond, &norm, &scene_cfg, &sched, None, &mut rb).unwrap();
        assert_eq!(a, b);
        let mut rc = ChaCha12Rng::seed_from_u64(124);
        let c = sample_scene(&model, &cond, &norm, &scene_cfg, &sched, None, &mut rc).unwrap();
        assert_ne!(a, c, "different seeds should give different scenes");
    }

    #[test]
    fn contact_rows_never_decode_empty() {
        let (scene_cfg, model, cond, norm, sched) = fixture();
        let mut rng = ChaCha12Rng::seed_from_u64(321);
        for _ in 0..5 {
            let s = sample_scene(&model, &cond, &norm, &scene_cfg, &sched, None, &mut rng).unwrap();
            for i in 0..s.contact_count {
                assert!(!s.objects[i].is_empty(&scene_cfg));
            }
        }
    }
}
