//! Training loop: simplified noise-matching objective, Adam updates and the
//! optional global rotation augmentation.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{Denoiser, EncodedCondition};
use super::schedule::{normal_matrix, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::scene::{
    encode_scene, rotate_condition, rotate_scene, ConditionSet, NormalizationStats, Scene,
    SceneConfig,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub rotation_augment: bool,
    /// Probability of dropping the contact conditioning for a sample.
    /// Defaults to 0; exposed as configuration only.
    pub cond_dropout: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-4,
            batch_size: 16,
            iterations: 1000,
            rotation_augment: true,
            cond_dropout: 0.0,
        }
    }
}

impl TrainingConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be > 0".into()));
        }
        Ok(())
    }
}

/// One training example: a ground-truth scene with its conditioning.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub scene: Scene,
    pub cond: ConditionSet,
}

/// A fully drawn training sample: encoded clean scene, noise, timestep and
/// condition. Draw happens sequentially so batches stay deterministic under
/// parallel evaluation.
struct DrawnSample {
    x0: Array2<f64>,
    eps: Array2<f64>,
    t: usize,
    cond: EncodedCondition,
}

fn draw_sample(
    item: &TrainItem,
    norm: &NormalizationStats,
    scene_cfg: &SceneConfig,
    sched: &DiffusionSchedule,
    cfg: &TrainingConfig,
    n_points: usize,
    rng: &mut impl Rng,
) -> Result<DrawnSample> {
    let (scene, cond);
    let rotated;
    if cfg.rotation_augment {
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        rotated = (
            rotate_scene(&item.scene, theta, scene_cfg),
            rotate_condition(&item.cond, theta),
        );
        scene = &rotated.0;
        cond = &rotated.1;
    } else {
        scene = &item.scene;
        cond = &item.cond;
    }
    let x0 = encode_scene(scene, norm, scene_cfg)?.values;
    let t = rng.gen_range(1..=sched.steps);
    let eps = normal_matrix(rng, x0.nrows(), x0.ncols());
    let mut enc = EncodedCondition::from_condition(cond, norm, scene_cfg, n_points)?;
    if cfg.cond_dropout > 0.0 && rng.gen::<f64>() < cfg.cond_dropout {
        enc.contact_mask.iter_mut().for_each(|m| *m = false);
        enc.contact_rows.fill(0.0);
    }
    Ok(DrawnSample { x0, eps, t, cond: enc })
}

/// Mean of `||eps - eps_hat||^2` over a batch with `t ~ U{1..T}` and fresh
/// Gaussian noise. Pure evaluation; no parameter update.
pub fn training_loss(
    model: &Denoiser,
    batch: &[TrainItem],
    norm: &NormalizationStats,
    scene_cfg: &SceneConfig,
    sched: &DiffusionSchedule,
    cfg: &TrainingConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let drawn: Vec<DrawnSample> = batch
        .iter()
        .map(|it| {
            draw_sample(
                it,
                norm,
                scene_cfg,
                sched,
                cfg,
                model.cfg.layout_point_count,
                rng,
            )
        })
        .collect::<Result<_>>()?;
    let losses: Vec<Result<f64>> = drawn
        .par_iter()
        .map(|s| {
            let xt = sched
                .q_sample(&crate::scene::SceneTensor { values: s.x0.clone() }, s.t, &s.eps)?;
            let pred = model.denoise(&xt.values, s.t, &s.cond)?;
            Ok((&pred - &s.eps).iter().map(|d| d * d).sum::<f64>())
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / batch.len() as f64)
}

/// Adam optimizer state, one slot per parameter tensor. No weight decay.
pub struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(model: &Denoiser) -> Self {
        Adam {
            m: model.params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: model.params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn update(&mut self, model: &mut Denoiser, grads: &[Array2<f64>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in model
            .params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + self.eps);
                });
        }
    }
}

/// Run the training loop, returning the per-iteration batch losses.
/// Gradients of a batch are averaged in index order so results are
/// deterministic regardless of thread count.
pub fn train(
    model: &mut Denoiser,
    items: &[TrainItem],
    norm: &NormalizationStats,
    scene_cfg: &SceneConfig,
    sched: &DiffusionSchedule,
    cfg: &TrainingConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Contract("no training items".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut adam = Adam::new(model);
    let mut history = Vec::with_capacity(cfg.iterations);
    let n_points = model.cfg.layout_point_count;
    for _iter in 0..cfg.iterations {
        let drawn: Vec<DrawnSample> = (0..cfg.batch_size)
            .map(|_| {
                let idx = rng.gen_range(0..items.len());
                draw_sample(&items[idx], norm, scene_cfg, sched, cfg, n_points, &mut rng)
            })
            .collect::<Result<_>>()?;
        let per_sample: Vec<Result<(f64, Vec<Array2<f64>>)>> = drawn
            .par_iter()
            .map(|s| {
                let xt = sched.q_sample(
                    &crate::scene::SceneTensor { values: s.x0.clone() },
                    s.t,
                    &s.eps,
                )?;
                model.loss_and_grads(&xt.values, s.t, &s.cond, &s.eps)
            })
            .collect();
        let mut total_loss = 0.0;
        let mut grads: Option<Vec<Array2<f64>>> = None;
        for r in per_sample {
            let (loss, g) = r?;
            total_loss += loss;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += &b;
                    }
                }
            }
        }
        let mut grads = grads.expect("non-empty batch");
        let scale = 1.0 / cfg.batch_size as f64;
        for g in &mut grads {
            *g *= scale;
        }
        adam.update(model, &grads, cfg.learning_rate);
        history.push(total_loss / cfg.batch_size as f64);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::super::model::ModelConfig;
    use super::*;
    use crate::scene::{RoomType, SceneConfig};
    use crate::synthdata::{generate_scene, CorpusSpec};

    fn fixture() -> (SceneConfig, ModelConfig, Vec<TrainItem>, NormalizationStats) {
        let scene_cfg = SceneConfig::desk_scale(RoomType::Bedroom);
        let spec = CorpusSpec::desk_scale(scene_cfg.clone(), 1, 91);
        let a = generate_scene(&spec, 901).unwrap();
        let b = generate_scene(&spec, 902).unwrap();
        let items = vec![
            TrainItem {
                scene: a.scene,
                cond: a.cond,
            },
            TrainItem {
                scene: b.scene,
                cond: b.cond,
            },
        ];
        let norm = NormalizationStats::from_scenes(items.iter().map(|i| &i.scene), &scene_cfg);
        let model_cfg = ModelConfig {
            hidden: 32,
            blocks: 2,
            heads: 2,
            mlp_ratio: 2,
            point_hidden: [8, 16],
            layout_point_count: 50,
            ..ModelConfig::desk_scale(&scene_cfg)
        };
        (scene_cfg, model_cfg, items, norm)
    }

    #[test]
    fn initial_loss_near_noise_energy() {
        // untrained prediction is tiny, so the loss is about E||eps||^2 = N*d
        let (scene_cfg, model_cfg, items, norm) = fixture();
        let sched = DiffusionSchedule::default_t200();
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let model = Denoiser::init(model_cfg, &mut rng);
        let cfg = TrainingConfig {
            batch_size: 16,
            ..TrainingConfig::default()
        };
        let batch: Vec<TrainItem> = (0..16).map(|i| items[i % 2].clone()).collect();
        let loss = training_loss(&model, &batch, &norm, &scene_cfg, &sched, &cfg, &mut rng).unwrap();
        let nd = (scene_cfg.capacity * scene_cfg.feature_dim()) as f64;
        assert!(
            loss > 0.5 * nd && loss < 2.0 * nd,
            "loss {loss} vs N*d = {nd}"
        );
    }

    #[test]
    fn short_run_decreases_loss() {
        let (scene_cfg, model_cfg, items, norm) = fixture();
        let sched = DiffusionSchedule::default_t200();
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let mut model = Denoiser::init(model_cfg, &mut rng);
        let cfg = TrainingConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            iterations: 60,
            rotation_augment: false,
            cond_dropout: 0.0,
        };
        let hist = train(&mut model, &items, &norm, &scene_cfg, &sched, &cfg, 5).unwrap();
        let head: f64 = hist[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = hist[hist.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < 0.7 * head, "no progress: head {head}, tail {tail}");
    }

    #[test]
    fn training_is_deterministic() {
        let (scene_cfg, model_cfg, items, norm) = fixture();
        let sched = DiffusionSchedule::default_t200();
        let cfg = TrainingConfig {
            learning_rate: 1e-3,
            batch_size: 2,
            iterations: 5,
            rotation_augment: true,
            cond_dropout: 0.1,
        };
        let run = |seed| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut model = Denoiser::init(model_cfg.clone(), &mut rng);
            let hist = train(&mut model, &items, &norm, &scene_cfg, &sched, &cfg, 77).unwrap();
            (hist, model.params)
        };
        let (ha, pa) = run(3);
        let (hb, pb) = run(3);
        assert_eq!(ha, hb);
        assert_eq!(pa, pb);
    }

    #[test]
    fn config_validation() {
        let (scene_cfg, model_cfg, items, norm) = fixture();
        let sched = DiffusionSchedule::default_t200();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut model = Denoiser::init(model_cfg, &mut rng);
        let bad = TrainingConfig {
            batch_size: 0,
            ..TrainingConfig::default()
        };
        assert!(train(&mut model, &items, &norm, &scene_cfg, &sched, &bad, 1).is_err());
        let ok = TrainingConfig {
            iterations: 0,
            ..TrainingConfig::default()
        };
        assert!(train(&mut model, &[], &norm, &scene_cfg, &sched, &ok, 1).is_err());
    }
}
