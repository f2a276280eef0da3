//! Procedural corpus generation: floor plans, collision-free layouts,
//! contact humans with valid interactions, motion trails and free-space
//! masks. Every downstream consistency property holds by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{compatible_modes, mode_template, HumanProxy, InteractionRecord};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, footprint_unchecked, Footprint};
use crate::scene::{
    pad_scene, ConditionSet, ContactBox, GridMask, NormalizationStats, ObjectInstance, Scene,
    SceneConfig, GRID_RES,
};

/// Rejection-sampling budget per scene before giving up.
const PLACEMENT_BUDGET: usize = 10_000;
/// Clearance kept between object footprints and between footprints and the
/// trail, meters. Wide enough that a contact human never reaches a
/// neighboring object.
const CLEARANCE: f64 = 0.12;
/// Trail dilation radius, meters.
const TRAIL_RADIUS: f64 = 0.3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub scene_config: SceneConfig,
    pub scene_count: usize,
    pub master_seed: u64,
    /// Number of random-walk waypoints per scene.
    pub trail_waypoints: usize,
}

impl CorpusSpec {
    pub fn desk_scale(scene_config: SceneConfig, scene_count: usize, master_seed: u64) -> Self {
        CorpusSpec {
            scene_config,
            scene_count,
            master_seed,
            trail_waypoints: 6,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.scene_count == 0 || self.trail_waypoints < 2 {
            return Err(Error::Config(
                "corpus needs >= 1 scene and >= 2 trail waypoints".into(),
            ));
        }
        if self.scene_config.num_categories() > 24 {
            return Err(Error::Config("vocabulary exceeds paper scale".into()));
        }
        Ok(())
    }
}

/// One generated training example.
#[derive(Debug, Clone)]
pub struct CorpusScene {
    pub scene: Scene,
    pub cond: ConditionSet,
    pub records: Vec<InteractionRecord>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub scenes: Vec<CorpusScene>,
}

impl Corpus {
    pub fn normalization(&self) -> NormalizationStats {
        NormalizationStats::from_scenes(
            self.scenes.iter().map(|s| &s.scene),
            &self.spec.scene_config,
        )
    }
}

/// Analytic floor region: a rectangle with an optional corner bite taken out
/// (the L shape). Kept analytic so containment checks do not depend on the
/// raster.
#[derive(Debug, Clone, Copy)]
struct FloorPlan {
    half_x: f64,
    half_z: f64,
    /// Corner rectangle removed from the (+x, +z) quadrant after mirroring
    /// by the stored signs; None for a plain rectangle.
    bite: Option<(f64, f64, f64, f64)>, // (sign_x, sign_z, width, depth)
}

impl FloorPlan {
    fn contains(&self, x: f64, z: f64) -> bool {
        if x.abs() > self.half_x || z.abs() > self.half_z {
            return false;
        }
        if let Some((sx, sz, w, d)) = self.bite {
            let bx = x * sx;
            let bz = z * sz;
            if bx > self.half_x - w && bz > self.half_z - d {
                return false;
            }
        }
        true
    }

    fn contains_inset(&self, x: f64, z: f64, inset: f64) -> bool {
        self.contains(x, z)
            && self.contains(x + inset, z + inset)
            && self.contains(x + inset, z - inset)
            && self.contains(x - inset, z + inset)
            && self.contains(x - inset, z - inset)
    }

    fn rasterize(&self, world_extent: f64) -> GridMask {
        let mut mask = GridMask::zeros(world_extent);
        for row in 0..GRID_RES {
            for col in 0..GRID_RES {
                let (x, z) = mask.pixel_center(row, col);
                if self.contains(x, z) {
                    mask.set(row, col, 1);
                }
            }
        }
        mask
    }
}

fn sample_floor(extent: f64, rng: &mut impl Rng) -> FloorPlan {
    let max_half = extent / 2.0 - 0.2;
    let half_x = rng.gen_range(0.72 * max_half..0.97 * max_half);
    let half_z = rng.gen_range(0.72 * max_half..0.97 * max_half);
    let bite = if rng.gen_bool(0.5) {
        let sx = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let sz = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        Some((
            sx,
            sz,
            rng.gen_range(0.5..half_x * 0.8),
            rng.gen_range(0.5..half_z * 0.8),
        ))
    } else {
        None
    };
    FloorPlan {
        half_x,
        half_z,
        bite,
    }
}

/// Nominal size per category with jitter; contact objects use the mode
/// template instead.
fn category_size(name: &str, rng: &mut impl Rng) -> [f64; 3] {
    let base: [f64; 3] = match name {
        "bed" => [1.0, 0.5, 1.9],
        "nightstand" => [0.45, 0.55, 0.4],
        "wardrobe" => [1.1, 2.0, 0.6],
        "chair" => [0.5, 0.9, 0.5],
        "table" => [1.2, 0.75, 0.7],
        "sofa" => [1.6, 0.8, 0.8],
        "lamp" => [0.3, 1.5, 0.3],
        "cabinet" => [0.9, 1.2, 0.45],
        other => {
            debug_assert!(false, "no size prior for {other}");
            [0.6, 0.6, 0.6]
        }
    };
    let mut s = base;
    for v in &mut s {
        *v *= rng.gen_range(0.9..1.1);
    }
    s
}

fn footprint_separated(fp: &Footprint, others: &[Footprint], clearance: f64) -> bool {
    let (lo, hi) = fp.aabb();
    for o in others {
        let (olo, ohi) = o.aabb();
        if lo[0] - clearance < ohi[0]
            && olo[0] - clearance < hi[0]
            && lo[1] - clearance < ohi[1]
            && olo[1] - clearance < hi[1]
        {
            // conservative: AABBs closer than the clearance count as a clash
            return false;
        }
    }
    true
}

fn fits_floor(fp: &Footprint, floor: &FloorPlan, margin: f64) -> bool {
    let corners_in = fp.corners.iter().all(|c| {
        floor.contains(c[0] + margin, c[1] + margin)
            && floor.contains(c[0] + margin, c[1] - margin)
            && floor.contains(c[0] - margin, c[1] + margin)
            && floor.contains(c[0] - margin, c[1] - margin)
    });
    if !corners_in {
        return false;
    }
    // corners inside the convex outer rectangle do not rule out spanning the
    // bite of an L shape; reject on AABB overlap with the bite rectangle
    if let Some((sx, sz, w, d)) = floor.bite {
        let (lo, hi) = fp.aabb();
        let (bx_lo, bx_hi) = if sx > 0.0 {
            (floor.half_x - w, floor.half_x)
        } else {
            (-floor.half_x, -(floor.half_x - w))
        };
        let (bz_lo, bz_hi) = if sz > 0.0 {
            (floor.half_z - d, floor.half_z)
        } else {
            (-floor.half_z, -(floor.half_z - d))
        };
        let overlap = lo[0] - margin < bx_hi
            && bx_lo < hi[0] + margin
            && lo[1] - margin < bz_hi
            && bz_lo < hi[1] + margin;
        if overlap {
            return false;
        }
    }
    true
}

/// Generate one scene with its conditioning and interaction records.
pub fn generate_scene(spec: &CorpusSpec, seed: u64) -> Result<CorpusScene> {
    spec.validate()?;
    let cfg = &spec.scene_config;
    let extent = cfg.world_extent_m;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let gen_err = |reason: &str| Error::Generation {
        seed,
        reason: reason.into(),
    };

    let floor = sample_floor(extent, &mut rng);
    let n_contacts = rng.gen_range(1..=3usize);
    let n_total = rng.gen_range(n_contacts.max(3)..=8usize.min(cfg.capacity));

    let mut objects: Vec<ObjectInstance> = Vec::new();
    let mut footprints: Vec<Footprint> = Vec::new();
    let mut records: Vec<InteractionRecord> = Vec::new();
    let mut contacts: Vec<ContactBox> = Vec::new();
    let mut budget = PLACEMENT_BUDGET;

    // contact objects first so scene rows pair with contact boxes by position
    while objects.len() < n_total {
        if budget == 0 {
            return Err(gen_err("placement budget exhausted"));
        }
        budget -= 1;
        let is_contact = objects.len() < n_contacts;
        let (category, size, mode) = if is_contact {
            // pick a category with at least one interaction mode
            let category = rng.gen_range(0..cfg.num_categories());
            let modes = compatible_modes(&cfg.categories[category]);
            if modes.is_empty() {
                continue;
            }
            let mode = modes[rng.gen_range(0..modes.len())];
            // object nested just inside the human template, so the pair has
            // high volume ratio and zero penetration by construction
            let template = mode_template(mode);
            let mut size = template;
            for v in &mut size {
                *v *= rng.gen_range(0.97..0.99);
            }
            (category, size, Some(mode))
        } else {
            let category = rng.gen_range(0..cfg.num_categories());
            (category, category_size(&cfg.categories[category], &mut rng), None)
        };
        let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let reach = (size[0].max(size[2])) / 2.0 + 0.1;
        let x = rng.gen_range(-(floor.half_x - reach).max(0.0)..(floor.half_x - reach).max(0.01));
        let z = rng.gen_range(-(floor.half_z - reach).max(0.0)..(floor.half_z - reach).max(0.01));
        let obj = ObjectInstance {
            category,
            location: [x, size[1] / 2.0, z],
            size,
            yaw,
        };
        let fp = footprint_unchecked(&obj);
        if !fits_floor(&fp, &floor, 0.02) {
            continue;
        }
        if !footprint_separated(&fp, &footprints, CLEARANCE) {
            continue;
        }
        if let Some(mode) = mode {
            let human = HumanProxy::canonical(mode, x, z, yaw);
            records.push(InteractionRecord {
                human: human.clone(),
                object_index: objects.len(),
            });
            contacts.push(ContactBox {
                intended_category: category,
                location: human.location,
                size: human.size,
                yaw: human.yaw,
                mode,
            });
        }
        objects.push(obj);
        footprints.push(fp);
    }

    let pairing: Vec<usize> = (0..n_contacts).collect();
    let scene = pad_scene(&objects, &pairing, cfg)?;

    // masks
    let floor_mask = floor.rasterize(extent);
    let free_space = trail_mask(&floor, &footprints, spec.trail_waypoints, extent, &mut rng)
        .ok_or_else(|| gen_err("could not route a motion trail"))?;
    let layout_points = farthest_point_sample(&floor_mask.hadamard(&free_space), 1000)?;

    let mut padded_contacts: Vec<Option<ContactBox>> = contacts.into_iter().map(Some).collect();
    padded_contacts.resize(cfg.capacity, None);

    Ok(CorpusScene {
        scene,
        cond: ConditionSet {
            contacts: padded_contacts,
            floor: floor_mask,
            free_space,
            layout_points,
        },
        records,
        seed,
    })
}

/// Random-walk trail dilated to a free-space mask. Pixels inside the floor,
/// clear of every footprint and within the trail radius of a walk segment.
fn trail_mask(
    floor: &FloorPlan,
    footprints: &[Footprint],
    waypoints: usize,
    extent: f64,
    rng: &mut impl Rng,
) -> Option<GridMask> {
    let clear_of_objects = |x: f64, z: f64, margin: f64| {
        footprints.iter().all(|fp| {
            let (lo, hi) = fp.aabb();
            x < lo[0] - margin || x > hi[0] + margin || z < lo[1] - margin || z > hi[1] + margin
        })
    };
    let mut points: Vec<[f64; 2]> = Vec::with_capacity(waypoints);
    let mut budget = PLACEMENT_BUDGET;
    while points.len() < waypoints {
        if budget == 0 {
            return None;
        }
        budget -= 1;
        let x = rng.gen_range(-floor.half_x..floor.half_x);
        let z = rng.gen_range(-floor.half_z..floor.half_z);
        if !floor.contains_inset(x, z, TRAIL_RADIUS.min(0.2)) {
            continue;
        }
        if !clear_of_objects(x, z, TRAIL_RADIUS) {
            continue;
        }
        if let Some(last) = points.last() {
            let d = ((x - last[0]).powi(2) + (z - last[1]).powi(2)).sqrt();
            if d > 2.5 {
                continue; // keep steps walk-like
            }
        }
        points.push([x, z]);
    }

    let mut mask = GridMask::zeros(extent);
    let dist_to_segment = |p: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        let ab = [b[0] - a[0], b[1] - a[1]];
        let ap = [p[0] - a[0], p[1] - a[1]];
        let len2 = ab[0] * ab[0] + ab[1] * ab[1];
        let t = if len2 > 0.0 {
            ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let c = [a[0] + t * ab[0], a[1] + t * ab[1]];
        ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt()
    };
    let mut any = false;
    for row in 0..GRID_RES {
        for col in 0..GRID_RES {
            let (x, z) = mask.pixel_center(row, col);
            if !floor.contains(x, z) {
                continue;
            }
            // never under or touching an object footprint
            if footprints.iter().any(|fp| fp.contains([x, z])) {
                continue;
            }
            if !clear_of_objects(x, z, 0.02) {
                continue;
            }
            let near = points
                .windows(2)
                .any(|w| dist_to_segment([x, z], w[0], w[1]) <= TRAIL_RADIUS);
            if near {
                mask.set(row, col, 1);
                any = true;
            }
        }
    }
    if any {
        Some(mask)
    } else {
        None
    }
}

/// Generate a full corpus, scene-parallel with per-scene derived seeds.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let scenes: Vec<Result<CorpusScene>> = (0..spec.scene_count)
        .into_par_iter()
        .map(|i| {
            let seed = spec
                .master_seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(i as u64);
            generate_scene(spec, seed)
        })
        .collect();
    let scenes = scenes.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        spec: spec.clone(),
        scenes,
    })
}

/// Translate every contact human by Uniform(+-displacement) per horizontal
/// axis, emulating a corpus with broken interactions. Contact boxes in the
/// conditioning move with their humans.
pub fn corrupt_corpus(corpus: &Corpus, displacement: f64, rng: &mut impl Rng) -> Result<Corpus> {
    if displacement < 0.0 {
        return Err(Error::Config("displacement must be >= 0".into()));
    }
    let mut out = corpus.clone();
    for cs in &mut out.scenes {
        for (ri, rec) in cs.records.iter_mut().enumerate() {
            let (dx, dz) = if displacement > 0.0 {
                (
                    rng.gen_range(-displacement..displacement),
                    rng.gen_range(-displacement..displacement),
                )
            } else {
                (0.0, 0.0)
            };
            rec.human = rec.human.translated(dx, dz);
            if let Some(Some(cb)) = cs.cond.contacts.get_mut(ri) {
                cb.location = rec.human.location;
            }
        }
    }
    Ok(out)
}
