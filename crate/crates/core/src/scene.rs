//! Scene and condition data model, attribute normalization, EMPTY padding and
//! the codec between structured scenes and the flat tensor the diffusion core
//! operates on.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRID_RES: usize = 256;

/// Wrap an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if r >= std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoomType {
    Bedroom,
    Living,
    Dining,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionMode {
    Sit,
    Lie,
    Touch,
}

/// Static per-run scene configuration: category vocabulary (EMPTY is the
/// implicit index `K = categories.len()`), fixed set capacity and the square
/// world extent covered by the 256x256 grids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub room_type: RoomType,
    pub categories: Vec<String>,
    pub capacity: usize,
    pub world_extent_m: f64,
}

impl SceneConfig {
    pub fn desk_scale(room_type: RoomType) -> Self {
        let capacity = match room_type {
            RoomType::Bedroom => 12,
            RoomType::Living | RoomType::Dining => 21,
        };
        SceneConfig {
            room_type,
            categories: [
                "bed",
                "nightstand",
                "wardrobe",
                "chair",
                "table",
                "sofa",
                "lamp",
                "cabinet",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            capacity,
            world_extent_m: 6.2,
        }
    }

    /// Number of real categories K; EMPTY is index K.
    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn empty_index(&self) -> usize {
        self.categories.len()
    }

    /// Tensor feature width: one-hot incl. EMPTY + location + size + (cos, sin).
    pub fn feature_dim(&self) -> usize {
        self.num_categories() + 1 + 3 + 3 + 2
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }
}

/// One oriented 3D box: the unit of generation. `category == K` encodes the
/// EMPTY placeholder with all continuous attributes zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub category: usize,
    /// Meters, canonical frame: x/z horizontal, y up.
    pub location: [f64; 3],
    /// Full extents (width, height, depth), meters.
    pub size: [f64; 3],
    /// Rotation about the up axis, radians in `[-pi, pi)`.
    pub yaw: f64,
}

impl ObjectInstance {
    pub fn empty(cfg: &SceneConfig) -> Self {
        ObjectInstance {
            category: cfg.empty_index(),
            location: [0.0; 3],
            size: [0.0; 3],
            yaw: 0.0,
        }
    }

    pub fn is_empty(&self, cfg: &SceneConfig) -> bool {
        self.category == cfg.empty_index()
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    fn validate(&self, index: usize, cfg: &SceneConfig) -> Result<()> {
        if self.category > cfg.empty_index() {
            return Err(Error::Validation {
                index,
                field: "category",
                reason: format!("index {} out of range 0..={}", self.category, cfg.empty_index()),
            });
        }
        if self.is_empty(cfg) {
            if self.location != [0.0; 3] || self.size != [0.0; 3] || self.yaw != 0.0 {
                return Err(Error::Validation {
                    index,
                    field: "empty",
                    reason: "EMPTY placeholder must have zeroed attributes".into(),
                });
            }
            return Ok(());
        }
        for (i, &s) in self.size.iter().enumerate() {
            if !(s >= 0.01) {
                return Err(Error::Validation {
                    index,
                    field: "size",
                    reason: format!("component {i} = {s} below 0.01 m"),
                });
            }
        }
        if !(-std::f64::consts::PI..std::f64::consts::PI).contains(&self.yaw) {
            return Err(Error::Validation {
                index,
                field: "yaw",
                reason: format!("{} not wrapped into [-pi, pi)", self.yaw),
            });
        }
        for (f, v) in [("location", self.location), ("size", self.size)] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation {
                    index,
                    field: if f == "location" { "location" } else { "size" },
                    reason: "non-finite value".into(),
                });
            }
        }
        Ok(())
    }
}

/// A contact box: the oriented box of a contact human plus the category the
/// paired generated object is expected to carry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactBox {
    pub intended_category: usize,
    pub location: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub mode: InteractionMode,
}

impl ContactBox {
    /// View the contact box as an object for geometric queries.
    pub fn as_object(&self) -> ObjectInstance {
        ObjectInstance {
            category: self.intended_category,
            location: self.location,
            size: self.size,
            yaw: self.yaw,
        }
    }
}

/// Fixed-capacity object set. Rows `0..contact_count` are contact objects and
/// pair positionally with the contact boxes of the same `ConditionSet`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<ObjectInstance>,
    pub contact_count: usize,
    pub room_type: RoomType,
}

impl Scene {
    pub fn validate(&self, cfg: &SceneConfig) -> Result<()> {
        if self.objects.len() != cfg.capacity {
            return Err(Error::Validation {
                index: 0,
                field: "objects",
                reason: format!("expected {} rows, got {}", cfg.capacity, self.objects.len()),
            });
        }
        if self.contact_count > cfg.capacity {
            return Err(Error::Validation {
                index: self.contact_count,
                field: "contact_count",
                reason: "exceeds capacity".into(),
            });
        }
        for (i, obj) in self.objects.iter().enumerate() {
            obj.validate(i, cfg)?;
            if i < self.contact_count && obj.is_empty(cfg) {
                return Err(Error::Validation {
                    index: i,
                    field: "category",
                    reason: "contact object must not be EMPTY".into(),
                });
            }
        }
        Ok(())
    }

    pub fn non_empty(&self, cfg: &SceneConfig) -> impl Iterator<Item = &ObjectInstance> {
        let empty = cfg.empty_index();
        self.objects.iter().filter(move |o| o.category != empty)
    }
}

/// 256x256 binary occupancy grid over a square world region centered at the
/// scene origin. Row-major; row maps to z, column to x.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMask {
    pub data: Vec<u8>,
    pub world_extent: f64,
}

impl GridMask {
    pub fn zeros(world_extent: f64) -> Self {
        GridMask {
            data: vec![0; GRID_RES * GRID_RES],
            world_extent,
        }
    }

    pub fn pixel_size(&self) -> f64 {
        self.world_extent / GRID_RES as f64
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * GRID_RES + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.data[row * GRID_RES + col] = v;
    }

    /// World coordinates (x, z) of a pixel center.
    #[inline]
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let px = self.pixel_size();
        let half = self.world_extent / 2.0;
        (
            -half + (col as f64 + 0.5) * px,
            -half + (row as f64 + 0.5) * px,
        )
    }

    /// Pixel indices containing a world point, if inside the extent.
    #[inline]
    pub fn pixel_at(&self, x: f64, z: f64) -> Option<(usize, usize)> {
        let half = self.world_extent / 2.0;
        if x < -half || x >= half || z < -half || z >= half {
            return None;
        }
        let px = self.pixel_size();
        let col = ((x + half) / px) as usize;
        let row = ((z + half) / px) as usize;
        Some((row.min(GRID_RES - 1), col.min(GRID_RES - 1)))
    }

    pub fn count_set(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Pixelwise AND (the Hadamard product of two binary masks).
    pub fn hadamard(&self, other: &GridMask) -> GridMask {
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a & b)
            .collect();
        GridMask {
            data,
            world_extent: self.world_extent,
        }
    }

    pub fn complement(&self) -> GridMask {
        let data = self.data.iter().map(|&v| 1 - v.min(1)).collect();
        GridMask {
            data,
            world_extent: self.world_extent,
        }
    }

    /// Rotate the mask by `theta` about the scene origin (nearest-neighbor,
    /// inverse mapping). Pixels sampling outside the extent become 0.
    pub fn rotated(&self, theta: f64) -> GridMask {
        let mut out = GridMask::zeros(self.world_extent);
        let (s, c) = theta.sin_cos();
        for row in 0..GRID_RES {
            for col in 0..GRID_RES {
                let (x, z) = out.pixel_center(row, col);
                // inverse rotation of the target pixel center
                let sx = c * x + s * z;
                let sz = -s * x + c * z;
                if let Some((r, cl)) = self.pixel_at(sx, sz) {
                    out.set(row, col, self.get(r, cl));
                }
            }
        }
        out
    }
}

/// Everything the denoiser conditions on: contact boxes padded to capacity,
/// floor plan F, free-space mask FS and the derived layout point set P.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet {
    pub contacts: Vec<Option<ContactBox>>,
    pub floor: GridMask,
    pub free_space: GridMask,
    pub layout_points: Vec<[f64; 3]>,
}

impl ConditionSet {
    pub fn contact_count(&self) -> usize {
        self.contacts.iter().filter(|c| c.is_some()).count()
    }
}

/// Rotate a scene by `theta` about the vertical axis through the origin:
/// horizontal locations rotate, yaw shifts, sizes stay.
pub fn rotate_scene(scene: &Scene, theta: f64, cfg: &SceneConfig) -> Scene {
    let (s, c) = theta.sin_cos();
    let objects = scene
        .objects
        .iter()
        .map(|o| {
            if o.is_empty(cfg) {
                *o
            } else {
                ObjectInstance {
                    location: [
                        c * o.location[0] - s * o.location[2],
                        o.location[1],
                        s * o.location[0] + c * o.location[2],
                    ],
                    yaw: wrap_angle(o.yaw + theta),
                    ..*o
                }
            }
        })
        .collect();
    Scene {
        objects,
        contact_count: scene.contact_count,
        room_type: scene.room_type,
    }
}

/// Rotate a condition set jointly with its scene: contact boxes, both masks
/// and the layout points.
pub fn rotate_condition(cond: &ConditionSet, theta: f64) -> ConditionSet {
    let (s, c) = theta.sin_cos();
    let contacts = cond
        .contacts
        .iter()
        .map(|slot| {
            slot.map(|cb| ContactBox {
                location: [
                    c * cb.location[0] - s * cb.location[2],
                    cb.location[1],
                    s * cb.location[0] + c * cb.location[2],
                ],
                yaw: wrap_angle(cb.yaw + theta),
                ..cb
            })
        })
        .collect();
    let layout_points = cond
        .layout_points
        .iter()
        .map(|p| [c * p[0] - s * p[2], p[1], s * p[0] + c * p[2]])
        .collect();
    ConditionSet {
        contacts,
        floor: cond.floor.rotated(theta),
        free_space: cond.free_space.rotated(theta),
        layout_points,
    }
}

/// Per-channel normalization bounds computed once from the training corpus
/// and persisted with the model. Horizontal location axes share a symmetric
/// bound so that global rotations commute with encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub loc_min: [f64; 3],
    pub loc_max: [f64; 3],
    pub size_min: [f64; 3],
    pub size_max: [f64; 3],
}

impl NormalizationStats {
    pub fn from_scenes<'a>(scenes: impl Iterator<Item = &'a Scene>, cfg: &SceneConfig) -> Self {
        let mut loc_min = [f64::INFINITY; 3];
        let mut loc_max = [f64::NEG_INFINITY; 3];
        let mut size_min = [f64::INFINITY; 3];
        let mut size_max = [f64::NEG_INFINITY; 3];
        let mut any = false;
        for scene in scenes {
            for obj in scene.non_empty(cfg) {
                any = true;
                for i in 0..3 {
                    loc_min[i] = loc_min[i].min(obj.location[i]);
                    loc_max[i] = loc_max[i].max(obj.location[i]);
                    size_min[i] = size_min[i].min(obj.size[i]);
                    size_max[i] = size_max[i].max(obj.size[i]);
                }
            }
        }
        if !any {
            let h = cfg.world_extent_m / 2.0;
            return NormalizationStats {
                loc_min: [-h; 3],
                loc_max: [h; 3],
                size_min: [0.0; 3],
                size_max: [h; 3],
            };
        }
        // Symmetrize the horizontal axes so rotation augmentation commutes
        // with the affine map.
        let a = loc_min[0]
            .abs()
            .max(loc_max[0].abs())
            .max(loc_min[2].abs())
            .max(loc_max[2].abs())
            .max(1e-6);
        loc_min[0] = -a;
        loc_max[0] = a;
        loc_min[2] = -a;
        loc_max[2] = a;
        for i in 0..3 {
            if loc_max[i] - loc_min[i] < 1e-9 {
                loc_min[i] -= 0.5;
                loc_max[i] += 0.5;
            }
            if size_max[i] - size_min[i] < 1e-9 {
                size_min[i] = 0.0;
                size_max[i] = size_max[i].max(1.0);
            }
        }
        // Sizes always include the zero used by EMPTY padding.
        for i in 0..3 {
            size_min[i] = size_min[i].min(0.0);
        }
        NormalizationStats {
            loc_min,
            loc_max,
            size_min,
            size_max,
        }
    }

    #[inline]
    fn norm(v: f64, min: f64, max: f64) -> f64 {
        2.0 * (v - min) / (max - min) - 1.0
    }

    #[inline]
    fn denorm(u: f64, min: f64, max: f64) -> f64 {
        (u + 1.0) * (max - min) / 2.0 + min
    }

    /// Derivative d(world)/d(normalized) for a location channel; used by
    /// guidance to chain gradients back into tensor space.
    pub fn loc_scale(&self, axis: usize) -> f64 {
        (self.loc_max[axis] - self.loc_min[axis]) / 2.0
    }
}

/// N x d tensor view of a scene, all channels in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTensor {
    pub values: Array2<f64>,
}

impl SceneTensor {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }
}

/// Channel offsets inside a tensor row.
pub struct Channels {
    pub onehot: std::ops::Range<usize>,
    pub loc: std::ops::Range<usize>,
    pub size: std::ops::Range<usize>,
    pub cos: usize,
    pub sin: usize,
}

pub fn channels(cfg: &SceneConfig) -> Channels {
    let k1 = cfg.num_categories() + 1;
    Channels {
        onehot: 0..k1,
        loc: k1..k1 + 3,
        size: k1 + 3..k1 + 6,
        cos: k1 + 6,
        sin: k1 + 7,
    }
}

/// Encode a scene into the normalized N x d tensor. One-hot channels map to
/// {-1, +1}; continuous channels map affinely into [-1, 1]; yaw becomes
/// (cos, sin). EMPTY rows carry the encoding of zero on every continuous
/// channel (so yaw channels read (1, 0)).
pub fn encode_scene(scene: &Scene, norm: &NormalizationStats, cfg: &SceneConfig) -> Result<SceneTensor> {
    scene.validate(cfg)?;
    let d = cfg.feature_dim();
    let ch = channels(cfg);
    let mut values = Array2::from_elem((cfg.capacity, d), -1.0);
    for (i, obj) in scene.objects.iter().enumerate() {
        let mut row = values.row_mut(i);
        row[ch.onehot.start + obj.category] = 1.0;
        let (loc, size, yaw) = if obj.is_empty(cfg) {
            ([0.0; 3], [0.0; 3], 0.0)
        } else {
            (obj.location, obj.size, obj.yaw)
        };
        for a in 0..3 {
            row[ch.loc.start + a] = NormalizationStats::norm(loc[a], norm.loc_min[a], norm.loc_max[a]);
            row[ch.size.start + a] =
                NormalizationStats::norm(size[a], norm.size_min[a], norm.size_max[a]);
        }
        row[ch.cos] = yaw.cos();
        row[ch.sin] = yaw.sin();
    }
    Ok(SceneTensor { values })
}

/// Encode a contact box through the same channel layout (used for the shared
/// denoiser input projection).
pub fn encode_contact(cb: &ContactBox, norm: &NormalizationStats, cfg: &SceneConfig) -> Vec<f64> {
    let obj = cb.as_object();
    let ch = channels(cfg);
    let mut row = vec![-1.0; cfg.feature_dim()];
    row[ch.onehot.start + obj.category.min(cfg.num_categories() - 1)] = 1.0;
    for a in 0..3 {
        row[ch.loc.start + a] =
            NormalizationStats::norm(obj.location[a], norm.loc_min[a], norm.loc_max[a]);
        row[ch.size.start + a] =
            NormalizationStats::norm(obj.size[a], norm.size_min[a], norm.size_max[a]);
    }
    row[ch.cos] = obj.yaw.cos();
    row[ch.sin] = obj.yaw.sin();
    row
}

/// Decode a tensor back into a structured scene. Category is the one-hot
/// argmax (ties break toward the lowest index); out-of-range continuous
/// channels are clamped so the result always satisfies the scene invariants.
/// Rows below `contact_count` that decode to EMPTY fall back to their best
/// non-EMPTY category, since contact rows must stay occupied.
pub fn decode_scene(
    tensor: &SceneTensor,
    norm: &NormalizationStats,
    cfg: &SceneConfig,
    contact_count: usize,
) -> Result<Scene> {
    if tensor.rows() != cfg.capacity || tensor.values.ncols() != cfg.feature_dim() {
        return Err(Error::Decode(format!(
            "tensor shape {:?}, expected ({}, {})",
            tensor.values.dim(),
            cfg.capacity,
            cfg.feature_dim()
        )));
    }
    if tensor.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Decode("non-finite entry".into()));
    }
    let ch = channels(cfg);
    let mut objects = Vec::with_capacity(cfg.capacity);
    for (i, row) in tensor.values.rows().into_iter().enumerate() {
        let limit = if i < contact_count {
            cfg.num_categories()
        } else {
            cfg.num_categories() + 1
        };
        let mut best = 0usize;
        for c in 1..limit {
            if row[ch.onehot.start + c] > row[ch.onehot.start + best] {
                best = c;
            }
        }
        if best == cfg.empty_index() {
            objects.push(ObjectInstance::empty(cfg));
            continue;
        }
        let mut clamped = false;
        let take = |u: f64, min: f64, max: f64, clamped: &mut bool| -> f64 {
            let uc = u.clamp(-1.0, 1.0);
            if uc != u {
                *clamped = true;
            }
            NormalizationStats::denorm(uc, min, max)
        };
        let mut location = [0.0; 3];
        let mut size = [0.0; 3];
        for a in 0..3 {
            location[a] = take(
                row[ch.loc.start + a],
                norm.loc_min[a],
                norm.loc_max[a],
                &mut clamped,
            );
            size[a] = take(
                row[ch.size.start + a],
                norm.size_min[a],
                norm.size_max[a],
                &mut clamped,
            );
            if size[a] < 0.01 {
                size[a] = 0.01;
                clamped = true;
            }
        }
        let yaw = wrap_angle(row[ch.sin].atan2(row[ch.cos]));
        if clamped {
            log::debug!("decode: clamped attributes on row {i}");
        }
        objects.push(ObjectInstance {
            category: best,
            location,
            size,
            yaw,
        });
    }
    let scene = Scene {
        objects,
        contact_count,
        room_type: cfg.room_type,
    };
    scene.validate(cfg)?;
    Ok(scene)
}

/// Arrange a variable-length object list into a fixed-capacity scene:
/// contact-matched objects first in contact-box order, remaining objects
/// after, EMPTY padding to capacity. Contact boxes are matched to the object
/// index recorded in `pairing`.
pub fn pad_scene(
    objects: &[ObjectInstance],
    pairing: &[usize],
    cfg: &SceneConfig,
) -> Result<Scene> {
    if objects.len() > cfg.capacity {
        return Err(Error::Capacity {
            given: objects.len(),
            capacity: cfg.capacity,
        });
    }
    let mut used = vec![false; objects.len()];
    let mut ordered = Vec::with_capacity(cfg.capacity);
    for (ci, &oi) in pairing.iter().enumerate() {
        if oi >= objects.len() || used[oi] {
            return Err(Error::UnmatchedContact { index: ci });
        }
        used[oi] = true;
        ordered.push(objects[oi]);
    }
    for (i, obj) in objects.iter().enumerate() {
        if !used[i] {
            ordered.push(*obj);
        }
    }
    while ordered.len() < cfg.capacity {
        ordered.push(ObjectInstance::empty(cfg));
    }
    Ok(Scene {
        objects: ordered,
        contact_count: pairing.len(),
        room_type: cfg.room_type,
    })
}
