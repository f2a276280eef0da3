//! File formats and rendering: the scene JSON schema, model checkpoints,
//! corpus directories, the CAD-catalog retrieval stub and top-down SVG
//! output.

use std::fs;
use std::path::Path;

use base64::Engine;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::calibration::{surface_vertices, HumanProxy, InteractionRecord, PROXY_VERTICES};
use crate::diffusion::{Denoiser, DiffusionSchedule, ModelConfig, TrainingConfig};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, footprint};
use crate::scene::{
    ConditionSet, ContactBox, GridMask, InteractionMode, NormalizationStats, ObjectInstance,
    RoomType, Scene, SceneConfig, GRID_RES,
};
use crate::synthdata::{Corpus, CorpusScene, CorpusSpec};

pub const SCENE_SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

fn parse_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Bit mask on disk: run-length runs of alternating value starting at 0, or
/// raw base64 bytes. RLE is written; both parse.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRepr {
    Rle(Vec<u32>),
    Base64(String),
}

impl MaskRepr {
    pub fn encode(mask: &GridMask) -> MaskRepr {
        let mut runs = Vec::new();
        let mut current = 0u8;
        let mut len = 0u32;
        for &b in &mask.data {
            let v = if b != 0 { 1 } else { 0 };
            if v == current {
                len += 1;
            } else {
                runs.push(len);
                current = v;
                len = 1;
            }
        }
        runs.push(len);
        MaskRepr::Rle(runs)
    }

    pub fn decode(&self, world_extent: f64, path: &Path, key: &str) -> Result<GridMask> {
        let total = GRID_RES * GRID_RES;
        let mut data = Vec::with_capacity(total);
        match self {
            MaskRepr::Rle(runs) => {
                let mut v = 0u8;
                for &run in runs {
                    data.resize(data.len() + run as usize, v);
                    v = 1 - v;
                }
                if data.len() != total {
                    return Err(parse_err(
                        path,
                        format!("{key}: rle covers {} pixels, want {total}", data.len()),
                    ));
                }
            }
            MaskRepr::Base64(s) => {
                data = base64::engine::general_purpose::STANDARD
                    .decode(s)
                    .map_err(|e| parse_err(path, format!("{key}: {e}")))?;
                if data.len() != total {
                    return Err(parse_err(
                        path,
                        format!("{key}: {} bytes, want {total}", data.len()),
                    ));
                }
                for b in &mut data {
                    *b = if *b != 0 { 1 } else { 0 };
                }
            }
        }
        Ok(GridMask { data, world_extent })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ObjectDoc {
    category: String,
    location: [f64; 3],
    size: [f64; 3],
    yaw_rad: f64,
    is_contact: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ContactDoc {
    intended_category: String,
    location: [f64; 3],
    size: [f64; 3],
    yaw_rad: f64,
    mode: InteractionMode,
    /// Index of the paired object row; doubles as the interaction record.
    object_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneDoc {
    version: u32,
    room_type: RoomType,
    world_extent_m: f64,
    objects: Vec<ObjectDoc>,
    contacts: Vec<ContactDoc>,
    floor: MaskRepr,
    free_space: MaskRepr,
    seed: u64,
}

#[derive(Debug, Deserialize)]
struct VersionProbe {
    version: u32,
}

fn check_version(path: &Path, raw: &str, expected: u32) -> Result<()> {
    let probe: VersionProbe =
        serde_json::from_str(raw).map_err(|e| parse_err(path, e.to_string()))?;
    if probe.version != expected {
        return Err(Error::UnsupportedVersion {
            found: probe.version,
            expected,
        });
    }
    Ok(())
}

pub fn save_scene_file(
    path: &Path,
    scene: &Scene,
    cond: &ConditionSet,
    records: &[InteractionRecord],
    cfg: &SceneConfig,
    seed: u64,
) -> Result<()> {
    scene.validate(cfg)?;
    let empty = cfg.empty_index();
    let objects = scene
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| o.category != empty)
        .map(|(i, o)| ObjectDoc {
            category: cfg.categories[o.category].clone(),
            location: o.location,
            size: o.size,
            yaw_rad: o.yaw,
            is_contact: i < scene.contact_count,
        })
        .collect();
    let contacts = cond
        .contacts
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.as_ref().map(|c| (i, c)))
        .map(|(i, c)| {
            // records run parallel to the occupied contact slots
            let object_index = records.get(i).map(|r| r.object_index).unwrap_or(i);
            ContactDoc {
                intended_category: cfg.categories[c.intended_category].clone(),
                location: c.location,
                size: c.size,
                yaw_rad: c.yaw,
                mode: c.mode,
                object_index,
            }
        })
        .collect();
    let doc = SceneDoc {
        version: SCENE_SCHEMA_VERSION,
        room_type: scene.room_type,
        world_extent_m: cfg.world_extent_m,
        objects,
        contacts,
        floor: MaskRepr::encode(&cond.floor),
        free_space: MaskRepr::encode(&cond.free_space),
        seed,
    };
    fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

pub fn load_scene_file(
    path: &Path,
    cfg: &SceneConfig,
) -> Result<(Scene, ConditionSet, Vec<InteractionRecord>, u64)> {
    let raw = fs::read_to_string(path)?;
    check_version(path, &raw, SCENE_SCHEMA_VERSION)?;
    let doc: SceneDoc = serde_json::from_str(&raw).map_err(|e| parse_err(path, e.to_string()))?;
    if (doc.world_extent_m - cfg.world_extent_m).abs() > 1e-9 {
        return Err(parse_err(
            path,
            format!(
                "world_extent_m {} does not match configured {}",
                doc.world_extent_m, cfg.world_extent_m
            ),
        ));
    }
    let mut objects = Vec::with_capacity(doc.objects.len());
    let mut contact_rows = 0;
    for (i, o) in doc.objects.iter().enumerate() {
        let category = cfg.category_index(&o.category).ok_or_else(|| {
            parse_err(path, format!("objects[{i}].category: unknown '{}'", o.category))
        })?;
        if o.is_contact {
            if i != contact_rows {
                return Err(parse_err(
                    path,
                    format!("objects[{i}]: contact rows must come first"),
                ));
            }
            contact_rows += 1;
        }
        objects.push(ObjectInstance {
            category,
            location: o.location,
            size: o.size,
            yaw: o.yaw_rad,
        });
    }
    if doc.contacts.len() != contact_rows {
        return Err(parse_err(
            path,
            format!(
                "{} contact docs but {contact_rows} contact-flagged objects",
                doc.contacts.len()
            ),
        ));
    }
    let pairing: Vec<usize> = (0..contact_rows).collect();
    let scene = crate::scene::pad_scene(&objects, &pairing, cfg)?;

    let floor = doc.floor.decode(cfg.world_extent_m, path, "floor")?;
    let free_space = doc.free_space.decode(cfg.world_extent_m, path, "free_space")?;
    let layout_points = farthest_point_sample(&floor.hadamard(&free_space), 1000)?;

    let mut contacts: Vec<Option<ContactBox>> = Vec::with_capacity(cfg.capacity);
    let mut records = Vec::with_capacity(doc.contacts.len());
    for (i, c) in doc.contacts.iter().enumerate() {
        let intended = cfg.category_index(&c.intended_category).ok_or_else(|| {
            parse_err(
                path,
                format!("contacts[{i}].intended_category: unknown '{}'", c.intended_category),
            )
        })?;
        if c.object_index >= objects.len() {
            return Err(parse_err(
                path,
                format!("contacts[{i}].object_index out of range"),
            ));
        }
        contacts.push(Some(ContactBox {
            intended_category: intended,
            location: c.location,
            size: c.size,
            yaw: c.yaw_rad,
            mode: c.mode,
        }));
        records.push(InteractionRecord {
            human: HumanProxy {
                mode: c.mode,
                location: c.location,
                size: c.size,
                yaw: c.yaw_rad,
                local_vertices: surface_vertices(c.size, PROXY_VERTICES),
            },
            object_index: c.object_index,
        });
    }
    contacts.resize(cfg.capacity, None);
    let cond = ConditionSet {
        contacts,
        floor,
        free_space,
        layout_points,
    };
    Ok((scene, cond, records, doc.seed))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestDoc {
    version: u32,
    spec: CorpusSpec,
    scene_files: Vec<String>,
}

/// Corpus directory: `manifest.json` plus one scene file per entry.
pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut scene_files = Vec::with_capacity(corpus.scenes.len());
    for (i, cs) in corpus.scenes.iter().enumerate() {
        let name = format!("scene_{i:05}.json");
        save_scene_file(
            &dir.join(&name),
            &cs.scene,
            &cs.cond,
            &cs.records,
            &corpus.spec.scene_config,
            cs.seed,
        )?;
        scene_files.push(name);
    }
    let manifest = ManifestDoc {
        version: SCENE_SCHEMA_VERSION,
        spec: corpus.spec.clone(),
        scene_files,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.json");
    let raw = fs::read_to_string(&manifest_path)?;
    check_version(&manifest_path, &raw, SCENE_SCHEMA_VERSION)?;
    let manifest: ManifestDoc =
        serde_json::from_str(&raw).map_err(|e| parse_err(&manifest_path, e.to_string()))?;
    let cfg = manifest.spec.scene_config.clone();
    let mut scenes = Vec::with_capacity(manifest.scene_files.len());
    for name in &manifest.scene_files {
        let (scene, cond, records, seed) = load_scene_file(&dir.join(name), &cfg)?;
        scenes.push(CorpusScene {
            scene,
            cond,
            records,
            seed,
        });
    }
    Ok(Corpus {
        spec: manifest.spec,
        scenes,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamDoc {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointDoc {
    version: u32,
    model: ModelConfig,
    scene: SceneConfig,
    norm: NormalizationStats,
    schedule: DiffusionSchedule,
    training: TrainingConfig,
    params: Vec<ParamDoc>,
}

/// Everything needed to resume sampling: configs, normalization, schedule
/// and weights. JSON float round-trips are bit-exact.
pub struct Checkpoint {
    pub model: Denoiser,
    pub scene_cfg: SceneConfig,
    pub norm: NormalizationStats,
    pub schedule: DiffusionSchedule,
    pub training: TrainingConfig,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let params = ckpt
        .model
        .params
        .iter()
        .map(|p| ParamDoc {
            rows: p.nrows(),
            cols: p.ncols(),
            data: p.iter().copied().collect(),
        })
        .collect();
    let doc = CheckpointDoc {
        version: CHECKPOINT_VERSION,
        model: ckpt.model.cfg.clone(),
        scene: ckpt.scene_cfg.clone(),
        norm: ckpt.norm.clone(),
        schedule: ckpt.schedule.clone(),
        training: ckpt.training.clone(),
        params,
    };
    fs::write(path, serde_json::to_string(&doc)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let raw = fs::read_to_string(path)?;
    check_version(path, &raw, CHECKPOINT_VERSION)?;
    let doc: CheckpointDoc =
        serde_json::from_str(&raw).map_err(|e| parse_err(path, e.to_string()))?;
    let mut params = Vec::with_capacity(doc.params.len());
    for (i, p) in doc.params.iter().enumerate() {
        if p.data.len() != p.rows * p.cols {
            return Err(parse_err(
                path,
                format!("params[{i}]: {} values for {}x{}", p.data.len(), p.rows, p.cols),
            ));
        }
        params.push(
            Array2::from_shape_vec((p.rows, p.cols), p.data.clone())
                .map_err(|e| parse_err(path, e.to_string()))?,
        );
    }
    let model = Denoiser::from_params(doc.model, params)
        .map_err(|e| parse_err(path, e.to_string()))?;
    Ok(Checkpoint {
        model,
        scene_cfg: doc.scene,
        norm: doc.norm,
        schedule: doc.schedule,
        training: doc.training,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub id: String,
    pub category: String,
    pub size: [f64; 3],
}

/// Nearest same-category entry by Euclidean size distance; ties go to the
/// lexicographically smaller id.
pub fn retrieve_model<'a>(
    catalog: &'a [CatalogEntry],
    category: &str,
    size: [f64; 3],
) -> Result<&'a CatalogEntry> {
    let mut best: Option<(&CatalogEntry, f64)> = None;
    for entry in catalog.iter().filter(|e| e.category == category) {
        let d2 = entry
            .size
            .iter()
            .zip(&size)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        best = match best {
            None => Some((entry, d2)),
            Some((cur, cur_d2)) => {
                if d2 < cur_d2 || (d2 == cur_d2 && entry.id < cur.id) {
                    Some((entry, d2))
                } else {
                    Some((cur, cur_d2))
                }
            }
        };
    }
    best.map(|(e, _)| e)
        .ok_or_else(|| Error::Retrieval(category.to_string()))
}

pub fn load_catalog(path: &Path) -> Result<Vec<CatalogEntry>> {
    let raw = fs::read_to_string(path)?;
    let entries: Vec<CatalogEntry> =
        serde_json::from_str(&raw).map_err(|e| parse_err(path, e.to_string()))?;
    for (i, e) in entries.iter().enumerate() {
        if e.size.iter().any(|&s| s <= 0.0) {
            return Err(parse_err(path, format!("entry {i}: non-positive size")));
        }
    }
    Ok(entries)
}

const SVG_SIZE: f64 = 640.0;
const PALETTE: [&str; 9] = [
    "#4c78a8", "#f58518", "#54a24b", "#e45756", "#72b7b2", "#b279a2", "#eeca3b", "#9d755d",
    "#bab0ac",
];

fn svg_xy(x: f64, z: f64, extent: f64) -> (f64, f64) {
    let s = SVG_SIZE / extent;
    ((x + extent / 2.0) * s, (z + extent / 2.0) * s)
}

fn fmt(v: f64) -> String {
    format!("{:.2}", v)
}

/// Deterministic top-down view: floor pixels, free space, contact outlines
/// and category-colored object footprints with a yaw tick.
pub fn render_svg(scene: &Scene, cond: &ConditionSet, cfg: &SceneConfig) -> Result<String> {
    scene.validate(cfg)?;
    let extent = cfg.world_extent_m;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{0}\" viewBox=\"0 0 {0} {0}\">\n",
        SVG_SIZE
    ));
    out.push_str(&format!(
        "<rect width=\"{0}\" height=\"{0}\" fill=\"#ffffff\"/>\n",
        SVG_SIZE
    ));
    // floor and free space as coarse pixel rects (4x4 pixel blocks keep the
    // file small and stable)
    let px = SVG_SIZE / GRID_RES as f64;
    for (mask, color) in [(&cond.floor, "#e8e8e8"), (&cond.free_space, "#c9dcf0")] {
        for row in 0..GRID_RES {
            let mut col = 0;
            while col < GRID_RES {
                if mask.get(row, col) != 0 {
                    let start = col;
                    while col < GRID_RES && mask.get(row, col) != 0 {
                        col += 1;
                    }
                    out.push_str(&format!(
                        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n",
                        fmt(start as f64 * px),
                        fmt(row as f64 * px),
                        fmt((col - start) as f64 * px),
                        fmt(px),
                        color
                    ));
                } else {
                    col += 1;
                }
            }
        }
    }
    for obj in scene.non_empty(cfg) {
        let fp = footprint(obj, cfg)?;
        let pts: Vec<String> = fp
            .corners
            .iter()
            .map(|c| {
                let (x, y) = svg_xy(c[0], c[1], extent);
                format!("{},{}", fmt(x), fmt(y))
            })
            .collect();
        let color = PALETTE[obj.category % PALETTE.len()];
        out.push_str(&format!(
            "<polygon points=\"{}\" fill=\"{}\" fill-opacity=\"0.7\" stroke=\"#333333\"/>\n",
            pts.join(" "),
            color
        ));
        // yaw tick from center to the front edge midpoint
        let (cx, cy) = svg_xy(obj.location[0], obj.location[2], extent);
        let front = [
            obj.location[0] - obj.yaw.sin() * obj.size[2] / 2.0,
            obj.location[2] + obj.yaw.cos() * obj.size[2] / 2.0,
        ];
        let (fx, fy) = svg_xy(front[0], front[1], extent);
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#111111\"/>\n",
            fmt(cx),
            fmt(cy),
            fmt(fx),
            fmt(fy)
        ));
    }
    for cb in cond.contacts.iter().flatten() {
        let fp = footprint(&cb.as_object(), cfg)?;
        let pts: Vec<String> = fp
            .corners
            .iter()
            .map(|c| {
                let (x, y) = svg_xy(c[0], c[1], extent);
                format!("{},{}", fmt(x), fmt(y))
            })
            .collect();
        out.push_str(&format!(
            "<polygon points=\"{}\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"2\" stroke-dasharray=\"6,3\"/>\n",
            pts.join(" ")
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn render_svg_file(
    path: &Path,
    scene: &Scene,
    cond: &ConditionSet,
    cfg: &SceneConfig,
) -> Result<()> {
    let doc = render_svg(scene, cond, cfg)?;
    fs::write(path, doc)?;
    Ok(())
}
