//! Command-line shell around the layout-diffusion library: corpus synthesis,
//! training, guided sampling, interaction calibration, evaluation and SVG
//! rendering. Every subcommand that takes `--seed` is bit-reproducible.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use layoutdiff::calibration::{calibrate_records, category_augment, orientation_augment};
use layoutdiff::diffusion::{make_schedule, ModelConfig, TrainingConfig};
use layoutdiff::error::{Error, Result};
use layoutdiff::guidance::GuidanceConfig;
use layoutdiff::pipeline::{sample_from_checkpoint, train_on_corpus};
use layoutdiff::scene::{RoomType, SceneConfig};
use layoutdiff::synthdata::{generate_corpus, CorpusSpec};
use layoutdiff::tool_io::{
    load_checkpoint, load_corpus, load_scene_file, render_svg_file, save_checkpoint, save_corpus,
    save_scene_file,
};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[derive(Parser)]
#[command(name = "layoutdiff", version, about = "scene-layout diffusion toolkit")]
struct Cli {
    /// JSON file overriding model / training / guidance defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Room {
    Bedroom,
    Living,
    Dining,
}

impl From<Room> for RoomType {
    fn from(r: Room) -> RoomType {
        match r {
            Room::Bedroom => RoomType::Bedroom,
            Room::Living => RoomType::Living,
            Room::Dining => RoomType::Dining,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Room::Bedroom)]
        room: Room,
    },
    /// Train a denoiser on a corpus directory and write a checkpoint.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the configured iteration count.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Sample scenes for the condition carried by a scene file.
    Sample(SampleArgs),
    /// Repair human-object interactions across a corpus and write a report.
    Calibrate {
        #[arg(long)]
        corpus: PathBuf,
        /// Report path; the calibrated corpus goes to `--out-corpus` if set.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        out_corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20.0)]
        sigma1: f64,
        /// Interaction-ratio threshold; defaults to the per-mode values.
        #[arg(long)]
        sigma2: Option<f64>,
        /// Also run the category / orientation augmentations.
        #[arg(long, default_value_t = false)]
        augment: bool,
    },
    /// Sample against every corpus condition and score the results.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Report JSON path; the table always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Switch::On)]
        guidance: Switch,
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Render a scene file to a top-down SVG.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Room::Bedroom)]
        room: Room,
    },
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene file providing the conditioning (contacts, floor, free space).
    #[arg(long)]
    condition: PathBuf,
    /// Output directory for the sampled scene files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    guidance: Switch,
    #[arg(long)]
    gamma: Option<f64>,
    /// Override the reverse-chain step count.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Also render each sample next to its JSON.
    #[arg(long, default_value_t = false)]
    render: bool,
}

/// Optional overrides loaded from `--config`.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    model: Option<ModelConfig>,
    training: Option<TrainingConfig>,
    guidance: Option<GuidanceConfig>,
    trail_waypoints: Option<usize>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let raw = std::fs::read_to_string(p)?;
            serde_json::from_str(&raw).map_err(|e| Error::Parse {
                path: p.display().to_string(),
                reason: e.to_string(),
            })
        }
    }
}

fn guidance_from(
    switch: Switch,
    gamma: Option<f64>,
    file: &FileConfig,
    scene_cfg: &SceneConfig,
) -> Option<GuidanceConfig> {
    match switch {
        Switch::Off => None,
        Switch::On => {
            let mut g = file
                .guidance
                .clone()
                .unwrap_or_else(|| GuidanceConfig::default_for(scene_cfg));
            if let Some(gamma) = gamma {
                g.gamma = gamma;
            }
            Some(g)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file_cfg = load_file_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth {
            out,
            count,
            seed,
            room,
        } => {
            let scene_cfg = SceneConfig::desk_scale(room.into());
            let mut spec = CorpusSpec::desk_scale(scene_cfg, count, seed);
            if let Some(w) = file_cfg.trail_waypoints {
                spec.trail_waypoints = w;
            }
            let corpus = generate_corpus(&spec)?;
            save_corpus(&out, &corpus)?;
            println!("wrote {} scenes to {}", count, out.display());
        }
        Command::Train {
            corpus,
            out,
            seed,
            iterations,
        } => {
            let corpus = load_corpus(&corpus)?;
            let model_cfg = file_cfg
                .model
                .clone()
                .unwrap_or_else(|| ModelConfig::desk_scale(&corpus.spec.scene_config));
            let mut training = file_cfg.training.clone().unwrap_or_default();
            if let Some(it) = iterations {
                training.iterations = it;
            }
            let (ckpt, history) = train_on_corpus(&corpus, model_cfg, training, seed)?;
            save_checkpoint(&out, &ckpt)?;
            let tail = history.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained {} iterations, final loss {tail:.4}, checkpoint at {}",
                history.len(),
                out.display()
            );
        }
        Command::Sample(args) => {
            let mut ckpt = load_checkpoint(&args.checkpoint)?;
            let (_, cond, _, _) = load_scene_file(&args.condition, &ckpt.scene_cfg)?;
            if let Some(steps) = args.steps {
                ckpt.schedule = make_schedule(steps, 1e-4, 0.02)?;
            }
            let guidance = guidance_from(args.guidance, args.gamma, &file_cfg, &ckpt.scene_cfg);
            let scenes =
                sample_from_checkpoint(&ckpt, &cond, guidance.as_ref(), args.count, args.seed)?;
            std::fs::create_dir_all(&args.out)?;
            for (i, scene) in scenes.iter().enumerate() {
                let path = args.out.join(format!("sample_{i:03}.json"));
                save_scene_file(&path, scene, &cond, &[], &ckpt.scene_cfg, args.seed)?;
                if args.render {
                    render_svg_file(
                        &args.out.join(format!("sample_{i:03}.svg")),
                        scene,
                        &cond,
                        &ckpt.scene_cfg,
                    )?;
                }
            }
            println!("wrote {} samples to {}", scenes.len(), args.out.display());
        }
        Command::Calibrate {
            corpus,
            out,
            out_corpus,
            seed,
            sigma1,
            sigma2,
            augment,
        } => {
            let mut corpus = load_corpus(&corpus)?;
            let cfg = corpus.spec.scene_config.clone();
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut scene_reports = Vec::with_capacity(corpus.scenes.len());
            for cs in &mut corpus.scenes {
                if augment && !cs.records.is_empty() {
                    category_augment(&cs.scene, &mut cs.records, &cfg, sigma1, &mut rng)?;
                    orientation_augment(
                        &cs.scene,
                        &mut cs.records,
                        &cfg,
                        sigma1,
                        30f64.to_radians(),
                        &mut rng,
                    )?;
                }
                let reports = calibrate_records(&cs.scene, &mut cs.records, &cfg, sigma1, sigma2)?;
                scene_reports.push(reports);
            }
            let accepted: usize = scene_reports
                .iter()
                .flatten()
                .filter(|r| r.accepted)
                .count();
            let total: usize = scene_reports.iter().map(|v| v.len()).sum();
            std::fs::write(&out, serde_json::to_string_pretty(&scene_reports)?)?;
            if let Some(dir) = out_corpus {
                save_corpus(&dir, &corpus)?;
            }
            println!("calibrated {accepted}/{total} records, report at {}", out.display());
        }
        Command::Eval {
            checkpoint,
            corpus,
            out,
            seed,
            guidance,
            gamma,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let corpus = load_corpus(&corpus)?;
            let cfg = corpus.spec.scene_config.clone();
            let guidance = guidance_from(guidance, gamma, &file_cfg, &cfg);
            let mut generated = Vec::with_capacity(corpus.scenes.len());
            for (i, cs) in corpus.scenes.iter().enumerate() {
                let scenes = sample_from_checkpoint(
                    &ckpt,
                    &cs.cond,
                    guidance.as_ref(),
                    1,
                    seed.wrapping_add(1000 + i as u64),
                )?;
                generated.push((scenes.into_iter().next().expect("count 1"), cs.cond.clone()));
            }
            let reference: Vec<_> = corpus.scenes.iter().map(|cs| cs.scene.clone()).collect();
            let report =
                layoutdiff::evalsuite::evaluate(&generated, &reference, &cfg, false, Some(seed))?;
            print!("{}", report.table());
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
                println!("report at {}", path.display());
            }
        }
        Command::Render { scene, out, room } => {
            let cfg = SceneConfig::desk_scale(room.into());
            let (scene, cond, _, _) = load_scene_file(&scene, &cfg)?;
            render_svg_file(&out, &scene, &cond, &cfg)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
