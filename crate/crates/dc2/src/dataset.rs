//! Synthetic focus-stack datasets on disk.
//!
//! One folder per scene:
//!
//! ```text
//! scene_0000/
//!   aif.png          all-in-focus wide image
//!   depth.raw        wide-grid depth in millimetres
//!   w_000.png ...    wide focus slices, nearest focus first
//!   uw.png           raw ultra-wide frame (its own resolution)
//!   warp.raw         ground-truth wide->ultra-wide displacement
//!   occlusion.png    forward-backward occlusion estimate (network input)
//!   occlusion_gt.png ground-truth visibility mask
//!   meta.json        seeds, scene config, rig, slice focus distances
//! ```
//!
//! A scene folder is written under a temporary name and renamed into place,
//! so readers never see a half-written scene.

use std::fs;
use std::path::{Path, PathBuf};

use dc2_core::align::{warp, DEFAULT_OCCLUSION_THRESHOLD_PX};
use dc2_core::optics::{defocus_map, DepthMap, LensState};
use dc2_core::synth::{generate_scene, generate_stack, CameraRig, ColorTransform, SceneConfig};
use dc2_core::train::SceneStack;
use dc2_core::Image;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::formats::{read_png, read_raw, read_warp, to_gray, to_rgb, write_png, write_raw, write_warp};

pub const META_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMeta {
    pub file: String,
    pub focus_distance_mm: f64,
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub version: u32,
    /// Seed of the dataset the scene belongs to.
    pub dataset_seed: u64,
    pub index: usize,
    /// Seed the scene content was generated from.
    pub scene_seed: u64,
    pub scene: SceneConfig,
    pub rig: CameraRig,
    pub slices: Vec<SliceMeta>,
    pub occlusion_threshold_px: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub scenes: usize,
    pub slices: usize,
    pub seed: u64,
    pub scene: SceneConfig,
    pub baseline_mm: f64,
    pub color_jitter: f32,
    pub occlusion_threshold_px: f32,
    /// Worker threads; scenes are independent.
    pub workers: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            scenes: 8,
            slices: 10,
            seed: 0,
            scene: SceneConfig::default(),
            baseline_mm: 10.0,
            color_jitter: 0.05,
            occlusion_threshold_px: DEFAULT_OCCLUSION_THRESHOLD_PX,
            workers: 1,
        }
    }
}

/// Seed of scene `index` in a dataset seeded with `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

pub fn scene_dir_name(index: usize) -> String {
    format!("scene_{index:04}")
}

pub fn slice_file_name(index: usize) -> String {
    format!("w_{index:03}.png")
}

fn rig_for(cfg: &GenConfig, seed: u64) -> CameraRig {
    let mut rig = CameraRig::default_for(cfg.scene.width, cfg.scene.height);
    rig.baseline_mm = cfg.baseline_mm;
    rig.color_transform = if cfg.color_jitter > 0.0 {
        ColorTransform::white_balance(cfg.color_jitter, seed)
    } else {
        ColorTransform::identity()
    };
    rig
}

/// Renders scene `index` and writes its folder under `out`.
pub fn write_scene(out: &Path, cfg: &GenConfig, index: usize) -> Result<PathBuf> {
    let seed = scene_seed(cfg.seed, index);
    let rig = rig_for(cfg, seed);
    let scene = generate_scene(seed, &cfg.scene, &rig.w_cam)?;
    let stack = generate_stack(&scene, &rig, cfg.slices)?;
    let uw = stack.uw();

    let final_dir = out.join(scene_dir_name(index));
    let tmp = out.join(format!(".{}.tmp{}", scene_dir_name(index), std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;

    write_png(&tmp.join("aif.png"), stack.aif_image())?;
    write_raw(&tmp.join("depth.raw"), &scene.depth.0)?;
    let mut slices = Vec::with_capacity(stack.slices.len());
    for (i, s) in stack.slices.iter().enumerate() {
        let file = slice_file_name(i);
        write_png(&tmp.join(&file), &s.w_slice)?;
        slices.push(SliceMeta {
            file,
            focus_distance_mm: s.lens_w.focus_distance_mm,
        });
    }
    write_png(&tmp.join("uw.png"), &uw.frame)?;
    write_warp(&tmp.join("warp.raw"), &uw.true_warp)?;
    write_png(&tmp.join("occlusion.png"), &stack.estimated_occlusion(cfg.occlusion_threshold_px))?;
    write_png(&tmp.join("occlusion_gt.png"), &uw.occlusion_mask)?;
    let meta = SceneMeta {
        version: META_VERSION,
        dataset_seed: cfg.seed,
        index,
        scene_seed: seed,
        scene: cfg.scene,
        rig,
        slices,
        occlusion_threshold_px: cfg.occlusion_threshold_px,
    };
    let meta_path = tmp.join("meta.json");
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(io_err(&meta_path))?;

    if final_dir.exists() {
        fs::remove_dir_all(&final_dir).map_err(io_err(&final_dir))?;
    }
    fs::rename(&tmp, &final_dir).map_err(io_err(&final_dir))?;
    Ok(final_dir)
}

/// Writes every scene of `cfg` under `out`, spreading scenes over
/// `cfg.workers` threads. Returns the scene folders in index order.
pub fn generate_dataset(out: &Path, cfg: &GenConfig) -> Result<Vec<PathBuf>> {
    if cfg.scenes == 0 {
        return Err(Error::Invalid("a dataset needs at least one scene".into()));
    }
    if cfg.slices < 2 {
        return Err(Error::Invalid(format!("need at least 2 slices per scene, got {}", cfg.slices)));
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let workers = cfg.workers.clamp(1, cfg.scenes);
    let results: Vec<Vec<(usize, Result<PathBuf>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    (w..cfg.scenes)
                        .step_by(workers)
                        .map(|i| (i, write_scene(out, cfg, i)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scene worker panicked")).collect()
    });
    let mut all: Vec<(usize, Result<PathBuf>)> = results.into_iter().flatten().collect();
    all.sort_by_key(|(i, _)| *i);
    all.into_iter().map(|(_, r)| r).collect()
}

pub fn read_meta(dir: &Path) -> Result<SceneMeta> {
    let path = dir.join("meta.json");
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// A scene read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub name: String,
    pub meta: SceneMeta,
    pub stack: SceneStack,
    /// Raw ultra-wide frame before warping.
    pub uw_frame: Image,
}

/// Reads one scene folder. Defocus maps are recomputed from the stored
/// depth, rig and focus distances; the ultra-wide frame is warped with the
/// stored ground-truth field.
pub fn load_scene(dir: &Path) -> Result<LoadedScene> {
    let meta = read_meta(dir)?;
    if meta.version != META_VERSION {
        return Err(Error::Format {
            what: "meta.json",
            detail: format!("unsupported version {}", meta.version),
        });
    }
    let cam = meta.rig.w_cam;
    let aif = to_rgb(read_png(&dir.join("aif.png"))?);
    let depth_img = read_raw(&dir.join("depth.raw"))?;
    let (w, h) = depth_img.dims();
    let depth = DepthMap::new(w, h, depth_img.into_vec())?;
    let mut slices = Vec::with_capacity(meta.slices.len());
    let mut defocus = Vec::with_capacity(meta.slices.len());
    for s in &meta.slices {
        slices.push(to_rgb(read_png(&dir.join(&s.file))?));
        defocus.push(defocus_map(&cam, &LensState::new(s.focus_distance_mm), &depth)?.radii);
    }
    let uw_frame = to_rgb(read_png(&dir.join("uw.png"))?);
    let field = read_warp(&dir.join("warp.raw"))?;
    let occlusion = to_gray(read_png(&dir.join("occlusion.png"))?);
    let stack = SceneStack {
        aif,
        slices,
        defocus,
        focus_mm: meta.slices.iter().map(|s| s.focus_distance_mm).collect(),
        uw_warped: warp(&uw_frame, &field).image,
        occlusion,
        depth,
        camera: cam,
    };
    stack.validate()?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(LoadedScene {
        name,
        meta,
        stack,
        uw_frame,
    })
}

/// Scene folders under `root` (any directory holding a `meta.json`), sorted
/// by name. Temporary folders of interrupted writers are skipped.
pub fn scene_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let path = entry.map_err(io_err(root))?.path();
        let hidden = path.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.'));
        if !hidden && path.join("meta.json").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Invalid(format!("no scenes found under {}", root.display())));
    }
    Ok(dirs)
}

pub fn load_dataset(root: &Path) -> Result<Vec<LoadedScene>> {
    scene_dirs(root)?.iter().map(|d| load_scene(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            scenes: 2,
            slices: 3,
            seed: 7,
            scene: SceneConfig {
                width: 48,
                height: 40,
                ..SceneConfig::default()
            },
            ..GenConfig::default()
        }
    }

    #[test]
    fn writes_and_reloads_scenes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let dirs = generate_dataset(dir.path(), &cfg).unwrap();
        assert_eq!(dirs.len(), 2);
        for (i, d) in dirs.iter().enumerate() {
            assert_eq!(d.file_name().unwrap().to_str().unwrap(), scene_dir_name(i));
            for f in ["aif.png", "depth.raw", "uw.png", "warp.raw", "occlusion.png", "meta.json"] {
                assert!(d.join(f).is_file(), "{f} missing");
            }
            let scene = load_scene(d).unwrap();
            assert_eq!(scene.stack.slices.len(), 3);
            assert_eq!(scene.stack.dims(), (48, 40));
            let f = &scene.stack.focus_mm;
            assert!(f.windows(2).all(|p| p[0] < p[1]));
        }
        // no temporary folders left behind
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 2);
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut cfg = small();
        cfg.scenes = 1;
        generate_dataset(a.path(), &cfg).unwrap();
        cfg.workers = 3;
        generate_dataset(b.path(), &cfg).unwrap();
        for f in ["aif.png", "w_002.png", "uw.png", "warp.raw", "meta.json"] {
            let p = Path::new("scene_0000").join(f);
            assert_eq!(fs::read(a.path().join(&p)).unwrap(), fs::read(b.path().join(&p)).unwrap());
        }
    }
}
