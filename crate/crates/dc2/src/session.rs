//! Render sessions: one wide capture with its aligned ultra-wide planes,
//! persisted as a folder per session.
//!
//! The planes a session renders from are quantized to 8 bits exactly as
//! they are stored, so an in-memory session (CLI) and a stored one
//! (service) produce identical renders.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use dc2_core::align::{align_uw_to_wide, warp, BlockMatchConfig, WarpField, DEFAULT_OCCLUSION_THRESHOLD_PX};
use dc2_core::dfnet::Dfnet;
use dc2_core::optics::{defocus_map, DefocusMap, DepthMap, LensState};
use dc2_core::spec::{build_defocus_map, render, DefocusSpec, RenderPlanes, SpecContext, TileConfig};
use dc2_core::synth::CameraRig;
use dc2_core::Image;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::formats::{read_png, read_raw, to_gray, to_rgb, write_png, write_raw};

/// How the ultra-wide frame reached the wide grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UwSource {
    /// Raw frame aligned by intrinsics prewarp and block matching.
    Raw,
    /// Raw frame warped with a supplied displacement field.
    Field,
    /// Planes supplied already aligned.
    Prewarped,
}

/// Ultra-wide data supplied when creating a session.
#[derive(Debug, Clone)]
pub enum UwInput {
    Raw(Image),
    Field {
        frame: Image,
        field: WarpField,
        /// Pixels with an invalid displacement are occluded if absent.
        occlusion: Option<Image>,
    },
    Prewarped { warped: Image, occlusion: Image },
}

#[derive(Debug, Clone)]
pub struct SessionInput {
    pub w: Image,
    pub uw: UwInput,
    pub depth: Option<DepthMap>,
    /// Defaults to [`CameraRig::default_for`] the wide image size.
    pub rig: Option<CameraRig>,
    /// Focus distance the wide image was captured at. Without it (or
    /// without depth) the wide image is treated as all in focus.
    pub ref_focus_mm: Option<f64>,
    /// Defaults to the rig's wide aperture.
    pub ref_aperture_mm: Option<f64>,
}

/// Contents of `session.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub id: String,
    pub created_unix_ms: u64,
    pub width: usize,
    pub height: usize,
    pub rig: CameraRig,
    pub ref_focus_mm: Option<f64>,
    pub ref_aperture_mm: f64,
    pub has_depth: bool,
    pub uw_source: UwSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub meta: SessionMeta,
    pub w: Image,
    pub uw_warped: Image,
    pub occlusion: Image,
    pub depth: Option<DepthMap>,
}

/// Rounds to the nearest 8-bit level, as a PNG round trip would.
pub fn quantize8(img: &Image) -> Image {
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

fn check(what: &str, expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected != found {
        return Err(Error::Invalid(format!(
            "{what} is {}x{} but the wide image is {}x{}",
            found.0, found.1, expected.0, expected.1
        )));
    }
    Ok(())
}

impl Session {
    /// Aligns the ultra-wide input if needed and validates every plane.
    pub fn build(id: String, created_unix_ms: u64, input: SessionInput) -> Result<Self> {
        let w = quantize8(&to_rgb(input.w));
        let dims = w.dims();
        if dims.0 == 0 || dims.1 == 0 {
            return Err(Error::Invalid("wide image has no pixels".into()));
        }
        let rig = input.rig.unwrap_or_else(|| CameraRig::default_for(dims.0, dims.1));
        rig.validate()?;
        check("rig wide camera", dims, rig.w_cam.dims())?;
        if let Some(d) = &input.depth {
            check("depth", dims, d.dims())?;
        }
        let (uw_warped, occlusion, uw_source) = match input.uw {
            UwInput::Raw(frame) => {
                let frame = to_rgb(frame);
                if frame.dims() != rig.uw_cam.dims() {
                    return Err(Error::Invalid(format!(
                        "ultra-wide frame is {}x{} but the rig expects {}x{}",
                        frame.width(),
                        frame.height(),
                        rig.uw_cam.width_px,
                        rig.uw_cam.height_px
                    )));
                }
                let a = align_uw_to_wide(
                    &w,
                    &frame,
                    &rig.w_cam,
                    &rig.uw_cam,
                    &BlockMatchConfig::default(),
                    DEFAULT_OCCLUSION_THRESHOLD_PX,
                )?;
                (a.warped, a.occlusion, UwSource::Raw)
            }
            UwInput::Field { frame, field, occlusion } => {
                check("warp field", dims, field.dims())?;
                let warped = warp(&to_rgb(frame), &field);
                let occ = match occlusion {
                    Some(o) => to_gray(o),
                    None => Image::from_vec(
                        dims.0,
                        dims.1,
                        1,
                        warped.valid.iter().map(|&v| if v { 0.0 } else { 1.0 }).collect(),
                    )?,
                };
                (warped.image, occ, UwSource::Field)
            }
            UwInput::Prewarped { warped, occlusion } => (to_rgb(warped), to_gray(occlusion), UwSource::Prewarped),
        };
        check("warped ultra-wide", dims, uw_warped.dims())?;
        check("occlusion", dims, occlusion.dims())?;
        let ref_aperture_mm = input.ref_aperture_mm.unwrap_or(rig.w_cam.aperture_diameter_mm);
        Ok(Self {
            meta: SessionMeta {
                id,
                created_unix_ms,
                width: dims.0,
                height: dims.1,
                rig,
                ref_focus_mm: input.ref_focus_mm,
                ref_aperture_mm,
                has_depth: input.depth.is_some(),
                uw_source,
            },
            w,
            uw_warped: quantize8(&uw_warped),
            occlusion: quantize8(&occlusion),
            depth: input.depth,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.w.dims()
    }

    /// Defocus of the wide image as captured: thin-lens radii at the
    /// reference focus if known, zero otherwise.
    pub fn ref_defocus(&self) -> Result<DefocusMap> {
        let (w, h) = self.dims();
        match (&self.depth, self.meta.ref_focus_mm) {
            (Some(depth), Some(focus)) => {
                let cam = self.meta.rig.w_cam.with_aperture(self.meta.ref_aperture_mm);
                Ok(defocus_map(&cam, &LensState::new(focus), depth)?)
            }
            _ => Ok(DefocusMap::zeros(w, h)),
        }
    }

    pub fn target_defocus(&self, spec: &DefocusSpec, max_radius_px: f32) -> Result<DefocusMap> {
        let ctx = SpecContext {
            dims: self.dims(),
            depth: self.depth.as_ref(),
            camera: Some(&self.meta.rig.w_cam),
            max_radius_px,
        };
        Ok(build_defocus_map(spec, &ctx)?)
    }

    /// The one render path shared by the CLI and the service.
    pub fn render(&self, model: &Dfnet<f32>, spec: &DefocusSpec, max_radius_px: f32, tiles: &TileConfig) -> Result<Image> {
        let reference = self.ref_defocus()?;
        let target = self.target_defocus(spec, max_radius_px)?;
        let planes = RenderPlanes {
            w_image: &self.w,
            uw_warped: &self.uw_warped,
            occlusion: &self.occlusion,
            ref_defocus: &reference.radii,
            tgt_defocus: &target.radii,
        };
        Ok(render(model, &planes, tiles)?.clamp01())
    }

    fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_png(&dir.join("w.png"), &self.w)?;
        write_png(&dir.join("uw_warped.png"), &self.uw_warped)?;
        write_png(&dir.join("occlusion.png"), &self.occlusion)?;
        if let Some(d) = &self.depth {
            write_raw(&dir.join("depth.raw"), &d.0)?;
        }
        let meta = dir.join("session.json");
        fs::write(&meta, serde_json::to_vec_pretty(&self.meta)?).map_err(io_err(&meta))
    }

    fn read_from(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("session.json");
        let meta: SessionMeta =
            serde_json::from_slice(&fs::read(&meta_path).map_err(io_err(&meta_path))?)?;
        let depth = if meta.has_depth {
            let img = read_raw(&dir.join("depth.raw"))?;
            let (w, h) = img.dims();
            Some(DepthMap::new(w, h, img.into_vec())?)
        } else {
            None
        };
        Ok(Self {
            w: to_rgb(read_png(&dir.join("w.png"))?),
            uw_warped: to_rgb(read_png(&dir.join("uw_warped.png"))?),
            occlusion: to_gray(read_png(&dir.join("occlusion.png"))?),
            depth,
            meta,
        })
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Folder-per-session store with per-session locking.
pub struct SessionStore {
    root: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    counter: AtomicU64,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
}

impl SessionStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Self {
            root,
            locks: Mutex::new(HashMap::new()),
            counter: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn lock_for(&self, id: &str) -> Arc<Mutex<()>> {
        let mut map = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        map.entry(id.to_string()).or_default().clone()
    }

    fn dir(&self, id: &str) -> Result<PathBuf> {
        if !valid_id(id) {
            return Err(Error::NotFound(format!("session {id:?}")));
        }
        Ok(self.root.join(id))
    }

    fn fresh_id(&self) -> String {
        loop {
            let n = self.counter.fetch_add(1, Ordering::Relaxed);
            let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_nanos());
            let mut h = Sha256::new();
            h.update(nanos.to_le_bytes());
            h.update(std::process::id().to_le_bytes());
            h.update(n.to_le_bytes());
            h.update(self.root.to_string_lossy().as_bytes());
            let id = hex::encode(h.finalize())[..16].to_string();
            if !self.root.join(&id).exists() {
                return id;
            }
        }
    }

    /// Builds and persists a session, returning it.
    pub fn create(&self, input: SessionInput) -> Result<Session> {
        let id = self.fresh_id();
        let session = Session::build(id.clone(), now_ms(), input)?;
        let lock = self.lock_for(&id);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let tmp = self.root.join(format!(".{id}.tmp"));
        session.write_to(&tmp)?;
        let dir = self.root.join(&id);
        fs::rename(&tmp, &dir).map_err(io_err(&dir))?;
        Ok(session)
    }

    pub fn get(&self, id: &str) -> Result<Session> {
        let dir = self.dir(id)?;
        let lock = self.lock_for(id);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        if !dir.join("session.json").is_file() {
            return Err(Error::NotFound(format!("session {id}")));
        }
        Session::read_from(&dir)
    }

    pub fn list(&self) -> Result<Vec<SessionMeta>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(io_err(&self.root))? {
            let path = entry.map_err(io_err(&self.root))?.path();
            let meta_path = path.join("session.json");
            let hidden = path.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.'));
            if hidden || !meta_path.is_file() {
                continue;
            }
            let bytes = fs::read(&meta_path).map_err(io_err(&meta_path))?;
            out.push(serde_json::from_slice::<SessionMeta>(&bytes)?);
        }
        out.sort_by(|a, b| (a.created_unix_ms, &a.id).cmp(&(b.created_unix_ms, &b.id)));
        Ok(out)
    }

    pub fn delete(&self, id: &str) -> Result<()> {
        let dir = self.dir(id)?;
        let lock = self.lock_for(id);
        {
            let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
            if !dir.join("session.json").is_file() {
                return Err(Error::NotFound(format!("session {id}")));
            }
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        self.locks.lock().unwrap_or_else(|e| e.into_inner()).remove(id);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(w: usize, h: usize) -> SessionInput {
        let img = Image::from_fn(w, h, 3, |c, x, y| ((x * 7 + y * 3 + c * 40) % 256) as f32 / 255.0);
        let occ = Image::from_fn(w, h, 1, |_, x, _| if x < 3 { 1.0 } else { 0.0 });
        SessionInput {
            w: img.clone(),
            uw: UwInput::Prewarped {
                warped: img,
                occlusion: occ,
            },
            depth: Some(DepthMap::constant(w, h, 1500.0)),
            rig: None,
            ref_focus_mm: Some(800.0),
            ref_aperture_mm: None,
        }
    }

    #[test]
    fn store_roundtrip_and_delete() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        let a = store.create(input(16, 12)).unwrap();
        let b = store.create(input(16, 12)).unwrap();
        assert_ne!(a.meta.id, b.meta.id);
        assert_eq!(store.get(&a.meta.id).unwrap(), a);
        assert_eq!(store.list().unwrap().len(), 2);
        store.delete(&a.meta.id).unwrap();
        assert!(matches!(store.get(&a.meta.id), Err(Error::NotFound(_))));
        assert!(matches!(store.delete(&a.meta.id), Err(Error::NotFound(_))));
        assert!(matches!(store.get("../etc"), Err(Error::NotFound(_))));
    }

    #[test]
    fn mismatched_planes_are_rejected() {
        let mut bad = input(16, 12);
        bad.depth = Some(DepthMap::constant(15, 12, 1000.0));
        assert!(matches!(Session::build("x".into(), 0, bad), Err(Error::Invalid(_))));
    }

    #[test]
    fn ref_defocus_follows_lens_state() {
        let s = Session::build("x".into(), 0, input(8, 8)).unwrap();
        assert!(s.ref_defocus().unwrap().max_radius() > 0.0);
        let mut no_focus = input(8, 8);
        no_focus.ref_focus_mm = None;
        let s = Session::build("x".into(), 0, no_focus).unwrap();
        assert_eq!(s.ref_defocus().unwrap().max_radius(), 0.0);
    }
}
