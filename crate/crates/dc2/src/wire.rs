//! JSON payloads of the HTTP API. Images travel as base64 PNG, depth and
//! defocus maps as base64 of the raw float format.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use dc2_core::optics::DepthMap;
use dc2_core::spec::{DefocusSpec, TiltShift, DEFAULT_MAX_RADIUS_PX};
use dc2_core::synth::CameraRig;
use dc2_core::Image;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{decode_png, decode_raw, decode_warp, to_gray};
use crate::session::{SessionInput, SessionMeta, UwInput};

pub fn b64_decode(field: &str, s: &str) -> Result<Vec<u8>> {
    STANDARD
        .decode(s.trim())
        .map_err(|e| Error::Invalid(format!("{field}: invalid base64: {e}")))
}

pub fn b64_encode(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

fn png_field(field: &str, s: &str) -> Result<Image> {
    decode_png(&b64_decode(field, s)?).map_err(|e| Error::Invalid(format!("{field}: {e}")))
}

fn raw_field(field: &str, s: &str) -> Result<Image> {
    decode_raw(&b64_decode(field, s)?).map_err(|e| Error::Invalid(format!("{field}: {e}")))
}

/// Defocus spec as sent over the wire (and accepted in CLI config files).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum WireSpec {
    Physical {
        aperture_mm: f64,
        focus_distance_mm: f64,
    },
    Zeros,
    Tiltshift(TiltShift),
    Masked {
        /// Base64 PNG; values above one half are foreground.
        mask_png: String,
        fg_radius_px: f32,
        bg_radius_px: f32,
    },
    Explicit {
        /// Base64 raw float plane of radii in pixels.
        map_raw: String,
    },
}

impl WireSpec {
    pub fn to_spec(&self) -> Result<DefocusSpec> {
        Ok(match self {
            WireSpec::Physical {
                aperture_mm,
                focus_distance_mm,
            } => DefocusSpec::Physical {
                aperture_mm: *aperture_mm,
                focus_distance_mm: *focus_distance_mm,
            },
            WireSpec::Zeros => DefocusSpec::Zeros,
            WireSpec::Tiltshift(t) => DefocusSpec::Tiltshift(*t),
            WireSpec::Masked {
                mask_png,
                fg_radius_px,
                bg_radius_px,
            } => DefocusSpec::Masked {
                mask: to_gray(png_field("mask_png", mask_png)?),
                fg_radius_px: *fg_radius_px,
                bg_radius_px: *bg_radius_px,
            },
            WireSpec::Explicit { map_raw } => DefocusSpec::Explicit {
                map: raw_field("map_raw", map_raw)?,
            },
        })
    }
}

fn default_max_radius() -> f32 {
    DEFAULT_MAX_RADIUS_PX
}

/// Body of `/defocus-map` and `/render`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderRequest {
    pub spec: WireSpec,
    #[serde(default = "default_max_radius")]
    pub max_radius_px: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_id: String,
    pub session_id: String,
    pub spec: WireSpec,
    pub max_radius_px: f32,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderResponse {
    pub image_png: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefocusMapResponse {
    /// Radii scaled so `max_radius_px` is white.
    pub preview_png: String,
    /// Exact radii in the raw float format.
    pub map_raw: String,
    pub max_radius_px: f32,
}

/// Body of `POST /sessions`. Send `uw` for a raw ultra-wide frame (aligned
/// on the server), `uw` + `warp_raw` to warp with a known field, or
/// `uw_warped` + `occlusion_png` for planes already on the wide grid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub w_png: String,
    #[serde(default)]
    pub uw_png: Option<String>,
    #[serde(default)]
    pub warp_raw: Option<String>,
    #[serde(default)]
    pub uw_warped_png: Option<String>,
    #[serde(default)]
    pub occlusion_png: Option<String>,
    #[serde(default)]
    pub depth_raw: Option<String>,
    #[serde(default)]
    pub rig: Option<CameraRig>,
    #[serde(default)]
    pub ref_focus_mm: Option<f64>,
    #[serde(default)]
    pub ref_aperture_mm: Option<f64>,
}

impl CreateSession {
    pub fn to_input(&self) -> Result<SessionInput> {
        let w = png_field("w_png", &self.w_png)?;
        let occlusion = self
            .occlusion_png
            .as_deref()
            .map(|s| png_field("occlusion_png", s))
            .transpose()?;
        let uw = match (&self.uw_png, &self.warp_raw, &self.uw_warped_png) {
            (Some(uw), None, None) => UwInput::Raw(png_field("uw_png", uw)?),
            (Some(uw), Some(field), None) => UwInput::Field {
                frame: png_field("uw_png", uw)?,
                field: decode_warp(&b64_decode("warp_raw", field)?)
                    .map_err(|e| Error::Invalid(format!("warp_raw: {e}")))?,
                occlusion,
            },
            (None, None, Some(warped)) => UwInput::Prewarped {
                warped: png_field("uw_warped_png", warped)?,
                occlusion: occlusion
                    .ok_or_else(|| Error::Invalid("uw_warped_png needs occlusion_png".into()))?,
            },
            _ => {
                return Err(Error::Invalid(
                    "send uw_png, uw_png + warp_raw, or uw_warped_png + occlusion_png".into(),
                ))
            }
        };
        let depth = match &self.depth_raw {
            Some(s) => {
                let img = raw_field("depth_raw", s)?;
                let (w, h) = img.dims();
                Some(DepthMap::new(w, h, img.into_vec()).map_err(|e| Error::Invalid(format!("depth_raw: {e}")))?)
            }
            None => None,
        };
        Ok(SessionInput {
            w,
            uw,
            depth,
            rig: self.rig,
            ref_focus_mm: self.ref_focus_mm,
            ref_aperture_mm: self.ref_aperture_mm,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionList {
    pub sessions: Vec<SessionMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_json_shapes() {
        let s: WireSpec = serde_json::from_str(r#"{"type":"zeros"}"#).unwrap();
        assert_eq!(s, WireSpec::Zeros);
        let s: WireSpec =
            serde_json::from_str(r#"{"type":"tiltshift","slope_px_per_px":0.05,"max_radius_px":8}"#).unwrap();
        match s.to_spec().unwrap() {
            DefocusSpec::Tiltshift(t) => {
                assert_eq!(t.point, None);
                assert_eq!(t.slope_px_per_px, 0.05);
            }
            other => panic!("unexpected {other:?}"),
        }
        let r: RenderRequest =
            serde_json::from_str(r#"{"spec":{"type":"physical","aperture_mm":2,"focus_distance_mm":800}}"#).unwrap();
        assert_eq!(r.max_radius_px, DEFAULT_MAX_RADIUS_PX);
    }

    #[test]
    fn bad_payloads_are_invalid() {
        let s = WireSpec::Masked {
            mask_png: "!!".into(),
            fg_radius_px: 0.0,
            bg_radius_px: 4.0,
        };
        assert!(matches!(s.to_spec(), Err(Error::Invalid(_))));
        let c = CreateSession {
            w_png: b64_encode(b"garbage"),
            ..CreateSession::default()
        };
        assert!(matches!(c.to_input(), Err(Error::Invalid(_))));
    }
}
