//! Thin-lens defocus: circle-of-confusion radii, defocus maps and focus sweeps.
//!
//! Distances are in millimetres. A defocus map stores the absolute CoC radius
//! in sensor pixels for every pixel of the image it describes.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::image::Image;

/// Intrinsics and aperture of one camera of the rig.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal_length_mm: f64,
    /// Aperture diameter `A`. Zero models a pinhole.
    pub aperture_diameter_mm: f64,
    pub pixel_pitch_mm_per_px: f64,
    pub width_px: usize,
    pub height_px: usize,
    pub principal_point_px: (f64, f64),
}

impl CameraIntrinsics {
    /// Intrinsics with the principal point at the image centre.
    pub fn centered(
        focal_length_mm: f64,
        aperture_diameter_mm: f64,
        pixel_pitch_mm_per_px: f64,
        width_px: usize,
        height_px: usize,
    ) -> Self {
        Self {
            focal_length_mm,
            aperture_diameter_mm,
            pixel_pitch_mm_per_px,
            width_px,
            height_px,
            principal_point_px: ((width_px as f64 - 1.0) / 2.0, (height_px as f64 - 1.0) / 2.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_length_mm > 0.0 && self.focal_length_mm.is_finite()) {
            return Err(Error::Domain(format!(
                "focal length must be positive, got {}",
                self.focal_length_mm
            )));
        }
        if !(self.aperture_diameter_mm >= 0.0 && self.aperture_diameter_mm.is_finite()) {
            return Err(Error::Domain(format!(
                "aperture must be non-negative, got {}",
                self.aperture_diameter_mm
            )));
        }
        if !(self.pixel_pitch_mm_per_px > 0.0 && self.pixel_pitch_mm_per_px.is_finite()) {
            return Err(Error::Domain(format!(
                "pixel pitch must be positive, got {}",
                self.pixel_pitch_mm_per_px
            )));
        }
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::Domain("image dimensions must be positive".into()));
        }
        let (cx, cy) = self.principal_point_px;
        if !(cx >= 0.0 && cy >= 0.0 && cx <= self.width_px as f64 && cy <= self.height_px as f64)
        {
            return Err(Error::Domain(format!(
                "principal point ({cx}, {cy}) outside the image"
            )));
        }
        Ok(())
    }

    /// Focal length expressed in pixels.
    pub fn focal_px(&self) -> f64 {
        self.focal_length_mm / self.pixel_pitch_mm_per_px
    }

    /// f-number `N = f / A`, for display. Infinite for a pinhole.
    pub fn f_number(&self) -> f64 {
        self.focal_length_mm / self.aperture_diameter_mm
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width_px, self.height_px)
    }

    /// Returns a copy with a different aperture diameter.
    pub fn with_aperture(mut self, aperture_diameter_mm: f64) -> Self {
        self.aperture_diameter_mm = aperture_diameter_mm;
        self
    }
}

/// Focus state of a lens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LensState {
    pub focus_distance_mm: f64,
}

impl LensState {
    pub fn new(focus_distance_mm: f64) -> Self {
        Self { focus_distance_mm }
    }

    /// The focus distance must exceed the focal length, otherwise the
    /// thin-lens magnification term is undefined.
    pub fn validate_for(&self, cam: &CameraIntrinsics) -> Result<()> {
        if !(self.focus_distance_mm > cam.focal_length_mm && self.focus_distance_mm.is_finite()) {
            return Err(Error::Domain(format!(
                "focus distance {} mm must exceed focal length {} mm",
                self.focus_distance_mm, cam.focal_length_mm
            )));
        }
        Ok(())
    }
}

/// Per-pixel metric depth in millimetres. Non-finite or non-positive entries
/// are treated as missing.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap(pub Image);

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        Ok(Self(Image::from_vec(width, height, 1, data)?))
    }

    pub fn constant(width: usize, height: usize, depth_mm: f32) -> Self {
        Self(Image::filled(width, height, 1, depth_mm))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    pub fn is_valid_depth(d: f32) -> bool {
        d.is_finite() && d > 0.0
    }

    /// Smallest and largest valid depth, if any.
    pub fn range(&self) -> Option<(f32, f32)> {
        self.data()
            .iter()
            .copied()
            .filter(|&d| Self::is_valid_depth(d))
            .fold(None, |acc, d| match acc {
                None => Some((d, d)),
                Some((lo, hi)) => Some((lo.min(d), hi.max(d))),
            })
    }
}

/// Per-pixel absolute circle-of-confusion radius in pixels, with the validity
/// of the depth it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct DefocusMap {
    pub radii: Image,
    /// `false` where the source depth was missing; those radii are 0.
    pub valid: Vec<bool>,
}

impl DefocusMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            radii: Image::new(width, height, 1),
            valid: alloc::vec![true; width * height],
        }
    }

    /// Wraps explicit radii after checking they are finite and non-negative.
    pub fn from_radii(radii: Image) -> Result<Self> {
        if radii.channels() != 1 {
            return Err(Error::InvalidConfig("defocus map must have one channel".into()));
        }
        if let Some(bad) = radii.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Domain(format!("defocus radius {bad} is not a finite non-negative value")));
        }
        let n = radii.data().len();
        Ok(Self {
            radii,
            valid: alloc::vec![true; n],
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.radii.dims()
    }

    pub fn data(&self) -> &[f32] {
        self.radii.data()
    }

    pub fn max_radius(&self) -> f32 {
        self.data().iter().copied().fold(0.0, f32::max)
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        let radii = self.radii.crop(x0, y0, w, h)?;
        let sw = self.radii.width();
        let mut valid = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            valid.extend_from_slice(&self.valid[y * sw + x0..y * sw + x0 + w]);
        }
        Ok(Self { radii, valid })
    }

    /// Multiplies every radius by `k >= 0`.
    pub fn scaled(&self, k: f32) -> Self {
        Self {
            radii: self.radii.map(|v| v * k),
            valid: self.valid.clone(),
        }
    }
}

/// Circle-of-confusion radius on the sensor, in millimetres:
/// `c = A * |S2 - S1| / S2 * f / (S1 - f)`.
pub fn coc_radius_mm(cam: &CameraIntrinsics, lens: &LensState, depth_mm: f64) -> Result<f64> {
    if !(depth_mm > 0.0 && depth_mm.is_finite()) {
        return Err(Error::Domain(format!("depth must be positive, got {depth_mm}")));
    }
    lens.validate_for(cam)?;
    Ok(coc_unchecked(
        cam.aperture_diameter_mm,
        cam.focal_length_mm,
        lens.focus_distance_mm,
        depth_mm,
    ))
}

#[inline]
fn coc_unchecked(aperture: f64, focal: f64, focus: f64, depth: f64) -> f64 {
    aperture * ((depth - focus).abs() / depth) * (focal / (focus - focal))
}

/// Limit of the CoC radius (in pixels) as depth goes to infinity.
pub fn coc_limit_px(cam: &CameraIntrinsics, lens: &LensState) -> f64 {
    cam.aperture_diameter_mm * cam.focal_length_mm
        / ((lens.focus_distance_mm - cam.focal_length_mm) * cam.pixel_pitch_mm_per_px)
}

/// Applies [`coc_radius_mm`] at every pixel and converts to pixels. Missing
/// depths yield radius 0 and are flagged in [`DefocusMap::valid`].
pub fn defocus_map(cam: &CameraIntrinsics, lens: &LensState, depth: &DepthMap) -> Result<DefocusMap> {
    check_dims(cam.dims(), depth.dims())?;
    cam.validate()?;
    lens.validate_for(cam)?;
    let (w, h) = depth.dims();
    let mut radii = Image::new(w, h, 1);
    let mut valid = Vec::with_capacity(w * h);
    for (r, &d) in radii.data_mut().iter_mut().zip(depth.data()) {
        if DepthMap::is_valid_depth(d) {
            let c = coc_unchecked(
                cam.aperture_diameter_mm,
                cam.focal_length_mm,
                lens.focus_distance_mm,
                d as f64,
            );
            *r = (c / cam.pixel_pitch_mm_per_px) as f32;
            valid.push(true);
        } else {
            *r = 0.0;
            valid.push(false);
        }
    }
    Ok(DefocusMap { radii, valid })
}

/// `n` focus distances between `near_mm` and `far_mm`, uniformly spaced in
/// diopters and returned in ascending distance.
pub fn focus_sweep(
    cam: &CameraIntrinsics,
    near_mm: f64,
    far_mm: f64,
    n: usize,
) -> Result<Vec<LensState>> {
    if !(near_mm > cam.focal_length_mm && far_mm > near_mm && far_mm.is_finite()) {
        return Err(Error::Domain(format!(
            "focus sweep needs focal length {} < near {near_mm} < far {far_mm}",
            cam.focal_length_mm
        )));
    }
    if n < 2 {
        return Err(Error::Domain(format!("focus sweep needs at least 2 slices, got {n}")));
    }
    let (d_near, d_far) = (1.0 / near_mm, 1.0 / far_mm);
    Ok((0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let distance = match i {
                0 => near_mm,
                _ if i == n - 1 => far_mm,
                _ => 1.0 / (d_near + (d_far - d_near) * t),
            };
            LensState::new(distance)
        })
        .collect())
}

/// Inverse-distance interpolation between two focus distances, `t` in [0, 1].
pub fn lerp_diopter(a_mm: f64, b_mm: f64, t: f64) -> f64 {
    1.0 / (1.0 / a_mm + (1.0 / b_mm - 1.0 / a_mm) * t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::centered(6.8, 2.0, 0.01, 8, 6)
    }

    #[test]
    fn coc_is_zero_in_focus_and_for_pinhole() {
        let lens = LensState::new(1000.0);
        assert_eq!(coc_radius_mm(&cam(), &lens, 1000.0).unwrap(), 0.0);
        let pinhole = cam().with_aperture(0.0);
        assert_eq!(coc_radius_mm(&pinhole, &lens, 2345.0).unwrap(), 0.0);
    }

    #[test]
    fn coc_reference_value() {
        // 2.0 * (1000/2000) * (6.8/993.2)
        let c = coc_radius_mm(&cam(), &LensState::new(1000.0), 2000.0).unwrap();
        assert!((c - 0.006_846_556_584_776_48).abs() < 1e-15);
    }

    #[test]
    fn coc_domain_errors() {
        let lens = LensState::new(1000.0);
        assert!(coc_radius_mm(&cam(), &lens, 0.0).is_err());
        assert!(coc_radius_mm(&cam(), &lens, -5.0).is_err());
        assert!(coc_radius_mm(&cam(), &LensState::new(6.8), 100.0).is_err());
        assert!(coc_radius_mm(&cam(), &LensState::new(3.0), 100.0).is_err());
    }

    #[test]
    fn defocus_map_two_planes() {
        let lens = LensState::new(1000.0);
        let data: Vec<f32> = (0..48).map(|i| if i % 8 < 4 { 1000.0 } else { 2000.0 }).collect();
        let depth = DepthMap::new(8, 6, data).unwrap();
        let map = defocus_map(&cam(), &lens, &depth).unwrap();
        let expected = (coc_radius_mm(&cam(), &lens, 2000.0).unwrap() / 0.01) as f32;
        for (i, &r) in map.data().iter().enumerate() {
            if i % 8 < 4 {
                assert_eq!(r, 0.0);
            } else {
                assert_eq!(r, expected);
            }
        }
    }

    #[test]
    fn defocus_map_far_limit() {
        let lens = LensState::new(1000.0);
        let depth = DepthMap::constant(8, 6, 1e9);
        let map = defocus_map(&cam(), &lens, &depth).unwrap();
        let limit = coc_limit_px(&cam(), &lens) as f32;
        for &r in map.data() {
            assert!(((r - limit) / limit).abs() < 1e-3);
        }
    }

    #[test]
    fn defocus_map_flags_missing_depth() {
        let lens = LensState::new(1000.0);
        let mut data = alloc::vec![1500.0f32; 48];
        data[3] = f32::NAN;
        data[7] = 0.0;
        data[9] = -2.0;
        let map = defocus_map(&cam(), &lens, &DepthMap::new(8, 6, data).unwrap()).unwrap();
        for i in [3, 7, 9] {
            assert_eq!(map.data()[i], 0.0);
            assert!(!map.valid[i]);
        }
        assert!(map.valid[0] && map.data()[0] > 0.0);
    }

    #[test]
    fn defocus_map_rejects_mismatched_dims() {
        let depth = DepthMap::constant(4, 6, 1000.0);
        assert!(matches!(
            defocus_map(&cam(), &LensState::new(900.0), &depth),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn focus_sweep_examples() {
        let c = cam();
        let two: Vec<f64> = focus_sweep(&c, 500.0, 2000.0, 2)
            .unwrap()
            .iter()
            .map(|l| l.focus_distance_mm)
            .collect();
        assert_eq!(two, alloc::vec![500.0, 2000.0]);
        let three = focus_sweep(&c, 500.0, 2000.0, 3).unwrap();
        assert!((three[1].focus_distance_mm - 800.0).abs() < 1e-9);
        let five = focus_sweep(&c, 300.0, 5000.0, 5).unwrap();
        for pair in five.windows(2) {
            assert!(pair[1].focus_distance_mm > pair[0].focus_distance_mm);
        }
        assert!(focus_sweep(&c, 2000.0, 500.0, 3).is_err());
        assert!(focus_sweep(&c, 5.0, 500.0, 3).is_err());
        assert!(focus_sweep(&c, 500.0, 600.0, 1).is_err());
    }

    #[test]
    fn f_number_for_display() {
        assert!((cam().f_number() - 3.4).abs() < 1e-12);
    }
}
