//! Spherical geometry: equirectangular coordinates, view rotations, and
//! perspective extraction from panoramas.
//!
//! Conventions used throughout the crate:
//!
//! * The panorama frame is right-handed with `+x` forward, `+y` left and `+z`
//!   up. Longitude grows clockwise seen from above (towards `-y`), so moving
//!   right in the equirectangular image turns the viewer right, as in
//!   ordinary 360-degree footage. `u = 0.5 + lon / 2pi`, `v = 0.5 - lat / pi`.
//! * At the poles longitude is undefined; [`dir_to_equirect_uv`] reports
//!   `u = 0.5` there.
//! * Perspective cameras use the computer-vision frame: `+x` right, `+y` down,
//!   `+z` along the optical axis.
//! * A view with yaw `phi` is the forward axis rotated by `phi` about `+z`
//!   (towards `+y`), so it is centred on `u = 0.5 - phi / 2pi`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;

use image::{Rgb, RgbImage};
use nalgebra::{Matrix3, Rotation3, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ProjectionError {
    #[error("equirectangular coordinate out of range: u={u}, v={v}")]
    UvOutOfRange { u: f64, v: f64 },
    #[error("direction must be non-zero and finite")]
    DegenerateDirection,
    #[error("pitch {0} outside [-pi/2, pi/2]")]
    InvalidPitch(f64),
    #[error("yaw {0} is not finite")]
    InvalidYaw(f64),
    #[error("field of view {0} outside (0, pi)")]
    InvalidFov(f64),
    #[error("equirectangular image must be 2:1, got {width}x{height}")]
    NotEquirectangular { width: u32, height: u32 },
    #[error("output dimensions must be positive, got {height}x{width}")]
    DegenerateOutput { height: u32, width: u32 },
}

/// Viewing direction and horizontal field of view of a perspective view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewAngles {
    pitch: f64,
    yaw: f64,
    fov: f64,
}

impl ViewAngles {
    /// Validates pitch and fov and wraps yaw into `[0, 2pi)`.
    pub fn new(pitch: f64, yaw: f64, fov: f64) -> Result<Self, ProjectionError> {
        if !pitch.is_finite() || pitch.abs() > FRAC_PI_2 {
            return Err(ProjectionError::InvalidPitch(pitch));
        }
        if !yaw.is_finite() {
            return Err(ProjectionError::InvalidYaw(yaw));
        }
        if !(fov > 0.0 && fov < PI) {
            return Err(ProjectionError::InvalidFov(fov));
        }
        Ok(Self {
            pitch,
            yaw: wrap_angle(yaw),
            fov,
        })
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn fov(&self) -> f64 {
        self.fov
    }
}

/// Wraps an angle into `[0, 2pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Signed smallest difference `b - a` between two angles, in `(-pi, pi]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (b - a).rem_euclid(TAU);
    if d > PI {
        d - TAU
    } else {
        d
    }
}

/// Identifies one panorama frame of one video.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FrameId {
    pub video_id: String,
    pub timestamp_ms: u64,
}

impl FrameId {
    pub fn new(video_id: impl Into<String>, timestamp_ms: u64) -> Self {
        Self {
            video_id: video_id.into(),
            timestamp_ms,
        }
    }
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}ms", self.video_id, self.timestamp_ms)
    }
}

/// One equirectangular video frame. Width is always exactly twice the height.
#[derive(Debug, Clone)]
pub struct PanoFrame {
    id: FrameId,
    image: RgbImage,
}

impl PanoFrame {
    pub fn new(id: FrameId, image: RgbImage) -> Result<Self, ProjectionError> {
        let (width, height) = image.dimensions();
        if height == 0 || width != 2 * height {
            return Err(ProjectionError::NotEquirectangular { width, height });
        }
        Ok(Self { id, image })
    }

    pub fn id(&self) -> &FrameId {
        &self.id
    }

    pub fn image(&self) -> &RgbImage {
        &self.image
    }
}

/// Pinhole view extracted from a panorama.
#[derive(Debug, Clone)]
pub struct PerspectiveView {
    pub source: FrameId,
    pub angles: ViewAngles,
    pub image: RgbImage,
}

impl PerspectiveView {
    pub fn height(&self) -> usize {
        self.image.height() as usize
    }

    pub fn width(&self) -> usize {
        self.image.width() as usize
    }

    pub fn geometry(&self) -> PinholeGeometry {
        PinholeGeometry::new(self.angles.fov, self.height(), self.width())
    }
}

/// Maps equirectangular image fractions to a unit direction in the panorama frame.
pub fn equirect_uv_to_dir(u: f64, v: f64) -> Result<Vector3<f64>, ProjectionError> {
    if !(0.0..1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
        return Err(ProjectionError::UvOutOfRange { u, v });
    }
    Ok(uv_to_dir_unchecked(u, v))
}

pub(crate) fn uv_to_dir_unchecked(u: f64, v: f64) -> Vector3<f64> {
    let lon = (u - 0.5) * TAU;
    let lat = (0.5 - v) * PI;
    let (sin_lat, cos_lat) = lat.sin_cos();
    let (sin_lon, cos_lon) = lon.sin_cos();
    Vector3::new(cos_lat * cos_lon, -cos_lat * sin_lon, sin_lat)
}

/// Inverse of [`equirect_uv_to_dir`]; `u` wraps into `[0, 1)`.
///
/// The input need not be exactly unit length; it is only required to be
/// non-zero and finite.
pub fn dir_to_equirect_uv(d: &Vector3<f64>) -> Result<(f64, f64), ProjectionError> {
    let n = d.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(ProjectionError::DegenerateDirection);
    }
    Ok(dir_to_uv_unchecked(d))
}

pub(crate) fn dir_to_uv_unchecked(d: &Vector3<f64>) -> (f64, f64) {
    let horiz = (d.x * d.x + d.y * d.y).sqrt();
    let lat = d.z.atan2(horiz);
    let v = 0.5 - lat / PI;
    if horiz <= f64::EPSILON * d.z.abs() {
        return (0.5, v);
    }
    let lon = (-d.y).atan2(d.x);
    let mut u = 0.5 + lon / TAU;
    if u >= 1.0 {
        u -= 1.0;
    }
    (u, v)
}

/// Rotation taking view-local coordinates (forward, left, up) to the
/// panorama frame: yaw about `+z` first, then pitch about the rotated
/// lateral axis. Positive pitch looks up.
pub fn rotation_from_angles(angles: &ViewAngles) -> Rotation3<f64> {
    let yaw = Rotation3::from_axis_angle(&Vector3::z_axis(), angles.yaw);
    let pitch = Rotation3::from_axis_angle(&Vector3::y_axis(), -angles.pitch);
    yaw * pitch
}

/// Change of basis from the computer-vision camera frame to the view-local
/// (forward, left, up) frame.
pub fn cv_to_local() -> Rotation3<f64> {
    Rotation3::from_matrix_unchecked(Matrix3::new(
        0.0, 0.0, 1.0, //
        -1.0, 0.0, 0.0, //
        0.0, -1.0, 0.0,
    ))
}

/// Rotation taking computer-vision camera coordinates of a view into the
/// panorama frame.
pub fn view_to_pano(angles: &ViewAngles) -> Rotation3<f64> {
    rotation_from_angles(angles) * cv_to_local()
}

/// Square-pixel pinhole intrinsics derived from a horizontal field of view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeGeometry {
    pub height: usize,
    pub width: usize,
    pub focal: f64,
}

impl PinholeGeometry {
    pub fn new(fov: f64, height: usize, width: usize) -> Self {
        let focal = 0.5 * width as f64 / (0.5 * fov).tan();
        Self {
            height,
            width,
            focal,
        }
    }

    /// Camera-frame ray (z = 1) through the continuous image point `(x, y)`,
    /// where pixel `(row, col)` has its centre at `(col + 0.5, row + 0.5)`.
    pub fn ray_at(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new(
            (x - 0.5 * self.width as f64) / self.focal,
            (y - 0.5 * self.height as f64) / self.focal,
            1.0,
        )
    }

    pub fn pixel_ray(&self, row: usize, col: usize) -> Vector3<f64> {
        self.ray_at(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Projects a camera-frame point to continuous image coordinates, or
    /// `None` when it is behind the camera or outside the image.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        let x = self.focal * p.x / p.z + 0.5 * self.width as f64;
        let y = self.focal * p.y / p.z + 0.5 * self.height as f64;
        let inside = (0.0..=self.width as f64).contains(&x) && (0.0..=self.height as f64).contains(&y);
        inside.then_some((x, y))
    }
}

/// Bilinear lookup in an equirectangular image, wrapping horizontally and
/// clamping vertically. Returns channel values in `[0, 255]`.
pub fn sample_bilinear(pano: &RgbImage, u: f64, v: f64) -> [f64; 3] {
    let (w, h) = pano.dimensions();
    let px = u * f64::from(w) - 0.5;
    let py = (v * f64::from(h) - 0.5).clamp(0.0, f64::from(h - 1));
    let x0f = px.floor();
    let fx = px - x0f;
    let x0 = (x0f as i64).rem_euclid(i64::from(w)) as usize;
    let x1 = if x0 + 1 == w as usize { 0 } else { x0 + 1 };
    let y0f = py.floor();
    let fy = py - y0f;
    let y0 = y0f as usize;
    let y1 = (y0 + 1).min(h as usize - 1);

    let raw: &[u8] = pano.as_raw();
    let stride = 3 * w as usize;
    let at = |x: usize, y: usize, c: usize| f64::from(raw[y * stride + 3 * x + c]);
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let top = at(x0, y0, c) * (1.0 - fx) + at(x1, y0, c) * fx;
        let bottom = at(x0, y1, c) * (1.0 - fx) + at(x1, y1, c) * fx;
        *o = top * (1.0 - fy) + bottom * fy;
    }
    out
}

pub(crate) fn to_rgb8(c: [f64; 3]) -> Rgb<u8> {
    Rgb(c.map(|x| (x + 0.5).floor().clamp(0.0, 255.0) as u8))
}

/// Renders the perspective view of `pano` looking along `angles`.
pub fn project(
    pano: &PanoFrame,
    angles: ViewAngles,
    out_h: u32,
    out_w: u32,
) -> Result<PerspectiveView, ProjectionError> {
    if out_h == 0 || out_w == 0 {
        return Err(ProjectionError::DegenerateOutput {
            height: out_h,
            width: out_w,
        });
    }
    let geom = PinholeGeometry::new(angles.fov, out_h as usize, out_w as usize);
    let rot = view_to_pano(&angles);
    let image = RgbImage::from_fn(out_w, out_h, |col, row| {
        let d = rot * geom.pixel_ray(row as usize, col as usize);
        let (u, v) = dir_to_uv_unchecked(&d);
        to_rgb8(sample_bilinear(&pano.image, u, v))
    });
    Ok(PerspectiveView {
        source: pano.id.clone(),
        angles,
        image,
    })
}

/// Yaws of the four cardinal views, in output order.
pub const CARDINAL_YAWS: [f64; 4] = [0.0, FRAC_PI_2, PI, 3.0 * FRAC_PI_2];

/// The four horizontal views at pitch zero and yaw `0, pi/2, pi, 3pi/2`.
pub fn cardinal_angles(fov: f64) -> Result<[ViewAngles; 4], ProjectionError> {
    let mut out = [ViewAngles::new(0.0, 0.0, fov)?; 4];
    for (slot, yaw) in out.iter_mut().zip(CARDINAL_YAWS) {
        *slot = ViewAngles::new(0.0, yaw, fov)?;
    }
    Ok(out)
}

pub fn cardinal_views(
    pano: &PanoFrame,
    fov: f64,
    out_h: u32,
    out_w: u32,
) -> Result<Vec<PerspectiveView>, ProjectionError> {
    cardinal_angles(fov)?
        .into_iter()
        .map(|angles| project(pano, angles, out_h, out_w))
        .collect()
}
