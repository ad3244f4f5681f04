//! Synthetic 360-degree scenes with exact ground truth.
//!
//! A scene is a closed room (box or sphere) with checkerboard walls plus a few
//! spheres and boxes. Rays are cast analytically, so depth, relative pose and
//! co-visibility are known exactly and serve as oracles for the pipeline.

use std::f64::consts::{PI, TAU};

use image::RgbImage;
use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::projection::{to_rgb8, uv_to_dir_unchecked, view_to_pano, PinholeGeometry, ViewAngles};
use crate::raster::Grid;

/// Brightness factor applied to the dark checker squares.
const CHECKER_DARK: f64 = 0.6;
/// Minimum clearance between a camera path and any surface, meters.
const PATH_CLEARANCE: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("equirectangular render needs width = 2 * height > 0, got {width}x{height}")]
    InvalidDims { width: u32, height: u32 },
    #[error("camera path leaves the free space of the room at frame {frame}")]
    PathExitsRoom { frame: usize },
    #[error("trajectory needs at least one frame and a finite non-negative speed")]
    InvalidTrajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        color: [u8; 3],
    },
    Box {
        min: [f64; 3],
        max: [f64; 3],
        color: [u8; 3],
    },
}

/// Room enclosing the scene; cameras live inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Room {
    /// Axis-aligned box. Wall colors are ordered `-x, +x, -y, +y, -z, +z`.
    Box {
        min: [f64; 3],
        max: [f64; 3],
        wall_colors: [[u8; 3]; 6],
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        color: [u8; 3],
    },
}

fn default_checker() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room: Room,
    #[serde(default)]
    pub primitives: Vec<Primitive>,
    /// Checker square edge length, meters.
    #[serde(default = "default_checker")]
    pub checker_size: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub point: Vector3<f64>,
    /// Shaded color, channels in `[0, 255]`.
    pub color: [f64; 3],
}

#[derive(Debug, Clone, Copy)]
enum Surface {
    Wall(usize),
    RoomSphere,
    Sphere(usize),
    Box(usize, usize),
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn shade(color: [u8; 3], lit: bool) -> [f64; 3] {
    let k = if lit { 1.0 } else { CHECKER_DARK };
    color.map(|c| f64::from(c) * k)
}

fn parity(coords: &[f64], checker: f64) -> bool {
    let s: i64 = coords.iter().map(|c| (c / checker).floor() as i64).sum();
    s.rem_euclid(2) == 0
}

/// Nearest positive root of the ray/sphere equation; `inside` selects the far root.
fn sphere_t(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, r: f64, inside: bool) -> Option<f64> {
    let oc = o - c;
    let a = d.norm_squared();
    let b = oc.dot(d);
    let cc = oc.norm_squared() - r * r;
    let disc = b * b - a * cc;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    if inside {
        let t = (-b + sq) / a;
        (t > 0.0).then_some(t)
    } else {
        let t0 = (-b - sq) / a;
        let t1 = (-b + sq) / a;
        if t0 > 1e-12 {
            Some(t0)
        } else if t1 > 1e-12 && cc > 0.0 {
            Some(t1)
        } else {
            None
        }
    }
}

/// Slab test for a ray entering a box from outside. Returns `(t, axis)`.
fn box_entry(o: &Vector3<f64>, d: &Vector3<f64>, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Option<(f64, usize)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    for k in 0..3 {
        if d[k] == 0.0 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[k];
        let mut t0 = (lo[k] - o[k]) * inv;
        let mut t1 = (hi[k] - o[k]) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_near {
            t_near = t0;
            axis = k;
        }
        t_far = t_far.min(t1);
    }
    (t_near <= t_far && t_near > 1e-12).then_some((t_near, axis))
}

/// Exit point of a ray starting inside a box. Returns `(t, wall index)`.
fn box_exit(o: &Vector3<f64>, d: &Vector3<f64>, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for k in 0..3 {
        let (t, wall) = if d[k] > 0.0 {
            ((hi[k] - o[k]) / d[k], 2 * k + 1)
        } else if d[k] < 0.0 {
            ((lo[k] - o[k]) / d[k], 2 * k)
        } else {
            continue;
        };
        if best.map_or(true, |(bt, _)| t < bt) {
            best = Some((t, wall));
        }
    }
    best.filter(|(t, _)| *t > 0.0)
}

fn in_plane(p: &Vector3<f64>, axis: usize) -> [f64; 2] {
    match axis {
        0 => [p.y, p.z],
        1 => [p.x, p.z],
        _ => [p.x, p.y],
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidScene(m.to_string()));
        if !(self.checker_size > 0.0) || !self.checker_size.is_finite() {
            return bad("checker_size must be positive");
        }
        match &self.room {
            Room::Box { min, max, .. } => {
                if (0..3).any(|k| !(max[k] > min[k])) {
                    return bad("room box must have positive extent");
                }
            }
            Room::Sphere { radius, .. } => {
                if !(*radius > 0.0) {
                    return bad("room sphere radius must be positive");
                }
            }
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let (lo, hi) = match p {
                Primitive::Sphere { center, radius, .. } => {
                    if !(*radius > 0.0) {
                        return Err(SynthError::InvalidScene(format!("primitive {i}: radius must be positive")));
                    }
                    let c = v3(*center);
                    (c.add_scalar(-radius), c.add_scalar(*radius))
                }
                Primitive::Box { min, max, .. } => {
                    if (0..3).any(|k| !(max[k] > min[k])) {
                        return Err(SynthError::InvalidScene(format!("primitive {i}: box must have positive extent")));
                    }
                    (v3(*min), v3(*max))
                }
            };
            let inside = match &self.room {
                Room::Box { min, max, .. } => (0..3).all(|k| lo[k] >= min[k] && hi[k] <= max[k]),
                Room::Sphere { center, radius, .. } => {
                    let c = v3(*center);
                    // every corner of the bounding box inside the sphere
                    (0..8).all(|m| {
                        let corner = Vector3::new(
                            if m & 1 == 0 { lo.x } else { hi.x },
                            if m & 2 == 0 { lo.y } else { hi.y },
                            if m & 4 == 0 { lo.z } else { hi.z },
                        );
                        (corner - c).norm() <= *radius
                    })
                }
            };
            if !inside {
                return Err(SynthError::InvalidScene(format!("primitive {i} is not inside the room")));
            }
        }
        Ok(())
    }

    /// Nearest surface along the ray without shading it.
    fn nearest(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Surface)> {
        let mut best = match &self.room {
            Room::Box { min, max, .. } => box_exit(origin, dir, &v3(*min), &v3(*max)).map(|(t, wall)| (t, Surface::Wall(wall))),
            Room::Sphere { center, radius, .. } => {
                sphere_t(origin, dir, &v3(*center), *radius, true).map(|t| (t, Surface::RoomSphere))
            }
        };
        for (i, p) in self.primitives.iter().enumerate() {
            let hit = match p {
                Primitive::Sphere { center, radius, .. } => {
                    sphere_t(origin, dir, &v3(*center), *radius, false).map(|t| (t, Surface::Sphere(i)))
                }
                Primitive::Box { min, max, .. } => {
                    box_entry(origin, dir, &v3(*min), &v3(*max)).map(|(t, axis)| (t, Surface::Box(i, axis)))
                }
            };
            if let Some((t, surface)) = hit {
                if best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, surface));
                }
            }
        }
        best
    }

    /// Distance to the nearest surface along a unit ray.
    pub fn hit_distance(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        self.nearest(origin, dir).map(|(t, _)| t)
    }

    /// Nearest surface hit along `origin + t * dir`, `t > 0`. `dir` must be
    /// unit length for `distance` to be in meters.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let (t, surface) = self.nearest(origin, dir)?;
        let point = origin + dir * t;
        let checker = self.checker_size;
        let color = match (surface, &self.room) {
            (Surface::Wall(wall), Room::Box { wall_colors, .. }) => {
                shade(wall_colors[wall], parity(&in_plane(&point, wall / 2), checker))
            }
            (Surface::RoomSphere, Room::Sphere { color, .. }) => shade(*color, parity(point.as_slice(), checker)),
            (Surface::Sphere(i), _) | (Surface::Box(i, _), _) => match (&self.primitives[i], surface) {
                (Primitive::Sphere { color, .. }, _) => shade(*color, parity(point.as_slice(), checker)),
                (Primitive::Box { color, .. }, Surface::Box(_, axis)) => {
                    shade(*color, parity(&in_plane(&point, axis), checker))
                }
                _ => unreachable!("surface kind matches its primitive"),
            },
            _ => unreachable!("surface kind matches the room"),
        };
        Some(Hit {
            distance: t,
            point,
            color,
        })
    }

    /// Whether a camera at `p` is inside the room and clear of every primitive
    /// by at least `margin` meters.
    pub fn is_free(&self, p: &Vector3<f64>, margin: f64) -> bool {
        let in_room = match &self.room {
            Room::Box { min, max, .. } => (0..3).all(|k| p[k] >= min[k] + margin && p[k] <= max[k] - margin),
            Room::Sphere { center, radius, .. } => (p - v3(*center)).norm() <= radius - margin,
        };
        in_room
            && self.primitives.iter().all(|prim| match prim {
                Primitive::Sphere { center, radius, .. } => (p - v3(*center)).norm() >= radius + margin,
                Primitive::Box { min, max, .. } => {
                    (0..3).any(|k| p[k] <= min[k] - margin || p[k] >= max[k] + margin)
                }
            })
    }

    fn room_center(&self) -> Vector3<f64> {
        match &self.room {
            Room::Box { min, max, .. } => (v3(*min) + v3(*max)) * 0.5,
            Room::Sphere { center, .. } => v3(*center),
        }
    }

    /// Long hall with scattered furniture, used by the standard line fixture.
    pub fn hall() -> Self {
        Self {
            room: Room::Box {
                min: [-36.0, -6.0, 0.0],
                max: [36.0, 6.0, 4.0],
                wall_colors: [
                    [200, 80, 60],
                    [60, 160, 200],
                    [220, 200, 90],
                    [90, 200, 120],
                    [150, 150, 150],
                    [230, 230, 230],
                ],
            },
            primitives: vec![
                Primitive::Sphere {
                    center: [-20.0, 3.5, 1.0],
                    radius: 1.0,
                    color: [240, 120, 40],
                },
                Primitive::Box {
                    min: [-5.0, -5.5, 0.0],
                    max: [-3.0, -3.0, 1.5],
                    color: [80, 80, 220],
                },
                Primitive::Sphere {
                    center: [12.0, -3.0, 1.5],
                    radius: 1.2,
                    color: [200, 60, 200],
                },
                Primitive::Box {
                    min: [25.0, 2.5, 0.0],
                    max: [27.0, 5.0, 2.5],
                    color: [40, 180, 90],
                },
            ],
            checker_size: 0.5,
            seed: 1,
        }
    }

    /// Square room for loop trajectories.
    pub fn square_room() -> Self {
        Self {
            room: Room::Box {
                min: [-7.0, -7.0, 0.0],
                max: [7.0, 7.0, 4.0],
                wall_colors: [
                    [200, 80, 60],
                    [60, 160, 200],
                    [220, 200, 90],
                    [90, 200, 120],
                    [150, 150, 150],
                    [230, 230, 230],
                ],
            },
            primitives: vec![
                Primitive::Sphere {
                    center: [0.0, 0.0, 1.0],
                    radius: 1.0,
                    color: [240, 120, 40],
                },
                Primitive::Box {
                    min: [5.0, 5.0, 0.0],
                    max: [6.5, 6.5, 2.0],
                    color: [80, 80, 220],
                },
            ],
            checker_size: 0.5,
            seed: 2,
        }
    }

    /// Empty spherical room.
    pub fn spherical_room(radius: f64) -> Self {
        Self {
            room: Room::Sphere {
                center: [0.0, 0.0, 0.0],
                radius,
                color: [180, 180, 180],
            },
            primitives: Vec::new(),
            checker_size: 0.5,
            seed: 0,
        }
    }
}

/// Position and orientation of a panoramic camera. The orientation maps the
/// camera's (forward, left, up) frame into the world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl CameraPose {
    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn at(position: Vector3<f64>) -> Self {
        Self::new(position, UnitQuaternion::identity())
    }

    pub fn isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.position), self.orientation)
    }
}

/// Ground-truth transform from camera-`a` coordinates to camera-`b` coordinates.
pub fn relative_pose(a: &CameraPose, b: &CameraPose) -> Isometry3<f64> {
    b.isometry().inverse() * a.isometry()
}

/// A perspective view of a posed panoramic camera, in computer-vision
/// convention.
#[derive(Debug, Clone, Copy)]
pub struct ViewCamera {
    pub world_from_cam: Isometry3<f64>,
    pub geometry: PinholeGeometry,
}

impl ViewCamera {
    pub fn new(pose: &CameraPose, angles: &ViewAngles, height: usize, width: usize) -> Self {
        let rot = pose.orientation * UnitQuaternion::from_rotation_matrix(&view_to_pano(angles));
        Self {
            world_from_cam: Isometry3::from_parts(Translation3::from(pose.position), rot),
            geometry: PinholeGeometry::new(angles.fov(), height, width),
        }
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.world_from_cam.translation.vector
    }

    /// Unit world-space ray through the continuous image point `(x, y)`.
    pub fn world_ray(&self, x: f64, y: f64) -> Vector3<f64> {
        (self.world_from_cam.rotation * self.geometry.ray_at(x, y)).normalize()
    }

    /// Whether a world point is inside the frustum and not occluded.
    pub fn sees(&self, scene: &SceneSpec, p: &Vector3<f64>) -> bool {
        let local = self.world_from_cam.inverse_transform_point(&(*p).into());
        if self.geometry.project(&local.coords).is_none() {
            return false;
        }
        let origin = self.origin();
        let offset = p - origin;
        let dist = offset.norm();
        if dist == 0.0 {
            return true;
        }
        match scene.hit_distance(&origin, &(offset / dist)) {
            Some(t) => t >= dist * (1.0 - 1e-7) - 1e-7,
            None => true,
        }
    }
}

/// Renders an equirectangular panorama and its per-pixel hit distance.
///
/// Colors average `supersample x supersample` rays per pixel; depth is taken
/// from the pixel-centre ray.
pub fn render_equirect_supersampled(
    scene: &SceneSpec,
    cam: &CameraPose,
    width: u32,
    height: u32,
    supersample: u32,
) -> Result<(RgbImage, Grid<f64>), SynthError> {
    if height == 0 || width != 2 * height || supersample == 0 {
        return Err(SynthError::InvalidDims { width, height });
    }
    let rot = cam.orientation;
    let origin = cam.position;
    let (wf, hf) = (f64::from(width), f64::from(height));
    let ss = supersample as usize;
    let mut depth = Grid::filled(height as usize, width as usize, 0.0);
    let mut image = RgbImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let center = rot * uv_to_dir_unchecked((f64::from(x) + 0.5) / wf, (f64::from(y) + 0.5) / hf);
            let hit = scene.raycast(&origin, &center);
            *depth.get_mut(y as usize, x as usize) = hit.map_or(f64::INFINITY, |h| h.distance);
            let mut acc = [0.0; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let u = (f64::from(x) + (sx as f64 + 0.5) / ss as f64) / wf;
                    let v = (f64::from(y) + (sy as f64 + 0.5) / ss as f64) / hf;
                    let d = rot * uv_to_dir_unchecked(u, v);
                    if let Some(h) = scene.raycast(&origin, &d) {
                        for (a, c) in acc.iter_mut().zip(h.color) {
                            *a += c;
                        }
                    }
                }
            }
            let n = (ss * ss) as f64;
            image.put_pixel(x, y, to_rgb8(acc.map(|a| a / n)));
        }
    }
    Ok((image, depth))
}

/// Single-sample equirectangular render; see [`render_equirect_supersampled`].
pub fn render_equirect(
    scene: &SceneSpec,
    cam: &CameraPose,
    width: u32,
    height: u32,
) -> Result<(RgbImage, Grid<f64>), SynthError> {
    render_equirect_supersampled(scene, cam, width, height, 1)
}

/// Direct perspective raycast of a view: color image and z-depth (distance
/// along the optical axis) at pixel centres.
pub fn render_perspective(
    scene: &SceneSpec,
    view: &ViewCamera,
    supersample: u32,
) -> (RgbImage, Grid<f64>) {
    let g = view.geometry;
    let origin = view.origin();
    let ss = supersample.max(1) as usize;
    let mut depth = Grid::filled(g.height, g.width, 0.0);
    let mut image = RgbImage::new(g.width as u32, g.height as u32);
    for row in 0..g.height {
        for col in 0..g.width {
            let ray_cam = g.pixel_ray(row, col);
            let d = view.world_ray(col as f64 + 0.5, row as f64 + 0.5);
            if let Some(h) = scene.raycast(&origin, &d) {
                // z-depth = hit distance * cos(angle to optical axis)
                *depth.get_mut(row, col) = h.distance / ray_cam.norm();
            }
            let mut acc = [0.0; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let x = col as f64 + (sx as f64 + 0.5) / ss as f64;
                    let y = row as f64 + (sy as f64 + 0.5) / ss as f64;
                    if let Some(h) = scene.raycast(&origin, &view.world_ray(x, y)) {
                        for (a, c) in acc.iter_mut().zip(h.color) {
                            *a += c;
                        }
                    }
                }
            }
            let n = (ss * ss) as f64;
            image.put_pixel(col as u32, row as u32, to_rgb8(acc.map(|a| a / n)));
        }
    }
    (image, depth)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Line,
    Loop,
}

/// Camera path with one pose per second of video.
///
/// `Line` runs through the room centre along its longest horizontal axis.
/// `Loop` is a circle about the room centre whose circumference is
/// `n * speed`, so frame `n` would coincide with frame 0. Cameras face the
/// direction of travel.
pub fn make_trajectory(
    scene: &SceneSpec,
    n: usize,
    kind: TrajectoryKind,
    speed: f64,
) -> Result<Vec<CameraPose>, SynthError> {
    if n == 0 || !(speed >= 0.0) || !speed.is_finite() {
        return Err(SynthError::InvalidTrajectory);
    }
    let center = scene.room_center();
    let poses: Vec<CameraPose> = match kind {
        TrajectoryKind::Line => {
            let along_y = matches!(&scene.room, Room::Box { min, max, .. } if max[1] - min[1] > max[0] - min[0]);
            let (dir, yaw) = if along_y {
                (Vector3::y(), PI / 2.0)
            } else {
                (Vector3::x(), 0.0)
            };
            let q = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
            let length = speed * (n - 1) as f64;
            let start = center - dir * (0.5 * length);
            (0..n)
                .map(|k| CameraPose::new(start + dir * (speed * k as f64), q))
                .collect()
        }
        TrajectoryKind::Loop => {
            let radius = n as f64 * speed / TAU;
            (0..n)
                .map(|k| {
                    let a = TAU * k as f64 / n as f64;
                    let p = center + Vector3::new(radius * a.cos(), radius * a.sin(), 0.0);
                    let q = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), a + PI / 2.0);
                    CameraPose::new(p, q)
                })
                .collect()
        }
    };
    if let Some(frame) = poses
        .iter()
        .position(|p| !scene.is_free(&p.position, PATH_CLEARANCE))
    {
        return Err(SynthError::PathExitsRoom { frame });
    }
    Ok(poses)
}

/// Per-pixel co-visibility indicator at pixel centres of view `a`: whether
/// the surface point seen by each pixel is visible from view `b`.
pub fn covisibility_mask(scene: &SceneSpec, a: &ViewCamera, b: &ViewCamera) -> Grid<bool> {
    let g = a.geometry;
    let origin = a.origin();
    Grid::from_fn(g.height, g.width, |row, col| {
        let d = a.world_ray(col as f64 + 0.5, row as f64 + 0.5);
        scene
            .raycast(&origin, &d)
            .is_some_and(|hit| b.sees(scene, &hit.point))
    })
}

/// Monte-Carlo estimate of the fraction of view `a` visible from view `b`.
pub fn covisibility(
    scene: &SceneSpec,
    a: &ViewCamera,
    b: &ViewCamera,
    samples: usize,
    seed: u64,
) -> f64 {
    if samples == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = a.geometry;
    let origin = a.origin();
    let visible = (0..samples)
        .filter(|_| {
            let x = rng.random_range(0.0..g.width as f64);
            let y = rng.random_range(0.0..g.height as f64);
            scene
                .raycast(&origin, &a.world_ray(x, y))
                .is_some_and(|hit| b.sees(scene, &hit.point))
        })
        .count();
    visible as f64 / samples as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::{cardinal_angles, FrameId, PanoFrame};
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn centre_of_spherical_room_sees_constant_depth() {
        let scene = SceneSpec::spherical_room(3.0);
        let (_, depth) = render_equirect(&scene, &CameraPose::at(Vector3::zeros()), 64, 32).unwrap();
        assert!(depth.as_slice().iter().all(|d| (d - 3.0).abs() < 1e-12));
    }

    #[test]
    fn offset_camera_depth_range() {
        let scene = SceneSpec::spherical_room(3.0);
        let cam = CameraPose::at(Vector3::new(1.0, 0.0, 0.0));
        // forward ray hits at 2 m, backward ray at 4 m
        let fwd = scene.raycast(&cam.position, &Vector3::x()).unwrap();
        let back = scene.raycast(&cam.position, &-Vector3::x()).unwrap();
        assert!((fwd.distance - 2.0).abs() < 1e-12);
        assert!((back.distance - 4.0).abs() < 1e-12);
        let (_, depth) = render_equirect(&scene, &cam, 128, 64).unwrap();
        let min = depth.as_slice().iter().cloned().fold(f64::INFINITY, f64::min);
        let max = depth.as_slice().iter().cloned().fold(0.0, f64::max);
        assert!((2.0 - 1e-12..2.01).contains(&min), "min {min}");
        assert!(max <= 4.0 + 1e-12 && max > 3.99, "max {max}");
    }

    #[test]
    fn depth_matches_closed_forms() {
        // Box room walls: distance to plane along the ray.
        let scene = SceneSpec::square_room();
        let cam = CameraPose::at(Vector3::new(-3.0, 2.0, 2.0));
        let (_, depth) = render_equirect(&scene, &cam, 64, 32).unwrap();
        for y in 0..32usize {
            for x in 0..64usize {
                let d = uv_to_dir_unchecked((x as f64 + 0.5) / 64.0, (y as f64 + 0.5) / 32.0);
                let mut t_wall = f64::INFINITY;
                for k in 0..3 {
                    let (lo, hi) = ([-7.0, -7.0, 0.0][k], [7.0, 7.0, 4.0][k]);
                    if d[k] > 0.0 {
                        t_wall = t_wall.min((hi - cam.position[k]) / d[k]);
                    } else if d[k] < 0.0 {
                        t_wall = t_wall.min((lo - cam.position[k]) / d[k]);
                    }
                }
                // sphere at origin r = 1
                let oc = cam.position - Vector3::new(0.0, 0.0, 1.0);
                let b = oc.dot(&d);
                let disc = b * b - (oc.norm_squared() - 1.0);
                let t_sphere = if disc >= 0.0 { -b - disc.sqrt() } else { f64::INFINITY };
                let expect = t_wall.min(if t_sphere > 0.0 { t_sphere } else { f64::INFINITY });
                let got = *depth.get(y, x);
                // the corner box is not covered by the closed form; skip pixels that hit it
                if (got - expect).abs() > 1e-6 {
                    let p = cam.position + d * got;
                    assert!(p.x >= 5.0 - 1e-9 && p.y >= 5.0 - 1e-9 && p.z <= 2.0 + 1e-9, "pixel {x},{y}");
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let scene = SceneSpec::hall();
        let cam = CameraPose::at(Vector3::new(0.5, 0.2, 2.0));
        let (a, _) = render_equirect(&scene, &cam, 96, 48).unwrap();
        let (b, _) = render_equirect(&scene, &cam, 96, 48).unwrap();
        assert_eq!(a.as_raw(), b.as_raw());
    }

    #[test]
    fn render_rejects_bad_dims() {
        let scene = SceneSpec::hall();
        let cam = CameraPose::at(Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(
            render_equirect(&scene, &cam, 50, 30).unwrap_err(),
            SynthError::InvalidDims { width: 50, height: 30 }
        );
    }

    #[test]
    fn scene_validation() {
        assert!(SceneSpec::hall().validate().is_ok());
        assert!(SceneSpec::square_room().validate().is_ok());
        let mut s = SceneSpec::square_room();
        s.primitives.push(Primitive::Sphere {
            center: [6.8, 0.0, 1.0],
            radius: 0.5,
            color: [0, 0, 0],
        });
        assert!(s.validate().is_err());
        let mut s = SceneSpec::spherical_room(3.0);
        s.checker_size = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn scene_json_round_trip() {
        let s = SceneSpec::hall();
        let json = serde_json::to_string(&s).unwrap();
        let back: SceneSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn line_trajectory_spacing() {
        let poses = make_trajectory(&SceneSpec::hall(), 60, TrajectoryKind::Line, 1.0).unwrap();
        assert_eq!(poses.len(), 60);
        for w in poses.windows(2) {
            assert!(((w[1].position - w[0].position).norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loop_trajectory_closes() {
        let poses = make_trajectory(&SceneSpec::square_room(), 60, TrajectoryKind::Loop, 0.4).unwrap();
        assert!((poses[0].position - poses[59].position).norm() < 0.5);
    }

    #[test]
    fn trajectory_leaving_room_is_rejected() {
        let err = make_trajectory(&SceneSpec::square_room(), 60, TrajectoryKind::Line, 1.0).unwrap_err();
        assert!(matches!(err, SynthError::PathExitsRoom { .. }));
    }

    #[test]
    fn relative_poses_compose() {
        let poses = make_trajectory(&SceneSpec::square_room(), 12, TrajectoryKind::Loop, 0.4).unwrap();
        let (a, b, c) = (&poses[1], &poses[5], &poses[9]);
        let ab = relative_pose(a, b);
        let bc = relative_pose(b, c);
        let ac = relative_pose(a, c);
        let composed = bc * ab;
        assert!((composed.to_homogeneous() - ac.to_homogeneous()).norm() < 1e-9);
    }

    #[test]
    fn identical_views_fully_covisible() {
        let scene = SceneSpec::hall();
        let pose = CameraPose::at(Vector3::new(0.0, 0.0, 2.0));
        let angles = ViewAngles::new(0.1, 0.7, FRAC_PI_2).unwrap();
        let v = ViewCamera::new(&pose, &angles, 32, 32);
        assert_eq!(covisibility(&scene, &v, &v, 1024, 3), 1.0);
    }

    #[test]
    fn opposite_views_from_one_point_do_not_overlap() {
        let scene = SceneSpec::square_room();
        let pose = CameraPose::at(Vector3::new(2.0, -3.0, 2.0));
        let angles = cardinal_angles(FRAC_PI_2).unwrap();
        let a = ViewCamera::new(&pose, &angles[0], 32, 32);
        let b = ViewCamera::new(&pose, &angles[2], 32, 32);
        let mc = covisibility(&scene, &a, &b, 1024, 1);
        let dense = covisibility(&scene, &a, &b, 10_240, 2);
        assert!(mc < 0.05 && dense < 0.05, "mc {mc}, dense {dense}");
    }

    #[test]
    fn covisibility_roughly_symmetric_for_small_baselines() {
        let scene = SceneSpec::square_room();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let p = Vector3::new(rng.random_range(-4.0..-2.5), rng.random_range(-3.0..3.0), 2.0);
            let q = p + Vector3::new(rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15), 0.0);
            let yaw = rng.random_range(0.0..TAU);
            let aa = ViewAngles::new(0.0, yaw, FRAC_PI_2).unwrap();
            let ab = ViewAngles::new(0.0, yaw + rng.random_range(-0.2..0.2), FRAC_PI_2).unwrap();
            let va = ViewCamera::new(&CameraPose::at(p), &aa, 32, 32);
            let vb = ViewCamera::new(&CameraPose::at(q), &ab, 32, 32);
            let ab_cov = covisibility(&scene, &va, &vb, 10_240, 5);
            let ba_cov = covisibility(&scene, &vb, &va, 10_240, 6);
            assert!((ab_cov - ba_cov).abs() < 0.1, "{ab_cov} vs {ba_cov}");
        }
    }

    #[test]
    fn mc_covisibility_tracks_dense_mask() {
        let scene = SceneSpec::hall();
        let a = ViewCamera::new(
            &CameraPose::at(Vector3::new(-4.0, 0.0, 2.0)),
            &ViewAngles::new(0.0, 0.0, FRAC_PI_2).unwrap(),
            48,
            48,
        );
        let b = ViewCamera::new(
            &CameraPose::at(Vector3::new(-1.0, 0.0, 2.0)),
            &ViewAngles::new(0.0, 0.3, FRAC_PI_2).unwrap(),
            48,
            48,
        );
        let mask = covisibility_mask(&scene, &a, &b);
        let dense = mask.as_slice().iter().filter(|&&v| v).count() as f64 / mask.len() as f64;
        let mc = covisibility(&scene, &a, &b, 1024, 9);
        assert!((dense - mc).abs() < 0.06, "dense {dense} mc {mc}");
    }

    #[test]
    fn equirect_render_feeds_projection() {
        let scene = SceneSpec::square_room();
        let cam = CameraPose::at(Vector3::new(-3.0, 0.0, 2.0));
        let (img, _) = render_equirect(&scene, &cam, 64, 32).unwrap();
        assert!(PanoFrame::new(FrameId::new("s", 0), img).is_ok());
    }
}
