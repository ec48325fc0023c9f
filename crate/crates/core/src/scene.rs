//! Analytic RGB-D scene simulation: primitive ray casting plus camera
//! trajectory generation for desk-scale sequences.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::Vector3;
use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::camera::Intrinsics;
use crate::frame::{ColorImage, DepthImage, Frame};
use crate::pose::{Pose, Quat};

/// Scene primitive with a constant albedo in [0,1]^3.
#[derive(Clone, Debug)]
pub enum Primitive {
    /// Infinite plane through `point` with unit `normal`.
    Plane { point: Vector3<f64>, normal: Vector3<f64>, albedo: [f64; 3] },
    Sphere { center: Vector3<f64>, radius: f64, albedo: [f64; 3] },
    /// Axis-aligned box spanning `min..max`.
    AxisBox { min: Vector3<f64>, max: Vector3<f64>, albedo: [f64; 3] },
}

impl Primitive {
    /// Nearest intersection of the ray `origin + t * dir` (unit `dir`) with
    /// t > eps, returning (t, outward normal).
    fn hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        const EPS: f64 = 1e-9;
        match self {
            Primitive::Plane { point, normal, .. } => {
                let denom = normal.dot(dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = normal.dot(&(point - origin)) / denom;
                if t > EPS {
                    Some((t, *normal))
                } else {
                    None
                }
            }
            Primitive::Sphere { center, radius, .. } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > EPS {
                    -b - sq
                } else if -b + sq > EPS {
                    -b + sq
                } else {
                    return None;
                };
                let n = (origin + dir * t - center).normalize();
                Some((t, n))
            }
            Primitive::AxisBox { min, max, .. } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis_near = 0usize;
                let mut axis_far = 0usize;
                for a in 0..3 {
                    if dir[a].abs() < 1e-12 {
                        if origin[a] < min[a] || origin[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[a];
                    let (mut t0, mut t1) = ((min[a] - origin[a]) * inv, (max[a] - origin[a]) * inv);
                    if t0 > t1 {
                        core::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > t_near {
                        t_near = t0;
                        axis_near = a;
                    }
                    if t1 < t_far {
                        t_far = t1;
                        axis_far = a;
                    }
                    if t_near > t_far {
                        return None;
                    }
                }
                let (t, axis) = if t_near > EPS {
                    (t_near, axis_near)
                } else if t_far > EPS {
                    (t_far, axis_far)
                } else {
                    return None;
                };
                let p = origin + dir * t;
                let mid = (min + max) * 0.5;
                let mut n = Vector3::zeros();
                n[axis] = if p[axis] > mid[axis] { 1.0 } else { -1.0 };
                Some((t, n))
            }
        }
    }

    fn albedo(&self) -> [f64; 3] {
        match self {
            Primitive::Plane { albedo, .. }
            | Primitive::Sphere { albedo, .. }
            | Primitive::AxisBox { albedo, .. } => *albedo,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SceneError {
    Empty,
    AlbedoOutOfRange,
}

impl core::fmt::Display for SceneError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SceneError::Empty => write!(f, "scene must contain at least one primitive"),
            SceneError::AlbedoOutOfRange => write!(f, "albedo components must lie in [0,1]"),
        }
    }
}

impl core::error::Error for SceneError {}

/// Collection of shaded primitives under one fixed directional light.
#[derive(Clone, Debug)]
pub struct AnalyticScene {
    primitives: Vec<Primitive>,
    /// Direction the light travels (will be normalized).
    light_dir: Vector3<f64>,
    ambient: f64,
}

impl AnalyticScene {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self, SceneError> {
        if primitives.is_empty() {
            return Err(SceneError::Empty);
        }
        for p in &primitives {
            if p.albedo().iter().any(|&a| !(0.0..=1.0).contains(&a)) {
                return Err(SceneError::AlbedoOutOfRange);
            }
        }
        Ok(AnalyticScene {
            primitives,
            light_dir: Vector3::new(-0.4, -0.75, -0.5).normalize(),
            ambient: 0.35,
        })
    }

    /// Walls, floor and a few desk objects around the origin. Albedos differ
    /// per surface so photometric residuals and descriptors carry signal.
    pub fn box_room() -> Self {
        let prims = vec![
            Primitive::Plane {
                point: Vector3::new(0.0, 0.0, 0.0),
                normal: Vector3::new(0.0, 1.0, 0.0),
                albedo: [0.72, 0.68, 0.62],
            },
            Primitive::Plane {
                point: Vector3::new(0.0, 2.4, 0.0),
                normal: Vector3::new(0.0, -1.0, 0.0),
                albedo: [0.9, 0.9, 0.92],
            },
            Primitive::Plane {
                point: Vector3::new(1.45, 0.0, 0.0),
                normal: Vector3::new(-1.0, 0.0, 0.0),
                albedo: [0.82, 0.3, 0.24],
            },
            Primitive::Plane {
                point: Vector3::new(-1.45, 0.0, 0.0),
                normal: Vector3::new(1.0, 0.0, 0.0),
                albedo: [0.28, 0.55, 0.8],
            },
            Primitive::Plane {
                point: Vector3::new(0.0, 0.0, 1.45),
                normal: Vector3::new(0.0, 0.0, -1.0),
                albedo: [0.78, 0.72, 0.3],
            },
            Primitive::Plane {
                point: Vector3::new(0.0, 0.0, -1.45),
                normal: Vector3::new(0.0, 0.0, 1.0),
                albedo: [0.38, 0.72, 0.42],
            },
            Primitive::Sphere {
                center: Vector3::new(0.28, 0.33, -0.18),
                radius: 0.22,
                albedo: [0.85, 0.2, 0.16],
            },
            Primitive::Sphere {
                center: Vector3::new(-0.3, 0.18, 0.3),
                radius: 0.14,
                albedo: [0.2, 0.26, 0.78],
            },
            Primitive::AxisBox {
                min: Vector3::new(-0.45, 0.0, -0.35),
                max: Vector3::new(-0.05, 0.38, 0.05),
                albedo: [0.25, 0.62, 0.3],
            },
            Primitive::AxisBox {
                min: Vector3::new(0.1, 0.0, 0.25),
                max: Vector3::new(0.5, 0.26, 0.55),
                albedo: [0.8, 0.62, 0.2],
            },
        ];
        AnalyticScene::new(prims).expect("built-in scene is valid")
    }

    /// Single fronto-parallel plane, handy for convergence tests.
    pub fn single_plane(z: f64) -> Self {
        AnalyticScene::new(vec![Primitive::Plane {
            point: Vector3::new(0.0, 0.0, z),
            normal: Vector3::new(0.0, 0.0, -1.0),
            albedo: [0.7, 0.6, 0.5],
        }])
        .expect("plane scene is valid")
    }

    /// Nearest hit along a world-space ray; returns (range, normal, albedo).
    pub fn trace(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>, [f64; 3])> {
        let mut best: Option<(f64, Vector3<f64>, [f64; 3])> = None;
        for prim in &self.primitives {
            if let Some((t, n)) = prim.hit(origin, dir) {
                if best.as_ref().map_or(true, |(bt, _, _)| t < *bt) {
                    best = Some((t, n, prim.albedo()));
                }
            }
        }
        best
    }

    fn shade(&self, normal: &Vector3<f64>, view_dir: &Vector3<f64>, albedo: [f64; 3]) -> [u8; 3] {
        // flip the normal toward the camera before shading
        let n = if normal.dot(view_dir) > 0.0 { -normal } else { *normal };
        let diffuse = Float::max(0.0, n.dot(&-self.light_dir));
        let b = self.ambient + (1.0 - self.ambient) * diffuse;
        let mut rgb = [0u8; 3];
        for c in 0..3 {
            rgb[c] = Float::round(albedo[c].clamp(0.0, 1.0) * b * 255.0) as u8;
        }
        rgb
    }
}

/// Renders one RGB-D frame by per-pixel nearest-hit ray casting. Depth is
/// the pinhole z-depth of the hit, 0 where the ray escapes the scene.
/// `depth_noise` adds seeded Gaussian noise (standard deviation in meters).
pub fn raycast_frame(
    scene: &AnalyticScene,
    pose: &Pose,
    k: &Intrinsics,
    id: u32,
    depth_noise: Option<(&mut ChaCha12Rng, f64)>,
) -> Frame {
    let mut color = ColorImage::new(k.width, k.height);
    let mut depth = DepthImage::new(k.width, k.height);
    for v in 0..k.height {
        for u in 0..k.width {
            let (dir_cam, _) = k.pixel_ray(u as f64, v as f64);
            let dir = pose.q.rotate(&dir_cam);
            if let Some((t, n, albedo)) = scene.trace(&pose.t, &dir) {
                let z = t * dir_cam.z;
                depth.set(u, v, z);
                color.set(u, v, scene.shade(&n, &dir, albedo));
            }
        }
    }
    if let Some((rng, sigma)) = depth_noise {
        if sigma > 0.0 {
            for d in depth.data.iter_mut() {
                if *d > 0.0 {
                    // Box-Muller keeps rand's distribution deps out of no_std
                    let u1: f64 = rng.random_range(1e-12..1.0);
                    let u2: f64 = rng.random_range(0.0..core::f64::consts::TAU);
                    let g = (-2.0 * u1.ln()).sqrt() * u2.cos();
                    *d = Float::max(*d + sigma * g, 1e-4);
                }
            }
        }
    }
    Frame::new(id, color, depth).expect("raycast output is well-formed")
}

/// Camera trajectory generators.
#[derive(Clone, Debug)]
pub enum TrajectorySpec {
    /// Closed orbit: the final pose coincides with the first.
    CircleLoop { n_frames: usize, radius: f64, height: f64, look_at: Vector3<f64> },
    /// Two agents sharing one orbit: both start near angle zero and sweep
    /// opposite directions, meeting again on the far side.
    TwoAgentSplit {
        n_frames: usize,
        radius: f64,
        height: f64,
        look_at: Vector3<f64>,
        start_offset: f64,
        arc: f64,
    },
}

impl TrajectorySpec {
    pub fn circle_loop(n_frames: usize) -> Self {
        TrajectorySpec::CircleLoop {
            n_frames,
            radius: 0.78,
            height: 0.9,
            look_at: Vector3::new(0.0, 0.25, 0.0),
        }
    }

    pub fn two_agent_split(n_frames: usize) -> Self {
        TrajectorySpec::TwoAgentSplit {
            n_frames,
            radius: 0.78,
            height: 0.9,
            look_at: Vector3::new(0.0, 0.25, 0.0),
            start_offset: 0.02 * core::f64::consts::PI,
            arc: 1.1 * core::f64::consts::PI,
        }
    }

    /// Ground-truth pose sequences, one inner vector per agent.
    pub fn poses(&self) -> Vec<Vec<Pose>> {
        match self {
            TrajectorySpec::CircleLoop { n_frames, radius, height, look_at } => {
                let n = *n_frames;
                let mut out = Vec::with_capacity(n);
                for i in 0..n {
                    let theta = if n > 1 {
                        core::f64::consts::TAU * i as f64 / (n - 1) as f64
                    } else {
                        0.0
                    };
                    out.push(orbit_pose(theta, *radius, *height, look_at));
                }
                vec![out]
            }
            TrajectorySpec::TwoAgentSplit { n_frames, radius, height, look_at, start_offset, arc } => {
                let n = *n_frames;
                let mut a0 = Vec::with_capacity(n);
                let mut a1 = Vec::with_capacity(n);
                for i in 0..n {
                    let s = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                    a0.push(orbit_pose(s * arc, *radius, *height, look_at));
                    a1.push(orbit_pose(start_offset - s * arc, *radius, *height, look_at));
                }
                vec![a0, a1]
            }
        }
    }
}

/// Pose on a horizontal orbit looking at a fixed target (image v axis down).
fn orbit_pose(theta: f64, radius: f64, height: f64, look_at: &Vector3<f64>) -> Pose {
    let position = Vector3::new(radius * theta.cos(), height, radius * theta.sin());
    look_at_pose(&position, look_at)
}

/// Camera-to-world pose at `position` looking toward `target`.
pub fn look_at_pose(position: &Vector3<f64>, target: &Vector3<f64>) -> Pose {
    let up = Vector3::new(0.0, 1.0, 0.0);
    let z = (target - position).normalize();
    let x = z.cross(&up).normalize();
    let y = z.cross(&x);
    let m = nalgebra::Matrix3::from_columns(&[x, y, z]);
    Pose::new(Quat::from_rotation_matrix(&m), *position)
}

/// Renders ground-truth sequences for the spec: one `Vec<(Frame, Pose)>`
/// per agent, frames carrying ids 0..n and identity pose estimates.
pub fn generate_sequences(
    scene: &AnalyticScene,
    spec: &TrajectorySpec,
    k: &Intrinsics,
    depth_noise_sigma: f64,
    seed: u64,
) -> Vec<Vec<(Frame, Pose)>> {
    use rand::SeedableRng;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    spec.poses()
        .into_iter()
        .map(|agent| {
            agent
                .into_iter()
                .enumerate()
                .map(|(i, pose)| {
                    let noise = if depth_noise_sigma > 0.0 {
                        Some((&mut rng, depth_noise_sigma))
                    } else {
                        None
                    };
                    (raycast_frame(scene, &pose, k, i as u32, noise), pose)
                })
                .collect()
        })
        .collect()
}
