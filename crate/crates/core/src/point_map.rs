//! Neural point cloud: keyframe-anchored points with learnable features,
//! a uniform hash grid for radius-bounded kNN, grid-based filtering and
//! rigid reanchoring.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use nalgebra::Vector3;
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::camera::Intrinsics;
use crate::frame::Frame;
use crate::pose::Pose;

pub const FEATURE_DIM: usize = 32;
/// Image patch edge: one candidate point per PATCH x PATCH pixel block.
pub const PATCH: usize = 4;

/// Keyframe identifier, unique across agents: `agent << 32 | frame`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct KfId(pub u64);

impl KfId {
    pub fn new(agent: u32, frame: u32) -> Self {
        KfId(((agent as u64) << 32) | frame as u64)
    }

    pub fn agent(&self) -> u32 {
        (self.0 >> 32) as u32
    }

    pub fn frame(&self) -> u32 {
        self.0 as u32
    }
}

/// Adam first/second moments of one point feature.
#[derive(Clone, Debug)]
pub struct FeatureMoments {
    pub m: [f64; FEATURE_DIM],
    pub v: [f64; FEATURE_DIM],
}

impl Default for FeatureMoments {
    fn default() -> Self {
        FeatureMoments { m: [0.0; FEATURE_DIM], v: [0.0; FEATURE_DIM] }
    }
}

/// A 3D point carrying a learnable feature, anchored to a keyframe.
/// `position == keyframe_pose * local_position` at all times.
#[derive(Clone, Debug)]
pub struct NeuralPoint {
    pub position: Vector3<f64>,
    pub feature: [f64; FEATURE_DIM],
    pub keyframe: KfId,
    pub local_position: Vector3<f64>,
    pub moments: FeatureMoments,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MapError {
    MissingKeyframe(KfId),
}

impl core::fmt::Display for MapError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MapError::MissingKeyframe(id) => {
                write!(f, "keyframe (agent {}, frame {}) missing from pose update", id.agent(), id.frame())
            }
        }
    }
}

impl core::error::Error for MapError {}

/// Uniform hash grid with cell edge equal to the query radius bound, so a
/// radius query never has to look past the 27 surrounding cells.
#[derive(Clone, Debug, Default)]
struct SpatialIndex {
    cells: BTreeMap<(i64, i64, i64), Vec<u32>>,
}

impl SpatialIndex {
    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            Float::floor(p.x / cell) as i64,
            Float::floor(p.y / cell) as i64,
            Float::floor(p.z / cell) as i64,
        )
    }

    fn insert(&mut self, id: u32, p: &Vector3<f64>, cell: f64) {
        self.cells.entry(Self::key(p, cell)).or_default().push(id);
    }

    fn rebuild(&mut self, points: &[NeuralPoint], cell: f64) {
        self.cells.clear();
        for (i, pt) in points.iter().enumerate() {
            self.insert(i as u32, &pt.position, cell);
        }
    }
}

/// Deterministic feature initializer: a fixed seeded random projection of
/// the PATCH x PATCH x 3 color block (48 -> 32) plus small seeded noise.
#[derive(Clone, Debug)]
pub struct PatchProjector {
    weights: Vec<f64>,
    noise_sigma: f64,
    rng: ChaCha12Rng,
}

impl PatchProjector {
    pub fn new(seed: u64, noise_sigma: f64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n = FEATURE_DIM * PATCH * PATCH * 3;
        let scale = 1.0 / (PATCH as f64 * PATCH as f64 * 3.0).sqrt();
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            weights.push(gauss(&mut rng) * scale);
        }
        PatchProjector { weights, noise_sigma, rng }
    }

    /// Projects a 48-vector of patch colors to a feature.
    pub fn project(&mut self, patch: &[f64]) -> [f64; FEATURE_DIM] {
        debug_assert_eq!(patch.len(), PATCH * PATCH * 3);
        let mut out = [0.0; FEATURE_DIM];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.weights[r * patch.len()..(r + 1) * patch.len()];
            let mut acc = 0.0;
            for (w, x) in row.iter().zip(patch.iter()) {
                acc += w * x;
            }
            *o = acc + self.noise_sigma * gauss(&mut self.rng);
        }
        out
    }
}

fn gauss(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.random_range(1e-12..1.0);
    let u2: f64 = rng.random_range(0.0..core::f64::consts::TAU);
    (-2.0 * Float::ln(u1)).sqrt() * Float::cos(u2)
}

/// The neural point cloud of one sub-map (or the fused global map).
#[derive(Clone, Debug)]
pub struct NeuralPointCloud {
    points: Vec<NeuralPoint>,
    keyframe_poses: BTreeMap<KfId, Pose>,
    index: SpatialIndex,
    query_radius: f64,
}

impl NeuralPointCloud {
    pub fn new(query_radius: f64) -> Self {
        NeuralPointCloud {
            points: Vec::new(),
            keyframe_poses: BTreeMap::new(),
            index: SpatialIndex::default(),
            query_radius,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn query_radius(&self) -> f64 {
        self.query_radius
    }

    pub fn points(&self) -> &[NeuralPoint] {
        &self.points
    }

    pub fn point(&self, id: u32) -> &NeuralPoint {
        &self.points[id as usize]
    }

    pub fn point_mut(&mut self, id: u32) -> &mut NeuralPoint {
        &mut self.points[id as usize]
    }

    pub fn keyframe_poses(&self) -> &BTreeMap<KfId, Pose> {
        &self.keyframe_poses
    }

    pub fn register_keyframe(&mut self, id: KfId, pose: Pose) {
        self.keyframe_poses.insert(id, pose);
    }

    /// Restores a cloud from its raw parts (snapshot decoding).
    pub fn from_parts(
        query_radius: f64,
        points: Vec<NeuralPoint>,
        keyframe_poses: BTreeMap<KfId, Pose>,
    ) -> Self {
        let mut cloud = NeuralPointCloud {
            points,
            keyframe_poses,
            index: SpatialIndex::default(),
            query_radius,
        };
        cloud.rebuild_index();
        cloud
    }

    /// Supplements the map from a frame: one candidate per image patch,
    /// added only where no existing point lies within the query radius.
    /// Candidates added earlier in the same call suppress later ones.
    pub fn add_points_from_frame(
        &mut self,
        frame: &Frame,
        pose: &Pose,
        k: &Intrinsics,
        anchor: KfId,
        projector: &mut PatchProjector,
    ) -> usize {
        let anchor_pose = match self.keyframe_poses.get(&anchor) {
            Some(p) => *p,
            None => {
                self.keyframe_poses.insert(anchor, *pose);
                *pose
            }
        };
        let anchor_inv = anchor_pose.inverse();
        let mut added = 0;
        let mut patch = [0.0f64; PATCH * PATCH * 3];
        for pv in 0..frame.height() / PATCH {
            for pu in 0..frame.width() / PATCH {
                let (cu, cv) = (pu * PATCH + PATCH / 2, pv * PATCH + PATCH / 2);
                let d = frame.depth.get(cu, cv);
                if d <= 0.0 {
                    continue;
                }
                let world = pose.transform_point(&k.unproject(cu as f64, cv as f64, d));
                if !self.query_neighbors(&world, self.query_radius, 1).is_empty() {
                    continue;
                }
                for dv in 0..PATCH {
                    for du in 0..PATCH {
                        let c = frame.color.get_f64(pu * PATCH + du, pv * PATCH + dv);
                        let base = (dv * PATCH + du) * 3;
                        patch[base] = c[0];
                        patch[base + 1] = c[1];
                        patch[base + 2] = c[2];
                    }
                }
                let feature = projector.project(&patch);
                let id = self.points.len() as u32;
                self.points.push(NeuralPoint {
                    position: world,
                    feature,
                    keyframe: anchor,
                    local_position: anchor_inv.transform_point(&world),
                    moments: FeatureMoments::default(),
                });
                self.index.insert(id, &world, self.query_radius);
                added += 1;
            }
        }
        added
    }

    /// Up to `k` nearest points within `radius` of `x`, nearest first.
    /// Ties on distance resolve to the lower point id. `radius` must not
    /// exceed the grid cell edge chosen at construction.
    pub fn query_neighbors(&self, x: &Vector3<f64>, radius: f64, k: usize) -> Vec<(u32, f64)> {
        debug_assert!(radius <= self.query_radius + 1e-12);
        let cell = self.query_radius;
        let (cx, cy, cz) = SpatialIndex::key(x, cell);
        let mut found: Vec<(u32, f64)> = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.index.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &id in ids {
                            let d = (self.points[id as usize].position - x).norm();
                            if d <= radius {
                                found.push((id, d));
                            }
                        }
                    }
                }
            }
        }
        found.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        found.truncate(k);
        found
    }

    /// Non-maximum suppression on a world-aligned cube grid of edge `rho`:
    /// every cube keeps only its point nearest to the cube center (ties to
    /// the lower id). Returns the number of removed points.
    pub fn grid_filter(&mut self, rho: f64) -> usize {
        let mut keep_per_cube: BTreeMap<(i64, i64, i64), (f64, u32)> = BTreeMap::new();
        for (i, pt) in self.points.iter().enumerate() {
            let key = SpatialIndex::key(&pt.position, rho);
            let center = Vector3::new(
                (key.0 as f64 + 0.5) * rho,
                (key.1 as f64 + 0.5) * rho,
                (key.2 as f64 + 0.5) * rho,
            );
            let d = (pt.position - center).norm();
            let cand = (d, i as u32);
            keep_per_cube
                .entry(key)
                .and_modify(|best| {
                    if cand.0 < best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                        *best = cand;
                    }
                })
                .or_insert(cand);
        }
        let mut keep = alloc::vec![false; self.points.len()];
        for (_, (_, id)) in keep_per_cube {
            keep[id as usize] = true;
        }
        let before = self.points.len();
        let mut it = keep.iter();
        self.points.retain(|_| *it.next().unwrap());
        self.index.rebuild(&self.points, self.query_radius);
        before - self.points.len()
    }

    /// Recomputes every point position from updated keyframe poses; the
    /// stored local positions are untouched and the index is rebuilt.
    pub fn reanchor(&mut self, optimized: &BTreeMap<KfId, Pose>) -> Result<(), MapError> {
        for pt in &self.points {
            if !optimized.contains_key(&pt.keyframe) {
                return Err(MapError::MissingKeyframe(pt.keyframe));
            }
        }
        for pt in self.points.iter_mut() {
            let pose = optimized[&pt.keyframe];
            pt.position = pose.transform_point(&pt.local_position);
        }
        for (id, pose) in optimized {
            if self.keyframe_poses.contains_key(id) {
                self.keyframe_poses.insert(*id, *pose);
            }
        }
        self.index.rebuild(&self.points, self.query_radius);
        Ok(())
    }

    /// Rigidly moves the whole sub-map into another coordinate system.
    pub fn apply_transform(&mut self, t: &Pose) {
        for pt in self.points.iter_mut() {
            pt.position = t.transform_point(&pt.position);
        }
        for pose in self.keyframe_poses.values_mut() {
            *pose = t.compose(pose);
        }
        self.index.rebuild(&self.points, self.query_radius);
    }

    /// Merges another cloud into this one (point ids are reassigned).
    pub fn merge(&mut self, other: NeuralPointCloud) {
        self.points.extend(other.points);
        self.keyframe_poses.extend(other.keyframe_poses);
        self.index.rebuild(&self.points, self.query_radius);
    }

    pub fn rebuild_index(&mut self) {
        self.index.rebuild(&self.points, self.query_radius);
    }

    /// Largest violation of `position == keyframe_pose * local_position`.
    pub fn anchoring_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for pt in &self.points {
            if let Some(pose) = self.keyframe_poses.get(&pt.keyframe) {
                let err = (pose.transform_point(&pt.local_position) - pt.position).norm();
                if err > worst {
                    worst = err;
                }
            } else {
                worst = f64::INFINITY;
            }
        }
        worst
    }
}
