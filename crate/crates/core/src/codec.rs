//! Byte codecs for weight exchange and sub-map snapshots. The decoder
//! format is the checkpoint format as well: a shape header followed by the
//! flat little-endian f32 parameters of every tensor.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use nalgebra::Vector3;

use crate::decoders::DecoderSet;
use crate::point_map::{FeatureMoments, KfId, NeuralPoint, NeuralPointCloud, FEATURE_DIM};
use crate::pose::{Pose, Quat};

#[derive(Clone, Debug, PartialEq)]
pub enum CodecError {
    Truncated,
    BadMagic,
    ShapeMismatch(String),
}

impl core::fmt::Display for CodecError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CodecError::Truncated => write!(f, "byte stream ends before the declared payload"),
            CodecError::BadMagic => write!(f, "unrecognized header magic"),
            CodecError::ShapeMismatch(m) => write!(f, "shape header mismatch: {m}"),
        }
    }
}

impl core::error::Error for CodecError {}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.at + n > self.buf.len() {
            return Err(CodecError::Truncated);
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, CodecError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

const DECODER_MAGIC: u32 = 0x4d4c5057; // "WPLM"
const MAP_MAGIC: u32 = 0x50414d57; // "WMAP"

/// Encodes a decoder set: magic, tensor count, per-tensor (rows, cols) with
/// cols = 0 marking a bias vector, then all parameters as LE f32.
pub fn encode_decoders(set: &DecoderSet) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, DECODER_MAGIC);
    let tensors = set.tensors();
    put_u32(&mut out, tensors.len() as u32);
    let mut shapes: Vec<(u32, u32)> = Vec::new();
    for mlp in [&set.c, &set.g, &set.u] {
        for layer in &mlp.layers {
            shapes.push((layer.rows as u32, layer.cols as u32));
            shapes.push((layer.rows as u32, 0));
        }
    }
    for (r, c) in shapes {
        put_u32(&mut out, r);
        put_u32(&mut out, c);
    }
    for tensor in tensors {
        for &v in tensor {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decodes and validates against the fixed architecture.
pub fn decode_decoders(bytes: &[u8]) -> Result<DecoderSet, CodecError> {
    let mut r = Reader::new(bytes);
    if r.u32()? != DECODER_MAGIC {
        return Err(CodecError::BadMagic);
    }
    let n = r.u32()? as usize;
    let mut set = DecoderSet::zeros();
    let expect: Vec<(u32, u32)> = {
        let mut v = Vec::new();
        for mlp in [&set.c, &set.g, &set.u] {
            for layer in &mlp.layers {
                v.push((layer.rows as u32, layer.cols as u32));
                v.push((layer.rows as u32, 0));
            }
        }
        v
    };
    if n != expect.len() {
        return Err(CodecError::ShapeMismatch(alloc::format!(
            "expected {} tensors, header declares {n}",
            expect.len()
        )));
    }
    for (i, &(er, ec)) in expect.iter().enumerate() {
        let (rr, rc) = (r.u32()?, r.u32()?);
        if (rr, rc) != (er, ec) {
            return Err(CodecError::ShapeMismatch(alloc::format!(
                "tensor {i}: declared {rr}x{rc}, expected {er}x{ec}"
            )));
        }
    }
    for tensor in set.tensors_mut() {
        for v in tensor.iter_mut() {
            *v = r.f32()?;
        }
    }
    Ok(set)
}

fn encode_pose(out: &mut Vec<u8>, pose: &Pose) {
    put_f64(out, pose.q.w);
    put_f64(out, pose.q.x);
    put_f64(out, pose.q.y);
    put_f64(out, pose.q.z);
    put_f64(out, pose.t.x);
    put_f64(out, pose.t.y);
    put_f64(out, pose.t.z);
}

fn decode_pose(r: &mut Reader) -> Result<Pose, CodecError> {
    let q = Quat::new(r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let t = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
    Ok(Pose { q, t })
}

/// Full-precision snapshot of a sub-map: points with features, moments and
/// anchoring, plus the keyframe pose table.
pub fn encode_map(cloud: &NeuralPointCloud) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, MAP_MAGIC);
    put_f64(&mut out, cloud.query_radius());
    put_u32(&mut out, cloud.len() as u32);
    for pt in cloud.points() {
        for v in [pt.position.x, pt.position.y, pt.position.z] {
            put_f64(&mut out, v);
        }
        for v in [pt.local_position.x, pt.local_position.y, pt.local_position.z] {
            put_f64(&mut out, v);
        }
        put_u64(&mut out, pt.keyframe.0);
        for &f in &pt.feature {
            put_f64(&mut out, f);
        }
        for &m in &pt.moments.m {
            put_f64(&mut out, m);
        }
        for &v in &pt.moments.v {
            put_f64(&mut out, v);
        }
    }
    put_u32(&mut out, cloud.keyframe_poses().len() as u32);
    for (id, pose) in cloud.keyframe_poses() {
        put_u64(&mut out, id.0);
        encode_pose(&mut out, pose);
    }
    out
}

pub fn decode_map(bytes: &[u8]) -> Result<NeuralPointCloud, CodecError> {
    let mut r = Reader::new(bytes);
    if r.u32()? != MAP_MAGIC {
        return Err(CodecError::BadMagic);
    }
    let radius = r.f64()?;
    let n = r.u32()? as usize;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let position = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        let local_position = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        let keyframe = KfId(r.u64()?);
        let mut feature = [0.0; FEATURE_DIM];
        for f in feature.iter_mut() {
            *f = r.f64()?;
        }
        let mut moments = FeatureMoments::default();
        for m in moments.m.iter_mut() {
            *m = r.f64()?;
        }
        for v in moments.v.iter_mut() {
            *v = r.f64()?;
        }
        points.push(NeuralPoint { position, feature, keyframe, local_position, moments });
    }
    let n_kf = r.u32()? as usize;
    let mut poses = BTreeMap::new();
    for _ in 0..n_kf {
        let id = KfId(r.u64()?);
        poses.insert(id, decode_pose(&mut r)?);
    }
    Ok(NeuralPointCloud::from_parts(radius, points, poses))
}

/// Trajectory as (frame id, pose) pairs.
pub fn encode_trajectory(traj: &[(u32, Pose)]) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, traj.len() as u32);
    for (id, pose) in traj {
        put_u32(&mut out, *id);
        encode_pose(&mut out, pose);
    }
    out
}

pub fn decode_trajectory(bytes: &[u8]) -> Result<Vec<(u32, Pose)>, CodecError> {
    let mut r = Reader::new(bytes);
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let id = r.u32()?;
        out.push((id, decode_pose(&mut r)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use crate::point_map::PatchProjector;
    use crate::scene::{raycast_frame, AnalyticScene};

    #[test]
    fn decoder_roundtrip_is_exact() {
        let set = DecoderSet::seeded(9);
        let bytes = encode_decoders(&set);
        let back = decode_decoders(&bytes).unwrap();
        assert_eq!(set, back);
        // header: magic + count + 16 bytes per tensor header... payload f32s
        assert_eq!(bytes.len() % 4, 0);
    }

    #[test]
    fn decoder_rejects_corrupt_header() {
        let set = DecoderSet::seeded(9);
        let mut bytes = encode_decoders(&set);
        bytes[0] ^= 0xff;
        assert!(matches!(decode_decoders(&bytes), Err(CodecError::BadMagic)));
        let short = &encode_decoders(&set)[..40];
        assert!(matches!(decode_decoders(short), Err(CodecError::Truncated)));
    }

    #[test]
    fn map_roundtrip_preserves_bits() {
        let mut map = NeuralPointCloud::new(0.15);
        let mut proj = PatchProjector::new(3, 0.02);
        let frame = raycast_frame(
            &AnalyticScene::box_room(),
            &Pose::IDENTITY,
            &Intrinsics::desk_default(),
            0,
            None,
        );
        map.add_points_from_frame(&frame, &Pose::IDENTITY, &Intrinsics::desk_default(), KfId::new(1, 0), &mut proj);
        assert!(map.len() > 0);
        let bytes = encode_map(&map);
        let back = decode_map(&bytes).unwrap();
        assert_eq!(map.len(), back.len());
        for (a, b) in map.points().iter().zip(back.points().iter()) {
            assert_eq!(a.position, b.position);
            assert_eq!(a.local_position, b.local_position);
            assert_eq!(a.feature, b.feature);
            assert_eq!(a.keyframe, b.keyframe);
        }
        assert_eq!(map.keyframe_poses(), back.keyframe_poses());
        // queries behave identically after the roundtrip
        let q = map.points()[0].position;
        assert_eq!(map.query_neighbors(&q, 0.15, 8), back.query_neighbors(&q, 0.15, 8));
    }

    #[test]
    fn trajectory_roundtrip() {
        let traj = alloc::vec![
            (0u32, Pose::IDENTITY),
            (1u32, Pose::from_translation(Vector3::new(0.1, 0.2, 0.3))),
        ];
        let bytes = encode_trajectory(&traj);
        let back = decode_trajectory(&bytes).unwrap();
        assert_eq!(traj.len(), back.len());
        for (a, b) in traj.iter().zip(back.iter()) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1.q, b.1.q);
            assert_eq!(a.1.t, b.1.t);
        }
    }
}
