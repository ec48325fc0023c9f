//! Positional encoding and the three decoder MLPs: C transforms a neighbor
//! feature with relative-displacement context, G decodes occupancy, U
//! decodes radiance. One `DecoderSet` is the unit of federated averaging.

use alloc::vec::Vec;
use nalgebra::Vector3;
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::nn::{Activation, Mlp, MlpCache};
use crate::point_map::FEATURE_DIM;

/// Positional-encoding order for the 3-d relative displacement (3 -> 45).
pub const PE_ORDER_DISTANCE: usize = 7;
/// Positional-encoding order for the 32-d neighbor feature (32 -> 96).
pub const PE_ORDER_FEATURE: usize = 1;

pub const PE_DIST_DIM: usize = 3 + 3 * 2 * PE_ORDER_DISTANCE; // 45
pub const PE_FEAT_DIM: usize = FEATURE_DIM + FEATURE_DIM * 2 * PE_ORDER_FEATURE; // 96
/// Input width of decoder C: encoded feature followed by encoded offset.
pub const C_IN_DIM: usize = PE_FEAT_DIM + PE_DIST_DIM; // 141

/// Encoded length of an n-vector at order L with the input included.
pub const fn encoded_len(n: usize, order: usize) -> usize {
    n + n * 2 * order
}

/// `[v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^{L-1} pi v), cos(2^{L-1} pi v)]`
pub fn positional_encode(v: &[f64], order: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), encoded_len(v.len(), order));
    let n = v.len();
    out[..n].copy_from_slice(v);
    let mut freq = core::f64::consts::PI;
    for l in 0..order {
        let base = n + l * 2 * n;
        for (i, &x) in v.iter().enumerate() {
            let (s, c) = Float::sin_cos(freq * x);
            out[base + i] = s;
            out[base + n + i] = c;
        }
        freq *= 2.0;
    }
}

/// Accumulates `d(encode)/dv^T d_out` into `d_v`.
pub fn positional_encode_backward(v: &[f64], order: usize, d_out: &[f64], d_v: &mut [f64]) {
    let n = v.len();
    for i in 0..n {
        d_v[i] += d_out[i];
    }
    let mut freq = core::f64::consts::PI;
    for l in 0..order {
        let base = n + l * 2 * n;
        for (i, &x) in v.iter().enumerate() {
            let (s, c) = Float::sin_cos(freq * x);
            d_v[i] += d_out[base + i] * freq * c - d_out[base + n + i] * freq * s;
        }
        freq *= 2.0;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeMismatch;

impl core::fmt::Display for ShapeMismatch {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "parameter shapes are not congruent")
    }
}

impl core::error::Error for ShapeMismatch {}

/// The three decoders. Layer shapes are fixed; federated averaging and the
/// exchange codec rely on that congruence.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderSet {
    /// Feature transform, 141 -> 256 -> 32.
    pub c: Mlp,
    /// Occupancy decoder, 32 -> 256 -> 1, softplus output.
    pub g: Mlp,
    /// Radiance decoder, 32 -> 128 -> 128 -> 3, sigmoid output.
    pub u: Mlp,
}

impl DecoderSet {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        DecoderSet {
            c: Mlp::new(&[C_IN_DIM, 256, FEATURE_DIM], Activation::Identity, &mut rng),
            g: Mlp::new(&[FEATURE_DIM, 256, 1], Activation::Softplus, &mut rng),
            u: Mlp::new(&[FEATURE_DIM, 128, 128, 3], Activation::Sigmoid, &mut rng),
        }
    }

    pub fn zeros() -> Self {
        DecoderSet {
            c: Mlp::zeros(&[C_IN_DIM, 256, FEATURE_DIM], Activation::Identity),
            g: Mlp::zeros(&[FEATURE_DIM, 256, 1], Activation::Softplus),
            u: Mlp::zeros(&[FEATURE_DIM, 128, 128, 3], Activation::Sigmoid),
        }
    }

    pub fn param_count(&self) -> usize {
        self.c.param_count() + self.g.param_count() + self.u.param_count()
    }

    fn congruent(&self, other: &DecoderSet) -> bool {
        let dims = |m: &Mlp| -> Vec<(usize, usize)> {
            m.layers.iter().map(|l| (l.rows, l.cols)).collect()
        };
        dims(&self.c) == dims(&other.c)
            && dims(&self.g) == dims(&other.g)
            && dims(&self.u) == dims(&other.u)
    }

    /// Eq. of the feature transform: C applied to the concatenation of the
    /// encoded neighbor feature and the encoded relative displacement.
    pub fn decode_neighbor(&self, feature: &[f64; FEATURE_DIM], delta: &Vector3<f64>) -> [f64; FEATURE_DIM] {
        let mut input = [0.0; C_IN_DIM];
        positional_encode(feature, PE_ORDER_FEATURE, &mut input[..PE_FEAT_DIM]);
        positional_encode(&[delta.x, delta.y, delta.z], PE_ORDER_DISTANCE, &mut input[PE_FEAT_DIM..]);
        let mut cache = MlpCache::default();
        self.c.forward(&input, &mut cache);
        let mut out = [0.0; FEATURE_DIM];
        out.copy_from_slice(&cache.out);
        out
    }

    /// Non-negative occupancy of one transformed neighbor feature.
    pub fn decode_occupancy(&self, f_kx: &[f64; FEATURE_DIM]) -> f64 {
        let mut cache = MlpCache::default();
        self.g.forward(f_kx, &mut cache);
        cache.out[0]
    }

    /// RGB in (0,1)^3 from an interpolated feature.
    pub fn decode_radiance(&self, f_x: &[f64; FEATURE_DIM]) -> [f64; 3] {
        let mut cache = MlpCache::default();
        self.u.forward(f_x, &mut cache);
        [cache.out[0], cache.out[1], cache.out[2]]
    }

    /// Visits every parameter tensor in a fixed order (weights then bias,
    /// C, G, U).
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for mlp in [&self.c, &self.g, &self.u] {
            for layer in &mlp.layers {
                out.push(layer.w.as_slice());
                out.push(layer.b.as_slice());
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        for mlp in [&mut self.c, &mut self.g, &mut self.u] {
            for layer in &mut mlp.layers {
                out.push(layer.w.as_mut_slice());
                out.push(layer.b.as_mut_slice());
            }
        }
        out
    }
}

/// Elementwise arithmetic mean of shape-congruent decoder sets.
pub fn average_decoder_sets(sets: &[DecoderSet]) -> Result<DecoderSet, ShapeMismatch> {
    let first = sets.first().ok_or(ShapeMismatch)?;
    if sets.iter().any(|s| !first.congruent(s)) {
        return Err(ShapeMismatch);
    }
    let mut avg = first.clone();
    let n = sets.len() as f64;
    {
        let mut dst = avg.tensors_mut();
        let srcs: Vec<Vec<&[f32]>> = sets.iter().map(|s| s.tensors()).collect();
        for (ti, tensor) in dst.iter_mut().enumerate() {
            for (ei, out) in tensor.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for src in &srcs {
                    acc += src[ti][ei] as f64;
                }
                *out = (acc / n) as f32;
            }
        }
    }
    Ok(avg)
}
