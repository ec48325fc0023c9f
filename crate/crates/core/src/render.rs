//! Differentiable volume rendering over the neural point field:
//! depth-guided ray sampling, per-neighbor feature decoding, inverse
//! distance interpolation, front-to-back compositing, and analytic
//! gradients down to point features, decoder parameters and camera pose.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::Vector3;
use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::camera::Intrinsics;
use crate::decoders::{
    positional_encode, positional_encode_backward, DecoderSet, PE_DIST_DIM, PE_FEAT_DIM,
    PE_ORDER_DISTANCE, PE_ORDER_FEATURE,
};
use crate::frame::DepthImage;
use crate::nn::{Activation, MlpGrad};
use crate::point_map::{NeuralPointCloud, FEATURE_DIM};
use crate::pose::Pose;

/// Ray sampling and neighbor-query settings.
#[derive(Clone, Copy, Debug)]
pub struct RenderConfig {
    /// Samples concentrated around the observed surface.
    pub n_near: usize,
    /// Samples spread over the frame's depth range.
    pub n_uniform: usize,
    /// Near-interval bounds as factors of the pixel range.
    pub near_lo: f64,
    pub near_hi: f64,
    /// Lower sampling bound for rays without depth, meters.
    pub d_l: f64,
    pub k_neighbors: usize,
    pub query_radius: f64,
    /// Lower clamp of the neighbor distance inside interpolation weights.
    pub dist_clamp: f64,
    /// Substitute far bound when a frame carries no valid depth at all.
    pub fallback_max_depth: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            n_near: 16,
            n_uniform: 4,
            near_lo: 0.95,
            near_hi: 1.05,
            d_l: 0.001,
            k_neighbors: 8,
            query_radius: 0.15,
            dist_clamp: 1e-6,
            fallback_max_depth: 6.0,
        }
    }
}

impl RenderConfig {
    pub fn total_samples(&self) -> usize {
        self.n_near + self.n_uniform
    }
}

/// Stratified t-values for one ray, ascending. For a pixel with valid
/// range `pixel_range`, `n_near` samples cover `[near_lo*R, near_hi*R]`
/// and `n_uniform` cover `[0.95*range_lo, 1.05*range_hi]`; without depth,
/// all samples cover `[d_l, 1.05*range_hi]`.
pub fn sample_ray(
    pixel_range: Option<f64>,
    range_lo: f64,
    range_hi: f64,
    cfg: &RenderConfig,
    rng: &mut ChaCha12Rng,
) -> Vec<f64> {
    let mut t = Vec::with_capacity(cfg.total_samples());
    let mut stratified = |a: f64, b: f64, n: usize, t: &mut Vec<f64>| {
        if n == 0 {
            return;
        }
        let span = (b - a).max(0.0);
        for i in 0..n {
            let u: f64 = rng.random_range(0.0..1.0);
            t.push(a + span * ((i as f64 + u) / n as f64));
        }
    };
    match pixel_range {
        Some(r) => {
            stratified(cfg.near_lo * r, cfg.near_hi * r, cfg.n_near, &mut t);
            stratified(0.95 * range_lo, 1.05 * range_hi, cfg.n_uniform, &mut t);
        }
        None => {
            stratified(cfg.d_l, 1.05 * range_hi, cfg.total_samples(), &mut t);
        }
    }
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    t
}

/// One compositing input: position along the ray, occupancy, radiance.
#[derive(Clone, Copy, Debug)]
pub struct CompositeSample {
    pub t: f64,
    pub sigma: f64,
    pub color: [f64; 3],
}

/// Rendered expectations along one ray. `range` is in distance-along-ray
/// units; callers convert to pinhole depth with the pixel's z factor.
#[derive(Clone, Debug, Default)]
pub struct RenderOutput {
    pub range: f64,
    pub color: [f64; 3],
    pub variance: f64,
    /// Total accumulated termination probability along the ray.
    pub weight_sum: f64,
    pub weights: Vec<f64>,
}

fn deltas(samples: &[CompositeSample]) -> Vec<f64> {
    let n = samples.len();
    let mut d = vec![0.0; n];
    if n >= 2 {
        // last delta falls back to the mean gap; zero gaps (duplicated
        // sample positions) are excluded so duplicates stay inert
        let mut sum = 0.0;
        let mut count = 0;
        for i in 0..n - 1 {
            d[i] = samples[i + 1].t - samples[i].t;
            if d[i] > 0.0 {
                sum += d[i];
                count += 1;
            }
        }
        d[n - 1] = if count > 0 { sum / count as f64 } else { 1.0 };
    } else if n == 1 {
        d[0] = 1.0;
    }
    d
}

/// Front-to-back alpha compositing: `alpha_i = 1 - exp(-sigma_i delta_i)`,
/// `w_i = alpha_i prod_{j<i} (1 - alpha_j)`; range/color are weight
/// expectations and `variance` the weighted spread of the t-values.
pub fn composite(samples: &[CompositeSample]) -> RenderOutput {
    let n = samples.len();
    let d = deltas(samples);
    let mut out = RenderOutput { weights: vec![0.0; n], ..Default::default() };
    let mut transmittance = 1.0;
    for i in 0..n {
        let alpha = 1.0 - Float::exp(-samples[i].sigma * d[i]);
        let w = alpha * transmittance;
        out.weights[i] = w;
        out.weight_sum += w;
        out.range += w * samples[i].t;
        for c in 0..3 {
            out.color[c] += w * samples[i].color[c];
        }
        transmittance *= 1.0 - alpha;
    }
    for i in 0..n {
        let diff = samples[i].t - out.range;
        out.variance += out.weights[i] * diff * diff;
    }
    out
}

/// Gradients of the composite outputs with respect to per-sample occupancy
/// and color: returns `(d_sigma, d_color)` per sample for the upstream
/// `dl_drange` and `dl_dcolor`. The variance output is treated as a
/// constant (it only gates the outlier mask).
pub fn composite_backward(
    samples: &[CompositeSample],
    dl_drange: f64,
    dl_dcolor: &[f64; 3],
    dl_dwsum: f64,
) -> Vec<(f64, [f64; 3])> {
    let n = samples.len();
    let d = deltas(samples);
    let mut alphas = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let mut transmittance = 1.0;
    for i in 0..n {
        alphas[i] = 1.0 - Float::exp(-samples[i].sigma * d[i]);
        weights[i] = alphas[i] * transmittance;
        transmittance *= 1.0 - alphas[i];
    }
    // dL/dw_i
    let mut dw = vec![0.0; n];
    for i in 0..n {
        dw[i] = dl_drange * samples[i].t + dl_dwsum;
        for c in 0..3 {
            dw[i] += dl_dcolor[c] * samples[i].color[c];
        }
    }
    // dL/dalpha_j = dw_j prod_{i<j}(1-a_i) - sum_{k>j} dw_k a_k prod_{i<k, i!=j}(1-a_i)
    let mut prefix = vec![1.0; n];
    for i in 1..n {
        prefix[i] = prefix[i - 1] * (1.0 - alphas[i - 1]);
    }
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let mut da = dw[j] * prefix[j];
        let mut q = prefix[j];
        for k in j + 1..n {
            da -= dw[k] * alphas[k] * q;
            q *= 1.0 - alphas[k];
        }
        // d alpha / d sigma = delta * exp(-sigma delta)
        let dsigma = da * d[j] * Float::exp(-samples[j].sigma * d[j]);
        let dcolor = [
            dl_dcolor[0] * weights[j],
            dl_dcolor[1] * weights[j],
            dl_dcolor[2] * weights[j],
        ];
        out.push((dsigma, dcolor));
    }
    out
}

/// Per-point values reused across every (sample, neighbor) pair of a batch
/// iteration: the encoded feature and its partial product against the
/// feature columns of C's first layer.
pub struct PointCache {
    epoch: u64,
    entries: Vec<(u64, CachedPoint)>,
}

struct CachedPoint {
    pe_feat: [f64; PE_FEAT_DIM],
    h1_feat: Vec<f64>,
}

impl Default for PointCache {
    fn default() -> Self {
        PointCache { epoch: 0, entries: Vec::new() }
    }
}

impl PointCache {
    /// Invalidates all entries; call whenever features or C change.
    pub fn begin_iteration(&mut self, n_points: usize) {
        self.epoch += 1;
        if self.entries.len() < n_points {
            self.entries.resize_with(n_points, || {
                (0, CachedPoint { pe_feat: [0.0; PE_FEAT_DIM], h1_feat: Vec::new() })
            });
        }
    }

    fn get(&mut self, id: u32, map: &NeuralPointCloud, dec: &DecoderSet) -> &CachedPoint {
        let slot = &mut self.entries[id as usize];
        if slot.0 != self.epoch {
            positional_encode(&map.point(id).feature, PE_ORDER_FEATURE, &mut slot.1.pe_feat);
            let l0 = &dec.c.layers[0];
            slot.1.h1_feat.clear();
            slot.1.h1_feat.resize(l0.rows, 0.0);
            l0.forward_cols(&slot.1.pe_feat, 0, &mut slot.1.h1_feat, false);
            slot.0 = self.epoch;
        }
        &self.entries[id as usize].1
    }
}

/// Cached forward state of one neighbor of one sample.
#[derive(Clone, Debug)]
struct NeighborTape {
    point_id: u32,
    delta: Vector3<f64>,
    dist: f64,
    w_norm: f64,
    pe_delta: [f64; PE_DIST_DIM],
    c_pre0: Vec<f64>,
    f_kx: [f64; FEATURE_DIM],
    g_pre0: Vec<f64>,
    g_raw: f64,
    sigma_k: f64,
}

impl Default for NeighborTape {
    fn default() -> Self {
        NeighborTape {
            point_id: 0,
            delta: Vector3::zeros(),
            dist: 0.0,
            w_norm: 0.0,
            pe_delta: [0.0; PE_DIST_DIM],
            c_pre0: Vec::new(),
            f_kx: [0.0; FEATURE_DIM],
            g_pre0: Vec::new(),
            g_raw: 0.0,
            sigma_k: 0.0,
        }
    }
}

/// Cached forward state of one ray sample.
#[derive(Clone, Debug, Default)]
struct SampleTape {
    t: f64,
    neighbors: Vec<NeighborTape>,
    w_sum: f64,
    f_x: [f64; FEATURE_DIM],
    u_pre0: Vec<f64>,
    u_pre1: Vec<f64>,
    u_raw: [f64; 3],
    sigma: f64,
    color: [f64; 3],
}

/// Forward record of one rendered pixel, sufficient for the backward pass.
#[derive(Clone, Debug)]
pub struct PixelTape {
    origin: Vector3<f64>,
    dir_cam: Vector3<f64>,
    dir_world: Vector3<f64>,
    pose_q: crate::pose::Quat,
    dist_clamp: f64,
    /// range-per-depth factor of this pixel
    pub range_scale: f64,
    samples: Vec<SampleTape>,
    pub output: RenderOutput,
}

impl Default for PixelTape {
    fn default() -> Self {
        PixelTape {
            origin: Vector3::zeros(),
            dir_cam: Vector3::zeros(),
            dir_world: Vector3::zeros(),
            pose_q: crate::pose::Quat::IDENTITY,
            dist_clamp: 1e-6,
            range_scale: 1.0,
            samples: Vec::new(),
            output: RenderOutput::default(),
        }
    }
}

impl PixelTape {
    /// Rendered pinhole depth (z units).
    pub fn depth(&self) -> f64 {
        self.output.range * self.dir_cam.z
    }

    /// Range expectation conditioned on ray termination: the raw
    /// expectation divided by the accumulated weight. Free of the
    /// short-range bias a partially saturated ray carries.
    pub fn conditional_range(&self) -> f64 {
        self.output.range / self.output.weight_sum.max(1e-9)
    }

    /// z-component of the camera-frame ray direction (range-to-depth).
    pub fn dir_z(&self) -> f64 {
        self.dir_cam.z
    }

    /// Conditional rendered depth in pinhole z units.
    pub fn conditional_depth(&self) -> f64 {
        self.conditional_range() * self.dir_cam.z
    }
}

/// Gradient destinations for `render_gradients`; any sink may be absent.
#[derive(Default)]
pub struct GradSinks<'a> {
    /// Dense per-point feature gradients, aligned with the map points.
    pub features: Option<&'a mut Vec<[f64; FEATURE_DIM]>>,
    pub c: Option<&'a mut MlpGrad>,
    pub g: Option<&'a mut MlpGrad>,
    pub u: Option<&'a mut MlpGrad>,
    /// Raw quaternion gradient (w,x,y,z) plus translation gradient.
    pub pose_q: Option<&'a mut [f64; 4]>,
    pub pose_t: Option<&'a mut Vector3<f64>>,
}

/// Renders one pixel against the map: samples the ray, decodes per-neighbor
/// occupancy and interpolated radiance, composites. Samples with no
/// neighbors inside the query radius contribute zero occupancy.
#[allow(clippy::too_many_arguments)]
pub fn render_pixel(
    map: &NeuralPointCloud,
    dec: &DecoderSet,
    pose: &Pose,
    k: &Intrinsics,
    u: f64,
    v: f64,
    pixel_depth: Option<f64>,
    frame_depth_bounds: Option<(f64, f64)>,
    cfg: &RenderConfig,
    rng: &mut ChaCha12Rng,
    cache: &mut PointCache,
    tape: &mut PixelTape,
) {
    let (dir_cam, range_scale) = k.pixel_ray(u, v);
    tape.origin = pose.t;
    tape.dir_cam = dir_cam;
    tape.dir_world = pose.q.rotate(&dir_cam);
    tape.pose_q = pose.q;
    tape.dist_clamp = cfg.dist_clamp;
    tape.range_scale = range_scale;

    let (z_lo, z_hi) = frame_depth_bounds.unwrap_or((cfg.d_l, cfg.fallback_max_depth));
    let pixel_range = pixel_depth.map(|d| d * range_scale);
    let ts = sample_ray(pixel_range, z_lo * range_scale, z_hi * range_scale, cfg, rng);

    tape.samples.clear();
    for &t in &ts {
        let x = tape.origin + tape.dir_world * t;
        let neighbors = map.query_neighbors(&x, cfg.query_radius, cfg.k_neighbors);
        let mut st = SampleTape { t, ..Default::default() };
        if !neighbors.is_empty() {
            let mut w_sum = 0.0;
            for &(id, dist) in &neighbors {
                let mut nt = NeighborTape {
                    point_id: id,
                    delta: x - map.point(id).position,
                    dist,
                    ..Default::default()
                };
                positional_encode(
                    &[nt.delta.x, nt.delta.y, nt.delta.z],
                    PE_ORDER_DISTANCE,
                    &mut nt.pe_delta,
                );
                // C: cached feature half plus the displacement half
                let c0 = &dec.c.layers[0];
                let cached = cache.get(id, map, dec);
                nt.c_pre0.resize(c0.rows, 0.0);
                for (o, (h, b)) in nt.c_pre0.iter_mut().zip(cached.h1_feat.iter().zip(c0.b.iter())) {
                    *o = h + *b as f64;
                }
                c0.forward_cols(&nt.pe_delta, PE_FEAT_DIM, &mut nt.c_pre0, false);
                let c1 = &dec.c.layers[1];
                let mut act = vec![0.0; c0.rows];
                for (a, p) in act.iter_mut().zip(nt.c_pre0.iter()) {
                    *a = Activation::LeakyRelu.apply(*p);
                }
                let mut f_kx = vec![0.0; FEATURE_DIM];
                c1.forward(&act, &mut f_kx);
                nt.f_kx.copy_from_slice(&f_kx);
                // G occupancy head
                let g0 = &dec.g.layers[0];
                nt.g_pre0.resize(g0.rows, 0.0);
                g0.forward(&nt.f_kx, &mut nt.g_pre0);
                let g1 = &dec.g.layers[1];
                let mut g_act = vec![0.0; g0.rows];
                for (a, p) in g_act.iter_mut().zip(nt.g_pre0.iter()) {
                    *a = Activation::LeakyRelu.apply(*p);
                }
                let mut g_raw = vec![0.0; 1];
                g1.forward(&g_act, &mut g_raw);
                nt.g_raw = g_raw[0];
                nt.sigma_k = Activation::Softplus.apply(nt.g_raw);
                let w = 1.0 / nt.dist.max(cfg.dist_clamp);
                nt.w_norm = w; // raw for now, normalized below
                w_sum += w;
                st.neighbors.push(nt);
            }
            st.w_sum = w_sum;
            for nt in st.neighbors.iter_mut() {
                nt.w_norm /= w_sum;
                st.sigma += nt.w_norm * nt.sigma_k;
                for (fx, fk) in st.f_x.iter_mut().zip(nt.f_kx.iter()) {
                    *fx += nt.w_norm * fk;
                }
            }
            // U radiance head on the interpolated feature
            let u0 = &dec.u.layers[0];
            st.u_pre0.resize(u0.rows, 0.0);
            u0.forward(&st.f_x, &mut st.u_pre0);
            let u1 = &dec.u.layers[1];
            let mut a0 = vec![0.0; u0.rows];
            for (a, p) in a0.iter_mut().zip(st.u_pre0.iter()) {
                *a = Activation::LeakyRelu.apply(*p);
            }
            st.u_pre1.resize(u1.rows, 0.0);
            u1.forward(&a0, &mut st.u_pre1);
            let u2 = &dec.u.layers[2];
            let mut a1 = vec![0.0; u1.rows];
            for (a, p) in a1.iter_mut().zip(st.u_pre1.iter()) {
                *a = Activation::LeakyRelu.apply(*p);
            }
            let mut raw = vec![0.0; 3];
            u2.forward(&a1, &mut raw);
            st.u_raw.copy_from_slice(&raw);
            for c in 0..3 {
                st.color[c] = Activation::Sigmoid.apply(st.u_raw[c]);
            }
        }
        tape.samples.push(st);
    }

    let composite_inputs: Vec<CompositeSample> = tape
        .samples
        .iter()
        .map(|s| CompositeSample { t: s.t, sigma: s.sigma, color: s.color })
        .collect();
    tape.output = composite(&composite_inputs);
}

/// Backpropagates pixel-loss gradients through the tape into any of:
/// point features, decoder parameters, camera pose (raw quaternion +
/// translation).
pub fn render_gradients(
    tape: &PixelTape,
    map: &NeuralPointCloud,
    dec: &DecoderSet,
    cache: &mut PointCache,
    dl_drange: f64,
    dl_dcolor: &[f64; 3],
    dl_dwsum: f64,
    sinks: &mut GradSinks,
) {
    let composite_inputs: Vec<CompositeSample> = tape
        .samples
        .iter()
        .map(|s| CompositeSample { t: s.t, sigma: s.sigma, color: s.color })
        .collect();
    let per_sample = composite_backward(&composite_inputs, dl_drange, dl_dcolor, dl_dwsum);

    let want_params = sinks.c.is_some() || sinks.g.is_some() || sinks.u.is_some();
    let want_features = sinks.features.is_some();
    let want_pose = sinks.pose_q.is_some() || sinks.pose_t.is_some();

    let dir_jac = tape.pose_q.rotate_jacobian_q(&tape.dir_cam);
    let mut d_x = Vector3::zeros();
    let mut dq = [0.0; 4];
    let mut dt = Vector3::zeros();

    for (si, st) in tape.samples.iter().enumerate() {
        if st.neighbors.is_empty() {
            continue;
        }
        let (d_sigma, d_color) = per_sample[si];

        // U backward: d_color -> d f_x (+ U params)
        let mut d_fx = [0.0f64; FEATURE_DIM];
        {
            let u0 = &dec.u.layers[0];
            let u1 = &dec.u.layers[1];
            let u2 = &dec.u.layers[2];
            let mut delta2 = [0.0f64; 3];
            for c in 0..3 {
                delta2[c] = d_color[c] * Activation::Sigmoid.derivative(st.u_raw[c]);
            }
            let mut a0 = vec![0.0; u0.rows];
            for (a, p) in a0.iter_mut().zip(st.u_pre0.iter()) {
                *a = Activation::LeakyRelu.apply(*p);
            }
            let mut a1 = vec![0.0; u1.rows];
            for (a, p) in a1.iter_mut().zip(st.u_pre1.iter()) {
                *a = Activation::LeakyRelu.apply(*p);
            }
            if let Some(g) = sinks.u.as_deref_mut() {
                u2.backward_params_cols(&delta2, &a1, 0, &mut g.layers[2], true);
            }
            let mut d_a1 = vec![0.0; u1.rows];
            u2.backward_input_cols(&delta2, 0, &mut d_a1);
            for (d, p) in d_a1.iter_mut().zip(st.u_pre1.iter()) {
                *d *= Activation::LeakyRelu.derivative(*p);
            }
            if let Some(g) = sinks.u.as_deref_mut() {
                u1.backward_params_cols(&d_a1, &a0, 0, &mut g.layers[1], true);
            }
            let mut d_a0 = vec![0.0; u0.rows];
            u1.backward_input_cols(&d_a1, 0, &mut d_a0);
            for (d, p) in d_a0.iter_mut().zip(st.u_pre0.iter()) {
                *d *= Activation::LeakyRelu.derivative(*p);
            }
            if let Some(g) = sinks.u.as_deref_mut() {
                u0.backward_params_cols(&d_a0, &st.f_x, 0, &mut g.layers[0], true);
            }
            let mut d_fx_v = vec![0.0; FEATURE_DIM];
            u0.backward_input_cols(&d_a0, 0, &mut d_fx_v);
            d_fx.copy_from_slice(&d_fx_v);
        }

        // interpolation backward: normalized weights spread into raw ones
        // dL/dw_norm_k = d_sigma * sigma_k + d_fx . f_kx_k
        let mut d_wnorm = vec![0.0; st.neighbors.len()];
        let mut dot = 0.0;
        for (ni, nt) in st.neighbors.iter().enumerate() {
            let mut g = d_sigma * nt.sigma_k;
            for (a, b) in d_fx.iter().zip(nt.f_kx.iter()) {
                g += a * b;
            }
            d_wnorm[ni] = g;
            dot += g * nt.w_norm;
        }

        for (ni, nt) in st.neighbors.iter().enumerate() {
            // dL/d f_kx = w_norm * d_fx (radiance) + G path
            let mut d_fkx = [0.0f64; FEATURE_DIM];
            for (d, s) in d_fkx.iter_mut().zip(d_fx.iter()) {
                *d = nt.w_norm * s;
            }
            let d_sigma_k = d_sigma * nt.w_norm;
            // G backward
            {
                let g0 = &dec.g.layers[0];
                let g1 = &dec.g.layers[1];
                let delta1 = [d_sigma_k * Activation::Softplus.derivative(nt.g_raw)];
                let mut g_act = vec![0.0; g0.rows];
                for (a, p) in g_act.iter_mut().zip(nt.g_pre0.iter()) {
                    *a = Activation::LeakyRelu.apply(*p);
                }
                if let Some(g) = sinks.g.as_deref_mut() {
                    g1.backward_params_cols(&delta1, &g_act, 0, &mut g.layers[1], true);
                }
                let mut d_gact = vec![0.0; g0.rows];
                g1.backward_input_cols(&delta1, 0, &mut d_gact);
                for (d, p) in d_gact.iter_mut().zip(nt.g_pre0.iter()) {
                    *d *= Activation::LeakyRelu.derivative(*p);
                }
                if let Some(g) = sinks.g.as_deref_mut() {
                    g0.backward_params_cols(&d_gact, &nt.f_kx, 0, &mut g.layers[0], true);
                }
                let mut add = vec![0.0; FEATURE_DIM];
                g0.backward_input_cols(&d_gact, 0, &mut add);
                for (d, a) in d_fkx.iter_mut().zip(add.iter()) {
                    *d += a;
                }
            }
            // C backward (output activation is identity)
            let mut d_delta = Vector3::zeros();
            {
                let c0 = &dec.c.layers[0];
                let c1 = &dec.c.layers[1];
                let mut act = vec![0.0; c0.rows];
                for (a, p) in act.iter_mut().zip(nt.c_pre0.iter()) {
                    *a = Activation::LeakyRelu.apply(*p);
                }
                if let Some(g) = sinks.c.as_deref_mut() {
                    c1.backward_params_cols(&d_fkx, &act, 0, &mut g.layers[1], true);
                }
                let mut d_act = vec![0.0; c0.rows];
                c1.backward_input_cols(&d_fkx, 0, &mut d_act);
                for (d, p) in d_act.iter_mut().zip(nt.c_pre0.iter()) {
                    *d *= Activation::LeakyRelu.derivative(*p);
                }
                if want_params || want_features {
                    let cached = cache.get(nt.point_id, map, dec);
                    if let Some(g) = sinks.c.as_deref_mut() {
                        g.layers[0].b.iter_mut().zip(d_act.iter()).for_each(|(b, d)| *b += d);
                        c0.backward_params_cols(&d_act, &cached.pe_feat, 0, &mut g.layers[0], false);
                        c0.backward_params_cols(&d_act, &nt.pe_delta, PE_FEAT_DIM, &mut g.layers[0], false);
                    }
                    if let Some(features) = sinks.features.as_deref_mut() {
                        let mut d_pe_feat = [0.0f64; PE_FEAT_DIM];
                        c0.backward_input_cols(&d_act, 0, &mut d_pe_feat);
                        let mut d_feat = [0.0f64; FEATURE_DIM];
                        positional_encode_backward(
                            &map.point(nt.point_id).feature,
                            PE_ORDER_FEATURE,
                            &d_pe_feat,
                            &mut d_feat,
                        );
                        let sink = &mut features[nt.point_id as usize];
                        for (s, d) in sink.iter_mut().zip(d_feat.iter()) {
                            *s += d;
                        }
                    }
                }
                if want_pose {
                    let mut d_pe_delta = [0.0f64; PE_DIST_DIM];
                    c0.backward_input_cols(&d_act, PE_FEAT_DIM, &mut d_pe_delta);
                    let mut dd = [0.0f64; 3];
                    positional_encode_backward(
                        &[nt.delta.x, nt.delta.y, nt.delta.z],
                        PE_ORDER_DISTANCE,
                        &d_pe_delta,
                        &mut dd,
                    );
                    d_delta = Vector3::new(dd[0], dd[1], dd[2]);
                }
            }
            if want_pose {
                // raw weight path: w = 1/max(dist, clamp); dist = |delta|
                let d_wraw = (d_wnorm[ni] - dot) / st.w_sum;
                if nt.dist > tape.dist_clamp {
                    let dw_ddist = -1.0 / (nt.dist * nt.dist);
                    d_delta += nt.delta * (d_wraw * dw_ddist / nt.dist);
                }
                d_x += d_delta;
            }
        }
        if want_pose {
            // x_i = origin + t_i * R(q) d_cam: translation picks up d_x
            // directly, the quaternion through the rotated ray direction
            dt += d_x;
            for c in 0..4 {
                dq[c] += st.t * d_x.dot(&dir_jac[c]);
            }
            d_x = Vector3::zeros();
        }
    }

    if let Some(q) = sinks.pose_q.as_deref_mut() {
        for (a, b) in q.iter_mut().zip(dq.iter()) {
            *a += b;
        }
    }
    if let Some(t) = sinks.pose_t.as_deref_mut() {
        *t += dt;
    }
}

/// Renders full depth and color rasters from the map. `guide` supplies
/// per-pixel depth priors for sample placement (the same distribution the
/// tracking and mapping losses use); without it, rays sample uniformly up
/// to the fallback bound.
pub fn render_image(
    map: &NeuralPointCloud,
    dec: &DecoderSet,
    pose: &Pose,
    k: &Intrinsics,
    guide: Option<&DepthImage>,
    cfg: &RenderConfig,
    seed: u64,
) -> (DepthImage, Vec<[f64; 3]>) {
    use rand::SeedableRng;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut depth = DepthImage::new(k.width, k.height);
    let mut color = vec![[0.0; 3]; k.width * k.height];
    let mut cache = PointCache::default();
    cache.begin_iteration(map.len());
    let mut tape = PixelTape::default();
    let bounds = guide.and_then(DepthImage::valid_range);
    for v in 0..k.height {
        for u in 0..k.width {
            let pixel_depth = guide.and_then(|g| {
                let d = g.get(u, v);
                if d > 0.0 {
                    Some(d)
                } else {
                    None
                }
            });
            render_pixel(
                map,
                dec,
                pose,
                k,
                u as f64,
                v as f64,
                pixel_depth,
                bounds,
                cfg,
                &mut rng,
                &mut cache,
                &mut tape,
            );
            depth.set(u, v, tape.depth());
            color[v * k.width + u] = tape.output.color;
        }
    }
    (depth, color)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::point_map::{KfId, NeuralPoint, FeatureMoments};
    use crate::pose::Quat;
    use rand::SeedableRng;

    fn cfg() -> RenderConfig {
        RenderConfig::default()
    }

    #[test]
    fn sample_ray_valid_depth_concentrates_near_surface() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let t = sample_ray(Some(2.0), 0.5, 4.0, &cfg(), &mut rng);
        assert_eq!(t.len(), 20);
        let near = t.iter().filter(|&&x| (1.9..=2.1).contains(&x)).count();
        assert_eq!(near, 16, "near-band count {near}");
        assert!(t.iter().all(|&x| x >= 0.475 - 1e-12 && x <= 4.2 + 1e-12));
        assert!(t.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn sample_ray_invalid_depth_covers_full_range() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let t = sample_ray(None, 0.5, 4.0, &cfg(), &mut rng);
        assert_eq!(t.len(), 20);
        assert!(t.iter().all(|&x| x >= 0.001 && x <= 4.2));
    }

    #[test]
    fn sample_ray_degenerate_range() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let d = 2.0;
        let t = sample_ray(Some(d), d, d, &cfg(), &mut rng);
        assert!(t.iter().all(|&x| x >= 0.95 * d - 1e-12 && x <= 1.05 * d + 1e-12));
    }

    #[test]
    fn composite_empty_field() {
        let samples: Vec<CompositeSample> = (0..20)
            .map(|i| CompositeSample { t: 1.0 + i as f64 * 0.1, sigma: 0.0, color: [0.3, 0.4, 0.5] })
            .collect();
        let out = composite(&samples);
        assert_eq!(out.range, 0.0);
        assert_eq!(out.color, [0.0, 0.0, 0.0]);
        assert_eq!(out.variance, 0.0);
        assert!(out.weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn composite_opaque_surface_limit() {
        let out = composite(&[CompositeSample { t: 2.0, sigma: 1e6, color: [1.0, 0.0, 0.0] }]);
        assert!((out.range - 2.0).abs() < 1e-4, "range {}", out.range);
        assert!((out.weights[0] - 1.0).abs() < 1e-6);
        let three = composite(&[
            CompositeSample { t: 1.5, sigma: 0.0, color: [0.0; 3] },
            CompositeSample { t: 2.0, sigma: 1e6, color: [1.0, 0.0, 0.0] },
            CompositeSample { t: 2.5, sigma: 0.0, color: [0.0; 3] },
        ]);
        assert!((three.range - 2.0).abs() < 1e-4);
    }

    #[test]
    fn composite_matches_scalar_oracle() {
        let samples = [
            CompositeSample { t: 1.0, sigma: 0.8, color: [0.2, 0.3, 0.4] },
            CompositeSample { t: 1.4, sigma: 2.5, color: [0.9, 0.1, 0.5] },
            CompositeSample { t: 2.1, sigma: 0.3, color: [0.4, 0.4, 0.4] },
        ];
        let out = composite(&samples);

        // step-by-step scalar recomputation
        let d0 = 0.4;
        let d1 = 0.7;
        let d2 = (d0 + d1) / 2.0;
        let a0 = 1.0 - (-0.8f64 * d0).exp();
        let a1 = 1.0 - (-2.5f64 * d1).exp();
        let a2 = 1.0 - (-0.3f64 * d2).exp();
        let w0 = a0;
        let w1 = a1 * (1.0 - a0);
        let w2 = a2 * (1.0 - a0) * (1.0 - a1);
        let range = w0 * 1.0 + w1 * 1.4 + w2 * 2.1;
        let red = w0 * 0.2 + w1 * 0.9 + w2 * 0.4;
        let var = w0 * (1.0 - range).powi(2) + w1 * (1.4 - range).powi(2) + w2 * (2.1 - range).powi(2);
        assert!((out.weights[0] - w0).abs() < 1e-10);
        assert!((out.weights[1] - w1).abs() < 1e-10);
        assert!((out.weights[2] - w2).abs() < 1e-10);
        assert!((out.range - range).abs() < 1e-10);
        assert!((out.color[0] - red).abs() < 1e-10);
        assert!((out.variance - var).abs() < 1e-10);
    }

    #[test]
    fn composite_weights_form_subprobability() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        use rand::Rng;
        for _ in 0..200 {
            let n = rng.random_range(1..25);
            let mut t = 0.5;
            let samples: Vec<CompositeSample> = (0..n)
                .map(|_| {
                    t += rng.random_range(0.001..0.3);
                    CompositeSample {
                        t,
                        sigma: rng.random_range(0.0..50.0),
                        color: [0.5, 0.5, 0.5],
                    }
                })
                .collect();
            let out = composite(&samples);
            let total: f64 = out.weights.iter().sum();
            assert!(total <= 1.0 + 1e-6, "sum {total}");
            assert!(out.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
            assert!(out.range >= 0.0);
        }
    }

    #[test]
    fn composite_invariant_to_zero_sigma_duplicate() {
        let samples = vec![
            CompositeSample { t: 1.0, sigma: 1.2, color: [0.2, 0.2, 0.2] },
            CompositeSample { t: 1.5, sigma: 0.0, color: [0.9, 0.9, 0.9] },
            CompositeSample { t: 2.0, sigma: 3.0, color: [0.6, 0.1, 0.3] },
        ];
        let base = composite(&samples);
        let mut dup = samples.clone();
        dup.insert(2, samples[1]);
        let with_dup = composite(&dup);
        assert!((base.range - with_dup.range).abs() < 1e-12);
        assert!((base.color[0] - with_dup.color[0]).abs() < 1e-12);
        assert!((base.variance - with_dup.variance).abs() < 1e-12);
    }

    #[test]
    fn composite_backward_matches_fd() {
        let samples = [
            CompositeSample { t: 1.0, sigma: 0.8, color: [0.2, 0.3, 0.4] },
            CompositeSample { t: 1.4, sigma: 2.5, color: [0.9, 0.1, 0.5] },
            CompositeSample { t: 1.9, sigma: 0.0, color: [0.1, 0.1, 0.1] },
            CompositeSample { t: 2.1, sigma: 4.3, color: [0.4, 0.4, 0.4] },
        ];
        let dl_drange = 0.7;
        let dl_dcolor = [0.3, -0.5, 1.1];
        let grads = composite_backward(&samples, dl_drange, &dl_dcolor, 0.4);
        let loss = |s: &[CompositeSample]| -> f64 {
            let o = composite(s);
            dl_drange * o.range
                + 0.4 * o.weight_sum
                + dl_dcolor.iter().zip(o.color.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for i in 0..samples.len() {
            let mut sp = samples;
            sp[i].sigma += h;
            let mut sm = samples;
            sm[i].sigma = (sm[i].sigma - h).max(0.0);
            let fd = (loss(&sp) - loss(&sm)) / (sp[i].sigma - sm[i].sigma);
            assert!(
                (fd - grads[i].0).abs() < 1e-6 * fd.abs().max(1.0),
                "sigma {i}: fd {fd} vs {}",
                grads[i].0
            );
            for c in 0..3 {
                let mut cp = samples;
                cp[i].color[c] += h;
                let mut cm = samples;
                cm[i].color[c] -= h;
                let fd = (loss(&cp) - loss(&cm)) / (2.0 * h);
                assert!((fd - grads[i].1[c]).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    fn tiny_map(points: &[(f64, f64, f64)]) -> NeuralPointCloud {
        let mut map = NeuralPointCloud::new(0.15);
        map.register_keyframe(KfId::new(0, 0), Pose::IDENTITY);
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        use rand::Rng;
        for &(x, y, z) in points {
            let p = Vector3::new(x, y, z);
            let mut feature = [0.0; FEATURE_DIM];
            for f in feature.iter_mut() {
                *f = rng.random_range(-0.5..0.5);
            }
            let id = map.len() as u32;
            let _ = id;
            push_point(&mut map, p, feature);
        }
        map
    }

    fn push_point(map: &mut NeuralPointCloud, p: Vector3<f64>, feature: [f64; FEATURE_DIM]) {
        // build through the public surface: temporary insert via from_parts
        let mut points: Vec<NeuralPoint> = map.points().to_vec();
        points.push(NeuralPoint {
            position: p,
            feature,
            keyframe: KfId::new(0, 0),
            local_position: p,
            moments: FeatureMoments::default(),
        });
        let poses = map.keyframe_poses().clone();
        *map = NeuralPointCloud::from_parts(map.query_radius(), points, poses);
    }

    #[test]
    fn empty_map_renders_zero_depth() {
        let map = NeuralPointCloud::new(0.15);
        let dec = DecoderSet::seeded(1);
        let k = Intrinsics::desk_default();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut cache = PointCache::default();
        cache.begin_iteration(0);
        let mut tape = PixelTape::default();
        for (u, v) in [(0.0, 0.0), (40.0, 30.0), (79.0, 59.0)] {
            render_pixel(
                &map,
                &dec,
                &Pose::IDENTITY,
                &k,
                u,
                v,
                Some(2.0),
                Some((1.0, 3.0)),
                &cfg(),
                &mut rng,
                &mut cache,
                &mut tape,
            );
            assert_eq!(tape.output.range, 0.0);
            assert_eq!(tape.depth(), 0.0);
        }
    }

    #[test]
    fn coincident_point_weight_saturates() {
        // a sample placed exactly on the single neighbor: clamp keeps the
        // weight finite and normalization yields exactly one
        let map = tiny_map(&[(0.0, 0.0, 2.0)]);
        let dec = DecoderSet::seeded(2);
        let k = Intrinsics::desk_default();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let mut cache = PointCache::default();
        cache.begin_iteration(map.len());
        let mut tape = PixelTape::default();
        // principal ray passes through (0,0,2); the guide makes samples
        // bracket it tightly
        render_pixel(
            &map,
            &dec,
            &Pose::IDENTITY,
            &k,
            40.0,
            30.0,
            Some(2.0),
            Some((2.0, 2.0)),
            &cfg(),
            &mut rng,
            &mut cache,
            &mut tape,
        );
        for st in &tape.samples {
            for nt in &st.neighbors {
                assert!((nt.w_norm - 1.0).abs() < 1e-12);
                assert!(nt.w_norm.is_finite());
            }
        }
        assert!(tape.output.range > 0.0);
    }

    /// Straight-line single-pixel reimplementation using only the public
    /// decode ops and the composite oracle formulae.
    fn scalar_pixel_oracle(
        map: &NeuralPointCloud,
        dec: &DecoderSet,
        pose: &Pose,
        k: &Intrinsics,
        u: f64,
        v: f64,
        ts: &[f64],
        cfg: &RenderConfig,
    ) -> (f64, [f64; 3]) {
        let (dir_cam, _) = k.pixel_ray(u, v);
        let dir = pose.q.rotate(&dir_cam);
        let mut samples = Vec::new();
        for &t in ts {
            let x = pose.t + dir * t;
            let neighbors = map.query_neighbors(&x, cfg.query_radius, cfg.k_neighbors);
            if neighbors.is_empty() {
                samples.push(CompositeSample { t, sigma: 0.0, color: [0.0; 3] });
                continue;
            }
            let mut w_sum = 0.0;
            let mut weights = Vec::new();
            for &(_, dist) in &neighbors {
                let w = 1.0 / dist.max(cfg.dist_clamp);
                weights.push(w);
                w_sum += w;
            }
            let mut sigma = 0.0;
            let mut f_x = [0.0; FEATURE_DIM];
            for (i, &(id, _)) in neighbors.iter().enumerate() {
                let pt = map.point(id);
                let delta = x - pt.position;
                let f_kx = dec.decode_neighbor(&pt.feature, &delta);
                let s_k = dec.decode_occupancy(&f_kx);
                let wn = weights[i] / w_sum;
                sigma += wn * s_k;
                for (a, b) in f_x.iter_mut().zip(f_kx.iter()) {
                    *a += wn * b;
                }
            }
            let color = dec.decode_radiance(&f_x);
            samples.push(CompositeSample { t, sigma, color });
        }
        let out = composite(&samples);
        (out.range, out.color)
    }

    #[test]
    fn render_pixel_matches_scalar_oracle() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut pts = Vec::new();
        for _ in 0..20 {
            pts.push((
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(1.7..2.3),
            ));
        }
        let map = tiny_map(&pts);
        let dec = DecoderSet::seeded(3);
        let k = Intrinsics::desk_default();
        let pose = Pose::new(
            Quat::new(0.99, 0.02, -0.03, 0.01),
            Vector3::new(0.05, -0.02, 0.0),
        );
        let mut cache = PointCache::default();
        cache.begin_iteration(map.len());
        let mut tape = PixelTape::default();
        for (u, v) in [(40.0, 30.0), (35.0, 28.0), (50.0, 20.0)] {
            let mut r1 = ChaCha12Rng::seed_from_u64(1234);
            render_pixel(
                &map,
                &dec,
                &pose,
                &k,
                u,
                v,
                Some(2.0),
                Some((1.5, 2.5)),
                &cfg(),
                &mut r1,
                &mut cache,
                &mut tape,
            );
            let ts: Vec<f64> = tape.samples.iter().map(|s| s.t).collect();
            let (range, color) = scalar_pixel_oracle(&map, &dec, &pose, &k, u, v, &ts, &cfg());
            assert!((tape.output.range - range).abs() < 1e-6, "{} vs {range}", tape.output.range);
            for c in 0..3 {
                assert!((tape.output.color[c] - color[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn full_gradient_chain_matches_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mut pts = Vec::new();
        for _ in 0..10 {
            pts.push((
                rng.random_range(-0.25..0.25),
                rng.random_range(-0.25..0.25),
                rng.random_range(1.8..2.2),
            ));
        }
        let map = tiny_map(&pts);
        let dec = DecoderSet::seeded(4);
        let k = Intrinsics::desk_default();
        let pose = Pose::new(Quat::new(0.995, 0.01, -0.02, 0.015), Vector3::new(0.02, 0.01, -0.03));
        let dl_drange = 0.8;
        let dl_dcolor = [0.5, -0.7, 0.3];
        let dl_dwsum = -0.6;
        let sample_seed = 991u64;

        let loss = |map: &NeuralPointCloud, dec: &DecoderSet, pose: &Pose| -> f64 {
            let mut rng = ChaCha12Rng::seed_from_u64(sample_seed);
            let mut cache = PointCache::default();
            cache.begin_iteration(map.len());
            let mut tape = PixelTape::default();
            render_pixel(
                map,
                dec,
                pose,
                &k,
                41.0,
                29.0,
                Some(2.0),
                Some((1.8, 2.2)),
                &cfg(),
                &mut rng,
                &mut cache,
                &mut tape,
            );
            dl_drange * tape.output.range
                + dl_dwsum * tape.output.weight_sum
                + dl_dcolor.iter().zip(tape.output.color.iter()).map(|(a, b)| a * b).sum::<f64>()
        };

        // analytic gradients
        let mut rng2 = ChaCha12Rng::seed_from_u64(sample_seed);
        let mut cache = PointCache::default();
        cache.begin_iteration(map.len());
        let mut tape = PixelTape::default();
        render_pixel(
            &map,
            &dec,
            &pose,
            &k,
            41.0,
            29.0,
            Some(2.0),
            Some((1.8, 2.2)),
            &cfg(),
            &mut rng2,
            &mut cache,
            &mut tape,
        );
        let mut feat_grads = vec![[0.0; FEATURE_DIM]; map.len()];
        let mut cg = MlpGrad::zeros_like(&dec.c);
        let mut gg = MlpGrad::zeros_like(&dec.g);
        let mut ug = MlpGrad::zeros_like(&dec.u);
        let mut pq = [0.0; 4];
        let mut pt = Vector3::zeros();
        let mut sinks = GradSinks {
            features: Some(&mut feat_grads),
            c: Some(&mut cg),
            g: Some(&mut gg),
            u: Some(&mut ug),
            pose_q: Some(&mut pq),
            pose_t: Some(&mut pt),
        };
        render_gradients(&tape, &map, &dec, &mut cache, dl_drange, &dl_dcolor, dl_dwsum, &mut sinks);

        // pose gradients (h small: the displacement path crosses LeakyReLU
        // kinks at coarser steps)
        let hp = 1e-7;
        for c in 0..4 {
            let mut qp = pose.q;
            let mut qm = pose.q;
            match c {
                0 => {
                    qp.w += hp;
                    qm.w -= hp;
                }
                1 => {
                    qp.x += hp;
                    qm.x -= hp;
                }
                2 => {
                    qp.y += hp;
                    qm.y -= hp;
                }
                _ => {
                    qp.z += hp;
                    qm.z -= hp;
                }
            }
            let lp = loss(&map, &dec, &Pose { q: qp, t: pose.t });
            let lm = loss(&map, &dec, &Pose { q: qm, t: pose.t });
            let fd = (lp - lm) / (2.0 * hp);
            let rel = (fd - pq[c]).abs() / fd.abs().max(1e-4);
            assert!(rel < 1e-2, "pose q[{c}]: fd {fd} vs {}", pq[c]);
        }
        for c in 0..3 {
            let mut tp = pose.t;
            tp[c] += hp;
            let mut tm = pose.t;
            tm[c] -= hp;
            let lp = loss(&map, &dec, &Pose { q: pose.q, t: tp });
            let lm = loss(&map, &dec, &Pose { q: pose.q, t: tm });
            let fd = (lp - lm) / (2.0 * hp);
            let rel = (fd - pt[c]).abs() / fd.abs().max(1e-4);
            assert!(rel < 1e-2, "pose t[{c}]: fd {fd} vs {}", pt[c]);
        }

        // feature gradients: small h keeps quotients off LeakyReLU kinks
        let hf = 1e-6;
        let mut map_fd = map.clone();
        for pid in 0..map.len() as u32 {
            for fi in 0..FEATURE_DIM {
                let orig = map.point(pid).feature[fi];
                map_fd.point_mut(pid).feature[fi] = orig + hf;
                let lp = loss(&map_fd, &dec, &pose);
                map_fd.point_mut(pid).feature[fi] = orig - hf;
                let lm = loss(&map_fd, &dec, &pose);
                map_fd.point_mut(pid).feature[fi] = orig;
                let fd = (lp - lm) / (2.0 * hf);
                let got = feat_grads[pid as usize][fi];
                if fd.abs() < 1e-9 && got.abs() < 1e-9 {
                    continue;
                }
                let rel = (fd - got).abs() / fd.abs().max(1e-5);
                assert!(rel < 1e-3, "feature p{pid}[{fi}]: fd {fd} vs {got}");
            }
        }

        // parameter gradients, strided through every tensor
        let analytic = [&cg, &gg, &ug];
        let mut work = dec.clone();
        for (mi, mlp_name) in ["c", "g", "u"].iter().enumerate() {
            for li in 0..analytic[mi].layers.len() {
                let lw = analytic[mi].layers[li].w.clone();
                for wi in (0..lw.len()).step_by(37) {
                    let ti = {
                        // flat tensor order: (mlp, layer) -> 2*(layer offset)
                        let base: usize = match mi {
                            0 => 0,
                            1 => 4,
                            _ => 8,
                        };
                        base + li * 2
                    };
                    let orig = work.tensors()[ti][wi];
                    let wp = ((orig as f64) + hf) as f32;
                    let wm = ((orig as f64) - hf) as f32;
                    work.tensors_mut()[ti][wi] = wp;
                    let lp = loss(&map, &work, &pose);
                    work.tensors_mut()[ti][wi] = wm;
                    let lm = loss(&map, &work, &pose);
                    work.tensors_mut()[ti][wi] = orig;
                    let fd = (lp - lm) / (wp as f64 - wm as f64);
                    let got = lw[wi];
                    if fd.abs() < 1e-9 && got.abs() < 1e-9 {
                        continue;
                    }
                    let rel = (fd - got).abs() / fd.abs().max(1e-5);
                    assert!(rel < 1e-3, "{mlp_name} layer {li} w[{wi}]: fd {fd} vs {got}");
                }
            }
        }
    }

    #[test]
    fn color_branch_isolated_when_color_gradient_zero() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut pts = Vec::new();
        for _ in 0..8 {
            pts.push((
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(1.9..2.1),
            ));
        }
        let map = tiny_map(&pts);
        let dec = DecoderSet::seeded(5);
        let k = Intrinsics::desk_default();
        let mut cache = PointCache::default();
        cache.begin_iteration(map.len());
        let mut tape = PixelTape::default();
        let mut r = ChaCha12Rng::seed_from_u64(11);
        render_pixel(
            &map,
            &dec,
            &Pose::IDENTITY,
            &k,
            40.0,
            30.0,
            Some(2.0),
            Some((1.9, 2.1)),
            &cfg(),
            &mut r,
            &mut cache,
            &mut tape,
        );
        let mut ug = MlpGrad::zeros_like(&dec.u);
        let mut sinks = GradSinks { u: Some(&mut ug), ..Default::default() };
        render_gradients(&tape, &map, &dec, &mut cache, 1.0, &[0.0, 0.0, 0.0], 0.0, &mut sinks);
        assert!(ug.layers.iter().all(|l| l.w.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn full_frame_weights_bounded_and_guide_respected() {
        let map = tiny_map(&[
            (0.0, 0.0, 2.0),
            (0.1, 0.05, 2.0),
            (-0.12, -0.04, 2.05),
            (0.02, 0.11, 1.95),
        ]);
        let dec = DecoderSet::seeded(6);
        let k = Intrinsics::new(30.0, 30.0, 20.0, 15.0, 40, 30, 1e-3).unwrap();
        let (depth, color) = render_image(&map, &dec, &Pose::IDENTITY, &k, None, &cfg(), 17);
        assert_eq!(depth.data.len(), 1200);
        assert!(color.iter().all(|c| c.iter().all(|&x| (0.0..=1.0).contains(&x))));
        // empty map renders all-zero depth
        let empty = NeuralPointCloud::new(0.15);
        let (d2, _) = render_image(&empty, &dec, &Pose::IDENTITY, &k, None, &cfg(), 17);
        assert!(d2.data.iter().all(|&d| d == 0.0));
    }
}
