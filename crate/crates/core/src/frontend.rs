//! Per-agent sequential odometry: map initialization, pose tracking by
//! rendered-depth descent, joint feature/decoder mapping, keyframe
//! management and the tracking outlier mask.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::camera::Intrinsics;
use crate::decoders::DecoderSet;
use crate::frame::Frame;
use crate::nn::MlpGrad;
use crate::optim::{feature_adam_step, AdamParams, AdamState, DecoderAdam, LrRole};
use crate::point_map::{KfId, NeuralPointCloud, PatchProjector, FEATURE_DIM, PATCH};
use crate::pose::{Pose, Quat};
use crate::render::{render_gradients, render_pixel, GradSinks, PixelTape, PointCache, RenderConfig};

/// Outlier-mask variant for the tracking loss. `Standard` keeps a pixel
/// when its depth error stays within 10x the batch median and its
/// uncertainty within 2x the median uncertainty. `Literal` applies the
/// published condition verbatim; it is retained for comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Standard,
    Literal,
}

#[derive(Clone, Debug)]
pub struct FrontendConfig {
    /// Mapping pixel batch.
    pub m1: usize,
    /// Tracking pixel batch.
    pub m2: usize,
    /// Initialization pixel batch.
    pub m3: usize,
    /// Photometric weight in the mapping loss.
    pub lambda1: f64,
    pub keyframe_every: u32,
    pub map_every: u32,
    pub map_iters: usize,
    pub map_iters_post_fusion: usize,
    pub init_iters: usize,
    /// Post-init mean depth-L1 gate on held-out pixels, meters.
    pub init_l1_threshold: f64,
    pub tracking_iters: usize,
    pub track_early_stop_delta: f64,
    pub track_early_stop_window: usize,
    /// Masked mean tracking loss above this raises TrackLost, range units.
    pub track_loss_threshold: f64,
    pub covisible_count: usize,
    pub mask_mode: MaskMode,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            m1: 3000,
            m2: 1500,
            m3: 3136,
            lambda1: 0.2,
            keyframe_every: 50,
            map_every: 10,
            map_iters: 200,
            map_iters_post_fusion: 150,
            init_iters: 3000,
            init_l1_threshold: 0.05,
            tracking_iters: 50,
            track_early_stop_delta: 1e-5,
            track_early_stop_window: 10,
            track_loss_threshold: 0.12,
            covisible_count: 5,
            mask_mode: MaskMode::Standard,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<(), FrontendError> {
        let counts = [
            ("m1", self.m1),
            ("m2", self.m2),
            ("m3", self.m3),
            ("map_iters", self.map_iters),
            ("map_iters_post_fusion", self.map_iters_post_fusion),
            ("init_iters", self.init_iters),
            ("tracking_iters", self.tracking_iters),
            ("covisible_count", self.covisible_count),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(FrontendError::InvalidConfig(alloc::format!("{name} must be > 0")));
            }
        }
        if self.keyframe_every == 0 || self.map_every == 0 {
            return Err(FrontendError::InvalidConfig("cadences must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FrontendError {
    InvalidConfig(String),
    InitDiverged { final_l1: Option<f64>, improved_recently: bool },
    TrackLost { frame: u32, loss: f64 },
}

impl core::fmt::Display for FrontendError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            FrontendError::InvalidConfig(m) => write!(f, "invalid frontend config: {m}"),
            FrontendError::InitDiverged { final_l1, improved_recently } => write!(
                f,
                "initialization diverged (depth L1 {final_l1:?} m, improving recently: {improved_recently})"
            ),
            FrontendError::TrackLost { frame, loss } => {
                write!(f, "tracking lost at frame {frame} (masked loss {loss:.4})")
            }
        }
    }
}

impl core::error::Error for FrontendError {}

/// Per-frame pose estimates plus odometry edges recorded at track time.
#[derive(Clone, Debug, Default)]
pub struct AgentTrajectory {
    pub estimates: Vec<(u32, Pose)>,
    /// (from, to, relative pose) with rel = inverse(P_from) * P_to.
    pub seq_rel: Vec<(u32, u32, Pose)>,
}

/// Per-frame log line emitted by `process_frame`.
#[derive(Clone, Copy, Debug, Default)]
pub struct FrameLog {
    pub frame: u32,
    pub track_loss: f64,
    pub track_iters: usize,
    pub inlier_fraction: f64,
    pub map_loss: f64,
    pub mapped: bool,
    pub points_added: usize,
}

/// Result of one pose optimization run.
#[derive(Clone, Copy, Debug)]
pub struct PoseOptResult {
    pub pose: Pose,
    pub best_masked_mean: f64,
    pub iters: usize,
    pub inlier_fraction: f64,
}

pub struct Frontend {
    pub agent_id: u32,
    pub cfg: FrontendConfig,
    pub render_cfg: RenderConfig,
    pub adam: AdamParams,
    pub intrinsics: Intrinsics,
    pub trajectory: AgentTrajectory,
    /// Stored keyframes (frame data plus the pose estimate at track time).
    pub keyframes: Vec<Frame>,
    projector: PatchProjector,
    decoder_opt: Option<DecoderAdam>,
    feature_step: u64,
    rng: ChaCha12Rng,
    cache: PointCache,
    tape: PixelTape,
    tape_pool: Vec<PixelTape>,
    last_pose: Pose,
    initialized: bool,
    pub post_fusion: bool,
    /// Decoder optimization steps since the last federated upload.
    pub local_steps: u64,
}

impl Frontend {
    pub fn new(
        agent_id: u32,
        cfg: FrontendConfig,
        render_cfg: RenderConfig,
        adam: AdamParams,
        intrinsics: Intrinsics,
        seed: u64,
    ) -> Result<Self, FrontendError> {
        cfg.validate()?;
        Ok(Frontend {
            agent_id,
            cfg,
            render_cfg,
            adam,
            intrinsics,
            trajectory: AgentTrajectory::default(),
            keyframes: Vec::new(),
            projector: PatchProjector::new(seed ^ 0x5eed_f00d, 0.02),
            decoder_opt: None,
            feature_step: 0,
            rng: ChaCha12Rng::seed_from_u64(seed),
            cache: PointCache::default(),
            tape: PixelTape::default(),
            tape_pool: Vec::new(),
            last_pose: Pose::IDENTITY,
            initialized: false,
            post_fusion: false,
            local_steps: 0,
        })
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn last_pose(&self) -> Pose {
        self.last_pose
    }

    fn kf_id(&self, frame: u32) -> KfId {
        KfId::new(self.agent_id, frame)
    }

    fn latest_keyframe(&self) -> KfId {
        let frame = self.keyframes.last().map(|f| f.id).unwrap_or(0);
        self.kf_id(frame)
    }

    /// Drops decoder optimizer moments; call after a federated swap-in.
    pub fn reset_decoder_optimizer(&mut self) {
        self.decoder_opt = None;
    }

    /// Rigidly moves all per-agent pose state into another coordinate
    /// system (this agent's sub-map was fused into the global frame).
    pub fn apply_transform(&mut self, t: &Pose) {
        for (_, pose) in self.trajectory.estimates.iter_mut() {
            *pose = t.compose(pose);
        }
        for kf in self.keyframes.iter_mut() {
            kf.pose_est = t.compose(&kf.pose_est);
        }
        self.last_pose = t.compose(&self.last_pose);
    }

    /// First-frame bootstrap: pose fixed to identity, points added, then a
    /// long feature+decoder optimization. The exit gate renders a held-out
    /// pixel set and compares mean depth L1 against the threshold.
    pub fn initialize(
        &mut self,
        map: &mut NeuralPointCloud,
        decoders: &mut DecoderSet,
        frame: &mut Frame,
    ) -> Result<FrameLog, FrontendError> {
        frame.pose_est = Pose::IDENTITY;
        frame.is_keyframe = true;
        let kf = self.kf_id(frame.id);
        map.register_keyframe(kf, frame.pose_est);
        let added =
            map.add_points_from_frame(frame, &frame.pose_est, &self.intrinsics, kf, &mut self.projector);
        if added == 0 {
            return Err(FrontendError::InitDiverged { final_l1: None, improved_recently: false });
        }
        self.keyframes.push(frame.clone());
        self.trajectory.estimates.push((frame.id, frame.pose_est));
        self.last_pose = frame.pose_est;

        let pool = [frame.clone()];
        let losses = self.optimize_map(map, decoders, &pool, self.cfg.init_iters, self.cfg.m3);

        let mut holdout_rng = ChaCha12Rng::seed_from_u64(0xD1CE ^ self.agent_id as u64);
        let l1 = self.holdout_depth_l1(map, decoders, frame, 200, &mut holdout_rng);
        let improved = improved_recently(&losses, 500.min(self.cfg.init_iters / 2).max(1));
        match l1 {
            Some(v) if v < self.cfg.init_l1_threshold => {
                self.initialized = true;
                Ok(FrameLog {
                    frame: frame.id,
                    map_loss: losses.last().copied().unwrap_or(f64::NAN),
                    mapped: true,
                    points_added: added,
                    ..Default::default()
                })
            }
            other => Err(FrontendError::InitDiverged { final_l1: other, improved_recently: improved }),
        }
    }

    /// Mean |rendered - observed| depth over `n_pixels` seeded holdout
    /// pixels with valid depth, in meters.
    pub fn holdout_depth_l1(
        &mut self,
        map: &NeuralPointCloud,
        decoders: &DecoderSet,
        frame: &Frame,
        n_pixels: usize,
        rng: &mut ChaCha12Rng,
    ) -> Option<f64> {
        let bounds = frame.depth.valid_range()?;
        let (w, h) = (frame.width(), frame.height());
        self.cache.begin_iteration(map.len());
        let mut total = 0.0;
        let mut count = 0usize;
        let mut guard = 0;
        while count < n_pixels && guard < n_pixels * 50 {
            guard += 1;
            let u = rng.random_range(0..w);
            let v = rng.random_range(0..h);
            let d = frame.depth.get(u, v);
            if d <= 0.0 {
                continue;
            }
            render_pixel(
                map,
                decoders,
                &frame.pose_est,
                &self.intrinsics,
                u as f64,
                v as f64,
                Some(d),
                Some(bounds),
                &self.render_cfg,
                rng,
                &mut self.cache,
                &mut self.tape,
            );
            total += (self.tape.conditional_depth() - d).abs();
            count += 1;
        }
        if count == 0 {
            None
        } else {
            Some(total / count as f64)
        }
    }

    /// Joint feature + decoder optimization over a frame pool with the
    /// mapping loss (depth L1 plus lambda1-weighted color L1); poses are
    /// frozen. Returns the per-iteration loss history.
    pub fn optimize_map(
        &mut self,
        map: &mut NeuralPointCloud,
        decoders: &mut DecoderSet,
        frames: &[Frame],
        iters: usize,
        batch: usize,
    ) -> Vec<f64> {
        let batch = batch.min(frames.len() * self.intrinsics.pixel_count()).max(1);
        if self.decoder_opt.is_none() {
            self.decoder_opt = Some(DecoderAdam::new(decoders));
        }
        let bounds: Vec<Option<(f64, f64)>> = frames.iter().map(|f| f.depth.valid_range()).collect();
        let mut c_grad = MlpGrad::zeros_like(&decoders.c);
        let mut g_grad = MlpGrad::zeros_like(&decoders.g);
        let mut u_grad = MlpGrad::zeros_like(&decoders.u);
        let mut feat_grads: Vec<[f64; FEATURE_DIM]> = Vec::new();
        let mut losses = Vec::with_capacity(iters);
        // the feature learning-rate decay counter restarts with the phase
        for phase_iter in 0..iters {
            self.cache.begin_iteration(map.len());
            c_grad.clear();
            g_grad.clear();
            u_grad.clear();
            feat_grads.clear();
            feat_grads.resize(map.len(), [0.0; FEATURE_DIM]);
            let mut loss = 0.0;
            let inv_m = 1.0 / batch as f64;
            for _ in 0..batch {
                let fi = self.rng.random_range(0..frames.len());
                let frame = &frames[fi];
                let u = self.rng.random_range(0..frame.width());
                let v = self.rng.random_range(0..frame.height());
                let depth = frame.depth.get(u, v);
                let pixel_depth = if depth > 0.0 { Some(depth) } else { None };
                render_pixel(
                    map,
                    decoders,
                    &frame.pose_est,
                    &self.intrinsics,
                    u as f64,
                    v as f64,
                    pixel_depth,
                    bounds[fi],
                    &self.render_cfg,
                    &mut self.rng,
                    &mut self.cache,
                    &mut self.tape,
                );
                let mut dl_drange = 0.0;
                let mut dl_dwsum = 0.0;
                if let Some(d) = pixel_depth {
                    let target_range = d * self.tape.range_scale;
                    let wsum = self.tape.output.weight_sum.max(1e-9);
                    let e = self.tape.output.range / wsum - target_range;
                    loss += e.abs() * inv_m;
                    let sign = e.signum() * inv_m;
                    dl_drange = sign / wsum;
                    dl_dwsum = -sign * self.tape.output.range / (wsum * wsum);
                }
                let mut dl_dcolor = [0.0; 3];
                let target_rgb = frame.color.get_f64(u, v);
                for c in 0..3 {
                    let e = self.tape.output.color[c] - target_rgb[c];
                    loss += self.cfg.lambda1 * e.abs() * inv_m;
                    dl_dcolor[c] = self.cfg.lambda1 * e.signum() * inv_m;
                }
                let mut sinks = GradSinks {
                    features: Some(&mut feat_grads),
                    c: Some(&mut c_grad),
                    g: Some(&mut g_grad),
                    u: Some(&mut u_grad),
                    ..Default::default()
                };
                render_gradients(&self.tape, map, decoders, &mut self.cache, dl_drange, &dl_dcolor, dl_dwsum, &mut sinks);
            }
            let opt = self.decoder_opt.as_mut().expect("optimizer initialized above");
            opt.step(decoders, &[&c_grad, &g_grad, &u_grad], &self.adam)
                .expect("decoder gradients are congruent");
            self.feature_step += 1;
            let lr = self.adam.effective_lr(LrRole::Feature, phase_iter as u64);
            feature_adam_step(map, &feat_grads, lr, self.feature_step, &self.adam);
            self.local_steps += 1;
            losses.push(loss);
        }
        losses
    }

    /// Pose-only optimization of one frame against a frozen world. Shared
    /// by tracking and loop relative-pose estimation.
    #[allow(clippy::too_many_arguments)]
    pub fn optimize_pose(
        map: &NeuralPointCloud,
        decoders: &DecoderSet,
        frame: &Frame,
        k: &Intrinsics,
        init: Pose,
        cfg: &FrontendConfig,
        render_cfg: &RenderConfig,
        adam: &AdamParams,
        rng: &mut ChaCha12Rng,
        cache: &mut PointCache,
        tape_pool: &mut Vec<PixelTape>,
    ) -> Result<PoseOptResult, FrontendError> {
        let batch = cfg.m2.min(k.pixel_count());
        let bounds = frame.depth.valid_range();
        let mut pose = init;
        let mut best_pose = init;
        let mut opt = AdamState::new(7);
        let mut best = f64::INFINITY;
        let mut best_at = 0usize;
        let mut inlier_fraction = 0.0;
        let mut iters_run = 0;
        if tape_pool.len() < batch {
            tape_pool.resize_with(batch, PixelTape::default);
        }
        // (err, var, depth) per rendered pixel of the current iteration
        let mut records: Vec<(f64, f64, f64)> = Vec::with_capacity(batch);
        for iter in 0..cfg.tracking_iters {
            iters_run = iter + 1;
            cache.begin_iteration(map.len());
            records.clear();
            for _ in 0..batch {
                let u = rng.random_range(0..k.width);
                let v = rng.random_range(0..k.height);
                let d = frame.depth.get(u, v);
                if d <= 0.0 {
                    continue;
                }
                let slot = records.len();
                let tape = &mut tape_pool[slot];
                render_pixel(
                    map,
                    decoders,
                    &pose,
                    k,
                    u as f64,
                    v as f64,
                    Some(d),
                    bounds,
                    render_cfg,
                    rng,
                    cache,
                    tape,
                );
                let target_range = d * tape.range_scale;
                let err = (tape.conditional_range() - target_range).abs();
                records.push((err, tape.output.variance, d));
            }
            if records.is_empty() {
                return Err(FrontendError::TrackLost { frame: frame.id, loss: f64::INFINITY });
            }
            let mu = median(records.iter().map(|r| r.0));
            let nu = median(records.iter().map(|r| r.1));
            let is_inlier = |err: f64, var: f64| -> bool {
                match cfg.mask_mode {
                    MaskMode::Standard => err <= 10.0 * mu && var <= 2.0 * nu,
                    MaskMode::Literal => !((0.1 * mu <= err && err <= 10.0 * mu) || var <= 2.0 * nu),
                }
            };
            let mut masked_sum = 0.0;
            let mut n_inliers = 0usize;
            let mut dq = [0.0f64; 4];
            let mut dt = Vector3::zeros();
            let inv_m = 1.0 / batch as f64;
            for (ri, rec) in records.iter().enumerate() {
                if !is_inlier(rec.0, rec.1) {
                    continue;
                }
                n_inliers += 1;
                masked_sum += rec.0;
                let tape = &tape_pool[ri];
                let target_range = rec.2 * tape.range_scale;
                let wsum = tape.output.weight_sum.max(1e-9);
                let cond = tape.output.range / wsum;
                let sign = (cond - target_range).signum() * inv_m;
                // d|cond - r|/d(range) and /d(wsum) by the quotient rule
                let dl_drange = sign / wsum;
                let dl_dwsum = -sign * tape.output.range / (wsum * wsum);
                let mut sinks =
                    GradSinks { pose_q: Some(&mut dq), pose_t: Some(&mut dt), ..Default::default() };
                render_gradients(tape, map, decoders, cache, dl_drange, &[0.0; 3], dl_dwsum, &mut sinks);
            }
            if n_inliers == 0 {
                return Err(FrontendError::TrackLost { frame: frame.id, loss: f64::INFINITY });
            }
            let masked_mean = masked_sum / n_inliers as f64;
            inlier_fraction = n_inliers as f64 / records.len() as f64;
            // keep the best pose seen: near the optimum the batch gradient
            // is noise and Adam keeps stepping by ~lr regardless
            if masked_mean < best {
                best = masked_mean;
                best_pose = pose;
            }
            if masked_mean <= best + cfg.track_early_stop_delta {
                best_at = iter;
            } else if iter - best_at >= cfg.track_early_stop_window {
                break;
            }
            // raw quaternion gradient, projected onto the unit tangent
            let qdot = dq[0] * pose.q.w + dq[1] * pose.q.x + dq[2] * pose.q.y + dq[3] * pose.q.z;
            dq[0] -= qdot * pose.q.w;
            dq[1] -= qdot * pose.q.x;
            dq[2] -= qdot * pose.q.y;
            dq[3] -= qdot * pose.q.z;
            let mut params = [pose.q.w, pose.q.x, pose.q.y, pose.q.z, pose.t.x, pose.t.y, pose.t.z];
            let grads = [dq[0], dq[1], dq[2], dq[3], dt.x, dt.y, dt.z];
            opt.step_f64(&mut params, &grads, adam.effective_lr(LrRole::Pose, 0), adam)
                .expect("pose parameter block is 7-long");
            pose = Pose::new(
                Quat::new(params[0], params[1], params[2], params[3]),
                Vector3::new(params[4], params[5], params[6]),
            );
        }
        Ok(PoseOptResult { pose: best_pose, best_masked_mean: best, iters: iters_run, inlier_fraction })
    }

    /// Tracks one frame with the zero-motion model; map and decoders are
    /// read-only.
    pub fn track(
        &mut self,
        map: &NeuralPointCloud,
        decoders: &DecoderSet,
        frame: &mut Frame,
    ) -> Result<PoseOptResult, FrontendError> {
        let init = self.last_pose;
        let mut pool = core::mem::take(&mut self.tape_pool);
        let res = Self::optimize_pose(
            map,
            decoders,
            frame,
            &self.intrinsics,
            init,
            &self.cfg,
            &self.render_cfg,
            &self.adam,
            &mut self.rng,
            &mut self.cache,
            &mut pool,
        );
        self.tape_pool = pool;
        let res = res?;
        if res.best_masked_mean > self.cfg.track_loss_threshold {
            return Err(FrontendError::TrackLost { frame: frame.id, loss: res.best_masked_mean });
        }
        frame.pose_est = res.pose;
        if let Some((prev_id, prev_pose)) = self.trajectory.estimates.last().map(|(i, p)| (*i, *p)) {
            self.trajectory.seq_rel.push((prev_id, frame.id, prev_pose.inverse().compose(&res.pose)));
        }
        self.trajectory.estimates.push((frame.id, res.pose));
        self.last_pose = res.pose;
        Ok(res)
    }

    /// Keyframes ranked by how much of the frame's valid geometry falls
    /// inside their view frustum; top `covisible_count` ids returned.
    pub fn select_covisible(&self, frame: &Frame) -> Vec<u32> {
        let mut scored: Vec<(f64, u32)> = Vec::new();
        for kf in &self.keyframes {
            if kf.id == frame.id {
                continue;
            }
            let mut visible = 0usize;
            let mut total = 0usize;
            let kf_inv = kf.pose_est.inverse();
            for pv in 0..frame.height() / PATCH {
                for pu in 0..frame.width() / PATCH {
                    let (cu, cv) = (pu * PATCH + PATCH / 2, pv * PATCH + PATCH / 2);
                    let d = frame.depth.get(cu, cv);
                    if d <= 0.0 {
                        continue;
                    }
                    total += 1;
                    let world = frame
                        .pose_est
                        .transform_point(&self.intrinsics.unproject(cu as f64, cv as f64, d));
                    let cam = kf_inv.transform_point(&world);
                    if let Some((u, v, _)) = self.intrinsics.project(&cam) {
                        if self.intrinsics.in_bounds(u, v) {
                            visible += 1;
                        }
                    }
                }
            }
            let frac = if total > 0 { visible as f64 / total as f64 } else { 0.0 };
            scored.push((frac, kf.id));
        }
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        scored.into_iter().take(self.cfg.covisible_count).map(|(_, id)| id).collect()
    }

    /// Supplementation plus joint mapping over the current frame and its
    /// co-visible keyframes.
    pub fn map_update(
        &mut self,
        map: &mut NeuralPointCloud,
        decoders: &mut DecoderSet,
        frame: &Frame,
    ) -> FrameLog {
        let anchor = if frame.is_keyframe { self.kf_id(frame.id) } else { self.latest_keyframe() };
        if frame.is_keyframe {
            map.register_keyframe(anchor, frame.pose_est);
        }
        let added =
            map.add_points_from_frame(frame, &frame.pose_est, &self.intrinsics, anchor, &mut self.projector);
        let covis = self.select_covisible(frame);
        let mut pool: Vec<Frame> = vec![frame.clone()];
        for kf in &self.keyframes {
            if covis.contains(&kf.id) && kf.id != frame.id {
                pool.push(kf.clone());
            }
        }
        let iters = if self.post_fusion { self.cfg.map_iters_post_fusion } else { self.cfg.map_iters };
        let losses = self.optimize_map(map, decoders, &pool, iters, self.cfg.m1);
        FrameLog {
            frame: frame.id,
            map_loss: losses.last().copied().unwrap_or(f64::NAN),
            mapped: true,
            points_added: added,
            ..Default::default()
        }
    }

    /// One sequential step: initialize on the first frame, otherwise track,
    /// then map on the configured cadence.
    pub fn process_frame(
        &mut self,
        map: &mut NeuralPointCloud,
        decoders: &mut DecoderSet,
        frame: &mut Frame,
    ) -> Result<FrameLog, FrontendError> {
        if !self.initialized {
            return self.initialize(map, decoders, frame);
        }
        frame.is_keyframe = frame.id % self.cfg.keyframe_every == 0;
        let track = self.track(map, decoders, frame)?;
        let mut log = FrameLog {
            frame: frame.id,
            track_loss: track.best_masked_mean,
            track_iters: track.iters,
            inlier_fraction: track.inlier_fraction,
            ..Default::default()
        };
        if frame.is_keyframe {
            self.keyframes.push(frame.clone());
        }
        if frame.id % self.cfg.map_every == 0 {
            let map_log = self.map_update(map, decoders, frame);
            log.map_loss = map_log.map_loss;
            log.mapped = true;
            log.points_added = map_log.points_added;
        }
        Ok(log)
    }
}

fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn improved_recently(losses: &[f64], window: usize) -> bool {
    if losses.len() <= window {
        return true;
    }
    let split = losses.len() - window;
    let before = losses[..split].iter().cloned().fold(f64::INFINITY, f64::min);
    let tail = losses[split..].iter().cloned().fold(f64::INFINITY, f64::min);
    tail < before
}
