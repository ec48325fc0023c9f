//! RGB-D frames: 8-bit color, floating-point depth in meters (0 = invalid).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::pose::Pose;

/// 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[u8; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize) -> Self {
        ColorImage { width, height, data: vec![[0, 0, 0]; width * height] }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> [u8; 3] {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, rgb: [u8; 3]) {
        self.data[v * self.width + u] = rgb;
    }

    /// Color as floats in [0, 1].
    #[inline]
    pub fn get_f64(&self, u: usize, v: usize) -> [f64; 3] {
        let c = self.get(u, v);
        [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0]
    }
}

/// Depth image in meters; 0 encodes "invalid" everywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize) -> Self {
        DepthImage { width, height, data: vec![0.0; width * height] }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, d: f64) {
        self.data[v * self.width + u] = d;
    }

    #[inline]
    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.get(u, v) > 0.0
    }

    /// Minimum and maximum over valid pixels; `None` when all invalid.
    pub fn valid_range(&self) -> Option<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for &d in &self.data {
            if d > 0.0 {
                if d < lo {
                    lo = d;
                }
                if d > hi {
                    hi = d;
                }
            }
        }
        if hi > 0.0 {
            Some((lo, hi))
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FrameError {
    DimensionMismatch(String),
    ValueOutOfRange(String),
}

impl core::fmt::Display for FrameError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            FrameError::DimensionMismatch(m) => write!(f, "dimension mismatch: {m}"),
            FrameError::ValueOutOfRange(m) => write!(f, "value out of range: {m}"),
        }
    }
}

impl core::error::Error for FrameError {}

/// One RGB-D frame of a sequence, with its evolving pose estimate.
#[derive(Clone, Debug)]
pub struct Frame {
    pub id: u32,
    pub color: ColorImage,
    pub depth: DepthImage,
    pub pose_est: Pose,
    pub is_keyframe: bool,
}

impl Frame {
    pub fn new(id: u32, color: ColorImage, depth: DepthImage) -> Result<Self, FrameError> {
        if color.width != depth.width || color.height != depth.height {
            return Err(FrameError::DimensionMismatch(alloc::format!(
                "color {}x{} vs depth {}x{}",
                color.width,
                color.height,
                depth.width,
                depth.height
            )));
        }
        if depth.data.iter().any(|&d| d < 0.0 || !d.is_finite()) {
            return Err(FrameError::ValueOutOfRange("negative or non-finite depth".into()));
        }
        Ok(Frame { id, color, depth, pose_est: Pose::IDENTITY, is_keyframe: false })
    }

    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }
}
