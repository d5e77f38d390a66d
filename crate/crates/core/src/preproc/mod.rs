//! Clip preprocessing: per-frame embedding, K-Means keyframe selection,
//! subject detection, crop and resize.

mod detect;
mod embed;
mod kmeans;
mod resize;

use serde::{Deserialize, Serialize};

pub use detect::{detect_subject, EnergyDetector, SubjectDetector};
pub use embed::{embed_frame, FeatureExtractor, FrameFeature, PatchStats};
pub use kmeans::{select_keyframes, select_keyframes_with, KMeansOptions, KeyframeSelection};
pub use resize::crop_resize;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A gesture video: frames `[n, C, H, W]` with its distance and label.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Tensor<f32>,
    fps: f32,
    distance_m: f32,
    label: usize,
}

impl VideoClip {
    pub fn new(frames: Tensor<f32>, fps: f32, distance_m: f32, label: usize) -> Result<Self> {
        if frames.rank() != 4 {
            return Err(Error::shape(
                "video_clip",
                format!("frames must be [n, C, H, W], got {:?}", frames.shape()),
            ));
        }
        if !(distance_m > 0.0) {
            return Err(Error::invalid(format!("distance must be positive, got {distance_m}")));
        }
        Ok(Self {
            frames,
            fps,
            distance_m,
            label,
        })
    }

    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn distance_m(&self) -> f32 {
        self.distance_m
    }

    pub fn label(&self) -> usize {
        self.label
    }

    /// Frame `t` as `[C, H, W]`.
    pub fn frame(&self, t: usize) -> Tensor<f32> {
        self.frames.index_axis0(t).expect("frame index in range")
    }

    pub fn frame_slice(&self, t: usize) -> &[f32] {
        let len = self.channels() * self.height() * self.width();
        &self.frames.data()[t * len..(t + 1) * len]
    }
}

/// Pixel box with exclusive upper corners: `0 <= x0 < x1 <= W`,
/// `0 <= y0 < y1 <= H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::invalid(format!(
                "degenerate box ({x0}, {y0}, {x1}, {y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
        }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocConfig {
    /// Keyframes kept per clip.
    pub k: usize,
    /// Grid cells per side of the patch-statistics embedding.
    pub grid: usize,
    /// Output `(height, width)`.
    pub out_hw: (usize, usize),
    /// Detector threshold as a fraction of the peak motion energy.
    pub theta: f64,
    /// Detector box dilation as a fraction of the box size.
    pub rho: f64,
    pub max_iter: usize,
    pub restarts: usize,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        Self {
            k: 8,
            grid: 4,
            out_hw: (32, 32),
            theta: 0.2,
            rho: 0.15,
            max_iter: 100,
            restarts: 10,
        }
    }
}

impl PreprocConfig {
    pub fn kmeans(&self) -> KMeansOptions {
        KMeansOptions {
            max_iter: self.max_iter,
            restarts: self.restarts,
        }
    }

    pub fn detector(&self) -> EnergyDetector {
        EnergyDetector {
            theta: self.theta,
            rho: self.rho,
        }
    }
}

/// Embed → select keyframes → one subject box per clip → crop and resize
/// every keyframe. Output `[k, C, h, w]` in chronological order.
pub fn preprocess_clip(clip: &VideoClip, cfg: &PreprocConfig, rng: &mut Rng) -> Result<Tensor<f32>> {
    preprocess_clip_with(clip, cfg, &PatchStats { grid: cfg.grid }, &cfg.detector(), rng)
}

pub fn preprocess_clip_with(
    clip: &VideoClip,
    cfg: &PreprocConfig,
    extractor: &dyn FeatureExtractor,
    detector: &dyn SubjectDetector,
    rng: &mut Rng,
) -> Result<Tensor<f32>> {
    if cfg.k > clip.n_frames() {
        return Err(Error::invalid(format!(
            "cannot keep {} keyframes from a {}-frame clip",
            cfg.k,
            clip.n_frames()
        )));
    }
    let features = (0..clip.n_frames())
        .map(|t| {
            Ok(FrameFeature {
                vector: extractor.extract(&clip.frame(t))?,
                frame_index: t,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let selection = select_keyframes_with(&features, cfg.k, rng, &cfg.kmeans())?;
    let bbox = detector.detect(clip)?;
    let frames = selection
        .indices
        .iter()
        .map(|&t| crop_resize(&clip.frame(t), &bbox, cfg.out_hw))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_clip(n: usize, h: usize, w: usize, seed: u64) -> VideoClip {
        let frames = Tensor::rand_uniform(&[n, 1, h, w], 0.0, 1.0, &mut Rng::new(seed));
        VideoClip::new(frames, 21.0, 10.0, 3).unwrap()
    }

    #[test]
    fn clip_invariants() {
        assert!(VideoClip::new(Tensor::zeros(&[2, 1, 4, 4]), 21.0, 0.0, 0).is_err());
        assert!(VideoClip::new(Tensor::zeros(&[2, 4, 4]), 21.0, 5.0, 0).is_err());
    }

    #[test]
    fn identity_selection_and_full_box_resizes_every_frame() {
        let clip = random_clip(8, 12, 10, 1);
        let cfg = PreprocConfig {
            k: 8,
            out_hw: (6, 5),
            theta: 2.0, // never exceeded: falls back to the full frame
            ..PreprocConfig::default()
        };
        let out = preprocess_clip(&clip, &cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(out.shape(), &[8, 1, 6, 5]);
        for t in 0..8 {
            let expected = crop_resize(&clip.frame(t), &BBox::full(10, 12), (6, 5)).unwrap();
            assert_eq!(out.index_axis0(t).unwrap(), expected);
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let clip = random_clip(30, 16, 16, 2);
        let cfg = PreprocConfig {
            out_hw: (8, 8),
            ..PreprocConfig::default()
        };
        let a = preprocess_clip(&clip, &cfg, &mut Rng::new(5)).unwrap();
        let b = preprocess_clip(&clip, &cfg, &mut Rng::new(5)).unwrap();
        assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_k_above_n() {
        let clip = random_clip(4, 8, 8, 3);
        let err = preprocess_clip(&clip, &PreprocConfig::default(), &mut Rng::new(0));
        assert!(err.is_err());
    }

    #[test]
    fn output_shape_is_independent_of_input_size() {
        for (n, h, w) in [(9, 20, 14), (40, 33, 47), (8, 8, 8)] {
            let clip = random_clip(n, h, w, n as u64);
            let cfg = PreprocConfig {
                out_hw: (7, 9),
                ..PreprocConfig::default()
            };
            let out = preprocess_clip(&clip, &cfg, &mut Rng::new(1)).unwrap();
            assert_eq!(out.shape(), &[8, 1, 7, 9]);
        }
    }
}
