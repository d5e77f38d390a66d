use crate::error::Result;
use crate::preproc::{BBox, VideoClip};

/// Locates the acting subject; one box per clip.
pub trait SubjectDetector: Send + Sync {
    fn detect(&self, clip: &VideoClip) -> Result<BBox>;
}

/// Thresholds per-pixel temporal energy and returns the dilated bounding box
/// of the pixels above `theta * max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyDetector {
    pub theta: f64,
    pub rho: f64,
}

impl Default for EnergyDetector {
    fn default() -> Self {
        Self {
            theta: 0.2,
            rho: 0.15,
        }
    }
}

impl SubjectDetector for EnergyDetector {
    fn detect(&self, clip: &VideoClip) -> Result<BBox> {
        Ok(detect_subject(clip, self.theta, self.rho))
    }
}

/// Per-pixel energy averaged over channels: temporal standard deviation when
/// the clip has at least two frames, raw intensity otherwise.
fn energy_map(clip: &VideoClip) -> Vec<f64> {
    let (n, c, h, w) = (clip.n_frames(), clip.channels(), clip.height(), clip.width());
    let plane = h * w;
    let data = clip.frames().data();
    let mut energy = vec![0.0; plane];
    for ch in 0..c {
        for p in 0..plane {
            let at = |t: usize| data[(t * c + ch) * plane + p] as f64;
            let e = if n == 1 {
                at(0)
            } else {
                let mean = (0..n).map(at).sum::<f64>() / n as f64;
                ((0..n).map(|t| (at(t) - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
            };
            energy[p] += e / c as f64;
        }
    }
    energy
}

/// Median of the energy map, taken as the sensor-noise floor. Most pixels of
/// a clip are static background, whose temporal std is pure noise.
fn noise_floor(energy: &[f64]) -> f64 {
    let mut v = energy.to_vec();
    let mid = v.len() / 2;
    *v.select_nth_unstable_by(mid, f64::total_cmp).1
}

/// Box of the pixels whose energy exceeds `theta` times the maximum. In
/// motion mode the median energy is subtracted first so that pixel noise
/// does not pass the threshold when the motion is faint.
pub fn detect_subject(clip: &VideoClip, theta: f64, rho: f64) -> BBox {
    let (h, w) = (clip.height(), clip.width());
    let mut energy = energy_map(clip);
    if clip.n_frames() > 1 {
        let floor = noise_floor(&energy);
        for e in &mut energy {
            *e = (*e - floor).max(0.0);
        }
    }
    let max = energy.iter().copied().fold(0.0, f64::max);
    let full = BBox::full(w, h);
    if !(max > 0.0) {
        return full;
    }
    let cut = theta * max;
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if energy[y * w + x] > cut {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x0 >= x1 {
        return full;
    }
    let mx = (rho * (x1 - x0) as f64).ceil() as usize;
    let my = (rho * (y1 - y0) as f64).ceil() as usize;
    BBox {
        x0: x0.saturating_sub(mx),
        y0: y0.saturating_sub(my),
        x1: (x1 + mx).min(w),
        y1: (y1 + my).min(h),
    }
}
