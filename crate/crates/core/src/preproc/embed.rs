use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Feature vector of one frame and its position in the clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeature {
    pub vector: Tensor<f64>,
    pub frame_index: usize,
}

/// Maps a frame `[C, H, W]` to a fixed-length feature vector.
pub trait FeatureExtractor: Send + Sync {
    fn extract(&self, frame: &Tensor<f32>) -> Result<Tensor<f64>>;
}

/// Mean and standard deviation of each cell of a `grid x grid` partition,
/// per channel. Cell edges sit at `floor(i * H / grid)`, so uneven extents
/// are absorbed without padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchStats {
    pub grid: usize,
}

impl FeatureExtractor for PatchStats {
    fn extract(&self, frame: &Tensor<f32>) -> Result<Tensor<f64>> {
        embed_frame(frame, self.grid)
    }
}

/// Layout: channel-major, then cells in row-major order, each contributing
/// `(mean, std)`; length `2 * C * grid^2`.
pub fn embed_frame(frame: &Tensor<f32>, grid: usize) -> Result<Tensor<f64>> {
    let (c, h, w) = match frame.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape("embed_frame", format!("frame must be [C, H, W], got {s:?}"))),
    };
    if grid == 0 {
        return Err(Error::invalid("grid must be positive"));
    }
    if h < grid || w < grid {
        return Err(Error::invalid(format!(
            "frame {h}x{w} is smaller than a {grid}x{grid} grid"
        )));
    }
    let data = frame.data();
    let mut out = Vec::with_capacity(2 * c * grid * grid);
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for gy in 0..grid {
            let (y0, y1) = (gy * h / grid, (gy + 1) * h / grid);
            for gx in 0..grid {
                let (x0, x1) = (gx * w / grid, (gx + 1) * w / grid);
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                let mut sum = 0.0;
                for y in y0..y1 {
                    sum += plane[y * w + x0..y * w + x1].iter().map(|&v| v as f64).sum::<f64>();
                }
                let mean = sum / count;
                let mut var = 0.0;
                for y in y0..y1 {
                    var += plane[y * w + x0..y * w + x1]
                        .iter()
                        .map(|&v| (v as f64 - mean).powi(2))
                        .sum::<f64>();
                }
                out.push(mean);
                out.push((var / count).sqrt());
            }
        }
    }
    Tensor::new(vec![out.len()], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_frame() {
        let f = Tensor::full(&[1, 6, 8], 0.25f32);
        let v = embed_frame(&f, 2).unwrap();
        assert_eq!(v.data(), &[0.25, 0.0, 0.25, 0.0, 0.25, 0.0, 0.25, 0.0]);
    }

    #[test]
    fn zero_frame() {
        let v = embed_frame(&Tensor::zeros(&[3, 5, 5]), 2).unwrap();
        assert_eq!(v.numel(), 2 * 3 * 4);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn checkerboard() {
        let data: Vec<f32> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f32).collect();
        let f = Tensor::new(vec![1, 4, 4], data).unwrap();
        assert_eq!(embed_frame(&f, 1).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(embed_frame(&Tensor::zeros(&[4, 4]), 1).is_err());
        assert!(embed_frame(&Tensor::zeros(&[1, 2, 2]), 3).is_err());
        assert!(embed_frame(&Tensor::zeros(&[1, 2, 2]), 0).is_err());
    }
}
