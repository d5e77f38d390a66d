use crate::error::{Error, Result};
use crate::preproc::BBox;
use crate::tensor::Tensor;

/// Source coordinate of output index `i` with aligned corners:
/// `i * (n_in - 1) / (n_out - 1)`, split into a base index and a fraction.
fn source(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    if n_out == 1 || n_in == 1 {
        return (0, 0, 0.0);
    }
    let s = (i * (n_in - 1)) as f64 / (n_out - 1) as f64;
    let lo = (s.floor() as usize).min(n_in - 1);
    let hi = (lo + 1).min(n_in - 1);
    (lo, hi, s - lo as f64)
}

fn lerp(a: f64, b: f64, f: f64) -> f64 {
    let v = a + (b - a) * f;
    v.clamp(a.min(b), a.max(b))
}

/// Crops `frame [C, H, W]` to `bbox` and resizes bilinearly to `out_hw`.
pub fn crop_resize(frame: &Tensor<f32>, bbox: &BBox, out_hw: (usize, usize)) -> Result<Tensor<f32>> {
    let (c, h, w) = match frame.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape("crop_resize", format!("frame must be [C, H, W], got {s:?}"))),
    };
    if !bbox.fits(w, h) {
        return Err(Error::invalid(format!("box {bbox:?} does not fit a {h}x{w} frame")));
    }
    let (oh, ow) = out_hw;
    if oh == 0 || ow == 0 {
        return Err(Error::invalid("output size must be positive"));
    }
    let (ch, cw) = (bbox.height(), bbox.width());
    let rows: Vec<_> = (0..oh).map(|i| source(i, ch, oh)).collect();
    let cols: Vec<_> = (0..ow).map(|j| source(j, cw, ow)).collect();
    let data = frame.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for k in 0..c {
        let px = |y: usize, x: usize| data[(k * h + bbox.y0 + y) * w + bbox.x0 + x] as f64;
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = lerp(px(y0, x0), px(y0, x1), fx);
                let bottom = lerp(px(y1, x0), px(y1, x1), fx);
                out.push(lerp(top, bottom, fy) as f32);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn identity() {
        let f = Tensor::rand_uniform(&[2, 7, 5], -1.0, 1.0, &mut Rng::new(4));
        let out = crop_resize(&f, &BBox::full(5, 7), (7, 5)).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn constant_stays_constant() {
        let f = Tensor::full(&[1, 4, 6], 0.37f32);
        for hw in [(1, 1), (3, 9), (17, 5)] {
            let out = crop_resize(&f, &BBox::new(1, 1, 5, 3).unwrap(), hw).unwrap();
            assert!(out.data().iter().all(|&v| v == 0.37));
        }
    }

    #[test]
    fn aligned_corner_upsample() {
        let f = Tensor::new(vec![1, 2, 2], vec![0.0f32, 1.0, 0.0, 1.0]).unwrap();
        let out = crop_resize(&f, &BBox::full(2, 2), (2, 4)).unwrap();
        let third = (1.0f64 / 3.0) as f32;
        let two_thirds = (2.0f64 / 3.0) as f32;
        assert_eq!(out.data(), &[0.0, third, two_thirds, 1.0, 0.0, third, two_thirds, 1.0]);
    }

    #[test]
    fn crop_selects_window() {
        let f = Tensor::new(vec![1, 3, 3], (0..9).map(|v| v as f32).collect()).unwrap();
        let out = crop_resize(&f, &BBox::new(1, 1, 3, 3).unwrap(), (2, 2)).unwrap();
        assert_eq!(out.data(), &[4.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn rejects_box_outside_frame() {
        let f = Tensor::zeros(&[1, 4, 4]);
        assert!(crop_resize(&f, &BBox::new(0, 0, 5, 4).unwrap(), (2, 2)).is_err());
    }
}
