//! Slice-level numeric kernels shared by forward and backward passes.

use crate::tensor::Scalar;

/// `out[m,n] += a[m,k] * b[k,n]`
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m,k] += a[m,n] * b[k,n]^T`
pub fn matmul_a_bt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            out[i * k + p] = out[i * k + p] + acc;
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
pub fn matmul_at_b_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Zero padding mode for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output extent `ceil(input / stride)`; padding split with the smaller
    /// half before.
    #[default]
    Same,
    /// No padding; output extent `(input - kernel) / stride + 1`.
    Valid,
}

impl Padding {
    /// Returns `(output extent, padding before)`, or `None` when the kernel
    /// does not fit.
    pub fn resolve(self, input: usize, kernel: usize, stride: usize) -> Option<(usize, usize)> {
        match self {
            Padding::Same => {
                let out = input.div_ceil(stride);
                let total = ((out - 1) * stride + kernel).saturating_sub(input);
                Some((out, total / 2))
            }
            Padding::Valid => {
                (input >= kernel).then(|| ((input - kernel) / stride + 1, 0))
            }
        }
    }
}

/// Geometry of one 2-D convolution over a single frame.
#[derive(Debug, Clone, Copy)]
pub struct Conv2dGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl Conv2dGeom {
    pub fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one frame `[cin, h, w]` into `[cin*kh*kw, oh*ow]` columns.
pub fn im2col<T: Scalar>(frame: &[T], g: &Conv2dGeom, cols: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &frame[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the frame.
pub fn col2im_acc<T: Scalar>(cols: &[T], g: &Conv2dGeom, frame: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            frame[base + ix as usize] =
                                frame[base + ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_extents() {
        assert_eq!(Padding::Same.resolve(32, 3, 2), Some((16, 0)));
        assert_eq!(Padding::Same.resolve(8, 3, 1), Some((8, 1)));
        assert_eq!(Padding::Same.resolve(5, 3, 2), Some((3, 1)));
        assert_eq!(Padding::Valid.resolve(5, 3, 2), Some((2, 0)));
        assert_eq!(Padding::Valid.resolve(2, 3, 1), None);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [0.5, 7.0, 2.0, 16.0]);

        // a * b where b is given transposed (2x3)
        let bt = [1.0f64, -1.0, 0.5, 0.0, 2.0, 1.0];
        let mut c2 = [0.0; 4];
        matmul_a_bt_acc(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);

        // a^T (3x2) from at (2x3 stored) times b' (2x2)
        let at = [1.0f64, 3.0, 5.0, 2.0, 4.0, 6.0]; // 2x3 == (3x2)^T
        let e = [1.0f64, 0.0, 0.0, 1.0];
        let mut c3 = [0.0; 6];
        matmul_at_b_acc(&at, &e, &mut c3, 2, 3, 2);
        assert_eq!(c3, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
