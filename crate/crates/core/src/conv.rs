//! Patch-gather convolution kernels shared by the forward and both backward
//! passes of [`Graph::conv2d`](crate::graph::Graph::conv2d).

use crate::tensor::{gemm, Layout, Scalar};

/// Geometry of one 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.padding - self.kh) / self.stride + 1,
            (self.width + 2 * self.padding - self.kw) / self.stride + 1,
        )
    }

    /// Rows of the patch matrix: `C * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn fits(&self) -> bool {
        self.stride >= 1
            && self.height + 2 * self.padding >= self.kh
            && self.width + 2 * self.padding >= self.kw
    }
}

/// Gathers every receptive field of one `C x H x W` image into a
/// `(C*kh*kw) x (Ho*Wo)` matrix.
pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let l = ho * wo;
    let (h, w, p, s) = (
        g.height as isize,
        g.width as isize,
        g.padding as isize,
        g.stride,
    );
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - p;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - p;
                        *o = if ix < 0 || ix >= w {
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

/// Scatter-adds a patch matrix back onto an image; adjoint of [`im2col`].
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let l = ho * wo;
    let (h, w, p, s) = (
        g.height as isize,
        g.width as isize,
        g.padding as isize,
        g.stride,
    );
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - p;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * s + kj) as isize - p;
                        if ix >= 0 && ix < w {
                            let d = &mut plane[iy as usize * g.width + ix as usize];
                            *d = *d + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch. Returns the output buffer and the
/// gathered patches (kept for the backward pass).
pub fn conv_forward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    out_channels: usize,
    bias: Option<&[T]>,
) -> (Vec<T>, Vec<T>) {
    let (ho, wo) = g.out_hw();
    let l = ho * wo;
    let k = g.patch_len();
    let img_len = g.channels * g.height * g.width;
    let mut cols = vec![T::zero(); n * k * l];
    let mut out = vec![T::zero(); n * out_channels * l];
    for i in 0..n {
        let col = &mut cols[i * k * l..(i + 1) * k * l];
        im2col(&x[i * img_len..(i + 1) * img_len], g, col);
        let o = &mut out[i * out_channels * l..(i + 1) * out_channels * l];
        if let Some(b) = bias {
            for (oc, row) in o.chunks_mut(l).enumerate() {
                row.fill(b[oc]);
            }
        }
        gemm(
            out_channels,
            k,
            l,
            w,
            Layout::N,
            col,
            Layout::N,
            T::one(),
            o,
        );
    }
    (out, cols)
}

/// Gradients of a convolution: returns `(dx, dw, db)`; each is only
/// computed when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    dout: &[T],
    cols: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    out_channels: usize,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (ho, wo) = g.out_hw();
    let l = ho * wo;
    let k = g.patch_len();
    let img_len = g.channels * g.height * g.width;

    let mut dw = want_dw.then(|| vec![T::zero(); out_channels * k]);
    let mut db = want_db.then(|| vec![T::zero(); out_channels]);
    let mut dx = want_dx.then(|| vec![T::zero(); n * img_len]);
    let mut dcols = if want_dx {
        vec![T::zero(); k * l]
    } else {
        Vec::new()
    };

    for i in 0..n {
        let d = &dout[i * out_channels * l..(i + 1) * out_channels * l];
        let col = &cols[i * k * l..(i + 1) * k * l];
        if let Some(dw) = dw.as_mut() {
            gemm(
                out_channels,
                l,
                k,
                d,
                Layout::N,
                col,
                Layout::T,
                T::one(),
                dw,
            );
        }
        if let Some(db) = db.as_mut() {
            for (oc, row) in d.chunks(l).enumerate() {
                db[oc] = db[oc] + row.iter().copied().sum();
            }
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                k,
                out_channels,
                l,
                w,
                Layout::T,
                d,
                Layout::N,
                T::zero(),
                &mut dcols,
            );
            col2im(&dcols, g, &mut dx[i * img_len..(i + 1) * img_len]);
        }
    }
    (dx, dw, db)
}
