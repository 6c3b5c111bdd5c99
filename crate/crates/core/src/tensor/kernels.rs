//! Raw slice kernels behind the differentiable ops.

/// Geometry of a 2D convolution over an NCHW batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Returns `None` when the padded input is smaller than the kernel.
    pub fn new(n: usize, c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        let ph = h + 2 * pad;
        let pw = w + 2 * pad;
        if stride == 0 || k == 0 || ph < k || pw < k {
            return None;
        }
        Some(ConvGeom {
            n,
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: (ph - k) / stride + 1,
            ow: (pw - k) / stride + 1,
        })
    }

    pub fn in_plane(&self) -> usize {
        self.h * self.w
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Rows of the unfolded patch matrix per sample.
    pub fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output index range `[lo, hi)` whose input coordinate
    /// `o * stride + offset - pad` falls inside `[0, len)`.
    fn valid(&self, offset: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = offset as isize - self.pad as isize;
        // o*s + shift >= 0
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        // o*s + shift <= len-1
        let top = len as isize - 1 - shift;
        let hi = if top < 0 { 0 } else { top / s + 1 };
        let lo = (lo as usize).min(out_len);
        let hi = (hi as usize).min(out_len).max(lo);
        (lo, hi)
    }
}

/// Unfolds one sample `x: [C, H, W]` into `cols: [C*K*K, OH*OW]`.
pub(crate) fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let plane = g.out_plane();
    cols.fill(0.0);
    for ci in 0..g.c {
        let xc = &x[ci * g.in_plane()..(ci + 1) * g.in_plane()];
        for kh in 0..g.k {
            let (oh_lo, oh_hi) = g.valid(kh, g.h, g.oh);
            for kw in 0..g.k {
                let (ow_lo, ow_hi) = g.valid(kw, g.w, g.ow);
                let row = (ci * g.k + kh) * g.k + kw;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + kh - g.pad;
                    let src = &xc[ih * g.w..(ih + 1) * g.w];
                    let drow = &mut dst[oh * g.ow..(oh + 1) * g.ow];
                    for ow in ow_lo..ow_hi {
                        drow[ow] = src[ow * g.stride + kw - g.pad];
                    }
                }
            }
        }
    }
}

/// Folds `dcols: [C*K*K, OH*OW]` back onto `dx: [C, H, W]`, accumulating.
pub(crate) fn col2im_add(g: &ConvGeom, dcols: &[f64], dx: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let dxc = &mut dx[ci * g.in_plane()..(ci + 1) * g.in_plane()];
        for kh in 0..g.k {
            let (oh_lo, oh_hi) = g.valid(kh, g.h, g.oh);
            for kw in 0..g.k {
                let (ow_lo, ow_hi) = g.valid(kw, g.w, g.ow);
                let row = (ci * g.k + kh) * g.k + kw;
                let src = &dcols[row * plane..(row + 1) * plane];
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + kh - g.pad;
                    let drow = &mut dxc[ih * g.w..(ih + 1) * g.w];
                    let srow = &src[oh * g.ow..(oh + 1) * g.ow];
                    for ow in ow_lo..ow_hi {
                        drow[ow * g.stride + kw - g.pad] += srow[ow];
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full convolution forward. `weight: [O, C, K, K]`. Returns `(out, cols)` where
/// `cols` holds the unfolded patches of every sample (empty for pointwise kernels,
/// whose patches are the input itself).
pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    out_channels: usize,
) -> (Vec<f64>, Vec<f64>) {
    let plane = g.out_plane();
    let plen = g.patch_len();
    let mut out = vec![0.0; g.n * out_channels * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.n * plen * plane]
    };
    for n in 0..g.n {
        let patches: &[f64] = if g.is_pointwise() {
            &x[n * g.c * g.in_plane()..(n + 1) * g.c * g.in_plane()]
        } else {
            let cs = &mut cols[n * plen * plane..(n + 1) * plen * plane];
            im2col(g, &x[n * g.c * g.in_plane()..(n + 1) * g.c * g.in_plane()], cs);
            cs
        };
        let out_n = &mut out[n * out_channels * plane..(n + 1) * out_channels * plane];
        for o in 0..out_channels {
            let row = &mut out_n[o * plane..(o + 1) * plane];
            if let Some(b) = bias {
                row.fill(b[o]);
            }
            let wrow = &weight[o * plen..(o + 1) * plen];
            for (kk, &wv) in wrow.iter().enumerate() {
                axpy(row, wv, &patches[kk * plane..(kk + 1) * plane]);
            }
        }
    }
    (out, cols)
}

/// Gradients of [`conv2d_forward`]. Each output buffer is optional and accumulated into.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    cols: &[f64],
    weight: &[f64],
    out_channels: usize,
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let plane = g.out_plane();
    let plen = g.patch_len();
    let mut dcols = vec![0.0; plen * plane];
    for n in 0..g.n {
        let patches: &[f64] = if g.is_pointwise() {
            &x[n * g.c * g.in_plane()..(n + 1) * g.c * g.in_plane()]
        } else {
            &cols[n * plen * plane..(n + 1) * plen * plane]
        };
        let dout_n = &dout[n * out_channels * plane..(n + 1) * out_channels * plane];
        if let Some(db) = db.as_deref_mut() {
            for o in 0..out_channels {
                db[o] += dout_n[o * plane..(o + 1) * plane].iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            for o in 0..out_channels {
                let drow = &dout_n[o * plane..(o + 1) * plane];
                for kk in 0..plen {
                    dw[o * plen + kk] += dot(drow, &patches[kk * plane..(kk + 1) * plane]);
                }
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            dcols.fill(0.0);
            for o in 0..out_channels {
                let drow = &dout_n[o * plane..(o + 1) * plane];
                for kk in 0..plen {
                    axpy(&mut dcols[kk * plane..(kk + 1) * plane], weight[o * plen + kk], drow);
                }
            }
            let dx_n = &mut dx[n * g.c * g.in_plane()..(n + 1) * g.c * g.in_plane()];
            if g.is_pointwise() {
                for (d, s) in dx_n.iter_mut().zip(&dcols) {
                    *d += s;
                }
            } else {
                col2im_add(g, &dcols, dx_n);
            }
        }
    }
}

/// Channel-wise convolution. `weight: [C, 1, K, K]`.
pub(crate) fn depthwise_forward(g: &ConvGeom, x: &[f64], weight: &[f64]) -> Vec<f64> {
    let plane = g.out_plane();
    let kk = g.k * g.k;
    let mut out = vec![0.0; g.n * g.c * plane];
    for n in 0..g.n {
        for c in 0..g.c {
            let xc = &x[(n * g.c + c) * g.in_plane()..(n * g.c + c + 1) * g.in_plane()];
            let oc = &mut out[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
            let wc = &weight[c * kk..(c + 1) * kk];
            for kh in 0..g.k {
                let (oh_lo, oh_hi) = g.valid(kh, g.h, g.oh);
                for kw in 0..g.k {
                    let (ow_lo, ow_hi) = g.valid(kw, g.w, g.ow);
                    let wv = wc[kh * g.k + kw];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + kh - g.pad;
                        let src = &xc[ih * g.w..(ih + 1) * g.w];
                        let dst = &mut oc[oh * g.ow..(oh + 1) * g.ow];
                        for ow in ow_lo..ow_hi {
                            dst[ow] += wv * src[ow * g.stride + kw - g.pad];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let plane = g.out_plane();
    let kk = g.k * g.k;
    for n in 0..g.n {
        for c in 0..g.c {
            let base_in = (n * g.c + c) * g.in_plane();
            let xc = &x[base_in..base_in + g.in_plane()];
            let dc = &dout[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
            for kh in 0..g.k {
                let (oh_lo, oh_hi) = g.valid(kh, g.h, g.oh);
                for kw in 0..g.k {
                    let (ow_lo, ow_hi) = g.valid(kw, g.w, g.ow);
                    let widx = c * kk + kh * g.k + kw;
                    let wv = weight[widx];
                    let mut acc = 0.0;
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + kh - g.pad;
                        let drow = &dc[oh * g.ow..(oh + 1) * g.ow];
                        if dw.is_some() {
                            let src = &xc[ih * g.w..(ih + 1) * g.w];
                            for ow in ow_lo..ow_hi {
                                acc += drow[ow] * src[ow * g.stride + kw - g.pad];
                            }
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let dst = &mut dx[base_in + ih * g.w..base_in + (ih + 1) * g.w];
                            for ow in ow_lo..ow_hi {
                                dst[ow * g.stride + kw - g.pad] += wv * drow[ow];
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
}

/// `out[n, e] = bias[e] + sum_d x[n, d] * weight[d, e]`.
pub(crate) fn linear_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    n: usize,
    d: usize,
    e: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * e];
    for i in 0..n {
        let row = &mut out[i * e..(i + 1) * e];
        if let Some(b) = bias {
            row.copy_from_slice(b);
        }
        for k in 0..d {
            axpy(row, x[i * d + k], &weight[k * e..(k + 1) * e]);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    n: usize,
    d: usize,
    e: usize,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    for i in 0..n {
        let g = &dout[i * e..(i + 1) * e];
        if let Some(db) = db.as_deref_mut() {
            for (b, gv) in db.iter_mut().zip(g) {
                *b += gv;
            }
        }
        for k in 0..d {
            let wrow = &weight[k * e..(k + 1) * e];
            if let Some(dx) = dx.as_deref_mut() {
                dx[i * d + k] += dot(g, wrow);
            }
            if let Some(dw) = dw.as_deref_mut() {
                axpy(&mut dw[k * e..(k + 1) * e], x[i * d + k], g);
            }
        }
    }
}
