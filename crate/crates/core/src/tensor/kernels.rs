//! Raw forward/backward kernels over flat slices.

use crate::error::{ensure, Result};

/// `c = a · b + beta · c` with optional transposition of either factor.
/// `a` is logically m×k and `b` is k×n after transposition; `c` is m×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the m×k, k×n and m×n row/col-major
    // views of slices whose lengths were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Stride, dilation and per-side zero padding of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub pad_top: usize,
    pub pad_bottom: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvGeometry {
    /// Symmetric padding on every side.
    pub const fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            stride,
            dilation,
            pad_top: padding,
            pad_bottom: padding,
            pad_left: padding,
            pad_right: padding,
        }
    }

    /// TensorFlow-style "SAME" padding: output is `ceil(input / stride)`,
    /// any odd padding remainder goes to the bottom/right.
    pub fn same(stride: usize, dilation: usize, kernel: usize, h: usize, w: usize) -> Self {
        let span = dilation * (kernel - 1) + 1;
        let split = |n: usize| {
            let out = n.div_ceil(stride);
            let total = ((out - 1) * stride + span).saturating_sub(n);
            (total / 2, total - total / 2)
        };
        let (pad_top, pad_bottom) = split(h);
        let (pad_left, pad_right) = split(w);
        Self {
            stride,
            dilation,
            pad_top,
            pad_bottom,
            pad_left,
            pad_right,
        }
    }

    fn check(&self) -> Result<()> {
        ensure!(self.stride >= 1 && self.dilation >= 1, InvalidArgument, "stride and dilation must be >= 1");
        Ok(())
    }

    fn axis_len(&self, input: usize, kernel: usize, lo: usize, hi: usize) -> Result<usize> {
        self.check()?;
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + lo + hi;
        ensure!(padded >= span, ShapeMismatch, "kernel span {span} exceeds padded input {padded}");
        ensure!(
            (padded - span).is_multiple_of(self.stride),
            ShapeMismatch,
            "non-integral conv output: ({padded} - {span}) / {}",
            self.stride
        );
        Ok((padded - span) / self.stride + 1)
    }

    /// Output height and width of the forward convolution; non-integral sizes are errors.
    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        Ok((
            self.axis_len(h, kh, self.pad_top, self.pad_bottom)?,
            self.axis_len(w, kw, self.pad_left, self.pad_right)?,
        ))
    }

    /// Output height and width of the transposed convolution (dilation 1).
    pub fn transposed_output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        self.check()?;
        ensure!(self.dilation == 1, InvalidArgument, "transposed conv supports dilation 1 only");
        let axis = |n: usize, k: usize, lo: usize, hi: usize| -> Result<usize> {
            let full = (n - 1) * self.stride + k;
            ensure!(full > lo + hi, ShapeMismatch, "padding too large for transposed conv");
            Ok(full - lo - hi)
        };
        Ok((
            axis(h, kh, self.pad_top, self.pad_bottom)?,
            axis(w, kw, self.pad_left, self.pad_right)?,
        ))
    }
}

/// Spatial layout shared by im2col/col2im: an image of `channels×h×w`
/// sampled at `oh×ow` kernel positions.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Patches {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeometry,
}

impl Patches {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom == ConvGeometry::new(1, 1, 0)
    }

    /// Source index for one row/output position, `None` in the zero padding.
    #[inline]
    fn src(&self, ki: usize, kj: usize, oi: usize, oj: usize) -> Option<(usize, usize)> {
        let g = self.geom;
        let r = (oi * g.stride + ki * g.dilation) as isize - g.pad_top as isize;
        let c = (oj * g.stride + kj * g.dilation) as isize - g.pad_left as isize;
        if r < 0 || c < 0 || r as usize >= self.h || c as usize >= self.w {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }

    pub fn im2col(&self, img: &[f64], cols: &mut Vec<f64>) {
        if self.is_pointwise() {
            cols.clear();
            cols.extend_from_slice(img);
            return;
        }
        cols.clear();
        cols.resize(self.rows() * self.cols(), 0.0);
        let plane = self.h * self.w;
        let ncols = self.cols();
        for ci in 0..self.channels {
            let src = &img[ci * plane..(ci + 1) * plane];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oi in 0..self.oh {
                        for oj in 0..self.ow {
                            if let Some((r, c)) = self.src(ki, kj, oi, oj) {
                                dst[oi * self.ow + oj] = src[r * self.w + c];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds patch columns back into `img` (which is not cleared).
    pub fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        if self.is_pointwise() {
            img.iter_mut().zip(cols).for_each(|(d, s)| *d += s);
            return;
        }
        let plane = self.h * self.w;
        let ncols = self.cols();
        for ci in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oi in 0..self.oh {
                        for oj in 0..self.ow {
                            if let Some((r, c)) = self.src(ki, kj, oi, oj) {
                                img[ci * plane + r * self.w + c] += src[oi * self.ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dimensions of an NCHW convolution, forward or transposed.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub kh: usize,
    pub kw: usize,
    pub geom: ConvGeometry,
}

impl ConvDims {
    /// Patch layout over the *input* image for a forward convolution.
    fn forward_patches(&self) -> Patches {
        Patches {
            channels: self.cin,
            h: self.h,
            w: self.w,
            kh: self.kh,
            kw: self.kw,
            oh: self.oh,
            ow: self.ow,
            geom: self.geom,
        }
    }

    /// Patch layout over the *output* image for a transposed convolution.
    fn transposed_patches(&self) -> Patches {
        Patches {
            channels: self.cout,
            h: self.oh,
            w: self.ow,
            kh: self.kh,
            kw: self.kw,
            oh: self.h,
            ow: self.w,
            geom: self.geom,
        }
    }
}

pub(crate) fn conv2d_forward(d: &ConvDims, x: &[f64], k: &[f64]) -> Vec<f64> {
    let p = d.forward_patches();
    let (kk, pp) = (p.rows(), p.cols());
    let mut out = vec![0.0; d.n * d.cout * pp];
    let mut cols = Vec::new();
    for b in 0..d.n {
        p.im2col(&x[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w], &mut cols);
        gemm(d.cout, kk, pp, k, false, &cols, false, 0.0, &mut out[b * d.cout * pp..(b + 1) * d.cout * pp]);
    }
    out
}

/// Returns (dx, dk) for an upstream gradient `dy`.
pub(crate) fn conv2d_backward(
    d: &ConvDims,
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let p = d.forward_patches();
    let (kk, pp) = (p.rows(), p.cols());
    let in_sz = d.cin * d.h * d.w;
    let mut dx = need_dx.then(|| vec![0.0; d.n * in_sz]);
    let mut dk = need_dk.then(|| vec![0.0; d.cout * kk]);
    let mut cols = Vec::new();
    let mut dcols = vec![0.0; kk * pp];
    for b in 0..d.n {
        let dyb = &dy[b * d.cout * pp..(b + 1) * d.cout * pp];
        if let Some(dk) = dk.as_mut() {
            p.im2col(&x[b * in_sz..(b + 1) * in_sz], &mut cols);
            gemm(d.cout, pp, kk, dyb, false, &cols, true, 1.0, dk);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(kk, d.cout, pp, k, true, dyb, false, 0.0, &mut dcols);
            p.col2im(&dcols, &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
    }
    (dx, dk)
}

/// Kernel layout is `cin × cout × kh × kw`.
pub(crate) fn conv_transpose2d_forward(d: &ConvDims, x: &[f64], k: &[f64]) -> Vec<f64> {
    let p = d.transposed_patches();
    let (kk, pp) = (p.rows(), p.cols());
    let out_sz = d.cout * d.oh * d.ow;
    let mut out = vec![0.0; d.n * out_sz];
    let mut cols = vec![0.0; kk * pp];
    for b in 0..d.n {
        let xb = &x[b * d.cin * pp..(b + 1) * d.cin * pp];
        gemm(kk, d.cin, pp, k, true, xb, false, 0.0, &mut cols);
        p.col2im(&cols, &mut out[b * out_sz..(b + 1) * out_sz]);
    }
    out
}

pub(crate) fn conv_transpose2d_backward(
    d: &ConvDims,
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let p = d.transposed_patches();
    let (kk, pp) = (p.rows(), p.cols());
    let out_sz = d.cout * d.oh * d.ow;
    let mut dx = need_dx.then(|| vec![0.0; d.n * d.cin * pp]);
    let mut dk = need_dk.then(|| vec![0.0; d.cin * kk]);
    let mut dcols = Vec::new();
    for b in 0..d.n {
        p.im2col(&dy[b * out_sz..(b + 1) * out_sz], &mut dcols);
        if let Some(dx) = dx.as_mut() {
            gemm(d.cin, kk, pp, k, false, &dcols, false, 0.0, &mut dx[b * d.cin * pp..(b + 1) * d.cin * pp]);
        }
        if let Some(dk) = dk.as_mut() {
            let xb = &x[b * d.cin * pp..(b + 1) * d.cin * pp];
            gemm(d.cin, pp, kk, xb, false, &dcols, true, 1.0, dk);
        }
    }
    (dx, dk)
}

/// One axis of an align-corners=false bilinear resize: `(lo, hi, weight_of_hi)`.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Resizes every `h×w` plane of `planes` to `oh×ow`.
pub(crate) fn bilinear_forward(planes: usize, h: usize, w: usize, oh: usize, ow: usize, x: &[f64]) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return x.to_vec();
    }
    let rows = bilinear_taps(h, oh);
    let cols = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for &(r0, r1, lr) in &rows {
            for &(c0, c1, lc) in &cols {
                let top = (1.0 - lc) * src[r0 * w + c0] + lc * src[r0 * w + c1];
                let bot = (1.0 - lc) * src[r1 * w + c0] + lc * src[r1 * w + c1];
                out.push((1.0 - lr) * top + lr * bot);
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(planes: usize, h: usize, w: usize, oh: usize, ow: usize, dy: &[f64]) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return dy.to_vec();
    }
    let rows = bilinear_taps(h, oh);
    let cols = bilinear_taps(w, ow);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        for (i, &(r0, r1, lr)) in rows.iter().enumerate() {
            for (j, &(c0, c1, lc)) in cols.iter().enumerate() {
                let v = g[i * ow + j];
                dst[r0 * w + c0] += (1.0 - lr) * (1.0 - lc) * v;
                dst[r0 * w + c1] += (1.0 - lr) * lc * v;
                dst[r1 * w + c0] += lr * (1.0 - lc) * v;
                dst[r1 * w + c1] += lr * lc * v;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transpose_variants() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn output_len_rules() {
        assert_eq!(ConvGeometry::new(2, 1, 1).output_size(7, 9, 3, 3).unwrap(), (4, 5));
        assert!(ConvGeometry::new(2, 1, 1).output_size(8, 8, 3, 3).is_err());
        let same = ConvGeometry::same(2, 1, 3, 8, 7);
        assert_eq!((same.pad_top, same.pad_bottom, same.pad_left, same.pad_right), (0, 1, 1, 1));
        assert_eq!(same.output_size(8, 7, 3, 3).unwrap(), (4, 4));
        let same = ConvGeometry::same(1, 4, 3, 5, 5);
        assert_eq!(same.output_size(5, 5, 3, 3).unwrap(), (5, 5));
        assert_eq!(ConvGeometry::new(2, 1, 1).transposed_output_size(4, 3, 4, 4).unwrap(), (8, 6));
    }

    #[test]
    fn taps_identity_and_upscale() {
        assert!(bilinear_taps(5, 5).iter().enumerate().all(|(i, &(lo, _, l))| lo == i && l == 0.0));
        let t = bilinear_taps(2, 4);
        assert_eq!(t[0], (0, 1, 0.0));
        assert_eq!(t[1], (0, 1, 0.25));
        assert_eq!(t[2], (0, 1, 0.75));
        assert_eq!(t[3], (1, 1, 0.25));
    }
}
