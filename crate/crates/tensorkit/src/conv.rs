//! Dense and depthwise 2-D convolution with "same" zero padding.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::scalar::{gemm, Scalar};
use crate::shape::{numel, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub dh: usize,
    pub dw: usize,
}

impl ConvGeom {
    fn pad_h(&self) -> isize {
        (self.dh * (self.kh - 1) / 2) as isize
    }

    fn pad_w(&self) -> isize {
        (self.dw * (self.kw - 1) / 2) as isize
    }

    fn positions(&self) -> usize {
        self.n * self.h * self.w
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }

    /// Source row/column for output position `y` and kernel tap `i`, or `None`
    /// when it falls in the zero padding.
    #[inline]
    fn src(y: usize, i: usize, d: usize, pad: isize, len: usize) -> Option<usize> {
        let s = y as isize + (i * d) as isize - pad;
        (s >= 0 && (s as usize) < len).then_some(s as usize)
    }
}

fn check_kernel(op: &'static str, kh: usize, kw: usize, dilation: (usize, usize)) -> Result<()> {
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(TensorError::Shape { op, detail: format!("kernel {kh}x{kw} must have odd sides") });
    }
    if dilation.0 == 0 || dilation.1 == 0 {
        return Err(TensorError::Shape { op, detail: "dilation must be at least 1".into() });
    }
    Ok(())
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let k = g.patch();
    let mut cols = vec![T::zero(); g.positions() * k];
    let (ph, pw) = (g.pad_h(), g.pad_w());
    for b in 0..g.n {
        for y in 0..g.h {
            for xo in 0..g.w {
                let row = &mut cols[((b * g.h + y) * g.w + xo) * k..][..k];
                for i in 0..g.kh {
                    let Some(sy) = ConvGeom::src(y, i, g.dh, ph, g.h) else { continue };
                    for j in 0..g.kw {
                        let Some(sx) = ConvGeom::src(xo, j, g.dw, pw, g.w) else { continue };
                        let src = &x[((b * g.h + sy) * g.w + sx) * g.c_in..][..g.c_in];
                        row[(i * g.kw + j) * g.c_in..][..g.c_in].copy_from_slice(src);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let k = g.patch();
    let mut x = vec![T::zero(); g.positions() * g.c_in];
    let (ph, pw) = (g.pad_h(), g.pad_w());
    for b in 0..g.n {
        for y in 0..g.h {
            for xo in 0..g.w {
                let row = &cols[((b * g.h + y) * g.w + xo) * k..][..k];
                for i in 0..g.kh {
                    let Some(sy) = ConvGeom::src(y, i, g.dh, ph, g.h) else { continue };
                    for j in 0..g.kw {
                        let Some(sx) = ConvGeom::src(xo, j, g.dw, pw, g.w) else { continue };
                        let dst = &mut x[((b * g.h + sy) * g.w + sx) * g.c_in..][..g.c_in];
                        for (d, &s) in dst.iter_mut().zip(&row[(i * g.kw + j) * g.c_in..][..g.c_in]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    x
}

fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let c = g.c_in;
    let mut out = vec![T::zero(); g.positions() * c];
    let (ph, pw) = (g.pad_h(), g.pad_w());
    for b in 0..g.n {
        for y in 0..g.h {
            for i in 0..g.kh {
                let Some(sy) = ConvGeom::src(y, i, g.dh, ph, g.h) else { continue };
                for xo in 0..g.w {
                    let o = ((b * g.h + y) * g.w + xo) * c;
                    for j in 0..g.kw {
                        let Some(sx) = ConvGeom::src(xo, j, g.dw, pw, g.w) else { continue };
                        let s = ((b * g.h + sy) * g.w + sx) * c;
                        let wk = &w[(i * g.kw + j) * c..][..c];
                        let dst = &mut out[o..o + c];
                        for ((d, &xv), &wv) in dst.iter_mut().zip(&x[s..s + c]).zip(wk) {
                            *d += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw)`; either is skipped (empty) when not requested.
fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Vec<T>, Vec<T>) {
    let c = g.c_in;
    let mut dx = if want_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut dw = if want_dw { vec![T::zero(); w.len()] } else { Vec::new() };
    let (ph, pw) = (g.pad_h(), g.pad_w());
    for b in 0..g.n {
        for y in 0..g.h {
            for i in 0..g.kh {
                let Some(sy) = ConvGeom::src(y, i, g.dh, ph, g.h) else { continue };
                for xo in 0..g.w {
                    let o = ((b * g.h + y) * g.w + xo) * c;
                    let go = &gout[o..o + c];
                    for j in 0..g.kw {
                        let Some(sx) = ConvGeom::src(xo, j, g.dw, pw, g.w) else { continue };
                        let s = ((b * g.h + sy) * g.w + sx) * c;
                        let kofs = (i * g.kw + j) * c;
                        if want_dx {
                            let wk = &w[kofs..kofs + c];
                            for ((d, &gv), &wv) in dx[s..s + c].iter_mut().zip(go).zip(wk) {
                                *d += gv * wv;
                            }
                        }
                        if want_dw {
                            for ((d, &gv), &xv) in dw[kofs..kofs + c].iter_mut().zip(go).zip(&x[s..s + c]) {
                                *d += gv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

impl<T: Scalar> Graph<T> {
    /// Dense convolution. `w` has shape `[kh, kw, c_in, c_out]`, the optional
    /// bias `[1, 1, 1, c_out]`. Output keeps the spatial size of `x`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: (usize, usize)) -> Result<Var> {
        let [n, h, wd, c_in] = self.shape(x);
        let [kh, kw, wc_in, c_out] = self.shape(w);
        check_kernel("conv2d", kh, kw, dilation)?;
        if wc_in != c_in {
            return Err(TensorError::Shape {
                op: "conv2d",
                detail: format!("input has {c_in} channels, weights expect {wc_in}"),
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [1, 1, 1, c_out] {
                return Err(TensorError::Shape {
                    op: "conv2d",
                    detail: format!("bias shape {:?} does not match {c_out} outputs", self.shape(b)),
                });
            }
        }
        let geom = ConvGeom { n, h, w: wd, c_in, c_out, kh, kw, dh: dilation.0, dw: dilation.1 };
        let p = geom.positions();
        let mut out = vec![T::zero(); p * c_out];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_exact_mut(c_out) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        let cols = if geom.is_pointwise() {
            gemm(false, false, p, c_out, c_in, T::one(), self.value(x), self.value(w), beta, &mut out);
            None
        } else {
            let cols = im2col(self.value(x), &geom);
            gemm(false, false, p, c_out, geom.patch(), T::one(), &cols, self.value(w), beta, &mut out);
            Some(cols)
        };
        let cols = if self.is_recording() { cols } else { None };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(out, [n, h, wd, c_out], &inputs, Op::Conv2d { x, w, b, geom, cols }))
    }

    /// Depthwise convolution: channel `c` of the output only sees channel `c`
    /// of the input. `w` has shape `[kh, kw, 1, c]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, dilation: (usize, usize)) -> Result<Var> {
        let [n, h, wd, c] = self.shape(x);
        let [kh, kw, one, wc] = self.shape(w);
        check_kernel("depthwise_conv2d", kh, kw, dilation)?;
        if one != 1 || wc != c {
            return Err(TensorError::Shape {
                op: "depthwise_conv2d",
                detail: format!("weights {:?} do not match {c} input channels", self.shape(w)),
            });
        }
        let geom = ConvGeom { n, h, w: wd, c_in: c, c_out: c, kh, kw, dh: dilation.0, dw: dilation.1 };
        let out = depthwise_forward(self.value(x), self.value(w), &geom);
        Ok(self.push_op(out, [n, h, wd, c], &[x, w], Op::Depthwise { x, w, geom }))
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn conv2d_backward(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        cols: Option<Vec<T>>,
        gout: &[T],
    ) {
        let p = geom.positions();
        let k = geom.patch();
        if let Some(b) = b {
            if self.requires_grad(b) {
                let mut gb = vec![T::zero(); geom.c_out];
                for row in gout.chunks_exact(geom.c_out) {
                    for (a, &g) in gb.iter_mut().zip(row) {
                        *a += g;
                    }
                }
                self.accumulate(b, gb);
            }
        }
        if self.requires_grad(w) {
            let mut gw = vec![T::zero(); k * geom.c_out];
            match &cols {
                Some(c) => gemm(true, false, k, geom.c_out, p, T::one(), c, gout, T::zero(), &mut gw),
                None if geom.is_pointwise() => {
                    gemm(true, false, k, geom.c_out, p, T::one(), self.value(x), gout, T::zero(), &mut gw)
                }
                None => {
                    let c = im2col(self.value(x), geom);
                    gemm(true, false, k, geom.c_out, p, T::one(), &c, gout, T::zero(), &mut gw)
                }
            }
            self.accumulate(w, gw);
        }
        if self.requires_grad(x) {
            let mut gcols = vec![T::zero(); p * k];
            gemm(false, true, p, k, geom.c_out, T::one(), gout, self.value(w), T::zero(), &mut gcols);
            let gx = if geom.is_pointwise() { gcols } else { col2im(&gcols, geom) };
            self.accumulate(x, gx);
        }
    }

    pub(crate) fn depthwise_backward(&mut self, x: Var, w: Var, geom: &ConvGeom, gout: &[T]) {
        let want_dx = self.requires_grad(x);
        let want_dw = self.requires_grad(w);
        let (dx, dw) = depthwise_backward(self.value(x), self.value(w), gout, geom, want_dx, want_dw);
        if want_dx {
            self.accumulate(x, dx);
        }
        if want_dw {
            self.accumulate(w, dw);
        }
    }
}

/// Shape of a dense convolution weight tensor.
pub fn conv_weight_shape(kernel: (usize, usize), c_in: usize, c_out: usize) -> Shape {
    [kernel.0, kernel.1, c_in, c_out]
}

/// Reference dense convolution by direct summation, used to cross-check the
/// im2col path.
pub fn conv2d_direct<T: Scalar>(
    x: &[T],
    xs: Shape,
    w: &[T],
    ws: Shape,
    bias: Option<&[T]>,
    dilation: (usize, usize),
) -> Vec<T> {
    let [n, h, wd, c_in] = xs;
    let [kh, kw, _, c_out] = ws;
    assert_eq!(x.len(), numel(xs));
    let ph = (dilation.0 * (kh - 1) / 2) as isize;
    let pw = (dilation.1 * (kw - 1) / 2) as isize;
    let mut out = vec![T::zero(); n * h * wd * c_out];
    for b in 0..n {
        for y in 0..h {
            for xo in 0..wd {
                for co in 0..c_out {
                    let mut acc = bias.map_or(T::zero(), |b| b[co]);
                    for i in 0..kh {
                        let sy = y as isize + (i * dilation.0) as isize - ph;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for j in 0..kw {
                            let sx = xo as isize + (j * dilation.1) as isize - pw;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            for ci in 0..c_in {
                                acc += x[((b * h + sy as usize) * wd + sx as usize) * c_in + ci]
                                    * w[((i * kw + j) * c_in + ci) * c_out + co];
                            }
                        }
                    }
                    out[((b * h + y) * wd + xo) * c_out + co] = acc;
                }
            }
        }
    }
    out
}
