//! im2col convolution kernels. The GEMM itself is delegated to
//! `matrixmultiply`; layout handling and the adjoint passes live here.

use std::cell::Cell;

use crate::error::{Error, Result};

thread_local! {
    static CONV_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of forward convolutions evaluated on this thread.
pub fn conv_call_count() -> u64 {
    CONV_CALLS.with(|c| c.get())
}

pub fn reset_conv_call_count() {
    CONV_CALLS.with(|c| c.set(0));
}

pub(crate) fn bump_conv_calls() {
    CONV_CALLS.with(|c| c.set(c.get() + 1));
}

/// Stride, zero padding and group count of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvParams {
            stride,
            padding: (padding, padding),
            groups,
        }
    }

    /// "Same" padding for an odd `kh x kw` kernel at stride 1.
    pub fn same(kh: usize, kw: usize, groups: usize) -> Self {
        ConvParams {
            stride: 1,
            padding: (kh / 2, kw / 2),
            groups,
        }
    }
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams::new(1, 0, 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub ph: usize,
    pub pw: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(input: [usize; 4], kernel: &[usize], p: ConvParams) -> Result<Self> {
        let [n, cin, h, w] = input;
        let [cout, cin_g, kh, kw] = match kernel {
            &[a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::shape(format!("kernel must be rank 4, got {kernel:?}"))),
        };
        if p.groups == 0 || p.stride == 0 {
            return Err(Error::config("conv2d: stride and groups must be positive"));
        }
        if cin % p.groups != 0 || cout % p.groups != 0 {
            return Err(Error::config(format!(
                "conv2d: groups={} must divide input channels {cin} and output channels {cout}",
                p.groups
            )));
        }
        if cin_g != cin / p.groups {
            return Err(Error::shape(format!(
                "conv2d: kernel expects {cin_g} input channels per group, input has {cin}/{}",
                p.groups
            )));
        }
        let (ph, pw) = p.padding;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::shape(format!(
                "conv2d: {kh}x{kw} kernel larger than padded input {h}x{w}"
            )));
        }
        let oh = (h + 2 * ph - kh) / p.stride + 1;
        let ow = (w + 2 * pw - kw) / p.stride + 1;
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
            stride: p.stride,
            ph,
            pw,
            groups: p.groups,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.oh, self.ow]
    }

    /// Fills `col` with the patches of sample `ni`, group `gi`.
    fn im2col(&self, input: &[f64], ni: usize, gi: usize, col: &mut [f64]) {
        let p = self.col_cols();
        for cl in 0..self.cin_g() {
            let c = gi * self.cin_g() + cl;
            let plane = &input[(ni * self.cin + c) * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (cl * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.ph as isize;
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..][..self.w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pw as isize;
                            *o = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` back into the input gradient of sample `ni`, group `gi`.
    fn col2im(&self, col: &[f64], ni: usize, gi: usize, dinput: &mut [f64]) {
        let p = self.col_cols();
        for cl in 0..self.cin_g() {
            let c = gi * self.cin_g() + cl;
            let plane = &mut dinput[(ni * self.cin + c) * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (cl * self.kh + ky) * self.kw + kx;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pw as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `C (m x n) = alpha * A (m x k) * B (k x n) + beta * C`, all row-major
/// unless a transposed view is requested through the strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    // SAFETY: every caller passes slices covering the full m x k, k x n and
    // m x n extents addressed by the given strides.
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

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    bump_conv_calls();
    let (k, p) = (g.col_rows(), g.col_cols());
    let cout_g = g.cout_g();
    let mut out = vec![0.0; g.n * g.cout * p];
    let mut col = vec![0.0; k * p];
    for ni in 0..g.n {
        for gi in 0..g.groups {
            g.im2col(input, ni, gi, &mut col);
            let w = &kernel[gi * cout_g * k..(gi + 1) * cout_g * k];
            let dst = &mut out[(ni * g.cout + gi * cout_g) * p..][..cout_g * p];
            gemm(cout_g, k, p, w, (k as isize, 1), &col, (p as isize, 1), 0.0, dst);
        }
        if let Some(b) = bias {
            for co in 0..g.cout {
                let plane = &mut out[(ni * g.cout + co) * p..][..p];
                plane.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    dout: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (k, p) = (g.col_rows(), g.col_cols());
    let cout_g = g.cout_g();
    let (need_in, need_k, need_b) = need;
    let mut dinput = need_in.then(|| vec![0.0; input.len()]);
    let mut dkernel = need_k.then(|| vec![0.0; kernel.len()]);
    let mut col = vec![0.0; k * p];
    let mut dcol = vec![0.0; k * p];
    for ni in 0..g.n {
        for gi in 0..g.groups {
            let dy = &dout[(ni * g.cout + gi * cout_g) * p..][..cout_g * p];
            if let Some(dk) = dkernel.as_mut() {
                g.im2col(input, ni, gi, &mut col);
                let dst = &mut dk[gi * cout_g * k..(gi + 1) * cout_g * k];
                // dW (cout_g x k) += dY (cout_g x p) * col^T (p x k)
                gemm(cout_g, p, k, dy, (p as isize, 1), &col, (1, p as isize), 1.0, dst);
            }
            if let Some(dx) = dinput.as_mut() {
                let w = &kernel[gi * cout_g * k..(gi + 1) * cout_g * k];
                // dcol (k x p) = W^T (k x cout_g) * dY (cout_g x p)
                gemm(k, cout_g, p, w, (1, k as isize), dy, (p as isize, 1), 0.0, &mut dcol);
                g.col2im(&dcol, ni, gi, dx);
            }
        }
    }
    let dbias = need_b.then(|| {
        let mut db = vec![0.0; g.cout];
        for ni in 0..g.n {
            for (co, d) in db.iter_mut().enumerate() {
                *d += dout[(ni * g.cout + co) * p..][..p].iter().sum::<f64>();
            }
        }
        db
    });
    ConvGrads {
        input: dinput,
        kernel: dkernel,
        bias: dbias,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution used as an oracle for the im2col path.
    fn naive(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.cout * g.oh * g.ow];
        let (cin_g, cout_g) = (g.cin / g.groups, g.cout / g.groups);
        for n in 0..g.n {
            for co in 0..g.cout {
                let gi = co / cout_g;
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut s = 0.0;
                        for cl in 0..cin_g {
                            let ci = gi * cin_g + cl;
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * g.stride + ky) as isize - g.ph as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pw as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    s += x[((n * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((co * cin_g + cl) * g.kh + ky) * g.kw + kx];
                                }
                            }
                        }
                        out[((n * g.cout + co) * g.oh + oy) * g.ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_direct_loops() {
        let cases = [
            ([2, 6, 7, 5], [6, 2, 3, 3], ConvParams::new(1, 1, 3)),
            ([1, 3, 8, 8], [6, 3, 5, 1], ConvParams { stride: 2, padding: (2, 0), groups: 1 }),
            ([2, 4, 4, 6], [4, 1, 1, 3], ConvParams { stride: 1, padding: (0, 1), groups: 4 }),
        ];
        for (xs, ks, p) in cases {
            let g = ConvGeom::new(xs, &ks, p).unwrap();
            let x: Vec<f64> = (0..xs.iter().product()).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..ks.iter().product()).map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.0).collect();
            let fast = conv2d_forward(&g, &x, &w, None);
            let slow = naive(&g, &x, &w);
            let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "{err}");
        }
    }

    #[test]
    fn groups_must_divide_channels() {
        let e = ConvGeom::new([1, 8, 4, 4], &[8, 2, 3, 3], ConvParams::new(1, 1, 3));
        assert!(matches!(e, Err(Error::Config(_))));
        let e = ConvGeom::new([1, 8, 4, 4], &[8, 3, 3, 3], ConvParams::new(1, 1, 1));
        assert!(matches!(e, Err(Error::Shape(_))));
    }
}
