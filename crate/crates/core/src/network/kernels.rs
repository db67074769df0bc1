//! Convolution kernels built on im2col and GEMM.
//!
//! Weight layouts: convolution `[out, in, k, k]`, transposed convolution
//! `[in, out, k, k]`. The transposed convolution is the exact adjoint of the
//! convolution with the same geometry, so its backward pass reuses the
//! convolution lowering.

/// Spatial geometry shared by a convolution and its transpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// 5x5 kernel, stride 2, padding 2: halves even sizes (ceil for odd ones).
    pub const HALVING: ConvGeom = ConvGeom { kernel: 5, stride: 2, pad: 2 };

    pub fn conv_out(&self, size: usize) -> Option<usize> {
        let padded = size + 2 * self.pad;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    /// Transposed-convolution output size for a given extra `output_pad`.
    pub fn deconv_out(&self, size: usize, output_pad: usize) -> Option<usize> {
        ((size - 1) * self.stride + self.kernel + output_pad).checked_sub(2 * self.pad)
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, all row-major, with optional
/// transposition expressed through strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover every index reachable through the strides.
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

/// Unfolds one `[c, h, w]` image into `[c*k*k, oh*ow]` patch columns.
#[allow(clippy::too_many_arguments)]
pub fn im2col(src: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, oh: usize, ow: usize, cols: &mut [f64]) {
    let k = g.kernel;
    let plane = oh * ow;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let srow = &src[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { srow[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dst`.
#[allow(clippy::too_many_arguments)]
pub fn col2im(cols: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, oh: usize, ow: usize, dst: &mut [f64]) {
    let k = g.kernel;
    let plane = oh * ow;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Shapes for a convolution pass over an `[n, c, h, w]` batch.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub oh: usize,
    pub ow: usize,
}

pub fn conv_forward(x: &[f64], weight: &[f64], bias: &[f64], d: ConvDims, g: ConvGeom, out: &mut [f64]) {
    let kdim = d.cin * g.kernel * g.kernel;
    let plane = d.oh * d.ow;
    let mut cols = vec![0.0; kdim * plane];
    for s in 0..d.n {
        let xs = &x[s * d.cin * d.h * d.w..(s + 1) * d.cin * d.h * d.w];
        im2col(xs, d.cin, d.h, d.w, g, d.oh, d.ow, &mut cols);
        let os = &mut out[s * d.cout * plane..(s + 1) * d.cout * plane];
        for (o, chunk) in os.chunks_mut(plane).enumerate() {
            chunk.fill(bias[o]);
        }
        gemm(d.cout, kdim, plane, weight, false, &cols, false, os, 1.0);
    }
}

/// Accumulates weight/bias gradients (when requested) and returns the input gradient.
pub fn conv_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    d: ConvDims,
    g: ConvGeom,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Vec<f64> {
    let kdim = d.cin * g.kernel * g.kernel;
    let plane = d.oh * d.ow;
    let mut cols = vec![0.0; kdim * plane];
    let mut dcols = vec![0.0; kdim * plane];
    let mut dx = vec![0.0; x.len()];
    let mut grads = grads;
    for s in 0..d.n {
        let dys = &dy[s * d.cout * plane..(s + 1) * d.cout * plane];
        if let Some((dw, db)) = grads.as_mut() {
            let xs = &x[s * d.cin * d.h * d.w..(s + 1) * d.cin * d.h * d.w];
            im2col(xs, d.cin, d.h, d.w, g, d.oh, d.ow, &mut cols);
            gemm(d.cout, plane, kdim, dys, false, &cols, true, dw, 1.0);
            for (o, chunk) in dys.chunks(plane).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        gemm(kdim, d.cout, plane, weight, true, dys, false, &mut dcols, 0.0);
        let dxs = &mut dx[s * d.cin * d.h * d.w..(s + 1) * d.cin * d.h * d.w];
        col2im(&dcols, d.cin, d.h, d.w, g, d.oh, d.ow, dxs);
    }
    dx
}

/// Transposed convolution of an `[n, cin, h, w]` batch to `[n, cout, oh, ow]`.
/// Here `d.h, d.w` are input sizes and `d.oh, d.ow` the enlarged output sizes.
pub fn deconv_forward(x: &[f64], weight: &[f64], bias: &[f64], d: ConvDims, g: ConvGeom, out: &mut [f64]) {
    let kdim = d.cout * g.kernel * g.kernel;
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    let mut cols = vec![0.0; kdim * in_plane];
    for s in 0..d.n {
        let xs = &x[s * d.cin * in_plane..(s + 1) * d.cin * in_plane];
        gemm(kdim, d.cin, in_plane, weight, true, xs, false, &mut cols, 0.0);
        let os = &mut out[s * d.cout * out_plane..(s + 1) * d.cout * out_plane];
        for (o, chunk) in os.chunks_mut(out_plane).enumerate() {
            chunk.fill(bias[o]);
        }
        col2im(&cols, d.cout, d.oh, d.ow, g, d.h, d.w, os);
    }
}

pub fn deconv_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    d: ConvDims,
    g: ConvGeom,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Vec<f64> {
    let kdim = d.cout * g.kernel * g.kernel;
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    let mut cols = vec![0.0; kdim * in_plane];
    let mut dx = vec![0.0; x.len()];
    let mut grads = grads;
    for s in 0..d.n {
        let dys = &dy[s * d.cout * out_plane..(s + 1) * d.cout * out_plane];
        im2col(dys, d.cout, d.oh, d.ow, g, d.h, d.w, &mut cols);
        if let Some((dw, db)) = grads.as_mut() {
            let xs = &x[s * d.cin * in_plane..(s + 1) * d.cin * in_plane];
            gemm(d.cin, in_plane, kdim, xs, false, &cols, true, dw, 1.0);
            for (o, chunk) in dys.chunks(out_plane).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        let dxs = &mut dx[s * d.cin * in_plane..(s + 1) * d.cin * in_plane];
        gemm(d.cin, kdim, in_plane, weight, false, &cols, false, dxs, 0.0);
    }
    dx
}
