//! Direct-summation convolution and transposed convolution.

use dentgan::network::kernels::{conv_forward, deconv_forward, ConvDims};
use dentgan::network::ConvGeom;
use dentgan::Tensor;

/// `x: [n, cin, h, w]`, `weight: [cout, cin, k, k]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &[f64], stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, w) = x.dims4();
    let (cout, wcin, k, _) = weight.dims4();
    assert_eq!(cin, wcin);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![0.0; n * cout * oh * ow];
    for s in 0..n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for i in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = xd[((s * cin + i) * h + iy as usize) * w + ix as usize];
                                acc += xv * wd[((o * cin + i) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((s * cout + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, cout, oh, ow], out)
}

/// Scatter form: each input pixel adds `x * kernel` into the output at
/// `stride * position - pad`. `weight: [cin, cout, k, k]`.
pub fn deconv2d(x: &Tensor, weight: &Tensor, bias: &[f64], stride: usize, pad: usize, output_pad: usize) -> Tensor {
    let (n, cin, h, w) = x.dims4();
    let (wcin, cout, k, _) = weight.dims4();
    assert_eq!(cin, wcin);
    let oh = (h - 1) * stride + k + output_pad - 2 * pad;
    let ow = (w - 1) * stride + k + output_pad - 2 * pad;
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![0.0; n * cout * oh * ow];
    for s in 0..n {
        for o in 0..cout {
            for v in &mut out[(s * cout + o) * oh * ow..(s * cout + o + 1) * oh * ow] {
                *v = bias[o];
            }
        }
        for i in 0..cin {
            for iy in 0..h {
                for ix in 0..w {
                    let xv = xd[((s * cin + i) * h + iy) * w + ix];
                    for o in 0..cout {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (iy * stride + ky) as isize - pad as isize;
                                let xx = (ix * stride + kx) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= oh as isize || xx >= ow as isize {
                                    continue;
                                }
                                out[((s * cout + o) * oh + y as usize) * ow + xx as usize] +=
                                    xv * wd[((i * cout + o) * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, cout, oh, ow], out)
}

/// The engine's convolution on whole tensors.
pub fn engine_conv(x: &Tensor, w: &Tensor, b: &[f64], g: ConvGeom) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let cout = w.shape()[0];
    let (oh, ow) = (g.conv_out(h).unwrap(), g.conv_out(wd).unwrap());
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    conv_forward(x.data(), w.data(), b, ConvDims { n, cin, h, w: wd, cout, oh, ow }, g, out.data_mut());
    out
}

/// The engine's transposed convolution on whole tensors.
pub fn engine_deconv(x: &Tensor, w: &Tensor, b: &[f64], g: ConvGeom, op: usize) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let cout = w.shape()[1];
    let (oh, ow) = (g.deconv_out(h, op).unwrap(), g.deconv_out(wd, op).unwrap());
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    deconv_forward(x.data(), w.data(), b, ConvDims { n, cin, h, w: wd, cout, oh, ow }, g, out.data_mut());
    out
}
