//! 3D cross-correlation and its transpose.
//!
//! Both directions share one weight layout, `[small_ch, big_ch, k, k, k]`,
//! where the "small" grid is the strided side (conv output, transposed-conv
//! input) and the "big" grid is the dense side. With that convention three
//! kernels cover every forward and backward pass:
//!
//! | kernel          | conv3d        | conv_transpose3d |
//! |-----------------|---------------|------------------|
//! | `gather_small`  | forward       | grad input       |
//! | `scatter_big`   | grad input    | forward          |
//! | `weight_grad`   | grad weights  | grad weights     |

use crate::numerics::Tensor;
use crate::{Error, ExecMode, Result};

/// `floor((d + 2p - k) / s) + 1`.
pub fn conv_output_extent(d: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || k > d + 2 * padding {
        return None;
    }
    Some((d + 2 * padding - k) / stride + 1)
}

/// `(d - 1) s - 2p + k + output_padding`.
pub fn conv_transpose_output_extent(
    d: usize,
    k: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    if stride == 0 || output_padding >= stride {
        return None;
    }
    ((d - 1) * stride + k + output_padding).checked_sub(2 * padding).filter(|&e| e > 0)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub n: usize,
    pub small_ch: usize,
    pub big_ch: usize,
    pub small: [usize; 3],
    pub big: [usize; 3],
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    fn small_len(&self) -> usize {
        self.small.iter().product()
    }

    fn big_len(&self) -> usize {
        self.big.iter().product()
    }

    fn k3(&self) -> usize {
        self.k * self.k * self.k
    }

    /// Small-grid indices `o` along one axis with `0 <= o*s + off - p < big`.
    fn valid(&self, axis: usize, off: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let off = off as isize;
        let lo = ((p - off).max(0) + s - 1) / s;
        let hi_num = self.big[axis] as isize - 1 + p - off;
        let hi = if hi_num < 0 { 0 } else { hi_num / s + 1 };
        let hi = hi.min(self.small[axis] as isize);
        (lo as usize, (hi.max(lo)) as usize)
    }

    fn big_index(&self, o: usize, off: usize) -> usize {
        o * self.stride + off - self.pad
    }
}

/// `small[n,f,o] = sum_{c,k} w[f,c,k] * big[n,c,o*s+k-p]`.
pub(crate) fn gather_small(big: &[f64], w: &[f64], g: &Geometry, exec: ExecMode) -> Vec<f64> {
    let (sl, bl, k, k3) = (g.small_len(), g.big_len(), g.k, g.k3());
    let [_, sh, sw] = g.small;
    let [_, bh, bw] = g.big;
    let mut out = vec![0.0; g.n * g.small_ch * sl];
    exec.for_each_chunk(&mut out, sl, |blk, dst| {
        let (n, f) = (blk / g.small_ch, blk % g.small_ch);
        for c in 0..g.big_ch {
            let src = &big[(n * g.big_ch + c) * bl..(n * g.big_ch + c + 1) * bl];
            let wbase = (f * g.big_ch + c) * k3;
            for kd in 0..k {
                let (d0, d1) = g.valid(0, kd);
                for kh in 0..k {
                    let (h0, h1) = g.valid(1, kh);
                    for kw in 0..k {
                        let wv = w[wbase + (kd * k + kh) * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (w0, w1) = g.valid(2, kw);
                        for od in d0..d1 {
                            let id = g.big_index(od, kd);
                            for oh in h0..h1 {
                                let ih = g.big_index(oh, kh);
                                let drow = (od * sh + oh) * sw;
                                let srow = (id * bh + ih) * bw;
                                for ow in w0..w1 {
                                    dst[drow + ow] += wv * src[srow + g.big_index(ow, kw)];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// `big[n,c,o*s+k-p] += w[f,c,k] * small[n,f,o]`.
pub(crate) fn scatter_big(small: &[f64], w: &[f64], g: &Geometry, exec: ExecMode) -> Vec<f64> {
    let (sl, bl, k, k3) = (g.small_len(), g.big_len(), g.k, g.k3());
    let [_, sh, sw] = g.small;
    let [_, bh, bw] = g.big;
    let mut out = vec![0.0; g.n * g.big_ch * bl];
    exec.for_each_chunk(&mut out, bl, |blk, dst| {
        let (n, c) = (blk / g.big_ch, blk % g.big_ch);
        for f in 0..g.small_ch {
            let src = &small[(n * g.small_ch + f) * sl..(n * g.small_ch + f + 1) * sl];
            let wbase = (f * g.big_ch + c) * k3;
            for kd in 0..k {
                let (d0, d1) = g.valid(0, kd);
                for kh in 0..k {
                    let (h0, h1) = g.valid(1, kh);
                    for kw in 0..k {
                        let wv = w[wbase + (kd * k + kh) * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (w0, w1) = g.valid(2, kw);
                        for od in d0..d1 {
                            let id = g.big_index(od, kd);
                            for oh in h0..h1 {
                                let ih = g.big_index(oh, kh);
                                let srow = (od * sh + oh) * sw;
                                let drow = (id * bh + ih) * bw;
                                for ow in w0..w1 {
                                    dst[drow + g.big_index(ow, kw)] += wv * src[srow + ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// `dw[f,c,k] = sum_{n,o} big[n,c,o*s+k-p] * small[n,f,o]`.
pub(crate) fn weight_grad(big: &[f64], small: &[f64], g: &Geometry, exec: ExecMode) -> Vec<f64> {
    let (sl, bl, k, k3) = (g.small_len(), g.big_len(), g.k, g.k3());
    let [_, sh, sw] = g.small;
    let [_, bh, bw] = g.big;
    let mut out = vec![0.0; g.small_ch * g.big_ch * k3];
    exec.for_each_chunk(&mut out, k3, |blk, dst| {
        let (f, c) = (blk / g.big_ch, blk % g.big_ch);
        for n in 0..g.n {
            let b = &big[(n * g.big_ch + c) * bl..(n * g.big_ch + c + 1) * bl];
            let s = &small[(n * g.small_ch + f) * sl..(n * g.small_ch + f + 1) * sl];
            for kd in 0..k {
                let (d0, d1) = g.valid(0, kd);
                for kh in 0..k {
                    let (h0, h1) = g.valid(1, kh);
                    for kw in 0..k {
                        let (w0, w1) = g.valid(2, kw);
                        let mut acc = 0.0;
                        for od in d0..d1 {
                            let id = g.big_index(od, kd);
                            for oh in h0..h1 {
                                let ih = g.big_index(oh, kh);
                                let srow = (od * sh + oh) * sw;
                                let brow = (id * bh + ih) * bw;
                                for ow in w0..w1 {
                                    acc += s[srow + ow] * b[brow + g.big_index(ow, kw)];
                                }
                            }
                        }
                        dst[(kd * k + kh) * k + kw] += acc;
                    }
                }
            }
        }
    });
    out
}

fn spatial5(t: &Tensor, what: &str) -> Result<[usize; 5]> {
    match t.shape() {
        &[a, b, c, d, e] => Ok([a, b, c, d, e]),
        s => Err(Error::shape(
            "conv3d",
            format!("{what} must be 5D, got {s:?}"),
        )),
    }
}

/// Validates shapes for a forward conv and returns its geometry.
pub(crate) fn conv_geometry(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Geometry> {
    let [n, c, d, h, w] = spatial5(input, "input")?;
    let [f, kc, k0, k1, k2] = spatial5(kernels, "kernels")?;
    if kc != c {
        return Err(Error::shape(
            "conv3d",
            format!(
                "input {:?} has {c} channels but kernels {:?} expect {kc}",
                input.shape(),
                kernels.shape()
            ),
        ));
    }
    if k0 != k1 || k1 != k2 {
        return Err(Error::shape(
            "conv3d",
            format!("kernels must be cubic, got {:?}", kernels.shape()),
        ));
    }
    let ext = |x| {
        conv_output_extent(x, k0, stride, padding).ok_or_else(|| {
            Error::shape(
                "conv3d",
                format!(
                    "kernel {k0} stride {stride} padding {padding} does not fit input {:?}",
                    input.shape()
                ),
            )
        })
    };
    Ok(Geometry {
        n,
        small_ch: f,
        big_ch: c,
        small: [ext(d)?, ext(h)?, ext(w)?],
        big: [d, h, w],
        k: k0,
        stride,
        pad: padding,
    })
}

pub(crate) fn conv_transpose_geometry(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Geometry> {
    let [n, c, d, h, w] = spatial5(input, "input")?;
    let [kc, f, k0, k1, k2] = spatial5(kernels, "kernels")?;
    if kc != c {
        return Err(Error::shape(
            "conv_transpose3d",
            format!(
                "input {:?} has {c} channels but kernels {:?} expect {kc}",
                input.shape(),
                kernels.shape()
            ),
        ));
    }
    if k0 != k1 || k1 != k2 {
        return Err(Error::shape(
            "conv_transpose3d",
            format!("kernels must be cubic, got {:?}", kernels.shape()),
        ));
    }
    let ext = |x| {
        conv_transpose_output_extent(x, k0, stride, padding, output_padding).ok_or_else(|| {
            Error::shape(
                "conv_transpose3d",
                format!(
                    "kernel {k0} stride {stride} padding {padding} output_padding {output_padding} invalid for input {:?}",
                    input.shape()
                ),
            )
        })
    };
    Ok(Geometry {
        n,
        small_ch: c,
        big_ch: f,
        small: [d, h, w],
        big: [ext(d)?, ext(h)?, ext(w)?],
        k: k0,
        stride,
        pad: padding,
    })
}

/// Cross-correlation of `input [N,C,D,H,W]` with `kernels [F,C,k,k,k]`.
pub fn conv3d(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
    exec: ExecMode,
) -> Result<Tensor> {
    let g = conv_geometry(input, kernels, stride, padding)?;
    let data = gather_small(input.data(), kernels.data(), &g, exec);
    Tensor::new(
        vec![g.n, g.small_ch, g.small[0], g.small[1], g.small[2]],
        data,
    )
}

/// Transposed convolution of `input [N,C,D,H,W]` with `kernels [C,F,k,k,k]`.
///
/// With `output_padding = (D + 2p - k) mod s` this restores the input extent
/// `D` of a forward conv with the same kernel, stride and padding.
pub fn conv_transpose3d(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
    output_padding: usize,
    exec: ExecMode,
) -> Result<Tensor> {
    let g = conv_transpose_geometry(input, kernels, stride, padding, output_padding)?;
    let data = scatter_big(input.data(), kernels.data(), &g, exec);
    Tensor::new(vec![g.n, g.big_ch, g.big[0], g.big[1], g.big[2]], data)
}
