//! Dense numeric kernels shared by the tape ops. Layout is always row-major,
//! images NCHW, convolution kernels OIHW.

use crate::Real;

/// `c = alpha * op(a) * op(b) + beta * c` with explicit strides, so transposes are free.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Real,
    a: &[Real],
    rsa: isize,
    csa: isize,
    b: &[Real],
    rsb: isize,
    csb: isize,
    beta: Real,
    c: &mut [Real],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover the strided m×k, k×n and m×n views.
    unsafe {
        #[cfg(not(feature = "single-precision"))]
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
        #[cfg(feature = "single-precision")]
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds one image (C×H×W) into a (C·KH·KW) × (OH·OW) column matrix.
fn im2col(g: &ConvGeometry, image: &[Real], cols: &mut [Real]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    for c in 0..g.in_channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
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

/// Folds a column matrix back into an image, accumulating overlaps.
fn col2im(g: &ConvGeometry, cols: &[Real], image: &mut [Real]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeometry,
    input: &[Real],
    weight: &[Real],
    bias: Option<&[Real]>,
) -> Vec<Real> {
    let (k, p) = (g.patch_len(), g.positions());
    let in_size = g.in_channels * g.height * g.width;
    let out_size = g.out_channels * p;
    let mut out = vec![0.0; g.batch * out_size];
    let mut cols = vec![0.0; k * p];
    for n in 0..g.batch {
        im2col(g, &input[n * in_size..(n + 1) * in_size], &mut cols);
        let dst = &mut out[n * out_size..(n + 1) * out_size];
        if let Some(b) = bias {
            for (o, row) in dst.chunks_mut(p).enumerate() {
                row.fill(b[o]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(
            g.out_channels,
            k,
            p,
            1.0,
            weight,
            k as isize,
            1,
            &cols,
            p as isize,
            1,
            beta,
            dst,
            p as isize,
            1,
        );
    }
    out
}

/// Gradients of a convolution; each output slot is accumulated into when present.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &[Real],
    weight: &[Real],
    grad_out: &[Real],
    grad_input: Option<&mut [Real]>,
    grad_weight: Option<&mut [Real]>,
    grad_bias: Option<&mut [Real]>,
) {
    let (k, p) = (g.patch_len(), g.positions());
    let in_size = g.in_channels * g.height * g.width;
    let out_size = g.out_channels * p;
    if let Some(gb) = grad_bias {
        for n in 0..g.batch {
            let dy = &grad_out[n * out_size..(n + 1) * out_size];
            for (o, row) in dy.chunks(p).enumerate() {
                gb[o] += row.iter().sum::<Real>();
            }
        }
    }
    let mut cols = vec![0.0; k * p];
    if let Some(gw) = grad_weight {
        for n in 0..g.batch {
            im2col(g, &input[n * in_size..(n + 1) * in_size], &mut cols);
            let dy = &grad_out[n * out_size..(n + 1) * out_size];
            // gw (O×K) += dy (O×P) · colsᵀ (P×K)
            gemm(
                g.out_channels,
                p,
                k,
                1.0,
                dy,
                p as isize,
                1,
                &cols,
                1,
                p as isize,
                1.0,
                gw,
                k as isize,
                1,
            );
        }
    }
    if let Some(gx) = grad_input {
        for n in 0..g.batch {
            let dy = &grad_out[n * out_size..(n + 1) * out_size];
            // cols (K×P) = wᵀ (K×O) · dy (O×P)
            gemm(
                k,
                g.out_channels,
                p,
                1.0,
                weight,
                1,
                k as isize,
                dy,
                p as isize,
                1,
                0.0,
                &mut cols,
                p as isize,
                1,
            );
            col2im(g, &cols, &mut gx[n * in_size..(n + 1) * in_size]);
        }
    }
}

/// Direct nested-loop convolution. Slow; kept as the reference the im2col path is tested against.
pub fn conv2d_reference(
    g: &ConvGeometry,
    input: &[Real],
    weight: &[Real],
    bias: Option<&[Real]>,
) -> Vec<Real> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut out = vec![0.0; g.batch * g.out_channels * oh * ow];
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for c in 0..g.in_channels {
                        for ky in 0..g.kernel_h {
                            for kx in 0..g.kernel_w {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= g.height as isize
                                    || ix >= g.width as isize
                                {
                                    continue;
                                }
                                let xi = ((n * g.in_channels + c) * g.height + iy as usize)
                                    * g.width
                                    + ix as usize;
                                let wi = ((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w
                                    + kx;
                                acc += input[xi] * weight[wi];
                            }
                        }
                    }
                    out[((n * g.out_channels + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

pub(crate) fn avg_pool_forward(
    input: &[Real],
    planes: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Vec<Real> {
    let (oh, ow) = (h / kh, w / kw);
    let norm = 1.0 / (kh * kw) as Real;
    let mut out = vec![0.0; planes * oh * ow];
    for pl in 0..planes {
        let src = &input[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
        for y in 0..h {
            let oy = y / kh;
            for x in 0..w {
                dst[oy * ow + x / kw] += src[y * w + x];
            }
        }
        dst.iter_mut().for_each(|v| *v *= norm);
    }
    out
}

pub(crate) fn avg_pool_backward(
    grad_out: &[Real],
    grad_in: &mut [Real],
    planes: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) {
    let (oh, ow) = (h / kh, w / kw);
    let norm = 1.0 / (kh * kw) as Real;
    for pl in 0..planes {
        let src = &grad_out[pl * oh * ow..(pl + 1) * oh * ow];
        let dst = &mut grad_in[pl * h * w..(pl + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] += src[(y / kh) * ow + x / kw] * norm;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random(len: usize, seed: u64) -> Vec<Real> {
        let mut r = rng::stream(seed, &[]);
        (0..len).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn im2col_matches_nested_loops() {
        for (stride, padding, kh) in [(1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 0, 2), (3, 2, 3)] {
            let g = ConvGeometry {
                batch: 2,
                in_channels: 3,
                height: 7,
                width: 6,
                out_channels: 4,
                kernel_h: kh,
                kernel_w: kh,
                stride,
                padding,
            };
            let x = random(2 * 3 * 7 * 6, 1);
            let w = random(4 * 3 * kh * kh, 2);
            let b = random(4, 3);
            let fast = conv2d_forward(&g, &x, &w, Some(&b));
            let slow = conv2d_reference(&g, &x, &w, Some(&b));
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn all_ones_kernel_sums_neighbourhood() {
        let g = ConvGeometry {
            batch: 1,
            in_channels: 1,
            height: 4,
            width: 4,
            out_channels: 1,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 1,
        };
        let x: Vec<Real> = (0..16).map(|v| v as Real).collect();
        let out = conv2d_forward(&g, &x, &[1.0; 9], None);
        for y in 0..4i32 {
            for xx in 0..4i32 {
                let mut s = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (yy, xc) = (y + dy, xx + dx);
                        if (0..4).contains(&yy) && (0..4).contains(&xc) {
                            s += x[(yy * 4 + xc) as usize];
                        }
                    }
                }
                assert_eq!(out[(y * 4 + xx) as usize], s);
            }
        }
    }

    #[test]
    fn pooling_averages_blocks() {
        let x: Vec<Real> = (0..16).map(|v| v as Real).collect();
        let out = avg_pool_forward(&x, 1, 4, 4, 2, 2);
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
    }
}
