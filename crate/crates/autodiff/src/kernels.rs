//! Raw forward/backward kernels on row-major `[h, w, c]` buffers.
//!
//! These know nothing about the tape; [`crate::Tape`] validates shapes and
//! calls into them.

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is
/// `k x n`. With `a_t` set, `a` is stored as `k x m`; with `b_t`, `b` is
/// stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }
}

/// Unfolds `input` into `[out_h * out_w, k * k * c_in]` patches ordered
/// `(ky, kx, c)`. Out-of-bounds taps are zero.
pub fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let c = g.in_channels;
    let patch = g.patch_len();
    let mut cols = vec![0.0; oh * ow * patch];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * patch..][..patch];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= g.height as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= g.width as isize {
                        continue;
                    }
                    let src = (iy as usize * g.width + ix as usize) * c;
                    let dst = (ky * g.kernel + kx) * c;
                    row[dst..dst + c].copy_from_slice(&input[src..src + c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the input.
pub fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let c = g.in_channels;
    let patch = g.patch_len();
    let mut out = vec![0.0; g.height * g.width * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * patch..][..patch];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= g.height as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= g.width as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.width + ix as usize) * c;
                    let src = (ky * g.kernel + kx) * c;
                    for (o, v) in out[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                        *o += v;
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    g: &ConvGeometry,
    out_channels: usize,
) -> Vec<f64> {
    let rows = g.out_height() * g.out_width();
    let mut out = Vec::with_capacity(rows * out_channels);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    if g.is_pointwise() {
        gemm(rows, g.in_channels, out_channels, input, false, kernel, false, &mut out, 1.0);
    } else {
        let cols = im2col(input, g);
        gemm(rows, g.patch_len(), out_channels, &cols, false, kernel, false, &mut out, 1.0);
    }
    out
}

pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

/// Gradients of [`conv2d_forward`]; each output is only computed when its
/// flag is set.
pub fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeometry,
    out_channels: usize,
    want: [bool; 3],
) -> ConvGrads {
    let rows = g.out_height() * g.out_width();
    let patch = g.patch_len();
    let cols;
    let cols_ref: &[f64] = if g.is_pointwise() {
        input
    } else if want[1] {
        cols = im2col(input, g);
        &cols
    } else {
        &[]
    };

    let grad_input = want[0].then(|| {
        let mut dcols = vec![0.0; rows * patch];
        gemm(rows, out_channels, patch, grad_out, false, kernel, true, &mut dcols, 0.0);
        if g.is_pointwise() {
            dcols
        } else {
            col2im(&dcols, g)
        }
    });
    let grad_kernel = want[1].then(|| {
        let mut dk = vec![0.0; patch * out_channels];
        gemm(patch, rows, out_channels, cols_ref, true, grad_out, false, &mut dk, 0.0);
        dk
    });
    let grad_bias = want[2].then(|| {
        let mut db = vec![0.0; out_channels];
        for row in grad_out.chunks_exact(out_channels) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        db
    });
    ConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias: grad_bias,
    }
}

/// `[k, k, ci, co]` -> `[ci, k, k, co]`, the layout the scatter form of the
/// transposed convolution multiplies against.
fn kernel_by_input_channel(kernel: &[f64], k: usize, ci: usize, co: usize) -> Vec<f64> {
    let mut out = vec![0.0; kernel.len()];
    for tap in 0..k * k {
        for c in 0..ci {
            let src = (tap * ci + c) * co;
            let dst = (c * k * k + tap) * co;
            out[dst..dst + co].copy_from_slice(&kernel[src..src + co]);
        }
    }
    out
}

fn kernel_by_tap(permuted: &[f64], k: usize, ci: usize, co: usize) -> Vec<f64> {
    let mut out = vec![0.0; permuted.len()];
    for c in 0..ci {
        for tap in 0..k * k {
            let src = (c * k * k + tap) * co;
            let dst = (tap * ci + c) * co;
            out[dst..dst + co].copy_from_slice(&permuted[src..src + co]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeconvGeometry {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl DeconvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height - 1) * self.stride + self.kernel
    }

    pub fn out_width(&self) -> usize {
        (self.width - 1) * self.stride + self.kernel
    }
}

pub fn transposed_conv2d_forward(input: &[f64], kernel: &[f64], g: &DeconvGeometry) -> Vec<f64> {
    let (k, ci, co) = (g.kernel, g.in_channels, g.out_channels);
    let rows = g.height * g.width;
    let span = k * k * co;
    let permuted = kernel_by_input_channel(kernel, k, ci, co);
    let mut contrib = vec![0.0; rows * span];
    gemm(rows, ci, span, input, false, &permuted, false, &mut contrib, 0.0);

    let ow = g.out_width();
    let mut out = vec![0.0; g.out_height() * ow * co];
    for y in 0..g.height {
        for x in 0..g.width {
            let row = &contrib[(y * g.width + x) * span..][..span];
            for ky in 0..k {
                for kx in 0..k {
                    let dst = ((y * g.stride + ky) * ow + x * g.stride + kx) * co;
                    let src = (ky * k + kx) * co;
                    for (o, v) in out[dst..dst + co].iter_mut().zip(&row[src..src + co]) {
                        *o += v;
                    }
                }
            }
        }
    }
    out
}

pub fn transposed_conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &DeconvGeometry,
    want: [bool; 2],
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (k, ci, co) = (g.kernel, g.in_channels, g.out_channels);
    let rows = g.height * g.width;
    let span = k * k * co;
    let ow = g.out_width();
    let mut gathered = vec![0.0; rows * span];
    for y in 0..g.height {
        for x in 0..g.width {
            let row = &mut gathered[(y * g.width + x) * span..][..span];
            for ky in 0..k {
                for kx in 0..k {
                    let src = ((y * g.stride + ky) * ow + x * g.stride + kx) * co;
                    let dst = (ky * k + kx) * co;
                    row[dst..dst + co].copy_from_slice(&grad_out[src..src + co]);
                }
            }
        }
    }
    let grad_input = want[0].then(|| {
        let permuted = kernel_by_input_channel(kernel, k, ci, co);
        let mut dx = vec![0.0; rows * ci];
        gemm(rows, span, ci, &gathered, false, &permuted, true, &mut dx, 0.0);
        dx
    });
    let grad_kernel = want[1].then(|| {
        let mut dk = vec![0.0; ci * span];
        gemm(ci, rows, span, input, true, &gathered, false, &mut dk, 0.0);
        kernel_by_tap(&dk, k, ci, co)
    });
    (grad_input, grad_kernel)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.window) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.window) / self.stride + 1
    }
}

/// Max pooling with implicit `-inf` padding. Returns the pooled values and,
/// per output cell, the flat input index of the winning cell (the first
/// maximum in row-major window order).
pub fn maxpool_forward(input: &[f64], g: &PoolGeometry) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow, c) = (g.out_height(), g.out_width(), g.channels);
    let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
    let mut arg = vec![usize::MAX; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * c;
            for wy in 0..g.window {
                let iy = (oy * g.stride + wy) as isize - g.padding as isize;
                if iy < 0 || iy >= g.height as isize {
                    continue;
                }
                for wx in 0..g.window {
                    let ix = (ox * g.stride + wx) as isize - g.padding as isize;
                    if ix < 0 || ix >= g.width as isize {
                        continue;
                    }
                    let src = (iy as usize * g.width + ix as usize) * c;
                    for ch in 0..c {
                        let v = input[src + ch];
                        if v > out[base + ch] || arg[base + ch] == usize::MAX || v.is_nan() {
                            out[base + ch] = v;
                            arg[base + ch] = src + ch;
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

pub fn softmax_last_axis(input: &[f64], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for (src, dst) in input.chunks_exact(classes).zip(out.chunks_exact_mut(classes)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}
