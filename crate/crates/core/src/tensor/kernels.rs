//! Raw slice kernels behind the graph ops. Layouts are row-major and
//! channel-major for sequences: `[channels × length]`.

use super::Element;

/// Geometry of a (possibly padded, grouped) 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub groups: usize,
    pub in_len: usize,
}

impl ConvGeom {
    pub fn out_len(&self) -> usize {
        (self.in_len + self.pad_left + self.pad_right - self.kernel) / self.stride + 1
    }

    fn cin_g(&self) -> usize {
        self.in_channels / self.groups
    }

    fn cout_g(&self) -> usize {
        self.out_channels / self.groups
    }
}

/// Unfolds `channels` rows of `x` (row length `len`) into
/// `[channels·kernel × out_len]` patches.
fn im2col<T: Element>(
    x: &[T],
    channels: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    pad_left: usize,
    out_len: usize,
    cols: &mut [T],
) {
    for c in 0..channels {
        let row = &x[c * len..(c + 1) * len];
        for j in 0..kernel {
            let dst = &mut cols[(c * kernel + j) * out_len..(c * kernel + j + 1) * out_len];
            for (t, d) in dst.iter_mut().enumerate() {
                let pos = t * stride + j;
                *d = if pos >= pad_left && pos - pad_left < len {
                    row[pos - pad_left]
                } else {
                    T::zero()
                };
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patches back with accumulation.
fn col2im<T: Element>(
    cols: &[T],
    channels: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    pad_left: usize,
    out_len: usize,
    x: &mut [T],
) {
    for c in 0..channels {
        let row = &mut x[c * len..(c + 1) * len];
        for j in 0..kernel {
            let src = &cols[(c * kernel + j) * out_len..(c * kernel + j + 1) * out_len];
            for (t, &s) in src.iter().enumerate() {
                let pos = t * stride + j;
                if pos >= pad_left && pos - pad_left < len {
                    row[pos - pad_left] = row[pos - pad_left] + s;
                }
            }
        }
    }
}

/// Direct (no unfolding) path applies to unpadded pointwise convolutions.
fn is_pointwise(g: &ConvGeom) -> bool {
    g.kernel == 1 && g.stride == 1 && g.pad_left == 0 && g.pad_right == 0
}

/// `y[cout × out_len] = conv(x[cin × in_len], w[cout × cin/groups × kernel])`
pub(crate) fn conv1d_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let (cin_g, cout_g, lout) = (g.cin_g(), g.cout_g(), g.out_len());
    let rows = cin_g * g.kernel;
    let mut y = vec![T::zero(); g.out_channels * lout];
    let mut cols = if is_pointwise(g) {
        Vec::new()
    } else {
        vec![T::zero(); rows * lout]
    };
    for grp in 0..g.groups {
        let xg = &x[grp * cin_g * g.in_len..(grp + 1) * cin_g * g.in_len];
        let patches: &[T] = if is_pointwise(g) {
            xg
        } else {
            im2col(
                xg, cin_g, g.in_len, g.kernel, g.stride, g.pad_left, lout, &mut cols,
            );
            &cols
        };
        let wg = &w[grp * cout_g * rows..(grp + 1) * cout_g * rows];
        let yg = &mut y[grp * cout_g * lout..(grp + 1) * cout_g * lout];
        T::gemm(
            cout_g,
            rows,
            lout,
            T::one(),
            wg,
            rows as isize,
            1,
            patches,
            lout as isize,
            1,
            T::zero(),
            yg,
            lout as isize,
            1,
        );
    }
    y
}

/// Accumulates input and weight gradients of [`conv1d_forward`].
pub(crate) fn conv1d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    let (cin_g, cout_g, lout) = (g.cin_g(), g.cout_g(), g.out_len());
    let rows = cin_g * g.kernel;
    let mut cols = vec![T::zero(); if is_pointwise(g) { 0 } else { rows * lout }];
    let mut dcols = vec![T::zero(); if dx.is_some() { rows * lout } else { 0 }];
    let mut dx = dx;
    let mut dw = dw;
    for grp in 0..g.groups {
        let dyg = &dy[grp * cout_g * lout..(grp + 1) * cout_g * lout];
        let xg = &x[grp * cin_g * g.in_len..(grp + 1) * cin_g * g.in_len];
        if let Some(dw) = dw.as_deref_mut() {
            let patches: &[T] = if is_pointwise(g) {
                xg
            } else {
                im2col(
                    xg, cin_g, g.in_len, g.kernel, g.stride, g.pad_left, lout, &mut cols,
                );
                &cols
            };
            let dwg = &mut dw[grp * cout_g * rows..(grp + 1) * cout_g * rows];
            // dW_g += dY_g · colsᵀ
            T::gemm(
                cout_g,
                lout,
                rows,
                T::one(),
                dyg,
                lout as isize,
                1,
                patches,
                1,
                lout as isize,
                T::one(),
                dwg,
                rows as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            let wg = &w[grp * cout_g * rows..(grp + 1) * cout_g * rows];
            let dxg = &mut dx[grp * cin_g * g.in_len..(grp + 1) * cin_g * g.in_len];
            if is_pointwise(g) {
                T::gemm(
                    rows,
                    cout_g,
                    lout,
                    T::one(),
                    wg,
                    1,
                    rows as isize,
                    dyg,
                    lout as isize,
                    1,
                    T::one(),
                    dxg,
                    lout as isize,
                    1,
                );
            } else {
                // dcols = W_gᵀ · dY_g, then fold back.
                T::gemm(
                    rows,
                    cout_g,
                    lout,
                    T::one(),
                    wg,
                    1,
                    rows as isize,
                    dyg,
                    lout as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    lout as isize,
                    1,
                );
                col2im(
                    &dcols, cin_g, g.in_len, g.kernel, g.stride, g.pad_left, lout, dxg,
                );
            }
        }
    }
}

/// Geometry of an ungrouped, unpadded transposed convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct DeconvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_len: usize,
}

impl DeconvGeom {
    pub fn out_len(&self) -> usize {
        (self.in_len - 1) * self.stride + self.kernel
    }
}

/// `y[cout × out_len] = deconv(x[cin × in_len], w[cin × cout × kernel])`
pub(crate) fn deconv1d_forward<T: Element>(g: &DeconvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let rows = g.out_channels * g.kernel;
    let lout = g.out_len();
    let mut cols = vec![T::zero(); rows * g.in_len];
    // cols = Wᵀ · x with W viewed as [cin × cout·kernel]
    T::gemm(
        rows,
        g.in_channels,
        g.in_len,
        T::one(),
        w,
        1,
        rows as isize,
        x,
        g.in_len as isize,
        1,
        T::zero(),
        &mut cols,
        g.in_len as isize,
        1,
    );
    let mut y = vec![T::zero(); g.out_channels * lout];
    col2im(
        &cols,
        g.out_channels,
        lout,
        g.kernel,
        g.stride,
        0,
        g.in_len,
        &mut y,
    );
    y
}

pub(crate) fn deconv1d_backward<T: Element>(
    g: &DeconvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    let rows = g.out_channels * g.kernel;
    let lout = g.out_len();
    let mut dcols = vec![T::zero(); rows * g.in_len];
    im2col(
        dy,
        g.out_channels,
        lout,
        g.kernel,
        g.stride,
        0,
        g.in_len,
        &mut dcols,
    );
    if let Some(dx) = dx {
        T::gemm(
            g.in_channels,
            rows,
            g.in_len,
            T::one(),
            w,
            rows as isize,
            1,
            &dcols,
            g.in_len as isize,
            1,
            T::one(),
            dx,
            g.in_len as isize,
            1,
        );
    }
    if let Some(dw) = dw {
        T::gemm(
            g.in_channels,
            g.in_len,
            rows,
            T::one(),
            x,
            g.in_len as isize,
            1,
            &dcols,
            1,
            g.in_len as isize,
            T::one(),
            dw,
            rows as isize,
            1,
        );
    }
}
