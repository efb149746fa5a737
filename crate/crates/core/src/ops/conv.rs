//! Per-frame 2D convolution and frame-axis (temporal) convolution kernels.
//!
//! Every kernel works one `(batch, frame)` slice at a time and lowers it to a
//! matrix product (`im2col` for spatial kernels, one product per tap for
//! temporal kernels). Slices are computed independently and gathered in
//! index order, so results do not depend on how slices are distributed
//! across threads, and every output element sees the same accumulation
//! order regardless of its position in the plane.

use crate::error::{Error, Result};
use super::gemm::{sgemm, View};
use crate::parallel::map_indices;
use crate::tensor::{Shape, Tensor};

/// Horizontal boundary handling for spatial convolutions. Vertical padding is
/// always zeros: the poles of an ERP do not wrap.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum PadMode {
    #[default]
    Zeros,
    /// Column `j` reads columns `(j - k/2 ..= j + k/2) mod width`.
    CircularHorizontal,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    fn new(h: usize, w: usize, k: usize, stride: usize) -> Self {
        let pad = k / 2;
        ConvGeom {
            k,
            stride,
            pad,
            h,
            w,
            oh: h.div_ceil(stride),
            ow: w.div_ceil(stride),
            ph: h + 2 * pad,
            pw: w + 2 * pad,
        }
    }
}

fn check_conv2d(x: Shape, kernel: Shape, bias: Option<Shape>, stride: usize) -> Result<ConvGeom> {
    if stride != 1 && stride != 2 {
        return Err(Error::invalid("conv2d", format!("stride must be 1 or 2, got {stride}")));
    }
    let k = kernel.height;
    if kernel.frames != 1 || kernel.width != k || k % 2 == 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel must be (C_out, C_in, 1, k, k) with odd k, got {kernel}"),
        ));
    }
    if kernel.channels != x.channels {
        return Err(Error::ShapeMismatch {
            op: "conv2d (input channels vs kernel)",
            left: x,
            right: kernel,
        });
    }
    if let Some(b) = bias {
        if b.numel() != kernel.batch {
            return Err(Error::ShapeMismatch {
                op: "conv2d (bias vs kernel)",
                left: b,
                right: kernel,
            });
        }
    }
    Ok(ConvGeom::new(x.height, x.width, k, stride))
}

fn wrap(j: isize, w: usize) -> usize {
    j.rem_euclid(w as isize) as usize
}

/// Copies every plane of `x` into a zero/circular padded buffer of
/// `ph x pw` planes.
pub(crate) fn pad_planes(x: &[f32], planes: usize, g: &ConvGeom, mode: PadMode) -> Vec<f32> {
    let (h, w, p, pw) = (g.h, g.w, g.pad, g.pw);
    let mut out = vec![0.0f32; planes * g.ph * pw];
    for (src, dst) in x.chunks(h * w).zip(out.chunks_mut(g.ph * pw)) {
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let drow = &mut dst[(y + p) * pw..(y + p + 1) * pw];
            drow[p..p + w].copy_from_slice(row);
            if mode == PadMode::CircularHorizontal {
                for j in 0..p {
                    drow[j] = row[wrap(j as isize - p as isize, w)];
                    drow[p + w + j] = row[j % w];
                }
            }
        }
    }
    out
}

/// Unfolds the padded planes of batch item `b`, frame `f` into a
/// `(C_in * k * k) x (oh * ow)` matrix whose row order matches the kernel
/// layout `(ci, ky, kx)`.
fn im2col(xp: &[f32], b: usize, f: usize, ci_n: usize, frames: usize, g: &ConvGeom) -> Vec<f32> {
    let in_plane = g.ph * g.pw;
    let p = g.oh * g.ow;
    let mut col = vec![0.0f32; ci_n * g.k * g.k * p];
    for ci in 0..ci_n {
        let src = &xp[((b * ci_n + ci) * frames + f) * in_plane..][..in_plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut col[((ci * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.oh {
                    let srow = &src[(oy * g.stride + ky) * g.pw + kx..];
                    let orow = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if g.stride == 1 {
                        orow.copy_from_slice(&srow[..g.ow]);
                    } else {
                        for (ox, o) in orow.iter_mut().enumerate() {
                            *o = srow[ox * g.stride];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Copies per-`(batch, frame)` results of `channels x plane` into the
/// `(B, C, F, H, W)` layout.
fn scatter_frames(parts: Vec<Vec<f32>>, shape: Shape) -> Vec<f32> {
    let plane = shape.plane();
    let mut out = vec![0.0f32; shape.numel()];
    for (idx, part) in parts.into_iter().enumerate() {
        let (b, f) = (idx / shape.frames, idx % shape.frames);
        for (c, src) in part.chunks(plane).enumerate() {
            let o = ((b * shape.channels + c) * shape.frames + f) * plane;
            out[o..o + plane].copy_from_slice(src);
        }
    }
    out
}

/// Channel-major view of frame `f` of batch item `b`: row `c` is the plane
/// `(b, c, f)`.
fn frame_view(data: &[f32], s: Shape, b: usize, f: usize) -> View<'_> {
    let start = (b * s.channels * s.frames + f) * s.plane();
    View::new(&data[start..], s.frames * s.plane(), 1)
}

fn add_bias(part: &mut [f32], bias: Option<&Tensor>, plane: usize) {
    if let Some(bias) = bias {
        for (row, &bv) in part.chunks_mut(plane).zip(bias.data()) {
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
}

/// Spatial convolution applied independently to every frame.
///
/// `kernel` is `(C_out, C_in, 1, k, k)`; `bias` holds `C_out` values. The
/// output keeps `ceil(size / stride)` rows and columns.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, stride: usize, pad: PadMode) -> Result<Tensor> {
    let xs = x.shape();
    let ks = kernel.shape();
    let g = check_conv2d(xs, ks, bias.map(|b| b.shape()), stride)?;
    let (ci_n, co_n, frames) = (xs.channels, ks.batch, xs.frames);
    let out_shape = Shape::new(xs.batch, co_n, frames, g.oh, g.ow);
    let p = g.oh * g.ow;
    let kdim = ci_n * g.k * g.k;
    let w = View::new(kernel.data(), kdim, 1);
    let direct = g.k == 1 && stride == 1;
    let xp = if direct { Vec::new() } else { pad_planes(x.data(), xs.planes(), &g, pad) };
    let parts = map_indices(xs.batch * frames, |idx| {
        let (b, f) = (idx / frames, idx % frames);
        let mut part = vec![0.0f32; co_n * p];
        if direct {
            sgemm(co_n, kdim, p, w, frame_view(x.data(), xs, b, f), 0.0, &mut part);
        } else {
            let col = im2col(&xp, b, f, ci_n, frames, &g);
            sgemm(co_n, kdim, p, w, View::new(&col, p, 1), 0.0, &mut part);
        }
        add_bias(&mut part, bias, p);
        part
    });
    Tensor::new(out_shape, scatter_frames(parts, out_shape))
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input(grad_out: &Tensor, kernel: &Tensor, x_shape: Shape, stride: usize, pad: PadMode) -> Result<Tensor> {
    let ks = kernel.shape();
    let g = check_conv2d(x_shape, ks, None, stride)?;
    let (ci_n, co_n, frames) = (x_shape.channels, ks.batch, x_shape.frames);
    let gs = Shape::new(x_shape.batch, co_n, frames, g.oh, g.ow);
    grad_out.expect_shape("conv2d backward", gs)?;
    let p = g.oh * g.ow;
    let kdim = ci_n * g.k * g.k;
    let wt = View::new(kernel.data(), 1, kdim);
    let parts = map_indices(x_shape.batch * frames, |idx| {
        let (b, f) = (idx / frames, idx % frames);
        let mut col = vec![0.0f32; kdim * p];
        sgemm(kdim, co_n, p, wt, frame_view(grad_out.data(), gs, b, f), 0.0, &mut col);
        if g.k == 1 && stride == 1 {
            return col;
        }
        let mut part = vec![0.0f32; ci_n * g.h * g.w];
        let mut pg = vec![0.0f32; g.ph * g.pw];
        for (ci, plane) in part.chunks_mut(g.h * g.w).enumerate() {
            pg.fill(0.0);
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = &col[((ci * g.k + ky) * g.k + kx) * p..][..p];
                    for oy in 0..g.oh {
                        let grow = &row[oy * g.ow..(oy + 1) * g.ow];
                        let prow = &mut pg[(oy * g.stride + ky) * g.pw + kx..];
                        if g.stride == 1 {
                            for (d, v) in prow[..g.ow].iter_mut().zip(grow) {
                                *d += v;
                            }
                        } else {
                            for (ox, v) in grow.iter().enumerate() {
                                prow[ox * g.stride] += v;
                            }
                        }
                    }
                }
            }
            fold_padded(&pg, plane, &g, pad);
        }
        part
    });
    Tensor::new(x_shape, scatter_frames(parts, x_shape))
}

/// Scatters a padded-plane gradient back onto the unpadded plane.
fn fold_padded(pg: &[f32], plane: &mut [f32], g: &ConvGeom, pad: PadMode) {
    let (w, p) = (g.w, g.pad);
    for y in 0..g.h {
        let prow = &pg[(y + p) * g.pw..(y + p + 1) * g.pw];
        let orow = &mut plane[y * w..(y + 1) * w];
        match pad {
            PadMode::Zeros => orow.copy_from_slice(&prow[p..p + w]),
            PadMode::CircularHorizontal => {
                for (j, v) in prow.iter().enumerate() {
                    orow[wrap(j as isize - p as isize, w)] += v;
                }
            }
        }
    }
}

/// Gradients of [`conv2d`] with respect to kernel and bias.
///
/// Per-frame partial kernel gradients are summed in `(batch, frame)` order.
pub fn conv2d_grad_params(grad_out: &Tensor, x: &Tensor, kernel_shape: Shape, stride: usize, pad: PadMode) -> Result<(Tensor, Tensor)> {
    let xs = x.shape();
    let g = check_conv2d(xs, kernel_shape, None, stride)?;
    let (ci_n, co_n, frames) = (xs.channels, kernel_shape.batch, xs.frames);
    let gs = Shape::new(xs.batch, co_n, frames, g.oh, g.ow);
    grad_out.expect_shape("conv2d backward", gs)?;
    let p = g.oh * g.ow;
    let kdim = ci_n * g.k * g.k;
    let direct = g.k == 1 && stride == 1;
    let xp = if direct { Vec::new() } else { pad_planes(x.data(), xs.planes(), &g, pad) };
    let parts = map_indices(xs.batch * frames, |idx| {
        let (b, f) = (idx / frames, idx % frames);
        let mut dk = vec![0.0f32; co_n * kdim];
        let gv = frame_view(grad_out.data(), gs, b, f);
        if direct {
            let xv = frame_view(x.data(), xs, b, f);
            sgemm(co_n, p, kdim, gv, View::new(xv.data, 1, xv.rs), 0.0, &mut dk);
        } else {
            let col = im2col(&xp, b, f, ci_n, frames, &g);
            sgemm(co_n, p, kdim, gv, View::new(&col, 1, p), 0.0, &mut dk);
        }
        dk
    });
    let db = plane_sums(grad_out.data(), xs.batch, co_n, frames * p);
    Ok((
        Tensor::new(kernel_shape, sum_parts(parts, kernel_shape.numel()))?,
        Tensor::new(Shape::new(co_n, 1, 1, 1, 1), db)?,
    ))
}

fn sum_parts(parts: Vec<Vec<f32>>, n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; n];
    for part in &parts {
        for (a, &v) in acc.iter_mut().zip(part) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Per-channel sums of a `(batch, channels, rest)` buffer, batch-major order.
pub(crate) fn plane_sums(data: &[f32], batch: usize, channels: usize, rest: usize) -> Vec<f32> {
    (0..channels)
        .map(|c| {
            let mut acc = 0.0f64;
            for b in 0..batch {
                let s = &data[(b * channels + c) * rest..][..rest];
                acc += s.iter().map(|&v| v as f64).sum::<f64>();
            }
            acc as f32
        })
        .collect()
}

fn check_temporal(x: Shape, kernel: Shape, bias: Option<Shape>) -> Result<usize> {
    let kt = kernel.frames;
    if kernel.height != 1 || kernel.width != 1 || kt % 2 == 0 {
        return Err(Error::invalid(
            "temporal_conv",
            format!("kernel must be (C_out, C_in, kt, 1, 1) with odd kt, got {kernel}"),
        ));
    }
    if kernel.channels != x.channels {
        return Err(Error::ShapeMismatch {
            op: "temporal_conv (input channels vs kernel)",
            left: x,
            right: kernel,
        });
    }
    if let Some(b) = bias {
        if b.numel() != kernel.batch {
            return Err(Error::ShapeMismatch {
                op: "temporal_conv (bias vs kernel)",
                left: b,
                right: kernel,
            });
        }
    }
    Ok(kt)
}

/// Convolution along the frames axis with zero padding of `kt/2` frames at
/// each end. `kernel` is `(C_out, C_in, kt, 1, 1)`.
pub fn temporal_conv(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let xs = x.shape();
    let ks = kernel.shape();
    let kt = check_temporal(xs, ks, bias.map(|b| b.shape()))?;
    let (ci_n, co_n, frames, hw) = (xs.channels, ks.batch, xs.frames, xs.plane());
    let pad = kt / 2;
    let out_shape = xs.with_channels(co_n);
    let parts = map_indices(xs.batch * frames, |idx| {
        let (b, f) = (idx / frames, idx % frames);
        let mut part = vec![0.0f32; co_n * hw];
        let mut beta = 0.0;
        for dt in 0..kt {
            let Some(src_f) = (f + dt).checked_sub(pad).filter(|&s| s < frames) else {
                continue;
            };
            let w = View::new(&kernel.data()[dt..], ci_n * kt, kt);
            sgemm(co_n, ci_n, hw, w, frame_view(x.data(), xs, b, src_f), beta, &mut part);
            beta = 1.0;
        }
        add_bias(&mut part, bias, hw);
        part
    });
    Tensor::new(out_shape, scatter_frames(parts, out_shape))
}

pub fn temporal_conv_grad_input(grad_out: &Tensor, kernel: &Tensor, x_shape: Shape) -> Result<Tensor> {
    let ks = kernel.shape();
    let kt = check_temporal(x_shape, ks, None)?;
    let gs = x_shape.with_channels(ks.batch);
    grad_out.expect_shape("temporal_conv backward", gs)?;
    let (ci_n, co_n, frames, hw) = (x_shape.channels, ks.batch, x_shape.frames, x_shape.plane());
    let pad = kt / 2;
    let parts = map_indices(x_shape.batch * frames, |idx| {
        let (b, f) = (idx / frames, idx % frames);
        let mut part = vec![0.0f32; ci_n * hw];
        let mut beta = 0.0;
        for dt in 0..kt {
            // input frame f feeds output frame f + pad - dt
            let Some(of) = (f + pad).checked_sub(dt).filter(|&o| o < frames) else {
                continue;
            };
            let wt = View::new(&kernel.data()[dt..], kt, ci_n * kt);
            sgemm(ci_n, co_n, hw, wt, frame_view(grad_out.data(), gs, b, of), beta, &mut part);
            beta = 1.0;
        }
        part
    });
    Tensor::new(x_shape, scatter_frames(parts, x_shape))
}

pub fn temporal_conv_grad_params(grad_out: &Tensor, x: &Tensor, kernel_shape: Shape) -> Result<(Tensor, Tensor)> {
    let xs = x.shape();
    let kt = check_temporal(xs, kernel_shape, None)?;
    let gs = xs.with_channels(kernel_shape.batch);
    grad_out.expect_shape("temporal_conv backward", gs)?;
    let (ci_n, co_n, frames, hw) = (xs.channels, kernel_shape.batch, xs.frames, xs.plane());
    let pad = kt / 2;
    let parts = map_indices(xs.batch * frames, |idx| {
        let (b, f) = (idx / frames, idx % frames);
        // rows co, columns (ci, dt): the kernel's own layout
        let mut dk = vec![0.0f32; co_n * ci_n * kt];
        let gv = frame_view(grad_out.data(), gs, b, f);
        for dt in 0..kt {
            let Some(src_f) = (f + dt).checked_sub(pad).filter(|&s| s < frames) else {
                continue;
            };
            let xv = frame_view(x.data(), xs, b, src_f);
            let mut tmp = vec![0.0f32; co_n * ci_n];
            sgemm(co_n, hw, ci_n, gv, View::new(xv.data, 1, xv.rs), 0.0, &mut tmp);
            for (i, v) in tmp.into_iter().enumerate() {
                dk[i * kt + dt] = v;
            }
        }
        dk
    });
    let db = plane_sums(grad_out.data(), xs.batch, co_n, frames * hw);
    Ok((
        Tensor::new(kernel_shape, sum_parts(parts, kernel_shape.numel()))?,
        Tensor::new(Shape::new(co_n, 1, 1, 1, 1), db)?,
    ))
}

/// Spatial `1x3x3` convolution per frame followed by a temporal `3x1x1`
/// convolution, both without bias. Channels are preserved.
pub fn pseudo3d_pair(x: &Tensor, spatial: &Tensor, temporal: &Tensor, pad: PadMode) -> Result<Tensor> {
    let c = x.shape().channels;
    let ss = spatial.shape();
    let ts = temporal.shape();
    if ss != Shape::new(c, c, 1, 3, 3) {
        return Err(Error::ShapeMismatch {
            op: "pseudo3d_pair (spatial kernel)",
            left: x.shape(),
            right: ss,
        });
    }
    if ts != Shape::new(c, c, 3, 1, 1) {
        return Err(Error::ShapeMismatch {
            op: "pseudo3d_pair (temporal kernel)",
            left: x.shape(),
            right: ts,
        });
    }
    let s = conv2d(x, spatial, None, 1, pad)?;
    temporal_conv(&s, temporal, None)
}
