//! Pure rearrangements: pixel (un)shuffle and nearest-neighbour upsampling.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Space-to-depth by factor `r`: `(B, C, F, H, W) -> (B, C*r*r, F, H/r, W/r)`.
///
/// Output channel `c*r*r + dy*r + dx` at `(i, j)` holds input `(c, i*r+dy, j*r+dx)`.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let s = x.shape();
    if r == 0 || s.height % r != 0 || s.width % r != 0 {
        return Err(Error::invalid(
            "pixel_unshuffle",
            format!("height and width of {s} must be divisible by {r}"),
        ));
    }
    let (oh, ow) = (s.height / r, s.width / r);
    let out_shape = Shape::new(s.batch, s.channels * r * r, s.frames, oh, ow);
    let mut out = vec![0.0f32; out_shape.numel()];
    let xd = x.data();
    let mut o = 0;
    for b in 0..s.batch {
        for c in 0..s.channels {
            for dy in 0..r {
                for dx in 0..r {
                    for f in 0..s.frames {
                        let base = ((b * s.channels + c) * s.frames + f) * s.plane();
                        for i in 0..oh {
                            let row = base + (i * r + dy) * s.width + dx;
                            for j in 0..ow {
                                out[o] = xd[row + j * r];
                                o += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Depth-to-space, the inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let s = x.shape();
    if r == 0 || s.channels % (r * r) != 0 {
        return Err(Error::invalid(
            "pixel_shuffle",
            format!("channels of {s} must be divisible by {}", r * r),
        ));
    }
    let c_out = s.channels / (r * r);
    let out_shape = Shape::new(s.batch, c_out, s.frames, s.height * r, s.width * r);
    let mut out = vec![0.0f32; out_shape.numel()];
    let xd = x.data();
    let mut o = 0;
    for b in 0..s.batch {
        for c in 0..c_out {
            for dy in 0..r {
                for dx in 0..r {
                    for f in 0..s.frames {
                        let base = ((b * c_out + c) * s.frames + f) * out_shape.plane();
                        for i in 0..s.height {
                            let row = base + (i * r + dy) * out_shape.width + dx;
                            for j in 0..s.width {
                                out[row + j * r] = xd[o];
                                o += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Nearest-neighbour 2x upsampling of height and width.
pub fn upsample2(x: &Tensor) -> Tensor {
    let s = x.shape();
    let out_shape = s.with_spatial(s.height * 2, s.width * 2);
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in x.data().chunks(s.plane()) {
        for row in plane.chunks(s.width) {
            let start = out.len();
            for &v in row {
                out.push(v);
                out.push(v);
            }
            out.extend_from_within(start..);
        }
    }
    Tensor::new(out_shape, out).expect("upsample shape")
}

/// Adjoint of [`upsample2`]: sums each 2x2 block. Falls back to `target`
/// extents when the upsampled size was cropped.
pub fn upsample2_backward(grad: &Tensor, target: Shape) -> Result<Tensor> {
    let gs = grad.shape();
    if gs.height != target.height * 2 || gs.width != target.width * 2 {
        return Err(Error::ShapeMismatch {
            op: "upsample2 backward",
            left: gs,
            right: target,
        });
    }
    let mut out = vec![0.0f32; target.numel()];
    let gd = grad.data();
    for (p, plane) in out.chunks_mut(target.plane()).enumerate() {
        let g = &gd[p * gs.plane()..(p + 1) * gs.plane()];
        for y in 0..target.height {
            for x in 0..target.width {
                let a = g[(2 * y) * gs.width + 2 * x];
                let b = g[(2 * y) * gs.width + 2 * x + 1];
                let c = g[(2 * y + 1) * gs.width + 2 * x];
                let d = g[(2 * y + 1) * gs.width + 2 * x + 1];
                plane[y * target.width + x] = (a + b) + (c + d);
            }
        }
    }
    Tensor::new(target, out)
}
