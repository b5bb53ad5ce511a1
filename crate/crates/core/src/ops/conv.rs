//! Stride-1 "same" convolution via row-chunked im2col + GEMM.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Upper bound on the number of im2col elements materialized at once.
const MAX_COL_ELEMS: usize = 1 << 22;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn rows_per_chunk(&self) -> usize {
        (MAX_COL_ELEMS / (self.patch_len() * self.w.max(1))).clamp(1, self.h.max(1))
    }
}

fn geometry<T: Scalar>(input: Shape4, weight: Shape4, bias: Shape4) -> Result<Geometry> {
    if weight.c != input.c {
        return Err(Error::ShapeMismatch {
            op: "conv2d (weight c_in vs input channels)",
            left: weight,
            right: input,
        });
    }
    if weight.h != weight.w || weight.h % 2 == 0 {
        return Err(Error::config(
            "conv2d.kernel",
            format!("kernel must be square with odd size, got {weight}"),
        ));
    }
    if bias != Shape4::new(1, weight.n, 1, 1) {
        return Err(Error::ShapeMismatch {
            op: "conv2d (bias vs c_out)",
            left: bias,
            right: weight,
        });
    }
    Ok(Geometry {
        n: input.n,
        c_in: input.c,
        c_out: weight.n,
        h: input.h,
        w: input.w,
        k: weight.h,
    })
}

/// Fills `cols` (patch_len × (rows·w)) for output rows `[r0, r1)` of one item.
fn im2col<T: Scalar>(item: &[T], g: &Geometry, r0: usize, r1: usize, cols: &mut [T]) {
    let pad = (g.k / 2) as isize;
    let chunk = (r1 - r0) * g.w;
    let plane = g.h * g.w;
    for ci in 0..g.c_in {
        let src = &item[ci * plane..(ci + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * chunk..(row + 1) * chunk];
                let dx = kx as isize - pad;
                for y in r0..r1 {
                    let sy = y as isize + ky as isize - pad;
                    let out = &mut dst[(y - r0) * g.w..(y - r0 + 1) * g.w];
                    if sy < 0 || sy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let line = &src[sy as usize * g.w..(sy as usize + 1) * g.w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *o = if sx < 0 || sx >= g.w as isize {
                            T::zero()
                        } else {
                            line[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatters-adds `cols` back into `item` (inverse of [`im2col`]).
fn col2im_add<T: Scalar>(cols: &[T], g: &Geometry, r0: usize, r1: usize, item: &mut [T]) {
    let pad = (g.k / 2) as isize;
    let chunk = (r1 - r0) * g.w;
    let plane = g.h * g.w;
    for ci in 0..g.c_in {
        let dst = &mut item[ci * plane..(ci + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * chunk..(row + 1) * chunk];
                let dx = kx as isize - pad;
                for y in r0..r1 {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let line = &mut dst[sy as usize * g.w..(sy as usize + 1) * g.w];
                    let vals = &src[(y - r0) * g.w..(y - r0 + 1) * g.w];
                    for (x, &v) in vals.iter().enumerate() {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < g.w as isize {
                            line[sx as usize] = line[sx as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded "same" 2D convolution with stride 1.
///
/// `weight` has shape `(c_out, c_in, k, k)` and `bias` shape `(1, c_out, 1, 1)`.
pub fn conv2d<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let g = geometry::<T>(input.shape(), weight.shape(), bias.shape())?;
    let out_shape = Shape4::new(g.n, g.c_out, g.h, g.w);
    let mut out = Tensor4::zeros(out_shape);
    let plane = g.h * g.w;
    let kk = g.patch_len();
    let rows = g.rows_per_chunk();
    let mut cols = vec![T::zero(); kk * rows * g.w];

    for n in 0..g.n {
        let item = input.item(n);
        let out_item = out.item_mut(n);
        for co in 0..g.c_out {
            out_item[co * plane..(co + 1) * plane].fill(bias.data()[co]);
        }
        let mut r0 = 0;
        while r0 < g.h {
            let r1 = (r0 + rows).min(g.h);
            let chunk = (r1 - r0) * g.w;
            let cols = &mut cols[..kk * chunk];
            im2col(item, &g, r0, r1, cols);
            T::gemm(
                g.c_out,
                kk,
                chunk,
                T::one(),
                weight.data(),
                kk as isize,
                1,
                cols,
                chunk as isize,
                1,
                T::one(),
                &mut out_item[r0 * g.w..],
                plane as isize,
                1,
            );
            r0 = r1;
        }
    }
    Ok(out)
}

/// Backward pass of [`conv2d`].
///
/// Weight and bias gradients are added into `grad_weight` / `grad_bias`;
/// the returned tensor is the gradient with respect to `input`.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor4<T>,
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_weight: &mut Tensor4<T>,
    grad_bias: &mut Tensor4<T>,
) -> Result<Tensor4<T>> {
    let g = geometry::<T>(input.shape(), weight.shape(), grad_bias.shape())?;
    let out_shape = Shape4::new(g.n, g.c_out, g.h, g.w);
    crate::tensor::ensure_same("conv2d_backward (grad_out)", grad_out.shape(), out_shape)?;
    crate::tensor::ensure_same("conv2d_backward (grad_weight)", grad_weight.shape(), weight.shape())?;

    let plane = g.h * g.w;
    let kk = g.patch_len();
    let rows = g.rows_per_chunk();
    let mut cols = vec![T::zero(); kk * rows * g.w];
    let mut grad_cols = vec![T::zero(); kk * rows * g.w];
    let mut grad_input = Tensor4::zeros(input.shape());

    for n in 0..g.n {
        let go = grad_out.item(n);
        for co in 0..g.c_out {
            let s = go[co * plane..(co + 1) * plane]
                .iter()
                .fold(T::zero(), |acc, &v| acc + v);
            let b = &mut grad_bias.data_mut()[co];
            *b = *b + s;
        }
        let mut r0 = 0;
        while r0 < g.h {
            let r1 = (r0 + rows).min(g.h);
            let chunk = (r1 - r0) * g.w;
            let cols = &mut cols[..kk * chunk];
            im2col(input.item(n), &g, r0, r1, cols);
            let go_block = &go[r0 * g.w..];
            // dW (c_out × kk) += dY (c_out × chunk) · colsᵀ (chunk × kk)
            T::gemm(
                g.c_out,
                chunk,
                kk,
                T::one(),
                go_block,
                plane as isize,
                1,
                cols,
                1,
                chunk as isize,
                T::one(),
                grad_weight.data_mut(),
                kk as isize,
                1,
            );
            // dcols (kk × chunk) = Wᵀ (kk × c_out) · dY (c_out × chunk)
            let gcols = &mut grad_cols[..kk * chunk];
            T::gemm(
                kk,
                g.c_out,
                chunk,
                T::one(),
                weight.data(),
                1,
                kk as isize,
                go_block,
                plane as isize,
                1,
                T::zero(),
                gcols,
                chunk as isize,
                1,
            );
            col2im_add(gcols, &g, r0, r1, grad_input.item_mut(n));
            r0 = r1;
        }
    }
    Ok(grad_input)
}
