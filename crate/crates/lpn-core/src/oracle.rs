//! Naive reference implementations used to cross-check the production
//! kernels. These stay deliberately dumb: direct nested loops for conv2d and
//! scatter-add for conv_transpose2d, sharing no code with the fast paths.

use crate::error::Result;
use crate::kernels::{conv_out_size, ConvParams};
use crate::tensor::{Scalar, Shape, Tensor};

/// Seven-loop cross-correlation.
pub fn naive_conv2d<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = p.weight.shape();
    let (oc, cg, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
    let ocg = oc / p.groups;
    let oh = conv_out_size(xs.h, kh, p.stride.0, p.padding.0)?;
    let ow = conv_out_size(xs.w, kw, p.stride.1, p.padding.1)?;
    let mut out = Tensor::zeros(Shape::new(xs.n, oc, oh, ow));
    for n in 0..xs.n {
        for o in 0..oc {
            let g = o / ocg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = p.bias.as_ref().map_or(T::zero(), |b| b[o]);
                    for ci in 0..cg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * p.stride.0 + ky) as isize - p.padding.0 as isize;
                                let ix = (ox * p.stride.1 + kx) as isize - p.padding.1 as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize
                                {
                                    continue;
                                }
                                acc += x.at(n, g * cg + ci, iy as usize, ix as usize)
                                    * p.weight.at(o, ci, ky, kx);
                            }
                        }
                    }
                    *out.at_mut(n, o, oy, ox) = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Scatter-add transposed convolution: every input element throws its
/// weighted kernel onto the output.
pub fn naive_conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    output_padding: (usize, usize),
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = p.weight.shape();
    let (_in_c, ocg, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
    let out_c = ocg * p.groups;
    let icg = xs.c / p.groups;
    let full_h = (xs.h - 1) * p.stride.0 + kh + output_padding.0;
    let full_w = (xs.w - 1) * p.stride.1 + kw + output_padding.1;
    let oh = full_h - 2 * p.padding.0;
    let ow = full_w - 2 * p.padding.1;
    let mut out = Tensor::zeros(Shape::new(xs.n, out_c, oh, ow));
    for n in 0..xs.n {
        for ci in 0..xs.c {
            let g = ci / icg;
            for iy in 0..xs.h {
                for ix in 0..xs.w {
                    let v = x.at(n, ci, iy, ix);
                    for og in 0..ocg {
                        let o = g * ocg + og;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (iy * p.stride.0 + ky) as isize - p.padding.0 as isize;
                                let ox = (ix * p.stride.1 + kx) as isize - p.padding.1 as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                *out.at_mut(n, o, oy as usize, ox as usize) +=
                                    v * p.weight.at(ci, og, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = &p.bias {
        for n in 0..xs.n {
            for o in 0..out_c {
                for d in out.plane_mut(n, o) {
                    *d += b[o];
                }
            }
        }
    }
    Ok(out)
}
