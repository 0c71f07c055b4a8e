use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (padded >= kernel && self.stride > 0).then(|| (padded - kernel) / self.stride + 1)
    }
}

struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }

    /// Patch matrix `(ho·wo, k·k·cin)`.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let pl = self.patch_len();
        let mut cols = vec![0.0; self.ho * self.wo * pl];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &mut cols[(oy * self.wo + ox) * pl..(oy * self.wo + ox + 1) * pl];
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let src = (iy as usize * self.w + ix as usize) * self.cin;
                        let dst = (ky * self.k + kx) * self.cin;
                        row[dst..dst + self.cin].copy_from_slice(&x[src..src + self.cin]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let pl = self.patch_len();
        let mut x = vec![0.0; self.h * self.w * self.cin];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &cols[(oy * self.wo + ox) * pl..(oy * self.wo + ox + 1) * pl];
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let dst = (iy as usize * self.w + ix as usize) * self.cin;
                        let src = (ky * self.k + kx) * self.cin;
                        x[dst..dst + self.cin]
                            .iter_mut()
                            .zip(&row[src..src + self.cin])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        x
    }
}

impl Tensor {
    /// 2-D convolution in channels-last layout.
    ///
    /// Shapes: input `(H, W, Cin)`, weight `(k, k, Cin, Cout)`, bias `(Cout)`,
    /// output `(Ho, Wo, Cout)` with `Ho = (H + 2p − k)/s + 1`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
        let mismatch = || Error::Shape {
            op: "conv2d",
            lhs: self.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        };
        let (&[h, w, cin], &[k, k2, wcin, cout]) = (self.shape(), weight.shape()) else {
            return Err(mismatch());
        };
        if k != k2 || cin != wcin {
            return Err(mismatch());
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::Shape {
                    op: "conv2d",
                    lhs: vec![cout],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let (Some(ho), Some(wo)) = (spec.output_extent(h, k), spec.output_extent(w, k)) else {
            return Err(mismatch());
        };
        let geo = Geometry {
            h,
            w,
            cin,
            k,
            ho,
            wo,
            stride: spec.stride,
            pad: spec.padding,
        };
        let pl = geo.patch_len();
        let cols = geo.im2col(self.data());
        let mut out = gemm_nn(&cols, weight.data(), ho * wo, pl, cout);
        if let Some(b) = bias {
            for row in out.chunks_exact_mut(cout) {
                row.iter_mut().zip(b.data()).for_each(|(o, bv)| *o += bv);
            }
        }

        let x = self.clone();
        let wt = weight.clone();
        let has_bias = bias.is_some();
        let mut inputs: Vec<&Tensor> = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Tensor::from_op(
            "conv2d",
            vec![ho, wo, cout],
            out,
            &inputs,
            Box::new(move |ctx| {
                let p = geo.ho * geo.wo;
                let gx = x.requires_grad().then(|| {
                    let dcols = gemm_nt(ctx.grad, wt.data(), p, cout, pl);
                    geo.col2im(&dcols)
                });
                let gw = wt
                    .requires_grad()
                    .then(|| gemm_tn(&cols, ctx.grad, p, pl, cout));
                let mut grads = vec![gx, gw];
                if has_bias {
                    let mut gb = vec![0.0; cout];
                    for row in ctx.grad.chunks_exact(cout) {
                        gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    grads.push(Some(gb));
                }
                Ok(grads)
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_channel_box_filter() {
        // 3x3 ones kernel, padding 1: each output is the sum of its 3x3 neighbourhood.
        let x = Tensor::from_fn(&[3, 3, 1], |i| i as f64).unwrap();
        let w = Tensor::full(&[3, 3, 1, 1], 1.0).unwrap();
        let y = x
            .conv2d(&w, None, Conv2dSpec { stride: 1, padding: 1 })
            .unwrap();
        assert_eq!(y.shape(), &[3, 3, 1]);
        assert_eq!(y.data()[4], 36.0);
        assert_eq!(y.data()[0], 0.0 + 1.0 + 3.0 + 4.0);
    }

    #[test]
    fn strided_output_extent() {
        let x = Tensor::zeros(&[16, 12, 3]);
        let w = Tensor::zeros(&[3, 3, 3, 5]);
        let y = x
            .conv2d(&w, None, Conv2dSpec { stride: 2, padding: 1 })
            .unwrap();
        assert_eq!(y.shape(), &[8, 6, 5]);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::zeros(&[4, 4, 2]);
        let w = Tensor::zeros(&[3, 3, 3, 5]);
        assert!(x
            .conv2d(&w, None, Conv2dSpec { stride: 1, padding: 1 })
            .is_err());
    }
}
