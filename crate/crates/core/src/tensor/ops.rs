// Matrix product and valid cross-correlation, with the adjoint kernels the
// tape needs for their backward passes.

use super::{Result, Tensor, TensorError};

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(TensorError::InvalidArgument {
            op,
            reason: format!("expected rank 2, got shape {:?}", t.shape()),
        }),
    }
}

/// Standard matrix product of `[m, k]` and `[k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = rank2("matmul", a)?;
    let (k2, n) = rank2("matmul", b)?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    Tensor::checked("matmul", vec![m, n], out)
}

/// `g · bᵀ` for `g: [m, n]`, `b: [k, n]`.
pub(crate) fn matmul_rhs_transposed(g: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = rank2("matmul", g)?;
    let (k, _) = rank2("matmul", b)?;
    let (gd, bd) = (g.data(), b.data());
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &bd[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::checked("matmul", vec![m, k], out)
}

/// `aᵀ · g` for `a: [m, k]`, `g: [m, n]`.
pub(crate) fn matmul_lhs_transposed(a: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (m, k) = rank2("matmul", a)?;
    let (_, n) = rank2("matmul", g)?;
    let (ad, gd) = (a.data(), g.data());
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    Tensor::checked("matmul", vec![k, n], out)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    pub(crate) fn new(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            left: input.shape().to_vec(),
            right: kernel.shape().to_vec(),
        };
        let [batch, in_ch, height, width] = *input.shape() else {
            return Err(mismatch());
        };
        let [out_ch, k_in, kh, kw] = *kernel.shape() else {
            return Err(mismatch());
        };
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        if k_in != in_ch || kh > height || kw > width {
            return Err(mismatch());
        }
        Ok(ConvGeometry {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kh,
            kw,
            stride,
            out_h: (height - kh) / stride + 1,
            out_w: (width - kw) / stride + 1,
        })
    }

    pub(crate) fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_h, self.out_w]
    }
}

/// Valid (unpadded) cross-correlation of an NCHW input with an OIHW kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernel, stride)?;
    let (x, w) = (input.data(), kernel.data());
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.batch * g.out_ch * plane];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let dst = &mut out[(b * g.out_ch + o) * plane..][..plane];
            for c in 0..g.in_ch {
                let src = &x[(b * g.in_ch + c) * g.height * g.width..][..g.height * g.width];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let wv = w[((o * g.in_ch + c) * g.kh + ki) * g.kw + kj];
                        for oy in 0..g.out_h {
                            let row = &src[(oy * g.stride + ki) * g.width + kj..];
                            let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                *d += wv * row[ox * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::checked("conv2d", g.output_shape(), out)
}

/// Gradient of `conv2d` with respect to its input.
pub(crate) fn conv2d_grad_input(grad: &Tensor, kernel: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    let (gd, w) = (grad.data(), kernel.data());
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.batch * g.in_ch * g.height * g.width];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let src = &gd[(b * g.out_ch + o) * plane..][..plane];
            for c in 0..g.in_ch {
                let dst = &mut out[(b * g.in_ch + c) * g.height * g.width..][..g.height * g.width];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let wv = w[((o * g.in_ch + c) * g.kh + ki) * g.kw + kj];
                        for oy in 0..g.out_h {
                            let base = (oy * g.stride + ki) * g.width + kj;
                            for ox in 0..g.out_w {
                                dst[base + ox * g.stride] += wv * src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::checked(
        "conv2d",
        vec![g.batch, g.in_ch, g.height, g.width],
        out,
    )
}

/// Gradient of `conv2d` with respect to its kernel.
pub(crate) fn conv2d_grad_kernel(grad: &Tensor, input: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    let (gd, x) = (grad.data(), input.data());
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.out_ch * g.in_ch * g.kh * g.kw];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let src = &gd[(b * g.out_ch + o) * plane..][..plane];
            for c in 0..g.in_ch {
                let img = &x[(b * g.in_ch + c) * g.height * g.width..][..g.height * g.width];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let mut acc = 0.0;
                        for oy in 0..g.out_h {
                            let row = &img[(oy * g.stride + ki) * g.width + kj..];
                            let grow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                            for (ox, gv) in grow.iter().enumerate() {
                                acc += gv * row[ox * g.stride];
                            }
                        }
                        out[((o * g.in_ch + c) * g.kh + ki) * g.kw + kj] += acc;
                    }
                }
            }
        }
    }
    Tensor::checked("conv2d", vec![g.out_ch, g.in_ch, g.kh, g.kw], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_annihilation() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let id = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &id).unwrap(), a);
        let p = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let q = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&p, &q).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dims() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(TensorError::ShapeMismatch { .. })));
        assert!(matmul(&Tensor::zeros(&[3]), &a).is_err());
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_output_size_with_stride() {
        let x = Tensor::full(&[2, 1, 7, 6], 1.0);
        let k = Tensor::full(&[3, 1, 3, 2], 0.5);
        let y = conv2d(&x, &k, 2).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn conv_rejects_incompatible_shapes() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 1, 3, 3]), 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 5, 5]), 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), 0).is_err());
    }
}
