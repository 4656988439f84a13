//! Layers used by every network in the pipeline.

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::params::{Init, Scope};

/// 2-D convolution over NCHW input, lowered to a single im2col matmul.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        scope: &mut Scope<'_>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = scope.get(
            "weight",
            &[out_channels, in_channels, kernel, kernel],
            Init::Kaiming { fan_in },
        )?;
        let bias = scope.get("bias", &[out_channels], Init::Zeros)?;
        Ok(Conv2d {
            weight,
            bias,
            kernel,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let co = self.out_channels();
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let wm = self.weight.reshape((co, c * k * k))?.t()?;

        let col = if k == 1 && s == 1 && p == 0 {
            x.permute((0, 2, 3, 1))?.reshape((n * h * w, c))?
        } else {
            // Extra trailing padding lets every strided window be taken with
            // a reshape instead of a gather.
            let extra = s - 1;
            let xp = x
                .pad_with_zeros(2, p, p + extra)?
                .pad_with_zeros(3, p, p + extra)?;
            let mut cols = Vec::with_capacity(k * k);
            for ky in 0..k {
                for kx in 0..k {
                    let mut patch = xp.narrow(2, ky, ho * s)?.narrow(3, kx, wo * s)?;
                    if s > 1 {
                        patch = patch
                            .reshape((n, c, ho, s, wo, s))?
                            .narrow(3, 0, 1)?
                            .narrow(5, 0, 1)?
                            .reshape((n, c, ho, wo))?;
                    }
                    cols.push(patch);
                }
            }
            Tensor::stack(&cols, 4)?
                .permute((0, 2, 3, 1, 4))?
                .reshape((n * ho * wo, c * k * k))?
        };
        let y = col.matmul(&wm)?.broadcast_add(&self.bias)?;
        Ok(y.reshape((n, ho, wo, co))?.permute((0, 3, 1, 2))?.contiguous()?)
    }
}

/// Fully connected layer acting on the last dimension.
#[derive(Debug, Clone)]
pub struct Dense {
    weight: Tensor,
    bias: Tensor,
}

impl Dense {
    pub fn new(scope: &mut Scope<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(scope, in_dim, out_dim, Init::Kaiming { fan_in: in_dim })
    }

    pub fn with_init(scope: &mut Scope<'_>, in_dim: usize, out_dim: usize, init: Init) -> Result<Self> {
        let weight = scope.get("weight", &[out_dim, in_dim], init)?;
        let bias = scope.get("bias", &[out_dim], Init::Zeros)?;
        Ok(Dense { weight, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("dense input has a feature axis");
        let rows = x.elem_count() / in_dim.max(1);
        let y = x
            .reshape((rows, in_dim))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

/// Per-channel spatial mean: `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// Row-wise softmax over the last dimension.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    /// Direct nested-loop convolution.
    fn naive_conv(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), wt: &[f64], co: usize, k: usize, s: usize, p: usize, b: &[f64]) -> Vec<f64> {
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let mut out = vec![0.0; n * co * ho * wo];
        for ni in 0..n {
            for o in 0..co {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = b[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * s + ky) as isize - p as isize;
                                    let ix = (xx * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x[((ni * c + ci) * h + iy as usize) * w + ix as usize]
                                            * wt[((o * c + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((ni * co + o) * ho + y) * wo + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(k, s, p, h, w) in &[(3, 1, 1, 5, 6), (3, 2, 1, 7, 6), (1, 1, 0, 4, 3), (3, 2, 1, 8, 8), (5, 3, 2, 9, 7)] {
            let mut store = ParamStore::new(DType::F64, 3);
            let conv = Conv2d::new(&mut store.root().pp("c"), 2, 3, k, s, p).unwrap();
            store.set("c.bias", &Tensor::new(&[0.1f64, -0.2, 0.3], &Device::Cpu).unwrap()).unwrap();
            let x: Vec<f64> = (0..2 * 2 * h * w).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
            let xt = Tensor::from_vec(x.clone(), (2, 2, h, w), &Device::Cpu).unwrap();
            let got = conv.forward(&xt).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let wt = store.var("c.weight").unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let want = naive_conv(&x, (2, 2, h, w), &wt, 3, k, s, p, &[0.1, -0.2, 0.3]);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn dense_handles_leading_axes() {
        let mut store = ParamStore::new(DType::F64, 1);
        let d = Dense::new(&mut store.root().pp("d"), 3, 2).unwrap();
        let x = Tensor::ones((4, 5, 3), DType::F64, &Device::Cpu).unwrap();
        let y = d.forward(&x).unwrap();
        assert_eq!(y.dims(), &[4, 5, 2]);
        let flat = d.forward(&x.reshape((20, 3)).unwrap()).unwrap();
        let diff = (y.reshape((20, 2)).unwrap() - flat).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [1000.0, 0.0, -1000.0]], &Device::Cpu).unwrap();
        let s = softmax(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
