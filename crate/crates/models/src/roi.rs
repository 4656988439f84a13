//! Bilinear region pooling expressed as a matrix product, so gradients reach
//! the feature map through an ordinary matmul.

use candle_core::{Tensor, D};
use dap_core::geometry::BBox;

use crate::error::Result;

const SAMPLES: usize = 2;

/// `(h*w, out*out)` interpolation matrix for one box. Bin values average
/// `SAMPLES x SAMPLES` bilinear samples; pixel `i` of the image maps to
/// feature coordinate `i / stride - 0.5`.
fn interpolation_matrix(b: &BBox, h: usize, w: usize, stride: f64, out: usize) -> Vec<f64> {
    let mut m = vec![0.0; h * w * out * out];
    let x0 = b.x1 / stride - 0.5;
    let y0 = b.y1 / stride - 0.5;
    let bin_w = b.width().max(1e-6) / stride / out as f64;
    let bin_h = b.height().max(1e-6) / stride / out as f64;
    let norm = 1.0 / (SAMPLES * SAMPLES) as f64;
    for by in 0..out {
        for bx in 0..out {
            let col = by * out + bx;
            for sy in 0..SAMPLES {
                for sx in 0..SAMPLES {
                    let y = y0 + bin_h * (by as f64 + (sy as f64 + 0.5) / SAMPLES as f64);
                    let x = x0 + bin_w * (bx as f64 + (sx as f64 + 0.5) / SAMPLES as f64);
                    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
                        continue;
                    }
                    let y = y.clamp(0.0, (h - 1) as f64);
                    let x = x.clamp(0.0, (w - 1) as f64);
                    let (yl, xl) = (y.floor() as usize, x.floor() as usize);
                    let (yh, xh) = ((yl + 1).min(h - 1), (xl + 1).min(w - 1));
                    let (ly, lx) = (y - yl as f64, x - xl as f64);
                    for (yy, xx, wt) in [
                        (yl, xl, (1.0 - ly) * (1.0 - lx)),
                        (yl, xh, (1.0 - ly) * lx),
                        (yh, xl, ly * (1.0 - lx)),
                        (yh, xh, ly * lx),
                    ] {
                        m[(yy * w + xx) * out * out + col] += wt * norm;
                    }
                }
            }
        }
    }
    m
}

/// Pools `(N, C, h, w)` features inside each `(image, box)` region to
/// `(R, C, out, out)`, in the order given.
pub fn roi_align(features: &Tensor, rois: &[(usize, BBox)], stride: usize, out: usize) -> Result<Tensor> {
    let (_, c, h, w) = features.dims4()?;
    let device = features.device();
    if rois.is_empty() {
        return Ok(Tensor::zeros((0, c, out, out), features.dtype(), device)?);
    }
    let mut pooled = Vec::with_capacity(rois.len());
    let mut start = 0;
    while start < rois.len() {
        // contiguous run of boxes on the same image share one matmul
        let image = rois[start].0;
        let end = rois[start..]
            .iter()
            .position(|r| r.0 != image)
            .map_or(rois.len(), |p| start + p);
        let run = &rois[start..end];
        let mut weights = Vec::with_capacity(h * w * out * out * run.len());
        let mats: Vec<Vec<f64>> = run
            .iter()
            .map(|(_, b)| interpolation_matrix(b, h, w, stride as f64, out))
            .collect();
        for p in 0..h * w {
            for m in &mats {
                weights.extend_from_slice(&m[p * out * out..(p + 1) * out * out]);
            }
        }
        let weights = Tensor::from_vec(weights, (h * w, run.len() * out * out), device)?.to_dtype(features.dtype())?;
        let fmap = features.get(image)?.reshape((c, h * w))?;
        let y = fmap
            .matmul(&weights)?
            .reshape((c, run.len(), out, out))?
            .permute((1, 0, 2, 3))?;
        pooled.push(y);
        start = end;
    }
    Ok(Tensor::cat(&pooled, 0)?.contiguous()?)
}

/// Mean over the two trailing axes.
pub fn spatial_mean(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn constant_map_pools_to_constant() {
        let f = Tensor::full(2.5f64, (1, 3, 8, 8), &Device::Cpu).unwrap();
        let r = roi_align(&f, &[(0, BBox::new(8.0, 8.0, 40.0, 56.0))], 8, 7).unwrap();
        assert_eq!(r.dims(), &[1, 3, 7, 7]);
        let v = r.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| (x - 2.5).abs() < 1e-12));
    }

    #[test]
    fn order_follows_input_across_images() {
        let a = Tensor::zeros((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::ones((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let f = Tensor::cat(&[a, b], 0).unwrap();
        let bx = BBox::new(4.0, 4.0, 20.0, 20.0);
        let r = roi_align(&f, &[(1, bx), (0, bx), (1, bx)], 8, 2).unwrap();
        let means: Vec<f64> = spatial_mean(&r).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(means, vec![1.0, 0.0, 1.0]);
    }
}
