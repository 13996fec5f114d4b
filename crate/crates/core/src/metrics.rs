//! Image similarity metrics for pixel arrays in `[0, 1]`.
//!
//! Images are flat row-major `(C, H, W)` slices with the shape passed
//! alongside.

use serde::{Deserialize, Serialize};

use crate::nn::{classifier_features, ClassifierSpec, NnError};
use crate::params::ParamSet;
use crate::tensor::{no_grad, Result as TensorResult, Tensor};

/// PSNR of identical images.
pub const PSNR_CAP: f64 = 60.0;
pub const SSIM_WINDOW: usize = 7;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "mse of different lengths");
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `10 log10(1 / MSE)` with peak value 1, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let m = mse(a, b);
    if m <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * m.log10()).min(PSNR_CAP)
}

fn ssim_stat(ma: f64, mb: f64, va: f64, vb: f64, cov: f64) -> f64 {
    ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
}

fn reflect(i: isize, n: usize) -> usize {
    // Mirror without repeating the edge sample: -1 -> 1, n -> n - 2.
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn ssim_channel(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
        let vb = b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n;
        let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        return ssim_stat(ma, mb, va, vb, cov);
    }
    let r = (SSIM_WINDOW / 2) as isize;
    let count = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in -r..=r {
                let ii = reflect(i as isize + di, h);
                for dj in -r..=r {
                    let jj = reflect(j as isize + dj, w);
                    let (x, y) = (a[ii * w + jj], b[ii * w + jj]);
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (ma, mb) = (sa / count, sb / count);
            total += ssim_stat(ma, mb, saa / count - ma * ma, sbb / count - mb * mb, sab / count - ma * mb);
        }
    }
    total / (h * w) as f64
}

/// Mean SSIM over a 7x7 uniform window with mirror padding, averaged over
/// channels. Images smaller than the window use global statistics.
pub fn ssim(a: &[f64], b: &[f64], shape: [usize; 3]) -> f64 {
    let [c, h, w] = shape;
    assert_eq!(a.len(), c * h * w, "ssim: image does not match shape");
    assert_eq!(b.len(), a.len(), "ssim of different lengths");
    let plane = h * w;
    (0..c)
        .map(|k| ssim_channel(&a[k * plane..(k + 1) * plane], &b[k * plane..(k + 1) * plane], h, w))
        .sum::<f64>()
        / c as f64
}

/// Anisotropic total variation: the mean absolute difference over all
/// vertical and horizontal neighbour pairs.
pub fn tv(a: &[f64], shape: [usize; 3]) -> f64 {
    let [c, h, w] = shape;
    assert_eq!(a.len(), c * h * w, "tv: image does not match shape");
    let pairs = c * ((h - 1) * w + h * (w - 1));
    if pairs == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for k in 0..c {
        let p = &a[k * h * w..(k + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                if i + 1 < h {
                    sum += (p[(i + 1) * w + j] - p[i * w + j]).abs();
                }
                if j + 1 < w {
                    sum += (p[i * w + j + 1] - p[i * w + j]).abs();
                }
            }
        }
    }
    sum / pairs as f64
}

/// [`tv`] of an `(n, C, H, W)` batch as a differentiable scalar, pooled over
/// the batch.
pub fn tv_tensor(x: &Tensor) -> TensorResult<Tensor> {
    let s = x.shape().to_vec();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (ah, aw) = (s.len() - 2, s.len() - 1);
    let mut total = None::<Tensor>;
    let mut pairs = 0usize;
    if h > 1 {
        let d = x.slice(ah, 1, h - 1)?.sub(&x.slice(ah, 0, h - 1)?)?;
        pairs += d.numel();
        total = Some(d.abs().sum());
    }
    if w > 1 {
        let d = x.slice(aw, 1, w - 1)?.sub(&x.slice(aw, 0, w - 1)?)?;
        pairs += d.numel();
        let part = d.abs().sum();
        total = Some(match total {
            Some(t) => t.add(&part)?,
            None => part,
        });
    }
    Ok(match total {
        Some(t) => t.scale(1.0 / pairs as f64),
        None => Tensor::scalar(0.0),
    })
}

/// Mean squared distance between the classifier's penultimate features of
/// two images.
pub fn fmse(a: &[f64], b: &[f64], spec: &ClassifierSpec, params: &ParamSet) -> Result<f64, NnError> {
    let [c, h, w] = spec.input;
    let fa = no_grad(|| classifier_features(spec, params, &Tensor::new(a.to_vec(), &[1, c, h, w])?))?;
    let fb = no_grad(|| classifier_features(spec, params, &Tensor::new(b.to_vec(), &[1, c, h, w])?))?;
    Ok(mse(fa.data(), fb.data()))
}

/// All reconstruction metrics of one image against its target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricPanel {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub tv: f64,
    pub fmse: f64,
}

impl MetricPanel {
    /// `tv` is measured on the reconstruction; `fmse` is left at zero.
    pub fn image(recon: &[f64], target: &[f64], shape: [usize; 3]) -> Self {
        Self {
            psnr: psnr(recon, target),
            ssim: ssim(recon, target, shape),
            mse: mse(recon, target),
            tv: tv(recon, shape),
            fmse: 0.0,
        }
    }

    pub fn mean(panels: &[MetricPanel]) -> Self {
        let n = panels.len().max(1) as f64;
        let mut m = MetricPanel::default();
        for p in panels {
            m.psnr += p.psnr / n;
            m.ssim += p.ssim / n;
            m.mse += p.mse / n;
            m.tv += p.tv / n;
            m.fmse += p.fmse / n;
        }
        m
    }
}
