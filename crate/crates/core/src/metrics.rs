//! Frame-quality metrics: MSE, PSNR, SSIM and CSI, plus per-timestep reports.

use std::fmt::Write as _;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

fn check_pair(pred: &Tensor, truth: &Tensor) -> Result<()> {
    if pred.dims() != truth.dims() {
        return shape_err(format!("prediction {:?} vs truth {:?}", pred.dims(), truth.dims()));
    }
    Ok(())
}

/// Mean squared difference over every element (all pixels, channels and
/// batch entries).
pub fn frame_mse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check_pair(pred, truth)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(sum / pred.numel() as f64)
}

pub const PSNR_CAP: f64 = 100.0;

/// `10·log10(max_val² / mse)`, capped at `cap` dB.
pub fn psnr_from_mse(mse: f64, max_val: f64, cap: f64) -> f64 {
    if mse <= max_val * max_val * 10f64.powf(-cap / 10.0) {
        return cap;
    }
    (10.0 * (max_val * max_val / mse).log10()).min(cap)
}

pub fn psnr(pred: &Tensor, truth: &Tensor, max_val: f64, cap: f64) -> Result<f64> {
    Ok(psnr_from_mse(frame_mse(pred, truth)?, max_val, cap))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the data.
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
        }
    }
}

fn gaussian(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..window)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter of an `h × w` plane, valid positions only.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..k).map(|i| g[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..k).map(|i| g[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, p: &SsimParams) -> f64 {
    let g = gaussian(p.window, p.sigma);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    };
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, &g);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, &g);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, &g);
    let c1 = (p.k1 * p.range).powi(2);
    let c2 = (p.k2 * p.range).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / n as f64
}

/// Gaussian-window SSIM averaged over valid window positions, then over
/// channels and batch entries of `[N, C, H, W]` frames.
pub fn ssim(pred: &Tensor, truth: &Tensor, p: &SsimParams) -> Result<f64> {
    check_pair(pred, truth)?;
    let [n, c, h, w] = pred.nchw()?;
    if h < p.window || w < p.window {
        return Err(Error::Contract(format!(
            "{h}x{w} frame is smaller than the {0}x{0} window",
            p.window
        )));
    }
    let plane = h * w;
    let to64 = |s: &[f32]| s.iter().map(|&v| v as f64).collect::<Vec<_>>();
    let sum: f64 = pred
        .data()
        .chunks(plane)
        .zip(truth.data().chunks(plane))
        .map(|(a, b)| ssim_plane(&to64(a), &to64(b), h, w, p))
        .sum();
    Ok(sum / (n * c) as f64)
}

/// Critical success index `TP / (TP + FN + FP)` after marking values
/// `>= threshold` as events; 1.0 when neither frame has an event.
pub fn csi(pred: &Tensor, truth: &Tensor, threshold: f64) -> Result<f64> {
    check_pair(pred, truth)?;
    let (mut hits, mut misses, mut false_alarms) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p as f64 >= threshold, t as f64 >= threshold) {
            (true, true) => hits += 1,
            (false, true) => misses += 1,
            (true, false) => false_alarms += 1,
            (false, false) => {}
        }
    }
    let denom = hits + misses + false_alarms;
    Ok(if denom == 0 { 1.0 } else { hits as f64 / denom as f64 })
}

/// Per-forecast-step metrics and their averages.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub mse: Vec<f64>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub csi_thresholds: Vec<f64>,
    /// `csi[i][t]` for threshold `i`.
    pub csi: Vec<Vec<f64>>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl MetricReport {
    /// Scores `preds[t]` against `truths[t]` for each forecast step. SSIM is
    /// skipped (NaN) for frames smaller than the window.
    pub fn compute(preds: &[Tensor], truths: &[Tensor], thresholds: &[f64]) -> Result<Self> {
        if preds.len() != truths.len() || preds.is_empty() {
            return Err(Error::Contract(format!(
                "{} predictions for {} targets",
                preds.len(),
                truths.len()
            )));
        }
        let params = SsimParams::default();
        let mut r = MetricReport {
            mse: Vec::new(),
            psnr: Vec::new(),
            ssim: Vec::new(),
            csi_thresholds: thresholds.to_vec(),
            csi: vec![Vec::new(); thresholds.len()],
        };
        for (p, t) in preds.iter().zip(truths) {
            let m = frame_mse(p, t)?;
            r.mse.push(m);
            r.psnr.push(psnr_from_mse(m, 1.0, PSNR_CAP));
            let [_, _, h, w] = p.nchw()?;
            r.ssim.push(if h >= params.window && w >= params.window {
                ssim(p, t, &params)?
            } else {
                f64::NAN
            });
            for (i, &th) in thresholds.iter().enumerate() {
                r.csi[i].push(csi(p, t, th)?);
            }
        }
        Ok(r)
    }

    pub fn horizon(&self) -> usize {
        self.mse.len()
    }

    pub fn mean_mse(&self) -> f64 {
        mean(&self.mse)
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(&self.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(&self.ssim)
    }

    pub fn mean_csi(&self) -> Vec<f64> {
        self.csi.iter().map(|c| mean(c)).collect()
    }

    /// `t,mse,psnr,ssim,csi@<th>...`, one row per forecast step; `t` counts
    /// from 1.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,mse,psnr,ssim");
        for th in &self.csi_thresholds {
            let _ = write!(s, ",csi@{th}");
        }
        s.push('\n');
        for t in 0..self.horizon() {
            let _ = write!(s, "{},{},{},{}", t + 1, self.mse[t], self.psnr[t], self.ssim[t]);
            for c in &self.csi {
                let _ = write!(s, ",{}", c[t]);
            }
            s.push('\n');
        }
        s
    }
}
