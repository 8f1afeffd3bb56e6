//! Structural similarity and the best-match sample quality score.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CganError, Result};
use crate::fsio;
use crate::tensor::Tensor;

/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub window_stddev: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            window_stddev: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(CganError::Argument(format!(
                "SSIM window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.window_stddev > 0.0 && self.dynamic_range > 0.0) {
            return Err(CganError::Argument(
                "SSIM k1, k2, window_stddev and dynamic_range must be > 0".into(),
            ));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn kernel(&self) -> Vec<f64> {
        let c = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - c;
                (-d * d / (2.0 * self.window_stddev * self.window_stddev)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }

    fn constants(&self) -> (f64, f64) {
        let c1 = (self.k1 * self.dynamic_range).powi(2);
        let c2 = (self.k2 * self.dynamic_range).powi(2);
        (c1, c2)
    }
}

/// A single-channel plane, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Reduces a `[C, H, W]` image (C = 1 or 3) to luminance.
pub fn luminance(image: &Tensor) -> Result<Plane> {
    let shape = image.shape();
    if shape.len() != 3 || !(shape[0] == 1 || shape[0] == 3) {
        return Err(CganError::Dimension(format!(
            "expected a [1|3, H, W] image, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let plane = h * w;
    let d = image.data();
    let data = if c == 1 {
        d.to_vec()
    } else {
        (0..plane)
            .map(|i| LUMA[0] * d[i] + LUMA[1] * d[plane + i] + LUMA[2] * d[2 * plane + i])
            .collect()
    };
    Ok(Plane { height: h, width: w, data })
}

/// Valid-region separable filtering.
fn filter(data: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &data[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (t, &kv) in k.iter().enumerate() {
            let src = &rows[(y + t) * ow..(y + t + 1) * ow];
            for (o, s) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *o += kv * s;
            }
        }
    }
    out
}

/// Per-image window statistics, reusable across many comparisons.
#[derive(Clone, Debug)]
pub struct SsimStats {
    plane: Plane,
    mean: Vec<f64>,
    mean_sq: Vec<f64>,
}

impl SsimStats {
    pub fn new(image: &Tensor, p: &SsimParams) -> Result<Self> {
        p.validate()?;
        let plane = luminance(image)?;
        if plane.height < p.window || plane.width < p.window {
            return Err(CganError::Argument(format!(
                "image {}x{} is smaller than the {}x{} SSIM window",
                plane.height, plane.width, p.window, p.window
            )));
        }
        let k = p.kernel();
        let mean = filter(&plane.data, plane.height, plane.width, &k);
        let sq: Vec<f64> = plane.data.iter().map(|v| v * v).collect();
        let mean_sq = filter(&sq, plane.height, plane.width, &k);
        Ok(SsimStats { plane, mean, mean_sq })
    }
}

/// SSIM between two precomputed images.
pub fn ssim_stats(a: &SsimStats, b: &SsimStats, p: &SsimParams) -> Result<f64> {
    if (a.plane.height, a.plane.width) != (b.plane.height, b.plane.width) {
        return Err(CganError::Dimension(format!(
            "SSIM of {}x{} and {}x{} images",
            a.plane.height, a.plane.width, b.plane.height, b.plane.width
        )));
    }
    let (h, w) = (a.plane.height, a.plane.width);
    let prod: Vec<f64> = a.plane.data.iter().zip(&b.plane.data).map(|(x, y)| x * y).collect();
    let cross = filter(&prod, h, w, &p.kernel());
    let (c1, c2) = p.constants();
    let mut total = 0.0;
    for (i, &ab) in cross.iter().enumerate() {
        let (ma, mb) = (a.mean[i], b.mean[i]);
        let va = a.mean_sq[i] - ma * ma;
        let vb = b.mean_sq[i] - mb * mb;
        let cov = ab - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / cross.len() as f64)
}

/// Mean SSIM of two `[1|3, H, W]` images over every valid window position.
pub fn ssim(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(CganError::Dimension(format!(
            "SSIM needs identical shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    ssim_stats(&SsimStats::new(a, p)?, &SsimStats::new(b, p)?, p)
}

/// Best match of one test image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemMatch {
    pub best_index: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QReport {
    pub q: f64,
    /// Sample standard deviation of the per-item scores across test items.
    pub std_across_test_items: f64,
    pub samples: usize,
    pub tests: usize,
    pub params: SsimParams,
    pub items: Vec<ItemMatch>,
}

impl QReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CganError::Parse {
            path: "<q report>".into(),
            message: e.to_string(),
        })
    }

    /// One row per test item: index, best sample, score.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| CganError::Argument(format!("csv: {e}"));
        w.write_record(["test_index", "best_sample", "ssim"]).map_err(err)?;
        for (i, m) in self.items.iter().enumerate() {
            w.write_record([i.to_string(), m.best_index.to_string(), format!("{:.6}", m.score)])
                .map_err(err)?;
        }
        w.flush().map_err(|e| CganError::io("<csv>", e))?;
        w.into_inner().map_err(|e| CganError::Argument(format!("csv: {e}")))
    }

    pub fn write(&self, path: &Path, csv_path: Option<&Path>) -> Result<()> {
        let mut text = self.to_json().into_bytes();
        text.write_all(b"\n").map_err(|e| CganError::io(path, e))?;
        fsio::write_atomic(path, &text)?;
        if let Some(c) = csv_path {
            fsio::write_atomic(c, &self.to_csv()?)?;
        }
        Ok(())
    }
}

/// `Q = (1/N) Σ_i max_s ssim(s, x_i)` over a sample set and a test set, both
/// `[count, C, H, W]`. Ties keep the lowest sample index.
pub fn q_metric(samples: &Tensor, test: &Tensor, p: &SsimParams) -> Result<QReport> {
    if samples.shape().len() != 4 || test.shape().len() != 4 {
        return Err(CganError::Dimension("samples and test sets must be [count, C, H, W]".into()));
    }
    if samples.batch() == 0 || test.batch() == 0 {
        return Err(CganError::Argument("Q needs at least one sample and one test image".into()));
    }
    if samples.shape()[1..] != test.shape()[1..] {
        return Err(CganError::Dimension(format!(
            "samples {:?} and test images {:?} differ in shape",
            samples.shape(),
            test.shape()
        )));
    }
    let stats = |set: &Tensor| -> Result<Vec<SsimStats>> {
        set.unstack().par_iter().map(|t| SsimStats::new(t, p)).collect()
    };
    let s_stats = stats(samples)?;
    let t_stats = stats(test)?;
    let items = t_stats
        .par_iter()
        .map(|t| {
            let mut best = ItemMatch {
                best_index: 0,
                score: f64::NEG_INFINITY,
            };
            for (j, s) in s_stats.iter().enumerate() {
                let v = ssim_stats(s, t, p)?;
                if v > best.score {
                    best = ItemMatch { best_index: j, score: v };
                }
            }
            Ok(best)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = items.len() as f64;
    let q = items.iter().map(|m| m.score).sum::<f64>() / n;
    let std = if items.len() > 1 {
        (items.iter().map(|m| (m.score - q).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(QReport {
        q,
        std_across_test_items: std,
        samples: samples.batch(),
        tests: test.batch(),
        params: *p,
        items,
    })
}
