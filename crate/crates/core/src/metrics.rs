//! PSNR and SSIM, scored per frame and averaged.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::tensor::Tensor;

/// Reported PSNR for identical inputs.
pub const PSNR_CAP_DB: f64 = 100.0;

/// `10 log10(1 / MSE)` for signals with unit peak, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_dims(b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean of per-frame PSNR over a `[B, H, W]` cube.
pub fn psnr_cube(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(mean(&per_frame(a, b, psnr)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
        }
    }
}

/// Mean SSIM of two `[H, W]` frames over every full window position, with
/// default parameters.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

pub fn ssim_with(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<f64> {
    a.expect_same_dims(b)?;
    if a.rank() != 2 {
        return Err(Error::shape(format!("ssim expects [H, W], got {:?}", a.dims())));
    }
    let (h, w) = (a.dims()[0], a.dims()[1]);
    if h < p.window || w < p.window || p.window == 0 {
        return Err(Error::contract(format!(
            "frame {h}x{w} is smaller than the {0}x{0} SSIM window",
            p.window
        )));
    }
    let g = gaussian(p.window, p.sigma);
    let blur = |img: &[f64]| filter_valid(img, h, w, &g);
    let (da, db) = (a.data(), b.data());
    let aa: Vec<f64> = da.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = db.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = da.iter().zip(db).map(|(x, y)| x * y).collect();
    let (mu_a, mu_b) = (blur(da), blur(db));
    let (e_aa, e_bb, e_ab) = (blur(&aa), blur(&bb), blur(&ab));

    let c1 = (p.k1 * p.range).powi(2);
    let c2 = (p.k2 * p.range).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

/// Mean of per-frame SSIM over a `[B, H, W]` cube.
pub fn ssim_cube(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(mean(&per_frame(a, b, ssim)?))
}

fn gaussian(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

// Separable filtering keeping only positions where the window fits.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|t| g[t] * img[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|t| g[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

fn per_frame(a: &Tensor, b: &Tensor, f: fn(&Tensor, &Tensor) -> Result<f64>) -> Result<Vec<f64>> {
    a.expect_same_dims(b)?;
    if a.rank() != 3 {
        return Err(Error::shape(format!("expected [B, H, W], got {:?}", a.dims())));
    }
    (0..a.dims()[0]).map(|i| f(&a.frame(i), &b.frame(i))).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// One CSV row. Scores are empty when no ground truth was available.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scene: String,
    pub frame_index: usize,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub solver: String,
    pub seconds: f64,
}

/// Per-frame scores of one or more reconstructions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    /// Scores every frame of `recon` against `truth`. `seconds` is the
    /// wall-clock time of the whole reconstruction, repeated on each row.
    pub fn evaluate(scene: &str, solver: &str, recon: &Tensor, truth: &Tensor, seconds: f64) -> Result<Self> {
        let p = per_frame(recon, truth, psnr)?;
        let s = per_frame(recon, truth, ssim)?;
        let rows = p
            .into_iter()
            .zip(s)
            .enumerate()
            .map(|(i, (psnr_db, ssim))| MetricRow {
                scene: scene.to_string(),
                frame_index: i,
                psnr_db: Some(psnr_db),
                ssim: Some(ssim),
                solver: solver.to_string(),
                seconds,
            })
            .collect();
        Ok(Self { rows })
    }

    /// Rows carrying only the run time, one per reconstructed frame.
    pub fn timing(scene: &str, solver: &str, frames: usize, seconds: f64) -> Self {
        let rows = (0..frames)
            .map(|i| MetricRow {
                scene: scene.to_string(),
                frame_index: i,
                psnr_db: None,
                ssim: None,
                solver: solver.to_string(),
                seconds,
            })
            .collect();
        Self { rows }
    }

    pub fn extend(&mut self, other: MetricReport) {
        self.rows.extend(other.rows);
    }

    /// Mean over the scored rows; NaN when none are scored.
    pub fn mean_psnr(&self) -> f64 {
        mean(&self.rows.iter().filter_map(|r| r.psnr_db).collect::<Vec<_>>())
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(&self.rows.iter().filter_map(|r| r.ssim).collect::<Vec<_>>())
    }

    /// Human-readable averages per (scene, solver) and overall.
    pub fn summary(&self) -> String {
        let mut groups: Vec<(String, String, Vec<&MetricRow>)> = Vec::new();
        for r in &self.rows {
            match groups.iter_mut().find(|(s, v, _)| *s == r.scene && *v == r.solver) {
                Some(g) => g.2.push(r),
                None => groups.push((r.scene.clone(), r.solver.clone(), vec![r])),
            }
        }
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:<8} {:>6} {:>10} {:>8} {:>9}", "scene", "solver", "frames", "psnr_db", "ssim", "seconds");
        for (scene, solver, rows) in &groups {
            let psnr = mean(&rows.iter().filter_map(|r| r.psnr_db).collect::<Vec<_>>());
            let ssim = mean(&rows.iter().filter_map(|r| r.ssim).collect::<Vec<_>>());
            let _ = writeln!(
                out,
                "{:<16} {:<8} {:>6} {:>10.4} {:>8.4} {:>9.3}",
                scene,
                solver,
                rows.len(),
                psnr,
                ssim,
                rows[0].seconds
            );
        }
        let _ = writeln!(
            out,
            "{:<16} {:<8} {:>6} {:>10.4} {:>8.4}",
            "average",
            "",
            self.rows.len(),
            self.mean_psnr(),
            self.mean_ssim()
        );
        out
    }

    pub const COLUMNS: [&'static str; 6] = ["scene", "frame_index", "psnr_db", "ssim", "solver", "seconds"];

    /// CSV with a header row even when there are no rows.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(Self::COLUMNS)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.into_inner()
            .map_err(|e| Error::contract(format!("csv buffer: {e}")))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_csv()?)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>()?;
        Ok(Self { rows })
    }
}
