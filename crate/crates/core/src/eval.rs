//! Quality metrics and the two benchmark curves.
//!
//! `rmse_curve` reports prediction error over ascending prefixes of an
//! ordering (the uncertainty-quantification curve); `capacity_distortion`
//! embeds seeded random messages at a sweep of rates and records the PSNR
//! cost (the capacity-distortion curve). Both are emitted as CSV with floats
//! printed to six significant digits.

use crate::bayes::{embedding_order, UncertaintyScore};
use crate::error::{Error, Result};
use crate::grid::{Partition, PixelGrid};
use crate::pipeline::{EmbedContext, StegoKey};
use crate::predictor::DualHeadedModel;
use crate::rng::Rng;

/// Peak signal-to-noise ratio in dB; identical images report infinity.
pub fn psnr(a: &PixelGrid, b: &PixelGrid) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let mut sum = 0.0f64;
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let d = x as f64 - y as f64;
        sum += d * d;
    }
    let mse = sum / a.pixel_count() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn gaussian_kernel() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut kernel = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let centre = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for r in 0..SSIM_WINDOW {
        for c in 0..SSIM_WINDOW {
            let dr = r as f64 - centre;
            let dc = c as f64 - centre;
            let v = (-(dr * dr + dc * dc) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            kernel[r * SSIM_WINDOW + c] = v;
            sum += v;
        }
    }
    for v in &mut kernel {
        *v /= sum;
    }
    kernel
}

/// Mean structural similarity over all fully interior 11x11 Gaussian windows
/// (sigma 1.5, the canonical parameterisation).
pub fn ssim(a: &PixelGrid, b: &PixelGrid) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    if (a.width() as usize) < SSIM_WINDOW || (a.height() as usize) < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            width: a.width(),
            height: a.height(),
            margin: SSIM_WINDOW as u32,
        });
    }
    let kernel = gaussian_kernel();
    let width = a.width() as usize;
    let height = a.height() as usize;
    let va = a.values();
    let vb = b.values();
    let mut total = 0.0f64;
    let mut windows = 0usize;
    for top in 0..=height - SSIM_WINDOW {
        for left in 0..=width - SSIM_WINDOW {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in 0..SSIM_WINDOW {
                let row = (top + r) * width + left;
                for c in 0..SSIM_WINDOW {
                    let w = kernel[r * SSIM_WINDOW + c];
                    let x = va[row + c] as f64;
                    let y = vb[row + c] as f64;
                    mx += w * x;
                    my += w * y;
                    sxx += w * x * x;
                    syy += w * y * y;
                    sxy += w * x * y;
                }
            }
            let var_x = sxx - mx * mx;
            let var_y = syy - my * my;
            let cov = sxy - mx * my;
            let value = ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (var_x + var_y + SSIM_C2));
            total += value;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// Prefix RMSE along an ordering. For each fraction `p` in `fractions` the
/// error is taken over the first `ceil(p * n)` pixels; an empty prefix
/// reports zero.
pub fn rmse_curve(
    actual: &[u8],
    predicted: &[u8],
    ordering: &[usize],
    fractions: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let n = actual.len();
    if predicted.len() != n || ordering.len() != n {
        return Err(Error::ShapeError(format!(
            "actual {}, predicted {}, ordering {} must agree",
            n,
            predicted.len(),
            ordering.len()
        )));
    }
    let mut seen = vec![false; n];
    for &idx in ordering {
        if idx >= n || seen[idx] {
            return Err(Error::ShapeError("ordering is not a permutation".into()));
        }
        seen[idx] = true;
    }
    // Prefix sums of squared errors along the ordering.
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0f64);
    for &idx in ordering {
        let d = actual[idx] as f64 - predicted[idx] as f64;
        prefix.push(prefix.last().unwrap() + d * d);
    }
    Ok(fractions
        .iter()
        .map(|&p| {
            let k = ((p * n as f64).ceil() as usize).min(n);
            let rmse = if k == 0 { 0.0 } else { (prefix[k] / k as f64).sqrt() };
            (p, rmse)
        })
        .collect())
}

/// Ascending |residual| with raster tie-break: the best possible ordering for
/// prefix RMSE, used as the benchmark bound.
pub fn oracle_order(residuals: &[i32]) -> Result<Vec<usize>> {
    let magnitudes: Vec<f64> = residuals.iter().map(|&r| r.abs() as f64).collect();
    embedding_order(&magnitudes)
}

/// Seeded random permutation of `0..n`, the benchmark baseline.
pub fn random_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    #[allow(clippy::unusual_byte_groupings)]
    let mut rng = Rng::derive(seed, 0x4F52_4445_52);
    rng.shuffle(&mut order);
    order
}

/// How query pixels are walked during an evaluation embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderingKind {
    Uncertainty(UncertaintyScore),
    Random,
    Oracle,
}

impl std::fmt::Display for OrderingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OrderingKind::Uncertainty(score) => score.fmt(f),
            OrderingKind::Random => f.write_str("random"),
            OrderingKind::Oracle => f.write_str("oracle"),
        }
    }
}

/// One point of the capacity-distortion sweep. `psnr_db` is `None` when the
/// rate was not realisable on this image.
#[derive(Debug, Clone, PartialEq)]
pub struct RatePoint {
    pub bpp: f64,
    pub psnr_db: Option<f64>,
    pub pixels_modulated: Option<usize>,
}

/// Embeds a seeded random message of `ceil(rate * pixels)` bits at each rate
/// and reports the stego PSNR. Message and permutation seeds are derived per
/// point, so a sweep is deterministic for a given `seed`.
pub fn capacity_distortion(
    cover: &PixelGrid,
    key: &StegoKey,
    model: &DualHeadedModel,
    rates: &[f64],
    ordering: OrderingKind,
    seed: u64,
) -> Result<Vec<RatePoint>> {
    let ctx = EmbedContext::new(cover, key, model)?;
    capacity_distortion_in(&ctx, cover, rates, ordering, seed)
}

/// As [`capacity_distortion`] but over a precomputed context, so sweeps with
/// several orderings can share one sampling pass.
pub fn capacity_distortion_in(
    ctx: &EmbedContext,
    cover: &PixelGrid,
    rates: &[f64],
    ordering: OrderingKind,
    seed: u64,
) -> Result<Vec<RatePoint>> {
    let n_query = ctx.partition.query_positions.len();
    let mut points = Vec::with_capacity(rates.len());
    for (i, &rate) in rates.iter().enumerate() {
        if !(0.0..=8.0).contains(&rate) {
            return Err(Error::ConfigError(format!("rate {rate} bpp out of range")));
        }
        let message_len = (rate * cover.pixel_count() as f64).ceil() as usize;
        let mut message_rng = Rng::derive(seed, 2 * i as u64);
        let message: Vec<bool> = (0..message_len).map(|_| message_rng.next_bit()).collect();
        let order = match ordering {
            OrderingKind::Uncertainty(score) => embedding_order(ctx.map.scores(score))?,
            OrderingKind::Random => random_order(n_query, seed ^ (2 * i as u64 + 1)),
            OrderingKind::Oracle => oracle_order(&ctx.residuals())?,
        };
        match ctx.embed_along(&message, &order) {
            Ok((stego, modulated, _)) => points.push(RatePoint {
                bpp: rate,
                psnr_db: Some(psnr(cover, &stego)?),
                pixels_modulated: Some(modulated),
            }),
            Err(Error::CapacityExceeded { .. }) => points.push(RatePoint {
                bpp: rate,
                psnr_db: None,
                pixels_modulated: None,
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(points)
}

/// Min-max normalises per-query-pixel values into `[0, 255]` and paints them
/// at their query positions; context and border stay black. Degenerate
/// all-equal maps come out all-zero.
pub fn export_uncertainty_image(
    values: &[f64],
    partition: &Partition,
    width: u32,
    height: u32,
) -> Result<PixelGrid> {
    if values.len() != partition.query_positions.len() {
        return Err(Error::ShapeError(format!(
            "{} values for {} query positions",
            values.len(),
            partition.query_positions.len()
        )));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NumericalError(format!("map value {bad} not finite")));
    }
    let mut out = PixelGrid::constant(width, height, 0)?;
    if values.is_empty() {
        return Ok(out);
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    for (&(row, col), &v) in partition.query_positions.iter().zip(values) {
        let level = if span > 0.0 {
            ((v - min) / span * 255.0).round() as u8
        } else {
            0
        };
        out.set(row, col, level);
    }
    Ok(out)
}

/// Six significant digits, plain decimal notation.
pub fn format_sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let exponent = x.abs().log10().floor() as i32;
    let decimals = (5 - exponent).max(0) as usize;
    format!("{x:.decimals$}")
}

/// CSV for the prefix-RMSE curve: `percent,rmse,ordering`.
pub fn rmse_csv(rows: &[(f64, f64, String)]) -> String {
    let mut out = String::from("percent,rmse,ordering\n");
    for (percent, rmse, ordering) in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            format_sig6(*percent),
            format_sig6(*rmse),
            ordering
        ));
    }
    out
}

/// CSV for the capacity-distortion curve: `bpp,psnr_db,ordering,seed`.
/// Unreachable rates print `nan`.
pub fn capacity_csv(rows: &[(f64, Option<f64>, String, u64)]) -> String {
    let mut out = String::from("bpp,psnr_db,ordering,seed\n");
    for (bpp, psnr_db, ordering, seed) in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            format_sig6(*bpp),
            psnr_db.map_or_else(|| "nan".into(), format_sig6),
            ordering,
            seed
        ));
    }
    out
}
