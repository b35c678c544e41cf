//! Monte Carlo dropout sampling and uncertainty disentanglement.
//!
//! `mc_sample` runs T stochastic forward passes per query pixel, one dropout
//! mask per pass shared across the whole image. From the sample lists the
//! predictive uncertainty splits into an aleatoric part (mean of the
//! predicted variances) and an epistemic part (variance of the predicted
//! means); their sum-normalised combination is the hybrid score. Sorting
//! query pixels by ascending score yields the embedding pathway shared by
//! encoder and decoder.
//!
//! Reproducibility contract: masks are drawn in ascending pass order (then
//! layer, then unit) from the seeded generator, and per-pixel reductions sum
//! samples in ascending pass order. Parallelism across pixels keeps both.

use crate::error::{Error, Result};
use crate::grid::{context_window, Partition, PixelGrid};
use crate::predictor::{forward, DropoutMask, DualHeadedModel};
use crate::rng::Rng;
use rayon::prelude::*;

/// T stochastic forward-pass results per query pixel, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    t_count: usize,
    n_query: usize,
    /// `means[i * T .. (i + 1) * T]` are pixel i's sampled predictions.
    means: Vec<f64>,
    /// Same layout for the sampled observation-noise variances.
    variances: Vec<f64>,
}

impl PosteriorSamples {
    pub fn from_lists(t_count: usize, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if t_count < 2 {
            return Err(Error::ConfigError("need at least 2 samples".into()));
        }
        if means.len() != variances.len() || !means.len().is_multiple_of(t_count) {
            return Err(Error::ShapeError("sample lists must be pixel-major multiples of T".into()));
        }
        if variances.iter().any(|&v| v <= 0.0) {
            return Err(Error::DomainError("sampled variances must be positive".into()));
        }
        Ok(PosteriorSamples {
            t_count,
            n_query: means.len() / t_count,
            means,
            variances,
        })
    }

    pub fn t_count(&self) -> usize {
        self.t_count
    }

    pub fn n_query(&self) -> usize {
        self.n_query
    }

    pub fn means_for(&self, pixel: usize) -> &[f64] {
        &self.means[pixel * self.t_count..(pixel + 1) * self.t_count]
    }

    pub fn variances_for(&self, pixel: usize) -> &[f64] {
        &self.variances[pixel * self.t_count..(pixel + 1) * self.t_count]
    }
}

/// Which uncertainty score orders the embedding pathway.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UncertaintyScore {
    Aleatoric,
    Epistemic,
    Hybrid,
}

impl std::str::FromStr for UncertaintyScore {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aleatoric" => Ok(UncertaintyScore::Aleatoric),
            "epistemic" => Ok(UncertaintyScore::Epistemic),
            "hybrid" => Ok(UncertaintyScore::Hybrid),
            other => Err(Error::ConfigError(format!("unknown score '{other}'"))),
        }
    }
}

impl std::fmt::Display for UncertaintyScore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UncertaintyScore::Aleatoric => "aleatoric",
            UncertaintyScore::Epistemic => "epistemic",
            UncertaintyScore::Hybrid => "hybrid",
        })
    }
}

/// Per-query-pixel uncertainty scores plus the embedding permutation for the
/// selected score.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub aleatoric: Vec<f64>,
    pub epistemic: Vec<f64>,
    pub hybrid: Vec<f64>,
    pub order: Vec<usize>,
    pub score: UncertaintyScore,
}

impl UncertaintyMap {
    pub fn build(samples: &PosteriorSamples, score: UncertaintyScore) -> Result<Self> {
        let aleatoric = aleatoric(samples);
        let epistemic = epistemic(samples);
        let hybrid = hybrid(&aleatoric, &epistemic)?;
        let order = embedding_order_for(&aleatoric, &epistemic, &hybrid, score)?;
        Ok(UncertaintyMap { aleatoric, epistemic, hybrid, order, score })
    }

    pub fn scores(&self, score: UncertaintyScore) -> &[f64] {
        match score {
            UncertaintyScore::Aleatoric => &self.aleatoric,
            UncertaintyScore::Epistemic => &self.epistemic,
            UncertaintyScore::Hybrid => &self.hybrid,
        }
    }
}

/// Runs T stochastic passes over every query pixel. Fully deterministic for a
/// given `(model, grid, partition, radius, t_count, seed)`.
pub fn mc_sample(
    model: &DualHeadedModel,
    grid: &PixelGrid,
    partition: &Partition,
    radius: u32,
    t_count: usize,
    seed: u64,
) -> Result<PosteriorSamples> {
    if t_count < 2 {
        return Err(Error::ConfigError(format!(
            "T = {t_count} leaves the sample variance undefined"
        )));
    }
    if crate::grid::window_feature_count(radius) != model.input_dim() {
        return Err(Error::ShapeError(format!(
            "window radius {radius} yields {} features but the model expects {}",
            crate::grid::window_feature_count(radius),
            model.input_dim()
        )));
    }

    // Masks drawn up front in ascending pass order.
    let mut rng = Rng::seed_from(seed);
    let masks: Vec<DropoutMask> = (0..t_count)
        .map(|_| DropoutMask::draw(model.hidden_sizes(), model.dropout_rate(), &mut rng))
        .collect();

    let features: Vec<Vec<f64>> = partition
        .query_positions
        .iter()
        .map(|&pos| context_window(grid, pos, radius))
        .collect::<Result<_>>()?;

    let per_pixel: Vec<Result<(Vec<f64>, Vec<f64>)>> = features
        .par_iter()
        .map(|feats| {
            let mut means = Vec::with_capacity(t_count);
            let mut variances = Vec::with_capacity(t_count);
            for mask in &masks {
                let (yhat, sigma2) = forward(model, feats, Some(mask))?;
                means.push(yhat);
                variances.push(sigma2);
            }
            Ok((means, variances))
        })
        .collect();

    let mut means = Vec::with_capacity(features.len() * t_count);
    let mut variances = Vec::with_capacity(features.len() * t_count);
    for entry in per_pixel {
        let (m, v) = entry?;
        means.extend(m);
        variances.extend(v);
    }
    PosteriorSamples::from_lists(t_count, means, variances)
}

/// Mean of the sampled variances per pixel: noise inherent in the data.
pub fn aleatoric(samples: &PosteriorSamples) -> Vec<f64> {
    (0..samples.n_query())
        .map(|i| {
            let vs = samples.variances_for(i);
            vs.iter().sum::<f64>() / samples.t_count() as f64
        })
        .collect()
}

/// Population variance of the sampled means per pixel: disagreement between
/// model realisations. Clamped at zero against round-off.
pub fn epistemic(samples: &PosteriorSamples) -> Vec<f64> {
    let t = samples.t_count() as f64;
    (0..samples.n_query())
        .map(|i| {
            let ms = samples.means_for(i);
            let mean = ms.iter().sum::<f64>() / t;
            let mean_sq = ms.iter().map(|&m| m * m).sum::<f64>() / t;
            (mean_sq - mean * mean).max(0.0)
        })
        .collect()
}

/// Sum-normalised combination `a / sum(a) + e / sum(e)`. A component with a
/// zero (degenerate) sum contributes nothing.
pub fn hybrid(aleatoric: &[f64], epistemic: &[f64]) -> Result<Vec<f64>> {
    if aleatoric.len() != epistemic.len() {
        return Err(Error::ShapeError("uncertainty maps cover different query sets".into()));
    }
    let sum_a: f64 = aleatoric.iter().sum();
    let sum_e: f64 = epistemic.iter().sum();
    Ok(aleatoric
        .iter()
        .zip(epistemic)
        .map(|(&a, &e)| {
            let na = if sum_a > 0.0 { a / sum_a } else { 0.0 };
            let ne = if sum_e > 0.0 { e / sum_e } else { 0.0 };
            na + ne
        })
        .collect())
}

/// Integer prediction shared by encoder and decoder: the MC mean scaled to
/// intensity units, rounded half away from zero, clamped to `[0, 255]`.
pub fn predicted_intensity(samples: &PosteriorSamples) -> Vec<u8> {
    let t = samples.t_count() as f64;
    (0..samples.n_query())
        .map(|i| {
            let mean = samples.means_for(i).iter().sum::<f64>() / t;
            (255.0 * mean).round().clamp(0.0, 255.0) as u8
        })
        .collect()
}

/// Ascending stable sort of query indices by score, ties broken by ascending
/// raster (query) index.
pub fn embedding_order(scores: &[f64]) -> Result<Vec<usize>> {
    if let Some(bad) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NumericalError(format!(
            "score at query index {bad} is not finite"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("scores checked finite")
            .then(a.cmp(&b))
    });
    Ok(order)
}

fn embedding_order_for(
    aleatoric: &[f64],
    epistemic: &[f64],
    hybrid: &[f64],
    score: UncertaintyScore,
) -> Result<Vec<usize>> {
    embedding_order(match score {
        UncertaintyScore::Aleatoric => aleatoric,
        UncertaintyScore::Epistemic => epistemic,
        UncertaintyScore::Hybrid => hybrid,
    })
}
