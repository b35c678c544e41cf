//! End-to-end embedding and extraction.
//!
//! Encoder and decoder share a [`StegoKey`]; everything the decoder needs to
//! reproduce the embedding pathway (model identity, sampling seed, pass
//! count, partition geometry, score choice) lives in it. Extraction repeats
//! the preliminary phase on the stego image — context pixels are never
//! modified, so predictions, uncertainty maps and the pixel walk come out
//! identical — then demodulates residuals along the walk until the payload
//! frame is complete.

use crate::bayes::{
    mc_sample, predicted_intensity, UncertaintyMap, UncertaintyScore,
};
use crate::codec::{
    build_frame, demodulate_residual, frame_len_from_header, modulate_residual, parse_frame,
    preprocess_range, postprocess_range, BitSource, FRAME_HEADER_BITS,
};
use crate::error::{Error, Result};
use crate::eval::psnr;
use crate::grid::{chequerboard_partition, Partition, PixelGrid, Polarity};
use crate::predictor::{content_hash, save_model, DualHeadedModel};

/// Bumped whenever the walk, codec or sampling contract changes in a way
/// that breaks decoding of previously embedded images.
pub const FORMAT_VERSION: u32 = 1;

/// Everything the decoder needs to reproduce the encoder's predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StegoKey {
    /// SHA-256 of the serialised model file, hex.
    pub model_hash: String,
    pub seed: u64,
    pub t_count: usize,
    pub polarity: Polarity,
    pub window_radius: u32,
    pub border_margin: u32,
    pub score: UncertaintyScore,
}

impl StegoKey {
    /// Defaults for everything but the model binding: hybrid score, radius-2
    /// window, even context parity.
    pub fn new(seed: u64, t_count: usize) -> Self {
        StegoKey {
            model_hash: String::new(),
            seed,
            t_count,
            polarity: Polarity::Even,
            window_radius: 2,
            border_margin: 2,
            score: UncertaintyScore::Hybrid,
        }
    }

    /// Binds the key to a model by content hash.
    pub fn bind_model(mut self, model: &DualHeadedModel) -> Self {
        self.model_hash = model_hash(model);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_count < 2 {
            return Err(Error::KeyError("t must be at least 2".into()));
        }
        if self.window_radius == 0 {
            return Err(Error::KeyError("window radius must be positive".into()));
        }
        if self.border_margin < self.window_radius {
            return Err(Error::KeyError(format!(
                "border margin {} smaller than window radius {}",
                self.border_margin, self.window_radius
            )));
        }
        if !self.model_hash.is_empty()
            && (self.model_hash.len() != 64
                || !self.model_hash.chars().all(|c| c.is_ascii_hexdigit()))
        {
            return Err(Error::KeyError("model hash must be 64 hex characters".into()));
        }
        Ok(())
    }

    /// Serialises as `key=value` lines in fixed order.
    pub fn to_key_file(&self) -> String {
        format!(
            "version={}\nmodel_hash={}\nseed={}\nt={}\npolarity={}\nwindow_radius={}\nborder_margin={}\nscore={}\n",
            FORMAT_VERSION,
            self.model_hash,
            self.seed,
            self.t_count,
            self.polarity,
            self.window_radius,
            self.border_margin,
            self.score
        )
    }

    /// Parses a key file. `seed` is required; `t` defaults to 64 and the
    /// other fields to the [`StegoKey::new`] defaults. `model_hash` may be
    /// omitted and bound later.
    pub fn from_key_file(text: &str) -> Result<StegoKey> {
        let mut key = StegoKey::new(0, 64);
        let mut seen_seed = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, value) = line.split_once('=').ok_or_else(|| {
                Error::KeyError(format!("line {}: expected key=value", lineno + 1))
            })?;
            let (name, value) = (name.trim(), value.trim());
            let parse_err =
                |what: &str| Error::KeyError(format!("line {}: bad {what} '{value}'", lineno + 1));
            match name {
                "version" => {
                    let v: u32 = value.parse().map_err(|_| parse_err("version"))?;
                    if v != FORMAT_VERSION {
                        return Err(Error::KeyError(format!(
                            "key version {v} does not match implementation version {FORMAT_VERSION}"
                        )));
                    }
                }
                "model_hash" => key.model_hash = value.to_string(),
                "seed" => {
                    key.seed = value.parse().map_err(|_| parse_err("seed"))?;
                    seen_seed = true;
                }
                "t" => key.t_count = value.parse().map_err(|_| parse_err("t"))?,
                "polarity" => key.polarity = value.parse()?,
                "window_radius" => {
                    key.window_radius = value.parse().map_err(|_| parse_err("window_radius"))?
                }
                "border_margin" => {
                    key.border_margin = value.parse().map_err(|_| parse_err("border_margin"))?
                }
                "score" => key.score = value.parse()?,
                other => {
                    return Err(Error::KeyError(format!(
                        "line {}: unknown field '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        if !seen_seed {
            return Err(Error::KeyError("key file must set seed".into()));
        }
        key.validate()?;
        Ok(key)
    }
}

/// Content hash binding a key to a model.
pub fn model_hash(model: &DualHeadedModel) -> String {
    content_hash(&save_model(model))
}

fn verify_key(key: &StegoKey, model: &DualHeadedModel) -> Result<()> {
    key.validate()?;
    let actual = model_hash(model);
    if key.model_hash != actual {
        return Err(Error::KeyError(format!(
            "model hash mismatch: key has {}, model is {}",
            if key.model_hash.is_empty() { "<unset>" } else { &key.model_hash },
            actual
        )));
    }
    Ok(())
}

/// Precomputed prediction state shared by embedding, capacity estimation and
/// the evaluation sweeps: partition, range-preprocessed grid, location map,
/// integer predictions and the uncertainty map.
#[derive(Debug, Clone)]
pub struct EmbedContext {
    pub partition: Partition,
    pub pre_grid: PixelGrid,
    pub location_map: Vec<bool>,
    pub predicted: Vec<u8>,
    pub map: UncertaintyMap,
}

impl EmbedContext {
    pub fn new(cover: &PixelGrid, key: &StegoKey, model: &DualHeadedModel) -> Result<Self> {
        verify_key(key, model)?;
        let partition = chequerboard_partition(cover, key.polarity, key.border_margin)?;
        let (pre_grid, location_map, _) = preprocess_range(cover, &partition);
        let samples = mc_sample(
            model,
            &pre_grid,
            &partition,
            key.window_radius,
            key.t_count,
            key.seed,
        )?;
        let predicted = predicted_intensity(&samples);
        let map = UncertaintyMap::build(&samples, key.score)?;
        Ok(EmbedContext { partition, pre_grid, location_map, predicted, map })
    }

    /// True residuals of the preprocessed cover along the query set.
    pub fn residuals(&self) -> Vec<i32> {
        self.partition
            .query_positions
            .iter()
            .zip(&self.predicted)
            .map(|(&(r, c), &p)| self.pre_grid.get(r, c) as i32 - p as i32)
            .collect()
    }

    /// `(guaranteed_bits, expected_bits)` of this context's residuals.
    pub fn capacity(&self) -> (usize, f64) {
        residual_capacity(&self.residuals())
    }

    /// Modulates the payload frame into the query pixels along `order`.
    /// Returns the stego grid, the number of modulated pixels and the frame
    /// bit length. Fails (without truncating) when the walk exhausts the
    /// query set before the frame is consumed.
    pub fn embed_along(
        &self,
        message: &[bool],
        order: &[usize],
    ) -> Result<(PixelGrid, usize, usize)> {
        if order.len() != self.partition.query_positions.len() {
            return Err(Error::ShapeError("order must cover the whole query set".into()));
        }
        let frame = build_frame(message, &self.location_map)?;
        let mut stego = self.pre_grid.clone();
        let mut source = BitSource::new(&frame);
        let mut modulated = 0usize;
        for &qi in order {
            if source.position() >= frame.len() {
                break;
            }
            let (row, col) = self.partition.query_positions[qi];
            let residual = self.pre_grid.get(row, col) as i32 - self.predicted[qi] as i32;
            let (shifted, _) = modulate_residual(residual, &mut source);
            let value = self.predicted[qi] as i32 + shifted;
            debug_assert!((0..=255).contains(&value));
            stego.set(row, col, value as u8);
            modulated += 1;
        }
        if source.position() < frame.len() {
            return Err(Error::CapacityExceeded {
                needed: frame.len(),
                available: source.position(),
            });
        }
        Ok((stego, modulated, frame.len()))
    }
}

/// Capacity of a residual population: every carrier (|residual| <= 2) yields
/// at least one bit; zero residuals average 1.5 bits on random payloads,
/// |1| and |2| exactly one.
pub fn residual_capacity(residuals: &[i32]) -> (usize, f64) {
    let mut guaranteed = 0usize;
    let mut expected = 0.0f64;
    for eps in residuals {
        match eps.abs() {
            0 => {
                guaranteed += 1;
                expected += 1.5;
            }
            1 | 2 => {
                guaranteed += 1;
                expected += 1.0;
            }
            _ => {}
        }
    }
    (guaranteed, expected)
}

/// Summary of one embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedReport {
    pub pixels_modulated: usize,
    pub frame_bits: usize,
    pub message_bits: usize,
    /// Message bits over total pixel count.
    pub bpp: f64,
    pub psnr_db: f64,
    pub format_version: u32,
}

/// Embeds `message` into `cover` along the key's ascending-uncertainty walk.
pub fn embed(
    cover: &PixelGrid,
    message: &[bool],
    key: &StegoKey,
    model: &DualHeadedModel,
) -> Result<(PixelGrid, EmbedReport)> {
    let ctx = EmbedContext::new(cover, key, model)?;
    let order = ctx.map.order.clone();
    let (stego, pixels_modulated, frame_bits) = ctx.embed_along(message, &order)?;
    let report = EmbedReport {
        pixels_modulated,
        frame_bits,
        message_bits: message.len(),
        bpp: message.len() as f64 / cover.pixel_count() as f64,
        psnr_db: psnr(cover, &stego)?,
        format_version: FORMAT_VERSION,
    };
    Ok((stego, report))
}

/// Recovers the exact cover and message from a stego image produced by
/// [`embed`] under the same key, model and implementation version.
pub fn extract(
    stego: &PixelGrid,
    key: &StegoKey,
    model: &DualHeadedModel,
) -> Result<(PixelGrid, Vec<bool>)> {
    verify_key(key, model)?;
    let partition = chequerboard_partition(stego, key.polarity, key.border_margin)?;
    let samples = mc_sample(
        model,
        stego,
        &partition,
        key.window_radius,
        key.t_count,
        key.seed,
    )?;
    let predicted = predicted_intensity(&samples);
    let map = UncertaintyMap::build(&samples, key.score)?;

    let mut bits: Vec<bool> = Vec::new();
    let mut recovered: Vec<Option<i32>> = vec![None; partition.query_positions.len()];
    let mut needed: Option<usize> = None;
    for &qi in &map.order {
        if let Some(n) = needed {
            if bits.len() >= n {
                break;
            }
        }
        let (row, col) = partition.query_positions[qi];
        let shifted = stego.get(row, col) as i32 - predicted[qi] as i32;
        let (residual, pixel_bits) = demodulate_residual(shifted);
        recovered[qi] = Some(residual);
        bits.extend(pixel_bits);
        if needed.is_none() && bits.len() >= FRAME_HEADER_BITS {
            needed = frame_len_from_header(&bits);
        }
    }
    let needed = needed.ok_or_else(|| {
        Error::FramingError(format!(
            "walk yielded only {} bits, not even a header",
            bits.len()
        ))
    })?;
    if bits.len() < needed {
        return Err(Error::FramingError(format!(
            "walk yielded {} bits of a declared {}-bit frame — wrong key, wrong model or corrupted image",
            bits.len(),
            needed
        )));
    }
    bits.truncate(needed);
    let (frame, _) = parse_frame(&bits)?;

    let mut restored = stego.clone();
    for (qi, residual) in recovered.iter().enumerate() {
        if let Some(eps) = residual {
            let (row, col) = partition.query_positions[qi];
            let value = predicted[qi] as i32 + eps;
            if !(0..=255).contains(&value) {
                return Err(Error::FramingError(format!(
                    "restored intensity {value} out of range at query index {qi}"
                )));
            }
            restored.set(row, col, value as u8);
        }
    }
    let cover = postprocess_range(&restored, &partition, &frame.location_map)?;
    Ok((cover, frame.message))
}

/// Capacity of a cover under a key and model without embedding anything.
pub fn capacity_estimate(
    cover: &PixelGrid,
    key: &StegoKey,
    model: &DualHeadedModel,
) -> Result<(usize, f64)> {
    Ok(EmbedContext::new(cover, key, model)?.capacity())
}
