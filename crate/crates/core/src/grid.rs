//! Greyscale raster, binary PGM I/O, chequerboard partitioning and
//! context-window feature extraction.
//!
//! Pixels split into a context set (read-only inputs to prediction) and a
//! query set (payload carriers) by the parity of `row + col`. Query pixels
//! within `border_margin` of an edge are excluded so every prediction window
//! stays inside the image.

use crate::error::{Error, Result};

/// 8-bit greyscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelGrid {
    width: u32,
    height: u32,
    values: Vec<u8>,
}

impl PixelGrid {
    pub fn new(width: u32, height: u32, values: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimensions);
        }
        let expected = width as usize * height as usize;
        if values.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} grid needs {} values, got {}",
                width,
                height,
                expected,
                values.len()
            )));
        }
        Ok(PixelGrid { width, height, values })
    }

    /// Grid filled with a single intensity.
    pub fn constant(width: u32, height: u32, value: u8) -> Result<Self> {
        PixelGrid::new(width, height, vec![value; width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, row: u32, col: u32) -> u8 {
        debug_assert!(row < self.height && col < self.width);
        self.values[row as usize * self.width as usize + col as usize]
    }

    pub fn set(&mut self, row: u32, col: u32, value: u8) {
        debug_assert!(row < self.height && col < self.width);
        self.values[row as usize * self.width as usize + col as usize] = value;
    }

    pub fn pixel_count(&self) -> usize {
        self.values.len()
    }
}

/// Parity of `row + col` that designates CONTEXT cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Even,
    Odd,
}

impl Polarity {
    fn matches(self, row: u32, col: u32) -> bool {
        let even = (row + col).is_multiple_of(2);
        match self {
            Polarity::Even => even,
            Polarity::Odd => !even,
        }
    }
}

impl std::str::FromStr for Polarity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "even" => Ok(Polarity::Even),
            "odd" => Ok(Polarity::Odd),
            other => Err(Error::ConfigError(format!("unknown polarity '{other}'"))),
        }
    }
}

impl std::fmt::Display for Polarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Polarity::Even => "even",
            Polarity::Odd => "odd",
        })
    }
}

/// Chequerboard split of a grid. `query_positions` is raster-ordered; border
/// cells of either parity belong to neither set and are never modified.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub polarity: Polarity,
    pub query_positions: Vec<(u32, u32)>,
    pub border_margin: u32,
    width: u32,
    height: u32,
}

impl Partition {
    pub fn is_border(&self, row: u32, col: u32) -> bool {
        let m = self.border_margin;
        row < m || col < m || row >= self.height - m || col >= self.width - m
    }

    pub fn is_context(&self, row: u32, col: u32) -> bool {
        !self.is_border(row, col) && self.polarity.matches(row, col)
    }

    pub fn is_query(&self, row: u32, col: u32) -> bool {
        !self.is_border(row, col) && !self.polarity.matches(row, col)
    }
}

/// Splits `grid` into context/query/border cells.
///
/// Context cells have `(row + col)` parity equal to `polarity`; interior
/// cells of the opposite parity form the query set in raster order.
pub fn chequerboard_partition(
    grid: &PixelGrid,
    polarity: Polarity,
    border_margin: u32,
) -> Result<Partition> {
    let needed = 2 * border_margin + 1;
    if grid.width() < needed || grid.height() < needed {
        return Err(Error::ImageTooSmall {
            width: grid.width(),
            height: grid.height(),
            margin: border_margin,
        });
    }
    let mut query_positions = Vec::new();
    for row in border_margin..grid.height() - border_margin {
        for col in border_margin..grid.width() - border_margin {
            if !polarity.matches(row, col) {
                query_positions.push((row, col));
            }
        }
    }
    Ok(Partition {
        polarity,
        query_positions,
        border_margin,
        width: grid.width(),
        height: grid.height(),
    })
}

/// Number of features `context_window` returns for a given radius: the count
/// of offsets with odd coordinate sum in a (2r+1)^2 window.
pub fn window_feature_count(radius: u32) -> usize {
    (2 * radius * (radius + 1)) as usize
}

/// Intensities at the context-parity offsets around `position` (offsets with
/// odd `di + dj`, raster offset order), each normalised into `[0, 1]`.
pub fn context_window(grid: &PixelGrid, position: (u32, u32), radius: u32) -> Result<Vec<f64>> {
    let (row, col) = position;
    if row < radius
        || col < radius
        || row + radius >= grid.height()
        || col + radius >= grid.width()
    {
        return Err(Error::OutOfBounds { row, col, radius });
    }
    let mut features = Vec::with_capacity(window_feature_count(radius));
    let r = radius as i64;
    for di in -r..=r {
        for dj in -r..=r {
            if (di + dj).rem_euclid(2) == 1 {
                let sr = (row as i64 + di) as u32;
                let sc = (col as i64 + dj) as u32;
                features.push(grid.get(sr, sc) as f64 / 255.0);
            }
        }
    }
    Ok(features)
}

/// Decodes a binary PGM (magic `P5`, maxval 255). `#` comments are accepted
/// anywhere in the header.
pub fn load_pgm(bytes: &[u8]) -> Result<PixelGrid> {
    let mut pos = 0usize;

    fn skip_separators(bytes: &[u8], mut pos: usize) -> usize {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                return pos;
            }
        }
    }

    fn read_token(bytes: &[u8], pos: usize) -> Result<(&[u8], usize)> {
        let start = skip_separators(bytes, pos);
        let mut end = start;
        while end < bytes.len() && !bytes[end].is_ascii_whitespace() && bytes[end] != b'#' {
            end += 1;
        }
        if start == end {
            return Err(Error::MalformedHeader("unexpected end of header".into()));
        }
        Ok((&bytes[start..end], end))
    }

    let (magic, next) = read_token(bytes, pos)?;
    if magic != b"P5" {
        return Err(Error::UnsupportedFormat(
            String::from_utf8_lossy(magic).into_owned(),
        ));
    }
    pos = next;

    let mut dims = [0u32; 3];
    for slot in &mut dims {
        let (tok, next) = read_token(bytes, pos)?;
        let text = std::str::from_utf8(tok)
            .map_err(|_| Error::MalformedHeader("non-ASCII header field".into()))?;
        *slot = text
            .parse::<u32>()
            .map_err(|_| Error::MalformedHeader(format!("bad header field '{text}'")))?;
        pos = next;
    }
    let [width, height, maxval] = dims;
    if maxval != 255 {
        return Err(Error::UnsupportedMaxVal(maxval));
    }
    if width == 0 || height == 0 {
        return Err(Error::ZeroDimensions);
    }

    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::MalformedHeader(
            "missing whitespace before pixel data".into(),
        ));
    }
    pos += 1;

    let expected = width as usize * height as usize;
    let data = &bytes[pos..];
    if data.len() < expected {
        return Err(Error::TruncatedData {
            expected,
            found: data.len(),
        });
    }
    if data.len() > expected {
        return Err(Error::TrailingData(data.len() - expected));
    }
    PixelGrid::new(width, height, data.to_vec())
}

/// Encodes a grid in the canonical form `P5\n<w> <h>\n255\n<raster>`.
pub fn save_pgm(grid: &PixelGrid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend_from_slice(grid.values());
    out
}
