//! Deterministic synthetic greyscale images for tests and benchmarks.
//!
//! Each image is a seeded mix of low-frequency sinusoids, a linear gradient
//! and a few smooth bumps — locally predictable from its neighbours — plus,
//! usually, one noisy band whose residuals are intrinsically hard to
//! predict. That contrast is what gives uncertainty maps something to rank.

use crate::grid::PixelGrid;
use crate::rng::Rng;

/// Generates a `width x height` image from `seed`. Same seed, same bytes.
/// Roughly three of four images carry a noisy band.
pub fn synthetic_image(width: u32, height: u32, seed: u64) -> PixelGrid {
    generate(width, height, seed, true)
}

/// Band-free variant: smooth everywhere, locally predictable. Useful where
/// capacity matters more than uncertainty contrast.
pub fn smooth_image(width: u32, height: u32, seed: u64) -> PixelGrid {
    generate(width, height, seed, false)
}

fn generate(width: u32, height: u32, seed: u64, allow_band: bool) -> PixelGrid {
    let mut rng = Rng::derive(seed, 0x53_59_4E_54_48);
    let w = width as f64;
    let h = height as f64;

    let fx = (0.5 + 2.0 * rng.next_f64()) / w;
    let fy = (0.5 + 2.0 * rng.next_f64()) / h;
    let phase_x = rng.next_f64();
    let phase_y = rng.next_f64();
    let amp = 30.0 + 40.0 * rng.next_f64();
    let grad_x = rng.next_symmetric(50.0);
    let grad_y = rng.next_symmetric(50.0);
    let offset = 110.0 + rng.next_symmetric(30.0);

    struct Bump {
        row: f64,
        col: f64,
        amp: f64,
        inv_two_sigma_sq: f64,
    }
    let n_bumps = 1 + rng.next_below(3) as usize;
    let bumps: Vec<Bump> = (0..n_bumps)
        .map(|_| {
            let sigma = (0.1 + 0.2 * rng.next_f64()) * w.min(h);
            Bump {
                row: rng.next_f64() * h,
                col: rng.next_f64() * w,
                amp: rng.next_symmetric(70.0),
                inv_two_sigma_sq: 1.0 / (2.0 * sigma * sigma),
            }
        })
        .collect();

    // A noisy band in roughly 3 of 4 images when allowed. The draw happens
    // either way so banded and band-free variants share the remaining
    // parameters for a given seed.
    let band = if rng.next_below(4) < 3 && allow_band {
        let band_height = (height / 6).max(2);
        let start = rng.next_below((height - band_height) as u64) as u32;
        let noise_amp = 8.0 + 24.0 * rng.next_f64();
        Some((start, start + band_height, noise_amp))
    } else {
        None
    };

    let tau = std::f64::consts::TAU;
    let mut values = Vec::with_capacity(width as usize * height as usize);
    for row in 0..height {
        for col in 0..width {
            let (r, c) = (row as f64, col as f64);
            let mut v = offset
                + amp * (tau * (fx * c + phase_x)).sin() * (tau * (fy * r + phase_y)).sin()
                + grad_x * c / w
                + grad_y * r / h;
            for bump in &bumps {
                let d2 = (r - bump.row).powi(2) + (c - bump.col).powi(2);
                v += bump.amp * (-d2 * bump.inv_two_sigma_sq).exp();
            }
            if let Some((start, end, noise_amp)) = band {
                if row >= start && row < end {
                    v += rng.next_symmetric(noise_amp);
                }
            }
            // Stay clear of the intensity rails so range preprocessing never
            // fires on generated imagery; rail handling has its own tests.
            values.push(v.round().clamp(6.0, 249.0) as u8);
        }
    }
    PixelGrid::new(width, height, values).expect("dimensions are positive")
}
