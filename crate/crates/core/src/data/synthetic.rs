//! Procedural three-class RGB texture set.
//!
//! * class 0: green field with sinusoidal row stripes
//! * class 1: the same field with a few orange Gaussian blobs
//! * class 2: orange/red field with slow brightness variation

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::LabeledDataset;
use crate::error::{Error, Result};

pub const DEFAULT_COUNTS: [usize; 3] = [500, 250, 108];
pub const SYNTHETIC_CLASSES: [&str; 3] = ["field", "field_burning", "fire"];
const NOISE_STD: f64 = 0.06;
const BLOB_COLOR: [f64; 3] = [0.95, 0.55, 0.1];

struct Stripes {
    dir: (f64, f64),
    freq: f64,
    phase: f64,
    amp: f64,
}

impl Stripes {
    fn random(rng: &mut ChaCha8Rng, amp: (f64, f64)) -> Self {
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        Stripes {
            dir: (theta.cos(), theta.sin()),
            freq: rng.random_range(0.9..2.2),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            amp: rng.random_range(amp.0..amp.1),
        }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        self.amp * (self.freq * (x * self.dir.0 + y * self.dir.1) + self.phase).sin()
    }
}

fn green_base(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(0.15..0.3),
        rng.random_range(0.45..0.65),
        rng.random_range(0.1..0.2),
    ]
}

fn render(
    rng: &mut ChaCha8Rng,
    noise: &Normal<f64>,
    (h, w): (usize, usize),
    pixel: impl Fn(usize, usize, usize) -> f64,
    out: &mut Vec<f64>,
) {
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = pixel(c, y, x) + noise.sample(rng);
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
}

/// Generates `counts[c]` images of class `c`, classes in order.
pub fn gen_synthetic(counts: [usize; 3], (h, w): (usize, usize), seed: u64) -> Result<LabeledDataset> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!("class {c} has a zero sample count")));
    }
    if h < 8 || w < 8 {
        return Err(Error::Config(format!(
            "synthetic images must be at least 8×8, got {h}×{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let scale = h.min(w) as f64 / 32.0;
    let total: usize = counts.iter().sum();
    let mut pixels = Vec::with_capacity(total * 3 * h * w);
    let mut labels = Vec::with_capacity(total);
    for (class, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            match class {
                0 => {
                    let base = green_base(&mut rng);
                    let s = Stripes::random(&mut rng, (0.08, 0.18));
                    render(
                        &mut rng,
                        &noise,
                        (h, w),
                        |c, y, x| base[c] + s.at(y as f64, x as f64),
                        &mut pixels,
                    );
                }
                1 => {
                    let base = green_base(&mut rng);
                    let s = Stripes::random(&mut rng, (0.03, 0.1));
                    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..=3))
                        .map(|_| {
                            (
                                rng.random_range(0.0..h as f64),
                                rng.random_range(0.0..w as f64),
                                rng.random_range(2.5..5.0) * scale,
                                rng.random_range(0.6..1.0),
                            )
                        })
                        .collect();
                    render(
                        &mut rng,
                        &noise,
                        (h, w),
                        |c, y, x| {
                            let (yf, xf) = (y as f64, x as f64);
                            let mut v = base[c] + s.at(yf, xf);
                            for &(cy, cx, r, strength) in &blobs {
                                let d2 = (yf - cy).powi(2) + (xf - cx).powi(2);
                                let a = strength * (-d2 / (2.0 * r * r)).exp();
                                v = (1.0 - a) * v + a * BLOB_COLOR[c];
                            }
                            v
                        },
                        &mut pixels,
                    );
                }
                _ => {
                    let base = [
                        rng.random_range(0.7..0.95),
                        rng.random_range(0.25..0.5),
                        rng.random_range(0.05..0.15),
                    ];
                    let glow = Stripes {
                        freq: rng.random_range(0.1..0.3) / scale,
                        ..Stripes::random(&mut rng, (0.05, 0.12))
                    };
                    render(
                        &mut rng,
                        &noise,
                        (h, w),
                        |c, y, x| base[c] + glow.at(y as f64, x as f64),
                        &mut pixels,
                    );
                }
            }
            labels.push(class);
        }
    }
    let names = SYNTHETIC_CLASSES.iter().map(|s| s.to_string()).collect();
    LabeledDataset::new((3, h, w), pixels, labels, names)
}
