//! Procedural toy corpus: eight classes of 64x64 scenes, each class a hue
//! family plus a texture motif. A quarter of the images borrow another
//! class's motif, so hue is the only fully reliable cue.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::manifest::write_jsonl;
use crate::domain::{EmotionLabel, ImageBuffer, LabeledImage, NUM_EMOTIONS};
use crate::error::Result;
use crate::nn::rng_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub per_class: usize,
    pub side: usize,
    pub seed: u64,
    /// Probability that an image uses a motif from a different class.
    pub motif_swap_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            per_class: 100,
            side: 64,
            seed: 2024,
            motif_swap_prob: 0.25,
        }
    }
}

pub fn class_hue(label: EmotionLabel) -> f64 {
    label.index() as f64 / NUM_EMOTIONS as f64
}

/// Random placement parameters of a motif.
#[derive(Debug, Clone, Copy)]
pub struct MotifParams {
    pub phase_x: f64,
    pub phase_y: f64,
    pub scale: f64,
}

impl MotifParams {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            phase_x: rng.random::<f64>(),
            phase_y: rng.random::<f64>(),
            scale: 0.85 + 0.3 * rng.random::<f64>(),
        }
    }
}

/// Motif intensity in [0,1] at pixel (x, y) of a `side`-sized canvas.
pub fn motif_value(motif: usize, x: f64, y: f64, side: f64, p: MotifParams) -> f64 {
    let u = x / side;
    let v = y / side;
    let period = 0.25 * p.scale;
    let smooth = |t: f64| 0.5 + 0.5 * (2.0 * PI * t).cos();
    match motif % NUM_EMOTIONS {
        0 => smooth(v / period + p.phase_y),
        1 => smooth(u / period + p.phase_x),
        2 => smooth((u + v) / (period * 1.4) + p.phase_x),
        3 => {
            let cx = 0.35 + 0.3 * p.phase_x;
            let cy = 0.35 + 0.3 * p.phase_y;
            let r = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
            smooth(r / (period * 0.9))
        }
        4 => smooth(u / (period * 2.0) + p.phase_x) * smooth(v / (period * 2.0) + p.phase_y)
            + (1.0 - smooth(u / (period * 2.0) + p.phase_x)) * (1.0 - smooth(v / (period * 2.0) + p.phase_y)),
        5 => {
            let cx = 0.3 + 0.4 * p.phase_x;
            let cy = 0.3 + 0.4 * p.phase_y;
            let r = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
            let radius = 0.22 * p.scale;
            1.0 / (1.0 + ((r - radius) / 0.03).exp())
        }
        6 => {
            let cx = 0.3 + 0.4 * p.phase_x;
            let cy = 0.3 + 0.4 * p.phase_y;
            let half = 0.08 * p.scale;
            let bar = |d: f64| 1.0 / (1.0 + ((d.abs() - half) / 0.02).exp());
            bar(u - cx).max(bar(v - cy))
        }
        _ => {
            let gx = (u / period + p.phase_x).fract() - 0.5;
            let gy = (v / period + p.phase_y).fract() - 0.5;
            let r = (gx * gx + gy * gy).sqrt();
            1.0 / (1.0 + ((r - 0.22) / 0.05).exp())
        }
    }
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn to_u8(c: f64) -> u8 {
    (c * 255.0).round().clamp(0.0, 255.0) as u8
}

/// One toy image of `label`. Fully determined by `(seed, label, index)`.
pub fn synth_image(label: EmotionLabel, index: usize, side: usize, seed: u64, swap_prob: f64) -> ImageBuffer {
    let mut rng = rng_from(seed, (label.index() as u64) << 32 | index as u64);
    let hue = class_hue(label) + rng.random_range(-0.02..0.02);
    let sat = rng.random_range(0.55..0.85);
    let base_v = rng.random_range(0.5..0.75);
    let angle = rng.random_range(0.0..2.0 * PI);
    let (gx, gy) = (angle.cos(), angle.sin());
    let motif = if rng.random::<f64>() < swap_prob {
        (label.index() + rng.random_range(1..NUM_EMOTIONS)) % NUM_EMOTIONS
    } else {
        label.index()
    };
    let params = MotifParams::sample(&mut rng);
    let amp = rng.random_range(0.35..0.5);
    let mut img = ImageBuffer::filled(side, side, [0, 0, 0]);
    let s = side as f64;
    for y in 0..side {
        for x in 0..side {
            let ramp = ((x as f64 / s - 0.5) * gx + (y as f64 / s - 0.5) * gy) * 0.25;
            let m = motif_value(motif, x as f64, y as f64, s, params);
            let v = (base_v + ramp + amp * (m - 0.5)).clamp(0.05, 1.0);
            let noise = rng.random_range(-0.012..0.012);
            let rgb = hsv_to_rgb(hue, sat, (v + noise).clamp(0.0, 1.0));
            img.set(y, x, rgb.map(to_u8));
        }
    }
    img
}

/// Writes `per_class` images per category under `out_dir/images` and a
/// labeled manifest `out_dir/labels.jsonl`. Returns the manifest path.
pub fn synth_corpus(config: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    let mut records = Vec::with_capacity(config.per_class * NUM_EMOTIONS);
    for label in EmotionLabel::ALL {
        for i in 0..config.per_class {
            let img = synth_image(label, i, config.side, config.seed, config.motif_swap_prob);
            let rel = PathBuf::from(format!("images/{}_{i:04}.png", label.name()));
            img.save(&out_dir.join(&rel))?;
            records.push(LabeledImage {
                path: rel,
                emotion: label,
            });
        }
    }
    let manifest = out_dir.join("labels.jsonl");
    write_jsonl(&manifest, &records)?;
    Ok(manifest)
}

/// In-memory variant used by tests and benchmarks.
pub fn synth_images(config: &SynthConfig) -> Vec<(ImageBuffer, EmotionLabel)> {
    EmotionLabel::ALL
        .into_iter()
        .flat_map(|label| {
            (0..config.per_class).map(move |i| {
                (
                    synth_image(label, i, config.side, config.seed, config.motif_swap_prob),
                    label,
                )
            })
        })
        .collect()
}
