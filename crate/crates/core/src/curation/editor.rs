//! Pluggable instruction-conditioned image editors.

use sha2::{Digest, Sha256};

use crate::domain::{EmotionLabel, ImageBuffer};
use crate::error::Result;
use crate::synth::{class_hue, hsv_to_rgb, motif_value, rgb_to_hsv, MotifParams};

#[derive(Debug, Clone, Copy)]
pub struct EditRequest<'a> {
    pub instruction: &'a str,
    pub target: EmotionLabel,
}

pub trait ImageEditor: Sync {
    fn id(&self) -> &str;
    fn edit(&self, image: &ImageBuffer, request: &EditRequest<'_>) -> Result<ImageBuffer>;
}

/// Returns its input unchanged.
pub struct IdentityEditor;

impl ImageEditor for IdentityEditor {
    fn id(&self) -> &str {
        "identity"
    }
    fn edit(&self, image: &ImageBuffer, _request: &EditRequest<'_>) -> Result<ImageBuffer> {
        Ok(image.clone())
    }
}

/// Deterministic parametric recoloring: shifts every pixel to the target
/// class hue and blends the target class motif into the value channel. The
/// blend strength and motif placement are derived from a hash of the
/// instruction text, so different instructions give different edits.
pub struct SyntheticEditor {
    pub min_strength: f64,
    pub max_strength: f64,
}

impl Default for SyntheticEditor {
    fn default() -> Self {
        Self {
            min_strength: 0.3,
            max_strength: 0.9,
        }
    }
}

fn unit_floats(text: &str) -> [f64; 4] {
    let d = Sha256::digest(text.as_bytes());
    let mut out = [0.0; 4];
    for (i, o) in out.iter_mut().enumerate() {
        let v = u64::from_le_bytes(d[i * 8..i * 8 + 8].try_into().expect("8 bytes"));
        *o = (v >> 11) as f64 / (1u64 << 53) as f64;
    }
    out
}

impl SyntheticEditor {
    pub fn strength(&self, instruction: &str) -> f64 {
        let u = unit_floats(instruction)[0];
        self.min_strength + (self.max_strength - self.min_strength) * u
    }
}

impl ImageEditor for SyntheticEditor {
    fn id(&self) -> &str {
        "synthetic-recolor-v1"
    }

    fn edit(&self, image: &ImageBuffer, request: &EditRequest<'_>) -> Result<ImageBuffer> {
        let u = unit_floats(request.instruction);
        let strength = self.strength(request.instruction);
        let params = MotifParams {
            phase_x: u[1],
            phase_y: u[2],
            scale: 0.85 + 0.3 * u[3],
        };
        let (h, w) = (image.height(), image.width());
        let hsv: Vec<(f64, f64, f64)> = image
            .pixels()
            .chunks_exact(3)
            .map(|p| rgb_to_hsv([p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]))
            .collect();
        let mean_v = hsv.iter().map(|p| p.2).sum::<f64>() / hsv.len() as f64;
        let mean_s = hsv.iter().map(|p| p.1).sum::<f64>() / hsv.len() as f64;
        let hue = class_hue(request.target);
        let side = h.max(w) as f64;
        let mut out = ImageBuffer::filled(h, w, [0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                let (_, s, v) = hsv[y * w + x];
                let m = motif_value(request.target.index(), x as f64, y as f64, side, params);
                let motif_v = mean_v + 0.45 * (m - 0.5);
                let v2 = ((1.0 - strength) * v + strength * motif_v).clamp(0.0, 1.0);
                let s2 = (0.5 * s + 0.5 * mean_s.max(0.6)).clamp(0.0, 1.0);
                let rgb = hsv_to_rgb(hue, s2, v2);
                out.set(y, x, rgb.map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8));
            }
        }
        Ok(out)
    }
}
