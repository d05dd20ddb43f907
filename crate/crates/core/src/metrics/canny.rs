//! Canny edge detector on Rec. 601 luma (0..=255 units).
//!
//! Pipeline: 5x5 Gaussian blur (sigma 1.4) -> 3x3 Sobel, L2 magnitude ->
//! non-maximum suppression along the quantized gradient direction ->
//! hysteresis (>= high seeds, >= low grows, 8-connected). Borders replicate.

use crate::domain::ImageBuffer;
use crate::error::{Error, Result};

use super::ssim::gaussian_kernel;

pub const DEFAULT_LOW: f64 = 200.0;
pub const DEFAULT_HIGH: f64 = 500.0;

/// Binary edge map, row-major, values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    pub edges: Vec<u8>,
}

impl EdgeMap {
    pub fn count(&self) -> usize {
        self.edges.iter().map(|&v| v as usize).sum()
    }
}

fn at(src: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    let yy = y.clamp(0, h as isize - 1) as usize;
    let xx = x.clamp(0, w as isize - 1) as usize;
    src[yy * w + xx]
}

fn blur(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel(5, 1.4);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (0..5)
                .map(|i| k[i] * at(src, h, w, y as isize, x as isize + i as isize - 2))
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..5)
                .map(|i| k[i] * at(&tmp, h, w, y as isize + i as isize - 2, x as isize))
                .sum();
        }
    }
    out
}

/// Sobel gradients (gx, gy) with replicated borders.
pub(crate) fn sobel(src: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dy: isize, dx: isize| at(src, h, w, y + dy, x + dx);
            let i = y as usize * w + x as usize;
            gx[i] = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            gy[i] = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
        }
    }
    (gx, gy)
}

pub fn canny_luma(luma: &[f64], h: usize, w: usize, low: f64, high: f64) -> Result<EdgeMap> {
    if !(low > 0.0 && low < high) {
        return Err(Error::InvalidValue(format!(
            "Canny thresholds need 0 < low < high, got {low} / {high}"
        )));
    }
    if luma.len() != h * w {
        return Err(Error::Shape("luma plane does not match dimensions".into()));
    }
    let smoothed = blur(luma, h, w);
    let (gx, gy) = sobel(&smoothed, h, w);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect();

    // A pixel survives if it is >= its neighbour on the negative side and
    // strictly > its neighbour on the positive side, so a symmetric plateau
    // of two keeps exactly one pixel. Comparisons allow for rounding noise.
    let mut thin = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let angle = gy[i].atan2(gx[i]).to_degrees().rem_euclid(180.0);
            let (dy, dx) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let before = at(&mag, h, w, y - dy, x - dx);
            let after = at(&mag, h, w, y + dy, x + dx);
            let tol = 1e-9 * m;
            if m >= before - tol && m > after + tol {
                thin[i] = m;
            }
        }
    }

    let mut edges = vec![0u8; h * w];
    let mut stack: Vec<usize> = Vec::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= high {
            edges[i] = 1;
            stack.push(i);
        }
    }
    while let Some(i) = stack.pop() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if edges[j] == 0 && thin[j] >= low {
                    edges[j] = 1;
                    stack.push(j);
                }
            }
        }
    }
    Ok(EdgeMap {
        height: h,
        width: w,
        edges,
    })
}

pub fn canny_edges(img: &ImageBuffer, low: f64, high: f64) -> Result<EdgeMap> {
    canny_luma(&img.luma(), img.height(), img.width(), low, high)
}
