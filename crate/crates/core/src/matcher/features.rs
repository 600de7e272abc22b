//! Hand-crafted filter bank pooled on the cell lattice.
//!
//! Channels per cell: centred intensity, mean x/y gradient, mean squared
//! x/y gradient, and an 8-bin magnitude-weighted orientation histogram.

use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::geometry::PixelGrid;
use crate::image::Image;

use serde::{Deserialize, Serialize};

use super::DescriptorConfig;

pub const ORIENTATION_BINS: usize = 8;
/// Channels per pooling region.
pub const RAW_DIM: usize = 5 + ORIENTATION_BINS;

/// Pooling layout around each cell. Every region contributes [`RAW_DIM`]
/// channel means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterBank {
    /// One `window`-sided square.
    #[default]
    Basic,
    /// Concentric squares of side `window`, `2·window` and `4·window`.
    Pyramid,
    /// The `window` square plus the four `window`-sided quadrants of the
    /// `2·window` square.
    Grid,
}

impl FilterBank {
    pub fn regions(&self) -> usize {
        match self {
            FilterBank::Basic => 1,
            FilterBank::Pyramid => 3,
            FilterBank::Grid => 5,
        }
    }

    pub fn code(&self) -> u32 {
        match self {
            FilterBank::Basic => 0,
            FilterBank::Pyramid => 1,
            FilterBank::Grid => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(FilterBank::Basic),
            1 => Some(FilterBank::Pyramid),
            2 => Some(FilterBank::Grid),
            _ => None,
        }
    }

    /// Regions as `(x0, y0, side)` offsets from the cell's top-left pixel.
    fn layout(&self, stride: usize, window: usize) -> Vec<(i64, i64, i64)> {
        let s = stride as i64;
        let centred = |side: i64| {
            let o = -(side - s).div_euclid(2);
            (o, o, side)
        };
        let w = window as i64;
        match self {
            FilterBank::Basic => vec![centred(w)],
            FilterBank::Pyramid => vec![centred(w), centred(2 * w), centred(4 * w)],
            FilterBank::Grid => {
                let (o, _, _) = centred(2 * w);
                vec![centred(w), (o, o, w), (o + w, o, w), (o, o + w, w), (o + w, o + w, w)]
            }
        }
    }
}

/// Gradient gain bringing gradient channels to roughly unit scale on
/// natural textures.
const GRADIENT_GAIN: f64 = 8.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RawFeatures {
    pub grid: PixelGrid,
    pub image: PixelGrid,
    pub descriptor: DescriptorConfig,
    pub dim: usize,
    /// `grid.len() x dim`, row-major.
    pub data: Vec<f64>,
}

impl RawFeatures {
    #[inline]
    pub fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

struct Integral {
    w: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(w: usize, h: usize, values: impl Fn(usize, usize) -> f64) -> Self {
        let stride = w + 1;
        let mut sums = vec![0.0; stride * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += values(x, y);
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Integral { w, sums }
    }

    /// Sum over `[x0, x1) x [y0, y1)`.
    fn rect(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let s = self.w + 1;
        self.sums[y1 * s + x1] - self.sums[y0 * s + x1] - self.sums[y1 * s + x0] + self.sums[y0 * s + x0]
    }
}

pub fn extract_raw(img: &Image, cfg: &DescriptorConfig) -> Result<RawFeatures> {
    let (w, h) = (img.width(), img.height());
    if cfg.stride == 0 || w < cfg.stride || h < cfg.stride {
        return Err(Error::ImageTooSmall { width: w, height: h, stride: cfg.stride });
    }
    let gray: Vec<f64> = img.to_gray().into_iter().map(f64::from).collect();
    let at = |x: usize, y: usize| gray[y * w + x];
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let xl = x.saturating_sub(1);
            let xr = (x + 1).min(w - 1);
            let yu = y.saturating_sub(1);
            let yd = (y + 1).min(h - 1);
            gx[y * w + x] = GRADIENT_GAIN * (at(xr, y) - at(xl, y)) / 2.0;
            gy[y * w + x] = GRADIENT_GAIN * (at(x, yd) - at(x, yu)) / 2.0;
        }
    }
    // Soft orientation binning.
    let mut bins = vec![[0.0f64; ORIENTATION_BINS]; w * h];
    for i in 0..w * h {
        let mag = gx[i].hypot(gy[i]);
        if mag == 0.0 {
            continue;
        }
        let theta = gy[i].atan2(gx[i]).rem_euclid(TAU);
        let pos = theta / TAU * ORIENTATION_BINS as f64;
        let lo = (pos.floor() as usize) % ORIENTATION_BINS;
        let hi = (lo + 1) % ORIENTATION_BINS;
        let frac = pos - pos.floor();
        bins[i][lo] += mag * (1.0 - frac);
        bins[i][hi] += mag * frac;
    }

    let mut channels: Vec<Integral> = Vec::with_capacity(RAW_DIM);
    channels.push(Integral::new(w, h, |x, y| at(x, y) - 0.5));
    channels.push(Integral::new(w, h, |x, y| gx[y * w + x]));
    channels.push(Integral::new(w, h, |x, y| gy[y * w + x]));
    channels.push(Integral::new(w, h, |x, y| gx[y * w + x] * gx[y * w + x]));
    channels.push(Integral::new(w, h, |x, y| gy[y * w + x] * gy[y * w + x]));
    for b in 0..ORIENTATION_BINS {
        channels.push(Integral::new(w, h, |x, y| bins[y * w + x][b]));
    }

    let grid = cfg.cell_grid(img.grid());
    let s = cfg.stride as i64;
    let layout = cfg.bank.layout(cfg.stride, cfg.window);
    let dim = cfg.raw_dim();
    let mut data = Vec::with_capacity(grid.len() * dim);
    for r in 0..grid.height as i64 {
        for c in 0..grid.width as i64 {
            for (ox, oy, side) in &layout {
                let x0 = (c * s + ox).clamp(0, w as i64) as usize;
                let y0 = (r * s + oy).clamp(0, h as i64) as usize;
                let x1 = (c * s + ox + side).clamp(0, w as i64) as usize;
                let y1 = (r * s + oy + side).clamp(0, h as i64) as usize;
                let area = ((x1 - x0) * (y1 - y0)) as f64;
                for ch in &channels {
                    data.push(if area > 0.0 { ch.rect(x0, y0, x1, y1) / area } else { 0.0 });
                }
            }
        }
    }
    Ok(RawFeatures { grid, image: img.grid(), descriptor: *cfg, dim, data })
}
