//! Common image corruptions at five severities, corrupted test-set
//! generation and the robustness table.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::Deserialize;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate_report, PckNorm, PredictionSource};
use crate::image::{decode_jpeg, encode_jpeg, Image};
use crate::manifest::{CorruptionInfo, DatasetManifest, Split};
use crate::matcher::MatcherParams;
use crate::rng::SeedKey;

const SEVERITY_TOML: &str = include_str!("../data/corruption_severity.toml");

pub const SEVERITIES: [u8; 5] = [1, 2, 3, 4, 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    SpeckleNoise,
    DefocusBlur,
    GaussianBlur,
    Snow,
    Frost,
    Fog,
    Spatter,
    Brightness,
    Contrast,
    Saturate,
    Pixelate,
    Jpeg,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 15] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::SpeckleNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Snow,
        CorruptionKind::Frost,
        CorruptionKind::Fog,
        CorruptionKind::Spatter,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Saturate,
        CorruptionKind::Pixelate,
        CorruptionKind::Jpeg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::SpeckleNoise => "speckle_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Snow => "snow",
            CorruptionKind::Frost => "frost",
            CorruptionKind::Fog => "fog",
            CorruptionKind::Spatter => "spatter",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Saturate => "saturate",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Jpeg => "jpeg",
        }
    }

    /// File extension of stored variants.
    pub fn extension(self) -> &'static str {
        if self == CorruptionKind::Jpeg {
            "jpg"
        } else {
            "png"
        }
    }

    pub fn is_noise_or_blur(self) -> bool {
        matches!(
            self,
            CorruptionKind::GaussianNoise
                | CorruptionKind::ShotNoise
                | CorruptionKind::ImpulseNoise
                | CorruptionKind::SpeckleNoise
                | CorruptionKind::DefocusBlur
                | CorruptionKind::GaussianBlur
        )
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = if s == "jpeg_compression" { "jpeg" } else { s };
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnsupportedKind(s.to_string()))
    }
}

/// One corruption to apply; `seed` drives every random draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        check_severity(severity)?;
        Ok(CorruptionSpec { kind, severity, seed })
    }

    /// Seed for one image of a corrupted set.
    pub fn for_image(kind: CorruptionKind, severity: u8, set_seed: u64, image_id: &str) -> Result<Self> {
        let seed = SeedKey::new(set_seed).with_str(image_id).with_str(kind.as_str()).with(severity as u64).value();
        Self::new(kind, severity, seed)
    }
}

fn check_severity(severity: u8) -> Result<()> {
    if (1..=5).contains(&severity) {
        Ok(())
    } else {
        Err(Error::InvalidSeverity(severity))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeverityTable {
    pub version: u32,
    pub gaussian_noise: Sigma,
    pub shot_noise: ShotNoise,
    pub impulse_noise: Impulse,
    pub speckle_noise: Sigma,
    pub defocus_blur: Defocus,
    pub gaussian_blur: Sigma,
    pub snow: SnowParams,
    pub frost: FrostParams,
    pub fog: FogParams,
    pub spatter: SpatterParams,
    pub brightness: Brightness,
    pub contrast: Contrast,
    pub saturate: Saturate,
    pub pixelate: Pixelate,
    pub jpeg: JpegParams,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sigma {
    pub sigma: [f64; 5],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShotNoise {
    pub rate: [f64; 5],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Impulse {
    pub amount: [f64; 5],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Defocus {
    pub radius: [f64; 5],
    pub alias_blur: [f64; 5],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnowParams {
    pub mean: [f64; 5],
    pub std: [f64; 5],
    pub zoom: [f64; 5],
    pub threshold: [f64; 5],
    pub blur_radius: [f64; 5],
    pub blur_sigma: [f64; 5],
    pub image_weight: [f64; 5],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrostParams {
    pub image_weight: [f64; 5],
    pub frost_weight: [f64; 5],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FogParams {
    pub strength: [f64; 5],
    pub decay: [f64; 5],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatterParams {
    pub mean: [f64; 5],
    pub std: [f64; 5],
    pub sigma: [f64; 5],
    pub threshold: [f64; 5],
    pub intensity: [f64; 5],
    pub mud: [bool; 5],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Brightness {
    pub delta: [f64; 5],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Contrast {
    pub factor: [f64; 5],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Saturate {
    pub scale: [f64; 5],
    pub shift: [f64; 5],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pixelate {
    pub factor: [f64; 5],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JpegParams {
    pub quality: [u8; 5],
}

/// The checked-in severity constants.
pub fn severity_table() -> &'static SeverityTable {
    static TABLE: OnceLock<SeverityTable> = OnceLock::new();
    TABLE.get_or_init(|| toml::from_str(SEVERITY_TOML).expect("bundled severity table parses"))
}

/// Applies one corruption. Output values lie in [0, 1].
pub fn corrupt(img: &Image, spec: &CorruptionSpec) -> Result<Image> {
    check_severity(spec.severity)?;
    let t = severity_table();
    let s = spec.severity as usize - 1;
    let mut rng = SeedKey::new(spec.seed).rng();
    let out = match spec.kind {
        CorruptionKind::GaussianNoise => {
            let n = Normal::new(0.0, t.gaussian_noise.sigma[s]).expect("finite sigma");
            map_values(img, |v| v + n.sample(&mut rng) as f32)
        }
        CorruptionKind::ShotNoise => {
            let c = t.shot_noise.rate[s];
            map_values(img, |v| {
                let lambda = (v.clamp(0.0, 1.0) as f64) * c;
                let k = if lambda > 0.0 { Poisson::new(lambda).expect("positive rate").sample(&mut rng) } else { 0.0 };
                (k / c) as f32
            })
        }
        CorruptionKind::ImpulseNoise => {
            let amount = t.impulse_noise.amount[s];
            map_values(img, |v| {
                if rng.random::<f64>() < amount {
                    if rng.random::<bool>() {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v
                }
            })
        }
        CorruptionKind::SpeckleNoise => {
            let n = Normal::new(0.0, t.speckle_noise.sigma[s]).expect("finite sigma");
            map_values(img, |v| v + v * n.sample(&mut rng) as f32)
        }
        CorruptionKind::GaussianBlur => gaussian_blur(img, t.gaussian_blur.sigma[s]),
        CorruptionKind::DefocusBlur => defocus_blur(img, t.defocus_blur.radius[s], t.defocus_blur.alias_blur[s]),
        CorruptionKind::Snow => snow(img, t, s, &mut rng),
        CorruptionKind::Frost => frost(img, t.frost.image_weight[s], t.frost.frost_weight[s], &mut rng),
        CorruptionKind::Fog => fog(img, t.fog.strength[s], t.fog.decay[s], &mut rng),
        CorruptionKind::Spatter => spatter(img, t, s, &mut rng),
        CorruptionKind::Brightness => {
            let d = t.brightness.delta[s] as f32;
            img.map_pixels(|p| {
                let [h, sat, v] = rgb_to_hsv(p);
                hsv_to_rgb([h, sat, (v + d).clamp(0.0, 1.0)])
            })
        }
        CorruptionKind::Contrast => contrast(img, t.contrast.factor[s] as f32),
        CorruptionKind::Saturate => {
            let (a, b) = (t.saturate.scale[s] as f32, t.saturate.shift[s] as f32);
            img.map_pixels(|p| {
                let [h, sat, v] = rgb_to_hsv(p);
                hsv_to_rgb([h, (sat * a + b).clamp(0.0, 1.0), v])
            })
        }
        CorruptionKind::Pixelate => pixelate(img, t.pixelate.factor[s]),
        CorruptionKind::Jpeg => decode_jpeg(&encode_jpeg(img, t.jpeg.quality[s])?)?,
    };
    let mut out = out;
    out.clamp01();
    Ok(out)
}

fn map_values(img: &Image, mut f: impl FnMut(f32) -> f32) -> Image {
    let data = img.data().iter().map(|&v| f(v)).collect();
    Image::from_raw(img.width(), img.height(), data).expect("same shape")
}

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable convolution of a single-channel plane, borders replicated.
fn blur_plane(plane: &[f32], w: usize, h: usize, kernel: &[f64]) -> Vec<f32> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * plane[y * w + clamp_idx(x as isize + i as isize - r, w)] as f64;
            }
            tmp[y * w + x] = acc as f32;
        }
    }
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * tmp[clamp_idx(y as isize + i as isize - r, h) * w + x] as f64;
            }
            out[y * w + x] = acc as f32;
        }
    }
    out
}

fn planes(img: &Image) -> [Vec<f32>; 3] {
    let d = img.data();
    std::array::from_fn(|c| d.iter().skip(c).step_by(3).copied().collect())
}

fn from_planes(w: usize, h: usize, p: &[Vec<f32>; 3]) -> Image {
    Image::from_fn(w, h, |x, y| {
        let i = y * w + x;
        [p[0][i], p[1][i], p[2][i]]
    })
}

fn gaussian_blur_plane(plane: &[f32], w: usize, h: usize, sigma: f64) -> Vec<f32> {
    let radius = (4.0 * sigma + 0.5) as usize;
    blur_plane(plane, w, h, &gaussian_kernel(sigma, radius))
}

fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let (w, h) = (img.width(), img.height());
    let p = planes(img).map(|pl| gaussian_blur_plane(&pl, w, h, sigma));
    from_planes(w, h, &p)
}

/// Disk kernel smoothed by a small Gaussian.
fn disk_kernel(radius: f64, alias_blur: f64) -> (Vec<f64>, usize) {
    let (half, ksize) = if radius <= 8.0 { (8usize, 3usize) } else { (radius as usize, 5usize) };
    let n = 2 * half + 1;
    let mut disk = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 - half as f64, y as f64 - half as f64);
            if dx * dx + dy * dy <= radius * radius {
                disk[y * n + x] = 1.0;
            }
        }
    }
    let sum: f64 = disk.iter().sum();
    disk.iter_mut().for_each(|v| *v /= sum);
    let g = gaussian_kernel(alias_blur, ksize / 2);
    let gr = (ksize / 2) as isize;
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            tmp[y * n + x] =
                g.iter().enumerate().map(|(i, k)| k * disk[y * n + reflect101(x as isize + i as isize - gr, n)]).sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] =
                g.iter().enumerate().map(|(i, k)| k * tmp[reflect101(y as isize + i as isize - gr, n) * n + x]).sum();
        }
    }
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    (out, n)
}

fn defocus_blur(img: &Image, radius: f64, alias_blur: f64) -> Image {
    let (k, n) = disk_kernel(radius, alias_blur);
    let (w, h) = (img.width(), img.height());
    let half = (n / 2) as isize;
    let src = img.data();
    Image::from_fn(w, h, |x, y| {
        let mut acc = [0.0f64; 3];
        for ky in 0..n {
            let sy = reflect101(y as isize + ky as isize - half, h);
            for kx in 0..n {
                let kv = k[ky * n + kx];
                if kv == 0.0 {
                    continue;
                }
                let sx = reflect101(x as isize + kx as isize - half, w);
                let base = (sy * w + sx) * 3;
                for c in 0..3 {
                    acc[c] += kv * src[base + c] as f64;
                }
            }
        }
        acc.map(|v| v as f32)
    })
}

fn contrast(img: &Image, factor: f32) -> Image {
    let n = (img.width() * img.height()).max(1) as f64;
    let mut mean = [0.0f64; 3];
    for px in img.data().chunks_exact(3) {
        for c in 0..3 {
            mean[c] += px[c] as f64;
        }
    }
    let mean = mean.map(|m| (m / n) as f32);
    img.map_pixels(|p| std::array::from_fn(|c| (p[c] - mean[c]) * factor + mean[c]))
}

pub(crate) fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    [h, s, max]
}

pub(crate) fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Box down-sampling by `factor`, then nearest-neighbour up-sampling back.
pub fn pixelate(img: &Image, factor: f64) -> Image {
    let (w, h) = (img.width(), img.height());
    let dw = ((w as f64 * factor) as usize).max(1);
    let dh = ((h as f64 * factor) as usize).max(1);
    let mut small = vec![[0.0f64; 3]; dw * dh];
    let mut count = vec![0usize; dw * dh];
    for y in 0..h {
        let sy = (y * dh) / h;
        for x in 0..w {
            let sx = (x * dw) / w;
            let p = img.pixel(x, y);
            let cell = &mut small[sy * dw + sx];
            for c in 0..3 {
                cell[c] += p[c] as f64;
            }
            count[sy * dw + sx] += 1;
        }
    }
    Image::from_fn(w, h, |x, y| {
        let i = ((y * dh) / h) * dw + (x * dw) / w;
        let n = count[i].max(1) as f64;
        small[i].map(|v| (v / n) as f32)
    })
}

fn bilinear(plane: &[f32], w: usize, h: usize, x: f64, y: f64) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

fn normal_plane(rng: &mut ChaCha8Rng, n: usize, mean: f64, std: f64) -> Vec<f32> {
    let d = Normal::new(mean, std).expect("finite std");
    (0..n).map(|_| d.sample(rng) as f32).collect()
}

fn snow(img: &Image, t: &SeverityTable, s: usize, rng: &mut ChaCha8Rng) -> Image {
    let p = &t.snow;
    let (w, h) = (img.width(), img.height());
    let layer = normal_plane(rng, w * h, p.mean[s], p.std[s]);
    // Centre zoom of the noise layer.
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let zoom = p.zoom[s];
    let mut flakes: Vec<f32> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            bilinear(&layer, w, h, cx + (x - cx) / zoom, cy + (y - cy) / zoom)
        })
        .collect();
    let thr = p.threshold[s] as f32;
    flakes.iter_mut().for_each(|v| {
        if *v < thr {
            *v = 0.0
        }
    });
    // One-sided motion blur along a random downward angle.
    let angle = rng.random_range(-135.0f64..-45.0).to_radians();
    let (dx, dy) = (angle.cos(), -angle.sin());
    let radius = p.blur_radius[s].round() as usize;
    let sigma = p.blur_sigma[s];
    let weights: Vec<f64> = (0..=radius).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let wsum: f64 = weights.iter().sum();
    let blurred: Vec<f32> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let acc: f64 = weights
                .iter()
                .enumerate()
                .map(|(d, k)| k * bilinear(&flakes, w, h, x - dx * d as f64, y - dy * d as f64) as f64)
                .sum();
            (acc / wsum) as f32
        })
        .collect();
    let iw = p.image_weight[s] as f32;
    Image::from_fn(w, h, |x, y| {
        let px = img.pixel(x, y);
        let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        let snow = blurred[y * w + x] + blurred[(h - 1 - y) * w + (w - 1 - x)];
        px.map(|v| iw * v + (1.0 - iw) * v.max(gray * 1.5 + 0.5) + snow)
    })
}

/// Multi-octave value noise in [0, 1].
fn value_noise(rng: &mut ChaCha8Rng, w: usize, h: usize, base_cell: f64, octaves: u32) -> Vec<f32> {
    let mut out = vec![0.0f32; w * h];
    let mut amp = 1.0f32;
    let mut total = 0.0f32;
    let mut cell = base_cell;
    for _ in 0..octaves {
        let gw = (w as f64 / cell).ceil() as usize + 2;
        let gh = (h as f64 / cell).ceil() as usize + 2;
        let lattice: Vec<f32> = (0..gw * gh).map(|_| rng.random::<f32>()).collect();
        for y in 0..h {
            for x in 0..w {
                let v = bilinear(&lattice, gw, gh, x as f64 / cell, y as f64 / cell);
                out[y * w + x] += amp * v;
            }
        }
        total += amp;
        amp *= 0.5;
        cell = (cell / 2.0).max(1.0);
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn frost(img: &Image, image_weight: f64, frost_weight: f64, rng: &mut ChaCha8Rng) -> Image {
    let (w, h) = (img.width(), img.height());
    let base = value_noise(rng, w, h, (w.max(h) as f64 / 4.0).max(2.0), 4);
    let grain = value_noise(rng, w, h, 2.0, 2);
    let (iw, fw) = (image_weight as f32, frost_weight as f32);
    let tint = [0.82f32, 0.9, 1.0];
    Image::from_fn(w, h, |x, y| {
        let i = y * w + x;
        let b = ((base[i] - 0.3) / 0.4).clamp(0.0, 1.0);
        let ice = (0.6 * b * b * (3.0 - 2.0 * b) + 0.4 * grain[i]).clamp(0.0, 1.0);
        let px = img.pixel(x, y);
        std::array::from_fn(|c| iw * px[c] + fw * ice * tint[c])
    })
}

/// Diamond-square heightmap on a `size`x`size` torus, normalised to [0, 1].
fn plasma_fractal(size: usize, decay: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut map = vec![0.0f64; size * size];
    let idx = |x: usize, y: usize| (y % size) * size + (x % size);
    let mut step = size;
    let mut range = 100.0;
    while step >= 2 {
        let half = step / 2;
        for y in (0..size).step_by(step) {
            for x in (0..size).step_by(step) {
                let avg = (map[idx(x, y)] + map[idx(x + step, y)] + map[idx(x, y + step)] + map[idx(x + step, y + step)])
                    / 4.0;
                map[idx(x + half, y + half)] = avg + rng.random_range(-range..=range);
            }
        }
        for y in (0..size).step_by(half) {
            let x0 = if (y / half) % 2 == 0 { half } else { 0 };
            for x in (x0..size).step_by(step) {
                let avg = (map[idx(x + size - half, y)]
                    + map[idx(x + half, y)]
                    + map[idx(x, y + size - half)]
                    + map[idx(x, y + half)])
                    / 4.0;
                map[idx(x, y)] = avg + rng.random_range(-range..=range);
            }
        }
        step = half;
        range /= decay;
    }
    let min = map.iter().cloned().fold(f64::INFINITY, f64::min);
    map.iter_mut().for_each(|v| *v -= min);
    let max = map.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        map.iter_mut().for_each(|v| *v /= max);
    }
    map
}

fn fog(img: &Image, strength: f64, decay: f64, rng: &mut ChaCha8Rng) -> Image {
    let (w, h) = (img.width(), img.height());
    let size = w.max(h).next_power_of_two().max(2);
    let plasma = plasma_fractal(size, decay, rng);
    let max_val = img.data().iter().cloned().fold(0.0f32, f32::max) as f64;
    let scale = if max_val + strength > 0.0 { max_val / (max_val + strength) } else { 0.0 };
    Image::from_fn(w, h, |x, y| {
        let f = strength * plasma[y * size + x];
        img.pixel(x, y).map(|v| ((v as f64 + f) * scale) as f32)
    })
}

fn spatter(img: &Image, t: &SeverityTable, s: usize, rng: &mut ChaCha8Rng) -> Image {
    let p = &t.spatter;
    let (w, h) = (img.width(), img.height());
    let raw = normal_plane(rng, w * h, p.mean[s], p.std[s]);
    let mut liquid = gaussian_blur_plane(&raw, w, h, p.sigma[s]);
    let thr = p.threshold[s] as f32;
    liquid.iter_mut().for_each(|v| {
        if *v < thr {
            *v = 0.0
        }
    });
    if p.mud[s] {
        let mask: Vec<f32> = liquid.iter().map(|&v| if v > thr { 1.0 } else { 0.0 }).collect();
        let mut m = gaussian_blur_plane(&mask, w, h, p.intensity[s]);
        m.iter_mut().for_each(|v| {
            if *v < 0.8 {
                *v = 0.0
            }
        });
        let mud = [63.0f32 / 255.0, 42.0 / 255.0, 20.0 / 255.0];
        Image::from_fn(w, h, |x, y| {
            let mv = m[y * w + x];
            let px = img.pixel(x, y);
            std::array::from_fn(|c| px[c] * (1.0 - mv) + mud[c] * mv)
        })
    } else {
        let max = liquid.iter().cloned().fold(0.0f32, f32::max);
        let k = if max > 0.0 { p.intensity[s] as f32 / max } else { 0.0 };
        let water = [175.0f32 / 255.0, 238.0 / 255.0, 238.0 / 255.0];
        Image::from_fn(w, h, |x, y| {
            let mv = liquid[y * w + x] * k;
            let px = img.pixel(x, y);
            std::array::from_fn(|c| px[c] + mv * water[c])
        })
    }
}

/// Peak signal-to-noise ratio in dB of `b` against `a`, values in [0, 1].
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let mse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>()
        / a.data().len().max(1) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Test-split view of a manifest: test images and pairs whose endpoints are
/// both test images.
pub fn test_view(m: &DatasetManifest) -> DatasetManifest {
    let images: Vec<_> = m.images.iter().filter(|e| e.split == Split::Test).cloned().collect();
    let ids: std::collections::HashSet<&str> = images.iter().map(|e| e.id.as_str()).collect();
    let pairs = m.pairs.iter().filter(|p| ids.contains(p.src.as_str()) && ids.contains(p.tgt.as_str())).cloned().collect();
    DatasetManifest { images, pairs, corruption: None, ..m.clone() }
}

/// Relative path of one stored variant under the corruption root.
pub fn variant_path(kind: CorruptionKind, severity: u8, image_id: &str) -> PathBuf {
    PathBuf::from(kind.as_str()).join(severity.to_string()).join(format!("{image_id}.{}", kind.extension()))
}

/// Writes every (kind, severity) variant of every test image under `out_dir`
/// plus `manifest.json`, which keeps the clean annotations and names the
/// variants in its corruption block. Returns the derived manifest.
pub fn build_corrupted_set(
    clean: &Dataset,
    out_dir: &Path,
    seed: u64,
    kinds: &[CorruptionKind],
) -> Result<DatasetManifest> {
    if kinds.is_empty() {
        return Err(Error::InvalidArgument("at least one corruption kind is required".into()));
    }
    let mut derived = test_view(&clean.manifest);
    if derived.images.is_empty() {
        return Err(Error::InvalidArgument("manifest has no test images".into()));
    }
    let mut jobs = Vec::new();
    for e in &derived.images {
        for &k in kinds {
            for sev in SEVERITIES {
                jobs.push((e.id.as_str(), k, sev));
            }
        }
    }
    jobs.par_iter().try_for_each(|&(id, kind, sev)| -> Result<()> {
        let img = clean.image(id)?;
        let spec = CorruptionSpec::for_image(kind, sev, seed, id)?;
        let path = out_dir.join(variant_path(kind, sev, id));
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        if kind == CorruptionKind::Jpeg {
            let bytes = encode_jpeg(img, severity_table().jpeg.quality[sev as usize - 1])?;
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
        } else {
            corrupt(img, &spec)?.save(&path)
        }
    })?;
    derived.corruption = Some(CorruptionInfo {
        seed,
        root: ".".into(),
        kinds: kinds.iter().map(|k| k.as_str().to_string()).collect(),
        severities: SEVERITIES.to_vec(),
    });
    derived.save(&out_dir.join("manifest.json"))?;
    Ok(derived)
}

/// Loads one (kind, severity) slice of a corrupted set.
pub fn load_slice(manifest_path: &Path, kind: CorruptionKind, severity: u8) -> Result<Dataset> {
    check_severity(severity)?;
    let m = DatasetManifest::load(manifest_path)?;
    let info = m
        .corruption
        .clone()
        .ok_or_else(|| Error::ManifestMismatch("manifest has no corruption block".into()))?;
    if !info.kinds.iter().any(|k| k == kind.as_str()) {
        return Err(Error::UnsupportedKind(kind.as_str().into()));
    }
    if !info.severities.contains(&severity) {
        return Err(Error::InvalidSeverity(severity));
    }
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let root = base.join(&info.root);
    Dataset::load_images(m, &base, |id| Some(root.join(variant_path(kind, severity, id))))
}

/// PCK per severity (rows) and kind (columns) plus the clean score.
#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessReport {
    pub kinds: Vec<CorruptionKind>,
    /// `cells[severity - 1][kind index]`.
    pub cells: Vec<Vec<f64>>,
    pub clean: f64,
}

impl RobustnessReport {
    pub fn from_fn(
        kinds: &[CorruptionKind],
        clean: f64,
        mut cell: impl FnMut(CorruptionKind, u8) -> Result<f64>,
    ) -> Result<Self> {
        let mut cells = Vec::with_capacity(5);
        for sev in SEVERITIES {
            cells.push(kinds.iter().map(|&k| cell(k, sev)).collect::<Result<Vec<_>>>()?);
        }
        Ok(RobustnessReport { kinds: kinds.to_vec(), cells, clean })
    }

    /// Mean over kinds at one severity.
    pub fn severity_avg(&self, severity: u8) -> f64 {
        mean(&self.cells[severity as usize - 1])
    }

    /// Mean over severities for one kind column.
    pub fn kind_avg(&self, col: usize) -> f64 {
        mean(&self.cells.iter().map(|r| r[col]).collect::<Vec<_>>())
    }

    /// Mean over all cells.
    pub fn corrupted_avg(&self) -> f64 {
        mean(&self.cells.iter().flatten().copied().collect::<Vec<_>>())
    }

    /// Rows `1..5` and `avg`; columns are the kinds, `corrupted_avg` and `clean`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::InvalidArgument(e.to_string());
        let mut header = vec!["severity".to_string()];
        header.extend(self.kinds.iter().map(|k| k.as_str().to_string()));
        header.push("corrupted_avg".into());
        header.push("clean".into());
        out.write_record(&header).map_err(err)?;
        for sev in SEVERITIES {
            let mut row = vec![sev.to_string()];
            row.extend(self.cells[sev as usize - 1].iter().map(|v| v.to_string()));
            row.push(self.severity_avg(sev).to_string());
            row.push(self.clean.to_string());
            out.write_record(&row).map_err(err)?;
        }
        let mut row = vec!["avg".to_string()];
        row.extend((0..self.kinds.len()).map(|c| self.kind_avg(c).to_string()));
        row.push(self.corrupted_avg().to_string());
        row.push(self.clean.to_string());
        out.write_record(&row).map_err(err)?;
        out.flush().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn pair_ids(m: &DatasetManifest) -> Vec<String> {
    let mut ids: Vec<String> = m.pairs.iter().map(|p| p.id()).collect();
    ids.sort();
    ids
}

/// Scores a model on every slice of a corrupted set and on the clean test
/// split.
pub fn robustness_eval(
    params: &MatcherParams,
    corrupted_manifest: &Path,
    clean: &Dataset,
    alpha: f64,
    norm: PckNorm,
) -> Result<RobustnessReport> {
    let derived = DatasetManifest::load(corrupted_manifest)?;
    let info = derived
        .corruption
        .clone()
        .ok_or_else(|| Error::ManifestMismatch("manifest has no corruption block".into()))?;
    let clean_test = test_view(&clean.manifest);
    if pair_ids(&derived) != pair_ids(&clean_test) {
        return Err(Error::ManifestMismatch("corrupted and clean test pairs differ".into()));
    }
    let kinds = info.kinds.iter().map(|k| k.parse()).collect::<Result<Vec<CorruptionKind>>>()?;
    let clean_pck = evaluate_report(
        PredictionSource::Model { params, dataset: clean },
        &clean.manifest,
        Split::Test,
        &[alpha],
        norm,
    )?
    .primary_pck();
    RobustnessReport::from_fn(&kinds, clean_pck, |k, sev| {
        let ds = load_slice(corrupted_manifest, k, sev)?;
        Ok(evaluate_report(PredictionSource::Model { params, dataset: &ds }, &ds.manifest, Split::Test, &[alpha], norm)?
            .primary_pck())
    })
}

#[cfg(test)]
mod tests;
