//! The matching function: fixed filter-bank descriptors, a learnable linear
//! projection, cosine correlation and soft-argmax correspondence transfer.
//!
//! Feature cells sit on a stride-`s` lattice; cell `(r, c)` is centred on
//! image pixel `(c·s + (s-1)/2, r·s + (s-1)/2)`.

mod features;
mod loss;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PixelGrid, Point2};
use crate::image::Image;

pub use features::{extract_raw, FilterBank, RawFeatures, RAW_DIM};
pub use loss::{loss_and_grad, loss_and_grad_raw, EndpointLoss, LossGrad, SparseSupervision, Supervision};

pub const DEFAULT_TEMPERATURE: f64 = 0.02;
pub const DEFAULT_STRIDE: usize = 4;

/// Fixed part of the descriptor pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptorConfig {
    /// Cell stride in pixels.
    pub stride: usize,
    /// Side of the square pooling window centred on each cell, in pixels.
    pub window: usize,
    #[serde(default)]
    pub bank: FilterBank,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        DescriptorConfig { stride: DEFAULT_STRIDE, window: 2 * DEFAULT_STRIDE, bank: FilterBank::Basic }
    }
}

impl DescriptorConfig {
    /// Raw descriptor length produced by this configuration.
    pub fn raw_dim(&self) -> usize {
        self.bank.regions() * RAW_DIM
    }

    pub fn cell_grid(&self, image: PixelGrid) -> PixelGrid {
        PixelGrid::new(image.height / self.stride, image.width / self.stride)
    }

    #[inline]
    pub fn cell_center(&self, row: usize, col: usize) -> Point2 {
        let off = (self.stride as f64 - 1.0) / 2.0;
        Point2::new((col * self.stride) as f64 + off, (row * self.stride) as f64 + off)
    }

    /// Image pixel coordinates to continuous cell coordinates.
    #[inline]
    pub fn to_cell(&self, p: Point2) -> Point2 {
        let off = (self.stride as f64 - 1.0) / 2.0;
        let s = self.stride as f64;
        Point2::new((p.x - off) / s, (p.y - off) / s)
    }
}

/// Trainable matcher state: `projection` is `in_dim x out_dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MatcherParams {
    pub in_dim: usize,
    pub out_dim: usize,
    pub projection: Vec<f64>,
    pub temperature: f64,
    pub descriptor: DescriptorConfig,
}

impl MatcherParams {
    /// Identity projection over the raw filter bank.
    pub fn identity(descriptor: DescriptorConfig, temperature: f64) -> Self {
        let d = descriptor.raw_dim();
        let mut projection = vec![0.0; d * d];
        for i in 0..d {
            projection[i * d + i] = 1.0;
        }
        MatcherParams { in_dim: d, out_dim: d, projection, temperature, descriptor }
    }

    pub fn with_projection(mut self, projection: Vec<f64>, out_dim: usize) -> Result<Self> {
        if projection.len() != self.in_dim * out_dim {
            return Err(Error::DimensionMismatch { left: projection.len(), right: self.in_dim * out_dim });
        }
        self.projection = projection;
        self.out_dim = out_dim;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.in_dim != self.descriptor.raw_dim() {
            return Err(Error::DimensionMismatch { left: self.in_dim, right: self.descriptor.raw_dim() });
        }
        if self.out_dim == 0 || self.projection.len() != self.in_dim * self.out_dim {
            return Err(Error::DimensionMismatch { left: self.projection.len(), right: self.in_dim * self.out_dim });
        }
        if self.projection.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("projection has non-finite entries".into()));
        }
        if self.descriptor.stride == 0 || self.descriptor.window == 0 {
            return Err(Error::InvalidArgument("descriptor stride and window must be positive".into()));
        }
        Ok(())
    }
}

impl Default for MatcherParams {
    fn default() -> Self {
        MatcherParams::identity(DescriptorConfig::default(), DEFAULT_TEMPERATURE)
    }
}

/// Projected, L2-normalised descriptors on the cell lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub grid: PixelGrid,
    pub image: PixelGrid,
    pub descriptor: DescriptorConfig,
    pub dim: usize,
    /// `grid.len() x dim`, row-major, unit rows.
    pub data: Vec<f64>,
    /// Pre-normalisation norms; zero marks a degenerate cell replaced by the
    /// constant unit vector.
    pub(crate) norms: Vec<f64>,
}

impl FeatureMap {
    #[inline]
    pub fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

const DEGENERATE_NORM: f64 = 1e-12;

/// Applies the projection and normalises each cell.
pub fn project(raw: &RawFeatures, params: &MatcherParams) -> Result<FeatureMap> {
    if raw.dim != params.in_dim {
        return Err(Error::DimensionMismatch { left: raw.dim, right: params.in_dim });
    }
    let n = raw.grid.len();
    let (d, e) = (params.in_dim, params.out_dim);
    let mut data = vec![0.0; n * e];
    let mut norms = vec![0.0; n];
    for i in 0..n {
        let f = &raw.data[i * d..(i + 1) * d];
        let y = &mut data[i * e..(i + 1) * e];
        for (k, fk) in f.iter().enumerate() {
            if *fk == 0.0 {
                continue;
            }
            let w = &params.projection[k * e..(k + 1) * e];
            for (yj, wj) in y.iter_mut().zip(w) {
                *yj += fk * wj;
            }
        }
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > DEGENERATE_NORM {
            y.iter_mut().for_each(|v| *v /= norm);
            norms[i] = norm;
        } else {
            let c = 1.0 / (e as f64).sqrt();
            y.iter_mut().for_each(|v| *v = c);
            norms[i] = 0.0;
        }
    }
    Ok(FeatureMap { grid: raw.grid, image: raw.image, descriptor: raw.descriptor, dim: e, data, norms })
}

pub fn extract_features(img: &Image, params: &MatcherParams) -> Result<FeatureMap> {
    params.validate()?;
    let raw = extract_raw(img, &params.descriptor)?;
    project(&raw, params)
}

/// Cosine score matrix between every source and target cell.
///
/// Stored target-major (`tgt.len() x src.len()`) so each target column is
/// contiguous; [`CorrelationMap::get`] indexes as `(source, target)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMap {
    pub src_grid: PixelGrid,
    pub tgt_grid: PixelGrid,
    pub src_descriptor: DescriptorConfig,
    pub tgt_image: PixelGrid,
    pub tgt_descriptor: DescriptorConfig,
    by_target: Vec<f64>,
}

impl CorrelationMap {
    #[inline]
    pub fn get(&self, src: usize, tgt: usize) -> f64 {
        self.by_target[tgt * self.src_grid.len() + src]
    }

    pub fn column(&self, tgt: usize) -> &[f64] {
        let n = self.src_grid.len();
        &self.by_target[tgt * n..(tgt + 1) * n]
    }

    /// Source-major copy: row `i` holds scores of source cell `i`.
    pub fn to_source_major(&self) -> Vec<f64> {
        let (ns, nt) = (self.src_grid.len(), self.tgt_grid.len());
        let mut out = vec![0.0; ns * nt];
        for j in 0..nt {
            for i in 0..ns {
                out[i * nt + j] = self.by_target[j * ns + i];
            }
        }
        out
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn correlate(fs: &FeatureMap, ft: &FeatureMap) -> Result<CorrelationMap> {
    if fs.dim != ft.dim {
        return Err(Error::DimensionMismatch { left: fs.dim, right: ft.dim });
    }
    let (ns, nt) = (fs.grid.len(), ft.grid.len());
    let mut by_target = vec![0.0; ns * nt];
    for j in 0..nt {
        let t = ft.cell(j);
        for i in 0..ns {
            by_target[j * ns + i] = dot(fs.cell(i), t);
        }
    }
    Ok(CorrelationMap {
        src_grid: fs.grid,
        tgt_grid: ft.grid,
        src_descriptor: fs.descriptor,
        tgt_image: ft.image,
        tgt_descriptor: ft.descriptor,
        by_target,
    })
}

/// Softmax over one score column at temperature `beta`; writes weights into
/// `out` and returns the maximum weight.
#[inline]
pub(crate) fn softmax_into(scores: &[f64], beta: f64, out: &mut [f64]) -> f64 {
    let m = scores.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let mut sum = 0.0;
    for (o, s) in out.iter_mut().zip(scores) {
        *o = ((s - m) / beta).exp();
        sum += *o;
    }
    let mut best = 0.0f64;
    for o in out.iter_mut() {
        *o /= sum;
        best = best.max(*o);
    }
    best
}

/// Dense correspondence: for each target cell, the expected source position
/// (source image pixels) and the peak softmax weight as confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchField {
    pub tgt_grid: PixelGrid,
    pub tgt_image: PixelGrid,
    pub descriptor: DescriptorConfig,
    pub coords: Vec<Point2>,
    pub confidence: Vec<f64>,
}

impl MatchField {
    /// Cell-center positions of a lattice, in image pixels.
    pub fn cell_centers(descriptor: &DescriptorConfig, grid: PixelGrid) -> Vec<Point2> {
        let mut out = Vec::with_capacity(grid.len());
        for r in 0..grid.height {
            for c in 0..grid.width {
                out.push(descriptor.cell_center(r, c));
            }
        }
        out
    }

    /// Bilinear interpolation of per-cell values at continuous cell
    /// coordinates, clamped to the lattice. Returns `(index, weight)` taps.
    pub(crate) fn bilinear_taps(grid: PixelGrid, u: f64, v: f64) -> [(usize, f64); 4] {
        let u = u.clamp(0.0, (grid.width - 1) as f64);
        let v = v.clamp(0.0, (grid.height - 1) as f64);
        let c0 = u.floor() as usize;
        let r0 = v.floor() as usize;
        let c1 = (c0 + 1).min(grid.width - 1);
        let r1 = (r0 + 1).min(grid.height - 1);
        let fu = u - c0 as f64;
        let fv = v - r0 as f64;
        [
            (r0 * grid.width + c0, (1.0 - fu) * (1.0 - fv)),
            (r0 * grid.width + c1, fu * (1.0 - fv)),
            (r1 * grid.width + c0, (1.0 - fu) * fv),
            (r1 * grid.width + c1, fu * fv),
        ]
    }
}

pub fn soft_argmax_field(c: &CorrelationMap, temperature: f64) -> Result<MatchField> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let centers = MatchField::cell_centers(&c.src_descriptor, c.src_grid);
    let nt = c.tgt_grid.len();
    let mut w = vec![0.0; c.src_grid.len()];
    let mut coords = Vec::with_capacity(nt);
    let mut confidence = Vec::with_capacity(nt);
    for j in 0..nt {
        let conf = softmax_into(c.column(j), temperature, &mut w);
        let mut p = Point2::default();
        for (wi, ci) in w.iter().zip(&centers) {
            p.x += wi * ci.x;
            p.y += wi * ci.y;
        }
        coords.push(p);
        confidence.push(conf);
    }
    Ok(MatchField { tgt_grid: c.tgt_grid, tgt_image: c.tgt_image, descriptor: c.tgt_descriptor, coords, confidence })
}

/// Full forward pass for an image pair.
pub fn match_pair(params: &MatcherParams, src: &Image, tgt: &Image) -> Result<MatchField> {
    let fs = extract_features(src, params)?;
    let ft = extract_features(tgt, params)?;
    soft_argmax_field(&correlate(&fs, &ft)?, params.temperature)
}

/// Maps target-image points to source-image points by bilinear
/// interpolation of the field.
pub fn transfer_keypoints(field: &MatchField, tgt_pts: &[Point2]) -> Result<Vec<Point2>> {
    tgt_pts
        .iter()
        .map(|p| {
            if !field.tgt_image.contains(p) {
                return Err(Error::OutOfBounds {
                    x: p.x,
                    y: p.y,
                    width: field.tgt_image.width,
                    height: field.tgt_image.height,
                });
            }
            let q = field.descriptor.to_cell(*p);
            let mut out = Point2::default();
            for (i, w) in MatchField::bilinear_taps(field.tgt_grid, q.x, q.y) {
                out.x += w * field.coords[i].x;
                out.y += w * field.coords[i].y;
            }
            Ok(out)
        })
        .collect()
}

/// Transfers keypoints computing only the target columns they touch.
pub fn predict_keypoints(params: &MatcherParams, src: &RawFeatures, tgt: &RawFeatures, tgt_pts: &[Point2]) -> Result<Vec<Point2>> {
    let fs = project(src, params)?;
    let ft = project(tgt, params)?;
    let centers = MatchField::cell_centers(&fs.descriptor, fs.grid);
    let mut scores = vec![0.0; fs.grid.len()];
    let mut w = vec![0.0; fs.grid.len()];
    let mut cache: std::collections::HashMap<usize, Point2> = std::collections::HashMap::new();
    let mut column = |j: usize| -> Point2 {
        *cache.entry(j).or_insert_with(|| {
            let t = ft.cell(j);
            for (i, s) in scores.iter_mut().enumerate() {
                *s = dot(fs.cell(i), t);
            }
            softmax_into(&scores, params.temperature, &mut w);
            let mut p = Point2::default();
            for (wi, ci) in w.iter().zip(&centers) {
                p.x += wi * ci.x;
                p.y += wi * ci.y;
            }
            p
        })
    };
    tgt_pts
        .iter()
        .map(|p| {
            if !ft.image.contains(p) {
                return Err(Error::OutOfBounds { x: p.x, y: p.y, width: ft.image.width, height: ft.image.height });
            }
            let q = ft.descriptor.to_cell(*p);
            let mut out = Point2::default();
            for (i, wt) in MatchField::bilinear_taps(ft.grid, q.x, q.y) {
                if wt == 0.0 {
                    continue;
                }
                let m = column(i);
                out.x += wt * m.x;
                out.y += wt * m.y;
            }
            Ok(out)
        })
        .collect()
}
