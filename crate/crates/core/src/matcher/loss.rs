//! Endpoint-error losses with exact gradients through normalisation,
//! correlation, softmax and soft-argmax.

use crate::annotator::PseudoLabel;
use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::image::Image;

use serde::{Deserialize, Serialize};

use super::{dot, extract_raw, project, softmax_into, MatchField, MatcherParams, RawFeatures};

/// Sparse keypoint correspondences `tgt[k] -> src[k]` with a gating mask.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseSupervision {
    pub src: Vec<Point2>,
    pub tgt: Vec<Point2>,
    pub mask: Vec<bool>,
}

impl SparseSupervision {
    pub fn new(src: Vec<Point2>, tgt: Vec<Point2>) -> Self {
        let mask = vec![true; src.len()];
        SparseSupervision { src, tgt, mask }
    }

    pub fn active(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Per-entry distance between predicted and supervised source points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointLoss {
    /// Squared endpoint error.
    #[default]
    Squared,
    /// `sqrt(r² + 1)`, linear in the endpoint error away from zero.
    Charbonnier,
}

impl EndpointLoss {
    /// Loss value and its derivative with respect to the residual.
    fn eval(self, rx: f64, ry: f64) -> (f64, f64, f64) {
        match self {
            EndpointLoss::Squared => (rx * rx + ry * ry, 2.0 * rx, 2.0 * ry),
            EndpointLoss::Charbonnier => {
                let d = (rx * rx + ry * ry + 1.0).sqrt();
                (d, rx / d, ry / d)
            }
        }
    }
}

impl std::str::FromStr for EndpointLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(EndpointLoss::Squared),
            "charbonnier" => Ok(EndpointLoss::Charbonnier),
            _ => Err(Error::Config(format!("unknown endpoint loss `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Supervision<'a> {
    Sparse(&'a SparseSupervision),
    Dense(&'a PseudoLabel),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// Same layout as `MatcherParams::projection`.
    pub grad: Vec<f64>,
    /// Number of unmasked supervision entries averaged over.
    pub entries: usize,
}

pub fn loss_and_grad(
    params: &MatcherParams,
    pair: (&Image, &Image),
    supervision: Supervision<'_>,
    weight: f64,
) -> Result<LossGrad> {
    params.validate()?;
    let rs = extract_raw(pair.0, &params.descriptor)?;
    let rt = extract_raw(pair.1, &params.descriptor)?;
    loss_and_grad_raw(params, &rs, &rt, supervision, weight, EndpointLoss::Squared)
}

/// Mean endpoint loss over the unmasked entries, scaled by `weight`, and its
/// gradient with respect to the projection.
pub fn loss_and_grad_raw(
    params: &MatcherParams,
    src: &RawFeatures,
    tgt: &RawFeatures,
    supervision: Supervision<'_>,
    weight: f64,
    distance: EndpointLoss,
) -> Result<LossGrad> {
    let fs = project(src, params)?;
    let ft = project(tgt, params)?;
    let (ns, nt, e) = (fs.grid.len(), ft.grid.len(), fs.dim);
    let beta = params.temperature;
    let centers = MatchField::cell_centers(&fs.descriptor, fs.grid);

    // Target columns involved, in ascending order.
    let mut needed = vec![false; nt];
    match supervision {
        Supervision::Sparse(s) => {
            if s.src.len() != s.tgt.len() || s.mask.len() != s.src.len() {
                return Err(Error::LengthMismatch { pred: s.src.len(), gt: s.tgt.len() });
            }
            for (q, m) in s.tgt.iter().zip(&s.mask) {
                if !*m {
                    continue;
                }
                if !ft.image.contains(q) {
                    return Err(Error::OutOfBounds { x: q.x, y: q.y, width: ft.image.width, height: ft.image.height });
                }
                let c = ft.descriptor.to_cell(*q);
                for (j, w) in MatchField::bilinear_taps(ft.grid, c.x, c.y) {
                    if w != 0.0 {
                        needed[j] = true;
                    }
                }
            }
        }
        Supervision::Dense(label) => {
            if label.field.tgt_grid != ft.grid {
                return Err(Error::DimensionMismatch { left: label.field.tgt_grid.len(), right: nt });
            }
            for (j, m) in label.mask.iter().enumerate() {
                needed[j] = *m;
            }
        }
    }
    let columns: Vec<usize> = (0..nt).filter(|j| needed[*j]).collect();
    if columns.is_empty() {
        return Err(Error::EmptySupervision);
    }
    let mut slot = vec![usize::MAX; nt];
    for (k, j) in columns.iter().enumerate() {
        slot[*j] = k;
    }

    // Forward over the needed columns.
    let mut weights = vec![0.0; columns.len() * ns];
    let mut preds = vec![Point2::default(); columns.len()];
    let mut scores = vec![0.0; ns];
    for (k, &j) in columns.iter().enumerate() {
        let t = ft.cell(j);
        for (i, s) in scores.iter_mut().enumerate() {
            *s = dot(fs.cell(i), t);
        }
        let a = &mut weights[k * ns..(k + 1) * ns];
        softmax_into(&scores, beta, a);
        let mut p = Point2::default();
        for (ai, ci) in a.iter().zip(&centers) {
            p.x += ai * ci.x;
            p.y += ai * ci.y;
        }
        preds[k] = p;
    }

    // Loss and upstream gradient on the soft-argmax outputs.
    let mut upstream = vec![Point2::default(); columns.len()];
    let mut loss = 0.0;
    let entries;
    match supervision {
        Supervision::Sparse(s) => {
            entries = s.active();
            let n = entries as f64;
            for ((p_src, q), m) in s.src.iter().zip(&s.tgt).zip(&s.mask) {
                if !*m {
                    continue;
                }
                let c = ft.descriptor.to_cell(*q);
                let taps = MatchField::bilinear_taps(ft.grid, c.x, c.y);
                let mut pred = Point2::default();
                for (j, w) in taps {
                    if w != 0.0 {
                        pred.x += w * preds[slot[j]].x;
                        pred.y += w * preds[slot[j]].y;
                    }
                }
                let rx = pred.x - p_src.x;
                let ry = pred.y - p_src.y;
                let (l, gx, gy) = distance.eval(rx, ry);
                loss += l;
                for (j, w) in taps {
                    if w != 0.0 {
                        let u = &mut upstream[slot[j]];
                        u.x += w * gx / n;
                        u.y += w * gy / n;
                    }
                }
            }
            loss /= n;
        }
        Supervision::Dense(label) => {
            entries = columns.len();
            let n = entries as f64;
            for (k, &j) in columns.iter().enumerate() {
                let target = label.field.coords[j];
                let rx = preds[k].x - target.x;
                let ry = preds[k].y - target.y;
                let (l, gx, gy) = distance.eval(rx, ry);
                loss += l;
                upstream[k] = Point2::new(gx / n, gy / n);
            }
            loss /= n;
        }
    }

    // dL/dC(i, j) = a_ij ((c_i - m_j) · g_j) / beta, then into both descriptor sets.
    let mut d_zs = vec![0.0; ns * e];
    let mut d_zt = vec![0.0; nt * e];
    for (k, &j) in columns.iter().enumerate() {
        let g = upstream[k];
        if g.x == 0.0 && g.y == 0.0 {
            continue;
        }
        let m = preds[k];
        let a = &weights[k * ns..(k + 1) * ns];
        let zt = ft.cell(j);
        let dzt = &mut d_zt[j * e..(j + 1) * e];
        for i in 0..ns {
            let dc = a[i] * ((centers[i].x - m.x) * g.x + (centers[i].y - m.y) * g.y) / beta;
            if dc == 0.0 {
                continue;
            }
            let zs = fs.cell(i);
            let dzs = &mut d_zs[i * e..(i + 1) * e];
            for c in 0..e {
                dzs[c] += dc * zt[c];
                dzt[c] += dc * zs[c];
            }
        }
    }

    let mut grad = vec![0.0; params.projection.len()];
    backprop_projection(&fs.data, &fs.norms, &d_zs, &src.data, e, &mut grad);
    backprop_projection(&ft.data, &ft.norms, &d_zt, &tgt.data, e, &mut grad);
    if weight != 1.0 {
        grad.iter_mut().for_each(|g| *g *= weight);
        loss *= weight;
    }
    Ok(LossGrad { loss, grad, entries })
}

/// Accumulates `F^T dY` where `dY = (dZ - z (z·dZ)) / |y|` per cell.
fn backprop_projection(z: &[f64], norms: &[f64], d_z: &[f64], raw: &[f64], e: usize, grad: &mut [f64]) {
    let d = raw.len() / norms.len();
    let mut dy = vec![0.0; e];
    for (i, &norm) in norms.iter().enumerate() {
        if norm == 0.0 {
            continue;
        }
        let zi = &z[i * e..(i + 1) * e];
        let gz = &d_z[i * e..(i + 1) * e];
        if gz.iter().all(|v| *v == 0.0) {
            continue;
        }
        let proj = dot(zi, gz);
        for c in 0..e {
            dy[c] = (gz[c] - zi[c] * proj) / norm;
        }
        let f = &raw[i * d..(i + 1) * d];
        for (k, fk) in f.iter().enumerate() {
            if *fk == 0.0 {
                continue;
            }
            let row = &mut grad[k * e..(k + 1) * e];
            for c in 0..e {
                row[c] += fk * dy[c];
            }
        }
    }
}
