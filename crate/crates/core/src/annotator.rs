//! Machine annotation: dense pseudo-labels from a frozen teacher, gated by a
//! confidence threshold, and their warping under target-side augmentation.

use crate::error::{Error, Result};
use crate::geometry::{GeometricTransform, PixelGrid, Point2};
use crate::image::Image;
use crate::matcher::{self, correlate, project, soft_argmax_field, MatchField, MatcherParams, RawFeatures};

/// Dense pseudo-label at feature-lattice resolution.
///
/// `mask[i]` is `field.confidence[i] > tau`. Cells of a warped label whose
/// pre-image leaves the original lattice carry confidence 0.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub field: MatchField,
    pub mask: Vec<bool>,
    pub tau: f64,
    pub teacher_generation: u32,
    pub pair_id: String,
}

impl PseudoLabel {
    pub fn from_field(field: MatchField, tau: f64, teacher_generation: u32, pair_id: impl Into<String>) -> Self {
        let mask = gate(&field.confidence, tau);
        PseudoLabel { field, mask, tau, teacher_generation, pair_id: pair_id.into() }
    }

    pub fn retained(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn retained_fraction(&self) -> f64 {
        self.retained() as f64 / self.mask.len().max(1) as f64
    }
}

/// Strict confidence gate.
pub fn gate(confidence: &[f64], tau: f64) -> Vec<bool> {
    confidence.iter().map(|c| *c > tau).collect()
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau must lie in [0, 1], got {tau}")));
    }
    Ok(())
}

pub fn annotate_pair(teacher: &MatcherParams, i_s: &Image, i_t: &Image, tau: f64) -> Result<PseudoLabel> {
    check_tau(tau)?;
    let field = matcher::match_pair(teacher, i_s, i_t)?;
    Ok(PseudoLabel::from_field(field, tau, 0, String::new()))
}

/// Same as [`annotate_pair`] on precomputed filter-bank responses.
pub fn annotate_raw(
    teacher: &MatcherParams,
    src: &RawFeatures,
    tgt: &RawFeatures,
    tau: f64,
    teacher_generation: u32,
    pair_id: &str,
) -> Result<PseudoLabel> {
    check_tau(tau)?;
    let fs = project(src, teacher)?;
    let ft = project(tgt, teacher)?;
    let field = soft_argmax_field(&correlate(&fs, &ft)?, teacher.temperature)?;
    Ok(PseudoLabel::from_field(field, tau, teacher_generation, pair_id))
}

/// Resamples a label onto the lattice of a target image warped by `t`
/// (output image size `tgt_grid`). Source coordinates are untouched since
/// the source image is not warped.
pub fn warp_pseudo_label(label: &PseudoLabel, t: &GeometricTransform, tgt_grid: PixelGrid) -> Result<PseudoLabel> {
    let inv = t.inverse_map()?;
    let desc = label.field.descriptor;
    let old = label.field.tgt_grid;
    let grid = desc.cell_grid(tgt_grid);
    let mut coords = Vec::with_capacity(grid.len());
    let mut confidence = Vec::with_capacity(grid.len());
    for r in 0..grid.height {
        for c in 0..grid.width {
            let q = desc.cell_center(r, c);
            let pre = inv.apply(q).map(|p| desc.to_cell(p));
            match pre {
                Some(u) if u.x >= 0.0 && u.y >= 0.0 && u.x <= (old.width - 1) as f64 && u.y <= (old.height - 1) as f64 => {
                    let mut p = Point2::default();
                    let mut conf = 0.0;
                    for (i, w) in MatchField::bilinear_taps(old, u.x, u.y) {
                        p.x += w * label.field.coords[i].x;
                        p.y += w * label.field.coords[i].y;
                        conf += w * label.field.confidence[i];
                    }
                    coords.push(p);
                    confidence.push(conf);
                }
                _ => {
                    coords.push(Point2::default());
                    confidence.push(0.0);
                }
            }
        }
    }
    let field = MatchField { tgt_grid: grid, tgt_image: tgt_grid, descriptor: desc, coords, confidence };
    Ok(PseudoLabel::from_field(field, label.tau, label.teacher_generation, label.pair_id.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::DescriptorConfig;

    fn textured(w: usize, h: usize, seed: u32) -> Image {
        Image::from_fn(w, h, |x, y| {
            let v = (((x as u32).wrapping_mul(2654435761) ^ (y as u32).wrapping_mul(40503) ^ seed.wrapping_mul(97)) % 255) as f32 / 255.0;
            let s = ((x as f32 * 0.4).sin() * (y as f32 * 0.3).cos() * 0.5 + 0.5) * 0.6 + v * 0.4;
            [s, s, s]
        })
    }

    fn label_with(conf: Vec<f64>, grid: PixelGrid, tau: f64) -> PseudoLabel {
        let desc = DescriptorConfig::default();
        let coords = MatchField::cell_centers(&desc, grid).into_iter().map(|p| Point2::new(p.x * 0.5 + 3.0, p.y)).collect();
        let image = PixelGrid::new(grid.height * 4, grid.width * 4);
        let field = MatchField { tgt_grid: grid, tgt_image: image, descriptor: desc, coords, confidence: conf };
        PseudoLabel::from_field(field, tau, 1, "p")
    }

    #[test]
    fn tau_extremes() {
        let p = MatcherParams::default();
        let (a, b) = (textured(32, 32, 1), textured(32, 32, 2));
        let all = annotate_pair(&p, &a, &b, 0.0).unwrap();
        assert!(all.mask.iter().all(|m| *m));
        let none = annotate_pair(&p, &a, &b, 1.0).unwrap();
        assert!(none.mask.iter().all(|m| !*m));
    }

    #[test]
    fn gate_recount_matches_scan() {
        let p = MatcherParams::default();
        let label = annotate_pair(&p, &textured(48, 40, 3), &textured(48, 40, 4), 0.7).unwrap();
        let mut count = 0;
        for c in &label.field.confidence {
            if *c > 0.7 {
                count += 1;
            }
        }
        assert_eq!(label.retained(), count);
    }

    #[test]
    fn strict_threshold_excludes_ties() {
        let grid = PixelGrid::new(1, 3);
        let label = label_with(vec![0.5, 0.7, 0.9], grid, 0.7);
        assert_eq!(label.mask, vec![false, false, true]);
    }

    #[test]
    fn identity_warp_is_identity() {
        let grid = PixelGrid::new(6, 5);
        let conf: Vec<f64> = (0..30).map(|i| (i as f64 + 1.0) / 31.0).collect();
        let label = label_with(conf, grid, 0.4);
        let out = warp_pseudo_label(&label, &GeometricTransform::identity(), label.field.tgt_image).unwrap();
        assert_eq!(out.mask, label.mask);
        for (a, b) in out.field.coords.iter().zip(&label.field.coords) {
            assert!(a.dist(b) < 1e-9);
        }
    }

    #[test]
    fn integer_cell_shift() {
        let grid = PixelGrid::new(4, 6);
        let label = label_with(vec![0.9; 24], grid, 0.5);
        let t = GeometricTransform::translation(8.0, 0.0);
        let out = warp_pseudo_label(&label, &t, label.field.tgt_image).unwrap();
        for r in 0..4 {
            for c in 0..6 {
                let i = r * 6 + c;
                if c < 2 {
                    assert!(!out.mask[i]);
                } else {
                    assert!(out.mask[i]);
                    assert_eq!(out.field.coords[i], label.field.coords[r * 6 + c - 2]);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_tau() {
        let p = MatcherParams::default();
        let img = textured(16, 16, 1);
        assert!(annotate_pair(&p, &img, &img, -0.1).is_err());
        assert!(annotate_pair(&p, &img, &img, 1.5).is_err());
    }
}
