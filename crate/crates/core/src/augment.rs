//! Asymmetric pair augmentation: independent photometric jitter on both
//! images, one geometric warp on the target only, labels warped to match.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotator::{warp_pseudo_label, PseudoLabel};
use crate::error::{Error, Result};
use crate::geometry::{control_grid, warp_image, warp_points_batch, GeometricTransform, PixelGrid, Point2, Tps};
use crate::image::Image;
use crate::matcher::SparseSupervision;
use crate::rng::SeedKey;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhotometricSpec {
    pub apply_probability: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_probability: f64,
}

impl Default for PhotometricSpec {
    fn default() -> Self {
        PhotometricSpec::weak()
    }
}

impl PhotometricSpec {
    pub fn off() -> Self {
        PhotometricSpec { apply_probability: 0.0, brightness: 0.0, contrast: 0.0, saturation: 0.0, grayscale_probability: 0.0 }
    }

    pub fn weak() -> Self {
        PhotometricSpec { apply_probability: 0.2, brightness: 0.2, contrast: 0.2, saturation: 0.2, grayscale_probability: 0.1 }
    }

    pub fn strong() -> Self {
        PhotometricSpec { apply_probability: 0.4, brightness: 0.4, contrast: 0.4, saturation: 0.4, grayscale_probability: 0.2 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("apply_probability", self.apply_probability), ("grayscale_probability", self.grayscale_probability)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("photometric {name} must lie in [0, 1], got {p}")));
            }
        }
        for (name, r) in [("brightness", self.brightness), ("contrast", self.contrast), ("saturation", self.saturation)] {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("photometric {name} half-range must be non-negative, got {r}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometricFamily {
    #[default]
    None,
    Affine,
    Tps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometricSpec {
    pub family: GeometricFamily,
    pub apply_probability: f64,
    /// Rotation half-range in degrees.
    pub rotation_deg: f64,
    /// Scale is drawn from `[1 - scale, 1 + scale]`.
    pub scale: f64,
    /// Translation half-range in pixels.
    pub translation: f64,
    pub tps_grid: usize,
    pub tps_max_displacement: f64,
}

impl Default for GeometricSpec {
    fn default() -> Self {
        GeometricSpec::off()
    }
}

impl GeometricSpec {
    pub fn off() -> Self {
        GeometricSpec {
            family: GeometricFamily::None,
            apply_probability: 0.0,
            rotation_deg: 0.0,
            scale: 0.0,
            translation: 0.0,
            tps_grid: 3,
            tps_max_displacement: 0.0,
        }
    }

    pub fn strong() -> Self {
        GeometricSpec {
            family: GeometricFamily::Affine,
            apply_probability: 0.4,
            rotation_deg: 10.0,
            scale: 0.1,
            translation: 4.0,
            tps_grid: 3,
            tps_max_displacement: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::Config(format!("geometric apply_probability must lie in [0, 1], got {}", self.apply_probability)));
        }
        for (name, r) in [
            ("rotation_deg", self.rotation_deg),
            ("translation", self.translation),
            ("tps_max_displacement", self.tps_max_displacement),
        ] {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("geometric {name} must be non-negative, got {r}")));
            }
        }
        if !(self.scale >= 0.0 && self.scale < 1.0) {
            return Err(Error::Config(format!("geometric scale half-range must lie in [0, 1), got {}", self.scale)));
        }
        if self.family == GeometricFamily::Tps && self.tps_grid < 2 {
            return Err(Error::Config("tps grid must be at least 2x2".into()));
        }
        Ok(())
    }
}

/// A named strength preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPreset {
    pub photometric: PhotometricSpec,
    pub geometric: GeometricSpec,
}

impl Default for AugmentPreset {
    fn default() -> Self {
        AugmentPreset::weak()
    }
}

impl AugmentPreset {
    pub fn off() -> Self {
        AugmentPreset { photometric: PhotometricSpec::off(), geometric: GeometricSpec::off() }
    }

    pub fn weak() -> Self {
        AugmentPreset { photometric: PhotometricSpec::weak(), geometric: GeometricSpec::off() }
    }

    pub fn strong() -> Self {
        AugmentPreset { photometric: PhotometricSpec::strong(), geometric: GeometricSpec::strong() }
    }

    pub fn validate(&self) -> Result<()> {
        self.photometric.validate()?;
        self.geometric.validate()
    }
}

/// One photometric draw. `applied == false` leaves the image untouched.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhotoDraw {
    pub applied: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale: bool,
}

impl PhotoDraw {
    pub const IDENTITY: PhotoDraw = PhotoDraw { applied: false, brightness: 0.0, contrast: 1.0, saturation: 1.0, grayscale: false };

    pub fn apply(&self, img: &Image) -> Image {
        if !self.applied {
            return img.clone();
        }
        let gray = img.to_gray();
        let mean = gray.iter().map(|v| *v as f64).sum::<f64>() / gray.len().max(1) as f64;
        let (b, c, s) = (self.brightness as f32, self.contrast as f32, self.saturation as f32);
        let mean = mean as f32;
        let mut out = img.map_pixels(|p| {
            let l = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
            let mut q = [0.0f32; 3];
            for k in 0..3 {
                let v = if self.grayscale { l } else { l + (p[k] - l) * s };
                q[k] = (v - mean) * c + mean + b;
            }
            q
        });
        out.clamp01();
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraws {
    pub photo_src: PhotoDraw,
    pub photo_tgt: PhotoDraw,
    pub geo_tgt: GeometricTransform,
}

impl AugmentDraws {
    pub fn identity() -> Self {
        AugmentDraws { photo_src: PhotoDraw::IDENTITY, photo_tgt: PhotoDraw::IDENTITY, geo_tgt: GeometricTransform::identity() }
    }
}

fn draw_photo(p: &PhotometricSpec, rng: &mut impl Rng) -> PhotoDraw {
    // Every draw consumes the same number of values so streams stay aligned.
    let applied = rng.random::<f64>() < p.apply_probability;
    let u: [f64; 4] = [rng.random(), rng.random(), rng.random(), rng.random()];
    if !applied {
        return PhotoDraw::IDENTITY;
    }
    let sym = |u: f64, r: f64| (2.0 * u - 1.0) * r;
    PhotoDraw {
        applied,
        brightness: sym(u[0], p.brightness),
        contrast: (1.0 + sym(u[1], p.contrast)).max(0.0),
        saturation: (1.0 + sym(u[2], p.saturation)).max(0.0),
        grayscale: u[3] < p.grayscale_probability,
    }
}

fn draw_geometric(g: &GeometricSpec, grid: PixelGrid, rng: &mut impl Rng) -> Result<GeometricTransform> {
    let applied = rng.random::<f64>() < g.apply_probability;
    let u: [f64; 4] = [rng.random(), rng.random(), rng.random(), rng.random()];
    if !applied || g.family == GeometricFamily::None {
        return Ok(GeometricTransform::identity());
    }
    let sym = |u: f64, r: f64| (2.0 * u - 1.0) * r;
    let center = Point2::new((grid.width as f64 - 1.0) / 2.0, (grid.height as f64 - 1.0) / 2.0);
    match g.family {
        GeometricFamily::None => unreachable!(),
        GeometricFamily::Affine => Ok(GeometricTransform::similarity_about(
            center,
            sym(u[0], g.rotation_deg).to_radians(),
            1.0 + sym(u[1], g.scale),
            sym(u[2], g.translation),
            sym(u[3], g.translation),
        )),
        GeometricFamily::Tps => {
            let k = g.tps_grid;
            let displacement = (0..k * k)
                .map(|_| Point2::new(sym(rng.random(), g.tps_max_displacement), sym(rng.random(), g.tps_max_displacement)))
                .collect();
            let control = control_grid(grid, k);
            Ok(GeometricTransform::Tps(Tps::fit(k, control, displacement, crate::geometry::DEFAULT_TPS_REGULARIZATION)?))
        }
    }
}

/// Draws for one pair whose target image has size `tgt_grid`.
pub fn sample_augmentations(
    p: &PhotometricSpec,
    g: &GeometricSpec,
    tgt_grid: PixelGrid,
    rng: &mut impl Rng,
) -> Result<AugmentDraws> {
    p.validate()?;
    g.validate()?;
    let photo_src = draw_photo(p, rng);
    let photo_tgt = draw_photo(p, rng);
    let geo_tgt = draw_geometric(g, tgt_grid, rng)?;
    Ok(AugmentDraws { photo_src, photo_tgt, geo_tgt })
}

/// Per-item stream keyed by `(seed, item, epoch)`.
pub fn item_rng(seed: u64, item: &str, epoch: u64) -> rand_chacha::ChaCha8Rng {
    SeedKey::new(seed).with_str("augment").with_str(item).with(epoch).rng()
}

#[derive(Clone, Debug, PartialEq)]
pub enum PairLabel {
    Sparse(SparseSupervision),
    Dense(PseudoLabel),
}

fn is_identity(t: &GeometricTransform) -> bool {
    t.as_affine().is_some_and(|a| a.m == crate::geometry::Affine::IDENTITY.m)
}

/// Applies `draws` to a pair and its label. Sparse correspondences whose
/// warped target leaves the image are masked out.
pub fn augment_pair(i_s: &Image, i_t: &Image, label: &PairLabel, draws: &AugmentDraws) -> Result<(Image, Image, PairLabel)> {
    let s = draws.photo_src.apply(i_s);
    let t0 = draws.photo_tgt.apply(i_t);
    if is_identity(&draws.geo_tgt) {
        return Ok((s, t0, label.clone()));
    }
    let grid = i_t.grid();
    let t = warp_image(&t0, &draws.geo_tgt, grid)?;
    let label = match label {
        PairLabel::Dense(l) => PairLabel::Dense(warp_pseudo_label(l, &draws.geo_tgt, grid)?),
        PairLabel::Sparse(sp) => {
            let warped = warp_points_batch(&draws.geo_tgt, &sp.tgt, grid);
            let tgt = warped.iter().map(|(q, _)| *q).collect();
            let mask = sp.mask.iter().zip(&warped).map(|(m, (_, inside))| *m && *inside).collect();
            PairLabel::Sparse(SparseSupervision { src: sp.src.clone(), tgt, mask })
        }
    };
    Ok((s, t, label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_dataset, oracle_field, SynthSpec};

    fn textured() -> Image {
        Image::from_fn(24, 20, |x, y| {
            let v = ((x * 7 + y * 13) % 17) as f32 / 17.0;
            [v, 1.0 - v, 0.5 * v + 0.2]
        })
    }

    #[test]
    fn off_specs_are_identity() {
        let mut rng = SeedKey::new(1).rng();
        for _ in 0..50 {
            let d = sample_augmentations(&PhotometricSpec::off(), &GeometricSpec::off(), PixelGrid::new(20, 24), &mut rng).unwrap();
            assert_eq!(d, AugmentDraws::identity());
        }
        let img = textured();
        let sup = PairLabel::Sparse(SparseSupervision::new(vec![Point2::new(1.0, 2.0)], vec![Point2::new(3.0, 4.0)]));
        let (a, b, l) = augment_pair(&img, &img, &sup, &AugmentDraws::identity()).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, img);
        assert_eq!(l, sup);
    }

    #[test]
    fn draws_are_reproducible() {
        let p = PhotometricSpec::strong();
        let g = GeometricSpec { family: GeometricFamily::Tps, ..GeometricSpec::strong() };
        let grid = PixelGrid::new(32, 32);
        let a = sample_augmentations(&p, &g, grid, &mut item_rng(3, "x~y", 2)).unwrap();
        let b = sample_augmentations(&p, &g, grid, &mut item_rng(3, "x~y", 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn application_frequency() {
        let p = PhotometricSpec { apply_probability: 0.4, ..PhotometricSpec::strong() };
        let mut rng = SeedKey::new(11).rng();
        let n = 10_000;
        let hits = (0..n).filter(|_| draw_photo(&p, &mut rng).applied).count();
        let f = hits as f64 / n as f64;
        assert!((f - 0.4).abs() <= 0.02, "frequency {f}");
    }

    #[test]
    fn photometric_never_moves_labels() {
        let img = textured();
        let sup = PairLabel::Sparse(SparseSupervision::new(vec![Point2::new(1.0, 2.0)], vec![Point2::new(3.0, 4.0)]));
        let mut rng = SeedKey::new(5).rng();
        for _ in 0..20 {
            let mut d = sample_augmentations(&PhotometricSpec { apply_probability: 1.0, ..PhotometricSpec::strong() }, &GeometricSpec::off(), img.grid(), &mut rng).unwrap();
            d.photo_tgt.applied = true;
            let (_, t, l) = augment_pair(&img, &img, &sup, &d).unwrap();
            assert_eq!(l, sup);
            assert_eq!(t.grid(), img.grid());
        }
    }

    #[test]
    fn sparse_points_leaving_image_are_masked() {
        let img = textured();
        let sup = PairLabel::Sparse(SparseSupervision::new(
            vec![Point2::new(1.0, 1.0), Point2::new(2.0, 2.0)],
            vec![Point2::new(2.0, 5.0), Point2::new(20.0, 5.0)],
        ));
        let d = AugmentDraws { geo_tgt: GeometricTransform::translation(6.0, 0.0), ..AugmentDraws::identity() };
        let (_, _, l) = augment_pair(&img, &img, &sup, &d).unwrap();
        let PairLabel::Sparse(l) = l else { panic!() };
        assert_eq!(l.mask, vec![true, false]);
        assert_eq!(l.tgt[0], Point2::new(8.0, 5.0));
    }

    #[test]
    fn oracle_label_stays_consistent_under_warp() {
        let spec = SynthSpec { num_classes: 1, images_per_class: 2, val_per_class: 0, test_per_class: 0, ..SynthSpec::default() };
        let out = generate_dataset(&spec).unwrap();
        let m = &out.dataset.manifest;
        let pair = &m.pairs[0];
        let (s_img, t_img) = (out.dataset.image(&pair.src).unwrap(), out.dataset.image(&pair.tgt).unwrap());
        let label = oracle_field(&pair.src, &pair.tgt, &out.oracle, s_img.grid(), t_img.grid(), Default::default()).unwrap();
        let d = AugmentDraws {
            geo_tgt: GeometricTransform::similarity_about(Point2::new(31.5, 31.5), 0.15, 1.05, 1.5, -2.0),
            ..AugmentDraws::identity()
        };
        let sparse = PairLabel::Sparse(SparseSupervision::new(
            pair.keypoints.iter().map(|k| k.src_point()).collect(),
            pair.keypoints.iter().map(|k| k.tgt_point()).collect(),
        ));
        let (_, _, PairLabel::Dense(warped)) = augment_pair(s_img, t_img, &PairLabel::Dense(label), &d).unwrap() else { panic!() };
        let (_, _, PairLabel::Sparse(kps)) = augment_pair(s_img, t_img, &sparse, &d).unwrap() else { panic!() };
        let active: Vec<usize> = (0..kps.mask.len()).filter(|i| kps.mask[*i]).collect();
        assert!(!active.is_empty());
        let tgt: Vec<Point2> = active.iter().map(|i| kps.tgt[*i]).collect();
        let pred = crate::matcher::transfer_keypoints(&warped.field, &tgt).unwrap();
        for (p, i) in pred.iter().zip(&active) {
            assert!(p.dist(&kps.src[*i]) < 0.1 * 64.0);
        }
    }
}
