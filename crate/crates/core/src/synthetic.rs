//! Synthetic correspondence datasets with exact dense ground truth.
//!
//! Every class owns a procedural object texture defined on a canvas square
//! `[-R, R]²`. Each image places that canvas through its own affine map
//! (rotation, anisotropic scale, shear, translation) over a per-image
//! background and applies a photometric variation, so any within-class pair
//! is related by the closed-form affine `W_src ∘ W_tgt⁻¹`. Keypoints are a
//! per-class set of high-gradient canvas locations, projected into every
//! image.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotator::PseudoLabel;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{Affine, PixelGrid, Point2};
use crate::image::Image;
use crate::manifest::{
    pair_id, BBox, DatasetManifest, FactorTags, ImageEntry, Keypoint, Level, PairEntry, Side, Split,
    MANIFEST_SCHEMA_VERSION,
};
use crate::matcher::{DescriptorConfig, MatchField};
use crate::rng::SeedKey;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    /// Training images per class.
    pub images_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub width: usize,
    pub height: usize,
    /// Half side of the canvas square holding the object, in canvas pixels.
    pub object_half_size: f64,
    /// Candidate semantic keypoints per class.
    pub keypoints_per_class: usize,
    /// Fraction of training pairs that receive keypoint annotations.
    pub labeled_fraction: f64,
    pub max_rotation_deg: f64,
    /// Log-scale half range (isotropic), e.g. 0.2 → scales in [e^-0.2, e^0.2].
    pub max_log_scale: f64,
    pub max_anisotropy: f64,
    pub max_shear: f64,
    pub max_translation: f64,
    pub brightness_jitter: f64,
    pub contrast_jitter: f64,
    pub pixel_noise: f64,
    /// Amplitude of the background clutter texture.
    pub background_contrast: f64,
    pub occlusion_probability: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 5,
            images_per_class: 12,
            val_per_class: 6,
            test_per_class: 6,
            width: 64,
            height: 64,
            object_half_size: 22.0,
            keypoints_per_class: 10,
            labeled_fraction: 1.0,
            max_rotation_deg: 10.0,
            max_log_scale: 0.2,
            max_anisotropy: 0.08,
            max_shear: 0.08,
            max_translation: 6.0,
            brightness_jitter: 0.12,
            contrast_jitter: 0.25,
            pixel_noise: 0.02,
            background_contrast: 0.1,
            occlusion_probability: 0.15,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.num_classes == 0 || self.images_per_class == 0 || self.keypoints_per_class == 0 {
            return bad("counts must be at least 1");
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return bad("labeled_fraction must lie in (0, 1]");
        }
        if self.width < 8 || self.height < 8 {
            return bad("images must be at least 8x8");
        }
        if !(self.object_half_size > 1.0) {
            return bad("object_half_size must exceed 1");
        }
        let ranges = [
            self.max_rotation_deg,
            self.max_log_scale,
            self.max_anisotropy,
            self.max_shear,
            self.max_translation,
            self.brightness_jitter,
            self.contrast_jitter,
            self.pixel_noise,
            self.background_contrast,
        ];
        if ranges.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return bad("ranges must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.occlusion_probability) {
            return bad("occlusion_probability must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Per-image canvas placement, the ground truth behind every pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleStore {
    pub object_half_size: f64,
    /// Canvas → image affine, six row-major numbers, keyed by image id.
    pub placements: BTreeMap<String, [f64; 6]>,
}

impl OracleStore {
    fn placement(&self, id: &str) -> Result<Affine> {
        self.placements.get(id).map(|m| Affine { m: *m }).ok_or_else(|| Error::UnknownImage(id.to_string()))
    }

    /// Target-image → source-image affine of a pair.
    pub fn pair_transform(&self, src: &str, tgt: &str) -> Result<Affine> {
        let ws = self.placement(src)?;
        let wt = self.placement(tgt)?;
        Ok(ws.compose(&wt.inverse()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("oracle serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Procedural object texture of one class.
struct ClassTexture {
    octaves: Vec<(f64, f64, Vec<f64>)>,
    lattice: usize,
    blobs: Vec<(f64, f64, f64, f64, f64)>,
    tint: [f32; 3],
    shade: [f32; 3],
}

const LATTICE: usize = 24;

fn value_noise(table: &[f64], n: usize, x: f64, y: f64) -> f64 {
    let xf = x.floor();
    let yf = y.floor();
    let fx = x - xf;
    let fy = y - yf;
    let sx = fx * fx * (3.0 - 2.0 * fx);
    let sy = fy * fy * (3.0 - 2.0 * fy);
    let ix = xf.rem_euclid(n as f64) as usize;
    let iy = yf.rem_euclid(n as f64) as usize;
    let v = |i: usize, j: usize| table[(j % n) * n + (i % n)];
    let a = v(ix, iy) * (1.0 - sx) + v(ix + 1, iy) * sx;
    let b = v(ix, iy + 1) * (1.0 - sx) + v(ix + 1, iy + 1) * sx;
    a * (1.0 - sy) + b * sy
}

impl ClassTexture {
    fn new(rng: &mut ChaCha8Rng, half: f64) -> Self {
        let mut octaves = Vec::new();
        let mut freq = 0.09;
        let mut amp = 0.5;
        for _ in 0..3 {
            let table = (0..LATTICE * LATTICE).map(|_| rng.random_range(-1.0..1.0)).collect();
            octaves.push((freq, amp, table));
            freq *= 2.0;
            amp *= 0.5;
        }
        let blobs = (0..14)
            .map(|_| {
                (
                    rng.random_range(-half..half),
                    rng.random_range(-half..half),
                    rng.random_range(1.5..4.5),
                    rng.random_range(1.5..4.5),
                    if rng.random_bool(0.5) { 0.55 } else { -0.55 },
                )
            })
            .collect();
        let hue: f32 = rng.random_range(0.0..1.0);
        let tint = [
            0.55 + 0.45 * (hue * std::f32::consts::TAU).cos().abs(),
            0.55 + 0.45 * (hue * 4.1 + 1.0).sin().abs(),
            0.55 + 0.45 * (hue * 2.7 + 2.0).cos().abs(),
        ];
        let shade = [tint[2] * 0.15, tint[0] * 0.15, tint[1] * 0.15];
        ClassTexture { octaves, lattice: LATTICE, blobs, tint, shade }
    }

    /// Texture value in `[0, 1]` at a canvas point.
    fn value(&self, u: f64, v: f64) -> f64 {
        let mut acc = 0.5;
        for (freq, amp, table) in &self.octaves {
            acc += amp * value_noise(table, self.lattice, u * freq + 7.3, v * freq + 3.1);
        }
        for (cx, cy, rx, ry, s) in &self.blobs {
            let dx = (u - cx) / rx;
            let dy = (v - cy) / ry;
            let r2 = dx * dx + dy * dy;
            if r2 < 9.0 {
                acc += s * (-r2).exp();
            }
        }
        acc.clamp(0.0, 1.0)
    }

    fn color(&self, t: f64) -> [f32; 3] {
        let t = t as f32;
        std::array::from_fn(|c| t * self.tint[c] + (1.0 - t) * self.shade[c])
    }

    /// Canvas gradient magnitude by central differences.
    fn gradient(&self, u: f64, v: f64) -> f64 {
        let h = 0.5;
        let gx = self.value(u + h, v) - self.value(u - h, v);
        let gy = self.value(u, v + h) - self.value(u, v - h);
        gx.hypot(gy) / (2.0 * h)
    }

    /// Greedy high-gradient picks with a minimum spacing.
    fn keypoints(&self, half: f64, count: usize) -> Vec<Point2> {
        let mut cand = Vec::new();
        let lim = half - 2.0;
        let mut v = -lim;
        while v <= lim {
            let mut u = -lim;
            while u <= lim {
                cand.push((self.gradient(u, v), Point2::new(u, v)));
                u += 1.0;
            }
            v += 1.0;
        }
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.x.total_cmp(&b.1.x)).then(a.1.y.total_cmp(&b.1.y)));
        let spacing = (half * 0.35).max(3.0);
        let mut out: Vec<Point2> = Vec::with_capacity(count);
        for (_, p) in cand {
            if out.iter().all(|q| q.dist(&p) >= spacing) {
                out.push(p);
                if out.len() == count {
                    break;
                }
            }
        }
        out
    }
}

struct Rendered {
    image: Image,
    placement: Affine,
    rotation: f64,
    log_scale: f64,
    occluder: Option<[f64; 4]>,
    truncated: bool,
    bbox: BBox,
}

fn render_image(spec: &SynthSpec, tex: &ClassTexture, seed: SeedKey) -> Rendered {
    let mut rng = seed.rng();
    let half = spec.object_half_size;
    let rotation = rng.random_range(-1.0..=1.0) * spec.max_rotation_deg.to_radians();
    let log_scale = rng.random_range(-1.0..=1.0) * spec.max_log_scale;
    let aniso = rng.random_range(-1.0..=1.0) * spec.max_anisotropy;
    let shear = rng.random_range(-1.0..=1.0) * spec.max_shear;
    let tx = rng.random_range(-1.0..=1.0) * spec.max_translation;
    let ty = rng.random_range(-1.0..=1.0) * spec.max_translation;
    let s = log_scale.exp();
    let (sn, cs) = rotation.sin_cos();
    // R(θ) · diag(s(1+a), s(1-a)) · [1 shear; 0 1]
    let sx = s * (1.0 + aniso);
    let sy = s * (1.0 - aniso);
    let l = [[cs * sx, cs * sx * shear - sn * sy], [sn * sx, sn * sx * shear + cs * sy]];
    let cx = (spec.width as f64 - 1.0) / 2.0 + tx;
    let cy = (spec.height as f64 - 1.0) / 2.0 + ty;
    let placement = Affine { m: [l[0][0], l[0][1], cx, l[1][0], l[1][1], cy] };
    let inv = placement.inverse().expect("placement is invertible");

    let bg_table: Vec<f64> = (0..LATTICE * LATTICE).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bg_table2: Vec<f64> = (0..LATTICE * LATTICE).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bg_color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let gain = 1.0 + rng.random_range(-1.0..=1.0) * spec.contrast_jitter;
    let bias = rng.random_range(-1.0..=1.0) * spec.brightness_jitter;

    let occluder = if rng.random_bool(spec.occlusion_probability) {
        let w = rng.random_range(10.0..18.0);
        let h = rng.random_range(10.0..18.0);
        let c = placement.apply(Point2::new(rng.random_range(-half..half), rng.random_range(-half..half)));
        Some([c.x - w / 2.0, c.y - h / 2.0, c.x + w / 2.0, c.y + h / 2.0])
    } else {
        None
    };
    let occ_color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));

    let mut image = Image::from_fn(spec.width, spec.height, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        if let Some(o) = occluder {
            if xf >= o[0] && xf <= o[2] && yf >= o[1] && yf <= o[3] {
                return occ_color;
            }
        }
        let u = inv.apply(Point2::new(xf, yf));
        if u.x.abs() <= half && u.y.abs() <= half {
            let t = tex.value(u.x, u.y);
            let t = ((t - 0.5) * gain + 0.5 + bias).clamp(0.0, 1.0);
            tex.color(t)
        } else {
            let k = spec.background_contrast;
            let b = 0.5
                + k * 0.3 * value_noise(&bg_table, LATTICE, xf * 0.12, yf * 0.12)
                + k * 0.15 * value_noise(&bg_table2, LATTICE, xf * 0.3, yf * 0.3);
            let b = b as f32;
            std::array::from_fn(|c| (b * bg_color[c] * 1.4).clamp(0.0, 1.0))
        }
    });
    if spec.pixel_noise > 0.0 {
        for v in image.data_mut() {
            *v += rng.random_range(-1.0..=1.0) * spec.pixel_noise as f32;
        }
    }
    image.clamp01();
    let image = image.quantized();

    let corners = [(-half, -half), (half, -half), (-half, half), (half, half)].map(|(u, v)| placement.apply(Point2::new(u, v)));
    let grid = PixelGrid::new(spec.height, spec.width);
    let truncated = corners.iter().any(|c| !grid.contains(c));
    let clampx = |v: f64| v.clamp(0.0, spec.width as f64 - 1.0);
    let clampy = |v: f64| v.clamp(0.0, spec.height as f64 - 1.0);
    let bbox = BBox([
        clampx(corners.iter().map(|c| c.x).fold(f64::INFINITY, f64::min)),
        clampy(corners.iter().map(|c| c.y).fold(f64::INFINITY, f64::min)),
        clampx(corners.iter().map(|c| c.x).fold(f64::NEG_INFINITY, f64::max)),
        clampy(corners.iter().map(|c| c.y).fold(f64::NEG_INFINITY, f64::max)),
    ]);
    Rendered { image, placement, rotation, log_scale, occluder, truncated, bbox }
}

fn level(value: f64, max: f64) -> Level {
    if max <= 0.0 || value < max * 0.5 {
        Level::Easy
    } else if value < max {
        Level::Medi
    } else {
        Level::Hard
    }
}

/// Output of [`generate_dataset`].
pub struct SynthOutput {
    pub dataset: Dataset,
    pub oracle: OracleStore,
}

pub fn generate_dataset(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let root = SeedKey::new(spec.seed).with_str("synth");
    let half = spec.object_half_size;
    let classes: Vec<String> = (0..spec.num_classes).map(|c| format!("class{c:02}")).collect();
    let textures: Vec<ClassTexture> = classes
        .iter()
        .map(|c| ClassTexture::new(&mut root.with_str("texture").with_str(c).rng(), half))
        .collect();
    let class_kps: Vec<Vec<Point2>> = textures.iter().map(|t| t.keypoints(half, spec.keypoints_per_class)).collect();

    let mut entries = Vec::new();
    for (ci, class) in classes.iter().enumerate() {
        let splits = [(Split::Train, spec.images_per_class), (Split::Val, spec.val_per_class), (Split::Test, spec.test_per_class)];
        for (split, n) in splits {
            for i in 0..n {
                let id = format!("{class}_{split}_{i:03}");
                entries.push((ci, split, id));
            }
        }
    }
    let rendered: Vec<Rendered> = entries
        .par_iter()
        .map(|(ci, _, id)| render_image(spec, &textures[*ci], root.with_str("image").with_str(id)))
        .collect();

    let images: Vec<ImageEntry> = entries
        .iter()
        .zip(&rendered)
        .map(|((ci, split, id), r)| ImageEntry {
            id: id.clone(),
            path: format!("images/{id}.png"),
            class: classes[*ci].clone(),
            split: *split,
            width: spec.width,
            height: spec.height,
            bbox: Some(r.bbox),
        })
        .collect();

    // Visible keypoints of each image: in-bounds with a 1 px margin and not occluded.
    let grid = PixelGrid::new(spec.height, spec.width);
    let visible: Vec<Vec<Option<Point2>>> = entries
        .iter()
        .zip(&rendered)
        .map(|((ci, _, _), r)| {
            class_kps[*ci]
                .iter()
                .map(|k| {
                    let p = r.placement.apply(*k);
                    let inside = p.x >= 1.0 && p.y >= 1.0 && p.x <= grid.width as f64 - 2.0 && p.y <= grid.height as f64 - 2.0;
                    let occluded = r.occluder.is_some_and(|o| p.x >= o[0] - 1.0 && p.x <= o[2] + 1.0 && p.y >= o[1] - 1.0 && p.y <= o[3] + 1.0);
                    (inside && !occluded).then_some(p)
                })
                .collect()
        })
        .collect();

    let make_pair = |s: usize, t: usize| -> Option<PairEntry> {
        let keypoints: Vec<Keypoint> = visible[s]
            .iter()
            .zip(&visible[t])
            .enumerate()
            .filter_map(|(k, (a, b))| match (a, b) {
                (Some(a), Some(b)) => Some(Keypoint { id: k as u32, src: [a.x, a.y], tgt: [b.x, b.y] }),
                _ => None,
            })
            .collect();
        if keypoints.is_empty() {
            return None;
        }
        let (rs, rt) = (&rendered[s], &rendered[t]);
        let factors = FactorTags {
            viewpoint: level((rs.rotation - rt.rotation).abs(), spec.max_rotation_deg.to_radians()),
            scale: level((rs.log_scale - rt.log_scale).abs(), spec.max_log_scale),
            truncation: Side::from_flags(rs.truncated, rt.truncated),
            occlusion: Side::from_flags(rs.occluder.is_some(), rt.occluder.is_some()),
        };
        Some(PairEntry { src: images[s].id.clone(), tgt: images[t].id.clone(), keypoints, factors })
    };

    let mut pairs = Vec::new();
    for class in &classes {
        for split in [Split::Train, Split::Val, Split::Test] {
            let members: Vec<usize> =
                images.iter().enumerate().filter(|(_, e)| &e.class == class && e.split == split).map(|(i, _)| i).collect();
            let mut all = Vec::new();
            for &s in &members {
                for &t in &members {
                    if s != t {
                        all.push((s, t));
                    }
                }
            }
            let chosen: Vec<(usize, usize)> = if split == Split::Train && spec.labeled_fraction < 1.0 {
                let n = (spec.labeled_fraction * all.len() as f64).round() as usize;
                let mut rng = root.with_str("labeled").with_str(class).rng();
                let mut idx = index::sample(&mut rng, all.len(), n.min(all.len())).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| all[i]).collect()
            } else {
                all
            };
            pairs.extend(chosen.into_iter().filter_map(|(s, t)| make_pair(s, t)));
        }
    }

    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        classes,
        excluded_classes: vec![],
        images,
        pairs,
        corruption: None,
    };
    let placements = entries.iter().zip(&rendered).map(|((_, _, id), r)| (id.clone(), r.placement.m)).collect();
    let oracle = OracleStore { object_half_size: half, placements };
    let dataset = Dataset::new(manifest, rendered.into_iter().map(|r| r.image).collect())?;
    Ok(SynthOutput { dataset, oracle })
}

/// Exact dense correspondence of a generated pair on the target lattice.
/// Cells whose target point lies off the object or whose source point leaves
/// the source image are masked (confidence `1/|source lattice|`).
pub fn oracle_field(
    src: &str,
    tgt: &str,
    oracle: &OracleStore,
    src_image: PixelGrid,
    tgt_image: PixelGrid,
    descriptor: DescriptorConfig,
) -> Result<PseudoLabel> {
    let wt_inv = oracle.placement(tgt)?.inverse()?;
    let relation = oracle.pair_transform(src, tgt)?;
    let half = oracle.object_half_size;
    let grid = descriptor.cell_grid(tgt_image);
    let floor = 1.0 / descriptor.cell_grid(src_image).len() as f64;
    let mut coords = Vec::with_capacity(grid.len());
    let mut confidence = Vec::with_capacity(grid.len());
    for r in 0..grid.height {
        for c in 0..grid.width {
            let q = descriptor.cell_center(r, c);
            let u = wt_inv.apply(q);
            let p = relation.apply(q);
            let valid = u.x.abs() <= half && u.y.abs() <= half && src_image.contains(&p);
            coords.push(p);
            confidence.push(if valid { 1.0 } else { floor });
        }
    }
    let field = MatchField { tgt_grid: grid, tgt_image, descriptor, coords, confidence };
    Ok(PseudoLabel::from_field(field, 0.5, 0, pair_id(src, tgt)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::transfer_keypoints;
    use crate::pairs::{enumerate_pairs, labeled_pairs};

    fn small() -> SynthSpec {
        SynthSpec { num_classes: 3, images_per_class: 10, val_per_class: 2, test_per_class: 2, seed: 3, ..SynthSpec::default() }
    }

    #[test]
    fn pair_universe_counts() {
        let out = generate_dataset(&small()).unwrap();
        let m = &out.dataset.manifest;
        let total: usize = m.classes.iter().map(|c| enumerate_pairs(m, c).unwrap().len()).sum();
        assert_eq!(total, 270);
        for c in &m.classes {
            assert_eq!(enumerate_pairs(m, c).unwrap().len(), 90);
        }
    }

    #[test]
    fn single_image_classes_have_no_pairs() {
        let spec = SynthSpec { images_per_class: 1, ..small() };
        let out = generate_dataset(&spec).unwrap();
        let m = &out.dataset.manifest;
        assert!(m.classes.iter().all(|c| enumerate_pairs(m, c).unwrap().is_empty()));
    }

    #[test]
    fn deterministic() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a.dataset.manifest, b.dataset.manifest);
        assert_eq!(a.oracle, b.oracle);
        assert_eq!(a.dataset.images(), b.dataset.images());
        let c = generate_dataset(&SynthSpec { seed: 4, ..small() }).unwrap();
        assert_ne!(a.dataset.images(), c.dataset.images());
    }

    #[test]
    fn labeled_fraction_respected() {
        let spec = SynthSpec { labeled_fraction: 0.3, ..small() };
        let out = generate_dataset(&spec).unwrap();
        let m = &out.dataset.manifest;
        // 27 of 90 per class chosen; a pair may drop out only if no keypoint is co-visible
        let n = labeled_pairs(m).len();
        assert!((70..=81).contains(&n), "{n}");
    }

    #[test]
    fn keypoints_in_bounds_and_consistent_with_oracle() {
        let out = generate_dataset(&small()).unwrap();
        let m = &out.dataset.manifest;
        m.validate().unwrap();
        for p in &m.pairs {
            let rel = out.oracle.pair_transform(&p.src, &p.tgt).unwrap();
            for k in &p.keypoints {
                assert!(rel.apply(k.tgt_point()).dist(&k.src_point()) < 1e-9);
            }
        }
    }

    #[test]
    fn self_pair_oracle_is_identity() {
        let out = generate_dataset(&small()).unwrap();
        let id = &out.dataset.manifest.images[0].id;
        let g = PixelGrid::new(64, 64);
        let f = oracle_field(id, id, &out.oracle, g, g, DescriptorConfig::default()).unwrap();
        let centers = MatchField::cell_centers(&DescriptorConfig::default(), f.field.tgt_grid);
        for (a, b) in f.field.coords.iter().zip(&centers) {
            assert!(a.dist(b) < 1e-9);
        }
    }

    #[test]
    fn oracle_transfer_reproduces_keypoints() {
        let out = generate_dataset(&small()).unwrap();
        let m = &out.dataset.manifest;
        let g = PixelGrid::new(64, 64);
        for p in m.pairs.iter().take(40) {
            let f = oracle_field(&p.src, &p.tgt, &out.oracle, g, g, DescriptorConfig::default()).unwrap();
            let tgt: Vec<Point2> = p.keypoints.iter().map(|k| k.tgt_point()).collect();
            let moved = transfer_keypoints(&f.field, &tgt).unwrap();
            for (a, k) in moved.iter().zip(&p.keypoints) {
                assert!(a.dist(&k.src_point()) < 0.5);
            }
        }
    }

    #[test]
    fn oracle_composition() {
        let out = generate_dataset(&small()).unwrap();
        let ids: Vec<&str> = out.dataset.manifest.images.iter().filter(|e| e.class == "class00").map(|e| e.id.as_str()).take(3).collect();
        let (a, b, c) = (ids[0], ids[1], ids[2]);
        // field(t -> s) maps target points to source points: a<-b, b<-c, a<-c
        let ab = out.oracle.pair_transform(a, b).unwrap();
        let bc = out.oracle.pair_transform(b, c).unwrap();
        let ac = out.oracle.pair_transform(a, c).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let q = Point2::new(x as f64, y as f64);
                assert!(ab.apply(bc.apply(q)).dist(&ac.apply(q)) < 0.5);
            }
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_dataset(&SynthSpec { num_classes: 0, ..small() }).is_err());
        assert!(generate_dataset(&SynthSpec { labeled_fraction: 0.0, ..small() }).is_err());
    }
}
