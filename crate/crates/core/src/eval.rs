//! PCK metric and evaluation reports: overall, per class, per variation
//! factor and per tolerance.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::image::Image;
use crate::manifest::{DatasetManifest, ImageEntry, PairEntry, Split};
use crate::matcher::{extract_raw, predict_keypoints, MatcherParams, RawFeatures};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PckNorm {
    Img,
    #[default]
    Bbox,
}

impl FromStr for PckNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "img" => Ok(PckNorm::Img),
            "bbox" => Ok(PckNorm::Bbox),
            _ => Err(Error::InvalidArgument(format!("unknown pck norm `{s}` (expected img or bbox)"))),
        }
    }
}

impl std::fmt::Display for PckNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PckNorm::Img => "img",
            PckNorm::Bbox => "bbox",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckSpec {
    pub alpha: f64,
    pub norm: PckNorm,
}

impl PckSpec {
    pub fn new(alpha: f64, norm: PckNorm) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(PckSpec { alpha, norm })
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(())
}

/// Height and width of the normalising frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub height: f64,
    pub width: f64,
}

impl Frame {
    pub fn margin(&self, alpha: f64) -> f64 {
        alpha * self.height.max(self.width)
    }

    /// The normalising frame of an image entry: its bbox, or the full image
    /// when `norm` is `img` or no bbox is recorded.
    pub fn of(entry: &ImageEntry, norm: PckNorm) -> Frame {
        match (norm, entry.bbox) {
            (PckNorm::Bbox, Some(b)) => Frame { height: b.height(), width: b.width() },
            _ => Frame { height: entry.height as f64, width: entry.width as f64 },
        }
    }
}

/// Number of predictions within the margin (boundary inclusive).
pub fn pck_count(pred: &[Point2], gt: &[Point2], margin: f64) -> usize {
    pred.iter().zip(gt).filter(|(p, g)| p.dist(g) <= margin).count()
}

pub fn pck(pred: &[Point2], gt: &[Point2], spec: PckSpec, frame: Frame) -> Result<f64> {
    check_alpha(spec.alpha)?;
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    if gt.is_empty() {
        return Err(Error::EmptyKeypoints);
    }
    if !(frame.height > 0.0 && frame.width > 0.0) {
        return Err(Error::InvalidArgument("frame dimensions must be positive".into()));
    }
    Ok(pck_count(pred, gt, frame.margin(spec.alpha)) as f64 / gt.len() as f64)
}

/// Correct / total keypoint counts of a slice at one tolerance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn pck(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    fn add(&mut self, other: Tally) {
        self.correct += other.correct;
        self.total += other.total;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub norm: PckNorm,
    pub alphas: Vec<f64>,
    pub pairs: usize,
    pub keypoints: usize,
    /// One tally per alpha.
    pub overall: Vec<Tally>,
    pub per_class: BTreeMap<String, Vec<Tally>>,
    /// Keyed `factor:level`, e.g. `viewpoint:hard` or `occlusion:src`.
    pub per_factor: BTreeMap<String, Vec<Tally>>,
}

impl EvalReport {
    fn alpha_index(&self, alpha: f64) -> Option<usize> {
        self.alphas.iter().position(|a| (a - alpha).abs() < 1e-12)
    }

    pub fn overall_pck(&self, alpha: f64) -> Option<f64> {
        self.alpha_index(alpha).map(|i| self.overall[i].pck())
    }

    /// PCK at the first requested alpha.
    pub fn primary_pck(&self) -> f64 {
        self.overall.first().map(Tally::pck).unwrap_or(0.0)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::InvalidArgument(e.to_string());
        out.write_record(["slice", "key", "alpha", "norm", "correct", "total", "pck"]).map_err(err)?;
        let mut row = |slice: &str, key: &str, tallies: &[Tally]| -> Result<()> {
            for (a, t) in self.alphas.iter().zip(tallies) {
                out.write_record([
                    slice,
                    key,
                    &a.to_string(),
                    &self.norm.to_string(),
                    &t.correct.to_string(),
                    &t.total.to_string(),
                    &format!("{:.6}", t.pck()),
                ])
                .map_err(err)?;
            }
            Ok(())
        };
        row("overall", "all", &self.overall)?;
        for (k, v) in &self.per_class {
            row("class", k, v)?;
        }
        for (k, v) in &self.per_factor {
            row("factor", k, v)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv(std::io::BufWriter::new(f))?;
        let json_path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
    }
}

/// Predicted source positions keyed by `(pair_id, keypoint id)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Predictions {
    pub points: BTreeMap<(String, u32), Point2>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    pair_id: String,
    kp_id: u32,
    pred_x: f64,
    pred_y: f64,
}

impl Predictions {
    pub fn get(&self, pair_id: &str, kp: u32) -> Option<Point2> {
        self.points.get(&(pair_id.to_string(), kp)).copied()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for ((pair_id, kp_id), p) in &self.points {
            out.serialize(PredictionRow { pair_id: pair_id.clone(), kp_id: *kp_id, pred_x: p.x, pred_y: p.y })
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let mut points = BTreeMap::new();
        for row in rdr.deserialize::<PredictionRow>() {
            let r = row.map_err(|e| Error::format(path, e.to_string()))?;
            points.insert((r.pair_id, r.kp_id), Point2::new(r.pred_x, r.pred_y));
        }
        Ok(Predictions { points })
    }
}

/// Raw filter-bank responses of the named images, computed in parallel.
pub fn raw_features<'a>(
    dataset: &Dataset,
    ids: impl IntoIterator<Item = &'a str>,
    params: &MatcherParams,
) -> Result<HashMap<String, RawFeatures>> {
    let mut ids: Vec<&str> = ids.into_iter().collect();
    ids.sort_unstable();
    ids.dedup();
    ids.par_iter()
        .map(|id| Ok((id.to_string(), extract_raw(dataset.image(id)?, &params.descriptor)?)))
        .collect()
}

pub fn split_pairs(m: &DatasetManifest, split: Split) -> Vec<&PairEntry> {
    let idx = m.image_index();
    m.pairs.iter().filter(|p| idx.get(p.src.as_str()).map(|i| m.images[*i].split) == Some(split)).collect()
}

/// Runs the matcher on every keypoint of `pairs`.
pub fn predict_pairs(
    params: &MatcherParams,
    pairs: &[&PairEntry],
    raw: &HashMap<String, RawFeatures>,
) -> Result<Predictions> {
    params.validate()?;
    let per_pair: Vec<Vec<((String, u32), Point2)>> = pairs
        .par_iter()
        .map(|p| {
            let get = |id: &str| raw.get(id).ok_or_else(|| Error::UnknownImage(id.to_string()));
            let tgt: Vec<Point2> = p.keypoints.iter().map(|k| k.tgt_point()).collect();
            let pred = predict_keypoints(params, get(&p.src)?, get(&p.tgt)?, &tgt)?;
            let id = p.id();
            Ok(p.keypoints.iter().zip(pred).map(|(k, q)| ((id.clone(), k.id), q)).collect())
        })
        .collect::<Result<_>>()?;
    Ok(Predictions { points: per_pair.into_iter().flatten().collect() })
}

/// Model predictions for every annotated pair of `split`.
pub fn predict_split(params: &MatcherParams, dataset: &Dataset, split: Split) -> Result<Predictions> {
    let pairs = split_pairs(&dataset.manifest, split);
    let raw = raw_features(dataset, pairs.iter().flat_map(|p| [p.src.as_str(), p.tgt.as_str()]), params)?;
    predict_pairs(params, &pairs, &raw)
}

/// Where predictions come from.
pub enum PredictionSource<'a> {
    Model { params: &'a MatcherParams, dataset: &'a Dataset },
    Table(&'a Predictions),
}

/// Keypoint-weighted PCK report over the annotated pairs of `split`.
pub fn evaluate_report(
    source: PredictionSource<'_>,
    m: &DatasetManifest,
    split: Split,
    alphas: &[f64],
    norm: PckNorm,
) -> Result<EvalReport> {
    if alphas.is_empty() {
        return Err(Error::InvalidArgument("at least one alpha is required".into()));
    }
    for a in alphas {
        check_alpha(*a)?;
    }
    let pairs = split_pairs(m, split);
    if pairs.is_empty() {
        return Err(Error::EmptyPairSet);
    }
    if let Some(p) = pairs.iter().find(|p| p.keypoints.is_empty()) {
        return Err(Error::MissingGroundTruth(p.id()));
    }
    let owned;
    let preds = match source {
        PredictionSource::Table(t) => t,
        PredictionSource::Model { params, dataset } => {
            let raw = raw_features(dataset, pairs.iter().flat_map(|p| [p.src.as_str(), p.tgt.as_str()]), params)?;
            owned = predict_pairs(params, &pairs, &raw)?;
            &owned
        }
    };
    let idx = m.image_index();
    let na = alphas.len();
    let mut report = EvalReport {
        norm,
        alphas: alphas.to_vec(),
        pairs: pairs.len(),
        keypoints: 0,
        overall: vec![Tally::default(); na],
        per_class: BTreeMap::new(),
        per_factor: BTreeMap::new(),
    };
    for p in &pairs {
        let src = &m.images[idx[p.src.as_str()]];
        let frame = Frame::of(src, norm);
        let id = p.id();
        let mut pred = Vec::with_capacity(p.keypoints.len());
        for k in &p.keypoints {
            let q = preds.get(&id, k.id).ok_or_else(|| Error::InvalidArgument(format!("no prediction for keypoint {} of `{id}`", k.id)))?;
            pred.push(q);
        }
        let gt: Vec<Point2> = p.keypoints.iter().map(|k| k.src_point()).collect();
        let tallies: Vec<Tally> =
            alphas.iter().map(|a| Tally { correct: pck_count(&pred, &gt, frame.margin(*a)), total: gt.len() }).collect();
        report.keypoints += gt.len();
        let f = &p.factors;
        let slices = [
            format!("viewpoint:{}", f.viewpoint.as_str()),
            format!("scale:{}", f.scale.as_str()),
            format!("truncation:{}", f.truncation.as_str()),
            format!("occlusion:{}", f.occlusion.as_str()),
        ];
        let class_row = report.per_class.entry(src.class.clone()).or_insert_with(|| vec![Tally::default(); na]);
        for i in 0..na {
            class_row[i].add(tallies[i]);
            report.overall[i].add(tallies[i]);
        }
        for s in slices {
            let row = report.per_factor.entry(s).or_insert_with(|| vec![Tally::default(); na]);
            for i in 0..na {
                row[i].add(tallies[i]);
            }
        }
    }
    Ok(report)
}

fn draw_line(img: &mut Image, a: Point2, b: Point2, rgb: [f32; 3]) {
    let n = (a.dist(&b).ceil() as usize).max(1) * 2;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let x = (a.x + (b.x - a.x) * t).round();
        let y = (a.y + (b.y - a.y) * t).round();
        if x >= 0.0 && y >= 0.0 && (x as usize) < img.width() && (y as usize) < img.height() {
            img.set_pixel(x as usize, y as usize, rgb);
        }
    }
}

/// Side-by-side source | target rendering with one segment per keypoint,
/// green when within the margin and red otherwise.
pub fn render_overlay(src: &Image, tgt: &Image, pair: &PairEntry, preds: &Predictions, margin: f64) -> Image {
    let w = src.width() + tgt.width();
    let h = src.height().max(tgt.height());
    let mut out = Image::from_fn(w, h, |x, y| {
        if x < src.width() {
            if y < src.height() { src.pixel(x, y) } else { [0.0; 3] }
        } else if y < tgt.height() {
            tgt.pixel(x - src.width(), y)
        } else {
            [0.0; 3]
        }
    });
    let id = pair.id();
    let off = src.width() as f64;
    for k in &pair.keypoints {
        if let Some(p) = preds.get(&id, k.id) {
            let ok = p.dist(&k.src_point()) <= margin;
            let color = if ok { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
            let t = k.tgt_point();
            draw_line(&mut out, p, Point2::new(t.x + off, t.y), color);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{BBox, FactorTags, Keypoint, Level, Side, MANIFEST_SCHEMA_VERSION};

    fn frame(h: f64, w: f64) -> Frame {
        Frame { height: h, width: w }
    }

    #[test]
    fn single_keypoint_margin() {
        let spec = PckSpec::new(0.1, PckNorm::Bbox).unwrap();
        let gt = [Point2::new(50.0, 50.0)];
        assert_eq!(pck(&[Point2::new(58.0, 50.0)], &gt, spec, frame(80.0, 100.0)).unwrap(), 1.0);
        assert_eq!(pck(&[Point2::new(61.0, 50.0)], &gt, spec, frame(80.0, 100.0)).unwrap(), 0.0);
        assert_eq!(pck(&[Point2::new(60.0, 50.0)], &gt, spec, frame(80.0, 100.0)).unwrap(), 1.0);
    }

    #[test]
    fn half_within() {
        let spec = PckSpec::new(0.1, PckNorm::Img).unwrap();
        let gt = vec![Point2::new(0.0, 0.0); 4];
        let pred = vec![Point2::new(1.0, 0.0), Point2::new(0.0, 5.0), Point2::new(20.0, 0.0), Point2::new(7.0, 8.0)];
        assert_eq!(pck(&pred, &gt, spec, frame(50.0, 50.0)).unwrap(), 0.5);
    }

    #[test]
    fn errors() {
        let spec = PckSpec::new(0.1, PckNorm::Img).unwrap();
        let f = frame(10.0, 10.0);
        assert!(matches!(pck(&[Point2::default()], &[], spec, f), Err(Error::LengthMismatch { .. })));
        assert!(matches!(pck(&[], &[], spec, f), Err(Error::EmptyKeypoints)));
        assert!(PckSpec::new(0.0, PckNorm::Img).is_err());
        assert!(PckSpec::new(1.5, PckNorm::Img).is_err());
    }

    /// Twenty pairs over two classes with hand-assigned factor tags.
    fn fixture() -> (DatasetManifest, Predictions) {
        let mut images = Vec::new();
        for c in ["a", "b"] {
            for i in 0..5 {
                images.push(ImageEntry {
                    id: format!("{c}{i}"),
                    path: String::new(),
                    class: c.into(),
                    split: Split::Test,
                    width: 40,
                    height: 30,
                    bbox: Some(BBox([5.0, 5.0, 25.0, 15.0])),
                });
            }
        }
        let mut pairs = Vec::new();
        let mut preds = Predictions::default();
        let levels = Level::ALL;
        let sides = Side::ALL;
        let mut n = 0;
        for c in ["a", "b"] {
            for s in 0..5 {
                for t in 0..5 {
                    if s == t || pairs.len() >= 10 * (if c == "a" { 1 } else { 2 }) {
                        continue;
                    }
                    let src = format!("{c}{s}");
                    let tgt = format!("{c}{t}");
                    let kps: Vec<Keypoint> =
                        (0..3).map(|k| Keypoint { id: k, src: [10.0 + k as f64, 10.0], tgt: [12.0, 12.0] }).collect();
                    let id = crate::manifest::pair_id(&src, &tgt);
                    for k in &kps {
                        // Error distance cycles through 0, 1, 2, ... px.
                        let d = (n % 5) as f64;
                        n += 1;
                        preds.points.insert((id.clone(), k.id), Point2::new(k.src[0] + d, k.src[1]));
                    }
                    let i = pairs.len();
                    pairs.push(PairEntry {
                        src,
                        tgt,
                        keypoints: kps,
                        factors: FactorTags {
                            viewpoint: levels[i % 3],
                            scale: levels[(i / 3) % 3],
                            truncation: sides[i % 4],
                            occlusion: sides[(i / 4) % 4],
                        },
                    });
                }
            }
        }
        let m = DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            classes: vec!["a".into(), "b".into()],
            excluded_classes: vec![],
            images,
            pairs,
            corruption: None,
        };
        (m, preds)
    }

    #[test]
    fn report_matches_recount() {
        let (m, preds) = fixture();
        assert_eq!(m.pairs.len(), 20);
        let alphas = [0.05, 0.1, 0.15];
        let r = evaluate_report(PredictionSource::Table(&preds), &m, Split::Test, &alphas, PckNorm::Bbox).unwrap();
        assert_eq!(r.keypoints, 60);
        // Bbox 20x10: margins 1, 2, 3 px; errors cycle 0..4 so 2/5, 3/5, 4/5 pass.
        assert_eq!(r.overall.iter().map(|t| t.correct).collect::<Vec<_>>(), vec![24, 36, 48]);
        for (ai, a) in alphas.iter().enumerate() {
            let margin = a * 20.0;
            let mut by_slice: BTreeMap<String, Tally> = BTreeMap::new();
            for p in &m.pairs {
                let class = &p.src[..1];
                for k in &p.keypoints {
                    let q = preds.get(&p.id(), k.id).unwrap();
                    let ok = q.dist(&k.src_point()) <= margin;
                    let keys = [
                        format!("class={class}"),
                        format!("viewpoint:{}", p.factors.viewpoint.as_str()),
                        format!("scale:{}", p.factors.scale.as_str()),
                        format!("truncation:{}", p.factors.truncation.as_str()),
                        format!("occlusion:{}", p.factors.occlusion.as_str()),
                    ];
                    for key in keys {
                        let t = by_slice.entry(key).or_default();
                        t.total += 1;
                        t.correct += ok as usize;
                    }
                }
            }
            for (k, t) in &by_slice {
                let got = match k.strip_prefix("class=") {
                    Some(c) => r.per_class[c][ai],
                    None => r.per_factor[k][ai],
                };
                assert_eq!(got, *t, "slice {k} alpha {a}");
            }
            let weighted: f64 =
                r.per_class.values().map(|v| v[ai].pck() * v[ai].total as f64).sum::<f64>() / r.keypoints as f64;
            assert!((weighted - r.overall[ai].pck()).abs() < 1e-9);
        }
        for w in r.overall.windows(2) {
            assert!(w[0].pck() <= w[1].pck());
        }
    }

    #[test]
    fn missing_ground_truth_is_reported() {
        let (mut m, preds) = fixture();
        m.pairs[3].keypoints.clear();
        let r = evaluate_report(PredictionSource::Table(&preds), &m, Split::Test, &[0.1], PckNorm::Img);
        assert!(matches!(r, Err(Error::MissingGroundTruth(_))));
    }

    #[test]
    fn prediction_csv_round_trip() {
        let (_, preds) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pred.csv");
        preds.save_csv(&p).unwrap();
        assert_eq!(Predictions::load_csv(&p).unwrap(), preds);
        let head = std::fs::read_to_string(&p).unwrap();
        assert!(head.starts_with("pair_id,kp_id,pred_x,pred_y"));
    }
}
