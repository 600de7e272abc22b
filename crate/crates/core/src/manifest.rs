//! Dataset manifest: images, classes, splits, annotated pairs and
//! variation-factor tags, stored as a versioned JSON document.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split `{s}`"))),
        }
    }
}

/// Viewpoint / scale difficulty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    #[default]
    Easy,
    Medi,
    Hard,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Easy, Level::Medi, Level::Hard];

    pub fn as_str(&self) -> &'static str {
        match self {
            Level::Easy => "easy",
            Level::Medi => "medi",
            Level::Hard => "hard",
        }
    }
}

/// Which side of a pair a truncation/occlusion affects.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    #[default]
    None,
    Src,
    Tgt,
    Both,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::None, Side::Src, Side::Tgt, Side::Both];

    pub fn from_flags(src: bool, tgt: bool) -> Side {
        match (src, tgt) {
            (false, false) => Side::None,
            (true, false) => Side::Src,
            (false, true) => Side::Tgt,
            (true, true) => Side::Both,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Side::None => "none",
            Side::Src => "src",
            Side::Tgt => "tgt",
            Side::Both => "both",
        }
    }
}

/// Axis-aligned box `[x0, y0, x1, y1]` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox(pub [f64; 4]);

impl BBox {
    pub fn width(&self) -> f64 {
        self.0[2] - self.0[0]
    }

    pub fn height(&self) -> f64 {
        self.0[3] - self.0[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub path: String,
    pub class: String,
    pub split: Split,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub id: u32,
    pub src: [f64; 2],
    pub tgt: [f64; 2],
}

impl Keypoint {
    pub fn src_point(&self) -> Point2 {
        Point2::new(self.src[0], self.src[1])
    }

    pub fn tgt_point(&self) -> Point2 {
        Point2::new(self.tgt[0], self.tgt[1])
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FactorTags {
    pub viewpoint: Level,
    pub scale: Level,
    pub truncation: Side,
    pub occlusion: Side,
}

/// An annotated (labeled) image pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub src: String,
    pub tgt: String,
    pub keypoints: Vec<Keypoint>,
    #[serde(default)]
    pub factors: FactorTags,
}

impl PairEntry {
    pub fn id(&self) -> String {
        pair_id(&self.src, &self.tgt)
    }
}

/// Canonical pair identifier.
pub fn pair_id(src: &str, tgt: &str) -> String {
    format!("{src}~{tgt}")
}

/// Marks a manifest as a corrupted derivative whose images live under
/// `<root>/<kind>/<severity>/<image_id>.<ext>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionInfo {
    pub seed: u64,
    pub root: String,
    pub kinds: Vec<String>,
    pub severities: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub classes: Vec<String>,
    #[serde(default)]
    pub excluded_classes: Vec<String>,
    pub images: Vec<ImageEntry>,
    pub pairs: Vec<PairEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<CorruptionInfo>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::format(path, format!("unsupported schema_version {}", m.schema_version)));
        }
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn image_index(&self) -> HashMap<&str, usize> {
        self.images.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect()
    }

    pub fn image(&self, id: &str) -> Option<&ImageEntry> {
        self.images.iter().find(|e| e.id == id)
    }

    /// Classes not listed in `excluded_classes`, in declaration order.
    pub fn active_classes(&self) -> impl Iterator<Item = &String> {
        self.classes.iter().filter(|c| !self.excluded_classes.contains(c))
    }

    pub fn validate(&self) -> Result<()> {
        let classes: HashSet<&str> = self.classes.iter().map(String::as_str).collect();
        if classes.len() != self.classes.len() {
            return Err(Error::InvalidManifest("duplicate class names".into()));
        }
        let mut ids = HashMap::new();
        for img in &self.images {
            if ids.insert(img.id.as_str(), img).is_some() {
                return Err(Error::InvalidManifest(format!("duplicate image id `{}`", img.id)));
            }
            if !classes.contains(img.class.as_str()) {
                return Err(Error::InvalidManifest(format!("image `{}` has unknown class `{}`", img.id, img.class)));
            }
            if img.width == 0 || img.height == 0 {
                return Err(Error::InvalidManifest(format!("image `{}` has zero extent", img.id)));
            }
        }
        for pair in &self.pairs {
            let s = ids.get(pair.src.as_str()).ok_or_else(|| Error::UnknownImage(pair.src.clone()))?;
            let t = ids.get(pair.tgt.as_str()).ok_or_else(|| Error::UnknownImage(pair.tgt.clone()))?;
            if pair.src == pair.tgt {
                return Err(Error::InvalidManifest(format!("self-pair `{}`", pair.id())));
            }
            if s.class != t.class {
                return Err(Error::InvalidManifest(format!("pair `{}` crosses classes", pair.id())));
            }
            if s.split != t.split {
                return Err(Error::InvalidManifest(format!("pair `{}` crosses splits", pair.id())));
            }
            let inside = |p: [f64; 2], e: &ImageEntry| {
                p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= e.width as f64 - 1.0 && p[1] <= e.height as f64 - 1.0
            };
            for kp in &pair.keypoints {
                if !inside(kp.src, s) || !inside(kp.tgt, t) {
                    return Err(Error::InvalidManifest(format!("keypoint {} of `{}` out of bounds", kp.id, pair.id())));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> DatasetManifest {
        let img = |id: &str, class: &str, split| ImageEntry {
            id: id.into(),
            path: format!("{id}.png"),
            class: class.into(),
            split,
            width: 10,
            height: 10,
            bbox: None,
        };
        DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            classes: vec!["a".into(), "b".into()],
            excluded_classes: vec![],
            images: vec![img("a0", "a", Split::Train), img("a1", "a", Split::Train), img("b0", "b", Split::Train)],
            pairs: vec![PairEntry {
                src: "a0".into(),
                tgt: "a1".into(),
                keypoints: vec![Keypoint { id: 0, src: [1.0, 2.0], tgt: [3.0, 4.0] }],
                factors: FactorTags::default(),
            }],
            corruption: None,
        }
    }

    #[test]
    fn json_round_trip() {
        let m = tiny();
        let back: DatasetManifest = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert!(m.to_json().contains("\"schema_version\": 1"));
    }

    #[test]
    fn rejects_cross_class_pair() {
        let mut m = tiny();
        m.pairs[0].tgt = "b0".into();
        assert!(m.validate().is_err());
    }

    #[test]
    fn rejects_out_of_bounds_keypoint() {
        let mut m = tiny();
        m.pairs[0].keypoints[0].tgt = [10.0, 0.0];
        assert!(m.validate().is_err());
    }

    #[test]
    fn rejects_unknown_fields() {
        let mut v: serde_json::Value = serde_json::from_str(&tiny().to_json()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<DatasetManifest>(v).is_err());
    }
}
