//! Pair universe enumeration, labeled subsets and class-balanced sampling of
//! unlabeled pairs.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Split};
use crate::rng::SeedKey;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairRef {
    pub src: String,
    pub tgt: String,
    pub labeled: bool,
}

impl PairRef {
    pub fn id(&self) -> String {
        crate::manifest::pair_id(&self.src, &self.tgt)
    }
}

/// Ordered list of directional image pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairSet {
    pub pairs: Vec<PairRef>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PairRef> {
        self.pairs.iter()
    }

    pub fn keys(&self) -> HashSet<(String, String)> {
        self.pairs.iter().map(|p| (p.src.clone(), p.tgt.clone())).collect()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::InvalidArgument(e.to_string());
        out.write_record(["src_id", "tgt_id", "labeled"]).map_err(err)?;
        for p in &self.pairs {
            out.write_record([p.src.as_str(), p.tgt.as_str(), if p.labeled { "1" } else { "0" }]).map_err(err)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

fn annotated_train_keys(m: &DatasetManifest) -> HashSet<(&str, &str)> {
    let split: HashMap<&str, Split> = m.images.iter().map(|e| (e.id.as_str(), e.split)).collect();
    m.pairs
        .iter()
        .filter(|p| !p.keypoints.is_empty() && split.get(p.src.as_str()) == Some(&Split::Train))
        .map(|p| (p.src.as_str(), p.tgt.as_str()))
        .collect()
}

/// All ordered pairs of distinct training images of class `class`.
pub fn enumerate_pairs(m: &DatasetManifest, class: &str) -> Result<PairSet> {
    if !m.classes.iter().any(|c| c == class) {
        return Err(Error::UnknownClass(class.to_string()));
    }
    let labeled = annotated_train_keys(m);
    let members: Vec<&str> = m
        .images
        .iter()
        .filter(|e| e.class == class && e.split == Split::Train)
        .map(|e| e.id.as_str())
        .collect();
    let mut pairs = Vec::with_capacity(members.len() * members.len().saturating_sub(1));
    for s in &members {
        for t in &members {
            if s != t {
                pairs.push(PairRef { src: s.to_string(), tgt: t.to_string(), labeled: labeled.contains(&(*s, *t)) });
            }
        }
    }
    Ok(PairSet { pairs })
}

/// Annotated training pairs with at least one keypoint.
pub fn labeled_pairs(m: &DatasetManifest) -> PairSet {
    let keys = annotated_train_keys(m);
    let pairs = m
        .pairs
        .iter()
        .filter(|p| keys.contains(&(p.src.as_str(), p.tgt.as_str())))
        .map(|p| PairRef { src: p.src.clone(), tgt: p.tgt.clone(), labeled: true })
        .collect();
    PairSet { pairs }
}

/// Annotated pairs of a split (evaluation sets).
pub fn annotated_pairs(m: &DatasetManifest, split: Split) -> PairSet {
    let idx = m.image_index();
    let pairs = m
        .pairs
        .iter()
        .filter(|p| !p.keypoints.is_empty() && idx.get(p.src.as_str()).map(|i| m.images[*i].split) == Some(split))
        .map(|p| PairRef { src: p.src.clone(), tgt: p.tgt.clone(), labeled: true })
        .collect();
    PairSet { pairs }
}

/// Class-balanced draw of unlabeled training pairs: per active class,
/// `min(budget, |U_c \ S|)` pairs without replacement. The stream is keyed
/// by `(seed, iteration, class)`.
pub fn sample_unlabeled_batch(m: &DatasetManifest, per_class_budget: usize, seed: u64, iteration: u64) -> Result<PairSet> {
    if per_class_budget == 0 {
        return Err(Error::InvalidArgument("per-class budget must be at least 1".into()));
    }
    let mut out = Vec::new();
    for class in m.active_classes() {
        let candidates: Vec<PairRef> = enumerate_pairs(m, class)?.pairs.into_iter().filter(|p| !p.labeled).collect();
        let take = per_class_budget.min(candidates.len());
        if take == 0 {
            continue;
        }
        let mut rng = SeedKey::new(seed).with(iteration).with_str(class).rng();
        for i in index::sample(&mut rng, candidates.len(), take).into_iter() {
            out.push(candidates[i].clone());
        }
    }
    Ok(PairSet { pairs: out })
}

/// Keeps annotations only for training pairs whose two images both belong
/// to a per-class subset of `ceil(fraction * n_c)` training images; the
/// other training annotations are dropped (those pairs become unlabeled).
pub fn with_labeled_fraction(m: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("labeled fraction must lie in (0, 1], got {fraction}")));
    }
    let mut keep: HashSet<&str> = HashSet::new();
    for class in &m.classes {
        let members: Vec<&str> = m
            .images
            .iter()
            .filter(|e| &e.class == class && e.split == Split::Train)
            .map(|e| e.id.as_str())
            .collect();
        let n = ((fraction * members.len() as f64) - 1e-9).ceil().max(0.0) as usize;
        let n = n.min(members.len());
        let mut rng = SeedKey::new(seed).with_str("labeled-fraction").with_str(class).rng();
        // Prefix of one seeded permutation, so smaller fractions nest inside larger ones.
        let mut chosen: Vec<usize> = index::sample(&mut rng, members.len(), members.len()).into_vec();
        chosen.truncate(n);
        chosen.sort_unstable();
        keep.extend(chosen.into_iter().map(|i| members[i]));
    }
    let split: HashMap<&str, Split> = m.images.iter().map(|e| (e.id.as_str(), e.split)).collect();
    let mut out = m.clone();
    out.pairs.retain(|p| {
        split.get(p.src.as_str()) != Some(&Split::Train) || (keep.contains(p.src.as_str()) && keep.contains(p.tgt.as_str()))
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{FactorTags, ImageEntry, Keypoint, PairEntry, MANIFEST_SCHEMA_VERSION};

    pub(crate) fn manifest(per_class: &[usize], extra_val: usize) -> DatasetManifest {
        let mut images = Vec::new();
        let mut classes = Vec::new();
        for (c, n) in per_class.iter().enumerate() {
            let class = format!("c{c}");
            classes.push(class.clone());
            for i in 0..n + extra_val {
                let split = if i < *n { Split::Train } else { Split::Val };
                images.push(ImageEntry {
                    id: format!("{class}_{i}"),
                    path: format!("{class}_{i}.png"),
                    class: class.clone(),
                    split,
                    width: 8,
                    height: 8,
                    bbox: None,
                });
            }
        }
        DatasetManifest { schema_version: MANIFEST_SCHEMA_VERSION, classes, excluded_classes: vec![], images, pairs: vec![], corruption: None }
    }

    fn annotate(m: &mut DatasetManifest, src: &str, tgt: &str) {
        m.pairs.push(PairEntry {
            src: src.into(),
            tgt: tgt.into(),
            keypoints: vec![Keypoint { id: 0, src: [1.0, 1.0], tgt: [2.0, 2.0] }],
            factors: FactorTags::default(),
        });
    }

    #[test]
    fn pair_counts() {
        let m = manifest(&[1, 3, 25], 2);
        assert!(enumerate_pairs(&m, "c0").unwrap().is_empty());
        let three = enumerate_pairs(&m, "c1").unwrap();
        assert_eq!(three.len(), 6);
        assert!(three.keys().contains(&("c1_0".into(), "c1_2".into())));
        assert!(three.keys().contains(&("c1_2".into(), "c1_0".into())));
        let big = enumerate_pairs(&m, "c2").unwrap();
        let mut oracle = HashSet::new();
        for s in 0..25 {
            for t in 0..25 {
                if s != t {
                    oracle.insert((format!("c2_{s}"), format!("c2_{t}")));
                }
            }
        }
        assert_eq!(big.len(), 600);
        assert_eq!(big.keys(), oracle);
        assert!(matches!(enumerate_pairs(&m, "nope"), Err(Error::UnknownClass(_))));
    }

    #[test]
    fn labeled_subset() {
        let mut m = manifest(&[3, 3], 1);
        assert!(labeled_pairs(&m).is_empty());
        annotate(&mut m, "c0_0", "c0_1");
        annotate(&mut m, "c1_2", "c1_0");
        annotate(&mut m, "c1_3", "c1_4"); // val-only class member pair
        m.images.iter_mut().filter(|e| e.id == "c1_4").for_each(|e| e.split = Split::Val);
        let s = labeled_pairs(&m);
        assert_eq!(s.len(), 2);
        let universe: HashSet<_> = m.classes.iter().flat_map(|c| enumerate_pairs(&m, c).unwrap().keys()).collect();
        assert!(s.keys().is_subset(&universe));
    }

    #[test]
    fn sampling_exhausts_and_excludes_labeled() {
        let mut m = manifest(&[3, 4], 3);
        annotate(&mut m, "c0_0", "c0_1");
        let all = sample_unlabeled_batch(&m, 1000, 1, 0).unwrap();
        assert_eq!(all.len(), 5 + 12);
        assert!(!all.keys().contains(&("c0_0".into(), "c0_1".into())));
        let train: HashSet<&str> =
            m.images.iter().filter(|e| e.split == Split::Train).map(|e| e.id.as_str()).collect();
        assert!(all.iter().all(|p| train.contains(p.src.as_str()) && train.contains(p.tgt.as_str())));
    }

    #[test]
    fn sampling_is_deterministic_and_varies_by_iteration() {
        let m = manifest(&[10, 10], 0);
        let a = sample_unlabeled_batch(&m, 5, 9, 3).unwrap();
        assert_eq!(a, sample_unlabeled_batch(&m, 5, 9, 3).unwrap());
        assert_ne!(a, sample_unlabeled_batch(&m, 5, 9, 4).unwrap());
    }

    #[test]
    fn class_balance_with_shortfall() {
        let m = manifest(&[2, 6, 6], 0);
        let b = sample_unlabeled_batch(&m, 10, 0, 0).unwrap();
        let count = |c: &str| b.iter().filter(|p| p.src.starts_with(c)).count();
        assert_eq!(count("c0_"), 2);
        assert_eq!(count("c1_"), 10);
        assert_eq!(count("c2_"), 10);
    }

    #[test]
    fn excluded_classes_are_skipped() {
        let mut m = manifest(&[4, 4], 0);
        m.excluded_classes.push("c1".into());
        let b = sample_unlabeled_batch(&m, 100, 0, 0).unwrap();
        assert!(b.iter().all(|p| p.src.starts_with("c0_")));
    }

    #[test]
    fn zero_budget_rejected() {
        assert!(sample_unlabeled_batch(&manifest(&[3], 0), 0, 0, 0).is_err());
    }

    #[test]
    fn labeled_fraction_by_image() {
        let mut m = manifest(&[10], 2);
        for s in 0..10 {
            for t in 0..10 {
                if s != t {
                    annotate(&mut m, &format!("c0_{s}"), &format!("c0_{t}"));
                }
            }
        }
        annotate(&mut m, "c0_10", "c0_11");
        let sub = with_labeled_fraction(&m, 0.2, 4).unwrap();
        // two images kept -> two ordered pairs, val annotation untouched
        assert_eq!(labeled_pairs(&sub).len(), 2);
        assert!(sub.pairs.iter().any(|p| p.src == "c0_10"));
        assert_eq!(labeled_pairs(&with_labeled_fraction(&m, 1.0, 4).unwrap()).len(), 90);
        assert_eq!(labeled_pairs(&with_labeled_fraction(&m, 0.25, 4).unwrap()).len(), 6);
    }

    #[test]
    fn csv_export() {
        let m = manifest(&[2], 0);
        let mut buf = Vec::new();
        enumerate_pairs(&m, "c0").unwrap().write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "src_id,tgt_id,labeled\nc0_0,c0_1,0\nc0_1,c0_0,0\n");
    }
}
