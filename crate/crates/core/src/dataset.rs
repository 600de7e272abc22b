//! A manifest together with its decoded images.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::manifest::DatasetManifest;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    images: Vec<Image>,
    index: HashMap<String, usize>,
}

impl Dataset {
    /// Wraps in-memory images, given in manifest order.
    pub fn new(manifest: DatasetManifest, images: Vec<Image>) -> Result<Self> {
        manifest.validate()?;
        if images.len() != manifest.images.len() {
            return Err(Error::InvalidManifest(format!(
                "{} images supplied for {} manifest entries",
                images.len(),
                manifest.images.len()
            )));
        }
        for (img, e) in images.iter().zip(&manifest.images) {
            if img.width() != e.width || img.height() != e.height {
                return Err(Error::InvalidManifest(format!("image `{}` dimensions disagree with manifest", e.id)));
            }
        }
        let index = manifest.images.iter().enumerate().map(|(i, e)| (e.id.clone(), i)).collect();
        Ok(Dataset { manifest, images, index })
    }

    /// Loads a manifest and decodes every image, resolving relative paths
    /// against the manifest's directory.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::load_images(manifest, &base, |_| None)
    }

    /// Loads with a per-image path override (used for corrupted variants).
    pub fn load_images(
        manifest: DatasetManifest,
        base: &Path,
        path_for: impl Fn(&str) -> Option<PathBuf> + Sync,
    ) -> Result<Self> {
        let images = manifest
            .images
            .par_iter()
            .map(|e| {
                let p = path_for(&e.id).unwrap_or_else(|| base.join(&e.path));
                Image::load(&p)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest, images)
    }

    pub fn image(&self, id: &str) -> Result<&Image> {
        self.index.get(id).map(|i| &self.images[*i]).ok_or_else(|| Error::UnknownImage(id.to_string()))
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    /// Same images, different annotations (e.g. a labeled-fraction view).
    pub fn with_manifest(&self, manifest: DatasetManifest) -> Result<Self> {
        if manifest.images != self.manifest.images {
            return Err(Error::ManifestMismatch("image lists differ".into()));
        }
        Dataset::new(manifest, self.images.clone())
    }

    /// SHA-256 over the manifest JSON and every image's content hash.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.manifest.to_json().as_bytes());
        for img in &self.images {
            h.update(img.content_hash().as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Writes the manifest plus every image (as PNG at its manifest path)
    /// under `dir`.
    pub fn save(&self, dir: &Path, manifest_name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.manifest
            .images
            .par_iter()
            .zip(self.images.par_iter())
            .try_for_each(|(e, img)| {
                let p = dir.join(&e.path);
                if let Some(parent) = p.parent() {
                    std::fs::create_dir_all(parent).map_err(|err| Error::io(parent, err))?;
                }
                img.save(&p)
            })?;
        let mpath = dir.join(manifest_name);
        self.manifest.save(&mpath)?;
        Ok(mpath)
    }
}
