//! Manifests, image preprocessing, augmentation and the synthetic generator.

mod manifest;
mod raster;
mod synth;

pub use manifest::{
    DatasetManifest, ManifestEntry, Split, SplitName, CLASSES_FILE, LIVER_PLANES,
    LIVER_PLANE_COUNTS,
};
pub use raster::{augment, sample_seed, to_batch, AugmentPolicy, Gray};
pub use synth::{
    class_names, gen_synth, render, SynthSample, SynthSpec, IMAGES_DIR, MANIFEST_FILE,
};

use candle_core::{DType, Device, Tensor};

use crate::error::{Result, SemcError};

/// Every manifest image decoded and resized once, held in memory.
#[derive(Debug, Clone)]
pub struct ImageSet {
    images: Vec<Gray>,
    labels: Vec<usize>,
    size: usize,
}

impl ImageSet {
    pub fn load(manifest: &DatasetManifest, size: usize) -> Result<Self> {
        let images = (0..manifest.len())
            .map(|i| Ok(Gray::load(&manifest.image_path(i))?.resize(size)))
            .collect::<Result<Vec<_>>>()?;
        let labels = manifest.entries().iter().map(|e| e.label).collect();
        Ok(Self {
            images,
            labels,
            size,
        })
    }

    pub fn from_parts(images: Vec<Gray>, labels: Vec<usize>, size: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(SemcError::Data(format!(
                "{} images for {} labels",
                images.len(),
                labels.len()
            )));
        }
        let images = images.into_iter().map(|g| g.resize(size)).collect();
        Ok(Self {
            images,
            labels,
            size,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Assembles `(x, y)` for `indices`. With a policy each image is
    /// augmented using a seed derived from `(seed, epoch, index)`.
    pub fn batch(
        &self,
        indices: &[usize],
        policy: Option<&AugmentPolicy>,
        seed: u64,
        epoch: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<(Tensor, Vec<usize>)> {
        let images: Vec<Gray> = indices
            .iter()
            .map(|&i| match policy {
                Some(p) => augment(&self.images[i], p, sample_seed(seed, epoch, i as u64)),
                None => self.images[i].clone(),
            })
            .collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((to_batch(&images, dtype, device)?, labels))
    }
}
