use crate::datapipe::ClothingLabels;
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, PoseMask};
use crate::toy::ToySample;

/// One frontal target with its mask and every paired ego frame, in memory.
#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub id: String,
    pub subject_id: String,
    pub frontal: ImageTensor,
    pub mask: PoseMask,
    pub egos: Vec<ImageTensor>,
    pub labels: ClothingLabels,
}

impl TrainingItem {
    /// Checks the resolution and the mask foreground, naming the item.
    pub fn validate(&self, image_size: usize) -> Result<()> {
        let fail = |reason: String| Err(Error::InvalidSample { id: self.id.clone(), reason });
        let want = (image_size, image_size);
        if self.frontal.resolution() != want || self.frontal.channels() != 3 {
            return fail(format!("frontal image is {:?}, expected 3x{image_size}x{image_size}", self.frontal.shape()));
        }
        if self.mask.resolution() != want {
            return fail(format!("pose mask is {:?}, expected {want:?}", self.mask.resolution()));
        }
        if self.mask.validate_foreground().is_err() {
            return fail("pose mask has no foreground".into());
        }
        if self.egos.is_empty() {
            return fail("no ego frames".into());
        }
        if let Some(e) = self.egos.iter().find(|e| e.resolution() != want || e.channels() != 3) {
            return fail(format!("ego image is {:?}, expected 3x{image_size}x{image_size}", e.shape()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub items: Vec<TrainingItem>,
}

impl TrainingSet {
    pub fn new(items: Vec<TrainingItem>, image_size: usize) -> Result<Self> {
        for it in &items {
            it.validate(image_size)?;
        }
        Ok(Self { items })
    }

    pub fn from_toy(samples: &[ToySample]) -> Self {
        let items = samples
            .iter()
            .map(|s| TrainingItem {
                id: s.subject.id.clone(),
                subject_id: s.subject.id.clone(),
                frontal: s.frontal.clone(),
                mask: s.mask.clone(),
                egos: s.egos.clone(),
                labels: s.subject.clothing,
            })
            .collect();
        Self { items }
    }

    /// Loads every entry of `split` from files below `root`.
    #[cfg(feature = "io")]
    pub fn from_manifest(
        manifest: &crate::datapipe::DatasetManifest,
        root: &std::path::Path,
        split: crate::datapipe::Split,
        image_size: usize,
    ) -> Result<Self> {
        let mut items = Vec::new();
        for e in manifest.split_entries(split) {
            let named = |err: Error| Error::InvalidSample { id: e.frontal_id.clone(), reason: err.to_string() };
            let frontal = ImageTensor::load(root.join(&e.frontal_path)).map_err(named)?;
            let mask = PoseMask::load(root.join(&e.pose_mask_path)).map_err(named)?;
            let egos = e
                .ego_paths
                .iter()
                .map(|p| ImageTensor::load(root.join(p)).map_err(named))
                .collect::<Result<Vec<_>>>()?;
            items.push(TrainingItem {
                id: e.frontal_id.clone(),
                subject_id: e.subject_id.clone(),
                frontal,
                mask,
                egos,
                labels: e.clothing_labels,
            });
        }
        Self::new(items, image_size)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn frontals(&self) -> Vec<&ImageTensor> {
        self.items.iter().map(|i| &i.frontal).collect()
    }

    /// Frontal and ego images, for fitting the autoencoder.
    pub fn all_images(&self) -> Vec<&ImageTensor> {
        self.items.iter().flat_map(|i| std::iter::once(&i.frontal).chain(&i.egos)).collect()
    }
}
