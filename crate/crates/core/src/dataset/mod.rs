//! Labeled grayscale image collections.

mod augment;
mod balance;
mod manifest;
pub mod raster;
mod split;
mod synth;

pub use augment::{augment_image, AugmentParams};
pub use balance::balance;
pub use manifest::{load_cache, load_manifest, save_cache, DatasetStats};
pub use split::{split_indices, split_shuffle};
pub use synth::{generate_synthetic, SyntheticConfig};

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{invalid, Error, Result};

pub const MIN_SIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Original,
    Augmented,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// Stable sample id; subsets keep the ids of their parent.
    pub id: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub label: usize,
    pub origin: Origin,
    /// Id of the original this sample was augmented from.
    pub source_id: Option<usize>,
}

impl LabeledImage {
    pub fn new(id: usize, height: usize, width: usize, pixels: Vec<f64>, label: usize) -> Result<Self> {
        let img = LabeledImage {
            id,
            height,
            width,
            pixels,
            label,
            origin: Origin::Original,
            source_id: None,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(invalid(format!(
                "image {} is {}x{}, sides must be at least {MIN_SIDE}",
                self.id, self.height, self.width
            )));
        }
        if self.pixels.len() != self.height * self.width {
            return Err(Error::Shape {
                op: "LabeledImage",
                expected: vec![self.height, self.width],
                found: vec![self.pixels.len()],
            });
        }
        if let Some(p) = self.pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(invalid(format!("image {} has pixel {p} outside [0,1]", self.id)));
        }
        Ok(())
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    images: Vec<LabeledImage>,
    class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(class_names: Vec<String>, images: Vec<LabeledImage>) -> Result<Self> {
        if class_names.is_empty() {
            return Err(invalid("dataset needs at least one class"));
        }
        for img in &images {
            img.validate()?;
            if img.label >= class_names.len() {
                return Err(Error::LabelOutOfRange {
                    index: img.id,
                    label: img.label,
                    classes: class_names.len(),
                });
            }
        }
        if let Some(first) = images.first() {
            if images
                .iter()
                .any(|i| i.height != first.height || i.width != first.width)
            {
                return Err(invalid("all images in a dataset must share one size"));
            }
        }
        Ok(LabeledDataset {
            images,
            class_names,
        })
    }

    pub fn images(&self) -> &[LabeledImage] {
        &self.images
    }

    pub fn get(&self, i: usize) -> &LabeledImage {
        &self.images[i]
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_names.len()];
        for img in &self.images {
            c[img.label] += 1;
        }
        c
    }

    pub fn augmented_count(&self) -> usize {
        self.images
            .iter()
            .filter(|i| i.origin == Origin::Augmented)
            .count()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.label).collect()
    }

    /// `(height, width)` of the images; `None` for an empty dataset.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.images.first().map(|i| (i.height, i.width))
    }

    pub fn next_id(&self) -> usize {
        self.images.iter().map(|i| i.id + 1).max().unwrap_or(0)
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Images at `idx` as a `(n, 1, h, w)` tensor.
    pub fn image_tensor(&self, idx: &[usize]) -> Result<Tensor> {
        let (h, w) = self.image_size().ok_or_else(|| invalid("empty dataset"))?;
        let mut data = Vec::with_capacity(idx.len() * h * w);
        for &i in idx {
            data.extend_from_slice(&self.images[i].pixels);
        }
        Tensor::new(vec![idx.len(), 1, h, w], data)
    }

    /// Images at `idx` flattened to a `(n, h*w)` matrix.
    pub fn flat_tensor(&self, idx: &[usize]) -> Result<Tensor> {
        let t = self.image_tensor(idx)?;
        let n = t.rows();
        let w = t.row_len();
        t.reshape(vec![n, w])
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.images.len()).collect()
    }
}
