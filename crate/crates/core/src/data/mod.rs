//! Datasets: the synthetic sprite corpus, folder loading and splitting.

mod load;
mod split;
mod synth;

pub use load::{encode_png, load_dataset, load_image, to_rgb_image, read_labels, write_labels, LoadReport, LABELS_HEADER};
pub use split::{split_dataset, Split};
pub use synth::{generate_synthetic_dataset, render_sprite, sample_id, AttributeSpec, DatasetManifest, SpriteAttributes};

use std::collections::HashMap;

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Images in `[0, 1]`, `(N, C, H, W)`, with ids and labels in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub ids: Vec<String>,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl ImageSet {
    pub fn new(ids: Vec<String>, images: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != ids.len() || labels.len() != ids.len() {
            return Err(contract("ids, labels and image batch disagree in length"));
        }
        Ok(Self { ids, images, labels })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `(C, H, W)`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Stacks the given items into one batch.
    pub fn gather(&self, indices: &[usize]) -> Tensor<f32> {
        let [c, h, w] = self.image_shape();
        let per = c * h * w;
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        Tensor::from_vec(&[indices.len(), c, h, w], data).expect("gather shape")
    }

    /// The items with the given ids, in the given order.
    pub fn subset(&self, ids: &[String]) -> Result<Self> {
        let pos: HashMap<&str, usize> = self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let indices = ids
            .iter()
            .map(|id| pos.get(id.as_str()).copied().ok_or_else(|| crate::Error::Lookup(id.clone())))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select(&indices))
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            images: self.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}
