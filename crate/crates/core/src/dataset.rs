//! In-memory labeled image set.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `(N, channels, H, W)`, already normalized.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Index `k` names class `k`.
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.shape().n != labels.len() {
            return Err(Error::dim("dataset labels", "n", images.shape().n, labels.len()));
        }
        if labels.is_empty() {
            return Err(Error::Domain("empty dataset".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Domain(format!("label {bad} out of range for {} classes", class_names.len())));
        }
        Ok(Dataset {
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `(channels, H, W)` of one image.
    pub fn image_shape(&self) -> Shape {
        Shape::new(1, self.images.shape().c, self.images.shape().h, self.images.shape().w)
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        Tensor::from_vec(self.image_shape(), self.images.sample(i).to_vec()).expect("one sample")
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let s = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * s.sample_len());
        for &i in indices {
            data.extend_from_slice(self.images.sample(i));
        }
        let images = Tensor::from_vec(Shape::new(indices.len(), s.c, s.h, s.w), data).expect("sized batch");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch(indices);
        Dataset::new(images, labels, self.class_names.clone())
    }

    /// Sample indices per class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.num_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            by[l].push(i);
        }
        by
    }
}
