use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images in `[0, 1]` stored `[N, C, H, W]`, with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] != labels.len() {
            return Err(Error::contract(format!(
                "dataset wants [N, C, H, W] images for {} labels, got {s:?}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::contract(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self {
            name: name.into(),
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`
    pub fn geometry(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        self.images.index_axis0(i)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            images: self.images.select_axis0(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Replicates a single-channel dataset into `channels` identical planes.
    pub fn with_channels(&self, channels: usize) -> Result<Dataset> {
        let (c, h, w) = self.geometry();
        if c == channels {
            return Ok(self.clone());
        }
        if c != 1 {
            return Err(Error::config(format!("cannot expand {c}-channel images to {channels}")));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(self.len() * channels * plane);
        for img in self.images.data().chunks_exact(plane) {
            for _ in 0..channels {
                data.extend_from_slice(img);
            }
        }
        Ok(Dataset {
            name: format!("{}-c{channels}", self.name),
            images: Tensor::new(vec![self.len(), channels, h, w], data)?,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        })
    }
}
