//! Labeled image collections held in memory.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ids::ClassId;
use crate::tensor::Tensor;

/// Images of a single `[C, H, W]` shape stored back to back, with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    image_shape: [usize; 3],
    pixels: Vec<f64>,
    labels: Vec<ClassId>,
}

impl LabeledSet {
    pub fn empty(image_shape: [usize; 3]) -> Self {
        Self {
            image_shape,
            pixels: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn new(image_shape: [usize; 3], pixels: Vec<f64>, labels: Vec<ClassId>) -> Result<Self> {
        let size: usize = image_shape.iter().product();
        if size == 0 {
            return Err(Error::Shape {
                op: "labeled_set",
                reason: alloc::format!("degenerate image shape {image_shape:?}"),
            });
        }
        if pixels.len() != size * labels.len() {
            return Err(Error::Dimension {
                op: "labeled_set",
                axis: "pixels",
                expected: size * labels.len(),
                actual: pixels.len(),
            });
        }
        Ok(Self {
            image_shape,
            pixels,
            labels,
        })
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn image_size(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let size = self.image_size();
        &self.pixels[i * size..(i + 1) * size]
    }

    pub fn label(&self, i: usize) -> ClassId {
        self.labels[i]
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn push(&mut self, image: &[f64], label: ClassId) -> Result<()> {
        if image.len() != self.image_size() {
            return Err(Error::Dimension {
                op: "labeled_set",
                axis: "image",
                expected: self.image_size(),
                actual: image.len(),
            });
        }
        self.pixels.extend_from_slice(image);
        self.labels.push(label);
        Ok(())
    }

    pub fn extend(&mut self, other: &LabeledSet) -> Result<()> {
        if other.image_shape != self.image_shape {
            return Err(Error::Shape {
                op: "labeled_set",
                reason: alloc::format!("{:?} vs {:?}", self.image_shape, other.image_shape),
            });
        }
        self.pixels.extend_from_slice(&other.pixels);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    /// Stacks the selected images into an `[N, C, H, W]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let size = self.image_size();
        let mut data = Vec::with_capacity(indices.len() * size);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_shape;
        Tensor::new(&[indices.len(), c, h, w], data)
    }

    pub fn all_images(&self) -> Result<Tensor> {
        let [c, h, w] = self.image_shape;
        Tensor::new(&[self.len(), c, h, w], self.pixels.clone())
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        let mut out = LabeledSet::empty(self.image_shape);
        for &i in indices {
            out.pixels.extend_from_slice(self.image(i));
            out.labels.push(self.labels[i]);
        }
        out
    }

    /// Keeps only samples whose label is in `classes`.
    pub fn filter_classes(&self, classes: &[ClassId]) -> LabeledSet {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        self.subset(&keep)
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<ClassId> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn indices_by_class(&self) -> BTreeMap<ClassId, Vec<usize>> {
        let mut map: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, &label) in self.labels.iter().enumerate() {
            map.entry(label).or_default().push(i);
        }
        map
    }

    pub fn class_histogram(&self) -> BTreeMap<ClassId, usize> {
        let mut map = BTreeMap::new();
        for &label in &self.labels {
            *map.entry(label).or_insert(0) += 1;
        }
        map
    }
}
