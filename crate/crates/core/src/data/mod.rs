//! Samples, synthetic corpora, dataset files, subject splits and sampling.

mod io;
mod sampler;
mod split;
mod synth;

pub use io::{read_dataset, read_tensor_file, write_dataset, write_tensor_file};
pub use sampler::balanced_batches;
pub use split::{allocate, split_per_subject, SplitSpec};
pub use synth::{
    ambiguous_scene, gen_ambiguous_dataset, gen_multiorgan_dataset, multiorgan_scene,
    AmbiguousScene, MultiorganScene, SceneParams, AMBIGUOUS_CLASSES, ORGAN_CLASSES,
};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One subject: a single 2-D image paired with the mask of its one labelled class.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    /// `[channels, height, width]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[1, height, width]`, values in `{0, 1}`.
    pub mask: Tensor,
    pub class_id: usize,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, subject_id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.subject_id == subject_id)
    }

    /// Subjects per class id (classes without subjects included as 0).
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for s in &self.samples {
            counts[s.class_id] += 1;
        }
        counts
    }

    /// Samples in the order of `ids`. Unknown ids are an error.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&Sample>> {
        let index: BTreeMap<&str, &Sample> = self
            .samples
            .iter()
            .map(|s| (s.subject_id.as_str(), s))
            .collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown subject `{id}`")))
            })
            .collect()
    }

    /// Dataset restricted to the given class ids (class list unchanged).
    pub fn filter_classes(&self, keep: &[usize]) -> Dataset {
        Dataset {
            class_names: self.class_names.clone(),
            samples: self
                .samples
                .iter()
                .filter(|s| keep.contains(&s.class_id))
                .cloned()
                .collect(),
        }
    }

    /// One line per class: `name: count`.
    pub fn summary(&self) -> String {
        self.class_names
            .iter()
            .zip(self.class_counts())
            .map(|(name, n)| format!("{name}: {n}"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Stacks sample images into `[n, c, h, w]` and masks into `[n, 1, h, w]`.
pub fn stack_batch(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let images = Tensor::stack(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let masks = Tensor::stack(&samples.iter().map(|s| &s.mask).collect::<Vec<_>>())?;
    Ok((images, masks))
}
