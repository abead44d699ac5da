//! Browser bindings: a small FiLMed U-Net trained in the page on multiorgan
//! scenes, then asked to segment a fresh scene under a chosen class.

use wasm_bindgen::prelude::*;

use filmseg::data::{balanced_batches, gen_multiorgan_dataset, multiorgan_scene, Dataset, Sample};
use filmseg::eval::{binarize, dice_score};
use filmseg::model::{one_hot_batch, FilmUNet, ModelConfig};
use filmseg::train::{train_step, Adam, AdamConfig, MetadataMode};
use filmseg::Tensor;

const SUBJECTS_PER_CLASS: usize = 4;
const BATCH_SIZE: usize = 4;
const LEARNING_RATE: f64 = 0.01;
const DICE_SMOOTH: f64 = 1.0;

fn message(e: filmseg::Error) -> String {
    e.to_string()
}

#[wasm_bindgen]
pub struct Demo {
    size: usize,
    model: FilmUNet,
    optimizer: Adam,
    dataset: Dataset,
    epochs: u32,
    seed: u64,
    image: Tensor,
    masks: [Tensor; 3],
}

#[wasm_bindgen]
impl Demo {
    /// Tiny depth-1 model and a 12-subject training set of `size`x`size` scenes.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: u32) -> Result<Demo, String> {
        let size = size as usize;
        let seed = u64::from(seed);
        let config = ModelConfig {
            depth: 1,
            base_filters: 4,
            ..ModelConfig::default()
        };
        if size == 0 || !size.is_multiple_of(config.size_multiple()) {
            return Err(format!("size must be a positive multiple of {}", config.size_multiple()));
        }
        let counts: Vec<(usize, usize)> = (0..3).map(|c| (c, SUBJECTS_PER_CLASS)).collect();
        let dataset = gen_multiorgan_dataset(&counts, (size, size), seed).map_err(message)?;
        let model = FilmUNet::init(config, seed).map_err(message)?;
        let optimizer = Adam::new(AdamConfig::default(), model.params());
        let scene = multiorgan_scene(seed ^ 0xD1CE, (size, size)).map_err(message)?;
        Ok(Demo {
            size,
            model,
            optimizer,
            dataset,
            epochs: 0,
            seed,
            image: scene.image,
            masks: scene.masks,
        })
    }

    pub fn size(&self) -> u32 {
        self.size as u32
    }

    pub fn epochs(&self) -> u32 {
        self.epochs
    }

    /// Runs `epochs` class-balanced epochs; returns the mean batch loss of the last one.
    pub fn train(&mut self, epochs: u32) -> Result<f64, String> {
        let classes: Vec<usize> = self.dataset.samples.iter().map(|s| s.class_id).collect();
        let mut last = f64::NAN;
        for _ in 0..epochs {
            let epoch_seed = self.seed.wrapping_add(u64::from(self.epochs));
            let batches = balanced_batches(&classes, BATCH_SIZE, epoch_seed).map_err(message)?;
            let mut total = 0.0;
            for batch in &batches {
                let samples: Vec<&Sample> = batch.iter().map(|&i| &self.dataset.samples[i]).collect();
                total += train_step(
                    &mut self.model,
                    &mut self.optimizer,
                    &samples,
                    MetadataMode::TrueClass,
                    LEARNING_RATE,
                    DICE_SMOOTH,
                )
                .map_err(message)?;
            }
            last = total / batches.len() as f64;
            self.epochs += 1;
        }
        Ok(last)
    }

    /// Draws a new unseen scene; returns its image row-major.
    pub fn new_scene(&mut self, seed: u32) -> Result<Vec<f64>, String> {
        let scene = multiorgan_scene(u64::from(seed) << 20 | 0xACE, (self.size, self.size)).map_err(message)?;
        self.image = scene.image;
        self.masks = scene.masks;
        Ok(self.image())
    }

    pub fn image(&self) -> Vec<f64> {
        self.image.data().to_vec()
    }

    /// Ground-truth mask of the current scene for `class_id`.
    pub fn truth(&self, class_id: u32) -> Result<Vec<f64>, String> {
        self.masks
            .get(class_id as usize)
            .map(|m| m.data().to_vec())
            .ok_or_else(|| format!("class id must be below {}", self.masks.len()))
    }

    /// Foreground probabilities for the current scene conditioned on `class_id`.
    pub fn segment(&self, class_id: u32) -> Result<Vec<f64>, String> {
        Ok(self.predict(class_id)?.data().to_vec())
    }

    /// Dice of the thresholded prediction for `class_id` against that class's mask.
    pub fn dice(&self, class_id: u32) -> Result<f64, String> {
        let pred = binarize(&self.predict(class_id)?);
        let truth = self
            .masks
            .get(class_id as usize)
            .ok_or_else(|| format!("class id must be below {}", self.masks.len()))?;
        let truth = Tensor::new(pred.shape().to_vec(), truth.data().to_vec()).map_err(message)?;
        dice_score(&pred, &truth).map_err(message)
    }
}

impl Demo {
    fn predict(&self, class_id: u32) -> Result<Tensor, String> {
        let meta = one_hot_batch(&[class_id as usize], 3).map_err(message)?;
        let image = Tensor::new(vec![1, 1, self.size, self.size], self.image.data().to_vec()).map_err(message)?;
        self.model.forward(&image, &meta).map_err(message)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_arguments() {
        assert!(Demo::new(0, 15).is_err());
        let demo = Demo::new(0, 16).unwrap();
        assert!(demo.segment(3).is_err());
        assert!(demo.truth(7).is_err());
    }

    #[test]
    fn scene_and_prediction_shapes() {
        let mut demo = Demo::new(1, 16).unwrap();
        let image = demo.new_scene(4).unwrap();
        assert_eq!(image.len(), 256);
        let probs = demo.segment(0).unwrap();
        assert_eq!(probs.len(), 256);
        assert!(probs.iter().all(|p| *p > 0.0 && *p < 1.0));
        assert!(demo.truth(2).unwrap().contains(&1.0));
    }

    #[test]
    fn training_lowers_loss_and_follows_the_class() {
        let mut demo = Demo::new(2, 32).unwrap();
        let first = demo.train(1).unwrap();
        let last = demo.train(59).unwrap();
        assert_eq!(demo.epochs(), 60);
        assert!(last < first, "{last} vs {first}");
        let per_class: Vec<f64> = (0..3).map(|c| demo.dice(c).unwrap()).collect();
        assert!(per_class.iter().sum::<f64>() / 3.0 > 0.5, "{per_class:?}");
        // different class vectors give different masks for the same image
        assert_ne!(demo.segment(0).unwrap(), demo.segment(1).unwrap());
    }
}
