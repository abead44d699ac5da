//! Synthetic corpora.
//!
//! *Ambiguous*: every scene holds a large low-contrast blob and a small bright
//! blob straddling its border. The class decides which structure is the
//! target (large blob, their union, or the small blob), so the image alone
//! does not determine the mask.
//!
//! *Multiorgan*: every scene holds a disk, a square and a triangle on a dark
//! background, each in its own intensity band and kept apart from the others
//! and from the border; a sample is labelled for only one of them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const AMBIGUOUS_CLASSES: [&str; 3] = ["large", "union", "small"];
pub const ORGAN_CLASSES: [&str; 3] = ["disk", "square", "triangle"];

const BACKGROUND: f64 = 0.1;
const NOISE_SIGMA: f64 = 0.05;
const MAX_ATTEMPTS: usize = 100;
/// Minimum gap between a multiorgan shape and the image border, in pixels at 32x32.
const ORGAN_MARGIN: f64 = 3.0;
/// Minimum gap between two multiorgan shapes, in pixels at 32x32.
const ORGAN_GAP: usize = 3;

/// Appearance constants shared by both generators.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneParams {
    pub background: f64,
    pub noise_sigma: f64,
    pub diffuse_intensity: (f64, f64),
    pub bright_intensity: (f64, f64),
    /// Background level of multiorgan scenes.
    pub organ_background: f64,
    pub organ_noise_sigma: f64,
    /// Intensity range of each organ, indexed like [`ORGAN_CLASSES`].
    pub organ_intensity: [(f64, f64); 3],
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            background: BACKGROUND,
            noise_sigma: NOISE_SIGMA,
            diffuse_intensity: (0.3, 0.5),
            bright_intensity: (0.8, 1.0),
            organ_background: 0.1,
            organ_noise_sigma: 0.03,
            organ_intensity: [(0.87, 0.93), (0.62, 0.68), (0.37, 0.43)],
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for subject `index` of class `class_id`, independent of corpus size.
pub(crate) fn subject_seed(seed: u64, class_id: usize, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(((class_id as u64) << 32) | index as u64))
}

fn check_size(size: (usize, usize)) -> Result<()> {
    if size.0 < 16 || size.1 < 16 {
        return Err(Error::InvalidArgument(format!(
            "synthetic images need at least 16x16 pixels, got {}x{}",
            size.0, size.1
        )));
    }
    Ok(())
}

struct Canvas {
    h: usize,
    w: usize,
    pixels: Vec<f64>,
}

impl Canvas {
    fn new(h: usize, w: usize, level: f64) -> Self {
        Self {
            h,
            w,
            pixels: vec![level; h * w],
        }
    }

    fn paint(&mut self, mask: &[bool], value: f64) {
        for (p, &m) in self.pixels.iter_mut().zip(mask) {
            if m {
                *p = value;
            }
        }
    }

    fn finish(mut self, rng: &mut ChaCha8Rng, sigma: f64) -> Tensor {
        let noise = Normal::new(0.0, sigma).expect("positive sigma");
        for p in &mut self.pixels {
            *p = (*p + noise.sample(rng)).clamp(0.0, 1.0);
        }
        Tensor::new(vec![1, self.h, self.w], self.pixels).expect("canvas shape")
    }
}

fn disk_mask(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> Vec<bool> {
    let mut m = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            m[y * w + x] = dy * dy + dx * dx <= r * r;
        }
    }
    m
}

fn mask_tensor(h: usize, w: usize, mask: &[bool]) -> Tensor {
    Tensor::new(
        vec![1, h, w],
        mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )
    .expect("mask shape")
}

/// One ambiguous scene: the image plus its two candidate structures.
#[derive(Clone, Debug, PartialEq)]
pub struct AmbiguousScene {
    pub image: Tensor,
    pub large: Tensor,
    pub small: Tensor,
}

impl AmbiguousScene {
    /// Ground truth for class `class_id` (0 = large, 1 = union, 2 = small).
    pub fn mask_for(&self, class_id: usize) -> Tensor {
        match class_id {
            0 => self.large.clone(),
            2 => self.small.clone(),
            _ => {
                let data = self
                    .large
                    .data()
                    .iter()
                    .zip(self.small.data())
                    .map(|(a, b)| a.max(*b))
                    .collect();
                Tensor::new(self.large.shape().to_vec(), data).expect("same shape")
            }
        }
    }
}

/// Draws the scene for `scene_seed`. Identical seeds give identical scenes.
pub fn ambiguous_scene(scene_seed: u64, size: (usize, usize)) -> Result<AmbiguousScene> {
    check_size(size)?;
    let params = SceneParams::default();
    let (h, w) = size;
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let scale = h.min(w) as f64 / 32.0;
    let big_r = rng.random_range(5.0..7.0) * scale;
    let small_r = rng.random_range(3.0..4.0) * scale;
    // the small blob's centre sits just outside the large blob's border
    let reach = big_r + 0.4 * small_r;
    for _ in 0..MAX_ATTEMPTS {
        let cy = rng.random_range(big_r + 1.0..h as f64 - big_r - 1.0);
        let cx = rng.random_range(big_r + 1.0..w as f64 - big_r - 1.0);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let (sy, sx) = (cy + reach * angle.sin(), cx + reach * angle.cos());
        let margin = small_r + 0.5;
        if sy < margin || sx < margin || sy > h as f64 - margin || sx > w as f64 - margin {
            continue;
        }
        let large = disk_mask(h, w, cy, cx, big_r);
        let small = disk_mask(h, w, sy, sx, small_r);
        let mut canvas = Canvas::new(h, w, params.background);
        let (lo, hi) = params.diffuse_intensity;
        canvas.paint(&large, rng.random_range(lo..hi));
        let (lo, hi) = params.bright_intensity;
        canvas.paint(&small, rng.random_range(lo..hi));
        let image = canvas.finish(&mut rng, params.noise_sigma);
        return Ok(AmbiguousScene {
            image,
            large: mask_tensor(h, w, &large),
            small: mask_tensor(h, w, &small),
        });
    }
    Err(Error::PlacementFailed(MAX_ATTEMPTS))
}

/// `n_subjects_per_class` independent scenes for each of the three classes.
pub fn gen_ambiguous_dataset(
    n_subjects_per_class: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<Dataset> {
    if n_subjects_per_class == 0 {
        return Err(Error::InvalidArgument(
            "need at least one subject per class".into(),
        ));
    }
    check_size(size)?;
    let mut samples = Vec::with_capacity(3 * n_subjects_per_class);
    for (class_id, name) in AMBIGUOUS_CLASSES.iter().enumerate() {
        for i in 0..n_subjects_per_class {
            let scene = ambiguous_scene(subject_seed(seed, class_id, i), size)?;
            samples.push(Sample {
                subject_id: format!("amb-{name}-{i:03}"),
                mask: scene.mask_for(class_id),
                image: scene.image,
                class_id,
            });
        }
    }
    Ok(Dataset {
        class_names: AMBIGUOUS_CLASSES.iter().map(|s| s.to_string()).collect(),
        samples,
    })
}

/// One multiorgan scene with a mask per shape, indexed like [`ORGAN_CLASSES`].
#[derive(Clone, Debug, PartialEq)]
pub struct MultiorganScene {
    pub image: Tensor,
    pub masks: [Tensor; 3],
}

fn square_mask(h: usize, w: usize, top: f64, left: f64, side: f64) -> Vec<bool> {
    let mut m = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            m[y * w + x] = py >= top && py < top + side && px >= left && px < left + side;
        }
    }
    m
}

/// Upward-pointing isosceles triangle inside the box `[top, top+height) x [left, left+base)`.
fn triangle_mask(h: usize, w: usize, top: f64, left: f64, base: f64, height: f64) -> Vec<bool> {
    let mut m = vec![false; h * w];
    let apex = left + base / 2.0;
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            if py < top || py >= top + height {
                continue;
            }
            let half = (py - top) / height * base / 2.0;
            m[y * w + x] = (px - apex).abs() <= half;
        }
    }
    m
}

/// Grows a mask by one pixel (8-neighbourhood).
fn dilate(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = mask.to_vec();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                    if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                        out[ny as usize * w + nx as usize] = true;
                    }
                }
            }
        }
    }
    out
}

pub fn multiorgan_scene(scene_seed: u64, size: (usize, usize)) -> Result<MultiorganScene> {
    check_size(size)?;
    let params = SceneParams::default();
    let (h, w) = size;
    let (hf, wf) = (h as f64, w as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let scale = h.min(w) as f64 / 32.0;
    let radius = rng.random_range(4.5..6.0) * scale;
    let side = rng.random_range(8.0..10.0) * scale;
    let base = rng.random_range(10.0..12.0) * scale;
    let tri_h = 0.9 * base;
    let margin = ORGAN_MARGIN * scale;
    let gap = ((ORGAN_GAP as f64 * scale).round() as usize).max(1);
    // shapes are placed in order, each re-drawn until it keeps `gap` pixels
    // from those already placed; a dead end restarts the scene
    let place = |rng: &mut ChaCha8Rng| -> Option<Vec<Vec<bool>>> {
        let mut shapes: Vec<Vec<bool>> = Vec::with_capacity(3);
        for kind in 0..3 {
            let fits = |mask: &Vec<bool>, shapes: &[Vec<bool>]| {
                let grown = (0..gap).fold(mask.clone(), |m, _| dilate(&m, h, w));
                shapes.iter().all(|other| !grown.iter().zip(other).any(|(&a, &b)| a && b))
            };
            let mask = (0..MAX_ATTEMPTS)
                .map(|_| match kind {
                    0 => disk_mask(
                        h,
                        w,
                        rng.random_range(radius + margin..hf - radius - margin),
                        rng.random_range(radius + margin..wf - radius - margin),
                        radius,
                    ),
                    1 => square_mask(
                        h,
                        w,
                        rng.random_range(margin..hf - side - margin),
                        rng.random_range(margin..wf - side - margin),
                        side,
                    ),
                    _ => triangle_mask(
                        h,
                        w,
                        rng.random_range(margin..hf - tri_h - margin),
                        rng.random_range(margin..wf - base - margin),
                        base,
                        tri_h,
                    ),
                })
                .find(|m| fits(m, &shapes))?;
            shapes.push(mask);
        }
        Some(shapes)
    };
    let shapes = (0..MAX_ATTEMPTS)
        .find_map(|_| place(&mut rng))
        .ok_or(Error::PlacementFailed(MAX_ATTEMPTS))?;
    let mut canvas = Canvas::new(h, w, params.organ_background);
    for (shape, (lo, hi)) in shapes.iter().zip(params.organ_intensity) {
        canvas.paint(shape, rng.random_range(lo..hi));
    }
    let image = canvas.finish(&mut rng, params.organ_noise_sigma);
    let masks = [0, 1, 2].map(|i| mask_tensor(h, w, &shapes[i]));
    Ok(MultiorganScene { image, masks })
}

/// `counts` lists `(class_id, subjects)` pairs over [`ORGAN_CLASSES`].
pub fn gen_multiorgan_dataset(
    counts: &[(usize, usize)],
    size: (usize, usize),
    seed: u64,
) -> Result<Dataset> {
    check_size(size)?;
    let mut samples = Vec::new();
    for &(class_id, count) in counts {
        let name = ORGAN_CLASSES.get(class_id).ok_or_else(|| {
            Error::InvalidArgument(format!("organ class id {class_id} out of range"))
        })?;
        if count == 0 {
            return Err(Error::InvalidArgument(format!(
                "class `{name}` needs at least one subject"
            )));
        }
        if counts.iter().filter(|c| c.0 == class_id).count() > 1 {
            return Err(Error::InvalidArgument(format!("class `{name}` listed twice")));
        }
        for i in 0..count {
            let scene = multiorgan_scene(subject_seed(seed, class_id, i), size)?;
            let [m0, m1, m2] = scene.masks;
            let mask = [m0, m1, m2].into_iter().nth(class_id).expect("class < 3");
            samples.push(Sample {
                subject_id: format!("org-{name}-{i:03}"),
                image: scene.image,
                mask,
                class_id,
            });
        }
    }
    Ok(Dataset {
        class_names: ORGAN_CLASSES.iter().map(|s| s.to_string()).collect(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::dice_score;

    /// Number of 4-connected components of a binary mask.
    fn components(mask: &Tensor) -> usize {
        let (h, w) = (mask.shape()[1], mask.shape()[2]);
        let on: Vec<bool> = mask.data().iter().map(|&v| v > 0.5).collect();
        let mut seen = vec![false; h * w];
        let mut count = 0;
        for start in 0..h * w {
            if !on[start] || seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(p) = stack.pop() {
                let (y, x) = (p / w, p % w);
                let mut visit = |q: usize| {
                    if on[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                };
                if y > 0 {
                    visit(p - w);
                }
                if y + 1 < h {
                    visit(p + w);
                }
                if x > 0 {
                    visit(p - 1);
                }
                if x + 1 < w {
                    visit(p + 1);
                }
            }
        }
        count
    }

    fn area(t: &Tensor) -> f64 {
        t.data().iter().sum()
    }

    #[test]
    fn ambiguous_masks_are_single_components() {
        let ds = gen_ambiguous_dataset(20, (32, 32), 5).unwrap();
        assert_eq!(ds.len(), 60);
        for s in &ds.samples {
            assert_eq!(components(&s.mask), 1, "{}", s.subject_id);
            assert!(area(&s.mask) >= 4.0);
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn same_scene_same_image_different_masks() {
        let scene = ambiguous_scene(42, (32, 32)).unwrap();
        let again = ambiguous_scene(42, (32, 32)).unwrap();
        assert_eq!(scene, again);
        let masks: Vec<Tensor> = (0..3).map(|c| scene.mask_for(c)).collect();
        assert_ne!(masks[0], masks[1]);
        assert_ne!(masks[1], masks[2]);
        assert_ne!(masks[0], masks[2]);
    }

    #[test]
    fn small_class_is_smaller_than_large_class() {
        let smaller = (0..200u64)
            .filter(|&s| {
                let scene = ambiguous_scene(s, (32, 32)).unwrap();
                area(&scene.mask_for(2)) < area(&scene.mask_for(0))
            })
            .count();
        assert!(smaller >= 190, "{smaller}/200");
    }

    #[test]
    fn matched_scene_masks_disagree() {
        let mut total = 0.0;
        let mut pairs = 0;
        for s in 0..100u64 {
            let scene = ambiguous_scene(s, (32, 32)).unwrap();
            for (a, b) in [(0, 1), (0, 2), (1, 2)] {
                total += dice_score(&scene.mask_for(a), &scene.mask_for(b)).unwrap();
                pairs += 1;
            }
        }
        assert!(total / (pairs as f64) < 0.5, "{}", total / pairs as f64);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_ambiguous_dataset(3, (32, 32), 9).unwrap();
        let b = gen_ambiguous_dataset(3, (32, 32), 9).unwrap();
        let c = gen_ambiguous_dataset(3, (32, 32), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let m1 = gen_multiorgan_dataset(&[(0, 2), (1, 3)], (32, 32), 4).unwrap();
        let m2 = gen_multiorgan_dataset(&[(0, 2), (1, 3)], (32, 32), 4).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn multiorgan_counts_and_single_masks() {
        let ds = gen_multiorgan_dataset(&[(0, 2), (1, 12)], (32, 32), 1).unwrap();
        assert_eq!(ds.len(), 14);
        assert_eq!(ds.class_counts(), vec![2, 12, 0]);
        for s in &ds.samples {
            assert_eq!(components(&s.mask), 1);
        }
    }

    #[test]
    fn multiorgan_shapes_are_disjoint_and_cover_scene() {
        for seed in 0..50u64 {
            let scene = multiorgan_scene(seed, (32, 32)).unwrap();
            let [d, s, t] = &scene.masks;
            for (a, b) in [(d, s), (d, t), (s, t)] {
                assert!(a.data().iter().zip(b.data()).all(|(x, y)| x * y == 0.0));
            }
            for m in &scene.masks {
                assert!(area(m) >= 4.0);
            }
            // the three per-class labels together cover all three shapes
            let union: f64 = (0..1024)
                .map(|i| d.data()[i].max(s.data()[i]).max(t.data()[i]))
                .sum();
            assert_eq!(union, area(d) + area(s) + area(t));
        }
    }

    #[test]
    fn multiorgan_scenes_fit_small_images() {
        for seed in 0..200u64 {
            multiorgan_scene(seed, (16, 16)).unwrap();
        }
    }

    #[test]
    fn multiorgan_shapes_keep_their_gap() {
        for seed in 0..30u64 {
            let scene = multiorgan_scene(seed, (32, 32)).unwrap();
            let bools: Vec<Vec<bool>> =
                scene.masks.iter().map(|m| m.data().iter().map(|&v| v > 0.5).collect()).collect();
            for a in 0..3 {
                let mut grown = bools[a].clone();
                for _ in 0..ORGAN_GAP {
                    grown = dilate(&grown, 32, 32);
                }
                for other in &bools[a + 1..] {
                    assert!(grown.iter().zip(other).all(|(x, y)| !(x & y)), "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(gen_ambiguous_dataset(0, (32, 32), 0).is_err());
        assert!(gen_ambiguous_dataset(1, (8, 8), 0).is_err());
        assert!(gen_multiorgan_dataset(&[(0, 0)], (32, 32), 0).is_err());
        assert!(gen_multiorgan_dataset(&[(5, 1)], (32, 32), 0).is_err());
    }
}
