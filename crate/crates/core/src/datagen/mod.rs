//! Deterministic synthetic few-shot datasets, the toy tokenizer and file persistence.

mod persist;
mod shapes;
mod text;

pub use persist::{
    load_checkpoint, load_checkpoint_for, read_manifest, save_checkpoint, write_manifest,
    Checkpoint, DatasetManifest, CHECKPOINT_VERSION,
};
pub use shapes::Shape;
pub use text::{Vocabulary, TEMPLATE};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::rng::{self, Domain};

/// Background pixels are drawn from this range.
pub const BACKGROUND_RANGE: (f64, f64) = (-0.4, -0.2);
/// Foreground pixels are drawn from this range.
pub const FOREGROUND_RANGE: (f64, f64) = (0.2, 0.4);
/// Lower bound on the gap between mean foreground and mean background intensity.
pub const INTENSITY_MARGIN: f64 = 0.3;

/// Parameters that fully determine a generated dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// First entry of [`Shape::FAMILIES`] used for class 0.
    pub family_offset: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            per_class: 48,
            image_size: 16,
            seed: 0,
            family_offset: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    /// One foreground mask per image when present.
    pub gt_masks: Option<Vec<Mask>>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn masks(&self) -> Result<&[Mask]> {
        self.gt_masks.as_deref().ok_or(Error::MissingMasks)
    }

    pub fn without_masks(mut self) -> Self {
        self.gt_masks = None;
        self
    }

    pub fn indices_of(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect()
    }

    pub fn class_names_of(&self, classes: &[usize]) -> Vec<String> {
        classes
            .iter()
            .map(|&c| self.class_names[c].clone())
            .collect()
    }

    /// Canonical byte encoding of all images, labels and masks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (img, &label) in self.images.iter().zip(&self.labels) {
            out.extend((label as u64).to_le_bytes());
            for p in img.pixels() {
                out.extend(p.to_le_bytes());
            }
        }
        for m in self.gt_masks.iter().flatten() {
            out.extend(m.bits().iter().map(|&b| b as u8));
        }
        out
    }
}

/// Dataset with the default shape families.
pub fn generate_dataset(
    n_classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    generate(&DatasetSpec {
        n_classes,
        per_class,
        image_size,
        seed,
        family_offset: 0,
    })
}

pub fn generate(spec: &DatasetSpec) -> Result<SyntheticDataset> {
    let families = Shape::FAMILIES.len();
    if spec.n_classes < 2 || spec.n_classes > families {
        return Err(Error::InvalidArgument(format!(
            "n_classes must lie in 2..={families}, got {}",
            spec.n_classes
        )));
    }
    if spec.per_class == 0 {
        return Err(Error::InvalidArgument(
            "per_class must be at least 1".into(),
        ));
    }
    if spec.image_size < 4 {
        return Err(Error::InvalidArgument(format!(
            "image_size must be at least 4, got {}",
            spec.image_size
        )));
    }
    let shapes: Vec<Shape> = (0..spec.n_classes)
        .map(|c| Shape::FAMILIES[(c + spec.family_offset) % families])
        .collect();
    let mut images = Vec::with_capacity(spec.n_classes * spec.per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    let mut masks = Vec::with_capacity(images.capacity());
    for (class, &shape) in shapes.iter().enumerate() {
        for k in 0..spec.per_class {
            let index = (class * spec.per_class + k) as u64;
            let (img, mask) = render(shape, spec.image_size, spec.seed, index);
            images.push(img);
            masks.push(mask);
            labels.push(class);
        }
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        images,
        labels,
        class_names: shapes.iter().map(|s| s.name().to_string()).collect(),
        base_classes: (0..spec.n_classes).step_by(2).collect(),
        novel_classes: (1..spec.n_classes).step_by(2).collect(),
        gt_masks: Some(masks),
    })
}

/// One jittered shape on a noisy background. Retries until the foreground is non-empty.
fn render(shape: Shape, size: usize, seed: u64, index: u64) -> (Image, Mask) {
    let mut r = rng::stream(seed, Domain::Images, index);
    let n = size as f64;
    loop {
        let cy = n / 2.0 + r.gen_range(-n / 16.0..=n / 16.0) - 0.5;
        let cx = n / 2.0 + r.gen_range(-n / 16.0..=n / 16.0) - 0.5;
        let s = n * r.gen_range(0.2..=0.28);
        let mut img = Image::filled(size, 0.0);
        let mut mask = Mask::empty(size, size);
        for y in 0..size {
            for x in 0..size {
                let fg = shape.contains(y as f64 - cy, x as f64 - cx, s);
                let (lo, hi) = if fg {
                    FOREGROUND_RANGE
                } else {
                    BACKGROUND_RANGE
                };
                img.set(y, x, r.gen_range(lo..hi));
                mask.set(y, x, fg);
            }
        }
        if mask.count() > 0 && mask.count() < size * size {
            return (img, mask);
        }
    }
}

/// Picks `k` images of every class in `class_set`; returned indices are grouped by class.
pub fn sample_few_shot(
    dataset: &SyntheticDataset,
    k: usize,
    class_set: &[usize],
    seed: u64,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(k * class_set.len());
    for &class in class_set {
        if class >= dataset.num_classes() {
            return Err(Error::OutOfRange {
                what: "class",
                index: class,
                size: dataset.num_classes(),
            });
        }
        let pool: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == class)
            .collect();
        if k > pool.len() {
            return Err(Error::InvalidArgument(format!(
                "{k} shots requested but class {class} has {} images",
                pool.len()
            )));
        }
        let mut r = rng::stream(seed, Domain::Sampling, class as u64);
        let mut chosen: Vec<usize> = pool.choose_multiple(&mut r, k).copied().collect();
        chosen.sort_unstable();
        out.extend(chosen);
    }
    Ok(out)
}

/// Indices of `classes` not present in `taken`.
pub fn held_out(dataset: &SyntheticDataset, taken: &[usize], classes: &[usize]) -> Vec<usize> {
    dataset
        .indices_of(classes)
        .into_iter()
        .filter(|i| !taken.contains(i))
        .collect()
}
