//! Directory-per-class datasets, image decoding, stratified splits,
//! augmentation and synthetic data.

pub mod augment;
mod image;
mod split;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

pub use self::image::{load_image, quantize, resize_bilinear, stack, FloatImage, ImageLoader};
pub use augment::{augment_image, AugmentKind, AugmentParams};
pub use split::{
    stratified_split, write_split_audit, SplitAssignment, SplitFractions, Subset, MIN_CLASS_SIZE,
};
pub use synth::{synth_dataset, SynthConfig};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSample {
    pub path: PathBuf,
    pub class_index: usize,
    pub class_name: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub samples: Vec<LabeledSample>,
    pub class_names: Vec<String>,
    pub counts: Vec<usize>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.class_index).collect()
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Classes are the subdirectories of `root` in lexicographic order; samples
/// are their `jpg`, `jpeg` and `png` files.
pub fn scan_dataset(root: &Path) -> Result<DatasetIndex> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter(|p| {
            !p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with('.'))
        })
        .collect();
    if class_dirs.len() < 2 {
        return Err(Error::Dataset(format!(
            "{} has {} class directories; at least 2 are required",
            root.display(),
            class_dirs.len()
        )));
    }
    let mut samples = Vec::new();
    let mut class_names = Vec::new();
    let mut counts = Vec::new();
    for (class_index, dir) in class_dirs.iter().enumerate() {
        let class_name = dir
            .file_name()
            .expect("directory entry")
            .to_string_lossy()
            .into_owned();
        let files: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        if files.is_empty() {
            return Err(Error::Dataset(format!(
                "class directory {} has no images",
                dir.display()
            )));
        }
        counts.push(files.len());
        samples.extend(files.into_iter().map(|path| LabeledSample {
            path,
            class_index,
            class_name: class_name.clone(),
        }));
        class_names.push(class_name);
    }
    Ok(DatasetIndex {
        samples,
        class_names,
        counts,
    })
}

/// One training example: a source image and an optional augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub source: usize,
    pub label: usize,
    pub augment: Option<AugmentKind>,
}

/// Every source image followed by its four augmented variants.
pub fn expand_with_augmentations(sources: &[usize], labels: &[usize]) -> Vec<Item> {
    sources
        .iter()
        .flat_map(|&s| {
            std::iter::once(None)
                .chain(AugmentKind::ALL.map(Some))
                .map(move |augment| Item {
                    source: s,
                    label: labels[s],
                    augment,
                })
        })
        .collect()
}

/// Seed for the augmentation parameters of one source image.
pub fn augment_seed(seed: u64, source: usize) -> u64 {
    seed ^ (source as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Labeled examples addressable by position.
pub trait BatchSource {
    fn len(&self) -> usize;

    fn label(&self, i: usize) -> usize;

    /// `(N, C, H, W)` batch of the examples at `positions`.
    fn batch(&self, positions: &[usize]) -> Result<Tensor>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pre-decoded examples, each a `(1, C, H, W)` tensor.
#[derive(Clone, Debug)]
pub struct InMemorySource {
    pub examples: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl InMemorySource {
    pub fn new(examples: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if examples.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} examples but {} labels",
                examples.len(),
                labels.len()
            )));
        }
        Ok(Self { examples, labels })
    }
}

impl BatchSource for InMemorySource {
    fn len(&self) -> usize {
        self.examples.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn batch(&self, positions: &[usize]) -> Result<Tensor> {
        let first = self
            .examples
            .get(
                *positions
                    .first()
                    .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?,
            )
            .ok_or_else(|| Error::InvalidArgument("batch position out of range".into()))?;
        let Shape([_, c, h, w]) = first.shape();
        let mut data = Vec::with_capacity(positions.len() * c * h * w);
        for &i in positions {
            let ex = self
                .examples
                .get(i)
                .ok_or_else(|| Error::InvalidArgument("batch position out of range".into()))?;
            if ex.shape() != first.shape() {
                return Err(Error::shape("in-memory batch", first.shape(), ex.shape()));
            }
            data.extend_from_slice(ex.data());
        }
        Tensor::new([positions.len(), c, h, w], data)
    }
}

/// Decodes items from a dataset index, applying their augmentations.
pub struct ItemSource<'a> {
    pub index: &'a DatasetIndex,
    pub items: Vec<Item>,
    pub loader: &'a ImageLoader,
    pub seed: u64,
}

impl ItemSource<'_> {
    pub fn path(&self, i: usize) -> &Path {
        &self.index.samples[self.items[i].source].path
    }
}

impl BatchSource for ItemSource<'_> {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn label(&self, i: usize) -> usize {
        self.items[i].label
    }

    fn batch(&self, positions: &[usize]) -> Result<Tensor> {
        let paths: Vec<PathBuf> = positions
            .iter()
            .map(|&i| self.path(i).to_path_buf())
            .collect();
        let mut images = self.loader.load(&paths)?;
        for (img, &i) in images.iter_mut().zip(positions) {
            let item = &self.items[i];
            if let Some(kind) = item.augment {
                let p = AugmentParams::draw(augment_seed(self.seed, item.source));
                *img = augment::apply(img, kind, &p);
            }
        }
        stack(&images)
    }
}
