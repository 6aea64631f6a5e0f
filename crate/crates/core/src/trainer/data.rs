//! Training pairs: every image of every app, each paired per epoch with a
//! freshly chunked description.

use candle_core::DType;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::manifest::Dataset;
use crate::model::{images_to_patches, PairBatch, TextBatch};
use crate::rng::{derive_rng, stream};
use crate::synth::{augment_image, chunk_description, mask_patches, tokenize};

#[derive(Debug, Clone)]
pub struct PairSource {
    images: Vec<ImageBuffer>,
    /// `(app index, image index)` per pair.
    pairs: Vec<(usize, usize)>,
    descriptions: Vec<String>,
    labels: Vec<usize>,
}

impl PairSource {
    pub fn load(data: &Dataset) -> Result<Self> {
        if data.records.is_empty() {
            return Err(Error::Invalid("manifest has no apps".into()));
        }
        let mut images = Vec::new();
        let mut pairs = Vec::new();
        for (a, rec) in data.records.iter().enumerate() {
            for img in data.load_images(rec)? {
                pairs.push((a, images.len()));
                images.push(img);
            }
        }
        Ok(Self {
            images,
            pairs,
            descriptions: data.records.iter().map(|r| r.description.clone()).collect(),
            labels: data.records.iter().map(|r| r.declared.ordinal()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pair indices of one epoch, split into batches. A trailing batch with a
    /// single pair is dropped since the contrastive losses need two.
    pub fn epoch_batches(&self, seed: u64, epoch: usize, batch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut derive_rng(seed, &[stream::SHUFFLE, epoch as u64]));
        order
            .chunks(batch)
            .filter(|c| c.len() >= 2)
            .map(|c| c.to_vec())
            .collect()
    }

    pub fn batches_per_epoch(&self, batch: usize) -> usize {
        let full = self.len() / batch;
        full + usize::from(self.len() % batch >= 2)
    }

    /// Builds the views of each pair with a generator keyed by
    /// `(seed, epoch, pair)`, so a batch does not depend on what came before.
    pub fn make_batch(
        &self,
        indices: &[usize],
        seed: u64,
        epoch: usize,
        patch: usize,
        with_style: bool,
        dtype: DType,
    ) -> Result<PairBatch> {
        let mut content = Vec::with_capacity(indices.len());
        let mut target = Vec::with_capacity(indices.len());
        let mut masked = Vec::with_capacity(indices.len());
        let mut tokens = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let (app, img) = self.pairs[i];
            let rng = &mut derive_rng(seed, &[stream::PAIR, epoch as u64, i as u64]);
            let image = &self.images[img];
            content.push(augment_image(image, rng));
            if with_style {
                let x_s = augment_image(image, rng);
                masked.push(mask_patches(&x_s, patch, rng)?);
                target.push(x_s);
            }
            let mut ids = tokenize(&chunk_description(&self.descriptions[app], rng));
            if ids.is_empty() {
                return Err(Error::Invalid(format!("pair {i} has an empty description")));
            }
            ids.truncate(crate::synth::MAX_TOKENS);
            tokens.push(ids);
            labels.push(self.labels[app]);
        }
        let patches = |v: &[ImageBuffer]| images_to_patches(&v.iter().collect::<Vec<_>>(), patch, dtype);
        Ok(PairBatch {
            content: patches(&content)?,
            masked: if with_style { Some(patches(&masked)?) } else { None },
            target: if with_style { Some(patches(&target)?) } else { None },
            text: TextBatch::new(&tokens)?,
            labels,
        })
    }
}
