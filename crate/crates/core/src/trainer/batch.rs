use rand::seq::SliceRandom;
use rand::Rng;

use super::TrainerConfig;
use crate::augment::{apply_photometric, cutmix, sample_photometric, weak_augment, AugmentConfig, CutMixRecord, Image};
use crate::boundary_gt::{binary_boundaries, semantic_boundaries, BoundaryTarget, LabelMap};
use crate::dataset::{Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::model::{BoundaryMode, ModelConfig};
use crate::tensor::Tensor;

/// Unlabeled weak and strong views; the strong views are already CutMixed.
#[derive(Clone, Debug)]
pub struct UnlabeledBatch {
    pub uw: Tensor<f32>,
    pub us: Tensor<f32>,
    pub cutmix: Vec<Option<CutMixRecord>>,
}

impl UnlabeledBatch {
    pub fn len(&self) -> usize {
        self.uw.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One mini-batch: labeled images, labels, boundary targets and unlabeled views.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor<f32>,
    /// `N*H*W` class indices
    pub y: Vec<u8>,
    pub z: Option<Tensor<f32>>,
    pub unlabeled: Option<UnlabeledBatch>,
}

impl Batch {
    pub fn labeled_len(&self) -> usize {
        self.x.shape()[0]
    }
}

/// Stack planar images into an `N×3×H×W` network input centred on zero.
pub fn images_to_tensor(images: &[Image]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::Data("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for im in images {
        if (im.height, im.width) != (h, w) {
            return Err(Error::Data("images in a batch differ in size".into()));
        }
        data.extend(im.data.iter().map(|&v| v - 0.5));
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

/// Boundary targets matching the model's head, or `None` without a head.
pub fn boundary_targets(labels: &[LabelMap], model: &ModelConfig, radius: usize) -> Result<Option<Tensor<f32>>> {
    let targets = match model.boundary_mode {
        BoundaryMode::None => return Ok(None),
        BoundaryMode::Semantic => labels
            .iter()
            .map(|l| semantic_boundaries(l, model.num_classes, radius))
            .collect::<Result<Vec<BoundaryTarget>>>()?,
        BoundaryMode::Binary => labels
            .iter()
            .map(|l| binary_boundaries(l, radius))
            .collect::<Result<Vec<_>>>()?,
    };
    BoundaryTarget::stack(&targets).map(Some)
}

#[derive(Clone, Debug)]
struct EpochStream {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
}

impl EpochStream {
    fn new(pool: Vec<usize>) -> Self {
        Self {
            pool,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next(&mut self, rng: &mut impl Rng) -> usize {
        if self.pos == self.order.len() {
            self.order = self.pool.clone();
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Reshuffled passes over the labeled and unlabeled index sets.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    labeled: EpochStream,
    unlabeled: EpochStream,
}

impl BatchSampler {
    pub fn new(split: &DatasetSplit) -> Result<Self> {
        if split.labeled.is_empty() {
            return Err(Error::Data("split has no labeled images".into()));
        }
        Ok(Self {
            labeled: EpochStream::new(split.labeled.clone()),
            unlabeled: EpochStream::new(split.unlabeled.clone()),
        })
    }

    pub fn has_unlabeled(&self) -> bool {
        !self.unlabeled.pool.is_empty()
    }
}

/// Draw and augment one batch. Boundary targets are generated after cropping
/// so their width is fixed in output pixels.
pub fn assemble_batch(
    rng: &mut impl Rng,
    data: &Dataset,
    sampler: &mut BatchSampler,
    model: &ModelConfig,
    trainer: &TrainerConfig,
    aug: &AugmentConfig,
) -> Result<Batch> {
    let mut xs = Vec::with_capacity(trainer.batch_labeled);
    let mut ys = Vec::with_capacity(trainer.batch_labeled);
    for _ in 0..trainer.batch_labeled {
        let scene = &data.train[sampler.labeled.next(rng)];
        let (img, lab, _) = weak_augment(rng, &scene.image(), Some(&scene.labels), trainer.crop, aug);
        xs.push(img);
        ys.push(lab.expect("labels were given"));
    }
    let z = boundary_targets(&ys, model, trainer.boundary_radius)?;
    let y = ys.iter().flat_map(|l| l.labels.iter().copied()).collect();

    let unlabeled = if trainer.semi_supervised && sampler.has_unlabeled() {
        let mut weak = Vec::with_capacity(trainer.batch_unlabeled);
        let mut strong = Vec::with_capacity(trainer.batch_unlabeled);
        for _ in 0..trainer.batch_unlabeled {
            let scene = &data.train[sampler.unlabeled.next(rng)];
            let (w, _, _) = weak_augment(rng, &scene.image(), None, trainer.crop, aug);
            let p = sample_photometric(rng, aug);
            strong.push(apply_photometric(&w, &p));
            weak.push(w);
        }
        let (mixed, records) = cutmix(rng, &strong, aug)?;
        Some(UnlabeledBatch {
            uw: images_to_tensor(&weak)?,
            us: images_to_tensor(&mixed)?,
            cutmix: records,
        })
    } else {
        None
    };
    Ok(Batch {
        x: images_to_tensor(&xs)?,
        y,
        z,
        unlabeled,
    })
}
