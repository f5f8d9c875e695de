//! Dataset records turned into model inputs.

use std::collections::BTreeMap;

use delta_core::lm::Vocab;
use delta_core::train::{Instance, SceneBatch, TrainSample};
use delta_deltagen::dataset::Dataset;
use delta_deltagen::grid::LabelGrid;
use delta_deltagen::qa::{seg_targets, QASample};
use image::RgbImage;
use numcore::Tensor;

use crate::error::{CliError, Result};

/// `[H, W, 3]` tensor in `[0, 1]`.
pub fn image_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Tensor::new(vec![h, w, 3], data).expect("rgb buffer matches shape")
}

pub fn scene_images(ds: &Dataset, scene: &str) -> Result<Vec<Tensor>> {
    Ok(ds.load_images(scene)?.iter().map(image_tensor).collect())
}

/// Vocabulary over every question (with options) and answer of the dataset.
pub fn build_vocab(ds: &Dataset) -> Vocab {
    let texts: Vec<String> = ds
        .samples
        .iter()
        .flat_map(|s| [s.full_question(), s.answer.clone()])
        .collect();
    Vocab::build(texts.iter().map(String::as_str))
}

pub fn train_sample(ds: &Dataset, vocab: &Vocab, s: &QASample) -> Result<TrainSample> {
    let seg_masks = seg_targets(s, |r| ds.load_mask(r))?
        .into_iter()
        .map(|(_, m)| m.cells)
        .collect();
    Ok(TrainSample {
        prompt: s.prompt,
        question: vocab.encode(&s.full_question()),
        answer: vocab.encode(&s.answer),
        seg_masks,
    })
}

/// Change label per pixel for `pair`: the later class where it differs, 0 elsewhere.
pub fn change_map(labels: &[LabelGrid], pair: (usize, usize)) -> Vec<u8> {
    let (a, b) = (&labels[pair.0 - 1], &labels[pair.1 - 1]);
    a.cells
        .iter()
        .zip(&b.cells)
        .map(|(&x, &y)| if x != y { y } else { 0 })
        .collect()
}

/// One classification instance per (pair, target class) with changed pixels.
pub fn scene_instances(labels: &[LabelGrid], classes: usize) -> Vec<Instance> {
    let mut out = Vec::new();
    for k in 1..labels.len() {
        let pair = (k, k + 1);
        let map = change_map(labels, pair);
        for c in 1..=classes as u8 {
            let mask: Vec<bool> = map.iter().map(|&v| v == c).collect();
            if mask.iter().any(|&v| v) {
                out.push(Instance {
                    mask,
                    category: c as usize - 1,
                    pair,
                });
            }
        }
    }
    out
}

/// A scene held in memory for training.
pub struct LoadedScene {
    pub id: String,
    pub images: Vec<Tensor>,
    pub samples: Vec<TrainSample>,
    pub instances: Vec<Instance>,
}

impl LoadedScene {
    pub fn batch(&self, pick: &[usize], with_images: bool) -> SceneBatch {
        SceneBatch {
            images: if with_images { self.images.clone() } else { Vec::new() },
            samples: pick.iter().map(|&i| self.samples[i].clone()).collect(),
            instances: if with_images { self.instances.clone() } else { Vec::new() },
        }
    }
}

/// Training-split scenes in id order.
pub fn load_train_scenes(ds: &Dataset, vocab: &Vocab) -> Result<Vec<LoadedScene>> {
    let mut by_scene: BTreeMap<&str, Vec<&QASample>> = BTreeMap::new();
    for s in ds.samples.iter().filter(|s| s.split == "train") {
        by_scene.entry(&s.scene_id).or_default().push(s);
    }
    if by_scene.is_empty() {
        return Err(CliError::Contract("dataset has no training samples".into()));
    }
    let classes = ds.manifest.config.scene.classes;
    by_scene
        .into_iter()
        .map(|(id, samples)| {
            let labels = ds.load_labels(id)?;
            Ok(LoadedScene {
                id: id.to_string(),
                images: scene_images(ds, id)?,
                samples: samples
                    .into_iter()
                    .map(|s| train_sample(ds, vocab, s))
                    .collect::<Result<_>>()?,
                instances: scene_instances(&labels, classes),
            })
        })
        .collect()
}
