//! Whole-video inference: each frame is extracted once, every object is
//! segmented against its own memory, the per-object maps are merged into
//! one label map, and the merged masks are written back to memory.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{assemble_memory, FrameFeatures, MemoryBank, STRIDE};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, LabelMap, ObjectId};
use crate::memory::MemoryPolicy;
use crate::model::Model;
use crate::tensor::{Element, Tape, Tensor};

/// Probability clamp used by the soft-aggregation merge.
pub const MERGE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    /// Per-pixel odds normalization with a product-of-complements background.
    #[default]
    Soft,
    /// Highest raw probability wins; background scores `1 − max p`.
    Argmax,
}

fn odds(p: f64) -> f64 {
    let p = p.clamp(MERGE_EPS, 1.0 - MERGE_EPS);
    p / (1.0 - p)
}

/// Merges per-object foreground maps (`1×h×w` or `h×w`) into a label map.
/// Ties go to the background, then to the smaller id.
pub fn merge<T: Element>(probs: &BTreeMap<ObjectId, Tensor<T>>, mode: MergeMode) -> Result<LabelMap> {
    let Some(first) = probs.values().next() else {
        return Err(Error::contract("nothing to merge"));
    };
    let dims = first.shape().to_vec();
    let (h, w) = match dims[..] {
        [1, h, w] | [h, w] => (h, w),
        _ => return Err(Error::dim("merge", format!("expected 1×h×w maps, got {dims:?}"))),
    };
    for (id, p) in probs {
        if *id == 0 {
            return Err(Error::contract("object id 0 is reserved for the background"));
        }
        if p.shape() != dims.as_slice() {
            return Err(Error::dim("merge", format!("map {id} is {:?}, expected {dims:?}", p.shape())));
        }
    }
    let maps: Vec<(ObjectId, &[T])> = probs.iter().map(|(&id, p)| (id, p.data())).collect();
    let labels = (0..h * w)
        .map(|i| {
            let (mut best, mut label) = match mode {
                MergeMode::Soft => {
                    let bg: f64 = maps.iter().map(|(_, p)| 1.0 - p[i].as_f64()).product();
                    (odds(bg), 0)
                }
                MergeMode::Argmax => {
                    let max = maps.iter().map(|(_, p)| p[i].as_f64()).fold(0.0, f64::max);
                    (1.0 - max, 0)
                }
            };
            for &(id, p) in &maps {
                let score = match mode {
                    MergeMode::Soft => odds(p[i].as_f64()),
                    MergeMode::Argmax => p[i].as_f64(),
                };
                if score > best {
                    best = score;
                    label = id;
                }
            }
            label
        })
        .collect();
    LabelMap::new(h, w, labels)
}

/// A video to segment and its first-frame annotation.
#[derive(Debug, Clone)]
pub struct VideoTask<T> {
    /// `3×h×w` frames.
    pub frames: Vec<Tensor<T>>,
    pub first_masks: BTreeMap<ObjectId, BinaryMask>,
}

impl<T: Element> VideoTask<T> {
    pub fn new(frames: Vec<Tensor<T>>, first_masks: BTreeMap<ObjectId, BinaryMask>) -> Result<Self> {
        let task = Self { frames, first_masks };
        task.validate()?;
        Ok(task)
    }

    pub fn from_labels(frames: Vec<Tensor<T>>, first: &LabelMap) -> Result<Self> {
        Self::new(frames, first.masks())
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.frames[0].shape();
        (s[1], s[2])
    }

    pub fn validate(&self) -> Result<()> {
        let Some(f0) = self.frames.first() else {
            return Err(Error::contract("video has no frames"));
        };
        let s = f0.shape();
        if s.len() != 3 || s[0] != 3 || s[1] % STRIDE != 0 || s[2] % STRIDE != 0 {
            return Err(Error::dim(
                "video",
                format!("frames must be 3×h×w with h, w divisible by {STRIDE}, got {s:?}"),
            ));
        }
        if let Some((t, f)) = self.frames.iter().enumerate().find(|(_, f)| f.shape() != s) {
            return Err(Error::dim("video", format!("frame {t} is {:?}, frame 0 is {s:?}", f.shape())));
        }
        if self.first_masks.is_empty() {
            return Err(Error::contract("first frame has no annotated object"));
        }
        let mut owner = vec![false; s[1] * s[2]];
        for (&id, m) in &self.first_masks {
            if id == 0 {
                return Err(Error::contract("object id 0 is reserved for the background"));
            }
            if m.dims() != (s[1], s[2]) {
                return Err(Error::dim("video", format!("mask {id} is {:?}", m.dims())));
            }
            for (o, &v) in owner.iter_mut().zip(m.data()) {
                if v && *o {
                    return Err(Error::contract(format!("first-frame mask {id} overlaps another object")));
                }
                *o |= v;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub policy: MemoryPolicy,
    pub merge: MergeMode,
    /// Keep every object's probability map in the result.
    pub keep_probs: bool,
    /// Keep every attention map of every pass.
    pub debug_attention: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            policy: MemoryPolicy::default(),
            merge: MergeMode::Soft,
            keep_probs: false,
            debug_attention: false,
        }
    }
}

/// Attention weights of one object's pass, by block name.
pub type AttentionRecord<T> = Vec<(String, Tensor<T>)>;

/// Result of segmenting one frame.
#[derive(Debug, Clone)]
pub struct FramePrediction<T> {
    /// Foreground probability per object, `1×h×w`.
    pub probs: BTreeMap<ObjectId, Tensor<T>>,
    pub memory_indices: Vec<usize>,
    pub attention: Option<BTreeMap<ObjectId, AttentionRecord<T>>>,
}

#[derive(Debug, Clone)]
pub struct SegmentationResult<T> {
    pub label_maps: Vec<LabelMap>,
    /// Entry `t − 1` holds the maps of frame `t` (when requested).
    pub per_object_probs: Option<Vec<BTreeMap<ObjectId, Tensor<T>>>>,
    pub backbone_calls: usize,
    /// Entry `t − 1` lists the memory frames used for frame `t`.
    pub memory_indices: Vec<Vec<usize>>,
    pub attention: Option<Vec<BTreeMap<ObjectId, AttentionRecord<T>>>>,
}

impl<T> SegmentationResult<T> {
    pub fn memory_sizes(&self) -> Vec<usize> {
        self.memory_indices.iter().map(Vec::len).collect()
    }
}

/// Per-object memory banks and the running frame index of one video.
pub struct VideoSession<'m, T: Element> {
    model: &'m Model<T>,
    config: PipelineConfig,
    banks: BTreeMap<ObjectId, MemoryBank<T>>,
    next_frame: usize,
    dims: (usize, usize),
}

impl<'m, T: Element> VideoSession<'m, T> {
    /// Extracts the annotated first frame and seeds every object's memory.
    pub fn start(
        model: &'m Model<T>,
        config: PipelineConfig,
        first_frame: &Tensor<T>,
        first_masks: &BTreeMap<ObjectId, BinaryMask>,
    ) -> Result<Self> {
        config.policy.validate()?;
        let features = Arc::new(model.backbone.extract_frame(&model.store, first_frame)?);
        let s = first_frame.shape();
        let mut session = Self {
            model,
            config,
            banks: first_masks.keys().map(|&id| (id, MemoryBank::new())).collect(),
            next_frame: 0,
            dims: (s[1], s[2]),
        };
        session.write_back(features, first_masks)?;
        Ok(session)
    }

    pub fn banks(&self) -> &BTreeMap<ObjectId, MemoryBank<T>> {
        &self.banks
    }

    /// Index of the frame the next [`VideoSession::step`] will segment.
    pub fn next_frame(&self) -> usize {
        self.next_frame
    }

    fn write_back(
        &mut self,
        features: Arc<FrameFeatures<T>>,
        masks: &BTreeMap<ObjectId, BinaryMask>,
    ) -> Result<()> {
        let (h, w) = self.dims;
        let model = self.model;
        let embeddings = self
            .banks
            .keys()
            .copied()
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|id| {
                let mask = masks.get(&id).cloned().unwrap_or_else(|| BinaryMask::empty(h, w));
                let e = model.backbone.encode_mask_tensor(&model.store, &mask.to_tensor())?;
                Ok((id, e))
            })
            .collect::<Result<Vec<_>>>()?;
        for (id, e) in embeddings {
            let bank = self.banks.get_mut(&id).expect("bank exists for every object");
            bank.push(self.next_frame, features.clone(), e)?;
        }
        self.next_frame += 1;
        Ok(())
    }

    /// Segments every object in frame `next_frame()` from already
    /// extracted features, without touching the memory.
    pub fn segment_frame(&self, features: &FrameFeatures<T>) -> Result<FramePrediction<T>> {
        let selected = self.config.policy.select(self.next_frame)?;
        let debug = self.config.debug_attention;
        let model = self.model;
        let outputs = self
            .banks
            .par_iter()
            .map(|(&id, bank)| {
                let (m_ori, m_e) = assemble_memory(bank, &selected)?;
                let tape = Tape::inference();
                let query = features.to_vars(&tape)?;
                let pred = model.predict(&tape, &query, tape.constant(m_ori)?, tape.constant(m_e)?)?;
                let fg = (*pred.foreground()?.value()).clone();
                let maps = debug.then(|| {
                    pred.attention
                        .iter()
                        .map(|(name, v)| (name.to_string(), (*v.value()).clone()))
                        .collect::<Vec<_>>()
                });
                Ok((id, fg, maps))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut probs = BTreeMap::new();
        let mut attention = debug.then(BTreeMap::new);
        for (id, fg, maps) in outputs {
            probs.insert(id, fg);
            if let (Some(all), Some(maps)) = (attention.as_mut(), maps) {
                all.insert(id, maps);
            }
        }
        Ok(FramePrediction {
            probs,
            memory_indices: selected,
            attention,
        })
    }

    /// Extracts, segments and merges the next frame, then stores it with
    /// the merged masks in every object's memory.
    pub fn step(&mut self, frame: &Tensor<T>) -> Result<(LabelMap, FramePrediction<T>)> {
        let s = frame.shape();
        if s.len() != 3 || (s[1], s[2]) != self.dims {
            return Err(Error::dim("video", format!("frame {:?} does not match {:?}", s, self.dims)));
        }
        let features = Arc::new(self.model.backbone.extract_frame(&self.model.store, frame)?);
        let prediction = self.segment_frame(&features)?;
        let labels = merge(&prediction.probs, self.config.merge)?;
        let masks = self.banks.keys().map(|&id| (id, labels.mask(id))).collect();
        self.write_back(features, &masks)?;
        Ok((labels, prediction))
    }
}

pub fn run_video<T: Element>(
    model: &Model<T>,
    task: &VideoTask<T>,
    config: &PipelineConfig,
) -> Result<SegmentationResult<T>> {
    task.validate()?;
    let before = model.backbone.extractions();
    let (h, w) = task.dims();
    let mut session = VideoSession::start(model, config.clone(), &task.frames[0], &task.first_masks)?;
    let mut label_maps = vec![LabelMap::from_masks(h, w, &task.first_masks)?];
    let mut per_object_probs = config.keep_probs.then(Vec::new);
    let mut attention = config.debug_attention.then(Vec::new);
    let mut memory_indices = Vec::new();
    for frame in &task.frames[1..] {
        let (labels, pred) = session.step(frame)?;
        label_maps.push(labels);
        memory_indices.push(pred.memory_indices);
        if let Some(all) = per_object_probs.as_mut() {
            all.push(pred.probs);
        }
        if let (Some(all), Some(maps)) = (attention.as_mut(), pred.attention) {
            all.push(maps);
        }
    }
    Ok(SegmentationResult {
        label_maps,
        per_object_probs,
        backbone_calls: model.backbone.extractions() - before,
        memory_indices,
        attention,
    })
}
