//! Shared-weight frame encoder, mask encoder and memory assembly.
//!
//! One [`Backbone`] weight set serves both the memory role and the query
//! role: a frame is extracted once, and its [`FrameFeatures`] are reused
//! when that frame later enters the memory.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::nn::Conv;
use crate::tensor::{kernels, Element, ParamId, ParamStore, Tape, Tensor, Var};

/// Output stride of the deepest stage.
pub const STRIDE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output widths of the stride-4, stride-8 and stride-16 stages.
    pub stage_channels: [usize; 3],
    /// Embedding width `C`.
    pub projection_channels: usize,
    pub mask_encoder_channels: [usize; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: [16, 32, 64],
            projection_channels: 32,
            mask_encoder_channels: [8, 16, 32],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self
            .stage_channels
            .iter()
            .chain(&self.mask_encoder_channels)
            .any(|&c| c == 0)
            || self.projection_channels == 0
        {
            return Err(Error::Config("backbone channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// `conv3×3/2 → relu → conv3×3/1 → relu`
#[derive(Debug, Clone, Copy)]
struct Stage {
    down: Conv,
    conv: Conv,
}

impl Stage {
    fn register<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        Self {
            down: Conv::register(store, init, &format!("{name}.down"), c_in, c_out, 3, 2, true),
            conv: Conv::register(store, init, &format!("{name}.conv"), c_out, c_out, 3, 1, true),
        }
    }

    fn forward<'t, T: Element>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let x = self.down.forward(tape, store, x)?.relu()?;
        self.conv.forward(tape, store, x)?.relu()
    }
}

/// Stride-2 stem followed by three stride-2 stages, so the stage outputs
/// sit at strides 4, 8 and 16.
#[derive(Debug, Clone, Copy)]
struct Pyramid {
    stem: Conv,
    stages: [Stage; 3],
}

impl Pyramid {
    fn register<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        c_in: usize,
        widths: [usize; 3],
    ) -> Self {
        let stem = Conv::register(store, init, &format!("{name}.stem"), c_in, widths[0], 3, 2, true);
        let s1 = Stage::register(store, init, &format!("{name}.stage1"), widths[0], widths[0]);
        let s2 = Stage::register(store, init, &format!("{name}.stage2"), widths[0], widths[1]);
        let s3 = Stage::register(store, init, &format!("{name}.stage3"), widths[1], widths[2]);
        Self {
            stem,
            stages: [s1, s2, s3],
        }
    }

    fn forward<'t, T: Element>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
    ) -> Result<[Var<'t, T>; 3]> {
        let x = self.stem.forward(tape, store, x)?.relu()?;
        let f4 = self.stages[0].forward(tape, store, x)?;
        let f8 = self.stages[1].forward(tape, store, f4)?;
        let f16 = self.stages[2].forward(tape, store, f8)?;
        Ok([f4, f8, f16])
    }
}

/// Per-frame feature pyramid plus the projected, flattened embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures<T> {
    pub f4: Tensor<T>,
    pub f8: Tensor<T>,
    pub f16: Tensor<T>,
    /// `HW×C`, rows in row-major spatial order.
    pub embedding: Tensor<T>,
}

impl<T: Element> FrameFeatures<T> {
    /// Stride-16 grid extents `(H, W)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.f16.shape()[1], self.f16.shape()[2])
    }

    pub fn to_vars<'t>(&self, tape: &'t Tape<T>) -> Result<FeatureVars<'t, T>> {
        Ok(FeatureVars {
            f4: tape.constant(self.f4.clone())?,
            f8: tape.constant(self.f8.clone())?,
            f16: tape.constant(self.f16.clone())?,
            embedding: tape.constant(self.embedding.clone())?,
        })
    }
}

/// [`FrameFeatures`] living on a tape.
#[derive(Debug, Clone, Copy)]
pub struct FeatureVars<'t, T: Element> {
    pub f4: Var<'t, T>,
    pub f8: Var<'t, T>,
    pub f16: Var<'t, T>,
    pub embedding: Var<'t, T>,
}

impl<T: Element> FeatureVars<'_, T> {
    pub fn to_tensors(&self) -> FrameFeatures<T> {
        FrameFeatures {
            f4: (*self.f4.value()).clone(),
            f8: (*self.f8.value()).clone(),
            f16: (*self.f16.value()).clone(),
            embedding: (*self.embedding.value()).clone(),
        }
    }
}

/// Frame encoder and mask encoder weights plus an extraction counter.
#[derive(Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    frames: Pyramid,
    projection: Conv,
    masks: Pyramid,
    mask_projection: Conv,
    extractions: AtomicUsize,
}

impl Clone for Backbone {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            frames: self.frames,
            projection: self.projection,
            masks: self.masks,
            mask_projection: self.mask_projection,
            extractions: AtomicUsize::new(self.extractions()),
        }
    }
}

fn check_frame_dims(op: &'static str, shape: &[usize], channels: usize) -> Result<()> {
    if shape.len() != 3 || shape[0] != channels || shape[1] % STRIDE != 0 || shape[2] % STRIDE != 0 {
        return Err(Error::dim(
            op,
            format!("expected {channels}×h×w with h, w divisible by {STRIDE}, got {shape:?}"),
        ));
    }
    Ok(())
}

/// 1×1 projection followed by flattening `C×H×W → HW×C`.
fn project_flat<'t, T: Element>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    conv: &Conv,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let y = conv.forward(tape, store, x)?;
    let s = y.shape();
    y.reshape([s[0], s[1] * s[2]])?.t()
}

impl Backbone {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        config: &BackboneConfig,
    ) -> Self {
        let frames = Pyramid::register(store, init, "backbone", 3, config.stage_channels);
        let projection = Conv::register(
            store,
            init,
            "backbone.projection",
            config.stage_channels[2],
            config.projection_channels,
            1,
            1,
            false,
        );
        let masks = Pyramid::register(store, init, "mask_encoder", 1, config.mask_encoder_channels);
        let mask_projection = Conv::register(
            store,
            init,
            "mask_encoder.projection",
            config.mask_encoder_channels[2],
            config.projection_channels,
            1,
            1,
            false,
        );
        Self {
            config: config.clone(),
            frames,
            projection,
            masks,
            mask_projection,
            extractions: AtomicUsize::new(0),
        }
    }

    /// Number of [`Backbone::extract`] calls so far.
    pub fn extractions(&self) -> usize {
        self.extractions.load(Ordering::SeqCst)
    }

    pub fn reset_extractions(&self) {
        self.extractions.store(0, Ordering::SeqCst);
    }

    /// Runs the shared frame encoder on a `3×h×w` frame.
    pub fn extract<'t, T: Element>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        frame: Var<'t, T>,
    ) -> Result<FeatureVars<'t, T>> {
        check_frame_dims("extract", &frame.shape(), 3)?;
        self.extractions.fetch_add(1, Ordering::SeqCst);
        let [f4, f8, f16] = self.frames.forward(tape, store, frame)?;
        let embedding = project_flat(tape, store, &self.projection, f16)?;
        Ok(FeatureVars {
            f4,
            f8,
            f16,
            embedding,
        })
    }

    /// [`Backbone::extract`] outside of any training graph.
    pub fn extract_frame<T: Element>(
        &self,
        store: &ParamStore<T>,
        frame: &Tensor<T>,
    ) -> Result<FrameFeatures<T>> {
        let tape = Tape::inference();
        let x = tape.constant(frame.clone())?;
        Ok(self.extract(&tape, store, x)?.to_tensors())
    }

    /// 1×1 projection of a stride-16 feature map to the flattened `HW×C` embedding.
    pub fn project<'t, T: Element>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        f16: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        project_flat(tape, store, &self.projection, f16)
    }

    /// Encodes a `1×h×w` mask with values in `[0, 1]` into its `HW×C` embedding.
    pub fn encode_mask<'t, T: Element>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        mask: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        check_frame_dims("encode_mask", &mask.shape(), 1)?;
        if mask
            .value()
            .data()
            .iter()
            .any(|&v| v < T::zero() || v > T::one())
        {
            return Err(Error::contract("mask values must lie in [0, 1]"));
        }
        let [_, _, m16] = self.masks.forward(tape, store, mask)?;
        project_flat(tape, store, &self.mask_projection, m16)
    }

    pub fn encode_mask_tensor<T: Element>(
        &self,
        store: &ParamStore<T>,
        mask: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let m = tape.constant(mask.clone())?;
        Ok((*self.encode_mask(&tape, store, m)?.value()).clone())
    }

    pub fn projection_kernel(&self) -> ParamId {
        self.projection.kernel
    }

    pub fn mask_projection_kernel(&self) -> ParamId {
        self.mask_projection.kernel
    }

    /// Every parameter of the frame encoder (including the projection).
    pub fn frame_param_ids<T: Element>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        prefixed(store, &["backbone."])
    }

    pub fn mask_param_ids<T: Element>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        prefixed(store, &["mask_encoder."])
    }
}

pub(crate) fn prefixed<T: Element>(store: &ParamStore<T>, prefixes: &[&str]) -> Vec<ParamId> {
    store
        .iter()
        .filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre)))
        .map(|(id, _)| id)
        .collect()
}

/// One cached memory frame for one object.
#[derive(Debug, Clone)]
pub struct MemoryEntry<T> {
    pub frame_index: usize,
    pub features: Arc<FrameFeatures<T>>,
    pub mask_embedding: Tensor<T>,
}

/// Per-object store of past frames, in strictly increasing frame order.
#[derive(Debug, Clone, Default)]
pub struct MemoryBank<T> {
    entries: Vec<MemoryEntry<T>>,
}

impl<T: Element> MemoryBank<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry<T>] {
        &self.entries
    }

    pub fn push(
        &mut self,
        frame_index: usize,
        features: Arc<FrameFeatures<T>>,
        mask_embedding: Tensor<T>,
    ) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if frame_index <= last.frame_index {
                return Err(Error::contract(format!(
                    "memory frame {frame_index} does not follow frame {}",
                    last.frame_index
                )));
            }
            if features.embedding.shape() != last.features.embedding.shape() {
                return Err(Error::dim(
                    "memory_push",
                    format!(
                        "embedding {:?} differs from bank shape {:?}",
                        features.embedding.shape(),
                        last.features.embedding.shape()
                    ),
                ));
            }
        }
        if mask_embedding.shape() != features.embedding.shape() {
            return Err(Error::dim(
                "memory_push",
                format!(
                    "mask embedding {:?} vs frame embedding {:?}",
                    mask_embedding.shape(),
                    features.embedding.shape()
                ),
            ));
        }
        self.entries.push(MemoryEntry {
            frame_index,
            features,
            mask_embedding,
        });
        Ok(())
    }

    pub fn get(&self, frame_index: usize) -> Option<&MemoryEntry<T>> {
        self.entries
            .binary_search_by_key(&frame_index, |e| e.frame_index)
            .ok()
            .map(|i| &self.entries[i])
    }
}

/// Stacks the selected frames' embeddings and mask embeddings in ascending
/// frame order, giving `(M_ori, M_E)`, each `T·HW×C`.
pub fn assemble_memory<T: Element>(
    bank: &MemoryBank<T>,
    selected: &[usize],
) -> Result<(Tensor<T>, Tensor<T>)> {
    if selected.is_empty() {
        return Err(Error::contract("memory selection is empty"));
    }
    let mut order = selected.to_vec();
    order.sort_unstable();
    order.dedup();
    let entries = order
        .iter()
        .map(|&i| {
            bank.get(i)
                .ok_or_else(|| Error::Lookup(format!("frame {i} is not in the memory bank")))
        })
        .collect::<Result<Vec<_>>>()?;
    let m_ori = kernels::concat_rows(&entries.iter().map(|e| &e.features.embedding).collect::<Vec<_>>())?;
    let m_e = kernels::concat_rows(&entries.iter().map(|e| &e.mask_embedding).collect::<Vec<_>>())?;
    Ok((m_ori, m_e))
}
