//! Training: clamped cross-entropy on three-frame clips with mask feedback,
//! Adam, a polynomial learning-rate schedule, and the two data stages
//! (fresh short clips, then triples sampled from long sequences).

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::RngExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::STRIDE;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, ObjectId};
use crate::model::Model;
use crate::pipeline::{merge, MergeMode};
use crate::synth::{self, Clip, SynthConfig};
use crate::tensor::{Element, ParamId, ParamStore, Tape, Tensor, Var};

/// Probability floor inside the log.
pub const PROB_FLOOR: f64 = 1e-7;

/// `base · (1 − step/total)^power`.
pub fn poly_lr(step: usize, total: usize, base: f64, power: f64) -> Result<f64> {
    if step > total {
        return Err(Error::contract(format!("step {step} exceeds schedule length {total}")));
    }
    if step == total {
        return Ok(0.0);
    }
    Ok(base * (1.0 - step as f64 / total as f64).powf(power))
}

/// Mean over pixels of `−ln p(true class)` for `2×h×w` probabilities
/// (channel 1 = foreground), with probabilities clamped to `[1e-7, 1]`.
pub fn cross_entropy<'t, T: Element>(probs: Var<'t, T>, truth: &BinaryMask) -> Result<Var<'t, T>> {
    let s = probs.shape();
    if s.len() != 3 || s[0] != 2 || (s[1], s[2]) != truth.dims() {
        return Err(Error::dim(
            "cross_entropy",
            format!("probs {s:?} vs truth {:?}", truth.dims()),
        ));
    }
    let tape = probs.tape();
    let fg = truth.to_tensor::<T>();
    let bg = fg.map(|v| T::one() - v);
    let p_true = probs
        .slice_axis0(1, 1)?
        .mul(tape.constant(fg)?)?
        .add(probs.slice_axis0(0, 1)?.mul(tape.constant(bg)?)?)?;
    p_true
        .clamp(T::from_f64(PROB_FLOOR), T::one())?
        .ln()?
        .mean()?
        .scale(-T::one())
}

/// Adaptive-moment optimizer state for every parameter of one store.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value().shape().to_vec())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update from the accumulated gradients,
    /// then clears them.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::contract("optimizer state belongs to a different parameter store"));
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let (value, grad) = p.value_and_grad_mut();
            if value.len() != m.len() {
                return Err(Error::contract(format!("optimizer state shape differs for {}", p.name)));
            }
            for (((x, &g), mi), vi) in value.iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
                let g = g.as_f64();
                let mn = self.beta1 * mi.as_f64() + (1.0 - self.beta1) * g;
                let vn = self.beta2 * vi.as_f64() + (1.0 - self.beta2) * g * g;
                *mi = T::from_f64(mn);
                *vi = T::from_f64(vn);
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *x = T::from_f64(x.as_f64() - update);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Which mask the middle frame contributes to the memory of the last frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Feedback {
    /// The binarized merged prediction, as at inference time.
    #[default]
    Predicted,
    GroundTruth,
}

/// Frames whose prediction enters the loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossFrames {
    #[default]
    Both,
    Second,
    Third,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Fresh three-frame clips every step.
    Pretrain,
    /// Frame triples sampled from a pool of long sequences.
    Main,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Main => "main",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "main" => Ok(Stage::Main),
            _ => Err(Error::Config(format!("unknown stage {s:?}; expected pretrain|main"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub poly_power: f64,
    pub batch_size: usize,
    /// Square training frame side in pixels.
    pub crop: usize,
    pub max_steps: usize,
    /// Largest frame gap of a sampled triple (main stage).
    pub interval_max: usize,
    pub seed: u64,
    /// Annotated sprites per generated clip.
    pub objects: usize,
    /// Unannotated sprites drawn over the objects.
    pub occluders: usize,
    pub feedback: Feedback,
    pub loss_frames: LossFrames,
    /// Save a checkpoint every this many steps (0 = never).
    pub checkpoint_every: usize,
    /// Main stage: length and number of the pre-generated sequences.
    pub sequence_length: usize,
    pub sequence_pool: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-5,
            poly_power: 0.9,
            batch_size: 4,
            crop: 64,
            max_steps: 2000,
            interval_max: 25,
            seed: 0,
            objects: 1,
            occluders: 0,
            feedback: Feedback::Predicted,
            loss_frames: LossFrames::Both,
            checkpoint_every: 0,
            sequence_length: 60,
            sequence_pool: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !(self.poly_power > 0.0) {
            return Err(Error::Config("base_lr and poly_power must be positive".into()));
        }
        if self.crop == 0 || self.crop % STRIDE != 0 {
            return Err(Error::Config(format!("crop {} must be a positive multiple of {STRIDE}", self.crop)));
        }
        if self.batch_size == 0 || self.objects == 0 {
            return Err(Error::Config("batch_size and objects must be positive".into()));
        }
        if self.sequence_length < 3 || self.sequence_pool == 0 {
            return Err(Error::Config("main stage needs sequences of at least 3 frames".into()));
        }
        Ok(())
    }

    /// The synthetic data configuration resized to the training crop.
    pub fn synth_for_crop(&self, synth: &SynthConfig) -> SynthConfig {
        if (synth.height, synth.width) == (self.crop, self.crop) {
            synth.clone()
        } else {
            SynthConfig {
                height: self.crop,
                width: self.crop,
                ..SynthConfig::for_size(self.crop, self.crop)
            }
        }
    }
}

/// Summed loss of one three-frame clip, averaged over the objects present
/// in its first frame.
///
/// Frame 0 with its ground-truth mask is the memory for frame 1; frame 1
/// then joins the memory (with the mask chosen by `feedback`) for frame 2.
pub fn clip_loss<'t, T: Element>(
    model: &Model<T>,
    tape: &'t Tape<T>,
    clip: &Clip,
    feedback: Feedback,
    loss_frames: LossFrames,
) -> Result<Var<'t, T>> {
    if clip.len() != 3 {
        return Err(Error::contract(format!("training clips have 3 frames, got {}", clip.len())));
    }
    let ids = clip.object_ids();
    if ids.is_empty() {
        return Err(Error::contract("training clip has no object in its first frame"));
    }
    let (store, backbone) = (&model.store, &model.backbone);
    let feats = clip
        .frames
        .iter()
        .map(|f| backbone.extract(tape, store, tape.constant(f.cast::<T>())?))
        .collect::<Result<Vec<_>>>()?;
    let encode = |m: &BinaryMask| backbone.encode_mask(tape, store, tape.constant(m.to_tensor::<T>())?);

    let first: Vec<Var<'t, T>> = ids.iter().map(|&id| encode(&clip.mask(0, id))).collect::<Result<_>>()?;
    let mut losses: BTreeMap<ObjectId, Vec<Var<'t, T>>> = BTreeMap::new();
    let mut middle_fg = BTreeMap::new();
    for (&id, &m_e) in ids.iter().zip(&first) {
        let pred = model.predict(tape, &feats[1], feats[0].embedding, m_e)?;
        if loss_frames != LossFrames::Third {
            losses.entry(id).or_default().push(cross_entropy(pred.decoded.probs, &clip.mask(1, id))?);
        }
        middle_fg.insert(id, (*pred.foreground()?.value()).clone());
    }
    let labels = merge(&middle_fg, MergeMode::Soft)?;
    let m_ori = tape.concat_rows(&[feats[0].embedding, feats[1].embedding])?;
    for (&id, &e0) in ids.iter().zip(&first) {
        let fed = match feedback {
            Feedback::Predicted => labels.mask(id),
            Feedback::GroundTruth => clip.mask(1, id),
        };
        let m_e = tape.concat_rows(&[e0, encode(&fed)?])?;
        let pred = model.predict(tape, &feats[2], m_ori, m_e)?;
        if loss_frames != LossFrames::Second {
            losses.entry(id).or_default().push(cross_entropy(pred.decoded.probs, &clip.mask(2, id))?);
        }
    }
    let mut total: Option<Var<'t, T>> = None;
    for l in losses.into_values().flatten() {
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
    }
    total
        .expect("at least one loss term")
        .scale(T::from_f64(1.0 / ids.len() as f64))
}

/// Mean loss of `clips` and the averaged parameter gradients, summed in a
/// fixed order so results do not depend on thread scheduling.
pub fn batch_gradients<T: Element>(
    model: &Model<T>,
    clips: &[Clip],
    feedback: Feedback,
    loss_frames: LossFrames,
) -> Result<(f64, Vec<(ParamId, Tensor<T>)>)> {
    let parts = clips
        .par_iter()
        .map(|clip| {
            let tape = Tape::new();
            let loss = clip_loss(model, &tape, clip, feedback, loss_frames)?;
            let value = loss.value().item()?.as_f64();
            Ok((value, tape.gradients(loss)?.into_param_grads()))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = clips.len() as f64;
    let mut sum: BTreeMap<usize, (ParamId, Vec<f64>)> = BTreeMap::new();
    let mut loss = 0.0;
    for (value, grads) in parts {
        loss += value;
        for (id, g) in grads {
            let acc = sum
                .entry(id.index())
                .or_insert_with(|| (id, vec![0.0; g.len()]));
            for (a, v) in acc.1.iter_mut().zip(g.data()) {
                *a += v.as_f64();
            }
        }
    }
    let grads = sum
        .into_values()
        .map(|(id, g)| {
            let shape = model.store.value(id).shape().to_vec();
            let t = Tensor::from_fn(shape, |i| T::from_f64(g[i] / n));
            (id, t)
        })
        .collect();
    Ok((loss / n, grads))
}

/// One optimizer update on a batch of clips; returns the mean loss.
pub fn train_clip_step<T: Element>(
    model: &mut Model<T>,
    optimizer: &mut Adam<T>,
    clips: &[Clip],
    config: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::contract("empty training batch"));
    }
    let (loss, grads) = batch_gradients(model, clips, config.feedback, config.loss_frames)?;
    for (id, g) in &grads {
        model.store.get_mut(*id).accumulate(g)?;
    }
    optimizer.step(&mut model.store, lr)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

const MAX_TRIPLE_DRAWS: usize = 256;

/// Source of training clips for one stage.
pub struct ClipSource {
    stage: Stage,
    synth: SynthConfig,
    objects: usize,
    occluders: usize,
    interval_max: usize,
    rng: synth::SynthRng,
    pool: Vec<Clip>,
}

impl ClipSource {
    pub fn new(stage: Stage, config: &TrainConfig, synth: &SynthConfig) -> Result<Self> {
        let synth = config.synth_for_crop(synth);
        synth.validate()?;
        let mut rng = synth::rng(config.seed ^ 0x5eed_da7a);
        let pool = match stage {
            Stage::Pretrain => Vec::new(),
            Stage::Main => {
                let seeds: Vec<u64> = (0..config.sequence_pool).map(|_| rng.random()).collect();
                seeds
                    .par_iter()
                    .map(|&s| {
                        synth::make_occluded_sequence(s, config.sequence_length, config.objects, config.occluders, &synth)
                    })
                    .collect::<Result<_>>()?
            }
        };
        Ok(Self {
            stage,
            synth,
            objects: config.objects,
            occluders: config.occluders,
            interval_max: config.interval_max,
            rng,
            pool,
        })
    }

    pub fn next_batch(&mut self, size: usize) -> Result<Vec<Clip>> {
        match self.stage {
            Stage::Pretrain => {
                let seeds: Vec<u64> = (0..size).map(|_| self.rng.random()).collect();
                seeds
                    .par_iter()
                    .map(|&s| synth::make_occluded_sequence(s, 3, self.objects, self.occluders, &self.synth))
                    .collect()
            }
            Stage::Main => (0..size)
                .map(|_| {
                    // occluders can hide every object; such triples are redrawn
                    for _ in 0..MAX_TRIPLE_DRAWS {
                        let seq = &self.pool[self.rng.random_range(0..self.pool.len())];
                        let idx = synth::sample_triple(&mut self.rng, seq.len(), self.interval_max)?;
                        let clip = seq.select(&idx);
                        if !clip.object_ids().is_empty() {
                            return Ok(clip);
                        }
                    }
                    Err(Error::contract("no triple with a visible object in the sequence pool"))
                })
                .collect(),
        }
    }
}

/// Runs one training stage and returns its loss curve. With a checkpoint
/// directory and `checkpoint_every > 0`, snapshots go to `dir/step-NNNNNN`.
pub fn run_stage<T: Element>(
    model: &mut Model<T>,
    stage: Stage,
    config: &TrainConfig,
    synth: &SynthConfig,
    checkpoint_dir: Option<&Path>,
    mut progress: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    config.validate()?;
    let mut source = ClipSource::new(stage, config, synth)?;
    let mut optimizer = Adam::new(&model.store);
    let mut curve = Vec::with_capacity(config.max_steps);
    for step in 0..config.max_steps {
        let lr = poly_lr(step, config.max_steps, config.base_lr, config.poly_power)?;
        let batch = source.next_batch(config.batch_size)?;
        let loss = train_clip_step(model, &mut optimizer, &batch, config, lr)?;
        let record = LossRecord { step, lr, loss };
        progress(&record);
        curve.push(record);
        if let Some(dir) = checkpoint_dir {
            let done = step + 1;
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
                let mut info = serde_json::Map::new();
                info.insert("stage".into(), stage.to_string().into());
                info.insert("step".into(), done.into());
                checkpoint::save_with_info(model, &dir.join(format!("step-{done:06}")), info)?;
            }
        }
    }
    Ok(curve)
}

pub fn write_loss_curve(path: &Path, curve: &[LossRecord]) -> Result<()> {
    let mut out = String::from("step,lr,loss\n");
    for r in curve {
        out.push_str(&format!("{},{:e},{}\n", r.step, r.lr, r.loss));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Mean of `curve[range]` losses.
pub fn mean_loss(curve: &[LossRecord]) -> f64 {
    curve.iter().map(|r| r.loss).sum::<f64>() / curve.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::model::ModelConfig;

    #[test]
    fn poly_lr_examples() {
        assert_eq!(poly_lr(0, 100, 1e-5, 0.9).unwrap(), 1e-5);
        assert_eq!(poly_lr(100, 100, 1e-5, 0.9).unwrap(), 0.0);
        let half = poly_lr(50, 100, 1e-5, 0.9).unwrap();
        assert!((half - 1e-5 * 0.5f64.powf(0.9)).abs() < 1e-18);
        assert!((half - 5.359e-6).abs() < 1e-9);
        assert!(poly_lr(101, 100, 1e-5, 0.9).is_err());
        let lrs: Vec<f64> = (0..=100).map(|s| poly_lr(s, 100, 1.0, 0.9).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    fn ce(p_fg: &[f64], truth: &[bool]) -> f64 {
        let n = p_fg.len();
        let mut probs: Vec<f64> = p_fg.iter().map(|p| 1.0 - p).collect();
        probs.extend_from_slice(p_fg);
        let tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::from_f64([2, 1, n], &probs).unwrap()).unwrap();
        let m = BinaryMask::new(1, n, truth.to_vec()).unwrap();
        cross_entropy(v, &m).unwrap().value().item().unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        assert!(ce(&[1.0, 0.0], &[true, false]) <= 1e-6);
        assert!((ce(&[0.5, 0.5, 0.5], &[true, false, true]) - 2f64.ln()).abs() < 1e-12);
        assert!((ce(&[0.8], &[true]) + 0.8f64.ln()).abs() < 1e-12);
        assert!((ce(&[0.0], &[true]) + (PROB_FLOOR).ln()).abs() < 1e-9);
    }

    #[test]
    fn adam_examples() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", Tensor::from_f64([3], &[1.0, -2.0, 0.5]).unwrap());
        let mut opt = Adam::new(&store);
        opt.step(&mut store, 0.1).unwrap();
        assert_eq!(store.value(id).data(), &[1.0, -2.0, 0.5]);

        store.get_mut(id).accumulate(&Tensor::from_f64([3], &[0.3, -4.0, 0.0]).unwrap()).unwrap();
        let mut opt = Adam::new(&store);
        opt.step(&mut store, 0.1).unwrap();
        let v = store.value(id).data();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 1.9).abs() < 1e-6 && v[2] == 0.5);
        assert!(store.get(id).gradient().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn adam_three_step_trace() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", Tensor::scalar(0.0));
        let mut opt = Adam::new(&store);
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.01);
        let (mut m, mut v, mut x) = (0.0, 0.0, 0.0);
        for t in 1..=3 {
            store.get_mut(id).accumulate(&Tensor::scalar(1.0)).unwrap();
            opt.step(&mut store, lr).unwrap();
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            assert!((store.value(id).data()[0] - x).abs() < 1e-15);
        }
        assert_eq!(opt.steps(), 3);
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        store.get_mut(id).accumulate(&Tensor::from_f64([2], &[5.0, -1.0]).unwrap()).unwrap();
        Adam::new(&store).step(&mut store, 0.0).unwrap();
        assert_eq!(store.value(id).data(), &[1.0, 2.0]);
    }

    fn tiny_model() -> Model<f32> {
        Model::new(ModelConfig {
            backbone: BackboneConfig {
                stage_channels: [4, 6, 8],
                projection_channels: 8,
                mask_encoder_channels: [2, 3, 4],
            },
            key_dim: 4,
            decoder_width: 6,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn fresh_model_loss_is_finite_positive() {
        let model = tiny_model();
        let clip = synth::make_sequence(3, 3, 2, &SynthConfig::for_size(32, 32)).unwrap();
        for (fb, lf) in [
            (Feedback::Predicted, LossFrames::Both),
            (Feedback::GroundTruth, LossFrames::Second),
            (Feedback::Predicted, LossFrames::Third),
        ] {
            let tape = Tape::new();
            let l = clip_loss(&model, &tape, &clip, fb, lf).unwrap().value().item().unwrap();
            assert!(l.is_finite() && l > 0.0);
        }
    }

    #[test]
    fn zero_steps_keep_initialization() {
        let mut model = tiny_model();
        let before = model.store.clone();
        let cfg = TrainConfig {
            max_steps: 0,
            crop: 32,
            ..Default::default()
        };
        let curve = run_stage(&mut model, Stage::Pretrain, &cfg, &SynthConfig::for_size(32, 32), None, |_| {}).unwrap();
        assert!(curve.is_empty());
        for ((_, a), (_, b)) in before.iter().zip(model.store.iter()) {
            assert_eq!(a.value(), b.value());
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = TrainConfig {
            max_steps: 3,
            crop: 32,
            batch_size: 2,
            base_lr: 1e-3,
            ..Default::default()
        };
        let synth = SynthConfig::for_size(32, 32);
        for stage in [Stage::Pretrain, Stage::Main] {
            let mut a = tiny_model();
            let mut b = tiny_model();
            let cfg = TrainConfig {
                sequence_length: 10,
                sequence_pool: 2,
                ..cfg.clone()
            };
            let ca = run_stage(&mut a, stage, &cfg, &synth, None, |_| {}).unwrap();
            let cb = run_stage(&mut b, stage, &cfg, &synth, None, |_| {}).unwrap();
            assert_eq!(ca, cb);
            assert_eq!(ca.len(), 3);
        }
    }

    #[test]
    fn stage_parse() {
        assert_eq!("main".parse::<Stage>().unwrap(), Stage::Main);
        assert!("warmup".parse::<Stage>().is_err());
    }
}
