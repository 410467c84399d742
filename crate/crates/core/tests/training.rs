//! Short fits: the model must learn from the annotation, not just the image.

use vos_core::model::{Model, ModelConfig};
use vos_core::synth::{make_sequence, Clip, SynthConfig};
use vos_core::train::{batch_gradients, train_clip_step, Adam, Feedback, LossFrames, TrainConfig};

const SIDE: usize = 32;

fn clips(base: u64, n: usize) -> Vec<Clip> {
    let cfg = SynthConfig::for_size(SIDE, SIDE);
    (0..n).map(|i| make_sequence(base + i as u64, 3, 1, &cfg).unwrap()).collect()
}

/// The same frames paired with the masks of another clip.
fn shuffled(clips: &[Clip]) -> Vec<Clip> {
    (0..clips.len())
        .map(|i| Clip {
            masks: clips[(i + 1) % clips.len()].masks.clone(),
            ..clips[i].clone()
        })
        .collect()
}

fn fit(data: &[Clip], steps: usize) -> Model<f32> {
    let mut model = Model::<f32>::new(ModelConfig::default()).unwrap();
    let mut adam = Adam::new(&model.store);
    let config = TrainConfig::default();
    for step in 0..steps {
        let batch: Vec<Clip> = (0..4).map(|k| data[(4 * step + k) % data.len()].clone()).collect();
        train_clip_step(&mut model, &mut adam, &batch, &config, 1e-3).unwrap();
    }
    model
}

fn loss(model: &Model<f32>, data: &[Clip]) -> f64 {
    batch_gradients(model, data, Feedback::Predicted, LossFrames::Both).unwrap().0
}

#[test]
fn matched_masks_are_learned_and_shuffled_ones_are_not() {
    let train = clips(100, 64);
    let held_out = clips(9_000, 16);
    let initial = loss(&Model::new(ModelConfig::default()).unwrap(), &held_out);
    let real = loss(&fit(&train, 150), &held_out);
    let noise = loss(&fit(&shuffled(&train), 150), &held_out);
    assert!(real < 0.8 * initial, "real-mask fit {real} vs initial {initial}");
    assert!(real < noise, "real-mask fit {real} vs shuffled-mask fit {noise}");
}
