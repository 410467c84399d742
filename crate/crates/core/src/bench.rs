//! Memory-policy comparison: the same model and videos segmented and scored
//! once per policy.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::mask::LabelMap;
use crate::memory::MemoryPolicy;
use crate::metrics::{aggregate, score_sequence};
use crate::model::Model;
use crate::pipeline::{run_video, PipelineConfig, VideoTask};
use crate::synth::{make_occluded_sequence, Clip, SynthConfig};
use crate::tensor::Tensor;

/// The compared policies, in report order.
pub const BENCH_POLICIES: [MemoryPolicy; 5] = [
    MemoryPolicy::FirstOnly,
    MemoryPolicy::PreviousOnly,
    MemoryPolicy::FirstAndPrevious,
    MemoryPolicy::EveryK(5),
    MemoryPolicy::FixedN(7),
];

/// A video with a ground-truth label map for every frame.
#[derive(Debug, Clone)]
pub struct EvalSequence {
    pub name: String,
    pub frames: Vec<Tensor<f32>>,
    pub truth: Vec<LabelMap>,
}

impl EvalSequence {
    pub fn from_clip(name: impl Into<String>, clip: &Clip) -> Self {
        Self {
            name: name.into(),
            frames: clip.frames.clone(),
            truth: (0..clip.len()).map(|t| clip.label_map(t)).collect(),
        }
    }

    /// Reads a sequence directory whose every frame is annotated.
    pub fn load(name: impl Into<String>, dir: &Path) -> Result<Self> {
        let frame_files = io::numbered_pngs(&dir.join(io::FRAMES_DIR))?;
        let masks = io::read_masks(dir)?;
        let numbers: Vec<usize> = frame_files.iter().map(|(i, _)| *i).collect();
        let annotated: Vec<usize> = masks.iter().map(|(i, _)| *i).collect();
        if numbers.is_empty() || numbers != annotated {
            return Err(Error::format(
                dir,
                format!("{} frames but {} annotations; evaluation needs one per frame", numbers.len(), annotated.len()),
            ));
        }
        Ok(Self {
            name: name.into(),
            frames: frame_files.iter().map(|(_, p)| io::read_frame(p)).collect::<Result<_>>()?,
            truth: masks.into_iter().map(|(_, m)| m).collect(),
        })
    }

    pub fn task(&self) -> Result<VideoTask<f32>> {
        VideoTask::from_labels(self.frames.clone(), &self.truth[0])
    }
}

pub fn load_dataset(root: &Path) -> Result<Vec<EvalSequence>> {
    io::sequence_dirs(root)?
        .into_iter()
        .map(|(name, dir)| EvalSequence::load(name, &dir))
        .collect()
}

/// Sprite videos where objects occlude one another, an unannotated sprite
/// passes over them, and their colours and poses drift over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSuite {
    pub sequences: usize,
    pub length: usize,
    pub objects: usize,
    pub occluders: usize,
    pub seed: u64,
    pub synth: SynthConfig,
}

impl OcclusionSuite {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            sequences: 30,
            length: 25,
            objects: 2,
            occluders: 1,
            seed: 6_000_000,
            synth: Self::synth_config(height, width),
        }
    }

    /// The default sprite walk made 1.5 times faster, plus colour drift.
    pub fn synth_config(height: usize, width: usize) -> SynthConfig {
        let mut cfg = SynthConfig::for_size(height, width);
        let w = &mut cfg.walk;
        for r in [&mut w.rotation, &mut w.scale, &mut w.shear, &mut w.dx, &mut w.dy] {
            *r = (r.0 * 1.5, r.1 * 1.5);
        }
        cfg.color_walk = 0.08;
        cfg
    }

    pub fn generate(&self) -> Result<Vec<EvalSequence>> {
        (0..self.sequences)
            .map(|i| {
                let seed = self.seed + i as u64;
                let clip = make_occluded_sequence(seed, self.length, self.objects, self.occluders, &self.synth)?;
                Ok(EvalSequence::from_clip(format!("occ-{i:04}"), &clip))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub policy: MemoryPolicy,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "JF")]
    pub jf: f64,
    /// Memory frames per segmented frame, averaged over all of them.
    pub mean_memory_size: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub sequences: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, policy: MemoryPolicy) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.policy == policy)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>7} {:>7} {:>7} {:>9} {:>9}\n",
            "policy", "J", "F", "J&F", "mem_size", "seconds"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:>7.4} {:>7.4} {:>7.4} {:>9.2} {:>9.2}",
                r.policy.to_string(),
                r.j,
                r.f,
                r.jf,
                r.mean_memory_size,
                r.seconds
            );
        }
        out
    }
}

/// Segments and scores every sequence under each policy. `base` supplies
/// everything but the policy.
pub fn bench_memory(
    model: &Model<f32>,
    sequences: &[EvalSequence],
    policies: &[MemoryPolicy],
    base: &PipelineConfig,
    tolerance: Option<f64>,
) -> Result<BenchReport> {
    if sequences.is_empty() {
        return Err(Error::contract("benchmark needs at least one sequence"));
    }
    let tasks = sequences.iter().map(EvalSequence::task).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(policies.len());
    for &policy in policies {
        let config = PipelineConfig {
            policy,
            ..base.clone()
        };
        let start = Instant::now();
        let mut scores = BTreeMap::new();
        let (mut memory_total, mut steps) = (0usize, 0usize);
        for (seq, task) in sequences.iter().zip(&tasks) {
            let result = run_video(model, task, &config)?;
            memory_total += result.memory_sizes().iter().sum::<usize>();
            steps += result.memory_indices.len();
            scores.insert(seq.name.clone(), score_sequence(&result.label_maps, &seq.truth, tolerance)?);
        }
        let global = aggregate(&scores)?.global;
        rows.push(BenchRow {
            policy,
            j: global.j,
            f: global.f,
            jf: global.jf,
            mean_memory_size: if steps == 0 { 0.0 } else { memory_total as f64 / steps as f64 },
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(BenchReport {
        sequences: sequences.len(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{make_sequence, SynthConfig};

    #[test]
    fn one_row_per_policy_with_bounded_memory() {
        let model = Model::<f32>::new(ModelConfig::default()).unwrap();
        let cfg = SynthConfig::for_size(32, 32);
        let seqs: Vec<_> = (0..2)
            .map(|s| EvalSequence::from_clip(format!("s{s}"), &make_sequence(s, 10, 2, &cfg).unwrap()))
            .collect();
        let report = bench_memory(&model, &seqs, &BENCH_POLICIES, &PipelineConfig::default(), None).unwrap();
        assert_eq!(report.rows.len(), 5);
        assert!(report.row(MemoryPolicy::FixedN(7)).unwrap().mean_memory_size <= 7.0);
        assert_eq!(report.row(MemoryPolicy::FirstOnly).unwrap().mean_memory_size, 1.0);
        // frame t of 10 holds min(t, 7) frames under fixed-n:7
        let expect = (1..10).map(|t: usize| t.min(7)).sum::<usize>() as f64 / 9.0;
        assert!((report.row(MemoryPolicy::FixedN(7)).unwrap().mean_memory_size - expect).abs() < 1e-12);
        assert_eq!(report.to_table().lines().count(), 6);
    }

    #[test]
    fn dataset_roundtrip_and_sparse_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let clip = make_sequence(3, 4, 1, &SynthConfig::for_size(32, 32)).unwrap();
        let seq = EvalSequence::from_clip("a", &clip);
        io::write_sequence(&dir.path().join("a"), &seq.frames, &seq.truth).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].truth, seq.truth);
        std::fs::remove_file(dir.path().join("a/masks").join(io::frame_file_name(2))).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }
}
