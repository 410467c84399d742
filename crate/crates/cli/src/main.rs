//! `vos`: synthetic data, training, inference, evaluation and memory-policy
//! benchmarks from one binary.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use vos_core::bench::{bench_memory, load_dataset, OcclusionSuite, BENCH_POLICIES};
use vos_core::config::RunConfig;
use vos_core::metrics::{aggregate, score_sequence};
use vos_core::model::Model;
use vos_core::pipeline::{run_video, VideoTask};
use vos_core::synth::{make_occluded_sequence, SynthConfig};
use vos_core::train::{mean_loss, run_stage, write_loss_curve, Stage};
use vos_core::{checkpoint, io, Error};

#[derive(Parser)]
#[command(name = "vos", version, about = "Semi-supervised video object segmentation at desk scale")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration with dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable. Applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Random seed (synthesis base seed; training and initialization seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic sprite videos with masks.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1)]
        clips: usize,
        #[arg(long, default_value_t = 20)]
        length: usize,
        /// Annotated sprites per clip [default: 1, or 2 with --occlusion-suite].
        #[arg(long)]
        objects: Option<usize>,
        /// Unannotated sprites drawn over the objects [default: 0, or 1 with
        /// --occlusion-suite].
        #[arg(long)]
        occluders: Option<usize>,
        /// Use the occlusion benchmark's motion and colour drift in place of
        /// the configured synth walk.
        #[arg(long)]
        occlusion_suite: bool,
    },
    /// Run one training stage and save the checkpoint.
    Train {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "pretrain")]
        stage: Stage,
        /// Initial weights; a fresh model from the config otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides train.max_steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Segment every sequence under --input from its first-frame annotation.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_name = "first|prev|first-prev|every-k:K|fixed-n:N")]
        memory_policy: Option<String>,
        /// Write every attention map next to the masks.
        #[arg(long)]
        debug_attention: bool,
    },
    /// Score predicted masks against ground truth.
    Eval {
        /// Predictions, as written by `infer`.
        #[arg(long)]
        input: PathBuf,
        /// Ground-truth dataset.
        #[arg(long)]
        truth: PathBuf,
        /// Also write the JSON report here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare the five memory policies on one dataset.
    BenchMem {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Directory for bench_mem.json and bench_mem.txt.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Print JSON instead of the text table.
        #[arg(long)]
        json: bool,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn report(&self) -> (u8, &'static str, String) {
        match self {
            Failure::Usage(msg) => (2, "usage", msg.clone()),
            Failure::Core(e) => {
                let (code, kind) = match e {
                    Error::Config(_) => (3, "config"),
                    Error::Io { .. } => (4, "io"),
                    Error::Format { .. } => (5, "format"),
                    _ => (1, "runtime"),
                };
                (code, kind, e.to_string())
            }
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            return fail(Failure::Usage(first.to_string()));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

fn fail(f: Failure) -> ExitCode {
    let (code, kind, message) = f.report();
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn run(cli: Cli) -> CliResult<()> {
    let common = cli.common;
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    match cli.command {
        Command::Synth {
            output,
            clips,
            length,
            objects,
            occluders,
            occlusion_suite,
        } => {
            let (synth_cfg, objects, occluders) = if occlusion_suite {
                let suite = OcclusionSuite::new(cfg.synth.height, cfg.synth.width);
                (suite.synth, objects.unwrap_or(suite.objects), occluders.unwrap_or(suite.occluders))
            } else {
                (cfg.synth.clone(), objects.unwrap_or(1), occluders.unwrap_or(0))
            };
            let seed = common.seed.unwrap_or(0);
            synth(&synth_cfg, &output, clips, length, objects, occluders, seed)
        }
        Command::Train {
            output,
            stage,
            checkpoint,
            steps,
        } => {
            if let Some(s) = common.seed {
                cfg.set("train.seed", &s.to_string())?;
                cfg.set("model.seed", &s.to_string())?;
            }
            if let Some(n) = steps {
                cfg.set("train.max_steps", &n.to_string())?;
            }
            train(&cfg, &output, stage, checkpoint.as_deref())
        }
        Command::Infer {
            checkpoint,
            input,
            output,
            memory_policy,
            debug_attention,
        } => {
            if let Some(p) = memory_policy {
                cfg.set("memory.policy", &p)?;
            }
            cfg.infer.debug_attention |= debug_attention;
            infer(&cfg, &checkpoint, &input, &output)
        }
        Command::Eval { input, truth, output } => eval(&cfg, &input, &truth, output.as_deref()),
        Command::BenchMem {
            checkpoint,
            input,
            output,
            json,
        } => bench(&cfg, &checkpoint, &input, output.as_deref(), json),
    }
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

// a closed stdout (e.g. piped into `head`) is not an error
fn print_out(text: &str) {
    let _ = std::io::stdout().write_all(text.as_bytes());
}

fn print_json(value: &Value) {
    print_out(&(serde_json::to_string_pretty(value).expect("json values serialize") + "\n"));
}

fn synth(
    cfg: &SynthConfig,
    output: &Path,
    clips: usize,
    length: usize,
    objects: usize,
    occluders: usize,
    seed: u64,
) -> CliResult<()> {
    let mut sequences = Vec::with_capacity(clips);
    for i in 0..clips {
        let clip_seed = seed.wrapping_add(i as u64);
        let clip = make_occluded_sequence(clip_seed, length, objects, occluders, cfg)?;
        let name = format!("clip-{i:04}");
        let labels: Vec<_> = (0..clip.len()).map(|t| clip.label_map(t)).collect();
        io::write_sequence(&output.join(&name), &clip.frames, &labels)?;
        sequences.push(json!({
            "name": name,
            "seed": clip_seed,
            "frames": clip.len(),
            "object_ids": clip.object_ids(),
        }));
    }
    let manifest = json!({
        "kind": "synth",
        "seed": seed,
        "clips": clips,
        "length": length,
        "objects": objects,
        "occluders": occluders,
        "height": cfg.height,
        "width": cfg.width,
        "synth": cfg,
        "sequences": sequences,
    });
    write_json(&output.join("manifest.json"), &manifest)?;
    print_json(&manifest);
    Ok(())
}

fn train(cfg: &RunConfig, output: &Path, stage: Stage, init: Option<&Path>) -> CliResult<()> {
    let mut model = match init {
        Some(dir) => checkpoint::load::<f32>(dir)?,
        None => Model::<f32>::new(cfg.model.clone())?,
    };
    let start = Instant::now();
    let curve = run_stage(&mut model, stage, &cfg.train, &cfg.synth, Some(output), |r| {
        if (r.step + 1) % 100 == 0 {
            eprintln!("step {:>6}  lr {:.3e}  loss {:.5}", r.step + 1, r.lr, r.loss);
        }
    })?;
    let window = curve.len().min(100);
    let initial = (window > 0).then(|| mean_loss(&curve[..window]));
    let trailing = (window > 0).then(|| mean_loss(&curve[curve.len() - window..]));
    let mut info = serde_json::Map::new();
    info.insert("stage".into(), stage.to_string().into());
    info.insert("steps".into(), curve.len().into());
    info.insert("seed".into(), cfg.train.seed.into());
    if let Some(init) = init {
        info.insert("init".into(), init.display().to_string().into());
    }
    checkpoint::save_with_info(&model, output, info)?;
    write_loss_curve(&output.join("loss.csv"), &curve)?;
    print_json(&json!({
        "kind": "train",
        "stage": stage.to_string(),
        "steps": curve.len(),
        "seed": cfg.train.seed,
        "initial_mean_loss": initial,
        "trailing_mean_loss": trailing,
        "seconds": start.elapsed().as_secs_f64(),
        "checkpoint": output,
    }));
    Ok(())
}

fn first_annotation(dir: &Path, frame: usize) -> CliResult<vos_core::mask::LabelMap> {
    let masks = dir.join(io::MASKS_DIR);
    let files = io::numbered_pngs(&masks)?;
    let (_, path) = files
        .iter()
        .find(|(i, _)| *i == frame)
        .ok_or_else(|| Error::format(&masks, format!("no annotation for the first frame ({frame})")))?;
    Ok(io::read_labels(path)?)
}

fn infer(cfg: &RunConfig, ckpt: &Path, input: &Path, output: &Path) -> CliResult<()> {
    let model = checkpoint::load::<f32>(ckpt)?;
    let pipeline = cfg.pipeline();
    let mut sequences = Vec::new();
    for (name, dir) in io::sequence_dirs(input)? {
        let files = io::numbered_pngs(&dir.join(io::FRAMES_DIR))?;
        let Some(&(first_number, _)) = files.first() else {
            return Err(Error::format(dir.join(io::FRAMES_DIR), "no frames found").into());
        };
        let first = first_annotation(&dir, first_number)?;
        let frames = files.iter().map(|(_, p)| io::read_frame(p)).collect::<Result<Vec<_>, _>>()?;
        let task = VideoTask::from_labels(frames, &first)?;
        let start = Instant::now();
        let result = run_video(&model, &task, &pipeline)?;
        let seconds = start.elapsed().as_secs_f64();
        let out_dir = output.join(&name);
        for ((number, _), labels) in files.iter().zip(&result.label_maps) {
            io::write_labels(&out_dir.join(io::MASKS_DIR).join(io::frame_file_name(*number)), labels)?;
        }
        if let Some(attention) = &result.attention {
            let mut records = Vec::new();
            for (t, per_object) in attention.iter().enumerate() {
                for (id, blocks) in per_object {
                    for (block, weights) in blocks {
                        records.push(json!({
                            "frame": files[t + 1].0,
                            "object": id,
                            "block": block,
                            "shape": weights.shape(),
                            "data": weights.data(),
                        }));
                    }
                }
            }
            write_json(&out_dir.join("attention.json"), &Value::Array(records))?;
        }
        let memory: Vec<Value> = result
            .memory_indices
            .iter()
            .enumerate()
            .map(|(t, idx)| json!({ "frame": t + 1, "indices": idx }))
            .collect();
        sequences.push(json!({
            "name": name,
            "frames": files.len(),
            "objects": first.object_ids(),
            "backbone_calls": result.backbone_calls,
            "memory_sizes": result.memory_sizes(),
            "memory": memory,
            "seconds": seconds,
        }));
    }
    let manifest = json!({
        "kind": "infer",
        "checkpoint": ckpt,
        "input": input,
        "memory_policy": pipeline.policy,
        "merge": pipeline.merge,
        "sequences": sequences,
    });
    write_json(&output.join("manifest.json"), &manifest)?;
    print_json(&manifest);
    Ok(())
}

fn eval(cfg: &RunConfig, predictions: &Path, truth: &Path, output: Option<&Path>) -> CliResult<()> {
    let mut scores = BTreeMap::new();
    for (name, dir) in io::sequence_dirs(truth)? {
        let gt = io::read_masks(&dir)?;
        let pred_dir = predictions.join(&name);
        let pred: BTreeMap<usize, _> = io::read_masks(&pred_dir)?.into_iter().collect();
        let mut pred_maps = Vec::with_capacity(gt.len());
        for (number, _) in &gt {
            let map = pred.get(number).ok_or_else(|| {
                Error::format(
                    pred_dir.join(io::MASKS_DIR).join(io::frame_file_name(*number)),
                    "missing prediction for an annotated frame",
                )
            })?;
            pred_maps.push(map.clone());
        }
        let gt_maps: Vec<_> = gt.into_iter().map(|(_, m)| m).collect();
        scores.insert(name, score_sequence(&pred_maps, &gt_maps, cfg.eval.tolerance)?);
    }
    let report = serde_json::to_value(aggregate(&scores)?).expect("report serializes");
    if let Some(path) = output {
        write_json(path, &report)?;
    }
    print_json(&report);
    Ok(())
}

fn bench(cfg: &RunConfig, ckpt: &Path, input: &Path, output: Option<&Path>, as_json: bool) -> CliResult<()> {
    let model = checkpoint::load::<f32>(ckpt)?;
    let sequences = load_dataset(input)?;
    let report = bench_memory(&model, &sequences, &BENCH_POLICIES, &cfg.pipeline(), cfg.eval.tolerance)?;
    let value = serde_json::to_value(&report).expect("report serializes");
    let table = report.to_table();
    if let Some(dir) = output {
        write_json(&dir.join("bench_mem.json"), &value)?;
        let path = dir.join("bench_mem.txt");
        fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    }
    if as_json {
        print_json(&value);
    } else {
        print_out(&table);
    }
    Ok(())
}
