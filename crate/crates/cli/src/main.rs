use std::path::{Path, PathBuf};

use afformer::harness::corpus::CorpusSpec;
use afformer::harness::eval::write_eval_report;
use afformer::harness::{
    center_bias_baseline, evaluate, generate_synthetic_corpus, load_checkpoint, load_dataset, load_synth_dataset,
    save_checkpoint, train, zero_shot_eval, CheckpointMeta, RunConfig, RunMode, Sample, TrainOptions,
};
use afformer::heatmaps::{load_heatmap, AffordanceAnnotation};
use afformer::maskahand::{load_detections, make_pretrain_dataset, write_synth_dataset, MiningParams, SynthParams};
use afformer::media::VideoClip;
use afformer::metrics::{evaluate_at, AucPositives, EvalTarget};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "afformer", version, about = "Video-to-image affordance grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Positives {
    /// Annotation points (half-max threshold when a sample has none).
    Points,
    /// Ground-truth cells at or above half the maximum.
    Thresholded,
}

impl From<Positives> for AucPositives {
    fn from(p: Positives) -> Self {
        match p {
            Positives::Points => AucPositives::Points,
            Positives::Thresholded => AucPositives::Thresholded { relative: 0.5 },
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Supervised training from a sample manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from the parameters of an earlier checkpoint (fine-tuning).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Masked-hand self-supervised pretraining (no action head).
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        synth_manifest: PathBuf,
        #[arg(long, default_value = "runs/pretrain")]
        out: PathBuf,
    },
    /// Scores a checkpoint on a manifest at the given resolution.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluation grid, e.g. 256x256 or 28x28.
        #[arg(long, value_parser = parse_res)]
        res: (usize, usize),
        #[arg(long, value_enum, default_value = "points")]
        positives: Positives,
        /// Per-sample report, one JSON record per line.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Heatmap-only evaluation of a pretrained checkpoint, with the
    /// center-bias baseline alongside.
    Zeroshot {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the native heatmap resolution.
        #[arg(long, value_parser = parse_res)]
        res: Option<(usize, usize)>,
        #[arg(long, value_enum, default_value = "points")]
        positives: Positives,
    },
    /// Renders the procedural shapes-and-hand corpus.
    GenCorpus {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        clip_len: usize,
        #[arg(long, default_value_t = 0.3)]
        distortion: f64,
        #[arg(long, default_value = "corpus")]
        out: PathBuf,
    },
    /// KLD, SIM and AUC-J of one predicted heatmap against ground truth.
    Score {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_parser = parse_res)]
        res: Option<(usize, usize)>,
        /// Annotation file whose points are the AUC-J positives; without it
        /// the half-max region of the ground truth is used.
        #[arg(long)]
        points: Option<PathBuf>,
    },
    /// Synthesizes masked-hand pretraining samples from one video.
    Synth {
        /// Directory of numbered frame images.
        #[arg(long)]
        frames: PathBuf,
        /// Hand detections, one JSON record per line.
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.5)]
        scale: f64,
        #[arg(long, default_value_t = 0.5)]
        distortion: f64,
        #[arg(long, default_value_t = 1)]
        hand_masks: usize,
        #[arg(long, default_value_t = 1)]
        random_masks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Upper bound on the number of samples.
        #[arg(long, default_value_t = usize::MAX)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        clip_len: usize,
        #[arg(long, default_value_t = 16)]
        stride: usize,
        #[arg(long, default_value_t = 0.99)]
        threshold: f64,
        /// Remove the interaction frame from the emitted clip.
        #[arg(long)]
        drop_source_frame: bool,
    },
}

fn parse_res(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    let (h, w) = (parse(h)?, parse(w)?);
    if h == 0 || w == 0 {
        return Err("resolution must be positive".into());
    }
    Ok((h, w))
}

fn native_res(samples: &[Sample]) -> Result<(usize, usize)> {
    match samples.first() {
        Some(s) => Ok(s.heatmap.dims()),
        None => bail!("dataset is empty"),
    }
}

fn run_training(cfg: &RunConfig, samples: &[Sample], out: &Path, init: Option<&Path>) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let init_model = init.map(load_checkpoint).transpose()?.map(|(m, _)| m);
    let trace = out.join("trace.jsonl");
    let opts = TrainOptions {
        init: init_model.as_ref().map(|m| m.params()),
        trace_path: Some(&trace),
        ..Default::default()
    };
    let outcome = train(cfg, samples, &opts)?;
    let ckpt = out.join("model.safetensors");
    let meta = CheckpointMeta {
        model: outcome.model.config().clone(),
        mode: cfg.mode,
        iterations: outcome.trace.len(),
        seed: cfg.seed,
    };
    save_checkpoint(&ckpt, &outcome.model, &meta)?;
    if let (Some(first), Some(last)) = (outcome.trace.first(), outcome.trace.last()) {
        log::info!("loss {:.5} -> {:.5} over {} iterations", first.loss, last.loss, outcome.trace.len());
    }
    println!("{}", ckpt.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, data, out, init } => {
            let cfg = RunConfig::load(&config)?;
            if cfg.mode == RunMode::MaskahandPretrain {
                bail!("config is in pretraining mode; use the pretrain subcommand");
            }
            let samples = load_dataset(&data)?;
            run_training(&cfg, &samples, &out, init.as_deref())
        }
        Command::Pretrain { config, synth_manifest, out } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.mode = RunMode::MaskahandPretrain;
            let samples = load_synth_dataset(&synth_manifest)?;
            run_training(&cfg, &samples, &out, None)
        }
        Command::Eval { ckpt, data, res, positives, report } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let samples = load_dataset(&data)?;
            let r = evaluate(&model, &samples, res, positives.into())?;
            if let Some(path) = report {
                write_eval_report(&path, &r)?;
            }
            let mut line = serde_json::json!({ "kld": r.metrics.kld, "sim": r.metrics.sim, "auc_j": r.metrics.auc_j,
                "res": format!("{}x{}", res.0, res.1), "samples": r.samples.len() });
            if let Some(acc) = r.action_accuracy {
                line["action_accuracy"] = acc.into();
            }
            println!("{line}");
            Ok(())
        }
        Command::Zeroshot { ckpt, data, res, positives } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let samples = load_dataset(&data)?;
            let res = match res {
                Some(r) => r,
                None => native_res(&samples)?,
            };
            let m = zero_shot_eval(&model, &samples, res, positives.into(), false)?;
            let cb = center_bias_baseline(&samples, res, positives.into())?.metrics;
            let line = serde_json::json!({
                "kld": m.kld, "sim": m.sim, "auc_j": m.auc_j,
                "center_bias": { "kld": cb.kld, "sim": cb.sim, "auc_j": cb.auc_j },
                "res": format!("{}x{}", res.0, res.1),
            });
            println!("{line}");
            Ok(())
        }
        Command::GenCorpus { n, size, seed, clip_len, distortion, out } => {
            let spec = CorpusSpec {
                n_samples: n,
                image_size: size,
                clip_len,
                seed,
                distortion,
            };
            let manifest = generate_synthetic_corpus(&spec, &out)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Score { gt, pred, res, points } => {
            let gt = load_heatmap(&gt)?;
            let pred = load_heatmap(&pred)?;
            let ann = points.map(|p| AffordanceAnnotation::load(&p)).transpose()?;
            let target = EvalTarget {
                heatmap: &gt,
                points: ann.as_ref().map(|a| a.points.as_slice()),
            };
            let positives = match ann {
                Some(_) => AucPositives::Points,
                None => AucPositives::Thresholded { relative: 0.5 },
            };
            let m = evaluate_at(target, &pred, res.unwrap_or(gt.dims()), positives)?;
            println!("{}", serde_json::json!({ "kld": m.kld, "sim": m.sim, "auc_j": m.auc_j }));
            Ok(())
        }
        Command::Synth {
            frames,
            detections,
            out,
            scale,
            distortion,
            hand_masks,
            random_masks,
            seed,
            count,
            clip_len,
            stride,
            threshold,
            drop_source_frame,
        } => {
            let video = VideoClip::load_dir(&frames)?;
            let dets = load_detections(&detections)?;
            let params = SynthParams {
                hand_masks,
                random_masks,
                mask_scale: scale,
                distortion,
                seed,
                drop_source_frame,
                ..SynthParams::default()
            };
            params.validate()?;
            let mining = MiningParams {
                clip_len,
                stride,
                threshold,
            };
            let samples = make_pretrain_dataset(&video, &dets, &params, &mining, count)?;
            let manifest = write_synth_dataset(&out, &video, &samples, &params)?;
            log::info!("{} samples", samples.len());
            println!("{}", manifest.display());
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
