//! Command-line interface: data generation, pretraining, fine-tuning,
//! evaluation, inference, and the token-count benchmark.

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{
    generate_nlvr, generate_vqa, read_png, synthetic_vocabulary, Dataset, SceneConfig, SHAPES,
};
use crate::downstream::{
    eval_captions, eval_detection, eval_nlvr, eval_retrieval_pairwise, eval_retrieval_recall_at,
    eval_vqa, finetune_caption, finetune_nlvr, finetune_retrieval, finetune_vqa, FinetuneConfig,
    NlvrHead, RetrievalHead, TaskReport, VqaHead,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::VlpModel;
use crate::text::{detokenize, Vocabulary};
use crate::train::{StepMetrics, Trainer};
use crate::vision::{visual_token_count, ImageTensor};
use clap::{Parser, Subcommand, ValueEnum};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "gridvlp", version, about = "Grid-feature vision-language pretraining workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Task {
    Vqa,
    Nlvr,
    Caption,
    Retrieval,
    Detect,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset (index.jsonl + PNGs + vocab).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 3)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 3)]
        max_objects: usize,
    },
    /// Joint pretraining run; writes metrics.jsonl, resolved_config.json,
    /// vocab.txt, and model.ckpt under --out.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Built-in preset when no config file is given.
        #[arg(long, default_value = "desk_overfit")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        /// Print a metrics line every N steps (0 silences progress).
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Fine-tune a task head from a pretraining checkpoint.
    Finetune {
        #[arg(value_enum)]
        task: Task,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate a checkpoint on a task and emit a JSON report.
    Eval {
        #[arg(long, value_enum)]
        task: Option<Task>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Render loss curves from a metrics.jsonl file.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Run one image (optionally with text) through a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        caption: Option<String>,
        #[arg(long, value_enum, default_value = "caption")]
        task: Task,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long, default_value_t = 0.9)]
        alpha: f64,
    },
    /// Report visual token counts and encoder forward time per image size.
    BenchTokens {
        /// Comma-separated HxW sizes, e.g. 448x448,800x1333.
        #[arg(long, default_value = "448x448,800x1333")]
        sizes: String,
        /// Also time a forward pass per size.
        #[arg(long, action = clap::ArgAction::Set, default_value_t = true)]
        time: bool,
    },
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints its own usage/help text
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { out, count, seed, image_size, max_objects } => gen_data(&out, count, seed, image_size, max_objects),
        Command::Pretrain { config, preset, out, seed, data, steps, log_every } => {
            pretrain(config.as_deref(), &preset, &out, seed, data.as_deref(), steps, log_every)
        }
        Command::Finetune { task, checkpoint, out, data, seed, samples, epochs, lr } => {
            finetune(task, &checkpoint, &out, data.as_deref(), seed, samples, epochs, lr)
        }
        Command::Eval { task, checkpoint, data, out, seed, samples, plot } => {
            eval(task, checkpoint.as_deref(), data.as_deref(), out.as_deref(), seed, samples, plot.as_deref())
        }
        Command::Infer { checkpoint, image, caption, task, beam, alpha } => {
            infer(&checkpoint, &image, caption.as_deref(), task, beam, alpha)
        }
        Command::BenchTokens { sizes, time } => bench_tokens(&sizes, time),
    }
}

fn gen_data(out: &Path, count: usize, seed: u64, image_size: usize, max_objects: usize) -> Result<()> {
    let config = SceneConfig {
        image_size,
        max_objects,
        ..SceneConfig::default()
    };
    std::fs::create_dir_all(out)?;
    let ds = Dataset::generate(seed, count, config)?;
    ds.save(out)?;
    synthetic_vocabulary().save(&out.join("vocab.txt"))?;
    println!(
        "wrote {count} scenes ({} skipped placements) to {}",
        ds.scenes.iter().map(|s| s.skipped_placements).sum::<u32>(),
        out.display()
    );
    Ok(())
}

fn load_scenes(cfg: &RunConfig, data_dir: Option<&Path>) -> Result<Dataset> {
    match data_dir.map(|p| p.to_path_buf()).or_else(|| cfg.data.dataset_dir.as_ref().map(PathBuf::from)) {
        Some(dir) => Dataset::load(&dir),
        None => Dataset::generate(cfg.data.seed, cfg.data.scene_count, cfg.data.scene),
    }
}

#[allow(clippy::too_many_arguments)]
fn pretrain(
    config: Option<&Path>,
    preset: &str,
    out: &Path,
    seed: Option<u64>,
    data: Option<&Path>,
    steps: Option<u64>,
    log_every: u64,
) -> Result<()> {
    let mut cfg = match config {
        Some(path) => RunConfig::from_file(path)?,
        None => match preset {
            "desk_overfit" => RunConfig::desk_overfit(),
            "default" => RunConfig::default(),
            other => return Err(Error::Config(format!("unknown preset {other}"))),
        },
    };
    cfg.apply_env()?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    if let Some(s) = steps {
        cfg.schedule.max_steps = s;
    }
    cfg.validate()?;

    std::fs::create_dir_all(out)?;
    let dataset = load_scenes(&cfg, data)?;
    let vocab = synthetic_vocabulary();
    vocab.save(&out.join("vocab.txt"))?;
    cfg.save_resolved(&out.join("resolved_config.json"))?;

    let model = VlpModel::new(cfg.model.clone(), vocab.len(), cfg.data.seed)?;
    let mut trainer = Trainer::new(
        model,
        cfg.optimizer.clone(),
        cfg.trainer_options(),
        vocab,
        cfg.data.seed,
    );
    let mut metrics_file = std::io::BufWriter::new(std::fs::File::create(out.join("metrics.jsonl"))?);
    let started = Instant::now();
    trainer.train(&dataset.scenes, cfg.schedule.batch_size, cfg.schedule.max_steps, |m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        let _ = writeln!(metrics_file, "{line}");
        if log_every > 0 && m.step % log_every == 0 {
            println!(
                "step {:5}  mlm {:.4}  itm {:.4}  det {:.4}  cap {:.4}  total {:.4}",
                m.step, m.mlm, m.itm, m.detection, m.caption, m.total
            );
        }
    })?;
    metrics_file.flush()?;
    checkpoint::save(
        &out.join("model.ckpt"),
        &trainer.model.store,
        trainer.steps_done,
        trainer.optimizer.step_count,
        cfg.to_json(),
    )?;
    println!(
        "pretrained {} steps in {:.1}s; checkpoint at {}",
        trainer.steps_done,
        started.elapsed().as_secs_f64(),
        out.join("model.ckpt").display()
    );
    Ok(())
}

/// Rebuild the model architecture recorded inside a checkpoint.
fn model_from_checkpoint(path: &Path, vocab: &Vocabulary) -> Result<(VlpModel, RunConfig)> {
    let (header, _) = checkpoint::read(path)?;
    let cfg: RunConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| Error::Checkpoint(format!("checkpoint config does not parse: {e}")))?;
    let mut model = VlpModel::new(cfg.model.clone(), vocab.len(), cfg.data.seed)?;
    checkpoint::load_into(path, &mut model.store)?;
    Ok((model, cfg))
}

fn write_reports(out: Option<&Path>, reports: &[TaskReport]) -> Result<()> {
    let mut body = String::new();
    for r in reports {
        body.push_str(&serde_json::to_string(r)?);
        body.push('\n');
        println!("{}", serde_json::to_string(r)?);
    }
    if let Some(path) = out {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, body)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn finetune(
    task: Task,
    ckpt: &Path,
    out: &Path,
    data: Option<&Path>,
    seed: u64,
    samples: usize,
    epochs: Option<usize>,
    lr: Option<f64>,
) -> Result<()> {
    let vocab = synthetic_vocabulary();
    let (header, _) = checkpoint::read(ckpt)?;
    let run_cfg: RunConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| Error::Checkpoint(format!("checkpoint config does not parse: {e}")))?;
    let mut model = VlpModel::new(run_cfg.model.clone(), vocab.len(), run_cfg.data.seed)?;
    let dataset = load_scenes(&run_cfg, data)?;
    let mut ft = FinetuneConfig::default();
    if let Some(e) = epochs {
        ft.epochs = e;
    }
    if let Some(l) = lr {
        ft.lr = l;
    }
    std::fs::create_dir_all(out)?;
    let ckpt_tag = ckpt.display().to_string();

    let mut reports = Vec::new();
    match task {
        Task::Vqa => {
            let head = VqaHead::new(&mut model, seed);
            checkpoint::load_partial(ckpt, &mut model.store, &["head."])?;
            let qa = generate_vqa(&dataset.scenes, samples, seed);
            finetune_vqa(&mut model, &head, &dataset.scenes, &qa, &vocab, &ft, seed)?;
            let acc = eval_vqa(&model, &head, &dataset.scenes, &qa, &vocab)?;
            reports.push(TaskReport {
                task: "vqa".into(),
                metric: "accuracy".into(),
                value: acc,
                n_samples: qa.len(),
                checkpoint: ckpt_tag.clone(),
            });
        }
        Task::Nlvr => {
            let head = NlvrHead::new(&mut model, seed);
            checkpoint::load_partial(ckpt, &mut model.store, &["head."])?;
            let pairs = generate_nlvr(&dataset.scenes, samples, seed);
            finetune_nlvr(&mut model, &head, &dataset.scenes, &pairs, &vocab, &ft, seed)?;
            let acc = eval_nlvr(&model, &head, &dataset.scenes, &pairs, &vocab)?;
            reports.push(TaskReport {
                task: "nlvr".into(),
                metric: "accuracy".into(),
                value: acc,
                n_samples: pairs.len(),
                checkpoint: ckpt_tag.clone(),
            });
        }
        Task::Retrieval => {
            let head = RetrievalHead::new(&mut model, seed);
            checkpoint::load_partial(ckpt, &mut model.store, &["head."])?;
            finetune_retrieval(&mut model, &head, &dataset.scenes, &vocab, &ft, seed)?;
            let pairwise = eval_retrieval_pairwise(&model, &head, &dataset.scenes, &vocab)?;
            let r1 = eval_retrieval_recall_at(&model, &head, &dataset.scenes, &vocab, 1)?;
            reports.push(TaskReport {
                task: "retrieval".into(),
                metric: "pairwise_ranking_accuracy".into(),
                value: pairwise,
                n_samples: dataset.len() * (dataset.len() - 1),
                checkpoint: ckpt_tag.clone(),
            });
            reports.push(TaskReport {
                task: "retrieval".into(),
                metric: "recall_at_1".into(),
                value: r1,
                n_samples: dataset.len(),
                checkpoint: ckpt_tag.clone(),
            });
        }
        Task::Caption => {
            checkpoint::load_into(ckpt, &mut model.store)?;
            finetune_caption(&mut model, &dataset.scenes, &vocab, &ft, seed)?;
            let (exact, bleu) = eval_captions(&model, &dataset.scenes, &vocab)?;
            reports.push(TaskReport {
                task: "caption".into(),
                metric: "exact_match".into(),
                value: exact,
                n_samples: dataset.len(),
                checkpoint: ckpt_tag.clone(),
            });
            reports.push(TaskReport {
                task: "caption".into(),
                metric: "bleu4".into(),
                value: bleu,
                n_samples: dataset.len(),
                checkpoint: ckpt_tag.clone(),
            });
        }
        Task::Detect => {
            checkpoint::load_into(ckpt, &mut model.store)?;
            // continue the detection objective alone over the same pathway
            let opts = crate::train::TrainerOptions {
                losses: crate::model::LossToggles { mlm: false, itm: false, caption: false, detection: true },
                matched_fraction: 1.0,
                ..crate::train::TrainerOptions::default()
            };
            let mut trainer = Trainer::new(model, run_cfg.optimizer.clone(), opts, vocab.clone(), seed);
            let steps = (ft.epochs * dataset.len().div_ceil(ft.batch_size)) as u64;
            trainer.train(&dataset.scenes, ft.batch_size.min(dataset.len()), steps.max(1), |_| {})?;
            model = trainer.model;
            let ev = eval_detection(&model, &dataset.scenes, &vocab, true)?;
            reports.push(TaskReport {
                task: "detect".into(),
                metric: "map50".into(),
                value: ev.map50,
                n_samples: dataset.len(),
                checkpoint: ckpt_tag.clone(),
            });
        }
    }
    checkpoint::save(
        &out.join("model.ckpt"),
        &model.store,
        header.step,
        header.optimizer_step,
        header.config.clone(),
    )?;
    write_reports(Some(&out.join("report.jsonl")), &reports)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    task: Option<Task>,
    ckpt: Option<&Path>,
    data: Option<&Path>,
    out: Option<&Path>,
    seed: u64,
    samples: usize,
    plot: Option<&Path>,
) -> Result<()> {
    if let Some(metrics_path) = plot {
        return plot_metrics(metrics_path, out);
    }
    let task = task.ok_or_else(|| Error::Config("eval needs --task or --plot".into()))?;
    let ckpt = ckpt.ok_or_else(|| Error::Config("eval needs --checkpoint".into()))?;
    let vocab = synthetic_vocabulary();
    let ckpt_tag = ckpt.display().to_string();
    let mut reports = Vec::new();
    match task {
        Task::Detect => {
            let (model, run_cfg) = model_from_checkpoint(ckpt, &vocab)?;
            let dataset = load_scenes(&run_cfg, data)?;
            let ev = eval_detection(&model, &dataset.scenes, &vocab, true)?;
            for (metric, value) in [
                ("map50", ev.map50),
                ("map75", ev.map75),
                ("map50_small", ev.map50_small),
                ("map50_medium", ev.map50_medium),
                ("map50_large", ev.map50_large),
                ("attribute_accuracy", ev.attr_accuracy),
            ] {
                reports.push(TaskReport {
                    task: "detect".into(),
                    metric: metric.into(),
                    value,
                    n_samples: dataset.len(),
                    checkpoint: ckpt_tag.clone(),
                });
            }
            for (class, precision, n) in ev.per_class_precision50 {
                println!(
                    "class {:9} precision@0.5 {:.3} over {n} predictions",
                    SHAPES[class], precision
                );
            }
        }
        Task::Caption => {
            let (model, run_cfg) = model_from_checkpoint(ckpt, &vocab)?;
            let dataset = load_scenes(&run_cfg, data)?;
            let (exact, bleu) = eval_captions(&model, &dataset.scenes, &vocab)?;
            reports.push(TaskReport {
                task: "caption".into(),
                metric: "exact_match".into(),
                value: exact,
                n_samples: dataset.len(),
                checkpoint: ckpt_tag.clone(),
            });
            reports.push(TaskReport {
                task: "caption".into(),
                metric: "bleu4".into(),
                value: bleu,
                n_samples: dataset.len(),
                checkpoint: ckpt_tag.clone(),
            });
        }
        Task::Vqa => {
            let (header, _) = checkpoint::read(ckpt)?;
            let run_cfg: RunConfig = serde_json::from_value(header.config.clone())
                .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
            let mut model = VlpModel::new(run_cfg.model.clone(), vocab.len(), run_cfg.data.seed)?;
            let head = VqaHead::new(&mut model, seed);
            checkpoint::load_into(ckpt, &mut model.store)?;
            let dataset = load_scenes(&run_cfg, data)?;
            let qa = generate_vqa(&dataset.scenes, samples, seed);
            let acc = eval_vqa(&model, &head, &dataset.scenes, &qa, &vocab)?;
            reports.push(TaskReport {
                task: "vqa".into(),
                metric: "accuracy".into(),
                value: acc,
                n_samples: qa.len(),
                checkpoint: ckpt_tag.clone(),
            });
        }
        Task::Nlvr => {
            let (header, _) = checkpoint::read(ckpt)?;
            let run_cfg: RunConfig = serde_json::from_value(header.config.clone())
                .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
            let mut model = VlpModel::new(run_cfg.model.clone(), vocab.len(), run_cfg.data.seed)?;
            let head = NlvrHead::new(&mut model, seed);
            checkpoint::load_into(ckpt, &mut model.store)?;
            let dataset = load_scenes(&run_cfg, data)?;
            let pairs = generate_nlvr(&dataset.scenes, samples, seed);
            let acc = eval_nlvr(&model, &head, &dataset.scenes, &pairs, &vocab)?;
            reports.push(TaskReport {
                task: "nlvr".into(),
                metric: "accuracy".into(),
                value: acc,
                n_samples: pairs.len(),
                checkpoint: ckpt_tag.clone(),
            });
        }
        Task::Retrieval => {
            let (header, _) = checkpoint::read(ckpt)?;
            let run_cfg: RunConfig = serde_json::from_value(header.config.clone())
                .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
            let mut model = VlpModel::new(run_cfg.model.clone(), vocab.len(), run_cfg.data.seed)?;
            let head = RetrievalHead::new(&mut model, seed);
            checkpoint::load_into(ckpt, &mut model.store)?;
            let dataset = load_scenes(&run_cfg, data)?;
            let pairwise = eval_retrieval_pairwise(&model, &head, &dataset.scenes, &vocab)?;
            let r1 = eval_retrieval_recall_at(&model, &head, &dataset.scenes, &vocab, 1)?;
            reports.push(TaskReport {
                task: "retrieval".into(),
                metric: "pairwise_ranking_accuracy".into(),
                value: pairwise,
                n_samples: dataset.len() * (dataset.len() - 1),
                checkpoint: ckpt_tag.clone(),
            });
            reports.push(TaskReport {
                task: "retrieval".into(),
                metric: "recall_at_1".into(),
                value: r1,
                n_samples: dataset.len(),
                checkpoint: ckpt_tag.clone(),
            });
        }
    }
    write_reports(out, &reports)?;
    Ok(())
}

fn plot_metrics(metrics_path: &Path, out: Option<&Path>) -> Result<()> {
    let body = std::fs::read_to_string(metrics_path)?;
    let mut series: [Vec<f64>; 5] = Default::default();
    for line in body.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let m: StepMetrics = serde_json::from_str(line)?;
        series[0].push(m.mlm);
        series[1].push(m.itm);
        series[2].push(m.detection);
        series[3].push(m.caption);
        series[4].push(m.total);
    }
    let names = ["mlm", "itm", "detection", "caption", "total"];
    let plots: Vec<crate::plot::Series> = names
        .iter()
        .zip(series.iter())
        .zip(crate::plot::SERIES_COLORS)
        .map(|((name, values), color)| crate::plot::Series { name, values, color })
        .collect();
    let target = out
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| metrics_path.with_file_name("loss_curves.png"));
    crate::plot::plot_series(&target, &plots)?;
    println!(
        "plotted {} steps ({}) to {}",
        series[0].len(),
        names.join(", "),
        target.display()
    );
    Ok(())
}

fn infer(ckpt: &Path, image: &Path, caption: Option<&str>, task: Task, beam: usize, alpha: f64) -> Result<()> {
    let vocab = synthetic_vocabulary();
    let (model, _) = model_from_checkpoint(ckpt, &vocab)?;
    let (rgb, w, h) = read_png(image)?;
    let img = ImageTensor::from_rgb8(&rgb, h, w)?;
    match task {
        Task::Caption => {
            let ids = if beam <= 1 {
                model.caption_greedy(&img, &vocab)?
            } else {
                model.caption_beam(&img, &vocab, beam, alpha)?
            };
            println!("{}", detokenize(&ids, &vocab));
        }
        Task::Detect => {
            let preds = model.detect_scene(&mut Graph::inference(), &img, caption, &vocab)?;
            let mut out = Vec::new();
            for (probs, b) in preds.class_probs.iter().zip(&preds.boxes) {
                let real = &probs[..probs.len() - 1];
                let (class, &score) = real
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .expect("classes");
                if score > probs[probs.len() - 1] {
                    out.push(serde_json::json!({
                        "class": SHAPES[class],
                        "score": score,
                        "box": b,
                    }));
                }
            }
            println!("{}", serde_json::to_string_pretty(&serde_json::Value::Array(out))?);
        }
        _ => {
            return Err(Error::Config(
                "infer supports caption and detect; classification tasks need finetuned heads via eval".into(),
            ))
        }
    }
    Ok(())
}

fn bench_tokens(sizes: &str, time: bool) -> Result<()> {
    let parsed: Vec<(usize, usize)> = sizes
        .split(',')
        .map(|s| {
            let (h, w) = s
                .trim()
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("size {s} is not HxW")))?;
            Ok((
                h.parse().map_err(|_| Error::Config(format!("bad height in {s}")))?,
                w.parse().map_err(|_| Error::Config(format!("bad width in {s}")))?,
            ))
        })
        .collect::<Result<_>>()?;
    let vocab = synthetic_vocabulary();
    let model = if time {
        Some(VlpModel::new(crate::model::ModelConfig::desk(), vocab.len(), 0)?)
    } else {
        None
    };
    for (h, w) in parsed {
        let tokens = visual_token_count(h, w);
        if let Some(model) = &model {
            let rgb = vec![127u8; h * w * 3];
            let img = ImageTensor::from_rgb8(&rgb, h, w)?;
            let seq = model.empty_text(&vocab)?;
            let started = Instant::now();
            let mut g = Graph::inference();
            let _ = model.encode_pair(&mut g, &seq, &img)?;
            let ms = started.elapsed().as_secs_f64() * 1e3;
            println!("{h}x{w}: {tokens} visual tokens, encoder forward {ms:.1} ms");
        } else {
            println!("{h}x{w}: {tokens} visual tokens");
        }
    }
    Ok(())
}
