//! The subcommands, as library functions returning their reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use tpr_core::budget::{flops_report, FlopsReport};
use tpr_core::cpr::{build_space, static_cost, SpaceKind};
use tpr_core::gate::encode_pgm;
use tpr_synthlab::bench::{predict, report};
use tpr_synthlab::data::{load_dataset, save_dataset};
use tpr_synthlab::metrics::oracle_predictions;
use tpr_synthlab::*;

use crate::config::RunConfig;

pub const CHECKPOINT: &str = "model.tpr";
pub const METRIC_LOG: &str = "metrics.jsonl";
pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub params: usize,
}

/// Trains on the configured synthetic set and writes the checkpoint, the
/// per-step log and the resolved config into `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> anyhow::Result<TrainSummary> {
    fs::create_dir_all(out).with_context(|| format!("cannot create run dir {}", out.display()))?;
    let clips = gen_dataset(&cfg.synth)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    model.check_dataset(&cfg.synth)?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml()?)?;
    let mut log = BufWriter::new(fs::File::create(out.join(METRIC_LOG))?);
    let mut io_err = None;
    let records = train(&mut model, &cfg.protocol, &clips, cfg.seed, |r| {
        if io_err.is_none() {
            let line = serde_json::to_string(r).map_err(std::io::Error::other);
            if let Err(e) = line.and_then(|l| writeln!(log, "{l}")) {
                io_err = Some(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing the metric log");
    }
    log.flush()?;
    model.store.save(out.join(CHECKPOINT))?;
    Ok(TrainSummary {
        steps: records.len(),
        first_loss: records.first().map_or(f64::NAN, |r| r.loss),
        last_loss: records.last().map_or(f64::NAN, |r| r.loss),
        params: model.store.num_scalars(),
    })
}

/// Writes the training set, or the held-out set with `eval`.
pub fn cmd_data(cfg: &RunConfig, out: &Path, eval: bool) -> anyhow::Result<usize> {
    let synth = if eval { cfg.eval_synth() } else { cfg.synth.clone() };
    let clips = gen_dataset(&synth)?;
    save_dataset(out, &synth, &clips)?;
    Ok(clips.len())
}

/// Loads `model.tpr` with the config resolved at training time.
pub fn load_run(run: &Path) -> anyhow::Result<(RunConfig, Model)> {
    if !run.join(RESOLVED_CONFIG).exists() {
        bail!("{} is not a run directory (no {RESOLVED_CONFIG})", run.display());
    }
    let cfg = crate::config::load_run(run)?;
    let ckpt = run.join(CHECKPOINT);
    if !ckpt.exists() {
        bail!("no checkpoint at {}", ckpt.display());
    }
    let model = Model::load(cfg.model.clone(), &ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok((cfg, model))
}

fn load_for(model: &Model, data: &Path) -> anyhow::Result<Vec<Clip>> {
    let (synth, clips) = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    model
        .check_dataset(&synth)
        .with_context(|| format!("checkpoint does not fit dataset {}", data.display()))?;
    Ok(clips)
}

fn infer_opts(cfg: &RunConfig, reference: Option<ReferenceMode>) -> InferOptions {
    InferOptions {
        reference: reference.unwrap_or(cfg.eval.reference),
        ..InferOptions::default()
    }
}

/// Metrics of a trained run on a saved dataset; `run = None` scores the
/// ground truth against itself.
pub fn cmd_eval(run: Option<&Path>, data: &Path, reference: Option<ReferenceMode>) -> anyhow::Result<EvalReport> {
    match run {
        Some(run) => {
            let (cfg, model) = load_run(run)?;
            let clips = load_for(&model, data)?;
            Ok(evaluate_model(&model, &clips, infer_opts(&cfg, reference))?)
        }
        None => {
            let (_, clips) = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
            let preds: Vec<_> = clips.iter().map(|c| oracle_predictions(&c.gt)).collect();
            Ok(report(&clips, &preds)?)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateCost {
    pub gate_id: String,
    pub layer_id: String,
    /// Mean executed MACs per frame.
    pub b: f64,
    pub c: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsTable {
    pub gates: Vec<GateCost>,
    pub frames: usize,
    pub report: FlopsReport,
}

pub fn cmd_flops(run: &Path, data: &Path, reference: Option<ReferenceMode>) -> anyhow::Result<FlopsTable> {
    let (cfg, model) = load_run(run)?;
    let clips = load_for(&model, data)?;
    let preds = predict(&model, &clips, infer_opts(&cfg, reference))?;
    let mut sums: BTreeMap<(String, String), (f64, f64)> = BTreeMap::new();
    let mut frames = 0usize;
    for f in preds.iter().flat_map(|p| &p.frames) {
        frames += 1;
        for r in &f.ledger {
            let s = sums.entry((r.gate_id.clone(), r.layer_id.clone())).or_default();
            s.0 += r.b;
            s.1 += r.c;
        }
    }
    let n = frames.max(1) as f64;
    let gates = sums
        .into_iter()
        .map(|((gate_id, layer_id), (b, c))| GateCost {
            gate_id,
            layer_id,
            b: b / n,
            c: c / n,
            ratio: if c > 0.0 { b / c } else { 0.0 },
        })
        .collect();
    let costs: Vec<Vec<_>> = preds.iter().map(|p| p.frames.iter().map(|f| f.cost).collect()).collect();
    Ok(FlopsTable {
        gates,
        frames,
        report: flops_report(&costs)?,
    })
}

/// Writes one PGM per gate map of frame `frame` of clip `clip`.
pub fn cmd_gates(run: &Path, data: &Path, clip: usize, frame: usize, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let (cfg, model) = load_run(run)?;
    let clips = load_for(&model, data)?;
    let Some(c) = clips.get(clip) else {
        bail!("dataset {} has {} clips, no clip {clip}", data.display(), clips.len());
    };
    if frame >= c.frames.len() {
        bail!("clip {clip} has {} frames, no frame {frame}", c.frames.len());
    }
    let opts = InferOptions {
        dump_gates: true,
        ..infer_opts(&cfg, None)
    };
    let pred = infer_clip(&model, &c.frames[..=frame], opts)?;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for g in &pred.frames[frame].gates {
        let path = out.join(format!("{}.pgm", g.name));
        fs::write(&path, encode_pgm(g.width, g.height, &g.pixels))?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateRow {
    pub space: SpaceKind,
    /// Gated MACs of the space with every gate open, at the dataset shape.
    pub static_macs: u64,
    pub eval: Option<EvalReport>,
}

/// Swaps the routing space of `cfg` and, unless `static_only`, trains and
/// evaluates each variant.
pub fn cmd_ablate(cfg: &RunConfig, spaces: &[SpaceKind], static_only: bool) -> anyhow::Result<Vec<AblateRow>> {
    let shapes = cfg.model.backbone.level_shapes(cfg.synth.height, cfg.synth.width);
    let (train_clips, eval_clips) = if static_only {
        (Vec::new(), Vec::new())
    } else {
        (gen_dataset(&cfg.synth)?, gen_dataset(&cfg.eval_synth())?)
    };
    let mut rows = Vec::with_capacity(spaces.len());
    for &kind in spaces {
        let mut model_cfg = cfg.model.clone();
        model_cfg.space.kind = kind;
        let space = build_space(kind, model_cfg.backbone.levels, &model_cfg.space.depths)?;
        let static_macs = static_cost(&space, &shapes, model_cfg.backbone.channels);
        let eval = if static_only {
            None
        } else {
            let mut model = Model::new(model_cfg, cfg.seed)?;
            train(&mut model, &cfg.protocol, &train_clips, cfg.seed, |_| {})?;
            Some(evaluate_model(&model, &eval_clips, infer_opts(cfg, None))?)
        };
        rows.push(AblateRow { space: kind, static_macs, eval });
    }
    Ok(rows)
}

pub fn eval_table(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<10} {:>8} {:>10} {:>10} {:>6} {:>6}", "subset", "st_mAP", "assoc_acc", "frame_iou", "links", "tubes");
    for (name, m) in [("all", &r.all), ("overlap", &r.overlap)] {
        let _ = writeln!(
            s,
            "{:<10} {:>8.4} {:>10.4} {:>10.4} {:>6} {:>6}",
            name, m.st_map, m.association_accuracy, m.mean_frame_iou, m.gt_links, m.gt_tubes
        );
    }
    let _ = writeln!(s, "overlap clips: {}", r.overlap_clips);
    s + &flops_line(&r.flops)
}

fn flops_line(f: &FlopsReport) -> String {
    format!(
        "MACs/frame over {} clips: min {:.4}G avg {:.4}G max {:.4}G\n",
        f.clips,
        f.min / 1e9,
        f.avg / 1e9,
        f.max / 1e9
    )
}

pub fn flops_table(t: &FlopsTable) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<22} {:<16} {:>14} {:>14} {:>7}", "gate", "layer", "B/frame", "C/frame", "B/C");
    for g in &t.gates {
        let _ = writeln!(s, "{:<22} {:<16} {:>14.0} {:>14.0} {:>7.4}", g.gate_id, g.layer_id, g.b, g.c, g.ratio);
    }
    s + &flops_line(&t.report)
}

pub fn ablate_table(rows: &[AblateRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<13} {:>12} {:>8} {:>10} {:>12}", "space", "static_MACs", "st_mAP", "assoc_acc", "avg_GMACs");
    for r in rows {
        let _ = match &r.eval {
            Some(e) => writeln!(
                s,
                "{:<13} {:>12} {:>8.4} {:>10.4} {:>12.4}",
                r.space.name(),
                r.static_macs,
                e.all.st_map,
                e.all.association_accuracy,
                e.flops.avg / 1e9
            ),
            None => writeln!(s, "{:<13} {:>12} {:>8} {:>10} {:>12}", r.space.name(), r.static_macs, "-", "-", "-"),
        };
    }
    s
}
