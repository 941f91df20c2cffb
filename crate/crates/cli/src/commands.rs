use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use vidclass_core::featureio::{generate_synthetic, Dataset, DatasetHeader, SyntheticSpec};
use vidclass_core::losses::HuberParams;
use vidclass_core::metrics::{gap, miss_analysis, GapConfig, GroundTruth, MissReport, PredictionSet};
use vidclass_core::netmodel::{init_model, ModalityMode, Model, ModelConfig, PoolingKind};
use vidclass_core::optim::OptimizerKind;
use vidclass_core::rebalance::{build_hard_subset, build_tail_subset, label_frequency_stats, LabelStats};
use vidclass_core::schedule::{emit_curve, ScheduleParams};
use vidclass_core::trainer::{
    curve_csv, load_checkpoint, run_phases, save_checkpoint, CurvePoint, Phase, PhasePlan, PreparedSet, Split,
    TrainConfig, Trainer,
};

use crate::config::{config_err, resolve, CliError};
use crate::csvio::{fmt_epoch, read_predictions, read_truth, write_predictions, write_table};
use crate::{EvalFlags, GenFlags, Globals, LrCurveFlags, RebalanceFlags, StatsFlags, TrainFlags};

fn banner(command: &str, settings: &Value) {
    eprintln!("{}", serde_json::json!({ "command": command, "config": settings }));
}

fn required<'a>(v: &'a Option<PathBuf>, what: &str) -> anyhow::Result<&'a Path> {
    v.as_deref().ok_or_else(|| config_err(format!("missing required setting {what}")))
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(path).map_err(|e| match e {
        vidclass_core::Error::Io(io) => CliError::new("io", format!("{}: {io}", path.display())).into(),
        other => anyhow::Error::new(other).context(path.display().to_string()),
    })
}

fn parse_enum<T: serde::de::DeserializeOwned>(value: &str, what: &str) -> anyhow::Result<T> {
    serde_json::from_value(Value::String(value.to_string()))
        .map_err(|_| config_err(format!("unknown {what} \"{value}\"")))
}

fn same_dims(a: &DatasetHeader, b: &DatasetHeader) -> bool {
    (a.d_video, a.d_audio, a.vocab_size) == (b.d_video, b.d_audio, b.vocab_size)
}

fn dims(h: &DatasetHeader) -> String {
    format!("d_video={} d_audio={} vocab={}", h.d_video, h.d_audio, h.vocab_size)
}

fn mismatch(message: String) -> anyhow::Error {
    CliError::new("mismatch", message).into()
}

// ---------------------------------------------------------------- gen

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenConfig {
    out: Option<PathBuf>,
    videos: usize,
    vocab: u32,
    d_video: u32,
    d_audio: u32,
    frames_min: u32,
    frames_max: u32,
    labels_min: u32,
    labels_max: u32,
    imbalance: f64,
    noise: f64,
    label_noise: f64,
    seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            out: None,
            videos: s.num_videos,
            vocab: s.vocab_size,
            d_video: s.d_video,
            d_audio: s.d_audio,
            frames_min: s.frames_min,
            frames_max: s.frames_max,
            labels_min: s.labels_min,
            labels_max: s.labels_max,
            imbalance: s.imbalance_exponent,
            noise: s.noise_scale,
            label_noise: s.label_noise,
            seed: s.seed,
        }
    }
}

pub fn gen(g: &Globals, flags: &GenFlags) -> anyhow::Result<()> {
    let (c, settings): (GenConfig, _) = resolve(&g.file, "gen", flags, g.seed)?;
    banner("gen", &settings);
    let out = required(&c.out, "out")?;
    let spec = SyntheticSpec {
        num_videos: c.videos,
        vocab_size: c.vocab,
        d_video: c.d_video,
        d_audio: c.d_audio,
        frames_min: c.frames_min,
        frames_max: c.frames_max,
        labels_min: c.labels_min,
        labels_max: c.labels_max,
        imbalance_exponent: c.imbalance,
        noise_scale: c.noise,
        label_noise: c.label_noise,
        seed: c.seed,
    };
    let ds = generate_synthetic(&spec)?.dataset;
    let bytes = ds.save(out)?;
    println!("wrote {} videos ({bytes} bytes) to {}", ds.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------- stats

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsConfig {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    head_fraction: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self { data: None, out: None, head_fraction: 0.2 }
    }
}

fn stats_rows(s: &LabelStats) -> Vec<Vec<String>> {
    s.rows()
        .map(|(rank, label, count, cov)| vec![rank.to_string(), label.to_string(), count.to_string(), cov.to_string()])
        .collect()
}

pub fn stats(g: &Globals, flags: &StatsFlags) -> anyhow::Result<()> {
    let (c, settings): (StatsConfig, _) = resolve(&g.file, "stats", flags, g.seed)?;
    banner("stats", &settings);
    if !(c.head_fraction > 0.0 && c.head_fraction <= 1.0) {
        return Err(config_err("head_fraction must lie in (0, 1]"));
    }
    let ds = load_dataset(required(&c.data, "data")?)?;
    let s = label_frequency_stats(&ds.records, ds.header.vocab_size)?;
    write_table(c.out.as_deref(), LabelStats::CSV_HEADER, &stats_rows(&s))?;
    let k = ((c.head_fraction * s.ranked.len() as f64).round() as usize).max(1);
    eprintln!(
        "{} videos, {} label instances; top {k} of {} labels cover {:.4}",
        ds.len(),
        s.total,
        s.ranked.len(),
        s.coverage_top(k)
    );
    Ok(())
}

// ---------------------------------------------------------------- rebalance

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RebalanceConfig {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    mode: String,
    rank_threshold: Option<usize>,
    multiplier: usize,
}

impl Default for RebalanceConfig {
    fn default() -> Self {
        Self { data: None, out: None, mode: "tail".into(), rank_threshold: None, multiplier: 3 }
    }
}

pub fn rebalance(g: &Globals, flags: &RebalanceFlags) -> anyhow::Result<()> {
    let (c, settings): (RebalanceConfig, _) = resolve(&g.file, "rebalance", flags, g.seed)?;
    banner("rebalance", &settings);
    let out = required(&c.out, "out")?;
    let ds = load_dataset(required(&c.data, "data")?)?;
    let subset = match c.mode.as_str() {
        "tail" => {
            let theta = c.rank_threshold.ok_or_else(|| config_err("tail mode needs rank_threshold"))?;
            ds.with_records(&build_tail_subset(&ds, theta)?)
        }
        "hard" => ds.with_records(&build_hard_subset(&ds.records, c.multiplier)?),
        other => return Err(config_err(format!("unknown mode \"{other}\" (expected tail or hard)"))),
    };
    subset.save(out)?;
    println!("wrote {} of {} videos to {}", subset.len(), ds.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainCliConfig {
    data: Option<PathBuf>,
    val: Option<PathBuf>,
    phases: Vec<String>,
    checkpoint: Option<PathBuf>,
    curve: Option<PathBuf>,
    resume: Option<PathBuf>,
    pooling: String,
    clusters: usize,
    audio_clusters: Option<usize>,
    hidden: usize,
    modality: String,
    batch_size: usize,
    epochs: f64,
    eval_every: f64,
    initial_lr: f64,
    decay: f64,
    decay_per_epoch: f64,
    staircase: bool,
    delta: f64,
    optimizer: String,
    top_n: usize,
    seed: u64,
}

impl Default for TrainCliConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            data: None,
            val: None,
            phases: Vec::new(),
            checkpoint: None,
            curve: None,
            resume: None,
            pooling: "netvlad".into(),
            clusters: 8,
            audio_clusters: None,
            hidden: 64,
            modality: "separate".into(),
            batch_size: t.batch_size,
            epochs: t.epoch_budget,
            eval_every: t.eval_every,
            initial_lr: t.schedule.initial_lr,
            decay: t.schedule.decay,
            decay_per_epoch: t.schedule.decay_per_epoch,
            staircase: t.schedule.staircase,
            delta: t.loss.delta,
            optimizer: "adam".into(),
            top_n: t.top_n,
            seed: t.seed,
        }
    }
}

fn parse_phase(spec: &str) -> anyhow::Result<(PathBuf, f64)> {
    let (path, epochs) = spec
        .rsplit_once(':')
        .ok_or_else(|| config_err(format!("phase \"{spec}\" is not PATH:EPOCHS")))?;
    let epochs: f64 = epochs
        .parse()
        .map_err(|_| config_err(format!("phase \"{spec}\" has a non-numeric epoch budget")))?;
    Ok((PathBuf::from(path), epochs))
}

fn print_curve(curve: &[CurvePoint]) {
    for p in curve {
        eprintln!("epoch {:.4} {} gap {:.6} loss {:.6} lr {:.3e}", p.epoch, p.split, p.gap, p.loss, p.lr);
    }
}

pub fn train(g: &Globals, flags: &TrainFlags) -> anyhow::Result<()> {
    let (c, settings): (TrainCliConfig, _) = resolve(&g.file, "train", flags, g.seed)?;
    banner("train", &settings);

    let mut sets: Vec<(Dataset, f64)> = Vec::new();
    if c.phases.is_empty() {
        sets.push((load_dataset(required(&c.data, "data")?)?, c.epochs));
    } else {
        if c.data.is_some() {
            return Err(config_err("give either data or phases, not both"));
        }
        if c.resume.is_some() {
            return Err(config_err("resume applies to single-set training only"));
        }
        for p in &c.phases {
            let (path, epochs) = parse_phase(p)?;
            sets.push((load_dataset(&path)?, epochs));
        }
    }
    let header = sets[0].0.header;
    if let Some((bad, _)) = sets.iter().find(|(d, _)| !same_dims(&d.header, &header)) {
        return Err(mismatch(format!("training sets disagree: {} vs {}", dims(&header), dims(&bad.header))));
    }
    let val = match &c.val {
        Some(p) => {
            let v = load_dataset(p)?;
            if !same_dims(&v.header, &header) {
                return Err(mismatch(format!("validation set {} vs training {}", dims(&v.header), dims(&header))));
            }
            Some(PreparedSet::new(&v.records, header.vocab_size as usize)?)
        }
        None => None,
    };

    let tc = TrainConfig {
        batch_size: c.batch_size,
        epoch_budget: c.epochs,
        eval_every: c.eval_every,
        seed: c.seed,
        schedule: ScheduleParams {
            initial_lr: c.initial_lr,
            decay: c.decay,
            decay_per_epoch: c.decay_per_epoch,
            staircase: c.staircase,
        },
        loss: HuberParams { delta: c.delta },
        optimizer: parse_enum::<OptimizerKind>(&c.optimizer, "optimizer")?,
        top_n: c.top_n,
    };
    let (d_video, d_audio, vocab) = (header.d_video as usize, header.d_audio as usize, header.vocab_size as usize);

    let mut trainer = match &c.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path).map_err(|e| anyhow::Error::new(e).context(path.display().to_string()))?;
            let m = &ckpt.model.config;
            if (m.d_video, m.d_audio, m.vocab_size) != (d_video, d_audio, vocab) {
                return Err(mismatch(format!(
                    "checkpoint expects d_video={} d_audio={} vocab={}, data has {}",
                    m.d_video,
                    m.d_audio,
                    m.vocab_size,
                    dims(&header)
                )));
            }
            if ckpt.num_videos != sets[0].0.len() as u64 {
                return Err(mismatch(format!(
                    "checkpoint was taken on {} videos, data has {}",
                    ckpt.num_videos,
                    sets[0].0.len()
                )));
            }
            eprintln!("resuming at step {} (epoch {:.4}) with the checkpoint's training settings", ckpt.step, ckpt.epoch_fraction);
            Trainer::from_checkpoint(ckpt)?
        }
        None => {
            let pooling_kind = parse_enum::<PoolingKind>(&c.pooling, "pooling")?;
            let modality_mode = parse_enum::<ModalityMode>(&c.modality, "modality")?;
            let mut cfg = ModelConfig::new(pooling_kind, c.clusters, c.hidden, d_video, d_audio, vocab);
            cfg.modality_mode = modality_mode;
            if let Some(ka) = c.audio_clusters {
                cfg.audio_cluster_size = ka;
            }
            Trainer::new(init_model(&cfg, c.seed)?, tc)?
        }
    };

    let plan = PhasePlan {
        phases: sets
            .iter()
            .map(|(d, epochs)| Ok(Phase { data: PreparedSet::new(&d.records, vocab)?, epoch_budget: *epochs }))
            .collect::<anyhow::Result<Vec<_>>>()?,
    };
    let curve = if c.resume.is_some() {
        let ph = &plan.phases[0];
        trainer.run(&ph.data, val.as_ref(), ph.epoch_budget, None)?
    } else {
        run_phases(&mut trainer, &plan, val.as_ref())?.0
    };
    if g.verbose > 0 {
        print_curve(&curve);
    }

    if let Some(path) = &c.curve {
        std::fs::write(path, curve_csv(&curve)).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
    }
    if let Some(path) = &c.checkpoint {
        let n = plan.phases.last().unwrap().data.len();
        save_checkpoint(path, &trainer.checkpoint(n))?;
    }
    let last = |split: Split| curve.iter().rev().find(|p| p.split == split);
    if let Some(p) = last(Split::Train) {
        println!("train GAP {:.7} at epoch {:.4}", p.gap, p.epoch);
    }
    if let Some(p) = last(Split::Val) {
        println!("val GAP {:.7} at epoch {:.4}", p.gap, p.epoch);
    }
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalConfig {
    predictions: Option<PathBuf>,
    truth: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    top_n: usize,
    predictions_out: Option<PathBuf>,
    miss_report: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            predictions: None,
            truth: None,
            checkpoint: None,
            data: None,
            top_n: 20,
            predictions_out: None,
            miss_report: None,
        }
    }
}

fn model_predictions(model: &Model, ds: &Dataset, top_n: usize) -> anyhow::Result<PredictionSet> {
    let m = &model.config;
    if (m.d_video, m.d_audio, m.vocab_size)
        != (ds.header.d_video as usize, ds.header.d_audio as usize, ds.header.vocab_size as usize)
    {
        return Err(mismatch(format!(
            "checkpoint expects d_video={} d_audio={} vocab={}, data has {}",
            m.d_video,
            m.d_audio,
            m.vocab_size,
            dims(&ds.header)
        )));
    }
    let ids: Vec<String> = ds.records.iter().map(|r| r.id_str()).collect();
    let mut probs = ndarray::Array2::<f64>::zeros((ds.len(), m.vocab_size));
    for (chunk, start) in ds.records.chunks(256).zip((0..).step_by(256)) {
        let frames: Vec<_> = chunk.iter().map(|r| r.frames_f64()).collect();
        let (p, _) = model.forward(&frames)?;
        probs.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&p);
    }
    Ok(PredictionSet::from_probabilities(&ids, &probs, top_n)?)
}

fn truth_of(ds: &Dataset) -> GroundTruth {
    ds.records.iter().map(|r| (r.id_str(), r.labels.iter().copied().collect())).collect()
}

pub fn eval(g: &Globals, flags: &EvalFlags) -> anyhow::Result<()> {
    let (c, settings): (EvalConfig, _) = resolve(&g.file, "eval", flags, g.seed)?;
    banner("eval", &settings);
    let data = c.data.as_deref().map(load_dataset).transpose()?;
    let preds = match (&c.predictions, &c.checkpoint) {
        (Some(p), None) => read_predictions(p)?,
        (None, Some(ck)) => {
            let ds = data.as_ref().ok_or_else(|| config_err("checkpoint evaluation needs data"))?;
            let ckpt = load_checkpoint(ck).map_err(|e| anyhow::Error::new(e).context(ck.display().to_string()))?;
            model_predictions(&ckpt.model, ds, c.top_n)?
        }
        (Some(_), Some(_)) => return Err(config_err("give either predictions or checkpoint, not both")),
        (None, None) => return Err(config_err("missing required setting predictions or checkpoint")),
    };
    let truth = match (&c.truth, &data) {
        (Some(t), _) => read_truth(t)?,
        (None, Some(ds)) => truth_of(ds),
        (None, None) => return Err(config_err("missing required setting truth or data")),
    };
    let gcfg = GapConfig { n: c.top_n };
    let score = gap(&preds, &truth, &gcfg)?;
    let report = miss_analysis(&preds, &truth, &gcfg)?;
    if let Some(path) = &c.predictions_out {
        write_predictions(path, &preds)?;
    }
    if let Some(path) = &c.miss_report {
        let rows: Vec<Vec<String>> = report.csv_rows().into_iter().map(|(b, n)| vec![b, n.to_string()]).collect();
        write_table(Some(path), MissReport::CSV_HEADER, &rows)?;
    }
    println!("GAP {score:.7}");
    println!("{report}");
    Ok(())
}

// ---------------------------------------------------------------- lr-curve

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LrCurveConfig {
    preset: String,
    initial_lr: Option<f64>,
    decay: Option<f64>,
    decay_per_epoch: Option<f64>,
    staircase: Option<bool>,
    epochs: f64,
    step: f64,
    out: Option<PathBuf>,
}

impl Default for LrCurveConfig {
    fn default() -> Self {
        Self {
            preset: "tuned".into(),
            initial_lr: None,
            decay: None,
            decay_per_epoch: None,
            staircase: None,
            epochs: 3.0,
            step: 0.1,
            out: None,
        }
    }
}

pub fn lr_curve(g: &Globals, flags: &LrCurveFlags) -> anyhow::Result<()> {
    let (c, settings): (LrCurveConfig, _) = resolve(&g.file, "lr_curve", flags, g.seed)?;
    banner("lr-curve", &settings);
    let base = match c.preset.as_str() {
        "tuned" => ScheduleParams::TUNED,
        "baseline" => ScheduleParams::BASELINE,
        other => return Err(config_err(format!("unknown preset \"{other}\" (expected tuned or baseline)"))),
    };
    let params = ScheduleParams {
        initial_lr: c.initial_lr.unwrap_or(base.initial_lr),
        decay: c.decay.unwrap_or(base.decay),
        decay_per_epoch: c.decay_per_epoch.unwrap_or(base.decay_per_epoch),
        staircase: c.staircase.unwrap_or(base.staircase),
    };
    let rows: Vec<Vec<String>> = emit_curve(&params, c.epochs, c.step)?
        .into_iter()
        .map(|(e, lr)| vec![fmt_epoch(e), format!("{lr:.10}")])
        .collect();
    write_table(c.out.as_deref(), "epoch,lr", &rows)
}
