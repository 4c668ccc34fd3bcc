//! Optimization loop, evaluation helpers, and the ablation harness.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assignment::{collision_stats, CollisionStats};
use crate::error::{MatrError, Result};
use crate::geometry::NormBox;
use crate::losses::{clip_loss, LossConfig, LossReport};
use crate::metrics::{evaluate_sequence, MetricsReport};
use crate::model::{forward_clip, ClipOptions, Model, ModelConfig, TrackUpdateKind};
use crate::nn::{clip_grad_norm, AdamW};
use crate::synthdata::SequenceClip;
use crate::tape::{Mat, Tape};
use crate::tracker::{run as run_tracker, TrackerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainMode {
    Matr,
    BlImpOnly,
    QimLike,
    Klf,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [TrainMode::Matr, TrainMode::BlImpOnly, TrainMode::QimLike, TrainMode::Klf];

    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Matr => "matr",
            TrainMode::BlImpOnly => "bl_imp_only",
            TrainMode::QimLike => "qim_like",
            TrainMode::Klf => "klf",
        }
    }

    pub fn track_update(&self) -> TrackUpdateKind {
        match self {
            TrainMode::Matr => TrackUpdateKind::Mat,
            TrainMode::BlImpOnly => TrackUpdateKind::Passthrough,
            TrainMode::QimLike => TrackUpdateKind::Qim,
            TrainMode::Klf => TrackUpdateKind::Klf,
        }
    }

    /// Only the motion-aware update produces boxes to supervise.
    pub fn uses_trajectory_loss(&self) -> bool {
        *self == TrainMode::Matr
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = MatrError;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| MatrError::Config(format!("unknown train mode '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub clip_length: usize,
    pub max_stride: usize,
    pub dropout: f64,
    pub iou_threshold: f64,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: 2e-4,
            weight_decay: 1e-4,
            grad_clip: 0.1,
            clip_length: 5,
            max_stride: 4,
            dropout: 0.1,
            iou_threshold: 0.5,
            seed: 0,
            mode: TrainMode::Matr,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MatrError::Config(m));
        if self.steps == 0 {
            return fail("train.steps must be at least 1".into());
        }
        if self.clip_length == 0 {
            return fail("train.clip_length must be at least 1".into());
        }
        if self.clip_length < 2 && self.mode != TrainMode::BlImpOnly {
            return fail(format!("train.clip_length must be >= 2 in {} mode", self.mode));
        }
        if self.max_stride == 0 {
            return fail("train.max_stride must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("train.lr must be positive, got {}", self.lr));
        }
        if !(self.grad_clip > 0.0) {
            return fail(format!("train.grad_clip must be positive, got {}", self.grad_clip));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return fail(format!("train.dropout must be in [0, 1], got {}", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return fail(format!("train.iou_threshold must be in [0, 1], got {}", self.iou_threshold));
        }
        if self.weight_decay < 0.0 {
            return fail("train.weight_decay must be >= 0".into());
        }
        Ok(())
    }
}

/// Picks a sequence, a stride, and a start frame for one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipSample {
    pub sequence: usize,
    pub start: usize,
    pub stride: usize,
}

pub fn sample_clip<R: Rng>(dataset: &[SequenceClip], length: usize, max_stride: usize, rng: &mut R) -> Result<ClipSample> {
    let sequence = rng.random_range(0..dataset.len());
    let len = dataset[sequence].len();
    if len < length {
        return Err(MatrError::Input(format!(
            "sequence {sequence} has {len} frames, need at least {length}"
        )));
    }
    let widest = if length > 1 { (len - 1) / (length - 1) } else { max_stride };
    let stride = rng.random_range(1..=max_stride.min(widest).max(1));
    let span = stride * (length - 1);
    let start = rng.random_range(0..len - span);
    Ok(ClipSample { sequence, start, stride })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<LossReport>,
    pub mat_invocations: usize,
    pub trajectory_evaluations: usize,
    /// Largest global gradient norm after clipping, over all steps.
    pub max_clipped_norm: f64,
}

impl TrainOutcome {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from(LossReport::CSV_HEADER);
        s.push('\n');
        for (i, r) in self.log.iter().enumerate() {
            s.push_str(&r.csv_row(i));
            s.push('\n');
        }
        s
    }
}

/// Trains `model` in place. On a non-finite loss or gradient the step's
/// sampling inputs are written to `repro_path` (when given) and a numeric
/// error is returned.
pub fn train(
    model: &mut Model,
    dataset: &[SequenceClip],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    repro_path: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if dataset.is_empty() {
        return Err(MatrError::Input("training dataset is empty".into()));
    }
    if model.config.track_update != cfg.mode.track_update() {
        return Err(MatrError::Config(format!(
            "model track update '{}' does not match train mode '{}'",
            model.config.track_update, cfg.mode
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&model.params, cfg.lr, cfg.weight_decay);
    let mut outcome = TrainOutcome {
        log: Vec::with_capacity(cfg.steps),
        mat_invocations: 0,
        trajectory_evaluations: 0,
        max_clipped_norm: 0.0,
    };
    let param_ids: Vec<_> = model.params.ids().collect();
    for step in 0..cfg.steps {
        let sample = sample_clip(dataset, cfg.clip_length, cfg.max_stride, &mut rng)?;
        let clip = dataset[sample.sequence].subclip(sample.start, sample.stride, cfg.clip_length)?;
        let opts = ClipOptions {
            train_mode: true,
            dropout: cfg.dropout,
            seed: rng.random(),
            iou_threshold: cfg.iou_threshold,
            ..Default::default()
        };
        let (report, mut grads, mats, trajs) = {
            let mut tape = Tape::new(&model.params);
            let fwd = forward_clip(&mut tape, model, &clip, &opts)?;
            let loss = clip_loss(&mut tape, &fwd, &clip, loss_cfg, cfg.mode.uses_trajectory_loss());
            let loss = match loss {
                Ok(l) if l.report.total.is_finite() => l,
                Ok(l) => return Err(numeric_failure(step, sample, opts.seed, &format!("loss {}", l.report.total), repro_path)),
                Err(e) => return Err(numeric_failure(step, sample, opts.seed, &e.to_string(), repro_path)),
            };
            let g = tape.backward(loss.total);
            let grads: Vec<Option<Mat>> = param_ids.iter().map(|&id| g.param(id).cloned()).collect();
            (loss.report, grads, fwd.mat_invocations, loss.trajectory_evaluations)
        };
        let norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        if !norm.is_finite() {
            return Err(numeric_failure(step, sample, opts.seed, "gradient norm is not finite", repro_path));
        }
        outcome.max_clipped_norm = outcome.max_clipped_norm.max(norm.min(cfg.grad_clip));
        opt.update(&mut model.params, &grads);
        outcome.mat_invocations += mats;
        outcome.trajectory_evaluations += trajs;
        outcome.log.push(report);
    }
    Ok(outcome)
}

fn numeric_failure(step: usize, sample: ClipSample, clip_seed: u64, what: &str, repro: Option<&Path>) -> MatrError {
    let msg = format!(
        "step {step}: {what} (sequence={} start={} stride={} clip_seed={clip_seed})",
        sample.sequence, sample.start, sample.stride
    );
    if let Some(path) = repro {
        let body = format!(
            "step = {step}\nsequence = {}\nstart = {}\nstride = {}\nclip_seed = {clip_seed}\nreason = {what}\n",
            sample.sequence, sample.start, sample.stride
        );
        // The numeric error is the primary failure; a failed write is folded into it.
        if let Err(e) = fs::write(path, body) {
            return MatrError::Numeric(format!("{msg}; repro not written: {e}"));
        }
    }
    MatrError::Numeric(msg)
}

/// Distances `1 - iou` between each track query's anchor entering the decoder
/// and the truth box of its identity, over ground-truth-driven clip forwards.
pub fn collision_evaluation(model: &Model, clips: &[SequenceClip], iou_threshold: f64) -> Result<CollisionStats> {
    let mut predicted: Vec<NormBox> = Vec::new();
    let mut truth: Vec<NormBox> = Vec::new();
    for clip in clips {
        let mut tape = Tape::new(&model.params);
        let opts = ClipOptions {
            train_mode: false,
            dropout: 0.0,
            iou_threshold,
            ..Default::default()
        };
        let fwd = forward_clip(&mut tape, model, clip, &opts)?;
        for (frame, objs) in fwd.frames.iter().zip(&clip.truth) {
            for (id, anchor) in frame.track_identities.iter().zip(&frame.track_anchors) {
                if let Some(t) = objs.iter().find(|o| o.identity == *id) {
                    predicted.push(*anchor);
                    truth.push(t.bbox);
                }
            }
        }
    }
    collision_stats(&predicted, &truth)
}

/// Runs the tracker over each sequence and pools the metrics.
pub fn tracking_evaluation(model: &Model, sequences: &[SequenceClip], tracker: &TrackerConfig) -> Result<MetricsReport> {
    let mut reports = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let emissions = run_tracker(&seq.frames, model, tracker)?;
        reports.push(evaluate_sequence(&seq.truth, &emissions)?);
    }
    MetricsReport::pooled(&reports)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mode: TrainMode,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub collision: CollisionStats,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub runs: Vec<AblationRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub mode: TrainMode,
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    pub mota: f64,
    pub idf1: f64,
    pub mean_collision_distance: f64,
    pub fraction_at_one: f64,
}

impl AblationTable {
    pub const COLUMNS: [&'static str; 8] = [
        "mode",
        "hota",
        "deta",
        "assa",
        "mota",
        "idf1",
        "mean_collision_distance",
        "fraction_at_one",
    ];

    pub fn rows_for(&self, mode: TrainMode) -> impl Iterator<Item = &AblationRow> {
        self.runs.iter().filter(move |r| r.mode == mode)
    }

    /// One row per mode, averaging over seeds, in first-seen mode order.
    pub fn summary(&self) -> Vec<AblationSummary> {
        let mut modes: Vec<TrainMode> = Vec::new();
        for r in &self.runs {
            if !modes.contains(&r.mode) {
                modes.push(r.mode);
            }
        }
        modes
            .into_iter()
            .map(|mode| {
                let rows: Vec<&AblationRow> = self.rows_for(mode).collect();
                let n = rows.len() as f64;
                let mean = |f: &dyn Fn(&AblationRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
                AblationSummary {
                    mode,
                    hota: mean(&|r| r.metrics.hota),
                    deta: mean(&|r| r.metrics.deta),
                    assa: mean(&|r| r.metrics.assa),
                    mota: mean(&|r| r.metrics.mota),
                    idf1: mean(&|r| r.metrics.idf1),
                    mean_collision_distance: mean(&|r| r.collision.mean_distance.unwrap_or(f64::NAN)),
                    fraction_at_one: mean(&|r| r.collision.fraction_at_one.unwrap_or(f64::NAN)),
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = Self::COLUMNS.join(",");
        s.push('\n');
        for r in self.summary() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.mode, r.hota, r.deta, r.assa, r.mota, r.idf1, r.mean_collision_distance, r.fraction_at_one
            );
        }
        s
    }

    pub fn runs_csv(&self) -> String {
        let mut s = String::from("mode,seed,hota,deta,assa,mota,idf1,mean_collision_distance,fraction_at_one,final_loss\n");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.mode,
                r.seed,
                r.metrics.hota,
                r.metrics.deta,
                r.metrics.assa,
                r.metrics.mota,
                r.metrics.idf1,
                r.collision.mean_distance.unwrap_or(f64::NAN),
                r.collision.fraction_at_one.unwrap_or(f64::NAN),
                r.final_loss
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<12} {:>7} {:>7} {:>7} {:>7} {:>7} {:>9} {:>9}\n",
            "mode", "HOTA", "DetA", "AssA", "MOTA", "IDF1", "coll.mean", "coll.at1"
        );
        for r in self.summary() {
            let _ = writeln!(
                s,
                "{:<12} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>9.4} {:>9.4}",
                r.mode.as_str(),
                r.hota,
                r.deta,
                r.assa,
                r.mota,
                r.idf1,
                r.mean_collision_distance,
                r.fraction_at_one
            );
        }
        s
    }
}

/// Everything an ablation needs besides the modes and seeds.
#[derive(Debug, Clone)]
pub struct AblationSetup<'a> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub tracker: TrackerConfig,
    pub train_set: &'a [SequenceClip],
    /// Full held-out sequences for the tracker.
    pub eval_sequences: &'a [SequenceClip],
    /// Short held-out clips for collision statistics.
    pub collision_clips: &'a [SequenceClip],
}

/// Trains one model per `(mode, seed)` and evaluates it on the held-out split.
/// `progress` is called after each run.
pub fn ablation_run(
    setup: &AblationSetup<'_>,
    modes: &[TrainMode],
    seeds: &[u64],
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    let mut runs = Vec::with_capacity(modes.len() * seeds.len());
    for &mode in modes {
        for &seed in seeds {
            let mut model = Model::new(ModelConfig {
                seed,
                track_update: mode.track_update(),
                ..setup.model.clone()
            })?;
            let cfg = TrainConfig {
                seed,
                mode,
                ..setup.train.clone()
            };
            let outcome = train(&mut model, setup.train_set, &cfg, &setup.loss, None)?;
            let metrics = tracking_evaluation(&model, setup.eval_sequences, &setup.tracker)?;
            let collision = collision_evaluation(&model, setup.collision_clips, cfg.iou_threshold)?;
            let tail = outcome.log.len().min(100);
            let final_loss = outcome.log[outcome.log.len() - tail..].iter().map(|r| r.total).sum::<f64>() / tail as f64;
            let row = AblationRow {
                mode,
                seed,
                metrics,
                collision,
                final_loss,
            };
            progress(&row);
            runs.push(row);
        }
    }
    Ok(AblationTable { runs })
}
