//! Training losses: the sequence-level trajectory loss on motion-aware box
//! predictions, the per-frame detection losses with deep supervision, and
//! their weighted sum.

use crate::assignment::{AssignmentResult, TruthObject};
use crate::error::{MatrError, Result};
use crate::geometry::NormBox;
use crate::model::{ClipForward, FrameOutput};
use crate::synthdata::SequenceClip;
use crate::tape::{Mat, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub traj_weight: f64,
    pub cls_weight: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
    pub focal_gamma: f64,
    /// Weight of object targets; no-object targets get `1 - focal_alpha`.
    pub focal_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            traj_weight: 5.0,
            cls_weight: 2.0,
            l1_weight: 5.0,
            giou_weight: 2.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("loss.traj_weight", self.traj_weight),
            ("loss.cls_weight", self.cls_weight),
            ("loss.l1_weight", self.l1_weight),
            ("loss.giou_weight", self.giou_weight),
            ("loss.focal_gamma", self.focal_gamma),
        ];
        for (name, w) in weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(MatrError::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(MatrError::Config(format!(
                "loss.focal_alpha must be in [0, 1], got {}",
                self.focal_alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryLoss {
    pub value: f64,
    /// Tracker-frame pairs with present truth.
    pub count: usize,
}

impl TrajectoryLoss {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Mean L1 (summed over the four coordinates) between each tracker's
/// predicted box and the truth box carrying the same identity. Trackers
/// whose identity is absent from a frame are skipped.
pub fn trajectory_loss(predictions: &[Vec<(u64, NormBox)>], truth: &[Vec<TruthObject>]) -> TrajectoryLoss {
    let mut sum = 0.0;
    let mut count = 0;
    for (preds, objs) in predictions.iter().zip(truth) {
        for (id, b) in preds {
            if let Some(t) = objs.iter().find(|o| o.identity == *id) {
                sum += b.l1(&t.bbox);
                count += 1;
            }
        }
    }
    TrajectoryLoss {
        value: if count == 0 { 0.0 } else { sum / count as f64 },
        count,
    }
}

/// Tape version of [`trajectory_loss`]. Each entry pairs an `n x 4` box
/// variable with the identities of its rows. Returns `None` when no tracker
/// has truth anywhere.
pub fn trajectory_loss_on_tape(
    tape: &mut Tape,
    frames: &[(Var, &[u64])],
    truth: &[Vec<TruthObject>],
) -> Option<(Var, usize)> {
    let mut terms = Vec::new();
    let mut count = 0;
    for ((boxes, ids), objs) in frames.iter().zip(truth) {
        let mut rows = Vec::new();
        let mut target = Vec::new();
        for (r, id) in ids.iter().enumerate() {
            if let Some(t) = objs.iter().find(|o| o.identity == *id) {
                rows.push(r);
                target.extend(t.bbox.to_array());
            }
        }
        if rows.is_empty() {
            continue;
        }
        count += rows.len();
        let pred = tape.gather_rows(*boxes, &rows);
        let target = tape.constant(Mat::from_vec(rows.len(), 4, target));
        let diff = tape.sub(pred, target);
        let abs = tape.abs(diff);
        terms.push(tape.sum(abs));
    }
    if count == 0 {
        return None;
    }
    let total = sum_vars(tape, &terms);
    Some((tape.scale(total, 1.0 / count as f64), count))
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Var {
    let mut it = vars.iter().copied();
    let first = it.next().expect("at least one term");
    it.fold(first, |acc, v| tape.add(acc, v))
}

/// Sum over rows of `1 - giou` between `n x 4` prediction and target boxes.
pub fn giou_loss_on_tape(tape: &mut Tape, pred: Var, target: Var) -> Var {
    let corners = |tape: &mut Tape, b: Var| {
        let cx = tape.slice_cols(b, 0, 1);
        let cy = tape.slice_cols(b, 1, 1);
        let w = tape.slice_cols(b, 2, 1);
        let h = tape.slice_cols(b, 3, 1);
        let hw = tape.scale(w, 0.5);
        let hh = tape.scale(h, 0.5);
        [tape.sub(cx, hw), tape.sub(cy, hh), tape.add(cx, hw), tape.add(cy, hh)]
    };
    let [l1, t1, r1, b1] = corners(tape, pred);
    let [l2, t2, r2, b2] = corners(tape, target);
    let area = |tape: &mut Tape, l, t, r, b| {
        let w = tape.sub(r, l);
        let h = tape.sub(b, t);
        tape.mul(w, h)
    };
    let a1 = area(tape, l1, t1, r1, b1);
    let a2 = area(tape, l2, t2, r2, b2);

    let il = tape.max(l1, l2);
    let it = tape.max(t1, t2);
    let ir = tape.min(r1, r2);
    let ib = tape.min(b1, b2);
    let iw = tape.sub(ir, il);
    let iw = tape.relu(iw);
    let ih = tape.sub(ib, it);
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih);
    let sum_area = tape.add(a1, a2);
    let union = tape.sub(sum_area, inter);
    let iou = tape.div(inter, union);

    let el = tape.min(l1, l2);
    let et = tape.min(t1, t2);
    let er = tape.max(r1, r2);
    let eb = tape.max(b1, b2);
    let enclosing = area(tape, el, et, er, eb);
    let gap = tape.sub(enclosing, union);
    let penalty = tape.div(gap, enclosing);
    let giou = tape.sub(iou, penalty);
    let rows = tape.shape(giou).0 as f64;
    let s = tape.sum(giou);
    let neg = tape.scale(s, -1.0);
    tape.add_scalar(neg, rows)
}

/// Weighted detection terms for one frame, each summed over decoder layers.
#[derive(Debug, Clone, Copy)]
pub struct DetectionTerms {
    pub cls: Var,
    pub box_l1: Var,
    pub box_giou: Var,
}

/// Focal classification over every query plus L1 and GIoU box regression
/// over matched pairs, applied at every decoder layer and normalized by the
/// matched count (at least 1). Unmatched queries, including track queries
/// whose identity left the frame, are no-object targets.
pub fn detection_loss(
    tape: &mut Tape,
    output: &FrameOutput,
    assignment: &AssignmentResult,
    truth: &[TruthObject],
    cfg: &LossConfig,
) -> DetectionTerms {
    let n = tape.shape(output.probs).0;
    let no_object = tape.shape(output.probs).1 - 1;
    let target = assignment.target_of(n);
    let classes: Vec<usize> = target
        .iter()
        .map(|t| t.map_or(no_object, |j| truth[j].class))
        .collect();
    let alphas: Vec<f64> = classes
        .iter()
        .map(|&c| if c == no_object { 1.0 - cfg.focal_alpha } else { cfg.focal_alpha })
        .collect();
    let matched: Vec<(usize, usize)> = assignment.matched_pairs.clone();
    let norm = 1.0 / matched.len().max(1) as f64;
    let rows: Vec<usize> = matched.iter().map(|p| p.0).collect();
    let boxes_target = (!matched.is_empty()).then(|| {
        let data = matched.iter().flat_map(|p| truth[p.1].bbox.to_array()).collect();
        tape.constant(Mat::from_vec(matched.len(), 4, data))
    });

    let mut cls_terms = Vec::new();
    let mut l1_terms = Vec::new();
    let mut giou_terms = Vec::new();
    for (&probs, &boxes) in output.layer_probs.iter().zip(&output.layer_boxes) {
        let focal = tape.focal(probs, &classes, &alphas, cfg.focal_gamma);
        cls_terms.push(tape.sum(focal));
        if let Some(tb) = boxes_target {
            let pred = tape.gather_rows(boxes, &rows);
            let diff = tape.sub(pred, tb);
            let abs = tape.abs(diff);
            l1_terms.push(tape.sum(abs));
            giou_terms.push(giou_loss_on_tape(tape, pred, tb));
        }
    }
    let weighted = |tape: &mut Tape, terms: &[Var], w: f64| {
        if terms.is_empty() {
            tape.constant(Mat::scalar(0.0))
        } else {
            let s = sum_vars(tape, terms);
            tape.scale(s, w * norm)
        }
    };
    DetectionTerms {
        cls: weighted(tape, &cls_terms, cfg.cls_weight),
        box_l1: weighted(tape, &l1_terms, cfg.l1_weight),
        box_giou: weighted(tape, &giou_terms, cfg.giou_weight),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// Unweighted trajectory loss.
    pub traj: f64,
    pub cls: f64,
    pub box_l1: f64,
    pub box_giou: f64,
    /// Weighted detection total for each frame.
    pub per_frame: Vec<f64>,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,total,traj,cls,box_l1,box_giou";

    pub fn detection(&self) -> f64 {
        self.cls + self.box_l1 + self.box_giou
    }

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{}",
            self.total, self.traj, self.cls, self.box_l1, self.box_giou
        )
    }
}

/// `total = traj_weight * traj + cls + box_l1 + box_giou`.
pub fn matr_loss(traj: f64, cls: f64, box_l1: f64, box_giou: f64, traj_weight: f64) -> Result<LossReport> {
    for (name, v) in [("traj", traj), ("cls", cls), ("box_l1", box_l1), ("box_giou", box_giou)] {
        if !v.is_finite() {
            return Err(MatrError::Numeric(format!("non-finite {name} loss: {v}")));
        }
    }
    Ok(LossReport {
        total: traj_weight * traj + cls + box_l1 + box_giou,
        traj,
        cls,
        box_l1,
        box_giou,
        per_frame: Vec::new(),
    })
}

/// The loss graph for a whole clip together with its scalar report.
#[derive(Debug, Clone)]
pub struct ClipLoss {
    pub total: Var,
    pub report: LossReport,
    /// 1 when the trajectory term was built, 0 otherwise.
    pub trajectory_evaluations: usize,
}

/// Detection losses averaged over frames plus the weighted trajectory loss
/// over motion-aware predictions. `use_trajectory = false` drops the
/// trajectory term entirely.
pub fn clip_loss(
    tape: &mut Tape,
    forward: &ClipForward,
    clip: &SequenceClip,
    cfg: &LossConfig,
    use_trajectory: bool,
) -> Result<ClipLoss> {
    let frames = forward.frames.len();
    if frames == 0 {
        return Err(MatrError::Input("clip forward has no frames".into()));
    }
    let inv = 1.0 / frames as f64;
    let mut cls = Vec::new();
    let mut l1 = Vec::new();
    let mut gi = Vec::new();
    let mut per_frame = Vec::with_capacity(frames);
    for (f, truth) in forward.frames.iter().zip(&clip.truth) {
        let d = detection_loss(tape, &f.output, &f.assignment, truth, cfg);
        per_frame.push(
            tape.value(d.cls).data[0] + tape.value(d.box_l1).data[0] + tape.value(d.box_giou).data[0],
        );
        cls.push(d.cls);
        l1.push(d.box_l1);
        gi.push(d.box_giou);
    }
    let mean = |tape: &mut Tape, v: &[Var]| {
        let s = sum_vars(tape, v);
        tape.scale(s, inv)
    };
    let cls = mean(tape, &cls);
    let l1 = mean(tape, &l1);
    let gi = mean(tape, &gi);
    let a = tape.add(cls, l1);
    let detection = tape.add(a, gi);

    let mut trajectory_evaluations = 0;
    let mut traj_value = 0.0;
    let mut total = detection;
    if use_trajectory {
        trajectory_evaluations = 1;
        let pairs: Vec<(Var, &[u64])> = forward
            .frames
            .iter()
            .filter_map(|f| f.mat_boxes.map(|b| (b, f.track_identities.as_slice())))
            .collect();
        let truth: Vec<Vec<TruthObject>> = forward
            .frames
            .iter()
            .zip(&clip.truth)
            .filter(|(f, _)| f.mat_boxes.is_some())
            .map(|(_, t)| t.clone())
            .collect();
        if let Some((traj, _)) = trajectory_loss_on_tape(tape, &pairs, &truth) {
            traj_value = tape.value(traj).data[0];
            let weighted = tape.scale(traj, cfg.traj_weight);
            total = tape.add(detection, weighted);
        }
    }
    let value = |tape: &Tape, v: Var| tape.value(v).data[0];
    let mut report = matr_loss(
        traj_value,
        value(tape, cls),
        value(tape, l1),
        value(tape, gi),
        cfg.traj_weight,
    )?;
    report.per_frame = per_frame;
    Ok(ClipLoss {
        total,
        report,
        trajectory_evaluations,
    })
}
