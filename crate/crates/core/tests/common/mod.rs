//! Finite-difference gradient check shared by the gradient and acceptance
//! tests: a tiny two-frame instance with 8 memory tokens, D = 16, one detect
//! query plus the track query it spawns.

use matr::assignment::TruthObject;
use matr::geometry::NormBox;
use matr::losses::{clip_loss, LossConfig};
use matr::model::{forward_clip, ClipOptions, Model, ModelConfig};
use matr::synthdata::{render_frame, SequenceClip};
use matr::tape::{ParamId, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-3;

pub fn tiny_model() -> Model {
    let mut model = Model::new(ModelConfig {
        image_height: 16,
        image_width: 32,
        dim: 16,
        num_detect: 1,
        encoder_layers: 1,
        decoder_layers: 2,
        mat_layers: 1,
        heads: 2,
        ffn_width: 16,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    // Move every parameter off its initial value so zero-initialized
    // projections carry gradient too.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for id in model.params.ids().collect::<Vec<_>>() {
        for v in model.params.get_mut(id).data.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    model
}

pub fn tiny_clip() -> SequenceClip {
    let boxes = [
        NormBox::new(0.40, 0.45, 0.35, 0.5).unwrap(),
        NormBox::new(0.47, 0.50, 0.35, 0.5).unwrap(),
    ];
    SequenceClip {
        frames: boxes
            .iter()
            .map(|b| render_frame(&[(*b, [0.9, 0.3, 0.1])], 16, 32))
            .collect(),
        truth: boxes
            .iter()
            .map(|b| vec![TruthObject { identity: 7, bbox: *b, class: 0 }])
            .collect(),
    }
}

fn options() -> ClipOptions {
    ClipOptions {
        train_mode: false,
        dropout: 0.0,
        // Promote whatever the single detect query matches so frame 1 has a track query.
        iou_threshold: 0.0,
        ..Default::default()
    }
}

fn loss_value(model: &Model, clip: &SequenceClip, cfg: &LossConfig) -> f64 {
    let mut tape = Tape::new(&model.params);
    let fwd = forward_clip(&mut tape, model, clip, &options()).unwrap();
    let l = clip_loss(&mut tape, &fwd, clip, cfg, true).unwrap();
    tape.value(l.total).data[0]
}

pub struct GradReport {
    pub worst: f64,
    pub probed: usize,
    /// First entry over tolerance, formatted.
    pub failure: Option<String>,
}

pub fn loss_weights(traj: f64, cls: f64, l1: f64, giou: f64) -> LossConfig {
    LossConfig {
        traj_weight: traj,
        cls_weight: cls,
        l1_weight: l1,
        giou_weight: giou,
        ..Default::default()
    }
}

/// Compares analytic and central-difference gradients on three entries of
/// every parameter.
pub fn check(name: &str, cfg: &LossConfig) -> GradReport {
    let model = tiny_model();
    let clip = tiny_clip();
    let analytic = {
        let mut tape = Tape::new(&model.params);
        let fwd = forward_clip(&mut tape, &model, &clip, &options()).unwrap();
        assert_eq!(fwd.frames[1].track_identities.len(), 1, "frame 1 must carry a track query");
        assert_eq!(fwd.mat_invocations, 1);
        let l = clip_loss(&mut tape, &fwd, &clip, cfg, true).unwrap();
        let g = tape.backward(l.total);
        let ids: Vec<ParamId> = model.params.ids().collect();
        ids.iter().map(|&id| (id, g.param(id).cloned())).collect::<Vec<_>>()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut report = GradReport {
        worst: 0.0,
        probed: 0,
        failure: None,
    };
    for (id, grad) in analytic {
        let n = model.params.get(id).data.len();
        let picks: Vec<usize> = (0..n.min(3)).map(|_| rng.random_range(0..n)).collect();
        for k in picks {
            let mut plus = model.clone();
            plus.params.get_mut(id).data[k] += STEP;
            let mut minus = model.clone();
            minus.params.get_mut(id).data[k] -= STEP;
            let numeric = (loss_value(&plus, &clip, cfg) - loss_value(&minus, &clip, cfg)) / (2.0 * STEP);
            let a = grad.as_ref().map_or(0.0, |g| g.data[k]);
            let scale = a.abs().max(numeric.abs());
            // Below 1e-5 the comparison is effectively absolute (1e-8), the
            // level of central-difference round-off at this step size.
            let rel = (a - numeric).abs() / scale.max(1e-5);
            if rel > TOLERANCE && report.failure.is_none() {
                report.failure = Some(format!(
                    "{name}: {} [{k}] analytic {a} numeric {numeric} rel {rel}",
                    model.params.name(id)
                ));
            }
            report.worst = report.worst.max(rel);
            report.probed += 1;
        }
    }
    report
}
