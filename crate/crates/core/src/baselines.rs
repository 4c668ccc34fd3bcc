//! Non-learned and ablation track updaters.
//!
//! [`KalmanState`] is a constant-velocity filter over `(cx, cy, w, h)`.
//! [`QimUpdate`] refreshes track features with self-attention only and
//! leaves anchors untouched.

use rand::Rng;

use crate::error::{MatrError, Result};
use crate::geometry::NormBox;
use crate::nn::{Attention, Init, LayerNorm};
use crate::tape::{ParamStore, Tape};
use crate::model::QuerySet;

const STATE: usize = 8;

/// Smallest size a predicted box may shrink to.
const MIN_BOX_SIZE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanNoise {
    pub position_process: f64,
    pub velocity_process: f64,
    pub observation: f64,
    pub initial_position: f64,
    pub initial_velocity: f64,
}

impl Default for KalmanNoise {
    fn default() -> Self {
        KalmanNoise {
            position_process: 1e-4,
            velocity_process: 1e-3,
            observation: 1e-3,
            initial_position: 1e-3,
            initial_velocity: 1e-2,
        }
    }
}

/// Mean `(cx, cy, w, h, vcx, vcy, vw, vh)` and its covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub mean: [f64; STATE],
    pub covariance: [[f64; STATE]; STATE],
}

pub fn kalman_init(b: &NormBox, noise: &KalmanNoise) -> KalmanState {
    let mut mean = [0.0; STATE];
    mean[..4].copy_from_slice(&b.to_array());
    let mut covariance = [[0.0; STATE]; STATE];
    for i in 0..4 {
        covariance[i][i] = noise.initial_position;
        covariance[i + 4][i + 4] = noise.initial_velocity;
    }
    KalmanState { mean, covariance }
}

fn predicted_box(mean: &[f64; STATE]) -> NormBox {
    NormBox::from_array([mean[0], mean[1], mean[2], mean[3]]).clamped(MIN_BOX_SIZE)
}

/// Unit-timestep constant-velocity transition.
pub fn kalman_predict(state: &KalmanState, noise: &KalmanNoise) -> (KalmanState, NormBox) {
    let mut mean = state.mean;
    for i in 0..4 {
        mean[i] += mean[i + 4];
    }
    // P' = F P F^T + Q with F = [[I, I], [0, I]].
    let p = &state.covariance;
    let mut fp = *p;
    for i in 0..4 {
        for j in 0..STATE {
            fp[i][j] = p[i][j] + p[i + 4][j];
        }
    }
    let mut cov = fp;
    for i in 0..STATE {
        for j in 0..4 {
            cov[i][j] = fp[i][j] + fp[i][j + 4];
        }
    }
    for i in 0..4 {
        cov[i][i] += noise.position_process;
        cov[i + 4][i + 4] += noise.velocity_process;
    }
    symmetrize(&mut cov);
    let predicted = predicted_box(&mean);
    (
        KalmanState {
            mean,
            covariance: cov,
        },
        predicted,
    )
}

fn symmetrize(m: &mut [[f64; STATE]; STATE]) {
    for i in 0..STATE {
        for j in i + 1..STATE {
            let v = 0.5 * (m[i][j] + m[j][i]);
            m[i][j] = v;
            m[j][i] = v;
        }
    }
}

/// Inverse of a symmetric positive-definite 4x4 matrix via Cholesky.
fn spd_inverse4(s: &[[f64; 4]; 4]) -> Option<[[f64; 4]; 4]> {
    let mut l = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..=i {
            let mut v = s[i][j];
            for k in 0..j {
                v -= l[i][k] * l[j][k];
            }
            if i == j {
                if v <= 0.0 {
                    return None;
                }
                l[i][i] = v.sqrt();
            } else {
                l[i][j] = v / l[j][j];
            }
        }
    }
    let mut inv = [[0.0; 4]; 4];
    for col in 0..4 {
        // Solve L y = e_col, then L^T x = y.
        let mut y = [0.0; 4];
        for i in 0..4 {
            let mut v = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                v -= l[i][k] * y[k];
            }
            y[i] = v / l[i][i];
        }
        for i in (0..4).rev() {
            let mut v = y[i];
            for k in i + 1..4 {
                v -= l[k][i] * inv[k][col];
            }
            inv[i][col] = v / l[i][i];
        }
    }
    Some(inv)
}

/// Standard update with observation matrix `H = [I 0]`, Joseph-form covariance.
pub fn kalman_update(
    state: &KalmanState,
    observation: &NormBox,
    noise: &KalmanNoise,
) -> Result<KalmanState> {
    let p = &state.covariance;
    let z = observation.to_array();
    let mut s = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            s[i][j] = p[i][j];
        }
        s[i][i] += noise.observation;
    }
    let s_inv = spd_inverse4(&s)
        .ok_or_else(|| MatrError::Numeric("innovation covariance is not positive definite".into()))?;
    // K = P H^T S^-1, 8x4.
    let mut gain = [[0.0; 4]; STATE];
    for i in 0..STATE {
        for j in 0..4 {
            gain[i][j] = (0..4).map(|k| p[i][k] * s_inv[k][j]).sum();
        }
    }
    let innovation: Vec<f64> = (0..4).map(|i| z[i] - state.mean[i]).collect();
    let mut mean = state.mean;
    for i in 0..STATE {
        mean[i] += (0..4).map(|k| gain[i][k] * innovation[k]).sum::<f64>();
    }
    // Joseph form: (I - K H) P (I - K H)^T + K R K^T.
    let mut a = [[0.0; STATE]; STATE];
    for i in 0..STATE {
        a[i][i] = 1.0;
        for j in 0..4 {
            a[i][j] -= gain[i][j];
        }
    }
    let mut ap = [[0.0; STATE]; STATE];
    for i in 0..STATE {
        for j in 0..STATE {
            ap[i][j] = (0..STATE).map(|k| a[i][k] * p[k][j]).sum();
        }
    }
    let mut cov = [[0.0; STATE]; STATE];
    for i in 0..STATE {
        for j in 0..STATE {
            let apat: f64 = (0..STATE).map(|k| ap[i][k] * a[j][k]).sum();
            let krk: f64 = (0..4).map(|k| gain[i][k] * gain[j][k]).sum::<f64>() * noise.observation;
            cov[i][j] = apat + krk;
        }
    }
    symmetrize(&mut cov);
    if (0..STATE).any(|i| cov[i][i] < 0.0 || !cov[i][i].is_finite()) {
        return Err(MatrError::Numeric(
            "covariance lost positive semidefiniteness after update".into(),
        ));
    }
    Ok(KalmanState {
        mean,
        covariance: cov,
    })
}

/// Self-attention-only refresh of track features with unchanged anchors.
#[derive(Debug, Clone)]
pub struct QimUpdate {
    pub self_attention: Attention,
    pub norm: LayerNorm,
}

impl QimUpdate {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, heads: usize, rng: &mut R) -> Self {
        QimUpdate {
            self_attention: Attention::new(store, "qim.self_attn", dim, heads, Init::Zeros, rng),
            norm: LayerNorm::new(store, "qim.norm", dim),
        }
    }
}

/// `features' = features + SelfAtt(features)`; anchors and identities pass through.
pub fn qim_like_update(tape: &mut Tape, qim: &QimUpdate, tracks: &QuerySet) -> QuerySet {
    if tracks.is_empty() {
        return tracks.clone();
    }
    let dim = tape.shape(tracks.features).1;
    let pos = tape.box_sine(tracks.anchors, dim);
    let q = tape.add(tracks.features, pos);
    let att = qim.self_attention.forward(tape, q, q, tracks.features);
    let features = tape.add(tracks.features, att);
    QuerySet {
        features,
        anchors: tracks.anchors,
        identities: tracks.identities.clone(),
        kinds: tracks.kinds.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> NormBox {
        NormBox { cx, cy, w, h }
    }

    #[test]
    fn init_contract() {
        let noise = KalmanNoise::default();
        let s = kalman_init(&b(0.3, 0.4, 0.1, 0.2), &noise);
        assert_eq!(&s.mean[..4], &[0.3, 0.4, 0.1, 0.2]);
        assert!(s.mean[4..].iter().all(|v| *v == 0.0));
        for i in 0..8 {
            for j in 0..8 {
                let expected = match (i == j, i < 4) {
                    (false, _) => 0.0,
                    (true, true) => noise.initial_position,
                    (true, false) => noise.initial_velocity,
                };
                assert_eq!(s.covariance[i][j], expected);
            }
        }
    }

    #[test]
    fn static_box_prediction() {
        let noise = KalmanNoise::default();
        let start = b(0.5, 0.5, 0.2, 0.1);
        let (_, p) = kalman_predict(&kalman_init(&start, &noise), &noise);
        assert_eq!(p, start);
    }

    #[test]
    fn velocity_is_learned() {
        let noise = KalmanNoise::default();
        let mut s = kalman_init(&b(0.30, 0.5, 0.1, 0.1), &noise);
        for cx in [0.35, 0.40] {
            let (pred, _) = kalman_predict(&s, &noise);
            s = kalman_update(&pred, &b(cx, 0.5, 0.1, 0.1), &noise).unwrap();
        }
        let (_, next) = kalman_predict(&s, &noise);
        assert!(next.cx > 0.40, "predicted {}", next.cx);
    }

    #[test]
    fn zero_innovation_keeps_mean() {
        let noise = KalmanNoise::default();
        let mut s = kalman_init(&b(0.3, 0.5, 0.1, 0.1), &noise);
        s.mean[4] = 0.02;
        let (pred, pbox) = kalman_predict(&s, &noise);
        let upd = kalman_update(&pred, &pbox, &noise).unwrap();
        for (x, y) in upd.mean.iter().zip(pred.mean) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn qim_update_keeps_anchors_and_is_identity_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let qim = QimUpdate::new(&mut store, 16, 2, &mut rng);
        let mut tape = Tape::new(&store);
        let tracks = QuerySet::constant_tracks(
            &mut tape,
            &[vec![0.1; 16], vec![-0.3; 16]],
            &[b(0.2, 0.3, 0.1, 0.1), b(0.6, 0.6, 0.2, 0.2)],
            &[4, 9],
        );
        let out = qim_like_update(&mut tape, &qim, &tracks);
        assert_eq!(out.anchors, tracks.anchors);
        assert_eq!(tape.value(out.features), tape.value(tracks.features));
        assert_eq!(out.identities, tracks.identities);
        let empty = QuerySet::empty(&mut tape, 16);
        let e = qim_like_update(&mut tape, &qim, &empty);
        assert!(e.is_empty());
    }
}
