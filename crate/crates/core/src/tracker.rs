//! Inference-time track lifecycle.
//!
//! Each frame every retained track (active or inactive) is carried forward
//! by the model's track update and decoded together with the detection
//! queries. Tracks at or above `track_threshold` are active and emitted;
//! below it they go inactive and accumulate misses until removal. Detection
//! queries at or above `det_threshold` start new tracks.

use crate::baselines::{kalman_init, kalman_predict, kalman_update, KalmanNoise, KalmanState};
use crate::error::{MatrError, Result};
use crate::geometry::NormBox;
use crate::model::{Model, QuerySet, TrackUpdateKind};
use crate::synthdata::{Image, MotFrames, MotRecord};
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub det_threshold: f64,
    pub track_threshold: f64,
    pub max_misses: u32,
    pub kalman: KalmanNoise,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            det_threshold: 0.7,
            track_threshold: 0.5,
            max_misses: 25,
            kalman: KalmanNoise::default(),
        }
    }
}

impl TrackerConfig {
    /// Hard errors for unusable values; returns soft warnings otherwise.
    pub fn validate(&self) -> Result<Vec<String>> {
        for (name, v) in [
            ("tracker.det_threshold", self.det_threshold),
            ("tracker.track_threshold", self.track_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(MatrError::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if self.max_misses == 0 {
            return Err(MatrError::Config("tracker.max_misses must be at least 1".into()));
        }
        let mut warnings = Vec::new();
        if self.track_threshold > self.det_threshold {
            warnings.push(format!(
                "tracker.track_threshold {} exceeds tracker.det_threshold {}",
                self.track_threshold, self.det_threshold
            ));
        }
        Ok(warnings)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Active,
    Inactive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord {
    pub identity: u64,
    pub embedding: Vec<f64>,
    pub anchor: NormBox,
    pub confidence: f64,
    pub miss_count: u32,
    pub status: TrackStatus,
    pub kalman: Option<KalmanState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub tracks: Vec<TrackRecord>,
    pub next_identity: u64,
}

impl Default for TrackerState {
    fn default() -> Self {
        TrackerState {
            tracks: Vec::new(),
            next_identity: 1,
        }
    }
}

/// Decoder result for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryScore {
    pub confidence: f64,
    pub bbox: NormBox,
    pub embedding: Vec<f64>,
}

/// The lifecycle transition given decoder scores. `track_scores` aligns with
/// `state.tracks`. Returns this frame's emissions.
pub fn apply_scores(
    state: &mut TrackerState,
    config: &TrackerConfig,
    track_scores: Vec<QueryScore>,
    detect_scores: Vec<QueryScore>,
) -> Vec<MotRecord> {
    assert_eq!(track_scores.len(), state.tracks.len());
    let mut emissions = Vec::new();
    let mut kept = Vec::with_capacity(state.tracks.len());
    for (mut track, score) in state.tracks.drain(..).zip(track_scores) {
        track.confidence = score.confidence;
        track.anchor = score.bbox;
        track.embedding = score.embedding;
        if score.confidence >= config.track_threshold {
            track.status = TrackStatus::Active;
            track.miss_count = 0;
            emissions.push(MotRecord {
                identity: track.identity,
                bbox: track.anchor,
                confidence: track.confidence,
            });
        } else {
            track.status = TrackStatus::Inactive;
            track.miss_count += 1;
            if track.miss_count > config.max_misses {
                continue;
            }
        }
        kept.push(track);
    }
    for score in detect_scores {
        if score.confidence < config.det_threshold {
            continue;
        }
        let identity = state.next_identity;
        state.next_identity += 1;
        emissions.push(MotRecord {
            identity,
            bbox: score.bbox,
            confidence: score.confidence,
        });
        kept.push(TrackRecord {
            identity,
            embedding: score.embedding,
            anchor: score.bbox,
            confidence: score.confidence,
            miss_count: 0,
            status: TrackStatus::Active,
            kalman: None,
        });
    }
    state.tracks = kept;
    emissions
}

/// Processes one frame.
pub fn step(state: &mut TrackerState, frame: &Image, model: &Model, config: &TrackerConfig) -> Result<Vec<MotRecord>> {
    let kind = model.config.track_update;
    let mut tape = Tape::new(&model.params);
    let memory = model.encode(&mut tape, frame)?;

    let mut predicted: Vec<Option<KalmanState>> = Vec::with_capacity(state.tracks.len());
    let mut kalman_anchors = Vec::with_capacity(state.tracks.len());
    if kind == TrackUpdateKind::Klf {
        for t in &state.tracks {
            let prior = t.kalman.clone().unwrap_or_else(|| kalman_init(&t.anchor, &config.kalman));
            let (s, b) = kalman_predict(&prior, &config.kalman);
            predicted.push(Some(s));
            kalman_anchors.push(b);
        }
    } else {
        predicted.resize(state.tracks.len(), None);
    }

    let features: Vec<Vec<f64>> = state.tracks.iter().map(|t| t.embedding.clone()).collect();
    let anchors: Vec<NormBox> = state.tracks.iter().map(|t| t.anchor).collect();
    let ids: Vec<u64> = state.tracks.iter().map(|t| t.identity).collect();
    let tracks = if ids.is_empty() {
        QuerySet::empty(&mut tape, model.config.dim)
    } else {
        QuerySet::constant_tracks(&mut tape, &features, &anchors, &ids)
    };
    let (updated, _) = model.update_tracks(
        &mut tape,
        &tracks,
        &memory,
        (kind == TrackUpdateKind::Klf).then_some(kalman_anchors.as_slice()),
    );
    let detect = model.init_queries(&mut tape);
    let queries = QuerySet::concat(&mut tape, &updated, &detect);
    let out = model.decode(&mut tape, &queries, &memory);

    let conf = out.confidences(&tape);
    let boxes = out.boxes(&tape);
    let emb = tape.value(out.embeddings);
    let mut scores: Vec<QueryScore> = (0..queries.len())
        .map(|q| QueryScore {
            confidence: conf[q],
            bbox: boxes[q],
            embedding: emb.row(q).to_vec(),
        })
        .collect();
    let detect_scores = scores.split_off(updated.len());

    // Kalman bookkeeping before the lifecycle transition reorders tracks.
    if kind == TrackUpdateKind::Klf {
        for ((t, s), pred) in state.tracks.iter_mut().zip(&scores).zip(predicted) {
            let pred = pred.expect("predicted for every track");
            t.kalman = Some(if s.confidence >= config.track_threshold {
                kalman_update(&pred, &s.bbox, &config.kalman)?
            } else {
                pred
            });
        }
    }
    let emissions = apply_scores(state, config, scores, detect_scores);
    if kind == TrackUpdateKind::Klf {
        // Newborn tracks.
        for t in state.tracks.iter_mut() {
            if t.kalman.is_none() {
                t.kalman = Some(kalman_init(&t.anchor, &config.kalman));
            }
        }
    }
    Ok(emissions)
}

/// Tracks a whole sequence from an empty state.
pub fn run(frames: &[Image], model: &Model, config: &TrackerConfig) -> Result<MotFrames> {
    if frames.is_empty() {
        return Err(MatrError::Input("cannot track an empty sequence".into()));
    }
    config.validate()?;
    let mut state = TrackerState::default();
    frames.iter().map(|f| step(&mut state, f, model, config)).collect()
}
