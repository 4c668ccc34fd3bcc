//! The toy tracking transformer.
//!
//! A strided convolutional backbone and a transformer encoder turn a frame
//! into memory tokens. Queries carry a feature vector and an anchor box; the
//! decoder refines anchors layer by layer in logit space. Before decoding,
//! track queries from the previous frame are moved forward by the motion-aware
//! update: `features + CrossAtt(SelfAtt(features), memory)` followed by a box
//! head whose prediction becomes the new anchor.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assignment::{
    assign_labels, surviving_track_indices, AssignmentResult, DetectPrediction, MatchWeights,
};
use crate::baselines::{
    kalman_init, kalman_predict, kalman_update, qim_like_update, KalmanNoise, KalmanState,
    QimUpdate,
};
use crate::error::{MatrError, Result};
use crate::geometry::{inverse_logistic, iou, point_to_embedding, NormBox};
use crate::nn::{Attention, Conv, DeltaHead, FeedForward, Init, LayerNorm, Linear};
use crate::synthdata::{Image, SequenceClip};
use crate::tape::{Mat, ParamId, ParamStore, Tape, Var};

/// How track queries are carried into the next frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrackUpdateKind {
    /// Motion-aware update with box prediction.
    Mat,
    /// Self-attention on features, anchors unchanged.
    Qim,
    /// Self-attention on features, anchors from a Kalman filter.
    Klf,
    /// Features and anchors carried over unchanged.
    Passthrough,
}

impl TrackUpdateKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrackUpdateKind::Mat => "mat",
            TrackUpdateKind::Qim => "qim",
            TrackUpdateKind::Klf => "klf",
            TrackUpdateKind::Passthrough => "passthrough",
        }
    }
}

impl fmt::Display for TrackUpdateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrackUpdateKind {
    type Err = MatrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mat" => Ok(TrackUpdateKind::Mat),
            "qim" => Ok(TrackUpdateKind::Qim),
            "klf" => Ok(TrackUpdateKind::Klf),
            "passthrough" => Ok(TrackUpdateKind::Passthrough),
            other => Err(MatrError::Config(format!("unknown track update '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub dim: usize,
    pub num_detect: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub mat_layers: usize,
    pub heads: usize,
    pub classes: usize,
    pub ffn_width: usize,
    pub seed: u64,
    pub track_update: TrackUpdateKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 64,
            image_width: 64,
            dim: 64,
            num_detect: 20,
            encoder_layers: 2,
            decoder_layers: 3,
            mat_layers: 1,
            heads: 4,
            classes: 1,
            ffn_width: 128,
            seed: 0,
            track_update: TrackUpdateKind::Mat,
        }
    }
}

/// Total stride of the backbone.
pub const BACKBONE_STRIDE: usize = 8;
// Widths of the Gaussian attention priors, relative to the anchor size.
const DECODER_PRIOR_WIDTH: f64 = 0.2;
const QUERY_PRIOR_WIDTH: f64 = 2.0;
const MAT_PRIOR_WIDTH: f64 = 1.0;
/// Side of the initial detection anchors.
const INITIAL_ANCHOR_SIZE: f64 = 0.17;
const BACKBONE_CHANNELS: [usize; 2] = [16, 32];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MatrError::Config(m));
        if self.dim == 0 || !self.dim.is_multiple_of(8) {
            return fail(format!("model.dim {} must be a positive multiple of 8", self.dim));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("model.dim {} not divisible by {} heads", self.dim, self.heads));
        }
        for (name, v) in [
            ("num_detect", self.num_detect),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("mat_layers", self.mat_layers),
            ("classes", self.classes),
            ("ffn_width", self.ffn_width),
        ] {
            if v == 0 {
                return fail(format!("model.{name} must be positive"));
            }
        }
        if !self.image_height.is_multiple_of(BACKBONE_STRIDE) || !self.image_width.is_multiple_of(BACKBONE_STRIDE) {
            return fail(format!(
                "image {}x{} must be a multiple of the backbone stride {BACKBONE_STRIDE}",
                self.image_height, self.image_width
            ));
        }
        Ok(())
    }

    pub fn token_grid(&self) -> (usize, usize) {
        (
            self.image_height / BACKBONE_STRIDE,
            self.image_width / BACKBONE_STRIDE,
        )
    }

    pub fn token_count(&self) -> usize {
        let (h, w) = self.token_grid();
        h * w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKind {
    Detect,
    Track,
}

/// Query features and anchors on a tape, with per-row identity and kind.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub features: Var,
    /// `n x 4` anchors in `(cx, cy, w, h)` order.
    pub anchors: Var,
    pub identities: Vec<Option<u64>>,
    pub kinds: Vec<QueryKind>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn empty(tape: &mut Tape, dim: usize) -> Self {
        QuerySet {
            features: tape.constant(Mat::zeros(0, dim)),
            anchors: tape.constant(Mat::zeros(0, 4)),
            identities: Vec::new(),
            kinds: Vec::new(),
        }
    }

    /// Track queries built from plain values (no gradient path).
    pub fn constant_tracks(
        tape: &mut Tape,
        features: &[Vec<f64>],
        anchors: &[NormBox],
        identities: &[u64],
    ) -> Self {
        assert_eq!(features.len(), anchors.len());
        assert_eq!(features.len(), identities.len());
        let dim = features.first().map_or(0, Vec::len);
        let f = if features.is_empty() {
            Mat::zeros(0, dim)
        } else {
            Mat::from_rows(features)
        };
        let a = Mat::from_vec(
            anchors.len(),
            4,
            anchors.iter().flat_map(|b| b.to_array()).collect(),
        );
        QuerySet {
            features: tape.constant(f),
            anchors: tape.constant(a),
            identities: identities.iter().map(|&i| Some(i)).collect(),
            kinds: vec![QueryKind::Track; identities.len()],
        }
    }

    pub fn concat(tape: &mut Tape, first: &QuerySet, second: &QuerySet) -> QuerySet {
        QuerySet {
            features: tape.concat_rows(&[first.features, second.features]),
            anchors: tape.concat_rows(&[first.anchors, second.anchors]),
            identities: first.identities.iter().chain(&second.identities).copied().collect(),
            kinds: first.kinds.iter().chain(&second.kinds).copied().collect(),
        }
    }

    pub fn select(&self, tape: &mut Tape, rows: &[usize]) -> QuerySet {
        QuerySet {
            features: tape.gather_rows(self.features, rows),
            anchors: tape.gather_rows(self.anchors, rows),
            identities: rows.iter().map(|&r| self.identities[r]).collect(),
            kinds: rows.iter().map(|&r| self.kinds[r]).collect(),
        }
    }

    pub fn anchor_boxes(&self, tape: &Tape) -> Vec<NormBox> {
        rows_to_boxes(tape.value(self.anchors))
    }

    pub fn track_identities(&self) -> Vec<u64> {
        self.identities.iter().flatten().copied().collect()
    }

    pub fn track_count(&self) -> usize {
        self.kinds.iter().filter(|k| **k == QueryKind::Track).count()
    }
}

pub fn rows_to_boxes(m: &Mat) -> Vec<NormBox> {
    (0..m.rows)
        .map(|r| {
            let v = m.row(r);
            NormBox::from_array([v[0], v[1], v[2], v[3]])
        })
        .collect()
}

/// Flattened encoder tokens and their fixed positional encodings.
#[derive(Debug, Clone, Copy)]
pub struct EncoderMemory {
    pub tokens: Var,
    pub positions: Var,
}

#[derive(Debug, Clone)]
pub struct FrameOutput {
    /// Final-layer class probabilities, `n x (classes + 1)`; last column is no-object.
    pub probs: Var,
    pub boxes: Var,
    pub embeddings: Var,
    /// Per decoder layer, final layer last.
    pub layer_probs: Vec<Var>,
    pub layer_boxes: Vec<Var>,
}

impl FrameOutput {
    pub fn boxes(&self, tape: &Tape) -> Vec<NormBox> {
        rows_to_boxes(tape.value(self.boxes))
    }

    /// Probability of any real class, `1 - p(no-object)`.
    pub fn confidences(&self, tape: &Tape) -> Vec<f64> {
        let p = tape.value(self.probs);
        (0..p.rows).map(|r| 1.0 - p.get(r, p.cols - 1)).collect()
    }

    pub fn class_probs(&self, tape: &Tape, row: usize) -> Vec<f64> {
        tape.value(self.probs).row(row).to_vec()
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attention: Attention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attention: Attention,
    norm1: LayerNorm,
    cross_attention: Attention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
    box_head: DeltaHead,
    class_head: Linear,
}

#[derive(Debug, Clone)]
pub struct MatLayer {
    pub self_attention: Attention,
    pub self_norm: LayerNorm,
    pub cross_attention: Attention,
    pub box_head: DeltaHead,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    backbone: Vec<Conv>,
    input_norm: LayerNorm,
    encoder: Vec<EncoderLayer>,
    detect_features: ParamId,
    detect_anchor_logits: ParamId,
    decoder: Vec<DecoderLayer>,
    mat: Vec<MatLayer>,
    qim: Option<QimUpdate>,
    memory_positions: Mat,
}

/// Initial no-object bias so that every query starts at low confidence.
const INITIAL_OBJECT_PROB: f64 = 0.1;

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let chans = [3, BACKBONE_CHANNELS[0], BACKBONE_CHANNELS[1], d];
        let backbone = (0..3)
            .map(|i| Conv::new(&mut store, &format!("backbone.{i}"), chans[i], chans[i + 1], 3, 2, &mut rng))
            .collect();
        let input_norm = LayerNorm::new(&mut store, "encoder.input_norm", d);
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                let p = format!("encoder.{i}");
                EncoderLayer {
                    attention: Attention::new(&mut store, &format!("{p}.self_attn"), d, config.heads, Init::XavierUniform, &mut rng),
                    norm1: LayerNorm::new(&mut store, &format!("{p}.norm1"), d),
                    ffn: FeedForward::new(&mut store, &format!("{p}.ffn"), d, config.ffn_width, &mut rng),
                    norm2: LayerNorm::new(&mut store, &format!("{p}.norm2"), d),
                }
            })
            .collect();

        let n = config.num_detect;
        let features = crate::nn::init_mat(n, d, Init::Uniform(1.0), &mut rng);
        let detect_features = store.add("queries.features", features);
        let mut logits = Vec::with_capacity(n * 4);
        // Detection anchors start on a jittered grid covering the image.
        let cols = (n as f64).sqrt().ceil() as usize;
        let rows = n.div_ceil(cols);
        for i in 0..n {
            let mut jitter = || rng.random_range(-0.02..0.02);
            let cx = ((i % cols) as f64 + 0.5) / cols as f64 + jitter();
            let cy = ((i / cols) as f64 + 0.5) / rows as f64 + jitter();
            let w = INITIAL_ANCHOR_SIZE + jitter();
            let h = INITIAL_ANCHOR_SIZE + jitter();
            logits.extend([cx, cy, w, h].map(inverse_logistic));
        }
        let detect_anchor_logits = store.add("queries.anchor_logits", Mat::from_vec(n, 4, logits));

        let no_object_bias = ((1.0 - INITIAL_OBJECT_PROB) / INITIAL_OBJECT_PROB).ln();
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                let p = format!("decoder.{i}");
                let class_head =
                    Linear::new(&mut store, &format!("{p}.class_head"), d, config.classes + 1, Init::XavierUniform, &mut rng);
                store.get_mut(class_head.bias).data[config.classes] = no_object_bias;
                DecoderLayer {
                    self_attention: Attention::new(&mut store, &format!("{p}.self_attn"), d, config.heads, Init::XavierUniform, &mut rng),
                    norm1: LayerNorm::new(&mut store, &format!("{p}.norm1"), d),
                    cross_attention: Attention::new(&mut store, &format!("{p}.cross_attn"), d, config.heads, Init::XavierUniform, &mut rng),
                    norm2: LayerNorm::new(&mut store, &format!("{p}.norm2"), d),
                    ffn: FeedForward::new(&mut store, &format!("{p}.ffn"), d, config.ffn_width, &mut rng),
                    norm3: LayerNorm::new(&mut store, &format!("{p}.norm3"), d),
                    box_head: DeltaHead::new(&mut store, &format!("{p}.box_head"), d, &mut rng),
                    class_head,
                }
            })
            .collect();

        let mat = if config.track_update == TrackUpdateKind::Mat {
            (0..config.mat_layers)
                .map(|i| {
                    let p = format!("mat.{i}");
                    MatLayer {
                        self_attention: Attention::new(&mut store, &format!("{p}.self_attn"), d, config.heads, Init::XavierUniform, &mut rng),
                        self_norm: LayerNorm::new(&mut store, &format!("{p}.self_norm"), d),
                        cross_attention: Attention::new(&mut store, &format!("{p}.cross_attn"), d, config.heads, Init::Zeros, &mut rng),
                        box_head: DeltaHead::new(&mut store, &format!("{p}.box_head"), d, &mut rng),
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        let qim = matches!(config.track_update, TrackUpdateKind::Qim | TrackUpdateKind::Klf)
            .then(|| QimUpdate::new(&mut store, d, config.heads, &mut rng));

        let (gh, gw) = config.token_grid();
        let mut pos = Vec::with_capacity(gh * gw * d);
        for ty in 0..gh {
            for tx in 0..gw {
                let x = (tx as f64 + 0.5) / gw as f64;
                let y = (ty as f64 + 0.5) / gh as f64;
                pos.extend(point_to_embedding(x, y, d)?);
            }
        }
        Ok(Model {
            memory_positions: Mat::from_vec(gh * gw, d, pos),
            config,
            params: store,
            backbone,
            input_norm,
            encoder,
            detect_features,
            detect_anchor_logits,
            decoder,
            mat,
            qim,
        })
    }

    pub fn mat_layers(&self) -> &[MatLayer] {
        &self.mat
    }

    pub fn encode(&self, tape: &mut Tape, image: &Image) -> Result<EncoderMemory> {
        let c = &self.config;
        if image.height != c.image_height || image.width != c.image_width {
            return Err(MatrError::Config(format!(
                "image is {}x{}, model expects {}x{}",
                image.height, image.width, c.image_height, c.image_width
            )));
        }
        let mut x = tape.constant(Mat::from_vec(image.height * image.width, 3, image.data.clone()));
        let (mut h, mut w) = (image.height, image.width);
        for (i, conv) in self.backbone.iter().enumerate() {
            let (y, nh, nw) = conv.forward(tape, x, h, w);
            x = if i + 1 < self.backbone.len() { tape.relu(y) } else { y };
            h = nh;
            w = nw;
        }
        let mut x = self.input_norm.forward(tape, x);
        let positions = tape.constant(self.memory_positions.clone());
        for layer in &self.encoder {
            let q = tape.add(x, positions);
            let a = layer.attention.forward(tape, q, q, x);
            let r = tape.add(x, a);
            let y = layer.norm1.forward(tape, r);
            let f = layer.ffn.forward(tape, y);
            let r = tape.add(y, f);
            x = layer.norm2.forward(tape, r);
        }
        Ok(EncoderMemory {
            tokens: x,
            positions,
        })
    }

    /// Learnable detection queries with anchors in `(0, 1)`.
    pub fn init_queries(&self, tape: &mut Tape) -> QuerySet {
        let features = tape.param(self.detect_features);
        let logits = tape.param(self.detect_anchor_logits);
        let anchors = tape.sigmoid(logits);
        let n = self.config.num_detect;
        QuerySet {
            features,
            anchors,
            identities: vec![None; n],
            kinds: vec![QueryKind::Detect; n],
        }
    }

    /// Motion-aware update of track queries against the current memory.
    /// Returns the updated queries and the predicted boxes (also the new anchors).
    pub fn mat_update(&self, tape: &mut Tape, tracks: &QuerySet, memory: &EncoderMemory) -> (QuerySet, Var) {
        assert!(!self.mat.is_empty(), "model was built without a motion-aware update");
        if tracks.is_empty() {
            return (tracks.clone(), tracks.anchors);
        }
        let d = self.config.dim;
        let keys = tape.add(memory.tokens, memory.positions);
        let mut features = tracks.features;
        let mut anchors = tracks.anchors;
        for layer in &self.mat {
            let pos = tape.box_sine(anchors, d);
            let q = tape.add(features, pos);
            let sa = layer.self_attention.forward(tape, q, q, features);
            let r = tape.add(features, sa);
            let refined = layer.self_norm.forward(tape, r);
            let cq = tape.add(refined, pos);
            let prior = self.memory_prior(tape, anchors, MAT_PRIOR_WIDTH);
            let ca = layer.cross_attention.forward_biased(tape, cq, keys, memory.tokens, Some(prior));
            features = tape.add(features, ca);
            let delta = layer.box_head.forward(tape, features);
            let lg = tape.logit(anchors);
            let moved = tape.add(lg, delta);
            anchors = tape.sigmoid(moved);
        }
        (
            QuerySet {
                features,
                anchors,
                identities: tracks.identities.clone(),
                kinds: tracks.kinds.clone(),
            },
            anchors,
        )
    }

    /// `n x m` matrix whose row `i` is `values` (`m x 1`).
    fn rows_of(tape: &mut Tape, n: usize, values: Var) -> Var {
        let ones = tape.constant(Mat::from_vec(n, 1, vec![1.0; n]));
        tape.matmul_bt(ones, values)
    }

    /// Column `coord` of `anchors` repeated across `m` columns.
    fn anchor_columns(tape: &mut Tape, anchors: Var, coord: usize, m: usize) -> Var {
        let mut sel = Mat::zeros(4, m);
        sel.row_mut(coord).fill(1.0);
        let sel = tape.constant(sel);
        tape.matmul(anchors, sel)
    }

    /// Attention-logit prior `-((x - cx)^2 / w^2 + (y - cy)^2 / h^2) / (2 s^2)`
    /// between each anchor and the points `(px, py)`, both `n x m`.
    fn box_prior(tape: &mut Tape, anchors: Var, px: Var, py: Var, width: f64) -> Var {
        let m = tape.shape(px).1;
        let mut terms = Vec::with_capacity(2);
        for (axis, p) in [(0, px), (1, py)] {
            let c = Self::anchor_columns(tape, anchors, axis, m);
            let size = Self::anchor_columns(tape, anchors, axis + 2, m);
            let d = tape.sub(c, p);
            let d2 = tape.mul(d, d);
            let s2 = tape.mul(size, size);
            terms.push(tape.div(d2, s2));
        }
        let sum = tape.add(terms[0], terms[1]);
        tape.scale(sum, -0.5 / (width * width))
    }

    /// Prior from each anchor to the memory token centers.
    fn memory_prior(&self, tape: &mut Tape, anchors: Var, width: f64) -> Var {
        let n = tape.shape(anchors).0;
        let (gh, gw) = self.config.token_grid();
        let m = gh * gw;
        let xs: Vec<f64> = (0..m).map(|k| ((k % gw) as f64 + 0.5) / gw as f64).collect();
        let ys: Vec<f64> = (0..m).map(|k| ((k / gw) as f64 + 0.5) / gh as f64).collect();
        let px = tape.constant(Mat::from_vec(n, m, xs.repeat(n)));
        let py = tape.constant(Mat::from_vec(n, m, ys.repeat(n)));
        Self::box_prior(tape, anchors, px, py, width)
    }

    /// Prior from each anchor to every query's anchor center.
    fn query_prior(tape: &mut Tape, anchors: Var) -> Var {
        let n = tape.shape(anchors).0;
        let cx = Self::anchor_columns(tape, anchors, 0, 1);
        let cy = Self::anchor_columns(tape, anchors, 1, 1);
        let px = Self::rows_of(tape, n, cx);
        let py = Self::rows_of(tape, n, cy);
        Self::box_prior(tape, anchors, px, py, QUERY_PRIOR_WIDTH)
    }

    pub fn qim(&self) -> Option<&QimUpdate> {
        self.qim.as_ref()
    }

    pub fn decode(&self, tape: &mut Tape, queries: &QuerySet, memory: &EncoderMemory) -> FrameOutput {
        let d = self.config.dim;
        let keys = tape.add(memory.tokens, memory.positions);
        let mut x = queries.features;
        let mut anchors = queries.anchors;
        let mut layer_probs = Vec::with_capacity(self.decoder.len());
        let mut layer_boxes = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let pos = tape.box_sine(anchors, d);
            let q = tape.add(x, pos);
            let near = Self::query_prior(tape, anchors);
            let sa = layer.self_attention.forward_biased(tape, q, q, x, Some(near));
            let r = tape.add(x, sa);
            x = layer.norm1.forward(tape, r);
            let cq = tape.add(x, pos);
            let prior = self.memory_prior(tape, anchors, DECODER_PRIOR_WIDTH);
            let ca = layer.cross_attention.forward_biased(tape, cq, keys, memory.tokens, Some(prior));
            let r = tape.add(x, ca);
            x = layer.norm2.forward(tape, r);
            let f = layer.ffn.forward(tape, x);
            let r = tape.add(x, f);
            x = layer.norm3.forward(tape, r);
            let delta = layer.box_head.forward(tape, x);
            let lg = tape.logit(anchors);
            let moved = tape.add(lg, delta);
            anchors = tape.sigmoid(moved);
            let logits = layer.class_head.forward(tape, x);
            layer_probs.push(tape.softmax(logits));
            layer_boxes.push(anchors);
        }
        FrameOutput {
            probs: *layer_probs.last().expect("at least one decoder layer"),
            boxes: anchors,
            embeddings: x,
            layer_probs,
            layer_boxes,
        }
    }

    /// Carries track queries into the current frame using the configured update.
    /// `kalman_anchors` supplies the anchors for the Kalman variant. Returns the
    /// updated queries and, for the motion-aware update, its predicted boxes.
    pub fn update_tracks(
        &self,
        tape: &mut Tape,
        tracks: &QuerySet,
        memory: &EncoderMemory,
        kalman_anchors: Option<&[NormBox]>,
    ) -> (QuerySet, Option<Var>) {
        if tracks.is_empty() {
            return (tracks.clone(), None);
        }
        match self.config.track_update {
            TrackUpdateKind::Mat => {
                let (q, b) = self.mat_update(tape, tracks, memory);
                (q, Some(b))
            }
            TrackUpdateKind::Qim => (qim_like_update(tape, self.qim.as_ref().expect("qim"), tracks), None),
            TrackUpdateKind::Klf => {
                let mut q = qim_like_update(tape, self.qim.as_ref().expect("qim"), tracks);
                let boxes = kalman_anchors.expect("Kalman anchors for every track");
                assert_eq!(boxes.len(), tracks.len());
                q.anchors = tape.constant(Mat::from_vec(
                    boxes.len(),
                    4,
                    boxes.iter().flat_map(|b| b.to_array()).collect(),
                ));
                (q, None)
            }
            TrackUpdateKind::Passthrough => (tracks.clone(), None),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipOptions {
    pub train_mode: bool,
    pub dropout: f64,
    pub seed: u64,
    pub iou_threshold: f64,
    pub match_weights: MatchWeights,
    pub kalman: KalmanNoise,
}

impl Default for ClipOptions {
    fn default() -> Self {
        ClipOptions {
            train_mode: true,
            dropout: 0.1,
            seed: 0,
            iou_threshold: 0.5,
            match_weights: MatchWeights::default(),
            kalman: KalmanNoise::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FrameForward {
    pub output: FrameOutput,
    pub assignment: AssignmentResult,
    /// Identities of the leading track queries, in query order.
    pub track_identities: Vec<u64>,
    /// Motion-aware predictions for the track queries, when that update ran.
    pub mat_boxes: Option<Var>,
    /// Anchors the track queries carried into the decoder.
    pub track_anchors: Vec<NormBox>,
}

#[derive(Debug, Clone)]
pub struct ClipForward {
    pub frames: Vec<FrameForward>,
    pub mat_invocations: usize,
}

/// Runs the full per-frame recurrence over a clip with ground-truth label
/// assignment. Detections matched with IoU at or above the threshold become
/// track queries for the next frame; track queries whose identity left the
/// frame are discarded.
pub fn forward_clip(
    tape: &mut Tape,
    model: &Model,
    clip: &SequenceClip,
    opts: &ClipOptions,
) -> Result<ClipForward> {
    if clip.is_empty() {
        return Err(MatrError::Input("clip has no frames".into()));
    }
    let d = model.config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tracks = QuerySet::empty(tape, d);
    let mut kalman: HashMap<u64, KalmanState> = HashMap::new();
    let mut frames = Vec::with_capacity(clip.len());
    let mut mat_invocations = 0;

    for (t, (image, truth)) in clip.frames.iter().zip(&clip.truth).enumerate() {
        let memory = model.encode(tape, image)?;
        let ids = tracks.track_identities();
        let mut predicted: HashMap<u64, KalmanState> = HashMap::new();
        let kalman_anchors: Option<Vec<NormBox>> = (model.config.track_update == TrackUpdateKind::Klf)
            .then(|| {
                ids.iter()
                    .map(|id| {
                        let (s, b) = kalman_predict(&kalman[id], &opts.kalman);
                        predicted.insert(*id, s);
                        b
                    })
                    .collect()
            });
        let (updated, mat_boxes) = if t > 0 && !tracks.is_empty() {
            if model.config.track_update == TrackUpdateKind::Mat {
                mat_invocations += 1;
            }
            model.update_tracks(tape, &tracks, &memory, kalman_anchors.as_deref())
        } else {
            (tracks.clone(), None)
        };
        let track_anchors = updated.anchor_boxes(tape);
        let detect = model.init_queries(tape);
        let queries = QuerySet::concat(tape, &updated, &detect);
        let output = model.decode(tape, &queries, &memory);

        let n_trk = updated.len();
        let probs = tape.value(output.probs);
        let boxes = output.boxes(tape);
        let detect_preds: Vec<DetectPrediction> = (n_trk..queries.len())
            .map(|q| DetectPrediction {
                probs: probs.row(q).to_vec(),
                bbox: boxes[q],
            })
            .collect();
        let assignment = assign_labels(&ids, &detect_preds, truth, &opts.match_weights)?;

        // Next frame's track set: bound tracks first, then promoted detections.
        let target = assignment.target_of(queries.len());
        let mut keep = Vec::new();
        let mut next_ids = Vec::new();
        for q in 0..queries.len() {
            let Some(j) = target[q] else { continue };
            let promote = q >= n_trk && iou(&boxes[q], &truth[j].bbox) >= opts.iou_threshold;
            if q < n_trk || promote {
                keep.push(q);
                next_ids.push(truth[j].identity);
            }
        }
        if opts.train_mode && opts.dropout > 0.0 {
            let survivors = surviving_track_indices(keep.len(), opts.dropout, &mut rng);
            keep = survivors.iter().map(|&i| keep[i]).collect();
            next_ids = survivors.iter().map(|&i| next_ids[i]).collect();
        }
        if model.config.track_update == TrackUpdateKind::Klf {
            let mut next_kalman = HashMap::new();
            for (&q, &id) in keep.iter().zip(&next_ids) {
                let state = match predicted.get(&id) {
                    Some(p) if q < n_trk => kalman_update(p, &boxes[q], &opts.kalman)?,
                    _ => kalman_init(&boxes[q], &opts.kalman),
                };
                next_kalman.insert(id, state);
            }
            kalman = next_kalman;
        }
        let features = tape.gather_rows(output.embeddings, &keep);
        let anchors = tape.gather_rows(output.boxes, &keep);
        tracks = QuerySet {
            features,
            anchors,
            identities: next_ids.iter().map(|&i| Some(i)).collect(),
            kinds: vec![QueryKind::Track; keep.len()],
        };

        frames.push(FrameForward {
            output,
            assignment,
            track_identities: ids,
            mat_boxes,
            track_anchors,
        });
    }
    Ok(ClipForward {
        frames,
        mat_invocations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_sequence, SynthConfig};

    fn small_config() -> ModelConfig {
        ModelConfig {
            image_height: 32,
            image_width: 32,
            dim: 16,
            num_detect: 4,
            encoder_layers: 1,
            decoder_layers: 2,
            heads: 2,
            ffn_width: 32,
            seed: 7,
            ..Default::default()
        }
    }

    fn clip(len: usize) -> SequenceClip {
        generate_sequence(
            &SynthConfig {
                height: 32,
                width: 32,
                min_objects: 2,
                max_objects: 2,
                entry_exit_prob: 0.0,
                seed: 4,
                ..Default::default()
            },
            len,
        )
        .unwrap()
    }

    #[test]
    fn encode_shape_and_determinism() {
        let model = Model::new(ModelConfig::default()).unwrap();
        let img = clip(1).frames.remove(0);
        let big = crate::synthdata::render_frame(&[], 64, 64);
        let mut tape = Tape::new(&model.params);
        let m1 = model.encode(&mut tape, &big).unwrap();
        assert_eq!(tape.shape(m1.tokens), (64, 64));
        let m2 = model.encode(&mut tape, &big).unwrap();
        assert_eq!(tape.value(m1.tokens), tape.value(m2.tokens));
        assert!(matches!(model.encode(&mut tape, &img), Err(MatrError::Config(_))));
        let mut poked = big.clone();
        poked.set_pixel(30, 30, [1.0, 0.5, 0.2]);
        let m3 = model.encode(&mut tape, &poked).unwrap();
        assert_ne!(tape.value(m1.tokens), tape.value(m3.tokens));
    }

    #[test]
    fn init_queries_contract() {
        let model = Model::new(small_config()).unwrap();
        let again = Model::new(small_config()).unwrap();
        assert_eq!(model.params, again.params);
        let mut tape = Tape::new(&model.params);
        let q = model.init_queries(&mut tape);
        assert_eq!(q.track_count(), 0);
        assert_eq!(q.len(), 4);
        for b in q.anchor_boxes(&tape) {
            for v in b.to_array() {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn mat_update_is_identity_on_features_at_init() {
        let model = Model::new(small_config()).unwrap();
        let c = clip(1);
        let mut tape = Tape::new(&model.params);
        let mem = model.encode(&mut tape, &c.frames[0]).unwrap();
        let tracks = QuerySet::constant_tracks(
            &mut tape,
            &[vec![0.3; 16], vec![-0.2; 16]],
            &[c.truth[0][0].bbox, c.truth[0][1].bbox],
            &[1, 2],
        );
        let (upd, boxes) = model.mat_update(&mut tape, &tracks, &mem);
        assert_eq!(tape.value(upd.features), tape.value(tracks.features));
        assert_eq!(upd.identities, tracks.identities);
        assert_eq!(upd.kinds, tracks.kinds);
        for (a, b) in rows_to_boxes(tape.value(boxes)).iter().zip(tracks.anchor_boxes(&tape)) {
            assert!(a.l1(&b) < 1e-9);
        }
        let empty = QuerySet::empty(&mut tape, 16);
        let (e, _) = model.mat_update(&mut tape, &empty, &mem);
        assert!(e.is_empty());
    }

    #[test]
    fn decode_shape_and_identity_at_init() {
        let cfg = ModelConfig {
            decoder_layers: 1,
            ..small_config()
        };
        let model = Model::new(cfg).unwrap();
        let c = clip(1);
        let mut tape = Tape::new(&model.params);
        let mem = model.encode(&mut tape, &c.frames[0]).unwrap();
        let q = model.init_queries(&mut tape);
        let out = model.decode(&mut tape, &q, &mem);
        let boxes = out.boxes(&tape);
        assert_eq!(boxes.len(), 4);
        for (a, b) in boxes.iter().zip(q.anchor_boxes(&tape)) {
            assert!(a.l1(&b) < 1e-9);
        }
        let p = tape.value(out.probs);
        for r in 0..p.rows {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_frame_clip_skips_mat() {
        let model = Model::new(small_config()).unwrap();
        let mut tape = Tape::new(&model.params);
        let fwd = forward_clip(&mut tape, &model, &clip(1), &ClipOptions::default()).unwrap();
        assert_eq!(fwd.mat_invocations, 0);
        assert!(fwd.frames[0].mat_boxes.is_none());
    }

    #[test]
    fn full_dropout_keeps_every_frame_detect_only() {
        let model = Model::new(small_config()).unwrap();
        let mut tape = Tape::new(&model.params);
        let opts = ClipOptions {
            dropout: 1.0,
            ..Default::default()
        };
        let fwd = forward_clip(&mut tape, &model, &clip(4), &opts).unwrap();
        assert!(fwd.frames.iter().all(|f| f.track_identities.is_empty()));
        assert_eq!(fwd.mat_invocations, 0);
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Model::new(small_config()).unwrap();
        let c = clip(3);
        let run = |train_mode| {
            let mut tape = Tape::new(&model.params);
            let opts = ClipOptions {
                train_mode,
                seed: 9,
                ..Default::default()
            };
            let fwd = forward_clip(&mut tape, &model, &c, &opts).unwrap();
            fwd.frames
                .iter()
                .map(|f| (tape.value(f.output.boxes).clone(), f.assignment.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(true), run(true));
        assert_eq!(run(false), run(false));
    }

    #[test]
    fn kinds_and_sizes_reject_bad_config() {
        let bad = ModelConfig {
            dim: 20,
            ..small_config()
        };
        assert!(Model::new(bad).is_err());
        let bad_heads = ModelConfig {
            heads: 3,
            ..small_config()
        };
        assert!(Model::new(bad_heads).is_err());
        for k in ["mat", "qim", "klf", "passthrough"] {
            assert_eq!(k.parse::<TrackUpdateKind>().unwrap().as_str(), k);
        }
    }
}
