//! Flat `key = value` run configuration.
//!
//! Keys use dotted section prefixes (`model.dim`, `tracker.max_misses`).
//! `#` starts a comment. [`RunConfig::to_text`] prints every key, and the
//! printout parses back to the same configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{MatrError, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::synthdata::{generate_sequence, SequenceClip, SynthConfig};
use crate::tracker::TrackerConfig;
use crate::trainer::{TrainConfig, TrainMode};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "MATR_SEED";

/// How many sequences of which length make up a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub train_sequences: usize,
    pub eval_sequences: usize,
    pub collision_clips: usize,
    pub sequence_length: usize,
    pub collision_length: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_sequences: 100,
            eval_sequences: 10,
            collision_clips: 20,
            sequence_length: 20,
            collision_length: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateConfig {
    pub modes: Vec<TrainMode>,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            modes: vec![TrainMode::Matr, TrainMode::QimLike, TrainMode::Klf],
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub tracker: TrackerConfig,
    pub ablate: AblateConfig,
    pub paths: PathsConfig,
}


fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| MatrError::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or(String::new(), |p| p.display().to_string())
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        macro_rules! set {
            ($field:expr) => {
                $field = parse_value(key, v)?
            };
        }
        match key {
            "seed" => set!(self.seed),
            "synth.height" => set!(self.synth.height),
            "synth.width" => set!(self.synth.width),
            "synth.min_objects" => set!(self.synth.min_objects),
            "synth.max_objects" => set!(self.synth.max_objects),
            "synth.min_size" => set!(self.synth.min_size),
            "synth.max_size" => set!(self.synth.max_size),
            "synth.max_speed" => set!(self.synth.max_speed),
            "synth.direction_change_prob" => set!(self.synth.direction_change_prob),
            "synth.crossing" => set!(self.synth.crossing),
            "synth.entry_exit_prob" => set!(self.synth.entry_exit_prob),
            "data.train_sequences" => set!(self.data.train_sequences),
            "data.eval_sequences" => set!(self.data.eval_sequences),
            "data.collision_clips" => set!(self.data.collision_clips),
            "data.sequence_length" => set!(self.data.sequence_length),
            "data.collision_length" => set!(self.data.collision_length),
            "model.dim" => set!(self.model.dim),
            "model.num_detect" => set!(self.model.num_detect),
            "model.encoder_layers" => set!(self.model.encoder_layers),
            "model.decoder_layers" => set!(self.model.decoder_layers),
            "model.mat_layers" => set!(self.model.mat_layers),
            "model.heads" => set!(self.model.heads),
            "model.classes" => set!(self.model.classes),
            "model.ffn_width" => set!(self.model.ffn_width),
            "train.steps" => set!(self.train.steps),
            "train.lr" => set!(self.train.lr),
            "train.weight_decay" => set!(self.train.weight_decay),
            "train.grad_clip" => set!(self.train.grad_clip),
            "train.clip_length" => set!(self.train.clip_length),
            "train.max_stride" => set!(self.train.max_stride),
            "train.dropout" => set!(self.train.dropout),
            "train.iou_threshold" => set!(self.train.iou_threshold),
            "train.mode" => set!(self.train.mode),
            "loss.traj_weight" => set!(self.loss.traj_weight),
            "loss.cls_weight" => set!(self.loss.cls_weight),
            "loss.l1_weight" => set!(self.loss.l1_weight),
            "loss.giou_weight" => set!(self.loss.giou_weight),
            "loss.focal_gamma" => set!(self.loss.focal_gamma),
            "loss.focal_alpha" => set!(self.loss.focal_alpha),
            "tracker.det_threshold" => set!(self.tracker.det_threshold),
            "tracker.track_threshold" => set!(self.tracker.track_threshold),
            "tracker.max_misses" => set!(self.tracker.max_misses),
            "tracker.kalman.position_process" => set!(self.tracker.kalman.position_process),
            "tracker.kalman.velocity_process" => set!(self.tracker.kalman.velocity_process),
            "tracker.kalman.observation" => set!(self.tracker.kalman.observation),
            "tracker.kalman.initial_position" => set!(self.tracker.kalman.initial_position),
            "tracker.kalman.initial_velocity" => set!(self.tracker.kalman.initial_velocity),
            "ablate.modes" => self.ablate.modes = parse_list(key, v)?,
            "ablate.seeds" => self.ablate.seeds = parse_list(key, v)?,
            "paths.dataset" => self.paths.dataset = parse_path(v),
            "paths.checkpoint" => self.paths.checkpoint = parse_path(v),
            "paths.output" => self.paths.output = parse_path(v),
            other => return Err(MatrError::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = |v: &dyn ToString| v.to_string();
        vec![
            ("seed", s(&self.seed)),
            ("synth.height", s(&self.synth.height)),
            ("synth.width", s(&self.synth.width)),
            ("synth.min_objects", s(&self.synth.min_objects)),
            ("synth.max_objects", s(&self.synth.max_objects)),
            ("synth.min_size", s(&self.synth.min_size)),
            ("synth.max_size", s(&self.synth.max_size)),
            ("synth.max_speed", s(&self.synth.max_speed)),
            ("synth.direction_change_prob", s(&self.synth.direction_change_prob)),
            ("synth.crossing", s(&self.synth.crossing)),
            ("synth.entry_exit_prob", s(&self.synth.entry_exit_prob)),
            ("data.train_sequences", s(&self.data.train_sequences)),
            ("data.eval_sequences", s(&self.data.eval_sequences)),
            ("data.collision_clips", s(&self.data.collision_clips)),
            ("data.sequence_length", s(&self.data.sequence_length)),
            ("data.collision_length", s(&self.data.collision_length)),
            ("model.dim", s(&self.model.dim)),
            ("model.num_detect", s(&self.model.num_detect)),
            ("model.encoder_layers", s(&self.model.encoder_layers)),
            ("model.decoder_layers", s(&self.model.decoder_layers)),
            ("model.mat_layers", s(&self.model.mat_layers)),
            ("model.heads", s(&self.model.heads)),
            ("model.classes", s(&self.model.classes)),
            ("model.ffn_width", s(&self.model.ffn_width)),
            ("train.steps", s(&self.train.steps)),
            ("train.lr", s(&self.train.lr)),
            ("train.weight_decay", s(&self.train.weight_decay)),
            ("train.grad_clip", s(&self.train.grad_clip)),
            ("train.clip_length", s(&self.train.clip_length)),
            ("train.max_stride", s(&self.train.max_stride)),
            ("train.dropout", s(&self.train.dropout)),
            ("train.iou_threshold", s(&self.train.iou_threshold)),
            ("train.mode", s(&self.train.mode)),
            ("loss.traj_weight", s(&self.loss.traj_weight)),
            ("loss.cls_weight", s(&self.loss.cls_weight)),
            ("loss.l1_weight", s(&self.loss.l1_weight)),
            ("loss.giou_weight", s(&self.loss.giou_weight)),
            ("loss.focal_gamma", s(&self.loss.focal_gamma)),
            ("loss.focal_alpha", s(&self.loss.focal_alpha)),
            ("tracker.det_threshold", s(&self.tracker.det_threshold)),
            ("tracker.track_threshold", s(&self.tracker.track_threshold)),
            ("tracker.max_misses", s(&self.tracker.max_misses)),
            ("tracker.kalman.position_process", s(&self.tracker.kalman.position_process)),
            ("tracker.kalman.velocity_process", s(&self.tracker.kalman.velocity_process)),
            ("tracker.kalman.observation", s(&self.tracker.kalman.observation)),
            ("tracker.kalman.initial_position", s(&self.tracker.kalman.initial_position)),
            ("tracker.kalman.initial_velocity", s(&self.tracker.kalman.initial_velocity)),
            ("ablate.modes", join(&self.ablate.modes)),
            ("ablate.seeds", join(&self.ablate.seeds)),
            ("paths.dataset", show_path(&self.paths.dataset)),
            ("paths.checkpoint", show_path(&self.paths.checkpoint)),
            ("paths.output", show_path(&self.paths.output)),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Applies the lines of a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| MatrError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected 'key = value', got '{line}'")))?;
            self.set(k.trim(), v).map_err(|e| match e {
                MatrError::Config(m) => parse_err(m),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text, path)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MatrError::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Seed precedence: explicit flag, then the environment, then whatever
    /// the file (or default) set.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<()> {
        if let Some(s) = flag {
            self.seed = s;
        } else if let Some(e) = env {
            self.seed = e
                .trim()
                .parse()
                .map_err(|_| MatrError::Config(format!("{SEED_ENV}='{e}' is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// The model config implied by this run (image size from the synth section).
    pub fn model_config(&self, mode: TrainMode, seed: u64) -> ModelConfig {
        ModelConfig {
            image_height: self.synth.height,
            image_width: self.synth.width,
            seed,
            track_update: mode.track_update(),
            ..self.model.clone()
        }
    }

    pub fn train_config(&self, mode: TrainMode, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            mode,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model_config(self.train.mode, self.seed).validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.tracker.validate()?;
        let d = &self.data;
        if d.train_sequences == 0 || d.eval_sequences == 0 || d.collision_clips == 0 {
            return Err(MatrError::Config("data sequence counts must be positive".into()));
        }
        if d.sequence_length < self.train.clip_length {
            return Err(MatrError::Config(format!(
                "data.sequence_length {} is shorter than train.clip_length {}",
                d.sequence_length, self.train.clip_length
            )));
        }
        if d.collision_length == 0 {
            return Err(MatrError::Config("data.collision_length must be positive".into()));
        }
        if self.ablate.modes.is_empty() || self.ablate.seeds.is_empty() {
            return Err(MatrError::Config("ablate.modes and ablate.seeds must be nonempty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
    Collision,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Eval, Split::Collision];

    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
            Split::Collision => "collision",
        }
    }

    fn offset(&self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Eval => 500_000,
            Split::Collision => 800_000,
        }
    }
}

/// Generator seed of sequence `index` in `split` for dataset seed `seed`.
pub fn sequence_seed(seed: u64, split: Split, index: usize) -> u64 {
    seed.wrapping_mul(1_000_000).wrapping_add(split.offset()).wrapping_add(index as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<SequenceClip>,
    pub eval: Vec<SequenceClip>,
    pub collision: Vec<SequenceClip>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SequenceClip] {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
            Split::Collision => &self.collision,
        }
    }
}

/// Generates all three splits in memory.
pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let make = |split: Split, count: usize, length: usize| -> Result<Vec<SequenceClip>> {
        (0..count)
            .map(|i| {
                let synth = SynthConfig {
                    seed: sequence_seed(cfg.seed, split, i),
                    ..cfg.synth.clone()
                };
                generate_sequence(&synth, length)
            })
            .collect()
    };
    Ok(Dataset {
        train: make(Split::Train, cfg.data.train_sequences, cfg.data.sequence_length)?,
        eval: make(Split::Eval, cfg.data.eval_sequences, cfg.data.sequence_length)?,
        collision: make(Split::Collision, cfg.data.collision_clips, cfg.data.collision_length)?,
    })
}
