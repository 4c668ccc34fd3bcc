//! Deterministic synthetic tracking sequences and MOTChallenge text I/O.
//!
//! Objects are colored rectangles on a black background moving with
//! piecewise-constant velocity. Later objects are painted over earlier ones,
//! so overlaps produce genuine occlusions.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assignment::TruthObject;
use crate::error::{MatrError, Result};
use crate::geometry::NormBox;

/// Row-major `height x width x 3` image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| MatrError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| MatrError::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Image {
            height: h as usize,
            width: w as usize,
            data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub identity: u64,
    pub spawn_frame: usize,
    /// Exclusive.
    pub despawn_frame: usize,
    pub boxes: Vec<NormBox>,
    pub color: [f64; 3],
    pub class: usize,
}

impl ObjectTrack {
    pub fn box_at(&self, frame: usize) -> Option<NormBox> {
        if frame >= self.spawn_frame && frame < self.despawn_frame {
            Some(self.boxes[frame - self.spawn_frame])
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceClip {
    pub frames: Vec<Image>,
    pub truth: Vec<Vec<TruthObject>>,
}

impl SequenceClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames `start, start + stride, ...` (`count` of them).
    pub fn subclip(&self, start: usize, stride: usize, count: usize) -> Result<SequenceClip> {
        let last = start + stride * count.saturating_sub(1);
        if count == 0 || stride == 0 || last >= self.len() {
            return Err(MatrError::Input(format!(
                "subclip start={start} stride={stride} count={count} exceeds length {}",
                self.len()
            )));
        }
        let idx = (0..count).map(|k| start + k * stride);
        Ok(SequenceClip {
            frames: idx.clone().map(|i| self.frames[i].clone()).collect(),
            truth: idx.map(|i| self.truth[i].clone()).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Maximum center displacement per frame, as a fraction of the image.
    pub max_speed: f64,
    pub direction_change_prob: f64,
    pub crossing: bool,
    pub entry_exit_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            min_objects: 3,
            max_objects: 6,
            min_size: 0.12,
            max_size: 0.22,
            max_speed: 0.03,
            direction_change_prob: 0.1,
            crossing: true,
            entry_exit_prob: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MatrError::Config(m));
        if self.height < 32 || self.width < 32 {
            return fail(format!("image {}x{} smaller than 32x32", self.height, self.width));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return fail(format!(
                "object count range [{}, {}] is empty or zero",
                self.min_objects, self.max_objects
            ));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size < 1.0) {
            return fail(format!(
                "object size range [{}, {}] does not fit inside the frame",
                self.min_size, self.max_size
            ));
        }
        if !(self.max_speed >= 0.0 && self.max_speed.is_finite()) {
            return fail(format!("max_speed {} must be finite and >= 0", self.max_speed));
        }
        for (name, p) in [
            ("direction_change_prob", self.direction_change_prob),
            ("entry_exit_prob", self.entry_exit_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} {p} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

struct Mover {
    track: ObjectTrack,
    pos: [f64; 2],
    vel: [f64; 2],
    size: [f64; 2],
    /// Frames before which direction changes and exits are suppressed.
    locked_until: usize,
}

impl Mover {
    fn current_box(&self) -> NormBox {
        NormBox {
            cx: self.pos[0],
            cy: self.pos[1],
            w: self.size[0],
            h: self.size[1],
        }
    }

    fn advance(&mut self) {
        for a in 0..2 {
            let half = 0.5 * self.size[a];
            let mut p = self.pos[a] + self.vel[a];
            if p < half {
                p = 2.0 * half - p;
                self.vel[a] = -self.vel[a];
            } else if p > 1.0 - half {
                p = 2.0 * (1.0 - half) - p;
                self.vel[a] = -self.vel[a];
            }
            self.pos[a] = p.clamp(half, 1.0 - half);
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // Bright colors quantized to 8 bits so PNG round trips are exact.
    let mut c = [0.0; 3];
    let strong = rng.random_range(0..3);
    for (i, v) in c.iter_mut().enumerate() {
        let raw: f64 = if i == strong {
            rng.random_range(0.7..1.0)
        } else {
            rng.random_range(0.0..1.0)
        };
        *v = (raw * 255.0).round() / 255.0;
    }
    c
}

fn spawn(
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
    identity: u64,
    frame: usize,
) -> Mover {
    let w = rng.random_range(config.min_size..=config.max_size);
    let h = rng.random_range(config.min_size..=config.max_size);
    let pos = [
        rng.random_range(0.5 * w..=1.0 - 0.5 * w),
        rng.random_range(0.5 * h..=1.0 - 0.5 * h),
    ];
    let speed = config.max_speed * rng.random_range(0.3..=1.0);
    let angle = rng.random_range(0.0..2.0 * PI);
    Mover {
        track: ObjectTrack {
            identity,
            spawn_frame: frame,
            despawn_frame: frame,
            boxes: Vec::new(),
            color: random_color(rng),
            class: 0,
        },
        pos,
        vel: [speed * angle.cos(), speed * angle.sin()],
        size: [w, h],
        locked_until: 0,
    }
}

/// Sets two movers on straight paths that meet at the same point at frame `meet`.
fn arrange_crossing(
    a: &mut Mover,
    b: &mut Mover,
    meet: usize,
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
) {
    let target = [rng.random_range(0.35..0.65), rng.random_range(0.35..0.65)];
    let angle = rng.random_range(0.0..2.0 * PI);
    let spread = rng.random_range(0.6 * PI..1.4 * PI);
    for (m, theta) in [(a, angle), (b, angle + spread)] {
        let dir = [theta.cos(), theta.sin()];
        let mut speed = config.max_speed * rng.random_range(0.6..=1.0);
        if meet > 0 {
            // Keep the straight back-projection from `target` inside the frame.
            for ax in 0..2 {
                let half = 0.5 * m.size[ax];
                let room = if dir[ax] > 0.0 {
                    target[ax] - half
                } else {
                    1.0 - half - target[ax]
                };
                if dir[ax].abs() > 1e-12 {
                    speed = speed.min(room / (dir[ax].abs() * meet as f64));
                }
            }
        }
        m.vel = [speed * dir[0], speed * dir[1]];
        m.pos = [
            target[0] - m.vel[0] * meet as f64,
            target[1] - m.vel[1] * meet as f64,
        ];
        m.locked_until = meet + 1;
    }
}

/// Generates a clip of `length` frames. Deterministic given `config.seed`.
pub fn generate_sequence(config: &SynthConfig, length: usize) -> Result<SequenceClip> {
    Ok(generate_with_tracks(config, length)?.0)
}

/// Like [`generate_sequence`] but also returns the underlying object tracks.
pub fn generate_with_tracks(
    config: &SynthConfig,
    length: usize,
) -> Result<(SequenceClip, Vec<ObjectTrack>)> {
    config.validate()?;
    if length == 0 {
        return Err(MatrError::Config("sequence length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut next_id = 1u64;
    let initial = rng.random_range(config.min_objects..=config.max_objects);
    let mut live: Vec<Mover> = (0..initial)
        .map(|_| {
            let m = spawn(config, &mut rng, next_id, 0);
            next_id += 1;
            m
        })
        .collect();
    if config.crossing && live.len() >= 2 {
        let meet = (length - 1) / 2;
        let (head, tail) = live.split_at_mut(1);
        arrange_crossing(&mut head[0], &mut tail[0], meet, config, &mut rng);
    }

    let mut finished = Vec::new();
    for frame in 0..length {
        if frame > 0 {
            let mut idx = 0;
            while idx < live.len() {
                let can_exit = live.len() > config.min_objects && frame >= live[idx].locked_until;
                if can_exit && rng.random::<f64>() < config.entry_exit_prob {
                    finished.push(live.remove(idx).track);
                } else {
                    idx += 1;
                }
            }
            if live.len() < config.max_objects && rng.random::<f64>() < config.entry_exit_prob {
                live.push(spawn(config, &mut rng, next_id, frame));
                next_id += 1;
            }
            for m in live.iter_mut().filter(|m| m.track.spawn_frame < frame) {
                if frame >= m.locked_until && rng.random::<f64>() < config.direction_change_prob {
                    let turn = rng.random_range(-0.5 * PI..0.5 * PI);
                    let (s, c) = turn.sin_cos();
                    m.vel = [c * m.vel[0] - s * m.vel[1], s * m.vel[0] + c * m.vel[1]];
                }
                m.advance();
            }
        }
        for m in live.iter_mut() {
            let b = m.current_box();
            m.track.boxes.push(b);
            m.track.despawn_frame = frame + 1;
        }
    }
    finished.extend(live.into_iter().map(|m| m.track));
    finished.sort_by_key(|t| t.identity);

    let mut frames = Vec::with_capacity(length);
    let mut truth = Vec::with_capacity(length);
    for frame in 0..length {
        let present: Vec<(&ObjectTrack, NormBox)> = finished
            .iter()
            .filter_map(|t| t.box_at(frame).map(|b| (t, b)))
            .collect();
        let objects: Vec<(NormBox, [f64; 3])> = present.iter().map(|(t, b)| (*b, t.color)).collect();
        frames.push(render_frame(&objects, config.height, config.width));
        truth.push(
            present
                .iter()
                .map(|(t, b)| TruthObject {
                    identity: t.identity,
                    bbox: *b,
                    class: t.class,
                })
                .collect(),
        );
    }
    Ok((SequenceClip { frames, truth }, finished))
}

/// Paints filled rectangles in list order on a black canvas.
pub fn render_frame(objects: &[(NormBox, [f64; 3])], height: usize, width: usize) -> Image {
    let mut img = Image::zeros(height, width);
    for (b, color) in objects {
        for y in 0..height {
            let fy = (y as f64 + 0.5) / height as f64;
            if fy < b.top() || fy >= b.bottom() {
                continue;
            }
            for x in 0..width {
                let fx = (x as f64 + 0.5) / width as f64;
                if fx >= b.left() && fx < b.right() {
                    img.set_pixel(x, y, *color);
                }
            }
        }
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotRecord {
    pub identity: u64,
    pub bbox: NormBox,
    pub confidence: f64,
}

/// Per-frame records; index 0 is MOT frame 1.
pub type MotFrames = Vec<Vec<MotRecord>>;

pub fn format_mot(frames: &[Vec<MotRecord>], width: usize, height: usize) -> String {
    let (w, h) = (width as f64, height as f64);
    let mut out = String::new();
    for (f, records) in frames.iter().enumerate() {
        let mut sorted: Vec<&MotRecord> = records.iter().collect();
        sorted.sort_by_key(|r| r.identity);
        for r in sorted {
            let _ = writeln!(
                out,
                "{},{},{:.2},{:.2},{:.2},{:.2},{:.2},-1,-1,-1",
                f + 1,
                r.identity,
                r.bbox.left() * w,
                r.bbox.top() * h,
                r.bbox.w * w,
                r.bbox.h * h,
                r.confidence
            );
        }
    }
    out
}

pub fn write_mot(frames: &[Vec<MotRecord>], width: usize, height: usize, path: &Path) -> Result<()> {
    for records in frames {
        if let Some(r) = records.iter().find(|r| r.identity == 0) {
            return Err(MatrError::Input(format!(
                "identity must be positive, got {}",
                r.identity
            )));
        }
    }
    fs::write(path, format_mot(frames, width, height)).map_err(|e| MatrError::io(path, e))
}

pub fn parse_mot(text: &str, width: usize, height: usize, path: &Path) -> Result<MotFrames> {
    let (w, h) = (width as f64, height as f64);
    let mut frames: MotFrames = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| MatrError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 7 {
            return Err(err(format!("expected at least 7 fields, found {}", fields.len())));
        }
        let frame: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("bad frame '{}'", fields[0])))?;
        let identity: u64 = fields[1]
            .parse()
            .map_err(|_| err(format!("bad identity '{}'", fields[1])))?;
        if frame == 0 || identity == 0 {
            return Err(err("frame and identity must be positive".into()));
        }
        let mut nums = [0.0; 5];
        for (k, slot) in nums.iter_mut().enumerate() {
            *slot = fields[2 + k]
                .parse()
                .map_err(|_| err(format!("bad number '{}'", fields[2 + k])))?;
        }
        let [left, top, bw, bh, confidence] = nums;
        if bw <= 0.0 || bh <= 0.0 {
            return Err(err(format!("non-positive box size {bw}x{bh}")));
        }
        if frames.len() < frame {
            frames.resize(frame, Vec::new());
        }
        frames[frame - 1].push(MotRecord {
            identity,
            bbox: NormBox {
                cx: (left + 0.5 * bw) / w,
                cy: (top + 0.5 * bh) / h,
                w: bw / w,
                h: bh / h,
            },
            confidence,
        });
    }
    Ok(frames)
}

pub fn read_mot(path: &Path, width: usize, height: usize) -> Result<MotFrames> {
    let text = fs::read_to_string(path).map_err(|e| MatrError::io(path, e))?;
    parse_mot(&text, width, height, path)
}

pub fn truth_to_mot(truth: &[Vec<TruthObject>]) -> MotFrames {
    truth
        .iter()
        .map(|objs| {
            objs.iter()
                .map(|t| MotRecord {
                    identity: t.identity,
                    bbox: t.bbox,
                    confidence: 1.0,
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqInfo {
    pub name: String,
    pub length: usize,
    pub width: usize,
    pub height: usize,
}

impl SeqInfo {
    pub fn to_text(&self) -> String {
        format!(
            "name={}\nlength={}\nwidth={}\nheight={}\n",
            self.name, self.length, self.width, self.height
        )
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut name = None;
        let (mut length, mut width, mut height) = (None, None, None);
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| MatrError::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got '{line}'")))?;
            let num = || -> Result<usize> {
                v.trim()
                    .parse()
                    .map_err(|_| err(format!("bad integer '{}'", v.trim())))
            };
            match k.trim() {
                "name" => name = Some(v.trim().to_string()),
                "length" => length = Some(num()?),
                "width" => width = Some(num()?),
                "height" => height = Some(num()?),
                _ => {}
            }
        }
        let missing = |k: &str| MatrError::Input(format!("{} is missing '{k}'", path.display()));
        Ok(SeqInfo {
            name: name.ok_or_else(|| missing("name"))?,
            length: length.ok_or_else(|| missing("length"))?,
            width: width.ok_or_else(|| missing("width"))?,
            height: height.ok_or_else(|| missing("height"))?,
        })
    }
}

/// Writes `gt.txt`, `seqinfo` and `img/NNNNNN.png` frames into `dir`.
pub fn write_sequence_dir(dir: &Path, name: &str, clip: &SequenceClip) -> Result<()> {
    let img_dir = dir.join("img");
    fs::create_dir_all(&img_dir).map_err(|e| MatrError::io(&img_dir, e))?;
    let first = clip
        .frames
        .first()
        .ok_or_else(|| MatrError::Input("cannot write an empty sequence".into()))?;
    let info = SeqInfo {
        name: name.to_string(),
        length: clip.len(),
        width: first.width,
        height: first.height,
    };
    let seqinfo = dir.join("seqinfo");
    fs::write(&seqinfo, info.to_text()).map_err(|e| MatrError::io(&seqinfo, e))?;
    write_mot(&truth_to_mot(&clip.truth), info.width, info.height, &dir.join("gt.txt"))?;
    for (i, frame) in clip.frames.iter().enumerate() {
        frame.save_png(&img_dir.join(format!("{:06}.png", i + 1)))?;
    }
    Ok(())
}

pub fn read_seqinfo(dir: &Path) -> Result<SeqInfo> {
    let path = dir.join("seqinfo");
    let text = fs::read_to_string(&path).map_err(|e| MatrError::io(&path, e))?;
    SeqInfo::parse(&text, &path)
}

/// Loads a sequence directory written by [`write_sequence_dir`]. All truth
/// objects get class 0.
pub fn read_sequence_dir(dir: &Path) -> Result<(SeqInfo, SequenceClip)> {
    let info = read_seqinfo(dir)?;
    let mut gt = read_mot(&dir.join("gt.txt"), info.width, info.height)?;
    if gt.len() > info.length {
        return Err(MatrError::Input(format!(
            "{}: gt.txt has frames beyond length {}",
            dir.display(),
            info.length
        )));
    }
    gt.resize(info.length, Vec::new());
    let mut frames = Vec::with_capacity(info.length);
    for i in 0..info.length {
        let img = Image::load_png(&dir.join("img").join(format!("{:06}.png", i + 1)))?;
        if img.width != info.width || img.height != info.height {
            return Err(MatrError::Input(format!(
                "frame {} is {}x{}, seqinfo says {}x{}",
                i + 1,
                img.width,
                img.height,
                info.width,
                info.height
            )));
        }
        frames.push(img);
    }
    let truth = gt
        .into_iter()
        .map(|recs| {
            recs.into_iter()
                .map(|r| TruthObject {
                    identity: r.identity,
                    bbox: r.bbox,
                    class: 0,
                })
                .collect()
        })
        .collect();
    Ok((info, SequenceClip { frames, truth }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> NormBox {
        NormBox { cx, cy, w, h }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            seed: 11,
            ..Default::default()
        };
        let a = generate_sequence(&cfg, 20).unwrap();
        let c = generate_sequence(&cfg, 20).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn crossing_event_present() {
        for seed in 0..20 {
            let cfg = SynthConfig {
                seed,
                ..Default::default()
            };
            let (_, tracks) = generate_with_tracks(&cfg, 16).unwrap();
            let crossed = (0..16).any(|f| {
                tracks.iter().enumerate().any(|(i, a)| {
                    tracks.iter().skip(i + 1).any(|c| match (a.box_at(f), c.box_at(f)) {
                        (Some(p), Some(q)) => {
                            let d = ((p.cx - q.cx).powi(2) + (p.cy - q.cy).powi(2)).sqrt();
                            d < (p.w + q.w) / 4.0
                        }
                        _ => false,
                    })
                })
            });
            assert!(crossed, "seed {seed} has no crossing");
        }
    }

    #[test]
    fn fixed_population_without_entry_exit() {
        let cfg = SynthConfig {
            min_objects: 4,
            max_objects: 4,
            entry_exit_prob: 0.0,
            seed: 5,
            ..Default::default()
        };
        let clip = generate_sequence(&cfg, 30).unwrap();
        assert!(clip.truth.iter().all(|f| f.len() == 4));
    }

    #[test]
    fn motion_respects_bounds_speed_and_identity_rules() {
        for seed in 0..10 {
            let cfg = SynthConfig {
                seed,
                entry_exit_prob: 0.1,
                direction_change_prob: 0.3,
                ..Default::default()
            };
            let (clip, tracks) = generate_with_tracks(&cfg, 40).unwrap();
            for t in &tracks {
                assert_eq!(t.boxes.len(), t.despawn_frame - t.spawn_frame);
                for w in t.boxes.windows(2) {
                    let d = ((w[1].cx - w[0].cx).powi(2) + (w[1].cy - w[0].cy).powi(2)).sqrt();
                    assert!(d <= cfg.max_speed + 1e-12);
                }
            }
            let mut ids: Vec<u64> = tracks.iter().map(|t| t.identity).collect();
            ids.dedup();
            assert_eq!(ids.len(), tracks.len());
            for frame in &clip.truth {
                for o in frame {
                    assert!(o.bbox.is_valid());
                    assert!(o.bbox.left() >= -1e-12 && o.bbox.right() <= 1.0 + 1e-12);
                    assert!(o.bbox.top() >= -1e-12 && o.bbox.bottom() <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn impossible_config_rejected() {
        let cfg = SynthConfig {
            max_size: 1.5,
            ..Default::default()
        };
        assert!(matches!(generate_sequence(&cfg, 5), Err(MatrError::Config(_))));
        let small = SynthConfig {
            height: 16,
            ..Default::default()
        };
        assert!(matches!(generate_sequence(&small, 5), Err(MatrError::Config(_))));
    }

    #[test]
    fn render_examples() {
        let empty = render_frame(&[], 32, 32);
        assert!(empty.data.iter().all(|v| *v == 0.0));
        let full = render_frame(&[(b(0.5, 0.5, 1.0, 1.0), [1.0, 0.0, 0.0])], 32, 32);
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(full.pixel(x, y), [1.0, 0.0, 0.0]);
            }
        }
        let two = render_frame(
            &[
                (b(0.4, 0.4, 0.4, 0.4), [1.0, 0.0, 0.0]),
                (b(0.6, 0.6, 0.4, 0.4), [0.0, 0.0, 1.0]),
            ],
            40,
            40,
        );
        // Overlap is [0.4, 0.6)^2, centroid 0.5 -> pixel 20.
        assert_eq!(two.pixel(20, 20), [0.0, 0.0, 1.0]);
        assert_eq!(two.pixel(10, 10), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn mot_line_format() {
        let frames = vec![vec![MotRecord {
            identity: 1,
            bbox: NormBox::from_corners(10.0 / 100.0, 20.0 / 100.0, 40.0 / 100.0, 60.0 / 100.0),
            confidence: 1.0,
        }]];
        assert_eq!(
            format_mot(&frames, 100, 100),
            "1,1,10.00,20.00,30.00,40.00,1.00,-1,-1,-1\n"
        );
    }

    #[test]
    fn mot_round_trip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.txt");
        let frames = vec![
            vec![
                MotRecord {
                    identity: 4,
                    bbox: b(0.3, 0.4, 0.1, 0.2),
                    confidence: 0.75,
                },
                MotRecord {
                    identity: 2,
                    bbox: b(0.7, 0.2, 0.15, 0.1),
                    confidence: 0.9,
                },
            ],
            vec![],
            vec![MotRecord {
                identity: 4,
                bbox: b(0.31, 0.41, 0.1, 0.2),
                confidence: 0.5,
            }],
        ];
        write_mot(&frames, 64, 48, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let first: Vec<&str> = text.lines().map(|l| &l[..4]).collect();
        assert_eq!(first, vec!["1,2,", "1,4,", "3,4,"]);
        let back = read_mot(&path, 64, 48).unwrap();
        assert_eq!(back.len(), 3);
        for (fa, fb) in frames.iter().zip(&back) {
            let mut fa = fa.clone();
            fa.sort_by_key(|r| r.identity);
            assert_eq!(fa.len(), fb.len());
            for (x, y) in fa.iter().zip(fb) {
                assert_eq!(x.identity, y.identity);
                assert!((x.bbox.cx - y.bbox.cx).abs() * 64.0 <= 1e-2);
                assert!((x.bbox.cy - y.bbox.cy).abs() * 48.0 <= 1e-2);
                assert!((x.bbox.w - y.bbox.w).abs() * 64.0 <= 1e-2);
                assert!((x.bbox.h - y.bbox.h).abs() * 48.0 <= 1e-2);
            }
        }
        write_mot(&[], 64, 48, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
        assert!(read_mot(&path, 64, 48).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "1,1,1,1,2,2,1,-1,-1,-1\n2,x,1,1,2,2,1,-1,-1,-1\n";
        match parse_mot(text, 10, 10, Path::new("gt.txt")) {
            Err(MatrError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn sequence_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clip = generate_sequence(
            &SynthConfig {
                seed: 3,
                ..Default::default()
            },
            4,
        )
        .unwrap();
        write_sequence_dir(dir.path(), "seq-0", &clip).unwrap();
        let (info, back) = read_sequence_dir(dir.path()).unwrap();
        assert_eq!(info.length, 4);
        assert_eq!(back.frames, clip.frames);
        for (a, c) in clip.truth.iter().zip(&back.truth) {
            assert_eq!(a.len(), c.len());
            for (x, y) in a.iter().zip(c) {
                assert_eq!(x.identity, y.identity);
                assert!(x.bbox.l1(&y.bbox) < 4.0 * 0.01 / 64.0 + 1e-12);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn mot_text_round_trip(boxes in prop::collection::vec(
                (1u64..50, 0.1..0.9f64, 0.1..0.9f64, 0.05..0.2f64, 0.05..0.2f64, 0.0..1.0f64), 0..12)) {
                let mut frame: Vec<MotRecord> = Vec::new();
                for (id, cx, cy, w, h, c) in boxes {
                    if frame.iter().all(|r| r.identity != id) {
                        frame.push(MotRecord { identity: id, bbox: NormBox { cx, cy, w, h }, confidence: c });
                    }
                }
                frame.sort_by_key(|r| r.identity);
                let text = format_mot(&[frame.clone()], 200, 100);
                let back = parse_mot(&text, 200, 100, Path::new("x")).unwrap();
                let got = back.first().cloned().unwrap_or_default();
                prop_assert_eq!(got.len(), frame.len());
                for (x, y) in frame.iter().zip(&got) {
                    prop_assert_eq!(x.identity, y.identity);
                    prop_assert!((x.bbox.left() - y.bbox.left()).abs() * 200.0 <= 5e-3 + 1e-9);
                    prop_assert!((x.bbox.w - y.bbox.w).abs() * 200.0 <= 5e-3 + 1e-9);
                    prop_assert!((x.bbox.top() - y.bbox.top()).abs() * 100.0 <= 5e-3 + 1e-9);
                }
            }
        }
    }
}
