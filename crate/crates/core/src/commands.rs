//! The operations behind each CLI subcommand.
//!
//! Status lines written to `log` start with `# ` so that a command's whole
//! standard output (resolved config followed by status) still parses as a
//! config file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::{build_dataset, Dataset, RunConfig, Split};
use crate::error::{MatrError, Result};
use crate::metrics::MetricsReport;
use crate::model::Model;
use crate::synthdata::{read_mot, read_sequence_dir, write_mot, write_sequence_dir, SequenceClip};
use crate::trainer::{ablation_run, collision_evaluation, train, AblationSetup, AblationTable};
use crate::tracker::run as run_tracker;

fn note(log: &mut dyn Write, msg: &str) {
    // Status output is best-effort; a closed stdout must not fail the command.
    let _ = writeln!(log, "# {msg}");
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MatrError::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| MatrError::io(path, e))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(MatrError::Input(format!("{what} '{}' does not exist", path.display())))
    }
}

/// Writes the train, eval, and collision splits under `out_dir`.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path, log: &mut dyn Write) -> Result<Dataset> {
    cfg.validate()?;
    let data = build_dataset(cfg)?;
    for split in Split::ALL {
        let dir = out_dir.join(split.dir_name());
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| MatrError::io(&dir, e))?;
        }
        for (i, clip) in data.split(split).iter().enumerate() {
            let name = format!("seq-{i:04}");
            write_sequence_dir(&dir.join(&name), &name, clip)?;
        }
        note(log, &format!("wrote {} {} sequences", data.split(split).len(), split.dir_name()));
    }
    write_file(&out_dir.join(format!("config_seed{}.txt", cfg.seed)), cfg.to_text())?;
    Ok(data)
}

/// Sequence directories of one split, in name order.
pub fn load_split(dataset: &Path, split: Split) -> Result<Vec<SequenceClip>> {
    let dir = dataset.join(split.dir_name());
    require(&dir, "dataset split")?;
    let mut dirs: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| MatrError::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(MatrError::Input(format!("'{}' holds no sequences", dir.display())));
    }
    dirs.iter().map(|d| read_sequence_dir(d).map(|(_, clip)| clip)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub checksum: String,
}

pub fn cmd_train(cfg: &RunConfig, dataset: &Path, out_dir: &Path, log: &mut dyn Write) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let train_set = load_split(dataset, Split::Train)?;
    create_dir(out_dir)?;
    let seed = cfg.seed;
    let mode = cfg.train.mode;
    let mut model = Model::new(cfg.model_config(mode, seed))?;
    note(log, &format!("training {mode} for {} steps on {} sequences", cfg.train.steps, train_set.len()));
    let repro = out_dir.join(format!("failed_step_seed{seed}.txt"));
    let outcome = train(&mut model, &train_set, &cfg.train_config(mode, seed), &cfg.loss, Some(&repro))?;
    let loss_log = out_dir.join(format!("loss_seed{seed}.csv"));
    write_file(&loss_log, outcome.loss_csv())?;
    let ckpt = out_dir.join(format!("checkpoint_seed{seed}.json"));
    let checksum = checkpoint::save(&model, &ckpt)?;
    write_file(&out_dir.join(format!("checkpoint_seed{seed}.sha256")), format!("{checksum}\n"))?;
    let last = outcome.log.last().map_or(f64::NAN, |r| r.total);
    note(log, &format!("final loss {last}"));
    note(log, &format!("checkpoint {} sha256 {checksum}", ckpt.display()));
    Ok(TrainArtifacts {
        checkpoint: ckpt,
        loss_log,
        checksum,
    })
}

/// Tracks one sequence directory and writes a MOTChallenge result file.
pub fn cmd_track(cfg: &RunConfig, ckpt: &Path, sequence: &Path, out_file: &Path, log: &mut dyn Write) -> Result<usize> {
    require(ckpt, "checkpoint")?;
    require(sequence, "sequence")?;
    for w in cfg.tracker.validate()? {
        note(log, &format!("warning: {w}"));
    }
    let model = checkpoint::load(ckpt)?;
    let (info, clip) = read_sequence_dir(sequence)?;
    let emissions = run_tracker(&clip.frames, &model, &cfg.tracker)?;
    if let Some(parent) = out_file.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_mot(&emissions, info.width, info.height, out_file)?;
    let n: usize = emissions.iter().map(Vec::len).sum();
    note(log, &format!("{n} boxes over {} frames -> {}", emissions.len(), out_file.display()));
    Ok(n)
}

/// Scores a result file against ground truth and writes the metric files.
pub fn cmd_eval(cfg: &RunConfig, gt: &Path, result: &Path, out_dir: &Path, log: &mut dyn Write) -> Result<MetricsReport> {
    require(gt, "ground truth")?;
    require(result, "result")?;
    let (w, h) = (cfg.synth.width, cfg.synth.height);
    let truth = read_mot(gt, w, h)?;
    let mut res = read_mot(result, w, h)?;
    if res.len() < truth.len() {
        res.resize(truth.len(), Vec::new());
    }
    let report = MetricsReport::compute(&truth, &res)?;
    create_dir(out_dir)?;
    write_file(&out_dir.join("metrics.txt"), report.to_key_values())?;
    write_file(&out_dir.join("hota_curve.csv"), report.curve_csv())?;
    note(
        log,
        &format!(
            "hota {:.4} deta {:.4} assa {:.4} mota {:.4} idf1 {:.4}",
            report.hota, report.deta, report.assa, report.mota, report.idf1
        ),
    );
    Ok(report)
}

pub fn cmd_collide(cfg: &RunConfig, ckpt: &Path, dataset: &Path, out_dir: &Path, log: &mut dyn Write) -> Result<PathBuf> {
    require(ckpt, "checkpoint")?;
    let model = checkpoint::load(ckpt)?;
    let clips = load_split(dataset, Split::Collision)?;
    let stats = collision_evaluation(&model, &clips, cfg.train.iou_threshold)?;
    create_dir(out_dir)?;
    let path = out_dir.join(format!("collision_seed{}.csv", cfg.seed));
    write_file(&path, stats.to_csv())?;
    note(
        log,
        &format!(
            "{} samples, mean distance {:?}, fraction at one {:?}",
            stats.sample_count, stats.mean_distance, stats.fraction_at_one
        ),
    );
    Ok(path)
}

/// Trains and evaluates every configured `(mode, seed)` pair. Uses the
/// dataset on disk when given, otherwise generates it from the config.
pub fn cmd_ablate(cfg: &RunConfig, dataset: Option<&Path>, out_dir: &Path, log: &mut dyn Write) -> Result<AblationTable> {
    cfg.validate()?;
    let data = match dataset {
        Some(d) => Dataset {
            train: load_split(d, Split::Train)?,
            eval: load_split(d, Split::Eval)?,
            collision: load_split(d, Split::Collision)?,
        },
        None => build_dataset(cfg)?,
    };
    let setup = AblationSetup {
        model: cfg.model_config(cfg.train.mode, cfg.seed),
        train: cfg.train.clone(),
        loss: cfg.loss.clone(),
        tracker: cfg.tracker.clone(),
        train_set: &data.train,
        eval_sequences: &data.eval,
        collision_clips: &data.collision,
    };
    let table = ablation_run(&setup, &cfg.ablate.modes, &cfg.ablate.seeds, |row| {
        note(
            log,
            &format!(
                "{} seed {}: hota {:.4} deta {:.4} assa {:.4} collision mean {:?}",
                row.mode, row.seed, row.metrics.hota, row.metrics.deta, row.metrics.assa, row.collision.mean_distance
            ),
        );
    })?;
    create_dir(out_dir)?;
    let seed = cfg.seed;
    write_file(&out_dir.join(format!("ablation_seed{seed}.csv")), table.to_csv())?;
    write_file(&out_dir.join(format!("ablation_runs_seed{seed}.csv")), table.runs_csv())?;
    write_file(&out_dir.join(format!("ablation_seed{seed}.txt")), table.to_text())?;
    for line in table.to_text().lines() {
        note(log, line);
    }
    Ok(table)
}
