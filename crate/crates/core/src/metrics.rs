//! HOTA (with DetA/AssA), CLEAR-MOT MOTA, and IDF1.
//!
//! Reports keep the raw accumulators so several sequences can be pooled the
//! way the reference evaluation does: detection counts are summed and AssA is
//! averaged weighted by true positives.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use crate::assignment::{hungarian, TruthObject};
use crate::error::{MatrError, Result};
use crate::geometry::iou;
use crate::synthdata::{truth_to_mot, MotRecord};

/// IoU thresholds `0.05, 0.10, ..., 0.95`.
pub fn alpha_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 * 0.05).collect()
}

const MATCH_EPS: f64 = 1e-10;
/// Bonus that keeps last frame's correspondences in CLEAR matching.
const CONTINUITY_BONUS: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
    /// Sum over true positives of their association accuracy.
    pub assoc_sum: f64,
}

impl AlphaPoint {
    pub fn deta(&self) -> f64 {
        let denom = self.tp + self.fn_ + self.fp;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }

    pub fn assa(&self) -> f64 {
        if self.tp == 0 {
            if self.fn_ + self.fp == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.assoc_sum / self.tp as f64
        }
    }

    pub fn hota(&self) -> f64 {
        (self.deta() * self.assa()).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClearCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub idsw: u64,
    pub truth: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IdCounts {
    pub idtp: u64,
    pub idfp: u64,
    pub idfn: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    pub mota: f64,
    pub idf1: f64,
    pub curve: Vec<AlphaPoint>,
    pub clear: ClearCounts,
    pub ids: IdCounts,
}

fn frame_ids(frames: &[Vec<MotRecord>], what: &str) -> Result<Vec<u64>> {
    let mut all = Vec::new();
    let mut seen_all = HashSet::new();
    for (t, f) in frames.iter().enumerate() {
        let mut seen = HashSet::new();
        for r in f {
            if !seen.insert(r.identity) {
                return Err(MatrError::Input(format!(
                    "{what} frame {} repeats identity {}",
                    t + 1,
                    r.identity
                )));
            }
            if seen_all.insert(r.identity) {
                all.push(r.identity);
            }
        }
    }
    Ok(all)
}

fn similarity(gt: &[MotRecord], tr: &[MotRecord]) -> Vec<Vec<f64>> {
    gt.iter()
        .map(|g| tr.iter().map(|t| iou(&g.bbox, &t.bbox)).collect())
        .collect()
}

/// Maximizing assignment over a score matrix; empty sides give no pairs.
fn max_assignment(score: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    if score.is_empty() || score[0].is_empty() {
        return Ok(Vec::new());
    }
    let cost: Vec<Vec<f64>> = score.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    Ok(hungarian(&cost)?.matched_pairs)
}

fn check_lengths(truth: &[Vec<MotRecord>], result: &[Vec<MotRecord>]) -> Result<()> {
    if result.len() > truth.len() {
        return Err(MatrError::Input(format!(
            "result has {} frames but truth has {}",
            result.len(),
            truth.len()
        )));
    }
    Ok(())
}

fn result_frame(result: &[Vec<MotRecord>], t: usize) -> &[MotRecord] {
    result.get(t).map_or(&[], Vec::as_slice)
}

/// Per-alpha HOTA accumulators.
pub fn hota_curve(truth: &[Vec<MotRecord>], result: &[Vec<MotRecord>]) -> Result<Vec<AlphaPoint>> {
    check_lengths(truth, result)?;
    let gt_ids = frame_ids(truth, "truth")?;
    let tr_ids = frame_ids(result, "result")?;
    let gi: HashMap<u64, usize> = gt_ids.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    let ti: HashMap<u64, usize> = tr_ids.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let (ng, nt) = (gt_ids.len(), tr_ids.len());

    let mut potential = vec![vec![0.0; nt]; ng];
    let mut gt_count = vec![0.0; ng];
    let mut tr_count = vec![0.0; nt];
    let mut sims = Vec::with_capacity(truth.len());
    for (t, gt) in truth.iter().enumerate() {
        let tr = result_frame(result, t);
        let sim = similarity(gt, tr);
        let row_sum: Vec<f64> = sim.iter().map(|r| r.iter().sum()).collect();
        let col_sum: Vec<f64> = (0..tr.len()).map(|j| sim.iter().map(|r| r[j]).sum()).collect();
        for (a, g) in gt.iter().enumerate() {
            for (b, r) in tr.iter().enumerate() {
                let denom = row_sum[a] + col_sum[b] - sim[a][b];
                if denom > MATCH_EPS {
                    potential[gi[&g.identity]][ti[&r.identity]] += sim[a][b] / denom;
                }
            }
            gt_count[gi[&g.identity]] += 1.0;
        }
        for r in tr {
            tr_count[ti[&r.identity]] += 1.0;
        }
        sims.push(sim);
    }
    let alignment: Vec<Vec<f64>> = (0..ng)
        .map(|g| {
            (0..nt)
                .map(|t| {
                    let p = potential[g][t];
                    let d = gt_count[g] + tr_count[t] - p;
                    if d > 0.0 {
                        p / d
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();

    let alphas = alpha_grid();
    let mut matches = vec![vec![vec![0u64; nt]; ng]; alphas.len()];
    let mut points: Vec<AlphaPoint> = alphas
        .iter()
        .map(|&alpha| AlphaPoint {
            alpha,
            tp: 0,
            fn_: 0,
            fp: 0,
            assoc_sum: 0.0,
        })
        .collect();
    for (t, gt) in truth.iter().enumerate() {
        let tr = result_frame(result, t);
        let sim = &sims[t];
        let score: Vec<Vec<f64>> = gt
            .iter()
            .enumerate()
            .map(|(a, g)| {
                tr.iter()
                    .enumerate()
                    .map(|(b, r)| alignment[gi[&g.identity]][ti[&r.identity]] * sim[a][b])
                    .collect()
            })
            .collect();
        let pairs = max_assignment(&score)?;
        for (k, p) in points.iter_mut().enumerate() {
            let mut tp = 0;
            for &(a, b) in &pairs {
                if sim[a][b] >= p.alpha - MATCH_EPS {
                    tp += 1;
                    matches[k][gi[&gt[a].identity]][ti[&tr[b].identity]] += 1;
                }
            }
            p.tp += tp;
            p.fn_ += gt.len() as u64 - tp;
            p.fp += tr.len() as u64 - tp;
        }
    }
    for (k, p) in points.iter_mut().enumerate() {
        let mut sum = 0.0;
        for g in 0..ng {
            for t in 0..nt {
                let m = matches[k][g][t] as f64;
                if m > 0.0 {
                    sum += m * m / (gt_count[g] + tr_count[t] - m);
                }
            }
        }
        p.assoc_sum = sum;
    }
    Ok(points)
}

/// `(hota, deta, assa)` averaged over the alpha grid.
pub fn hota(truth: &[Vec<MotRecord>], result: &[Vec<MotRecord>]) -> Result<(f64, f64, f64)> {
    let curve = hota_curve(truth, result)?;
    Ok(curve_means(&curve))
}

fn curve_means(curve: &[AlphaPoint]) -> (f64, f64, f64) {
    let n = curve.len() as f64;
    (
        curve.iter().map(AlphaPoint::hota).sum::<f64>() / n,
        curve.iter().map(AlphaPoint::deta).sum::<f64>() / n,
        curve.iter().map(AlphaPoint::assa).sum::<f64>() / n,
    )
}

/// CLEAR-MOT counts at IoU threshold `alpha`.
pub fn clear_counts(truth: &[Vec<MotRecord>], result: &[Vec<MotRecord>], alpha: f64) -> Result<ClearCounts> {
    check_lengths(truth, result)?;
    frame_ids(truth, "truth")?;
    frame_ids(result, "result")?;
    let mut last_match: HashMap<u64, u64> = HashMap::new();
    let mut prev_frame: HashMap<u64, u64> = HashMap::new();
    let mut c = ClearCounts::default();
    for (t, gt) in truth.iter().enumerate() {
        let tr = result_frame(result, t);
        let sim = similarity(gt, tr);
        let score: Vec<Vec<f64>> = gt
            .iter()
            .enumerate()
            .map(|(a, g)| {
                tr.iter()
                    .enumerate()
                    .map(|(b, r)| {
                        if sim[a][b] < alpha - MATCH_EPS {
                            0.0
                        } else if prev_frame.get(&g.identity) == Some(&r.identity) {
                            sim[a][b] + CONTINUITY_BONUS
                        } else {
                            sim[a][b]
                        }
                    })
                    .collect()
            })
            .collect();
        let pairs: Vec<(usize, usize)> = max_assignment(&score)?
            .into_iter()
            .filter(|&(a, b)| score[a][b] > 0.0)
            .collect();
        prev_frame.clear();
        for &(a, b) in &pairs {
            let (g, r) = (gt[a].identity, tr[b].identity);
            if last_match.get(&g).is_some_and(|&prev| prev != r) {
                c.idsw += 1;
            }
            last_match.insert(g, r);
            prev_frame.insert(g, r);
        }
        let tp = pairs.len() as u64;
        c.tp += tp;
        c.fn_ += gt.len() as u64 - tp;
        c.fp += tr.len() as u64 - tp;
        c.truth += gt.len() as u64;
    }
    Ok(c)
}

fn mota_from(c: &ClearCounts) -> Result<f64> {
    if c.truth == 0 {
        return Err(MatrError::Input("MOTA is undefined without truth objects".into()));
    }
    Ok(1.0 - (c.fn_ + c.fp + c.idsw) as f64 / c.truth as f64)
}

pub fn mota(truth: &[Vec<MotRecord>], result: &[Vec<MotRecord>], alpha: f64) -> Result<f64> {
    mota_from(&clear_counts(truth, result, alpha)?)
}

pub fn id_counts(truth: &[Vec<MotRecord>], result: &[Vec<MotRecord>], alpha: f64) -> Result<IdCounts> {
    check_lengths(truth, result)?;
    let gt_ids = frame_ids(truth, "truth")?;
    let tr_ids = frame_ids(result, "result")?;
    let gi: HashMap<u64, usize> = gt_ids.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    let ti: HashMap<u64, usize> = tr_ids.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let mut overlap = vec![vec![0.0; tr_ids.len()]; gt_ids.len()];
    let (mut n_gt, mut n_tr) = (0u64, 0u64);
    for (t, gt) in truth.iter().enumerate() {
        let tr = result_frame(result, t);
        for g in gt {
            for r in tr {
                if iou(&g.bbox, &r.bbox) >= alpha - MATCH_EPS {
                    overlap[gi[&g.identity]][ti[&r.identity]] += 1.0;
                }
            }
        }
        n_gt += gt.len() as u64;
        n_tr += tr.len() as u64;
    }
    let idtp: f64 = max_assignment(&overlap)?.iter().map(|&(g, t)| overlap[g][t]).sum();
    let idtp = idtp as u64;
    Ok(IdCounts {
        idtp,
        idfp: n_tr - idtp,
        idfn: n_gt - idtp,
    })
}

fn idf1_from(c: &IdCounts) -> Result<f64> {
    let denom = 2 * c.idtp + c.idfp + c.idfn;
    if denom == 0 {
        return Err(MatrError::Input("IDF1 is undefined with no truth and no results".into()));
    }
    Ok(2.0 * c.idtp as f64 / denom as f64)
}

pub fn idf1(truth: &[Vec<MotRecord>], result: &[Vec<MotRecord>], alpha: f64) -> Result<f64> {
    idf1_from(&id_counts(truth, result, alpha)?)
}

impl MetricsReport {
    pub fn compute(truth: &[Vec<MotRecord>], result: &[Vec<MotRecord>]) -> Result<Self> {
        let curve = hota_curve(truth, result)?;
        let clear = clear_counts(truth, result, 0.5)?;
        let ids = id_counts(truth, result, 0.5)?;
        Self::from_parts(curve, clear, ids)
    }

    fn from_parts(curve: Vec<AlphaPoint>, clear: ClearCounts, ids: IdCounts) -> Result<Self> {
        let (hota, deta, assa) = curve_means(&curve);
        Ok(MetricsReport {
            hota,
            deta,
            assa,
            mota: mota_from(&clear)?,
            idf1: idf1_from(&ids)?,
            curve,
            clear,
            ids,
        })
    }

    /// Combines per-sequence reports into one.
    pub fn pooled(reports: &[MetricsReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| MatrError::Input("no sequences to pool".into()))?;
        let mut curve = first.curve.clone();
        let mut clear = first.clear;
        let mut ids = first.ids;
        for r in &reports[1..] {
            for (p, q) in curve.iter_mut().zip(&r.curve) {
                p.tp += q.tp;
                p.fn_ += q.fn_;
                p.fp += q.fp;
                p.assoc_sum += q.assoc_sum;
            }
            clear.tp += r.clear.tp;
            clear.fp += r.clear.fp;
            clear.fn_ += r.clear.fn_;
            clear.idsw += r.clear.idsw;
            clear.truth += r.clear.truth;
            ids.idtp += r.ids.idtp;
            ids.idfp += r.ids.idfp;
            ids.idfn += r.ids.idfn;
        }
        Self::from_parts(curve, clear, ids)
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("hota", self.hota),
            ("deta", self.deta),
            ("assa", self.assa),
            ("mota", self.mota),
            ("idf1", self.idf1),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (k, v) in [
            ("tp", self.clear.tp),
            ("fp", self.clear.fp),
            ("fn", self.clear.fn_),
            ("idsw", self.clear.idsw),
            ("truth", self.clear.truth),
            ("idtp", self.ids.idtp),
            ("idfp", self.ids.idfp),
            ("idfn", self.ids.idfn),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn curve_csv(&self) -> String {
        let mut s = String::from("alpha,hota,deta,assa,tp,fn,fp\n");
        for p in &self.curve {
            let _ = writeln!(
                s,
                "{:.2},{},{},{},{},{},{}",
                p.alpha,
                p.hota(),
                p.deta(),
                p.assa(),
                p.tp,
                p.fn_,
                p.fp
            );
        }
        s
    }
}

/// Scores tracker output against synthetic truth.
pub fn evaluate_sequence(truth: &[Vec<TruthObject>], result: &[Vec<MotRecord>]) -> Result<MetricsReport> {
    MetricsReport::compute(&truth_to_mot(truth), result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::NormBox;
    use proptest::prelude::*;

    fn rec(identity: u64, cx: f64, cy: f64) -> MotRecord {
        MotRecord {
            identity,
            bbox: NormBox {
                cx,
                cy,
                w: 0.1,
                h: 0.1,
            },
            confidence: 1.0,
        }
    }

    /// Two well-separated objects over `frames` frames.
    fn two_objects(frames: usize) -> Vec<Vec<MotRecord>> {
        (0..frames)
            .map(|t| {
                let x = 0.2 + 0.05 * t as f64;
                vec![rec(1, x, 0.3), rec(2, x, 0.7)]
            })
            .collect()
    }

    #[test]
    fn alpha_grid_shape() {
        let g = alpha_grid();
        assert_eq!(g.len(), 19);
        assert!((g[0] - 0.05).abs() < 1e-12 && (g[18] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn perfect_result() {
        let gt = two_objects(5);
        let m = MetricsReport::compute(&gt, &gt).unwrap();
        assert!((m.hota - 1.0).abs() < 1e-9);
        assert!((m.deta - 1.0).abs() < 1e-9);
        assert!((m.assa - 1.0).abs() < 1e-9);
        assert_eq!(m.mota, 1.0);
        assert_eq!(m.idf1, 1.0);
        assert_eq!(m.clear, ClearCounts { tp: 10, fp: 0, fn_: 0, idsw: 0, truth: 10 });
    }

    #[test]
    fn empty_result() {
        let gt = two_objects(4);
        let empty = vec![Vec::new(); 4];
        let m = MetricsReport::compute(&gt, &empty).unwrap();
        assert_eq!(m.hota, 0.0);
        assert_eq!(m.mota, 0.0);
        assert_eq!(m.idf1, 0.0);
        assert_eq!(m.clear.fn_, 8);
        // A result file that stops early counts as empty frames.
        assert_eq!(MetricsReport::compute(&gt, &[]).unwrap().clear.fn_, 8);
    }

    #[test]
    fn one_swap() {
        let gt = two_objects(4);
        let mut res = gt.clone();
        for f in &mut res[2..] {
            for r in f.iter_mut() {
                r.identity = 3 - r.identity;
            }
        }
        let m = MetricsReport::compute(&gt, &res).unwrap();
        // Every (gt, tr) pair shares 2 of 4 frames: A = 2 / (4 + 4 - 2).
        assert!((m.deta - 1.0).abs() < 1e-9);
        assert!((m.assa - 1.0 / 3.0).abs() < 1e-9);
        assert!((m.hota - (1.0f64 / 3.0).sqrt()).abs() < 1e-9);
        assert_eq!(m.clear.idsw, 2);
        assert!((m.mota - 0.75).abs() < 1e-9);
        assert_eq!(m.ids, IdCounts { idtp: 4, idfp: 4, idfn: 4 });
        assert!((m.idf1 - 0.5).abs() < 1e-9);
    }

    #[test]
    fn one_false_positive_per_frame() {
        let gt = two_objects(10);
        let mut res = gt.clone();
        for f in &mut res {
            f.push(rec(99, 0.9, 0.1));
        }
        let m = MetricsReport::compute(&gt, &res).unwrap();
        assert_eq!(m.clear, ClearCounts { tp: 20, fp: 10, fn_: 0, idsw: 0, truth: 20 });
        assert!((m.mota - 0.5).abs() < 1e-9);
        assert!((m.deta - 2.0 / 3.0).abs() < 1e-9);
        assert!((m.assa - 1.0).abs() < 1e-9);
        assert!((m.hota - (2.0f64 / 3.0).sqrt()).abs() < 1e-9);
        assert!((m.idf1 - 0.8).abs() < 1e-9);
    }

    #[test]
    fn duplicate_identity_rejected() {
        let gt = vec![vec![rec(1, 0.2, 0.2), rec(1, 0.6, 0.6)]];
        assert!(matches!(hota(&gt, &gt), Err(MatrError::Input(_))));
        let empty_gt: Vec<Vec<MotRecord>> = vec![vec![]];
        assert!(mota(&empty_gt, &empty_gt, 0.5).is_err());
    }

    #[test]
    fn pooling_two_halves_matches_counts() {
        let gt = two_objects(6);
        let a = MetricsReport::compute(&gt[..3], &gt[..3]).unwrap();
        let b = MetricsReport::compute(&gt[3..], &gt[3..]).unwrap();
        let p = MetricsReport::pooled(&[a, b]).unwrap();
        assert_eq!(p.clear.tp, 12);
        assert!((p.hota - 1.0).abs() < 1e-9);
        assert!(p.to_key_values().contains("hota = 1"));
        assert_eq!(p.curve_csv().lines().count(), 20);
    }

    fn arb_frames() -> impl Strategy<Value = Vec<Vec<MotRecord>>> {
        prop::collection::vec(
            prop::collection::vec((1u64..5, 0.1..0.9f64, 0.1..0.9f64), 0..4).prop_map(|objs| {
                let mut seen = HashSet::new();
                objs.into_iter()
                    .filter(|o| seen.insert(o.0))
                    .map(|(id, x, y)| rec(id, x, y))
                    .collect::<Vec<_>>()
            }),
            1..6,
        )
    }

    proptest! {
        #[test]
        fn relabeling_results_changes_nothing(gt in arb_frames(), res in arb_frames(), shift in 10u64..50) {
            prop_assume!(gt.iter().any(|f| !f.is_empty()));
            let n = gt.len().min(res.len());
            let res = &res[..n];
            let renamed: Vec<Vec<MotRecord>> = res.iter().map(|f| f.iter().map(|r| MotRecord { identity: r.identity * 7 + shift, ..*r }).collect()).collect();
            let a = MetricsReport::compute(&gt, res).unwrap();
            let b = MetricsReport::compute(&gt, &renamed).unwrap();
            prop_assert!((a.hota - b.hota).abs() < 1e-9);
            prop_assert!((a.mota - b.mota).abs() < 1e-9);
            prop_assert!((a.idf1 - b.idf1).abs() < 1e-9);
            let mean_of_sqrt = a.curve.iter().map(|p| (p.deta() * p.assa()).sqrt()).sum::<f64>() / 19.0;
            prop_assert!((a.hota - mean_of_sqrt).abs() < 1e-9);
            for v in [a.hota, a.deta, a.assa, a.idf1] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
            prop_assert!(a.mota <= 1.0);
        }

        #[test]
        fn deleting_a_correct_detection_never_raises_deta(gt in arb_frames(), frame in 0usize..6, which in 0usize..4) {
            prop_assume!(gt.iter().any(|f| !f.is_empty()));
            let full = hota_curve(&gt, &gt).unwrap();
            let mut cut = gt.clone();
            let t = frame % cut.len();
            prop_assume!(!cut[t].is_empty());
            let k = which % cut[t].len();
            cut[t].remove(k);
            let less = hota_curve(&gt, &cut).unwrap();
            for (p, q) in full.iter().zip(&less) {
                prop_assert!(q.deta() <= p.deta() + 1e-12);
            }
        }
    }
}
