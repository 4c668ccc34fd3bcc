//! Bipartite assignment and the label-assignment policy for mixed track and
//! detection queries.
//!
//! Track queries are bound to the ground-truth object that carries their
//! identity; only the objects they leave unclaimed are offered to detection
//! queries through Hungarian matching.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MatrError, Result};
use crate::geometry::{giou, iou, NormBox};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AssignmentResult {
    pub matched_pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
    pub unmatched_truth: Vec<usize>,
}

impl AssignmentResult {
    /// Truth index matched to each query, or `None`.
    pub fn target_of(&self, query_count: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; query_count];
        for &(q, t) in &self.matched_pairs {
            out[q] = Some(t);
        }
        out
    }

    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.matched_pairs.iter().map(|&(r, c)| cost[r][c]).sum()
    }
}

/// Minimum-cost assignment of `min(rows, cols)` pairs.
///
/// Shortest augmenting paths with row/column potentials, O(n^2 m).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<AssignmentResult> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    for (r, row) in cost.iter().enumerate() {
        if row.len() != cols {
            return Err(MatrError::Input(format!(
                "cost row {r} has {} entries, expected {cols}",
                row.len()
            )));
        }
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            return Err(MatrError::Input(format!("non-finite cost at ({r}, {c})")));
        }
    }
    if rows == 0 || cols == 0 {
        return Ok(AssignmentResult {
            matched_pairs: Vec::new(),
            unmatched_queries: (0..rows).collect(),
            unmatched_truth: (0..cols).collect(),
        });
    }

    let transpose = rows > cols;
    let (n, m) = if transpose { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| if transpose { cost[j][i] } else { cost[i][j] };

    // 1-based arrays; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| {
            let (i, j) = (owner[j] - 1, j - 1);
            if transpose {
                (j, i)
            } else {
                (i, j)
            }
        })
        .collect();
    pairs.sort_unstable();
    let row_used: HashSet<usize> = pairs.iter().map(|p| p.0).collect();
    let col_used: HashSet<usize> = pairs.iter().map(|p| p.1).collect();
    Ok(AssignmentResult {
        unmatched_queries: (0..rows).filter(|r| !row_used.contains(r)).collect(),
        unmatched_truth: (0..cols).filter(|c| !col_used.contains(c)).collect(),
        matched_pairs: pairs,
    })
}

/// Weights of the detection-query matching cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectPrediction {
    /// Class probabilities including the trailing no-object entry.
    pub probs: Vec<f64>,
    pub bbox: NormBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthObject {
    pub identity: u64,
    pub bbox: NormBox,
    pub class: usize,
}

/// Assigns targets over the concatenated `[track..., detect...]` query list.
pub fn assign_labels(
    track_ids: &[u64],
    detect_predictions: &[DetectPrediction],
    truth: &[TruthObject],
    weights: &MatchWeights,
) -> Result<AssignmentResult> {
    let mut seen = HashSet::new();
    if let Some(dup) = track_ids.iter().find(|id| !seen.insert(**id)) {
        return Err(MatrError::Input(format!("duplicate track identity {dup}")));
    }
    let mut by_identity = HashMap::new();
    for (j, t) in truth.iter().enumerate() {
        if by_identity.insert(t.identity, j).is_some() {
            return Err(MatrError::Input(format!(
                "duplicate truth identity {} in frame",
                t.identity
            )));
        }
    }

    let n_trk = track_ids.len();
    let mut matched = Vec::new();
    let mut unmatched_queries = Vec::new();
    let mut claimed = vec![false; truth.len()];
    for (i, id) in track_ids.iter().enumerate() {
        match by_identity.get(id) {
            Some(&j) => {
                matched.push((i, j));
                claimed[j] = true;
            }
            None => unmatched_queries.push(i),
        }
    }

    let free: Vec<usize> = (0..truth.len()).filter(|&j| !claimed[j]).collect();
    let cost: Vec<Vec<f64>> = detect_predictions
        .iter()
        .map(|p| {
            free.iter()
                .map(|&j| {
                    let t = &truth[j];
                    let prob = p.probs.get(t.class).copied().unwrap_or(0.0);
                    weights.cls * (1.0 - prob)
                        + weights.l1 * p.bbox.l1(&t.bbox)
                        + weights.giou * (1.0 - giou(&p.bbox, &t.bbox))
                })
                .collect()
        })
        .collect();
    let detect = if free.is_empty() {
        AssignmentResult {
            matched_pairs: Vec::new(),
            unmatched_queries: (0..detect_predictions.len()).collect(),
            unmatched_truth: Vec::new(),
        }
    } else {
        hungarian(&cost)?
    };
    for &(q, f) in &detect.matched_pairs {
        matched.push((n_trk + q, free[f]));
        claimed[free[f]] = true;
    }
    unmatched_queries.extend(detect.unmatched_queries.iter().map(|q| n_trk + q));
    matched.sort_unstable();
    unmatched_queries.sort_unstable();
    Ok(AssignmentResult {
        matched_pairs: matched,
        unmatched_queries,
        unmatched_truth: (0..truth.len()).filter(|&j| !claimed[j]).collect(),
    })
}

/// Indices of the track queries that survive dropout with probability `p`.
/// Survivors keep their relative order.
pub fn surviving_track_indices<R: Rng>(count: usize, p: f64, rng: &mut R) -> Vec<usize> {
    (0..count)
        .filter(|_| p <= 0.0 || rng.random::<f64>() >= p)
        .collect()
}

/// Seeded variant of [`surviving_track_indices`].
pub fn drop_track_queries(count: usize, p: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(MatrError::Config(format!("dropout probability {p} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(surviving_track_indices(count, p, &mut rng))
}

pub const COLLISION_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct CollisionStats {
    /// `None` when no samples were collected.
    pub mean_distance: Option<f64>,
    pub histogram: [u64; COLLISION_BINS],
    pub fraction_at_one: Option<f64>,
    pub sample_count: u64,
}

impl CollisionStats {
    pub fn from_distances(distances: &[f64]) -> Self {
        let mut histogram = [0u64; COLLISION_BINS];
        for &d in distances {
            let bin = ((d * COLLISION_BINS as f64).floor() as usize).min(COLLISION_BINS - 1);
            histogram[bin] += 1;
        }
        let n = distances.len();
        if n == 0 {
            return CollisionStats {
                mean_distance: None,
                histogram,
                fraction_at_one: None,
                sample_count: 0,
            };
        }
        let at_one = distances.iter().filter(|&&d| d >= 1.0 - 1e-9).count();
        CollisionStats {
            mean_distance: Some(distances.iter().sum::<f64>() / n as f64),
            histogram,
            fraction_at_one: Some(at_one as f64 / n as f64),
            sample_count: n as u64,
        }
    }

    /// `# mean=..,fraction_at_one=..,samples=..` header, then `bin_left,count` rows.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        let mut out = format!(
            "# mean={},fraction_at_one={},samples={}\nbin_left,count\n",
            fmt(self.mean_distance),
            fmt(self.fraction_at_one),
            self.sample_count
        );
        for (i, c) in self.histogram.iter().enumerate() {
            let _ = writeln!(out, "{:.2},{}", i as f64 / COLLISION_BINS as f64, c);
        }
        out
    }
}

/// Statistics of `1 - iou(pred_i, truth_i)` over aligned pairs.
pub fn collision_stats(predicted: &[NormBox], bound_truth: &[NormBox]) -> Result<CollisionStats> {
    if predicted.len() != bound_truth.len() {
        return Err(MatrError::Input(format!(
            "{} predictions vs {} bound truths",
            predicted.len(),
            bound_truth.len()
        )));
    }
    let d: Vec<f64> = predicted
        .iter()
        .zip(bound_truth)
        .map(|(p, t)| 1.0 - iou(p, t))
        .collect();
    Ok(CollisionStats::from_distances(&d))
}
