//! Linear assignment and the reconstruction losses: per-category set
//! matching for primitives, ground raster loss, and the KL term.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Category, SceneLayout, ScenePrimitive, WeightGroup};

/// Probability clamp used by every BCE term.
pub const BCE_EPSILON: f64 = 1e-7;

/// Result of a square assignment problem: row `i` is matched to column
/// `perm[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost perfect assignment of a square, row-major cost matrix.
///
/// Among optimal assignments the lexicographically smallest permutation is
/// returned. Optimality is established with the O(n³) shortest augmenting
/// path method; the tie-break then walks the equality subgraph of the final
/// dual potentials.
pub fn hungarian(cost: &[f64], n: usize) -> Result<Assignment> {
    if cost.len() != n * n {
        return Err(Error::InvalidCost(format!(
            "{} entries for a {n}x{n} matrix",
            cost.len()
        )));
    }
    if let Some(bad) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::InvalidCost(format!(
            "non-finite entry at ({}, {})",
            bad / n,
            bad % n
        )));
    }
    if n == 0 {
        return Ok(Assignment {
            perm: vec![],
            cost: 0.0,
        });
    }
    let c = |i: usize, j: usize| cost[i * n + j];

    // 1-based potentials; col_row[j] is the row matched to column j.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_col = vec![0usize; n];
    for j in 1..=n {
        row_col[col_row[j] - 1] = j - 1;
    }
    let scale = cost.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-9 * (1.0 + scale);
    let tight: Vec<bool> = (0..n * n)
        .map(|k| (cost[k] - u[k / n + 1] - v[k % n + 1]).abs() <= tol)
        .collect();
    lexicographic_tie_break(&tight, n, &mut row_col);

    let total = (0..n).map(|i| c(i, row_col[i])).sum();
    Ok(Assignment {
        perm: row_col,
        cost: total,
    })
}

/// Rewrites `row_col` (a perfect matching in the tight subgraph) into the
/// lexicographically smallest perfect matching of that subgraph.
fn lexicographic_tie_break(tight: &[bool], n: usize, row_col: &mut [usize]) {
    let mut col_row = vec![0usize; n];
    for (i, &j) in row_col.iter().enumerate() {
        col_row[j] = i;
    }
    for i in 0..n {
        for j in 0..n {
            if j == row_col[i] {
                break;
            }
            if !tight[i * n + j] {
                continue;
            }
            // Column j is held by row k > i. Re-route k along an
            // alternating path over unfixed rows that ends at i's column.
            let k = col_row[j];
            if k < i {
                continue;
            }
            let target = row_col[i];
            if let Some(path) = alternating_path(tight, n, row_col, &col_row, k, target, i) {
                // path: columns taken by rows along the path, starting with k.
                for (row, col) in path {
                    row_col[row] = col;
                    col_row[col] = row;
                }
                row_col[i] = j;
                col_row[j] = i;
                break;
            }
        }
    }
}

/// BFS from row `start` through tight edges to column `target`, using only
/// rows greater than `fixed`. Returns the `(row, new column)` reassignments.
fn alternating_path(
    tight: &[bool],
    n: usize,
    row_col: &[usize],
    col_row: &[usize],
    start: usize,
    target: usize,
    fixed: usize,
) -> Option<Vec<(usize, usize)>> {
    let mut prev_row = vec![usize::MAX; n]; // for each column reached: the row that steps into it
    let mut seen_row = vec![false; n];
    let mut queue = VecDeque::from([start]);
    seen_row[start] = true;
    while let Some(r) = queue.pop_front() {
        for col in 0..n {
            if !tight[r * n + col] || prev_row[col] != usize::MAX || col == row_col[r] {
                continue;
            }
            prev_row[col] = r;
            if col == target {
                let mut out = Vec::new();
                let mut c = col;
                loop {
                    let row = prev_row[c];
                    out.push((row, c));
                    if row == start {
                        return Some(out);
                    }
                    c = row_col[row];
                }
            }
            let next = col_row[col];
            if next > fixed && !seen_row[next] {
                seen_row[next] = true;
                queue.push_back(next);
            }
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Weights

/// Weights of the existence, center and Cholesky terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub prob: f64,
    pub center: f64,
    pub chol: f64,
}

impl MatchWeights {
    /// Fixed weights used for bipartite matching in every category.
    pub const MATCHING: MatchWeights = MatchWeights {
        prob: 6.0,
        center: 3.0,
        chol: 3.0,
    };

    pub fn validate(&self) -> Result<()> {
        if [self.prob, self.center, self.chol]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::config(format!("weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Loss weights per query-count group, plus ground and KL weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeightTable {
    pub low: MatchWeights,
    pub medium: MatchWeights,
    pub high: MatchWeights,
    pub ground_occupancy: f64,
    pub ground_height: f64,
    pub kl: f64,
}

impl Default for LossWeightTable {
    fn default() -> Self {
        Self {
            low: MatchWeights {
                prob: 1.0,
                center: 3.0,
                chol: 2.0,
            },
            medium: MatchWeights {
                prob: 3.0,
                center: 9.0,
                chol: 7.0,
            },
            high: MatchWeights {
                prob: 5.0,
                center: 15.0,
                chol: 12.0,
            },
            ground_occupancy: 1.0,
            ground_height: 9.0,
            kl: 1e-6,
        }
    }
}

impl LossWeightTable {
    pub fn for_category(&self, c: Category) -> MatchWeights {
        match c.spec().group {
            WeightGroup::Low => self.low,
            WeightGroup::Medium => self.medium,
            WeightGroup::High => self.high,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.low.validate()?;
        self.medium.validate()?;
        self.high.validate()?;
        if [self.ground_occupancy, self.ground_height, self.kl]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::config("ground and KL weights must be non-negative"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        t.validate()?;
        Ok(t)
    }
}

// ---------------------------------------------------------------------------
// Object terms

/// Binary cross-entropy of target `p` against prediction `p_hat`, with the
/// prediction clamped to `[ε, 1 − ε]`.
pub fn bce(p: f64, p_hat: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_hat) {
        return Err(Error::InvalidProbability(p_hat));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidProbability(p));
    }
    let q = p_hat.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    Ok(-(p * q.ln() + (1.0 - p) * (1.0 - q).ln()))
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Pairwise cost: weighted BCE on existence plus, for real ground truth,
/// weighted L1 distances of centers and Cholesky codes.
pub fn match_cost(gt: &ScenePrimitive, pred: &ScenePrimitive, w: &MatchWeights) -> Result<f64> {
    let p = if gt.exists { 1.0 } else { 0.0 };
    let mut cost = w.prob * bce(p, pred.probability())?;
    if gt.exists {
        cost += w.center * l1(&gt.center, &pred.center) + w.chol * l1(&gt.cholesky.0, &pred.cholesky.0);
    }
    Ok(cost)
}

/// Optimal assignment of predictions to ground truth within one category.
/// `perm[i]` is the prediction matched to ground-truth entry `i`.
pub fn match_category(gt: &[ScenePrimitive], pred: &[ScenePrimitive], w: &MatchWeights) -> Result<Assignment> {
    if gt.len() != pred.len() {
        return Err(Error::config(format!(
            "set sizes differ: {} vs {}",
            gt.len(),
            pred.len()
        )));
    }
    let n = gt.len();
    let mut cost = Vec::with_capacity(n * n);
    for g in gt {
        for p in pred {
            cost.push(match_cost(g, p, w)?);
        }
    }
    hungarian(&cost, n)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectLoss {
    pub total: f64,
    /// Normalized loss per category; categories without real ground truth
    /// are absent.
    pub per_category: BTreeMap<Category, f64>,
}

/// Matched, per-category object loss for one sample. Both layouts must be
/// padded to the fixed query counts.
pub fn object_loss(gt: &SceneLayout, pred: &SceneLayout, table: &LossWeightTable) -> Result<ObjectLoss> {
    if !gt.is_padded() || !pred.is_padded() {
        return Err(Error::config(
            "object loss needs layouts padded to the fixed query counts",
        ));
    }
    let mut per_category = BTreeMap::new();
    for c in Category::ALL {
        let (g, p) = (gt.category(c), pred.category(c));
        let reals = g.iter().filter(|x| x.exists).count();
        if reals == 0 {
            continue;
        }
        let a = match_category(g, p, &MatchWeights::MATCHING)?;
        let w = table.for_category(c);
        let mut sum = 0.0;
        for (i, &j) in a.perm.iter().enumerate() {
            sum += match_cost(&g[i], &p[j], &w)?;
        }
        per_category.insert(c, sum / reals as f64);
    }
    Ok(ObjectLoss {
        total: per_category.values().sum(),
        per_category,
    })
}

/// Per-sample object losses averaged over the batch.
pub fn object_loss_batch(pairs: &[(SceneLayout, SceneLayout)], table: &LossWeightTable) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let mut total = 0.0;
    for (g, p) in pairs {
        total += object_loss(g, p, table)?.total;
    }
    Ok(total / pairs.len() as f64)
}

// ---------------------------------------------------------------------------
// Ground and KL terms

/// `λ_occ · mean BCE(B̂, B) + λ_height · Σ|Ĥ − H|·B / ΣB`, with the height
/// term taken as 0 when nothing is occupied.
pub fn ground_loss(h: &[f32], b: &[bool], h_hat: &[f32], b_hat: &[f64], table: &LossWeightTable) -> Result<f64> {
    let n = h.len();
    if b.len() != n || h_hat.len() != n || b_hat.len() != n {
        return Err(Error::config(format!(
            "ground shapes differ: H {n}, B {}, Ĥ {}, B̂ {}",
            b.len(),
            h_hat.len(),
            b_hat.len()
        )));
    }
    if n == 0 {
        return Err(Error::config("empty ground raster"));
    }
    let mut bce_sum = 0.0;
    let mut abs_sum = 0.0;
    let mut occupied = 0usize;
    for i in 0..n {
        let target = if b[i] { 1.0 } else { 0.0 };
        bce_sum += bce(target, b_hat[i])?;
        if b[i] {
            abs_sum += (h_hat[i] as f64 - h[i] as f64).abs();
            occupied += 1;
        }
    }
    let height = if occupied == 0 { 0.0 } else { abs_sum / occupied as f64 };
    Ok(table.ground_occupancy * bce_sum / n as f64 + table.ground_height * height)
}

/// Raster-to-raster form of [`ground_loss`], treating predicted occupancy
/// bits as probabilities 0 and 1.
pub fn ground_loss_rasters(
    gt: &crate::raster::GroundRaster,
    pred: &crate::raster::GroundRaster,
    table: &LossWeightTable,
) -> Result<f64> {
    let probs: Vec<f64> = pred.occupancy.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
    ground_loss(&gt.heights, &gt.occupancy, &pred.heights, &probs, table)
}

/// `λ · (−½ Σ_d (1 + log σ² − μ² − σ²))` summed over the `channels` entries
/// of each cell, averaged over cells.
pub fn kl_loss(mu: &[f64], var: &[f64], channels: usize, lambda: f64) -> Result<f64> {
    if mu.len() != var.len() || channels == 0 || !mu.len().is_multiple_of(channels) || mu.is_empty() {
        return Err(Error::config(format!(
            "KL inputs: {} means, {} variances, {channels} channels",
            mu.len(),
            var.len()
        )));
    }
    let mut total = 0.0;
    for (&m, &s2) in mu.iter().zip(var) {
        if !(s2 > 0.0) {
            return Err(Error::InvalidVariance(s2));
        }
        total += 1.0 + s2.ln() - m * m - s2;
    }
    let cells = mu.len() / channels;
    Ok(lambda * (-0.5 * total) / cells as f64)
}
