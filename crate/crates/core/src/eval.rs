//! Clustering accuracy under an optimal label matching, base/novel and quadrant
//! breakdowns, backbone feature deviation and embedding export.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Quadrant;
use crate::{Error, Result};

/// Minimum-cost perfect matching on a square cost matrix.
///
/// Returns `g` with `g[row] = col`. Among all optimal assignments the
/// lexicographically smallest `g` is returned.
pub fn assignment_solve(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    for (i, row) in cost.iter().enumerate() {
        if row.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n}x{n} cost matrix"),
                actual: format!("row {i} has {} entries", row.len()),
            });
        }
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite cost {v} in row {i}")));
        }
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let (u, v, matching) = hungarian(cost);
    let scale = cost
        .iter()
        .flat_map(|r| r.iter())
        .fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * scale * n as f64;
    let tight: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| cost[i][j] - u[i] - v[j] <= tol).collect())
        .collect();
    Ok(lexicographic_tight_matching(&tight, matching))
}

/// Shortest-augmenting-path Hungarian method with row/column potentials.
/// Returns `(u, v, row_to_col)` with `cost[i][j] - u[i] - v[j] >= 0` everywhere
/// and equality on the matching.
fn hungarian(cost: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let n = cost.len();
    let inf = f64::INFINITY;
    // 1-based arrays; index 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
    (u[1..].to_vec(), v[1..].to_vec(), row_col)
}

/// Given a perfect matching inside the tight-edge graph, rewrite it into the
/// lexicographically smallest perfect matching of that graph.
fn lexicographic_tight_matching(tight: &[Vec<bool>], mut row_col: Vec<usize>) -> Vec<usize> {
    let n = tight.len();
    let mut col_row = vec![0usize; n];
    for (r, &c) in row_col.iter().enumerate() {
        col_row[c] = r;
    }
    let mut col_locked = vec![false; n];
    for i in 0..n {
        for j in 0..row_col[i] {
            if col_locked[j] || !tight[i][j] {
                continue;
            }
            // Give column j to row i; its current owner must reach i's old column
            // through an alternating path among unlocked rows > i.
            let freed = row_col[i];
            let owner = col_row[j];
            let mut prev_col = vec![usize::MAX; n];
            let mut visited_row = vec![false; n];
            visited_row[i] = true;
            visited_row[owner] = true;
            let mut queue = std::collections::VecDeque::from([owner]);
            let mut reached = false;
            while let Some(r) = queue.pop_front() {
                for c in 0..n {
                    if col_locked[c] || c == j || !tight[r][c] || prev_col[c] != usize::MAX {
                        continue;
                    }
                    prev_col[c] = r;
                    if c == freed {
                        reached = true;
                        break;
                    }
                    let next = col_row[c];
                    if !visited_row[next] {
                        visited_row[next] = true;
                        queue.push_back(next);
                    }
                }
                if reached {
                    break;
                }
            }
            if reached {
                let mut c = freed;
                loop {
                    let r = prev_col[c];
                    let old = row_col[r];
                    row_col[r] = c;
                    col_row[c] = r;
                    if r == owner {
                        break;
                    }
                    c = old;
                }
                row_col[i] = j;
                col_row[j] = i;
                break;
            }
        }
        col_locked[row_col[i]] = true;
    }
    row_col
}

/// Clustering accuracy report for one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_all: f64,
    /// `None` when no instance of a base class is present.
    pub acc_base: Option<f64>,
    pub acc_novel: Option<f64>,
    pub n_all: usize,
    pub n_base: usize,
    pub n_novel: usize,
    /// Predicted cluster index to ground-truth class.
    pub matching: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadrants: Option<QuadrantReport>,
}

impl EvalReport {
    pub fn is_correct(&self, y_true: usize, y_pred: usize) -> bool {
        self.matching.get(y_pred) == Some(&y_true)
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            expected: format!("{a} predictions"),
            actual: format!("{b}"),
        });
    }
    Ok(())
}

/// Optimal one-to-one matching from predicted clusters to classes over all
/// instances, computed on a `D x D` contingency table with `D = max label + 1`.
pub fn label_matching(y_true: &[usize], y_pred: &[usize]) -> Result<Vec<usize>> {
    check_lengths(y_true.len(), y_pred.len())?;
    let d = y_true.iter().chain(y_pred).copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![vec![0.0f64; d]; d];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        counts[p][t] += 1.0;
    }
    let cost: Vec<Vec<f64>> = counts.iter().map(|r| r.iter().map(|c| -c).collect()).collect();
    assignment_solve(&cost)
}

/// Accuracy over all, base-class and novel-class instances with one shared matching.
/// `base_classes` lists the ground-truth classes that were labeled during training;
/// `num_classes`, when given, bounds the valid label range.
pub fn cluster_acc(
    y_true: &[usize],
    y_pred: &[usize],
    base_classes: &std::collections::BTreeSet<usize>,
    num_classes: Option<usize>,
) -> Result<EvalReport> {
    check_lengths(y_true.len(), y_pred.len())?;
    if y_true.is_empty() {
        return Err(Error::InvalidArgument("no instances to evaluate".into()));
    }
    if let Some(k) = num_classes {
        if let Some(&bad) = y_true.iter().chain(y_pred).find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
    }
    let matching = label_matching(y_true, y_pred)?;
    let mut hits = [0usize; 3];
    let mut totals = [0usize; 3];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        let ok = (matching[p] == t) as usize;
        let bucket = if base_classes.contains(&t) { 1 } else { 2 };
        for b in [0, bucket] {
            hits[b] += ok;
            totals[b] += 1;
        }
    }
    let ratio = |b: usize| (totals[b] > 0).then(|| hits[b] as f64 / totals[b] as f64);
    Ok(EvalReport {
        acc_all: hits[0] as f64 / totals[0] as f64,
        acc_base: ratio(1),
        acc_novel: ratio(2),
        n_all: totals[0],
        n_base: totals[1],
        n_novel: totals[2],
        matching,
        quadrants: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadrantEntry {
    pub acc: f64,
    pub n: usize,
}

/// Per-quadrant accuracy; quadrants without instances are absent.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QuadrantReport {
    pub entries: BTreeMap<String, QuadrantEntry>,
}

impl QuadrantReport {
    pub fn get(&self, q: Quadrant) -> Option<&QuadrantEntry> {
        self.entries.get(q.tag())
    }

    pub fn annotated(&self) -> usize {
        self.entries.values().map(|e| e.n).sum()
    }
}

/// Accuracy per quadrant using the matching already fitted on the full set.
/// `quadrants[i] = None` marks an instance without scene annotation.
pub fn quadrant_report(
    y_true: &[usize],
    y_pred: &[usize],
    quadrants: &[Option<Quadrant>],
    matching: &[usize],
) -> Result<QuadrantReport> {
    check_lengths(y_true.len(), y_pred.len())?;
    check_lengths(y_true.len(), quadrants.len())?;
    if quadrants.iter().all(Option::is_none) {
        return Err(Error::Unannotated("all instances".into()));
    }
    let mut acc: BTreeMap<Quadrant, (usize, usize)> = BTreeMap::new();
    for ((&t, &p), q) in y_true.iter().zip(y_pred).zip(quadrants) {
        if let Some(q) = q {
            let e = acc.entry(*q).or_default();
            e.0 += (matching.get(p) == Some(&t)) as usize;
            e.1 += 1;
        }
    }
    Ok(QuadrantReport {
        entries: acc
            .into_iter()
            .map(|(q, (h, n))| {
                (
                    q.tag().to_string(),
                    QuadrantEntry {
                        acc: h as f64 / n as f64,
                        n,
                    },
                )
            })
            .collect(),
    })
}

/// Signed and absolute mean differences between original and object features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationStats {
    /// Mean over batch and dimensions of `v_x - v_o`.
    pub mean_dev: f64,
    /// Mean over batch of `||v_x - v_o||_1 / d`.
    pub l1_dev: f64,
    pub step: usize,
}

pub fn feature_deviation(v_x: &[Vec<f64>], v_o: &[Vec<f64>], step: usize) -> Result<DeviationStats> {
    check_lengths(v_x.len(), v_o.len())?;
    if v_x.is_empty() {
        return Err(Error::InvalidArgument("empty feature batch".into()));
    }
    let d = v_x[0].len();
    let mut signed = 0.0;
    let mut l1 = 0.0;
    for (a, b) in v_x.iter().zip(v_o) {
        if a.len() != d || b.len() != d {
            return Err(Error::ShapeMismatch {
                expected: format!("feature dimension {d}"),
                actual: format!("{} / {}", a.len(), b.len()),
            });
        }
        let mut row_l1 = 0.0;
        for (x, o) in a.iter().zip(b) {
            signed += x - o;
            row_l1 += (x - o).abs();
        }
        l1 += row_l1 / d as f64;
    }
    let n = v_x.len() as f64;
    Ok(DeviationStats {
        mean_dev: signed / (n * d as f64),
        l1_dev: l1 / n,
        step,
    })
}

/// Write `id,label,z_0,...,z_{p-1}` rows. Values use Rust's shortest round-trip
/// formatting, so re-exports of the same embeddings are byte-identical.
pub fn write_embeddings(path: &Path, ids: &[String], labels: &[usize], z: &[Vec<f64>]) -> Result<()> {
    check_lengths(ids.len(), labels.len())?;
    check_lengths(ids.len(), z.len())?;
    let p = z.first().map_or(0, Vec::len);
    let mut out = String::from("id,label");
    for k in 0..p {
        out.push_str(&format!(",z_{k}"));
    }
    out.push('\n');
    for ((id, label), row) in ids.iter().zip(labels).zip(z) {
        if row.len() != p {
            return Err(Error::ShapeMismatch {
                expected: format!("embedding dimension {p}"),
                actual: row.len().to_string(),
            });
        }
        out.push_str(&format!("{id},{label}"));
        for v in row {
            out.push_str(&format!(",{}", *v as f32));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn brute(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
        fn rec(i: usize, cost: &[Vec<f64>], used: &mut Vec<bool>, cur: &mut Vec<usize>, best: &mut (f64, Vec<usize>)) {
            let n = cost.len();
            if i == n {
                let c: f64 = cur.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
                if c < best.0 {
                    *best = (c, cur.clone());
                }
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    cur.push(j);
                    rec(i + 1, cost, used, cur, best);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = (f64::INFINITY, vec![]);
        rec(0, cost, &mut vec![false; cost.len()], &mut vec![], &mut best);
        best
    }

    #[test]
    fn identity_and_permutation_costs() {
        let n = 5;
        let id: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i != j) as u8 as f64).collect()).collect();
        assert_eq!(assignment_solve(&id).unwrap(), vec![0, 1, 2, 3, 4]);
        let pi = [3, 0, 4, 1, 2];
        let c: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (pi[i] != j) as u8 as f64).collect()).collect();
        assert_eq!(assignment_solve(&c).unwrap(), pi.to_vec());
    }

    #[test]
    fn ties_pick_lexicographically_smallest() {
        let zeros = vec![vec![0.0; 4]; 4];
        assert_eq!(assignment_solve(&zeros).unwrap(), vec![0, 1, 2, 3]);
        // Two optimal matchings: [1,0,2] and [0,1,2]... only one if costs differ.
        let c = vec![vec![1.0, 0.0, 5.0], vec![0.0, 1.0, 5.0], vec![5.0, 5.0, 0.0]];
        assert_eq!(assignment_solve(&c).unwrap(), vec![1, 0, 2]);
        let c = vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0], vec![1.0, 1.0, 1.0]];
        assert_eq!(assignment_solve(&c).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn matches_brute_force_on_small_integers() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for n in 1..=6 {
            for _ in 0..60 {
                let c: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..n).map(|_| rng.random_range(0..4) as f64).collect())
                    .collect();
                let (best_cost, best) = brute(&c);
                let g = assignment_solve(&c).unwrap();
                let cost: f64 = g.iter().enumerate().map(|(r, &j)| c[r][j]).sum();
                assert_eq!(cost, best_cost);
                // brute enumerates in lexicographic order and keeps the first strict minimum
                assert_eq!(g, best, "{c:?}");
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(assignment_solve(&[vec![0.0, 1.0]]).is_err());
        assert!(assignment_solve(&[vec![f64::NAN]]).is_err());
        assert!(assignment_solve(&[]).unwrap().is_empty());
    }

    #[test]
    fn cluster_acc_basics() {
        let y = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let base: BTreeSet<usize> = [0, 1].into();
        let r = cluster_acc(&y, &y, &base, Some(4)).unwrap();
        assert_eq!((r.acc_all, r.acc_base, r.acc_novel), (1.0, Some(1.0), Some(1.0)));
        let p: Vec<usize> = y.iter().map(|&l| [2, 3, 0, 1][l]).collect();
        assert_eq!(cluster_acc(&y, &p, &base, Some(4)).unwrap().acc_all, 1.0);
        let p = vec![0, 1, 1, 1, 2, 2, 2, 3];
        let r = cluster_acc(&y, &p, &base, Some(4)).unwrap();
        assert_eq!(r.acc_all, 6.0 / 8.0);
        assert_eq!(r.acc_base, Some(3.0 / 4.0));
        assert!(cluster_acc(&y, &p[..3], &base, None).is_err());
        assert!(cluster_acc(&[0], &[5], &base, Some(4)).is_err());
    }

    #[test]
    fn deviation_examples() {
        let a = vec![vec![1.0, 2.0], vec![3.0, -1.0]];
        let s = feature_deviation(&a, &a, 0).unwrap();
        assert_eq!((s.mean_dev, s.l1_dev), (0.0, 0.0));
        let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v - 0.25).collect()).collect();
        let s = feature_deviation(&a, &b, 0).unwrap();
        assert!((s.mean_dev - 0.25).abs() < 1e-15 && (s.l1_dev - 0.25).abs() < 1e-15);
        let c: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v + 0.5).collect()).collect();
        let s = feature_deviation(&a, &c, 0).unwrap();
        assert!((s.mean_dev + 0.5).abs() < 1e-15 && (s.l1_dev - 0.5).abs() < 1e-15);
        assert!(feature_deviation(&a, &a[..1], 0).is_err());
    }

    #[test]
    fn quadrants_absent_when_empty() {
        let y = vec![0, 1, 2];
        let m = label_matching(&y, &y).unwrap();
        let q = vec![Some(Quadrant::ALL[0]), Some(Quadrant::ALL[0]), None];
        let r = quadrant_report(&y, &y, &q, &m).unwrap();
        assert_eq!(r.entries.len(), 1);
        assert_eq!(r.annotated(), 2);
        assert!(quadrant_report(&y, &y, &[None, None, None], &m).is_err());
    }
}
