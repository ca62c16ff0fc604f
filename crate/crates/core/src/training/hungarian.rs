//! Optimal assignment (Kuhn–Munkres / Jonker–Volgenant variant) with a
//! deterministic lexicographic tie-break.
//!
//! The raw solver finds *a* minimum-cost matching; when several matchings
//! share the optimal total, [`hungarian_match`] refines the answer to the
//! lexicographically smallest pair sequence by fixing pairs one query at a
//! time and re-solving the remainder.

use super::TrainError;

/// Result of matching queries against ground-truth instances.
///
/// `pairs` is sorted by query index and injective on both sides; when there
/// are at least as many queries as truths, every truth appears exactly once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchAssignment {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

impl MatchAssignment {
    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(q, t)| cost[q][t]).sum()
    }

    pub fn truth_for_query(&self, q: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|&&(query, _)| query == q)
            .map(|&(_, t)| t)
    }
}

/// Minimum-cost assignment for `cost[n_queries][n_truth]`, `n_queries >=
/// n_truth`, all costs finite. Every truth is matched; ties resolve to the
/// lexicographically smallest `(query, truth)` pair sequence.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<MatchAssignment, TrainError> {
    let n_q = cost.len();
    let n_t = cost.first().map_or(0, Vec::len);
    for row in cost {
        if row.len() != n_t {
            return Err(TrainError::Contract(format!(
                "ragged cost matrix: expected {n_t} columns, found {}",
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|c| c.is_nan()) {
            return Err(TrainError::Contract(format!("NaN cost entry {bad}")));
        }
    }
    if n_q < n_t {
        return Err(TrainError::Contract(format!(
            "need n_queries >= n_truth, got {n_q} < {n_t}"
        )));
    }
    if n_t == 0 {
        return Ok(MatchAssignment {
            pairs: Vec::new(),
            unmatched_queries: (0..n_q).collect(),
        });
    }

    let optimum = solve_masked(cost, &vec![false; n_q], &vec![false; n_t]).0;

    // Lexicographic refinement: walk queries in order; fix the smallest truth
    // whose forced choice still completes to the optimal total. A query with
    // no such truth stays unmatched in every optimal assignment of this
    // prefix. Float totals are compared with a tiny relative slack; exact
    // inputs (as in the brute-force tests) make the comparison exact.
    let tol = 1e-9 * (1.0 + optimum.abs());
    let mut used_q = vec![false; n_q];
    let mut used_t = vec![false; n_t];
    let mut fixed_cost = 0.0;
    let mut pairs = Vec::with_capacity(n_t);
    for q in 0..n_q {
        if pairs.len() == n_t {
            break;
        }
        used_q[q] = true; // exclude q from the subproblem either way
        let mut chosen = None;
        for t in 0..n_t {
            if used_t[t] {
                continue;
            }
            used_t[t] = true;
            let rest = solve_masked(cost, &used_q, &used_t).0;
            used_t[t] = false;
            if fixed_cost + cost[q][t] + rest <= optimum + tol {
                chosen = Some(t);
                break;
            }
        }
        if let Some(t) = chosen {
            used_t[t] = true;
            fixed_cost += cost[q][t];
            pairs.push((q, t));
        } else {
            used_q[q] = false; // q is unmatched; release it (no effect on cost)
        }
    }
    debug_assert_eq!(pairs.len(), n_t, "every truth must be covered");

    let matched: Vec<bool> = {
        let mut m = vec![false; n_q];
        for &(q, _) in &pairs {
            m[q] = true;
        }
        m
    };
    Ok(MatchAssignment {
        pairs,
        unmatched_queries: (0..n_q).filter(|q| !matched[*q]).collect(),
    })
}

/// Minimum total cost over the rows/columns not masked out, plus one
/// witness assignment (truth index → query index). Masked-out truths are
/// simply absent from the subproblem; masked queries are unavailable.
fn solve_masked(cost: &[Vec<f64>], skip_q: &[bool], skip_t: &[bool]) -> (f64, Vec<(usize, usize)>) {
    let queries: Vec<usize> = (0..cost.len()).filter(|q| !skip_q[*q]).collect();
    let truths: Vec<usize> = (0..skip_t.len()).filter(|t| !skip_t[*t]).collect();
    if truths.is_empty() {
        return (0.0, Vec::new());
    }
    let sub: Vec<Vec<f64>> = truths
        .iter()
        .map(|&t| queries.iter().map(|&q| cost[q][t]).collect())
        .collect();
    let (total, col_of_row) = solve_rows_le_cols(&sub);
    let witness = col_of_row
        .iter()
        .enumerate()
        .map(|(r, &c)| (truths[r], queries[c]))
        .collect();
    (total, witness)
}

/// Jonker–Volgenant shortest-augmenting-path assignment: each row gets a
/// distinct column, `rows <= cols`, minimizing the total. Returns the total
/// and the chosen column per row.
fn solve_rows_le_cols(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let n = cost.len();
    let m = cost[0].len();
    debug_assert!(n <= m);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1]; // row (1-based) assigned to each column
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
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
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0usize; n];
    let mut total = 0.0;
    for j in 1..=m {
        if p[j] != 0 {
            col_of_row[p[j] - 1] = j - 1;
            total += cost[p[j] - 1][j - 1];
        }
    }
    (total, col_of_row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// All injections truth-set → query-set, minimum total with the same
    /// lexicographic pair-sequence tie-break as the production code.
    fn brute_force(cost: &[Vec<f64>]) -> (f64, Vec<(usize, usize)>) {
        let n_q = cost.len();
        let n_t = cost[0].len();
        let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
        let mut chosen = vec![usize::MAX; n_t];
        let mut used_q = vec![false; n_q];
        fn recurse(
            t: usize,
            cost: &[Vec<f64>],
            chosen: &mut Vec<usize>,
            used_q: &mut Vec<bool>,
            best: &mut Option<(f64, Vec<(usize, usize)>)>,
        ) {
            let n_t = cost[0].len();
            if t == n_t {
                let total: f64 = (0..n_t).map(|t| cost[chosen[t]][t]).sum();
                let mut pairs: Vec<(usize, usize)> =
                    (0..n_t).map(|t| (chosen[t], t)).collect();
                pairs.sort_unstable();
                let better = match best {
                    None => true,
                    Some((bt, bp)) => total < *bt || (total == *bt && pairs < *bp),
                };
                if better {
                    *best = Some((total, pairs));
                }
                return;
            }
            for q in 0..cost.len() {
                if !used_q[q] {
                    used_q[q] = true;
                    chosen[t] = q;
                    recurse(t + 1, cost, chosen, used_q, best);
                    used_q[q] = false;
                }
            }
        }
        recurse(0, cost, &mut chosen, &mut used_q, &mut best);
        best.unwrap()
    }

    /// Dyadic rationals make each candidate total exact in binary, so
    /// "equals brute force exactly" is well defined.
    fn random_cost(rng: &mut ChaCha8Rng, n_q: usize, n_t: usize) -> Vec<Vec<f64>> {
        (0..n_q)
            .map(|_| {
                (0..n_t)
                    .map(|_| rng.gen_range(0u32..1024) as f64 / 256.0)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn diagonal_zero_gives_identity() {
        let cost = vec![
            vec![0.0, 5.0, 5.0],
            vec![5.0, 0.0, 5.0],
            vec![5.0, 5.0, 0.0],
        ];
        let m = hungarian_match(&cost).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(m.total_cost(&cost), 0.0);
        assert!(m.unmatched_queries.is_empty());
    }

    #[test]
    fn one_by_one() {
        let m = hungarian_match(&[vec![3.25]]).unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);
    }

    #[test]
    fn zero_truths_leaves_all_queries_unmatched() {
        let cost: Vec<Vec<f64>> = vec![Vec::new(); 4];
        let m = hungarian_match(&cost).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_queries, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rejects_nan_and_wide_truths() {
        assert!(hungarian_match(&[vec![f64::NAN]]).is_err());
        assert!(hungarian_match(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn matches_brute_force_on_200_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xA55);
        for case in 0..200 {
            let n_t = rng.gen_range(1..=7);
            let n_q = rng.gen_range(n_t..=7);
            let cost = random_cost(&mut rng, n_q, n_t);
            let got = hungarian_match(&cost).unwrap();
            let (oracle_total, oracle_pairs) = brute_force(&cost);
            assert_eq!(
                got.total_cost(&cost),
                oracle_total,
                "case {case}: totals differ"
            );
            assert_eq!(got.pairs, oracle_pairs, "case {case}: tie-break differs");
        }
    }

    #[test]
    fn total_never_beaten_by_random_injections() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xBEE);
        let cost = random_cost(&mut rng, 9, 6);
        let best = hungarian_match(&cost).unwrap().total_cost(&cost);
        for _ in 0..1000 {
            // random injection truths → queries
            let mut qs: Vec<usize> = (0..9).collect();
            for t in 0..6 {
                let pick = rng.gen_range(t..9);
                qs.swap(t, pick);
            }
            let total: f64 = (0..6).map(|t| cost[qs[t]][t]).sum();
            assert!(best <= total + 1e-12);
        }
    }

    #[test]
    fn lexicographic_tie_break_prefers_early_queries_and_truths() {
        // Any pairing of two queries to two truths costs 1 total; the
        // smallest sequence is [(0,0), (1,1)].
        let cost = vec![vec![0.5, 0.5], vec![0.5, 0.5], vec![9.0, 9.0]];
        let m = hungarian_match(&cost).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.unmatched_queries, vec![2]);

        // Optimal total requires skipping query 0 entirely.
        let cost = vec![vec![10.0], vec![1.0]];
        let m = hungarian_match(&cost).unwrap();
        assert_eq!(m.pairs, vec![(1, 0)]);
        assert_eq!(m.unmatched_queries, vec![0]);
    }
}
