//! Budget selection and index handling for vertical-slash patterns.
//!
//! Scores are turned into budgets with a cumulative-mass threshold, budgets
//! into index sets with a tie-stable top-k, and index sets into per-row
//! column lists with a two-pointer merge. Random and query-sampling
//! selectors serve as baselines.

use std::fmt::Write as _;

use crate::attention::{check_index_list, AttentionInputs, SparsePattern};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::vsaggregate::VSScores;

/// Slack on the cumulative threshold comparison, absorbing summation drift at tau = 1.
pub const TAU_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct BudgetConfig {
    pub tau_v: f64,
    pub tau_s: f64,
    pub min_budget: usize,
    pub max_budget: Option<usize>,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            tau_v: 0.9,
            tau_s: 0.9,
            min_budget: 1,
            max_budget: None,
        }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau_v)?;
        check_tau(self.tau_s)?;
        if self.min_budget == 0 {
            return Err(Error::config("min_budget must be >= 1"));
        }
        if let Some(max) = self.max_budget {
            if max < self.min_budget {
                return Err(Error::config(format!(
                    "max_budget {max} is below min_budget {}",
                    self.min_budget
                )));
            }
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::config(format!("tau must lie in (0, 1], got {tau}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectedIndices {
    pub i_v: Vec<usize>,
    pub i_s: Vec<usize>,
    pub k_v: usize,
    pub k_s: usize,
}

impl SelectedIndices {
    fn from_lists(i_v: Vec<usize>, i_s: Vec<usize>) -> Self {
        Self {
            k_v: i_v.len(),
            k_s: i_s.len(),
            i_v,
            i_s,
        }
    }

    pub fn to_pattern(&self) -> SparsePattern {
        SparsePattern {
            i_v: self.i_v.clone(),
            i_s: self.i_s.clone(),
        }
    }

    /// `V: i0 i1 ...` and `S: o0 o1 ...`, one line each.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| {
            let mut s = String::new();
            for x in v {
                let _ = write!(s, " {x}");
            }
            s
        };
        format!("V:{}\nS:{}\n", join(&self.i_v), join(&self.i_s))
    }

    /// Parses the text form; `n` bounds the indices.
    pub fn from_text(text: &str, n: usize) -> Result<Self> {
        let mut i_v = None;
        let mut i_s = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (tag, rest) = line
                .split_once(':')
                .ok_or_else(|| Error::Format(format!("malformed index line {line:?}")))?;
            let list = rest
                .split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| Error::Format(format!("bad index {t:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let slot = match tag.trim() {
                "V" => &mut i_v,
                "S" => &mut i_s,
                other => return Err(Error::Format(format!("unknown index line tag {other:?}"))),
            };
            if slot.replace(list).is_some() {
                return Err(Error::Format(format!("duplicate {tag} line")));
            }
        }
        let (Some(i_v), Some(i_s)) = (i_v, i_s) else {
            return Err(Error::Format("index file needs both V: and S: lines".into()));
        };
        check_index_list("vertical", &i_v, n)?;
        check_index_list("slash", &i_s, n)?;
        Ok(Self::from_lists(i_v, i_s))
    }
}

fn check_distribution(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Distribution("empty score vector".into()));
    }
    if let Some(x) = scores.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::Distribution(format!("score {x} is not a probability")));
    }
    let sum: f64 = scores.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Distribution(format!("scores sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Indices ordered by descending score, ties toward the lower index.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Smallest prefix of `ranked` whose mass reaches `tau`, before clamping.
fn raw_budget(scores: &[f64], order: &[usize], tau: f64) -> usize {
    let mut acc = 0.0;
    for (k, &i) in order.iter().enumerate() {
        acc += scores[i];
        if acc >= tau - TAU_SLACK {
            return k + 1;
        }
    }
    order.len()
}

fn clamp_budget(k: usize, n: usize, cfg: &BudgetConfig) -> usize {
    let upper = cfg.max_budget.map_or(n, |m| m.min(n));
    k.max(cfg.min_budget).min(upper)
}

/// Minimum number of top-ranked entries whose mass reaches `tau`, clamped to
/// `[min_budget, min(max_budget, n)]`.
pub fn cumulative_budget(scores: &[f64], tau: f64, cfg: &BudgetConfig) -> Result<usize> {
    check_tau(tau)?;
    check_distribution(scores)?;
    let order = ranked(scores);
    Ok(clamp_budget(raw_budget(scores, &order, tau), scores.len(), cfg))
}

/// Indices of the `k` largest scores (ties toward lower index), ascending.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::config(format!(
            "top-k needs 1 <= k <= {}, got {k}",
            scores.len()
        )));
    }
    let mut idx = ranked(scores);
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

fn insert_sorted(list: &mut Vec<usize>, value: usize) {
    if let Err(pos) = list.binary_search(&value) {
        list.insert(pos, value);
    }
}

/// Budget then top-k in each direction; offset 0 is always added to the
/// slash set so every row attends at least to itself.
pub fn select_pattern(scores: &VSScores, cfg: &BudgetConfig) -> Result<SelectedIndices> {
    cfg.validate()?;
    let k_v = cumulative_budget(&scores.vertical, cfg.tau_v, cfg)?;
    let k_s = cumulative_budget(&scores.slash, cfg.tau_s, cfg)?;
    let i_v = topk_indices(&scores.vertical, k_v)?;
    let mut i_s = topk_indices(&scores.slash, k_s)?;
    insert_sorted(&mut i_s, 0);
    Ok(SelectedIndices::from_lists(i_v, i_s))
}

/// Sorted, deduplicated columns of row `row`:
/// `{j in i_v : j <= row} U {row - o : o in i_s, o <= row}`.
pub fn merge_row_columns(i_v: &[usize], i_s: &[usize], row: usize, n: usize) -> Vec<usize> {
    debug_assert!(row < n);
    let mut out = Vec::new();
    merge_row_columns_into(i_v, i_s, row, &mut out);
    out
}

/// Buffer-reusing form of [`merge_row_columns`]. Slash columns come out in
/// ascending order by walking offsets from the largest causal one down.
pub fn merge_row_columns_into(i_v: &[usize], i_s: &[usize], row: usize, out: &mut Vec<usize>) {
    out.clear();
    let v_end = i_v.partition_point(|&j| j <= row);
    let verticals = &i_v[..v_end];
    let s_end = i_s.partition_point(|&o| o <= row);
    let mut slashes = i_s[..s_end].iter().rev().map(|&o| row - o).peekable();
    let mut verticals = verticals.iter().copied().peekable();
    loop {
        let next = match (verticals.peek(), slashes.peek()) {
            (Some(&a), Some(&b)) => {
                if a < b {
                    verticals.next();
                    a
                } else if b < a {
                    slashes.next();
                    b
                } else {
                    verticals.next();
                    slashes.next();
                    a
                }
            }
            (Some(&a), None) => {
                verticals.next();
                a
            }
            (None, Some(&b)) => {
                slashes.next();
                b
            }
            (None, None) => break,
        };
        out.push(next);
    }
}

/// Number of causal pairs `(i, j)`, `j <= i < n`, covered by the pattern.
/// A column and an offset share exactly one cell when `j + o < n`.
pub fn covered_pairs(i_v: &[usize], i_s: &[usize], n: usize) -> usize {
    let cols: usize = i_v.iter().map(|&j| n - j).sum();
    let diags: usize = i_s.iter().map(|&o| n - o).sum();
    let overlap: usize = i_v
        .iter()
        .map(|&j| i_s.partition_point(|&o| o + j < n))
        .sum();
    cols + diags - overlap
}

/// Total causal pairs for sequence length `n`.
pub fn causal_pairs(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Stable sequential merge; on ties `a` goes first.
pub fn merge_sorted<T: Ord + Clone>(a: &[T], b: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push(a[i].clone());
            i += 1;
        } else {
            out.push(b[j].clone());
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Merge Path partition: `parts + 1` split points `(i, j)` along evenly spaced
/// cross diagonals. Segment `s` merges `a[i_s..i_{s+1}]` with
/// `b[j_s..j_{s+1}]`, and the segments concatenate to [`merge_sorted`].
pub fn merge_path_partition<T: Ord>(a: &[T], b: &[T], parts: usize) -> Vec<(usize, usize)> {
    let parts = parts.max(1);
    let total = a.len() + b.len();
    (0..=parts)
        .map(|s| {
            let diag = s * total / parts;
            let mut lo = diag.saturating_sub(b.len());
            let mut hi = diag.min(a.len());
            // Smallest i on this diagonal with a[i] > b[diag - i - 1].
            while lo < hi {
                let mid = lo + (hi - lo) / 2;
                if a[mid] <= b[diag - mid - 1] {
                    lo = mid + 1;
                } else {
                    hi = mid;
                }
            }
            (lo, diag - lo)
        })
        .collect()
}

/// Merges `a` and `b` in `parts` independent segments, concatenated in order.
pub fn parallel_merge<T: Ord + Clone + Send + Sync>(a: &[T], b: &[T], parts: usize) -> Vec<T> {
    use rayon::prelude::*;
    let splits = merge_path_partition(a, b, parts);
    let segments: Vec<Vec<T>> = splits
        .par_windows(2)
        .map(|w| merge_sorted(&a[w[0].0..w[1].0], &b[w[0].1..w[1].1]))
        .collect();
    segments.concat()
}

/// Uniform draws without replacement per direction, plus offset 0.
pub fn random_pattern(n: usize, k_v: usize, k_s: usize, rng: &mut Rng) -> Result<SelectedIndices> {
    if k_v > n || k_s > n {
        return Err(Error::config(format!(
            "budgets ({k_v}, {k_s}) exceed n = {n}"
        )));
    }
    let mut i_v = rng.sample_distinct(n, k_v);
    let mut i_s = rng.sample_distinct(n, k_s);
    i_v.sort_unstable();
    i_s.sort_unstable();
    insert_sorted(&mut i_s, 0);
    Ok(SelectedIndices::from_lists(i_v, i_s))
}

/// Estimates vertical/slash scores from exact softmax rows of a uniformly
/// sampled subset of queries.
pub fn sampling_estimate(inputs: &AttentionInputs, sample_rows: usize, rng: &mut Rng) -> Result<VSScores> {
    let n = inputs.n();
    if sample_rows == 0 || sample_rows > n {
        return Err(Error::config(format!(
            "sample_rows must lie in [1, {n}], got {sample_rows}"
        )));
    }
    let mut rows = rng.sample_distinct(n, sample_rows);
    rows.sort_unstable();
    sampling_estimate_rows(inputs, &rows)
}

/// Estimator over an explicit row set.
pub fn sampling_estimate_rows(inputs: &AttentionInputs, rows: &[usize]) -> Result<VSScores> {
    let n = inputs.n();
    if rows.is_empty() {
        return Err(Error::config("no rows to sample"));
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= n) {
        return Err(Error::config(format!("sample row {r} out of range")));
    }
    let mut vertical = vec![0.0; n];
    let mut slash = vec![0.0; n];
    let mut e = vec![0.0; n];
    for &i in rows {
        let mut max = f64::NEG_INFINITY;
        for (j, ej) in e.iter_mut().enumerate().take(i + 1) {
            *ej = inputs.logit(i, j);
            max = max.max(*ej);
        }
        let mut denom = 0.0;
        for ej in e.iter_mut().take(i + 1) {
            *ej = (*ej - max).exp();
            denom += *ej;
        }
        for (j, &ej) in e.iter().enumerate().take(i + 1) {
            let w = ej / denom;
            vertical[j] += w;
            slash[i - j] += w;
        }
    }
    let count = rows.len() as f64;
    for x in vertical.iter_mut().chain(slash.iter_mut()) {
        *x /= count;
    }
    Ok(VSScores {
        vertical,
        slash,
        normalized: true,
    })
}

/// Causal pairs retained at a given sparsity rate.
pub fn pair_budget(n: usize, sparsity: f64) -> usize {
    ((1.0 - sparsity.clamp(0.0, 1.0)) * causal_pairs(n) as f64).floor() as usize
}

/// Random baseline at a sparsity rate: nested random prefixes of equal length
/// in both directions, grown while the coverage fits.
pub fn random_at_sparsity(n: usize, sparsity: f64, rng: &mut Rng) -> SelectedIndices {
    let max_pairs = pair_budget(n, sparsity);
    let mut perm_v: Vec<usize> = (0..n).collect();
    let mut perm_s: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm_v);
    rng.shuffle(&mut perm_s);
    let build = |k: usize| {
        let mut i_v = perm_v[..k].to_vec();
        let mut i_s = perm_s[..k].to_vec();
        i_v.sort_unstable();
        i_s.sort_unstable();
        insert_sorted(&mut i_s, 0);
        SelectedIndices::from_lists(i_v, i_s)
    };
    let fits = |k: usize| {
        let p = build(k);
        covered_pairs(&p.i_v, &p.i_s, n) <= max_pairs
    };
    let (mut lo, mut hi) = (0usize, n);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    build(lo)
}

/// Pattern within `max_pairs` causal pairs chosen greedily by predicted mass
/// per newly covered pair. Column `j` spans `n - j` pairs and offset `o`
/// spans `n - o`; pairs already covered by the other direction are not
/// charged twice. Offset 0 is always included. Items that would overflow
/// the budget are skipped and smaller ones still considered.
pub fn density_within_pairs(scores: &VSScores, max_pairs: usize) -> Result<SelectedIndices> {
    check_distribution(&scores.vertical)?;
    check_distribution(&scores.slash)?;
    let n = scores.n();
    if scores.slash.len() != n {
        return Err(Error::shape("vertical and slash lengths differ"));
    }
    // (density, direction, index); direction 0 = vertical.
    let mut items: Vec<(f64, u8, usize)> = Vec::with_capacity(2 * n);
    for j in 0..n {
        if scores.vertical[j] > 0.0 {
            items.push((scores.vertical[j] / (n - j) as f64, 0, j));
        }
    }
    for o in 1..n {
        if scores.slash[o] > 0.0 {
            items.push((scores.slash[o] / (n - o) as f64, 1, o));
        }
    }
    items.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut in_v = vec![false; n];
    let mut in_s = vec![false; n];
    in_s[0] = true;
    let mut used = n;
    for (_, dir, idx) in items {
        // Partner entries overlapping this line: offsets o <= n-1-j, or columns j <= n-1-o.
        let (mine, other) = if dir == 0 { (&mut in_v, &in_s) } else { (&mut in_s, &in_v) };
        let overlap = other[..n - idx].iter().filter(|&&b| b).count();
        let cost = n - idx - overlap;
        if used + cost <= max_pairs {
            mine[idx] = true;
            used += cost;
        }
    }
    let collect = |flags: &[bool]| flags.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
    Ok(SelectedIndices::from_lists(collect(&in_v), collect(&in_s)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attention_recall, full_attention};
    use crate::numerics::Matrix;
    use crate::vsaggregate::aggregate_naive;
    use std::collections::BTreeSet;

    fn cfg() -> BudgetConfig {
        BudgetConfig {
            min_budget: 1,
            ..BudgetConfig::default()
        }
    }

    #[test]
    fn budget_hand_cases() {
        assert_eq!(cumulative_budget(&[0.5, 0.3, 0.2], 0.7, &cfg()).unwrap(), 2);
        assert_eq!(cumulative_budget(&[0.2, 0.3, 0.5], 1.0, &cfg()).unwrap(), 3);
        assert_eq!(cumulative_budget(&[0.0, 1.0, 0.0, 0.0], 0.99, &cfg()).unwrap(), 1);
        assert_eq!(cumulative_budget(&[0.0, 1.0, 0.0, 0.0], 1.0, &cfg()).unwrap(), 1);
    }

    #[test]
    fn budget_tau_at_one_tolerates_drift() {
        let scores = vec![0.1; 10];
        assert_eq!(cumulative_budget(&scores, 1.0, &cfg()).unwrap(), 10);
    }

    #[test]
    fn budget_clamps() {
        let c = BudgetConfig {
            min_budget: 2,
            max_budget: Some(3),
            ..cfg()
        };
        assert_eq!(cumulative_budget(&[1.0, 0.0, 0.0, 0.0, 0.0], 0.5, &c).unwrap(), 2);
        assert_eq!(cumulative_budget(&[0.2; 5], 1.0, &c).unwrap(), 3);
    }

    #[test]
    fn budget_errors() {
        assert!(cumulative_budget(&[0.5, 0.5], 0.0, &cfg()).is_err());
        assert!(cumulative_budget(&[0.5, 0.5], 1.5, &cfg()).is_err());
        assert!(cumulative_budget(&[0.5, 0.6], 0.5, &cfg()).is_err());
        let bad = BudgetConfig {
            min_budget: 4,
            max_budget: Some(2),
            ..cfg()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn topk_ties_prefer_low_index() {
        assert_eq!(topk_indices(&[0.2, 0.5, 0.2, 0.1], 2).unwrap(), vec![0, 1]);
        assert_eq!(topk_indices(&[0.2, 0.5, 0.2, 0.1], 4).unwrap(), vec![0, 1, 2, 3]);
        assert!(topk_indices(&[0.2, 0.8], 3).is_err());
        assert!(topk_indices(&[0.2, 0.8], 0).is_err());
    }

    #[test]
    fn topk_matches_full_sort_oracle() {
        let mut rng = Rng::new(1);
        for _ in 0..50 {
            let v: Vec<f64> = (0..30).map(|_| rng.next_f64()).collect();
            let mut sorted: Vec<(f64, usize)> = v.iter().copied().zip(0..).collect();
            sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let mut expected: Vec<usize> = sorted[..5].iter().map(|p| p.1).collect();
            expected.sort_unstable();
            assert_eq!(topk_indices(&v, 5).unwrap(), expected);
        }
    }

    #[test]
    fn select_uniform_half() {
        let n = 9;
        let u = vec![1.0 / n as f64; n];
        let scores = VSScores::from_distributions(u.clone(), u).unwrap();
        let sel = select_pattern(
            &scores,
            &BudgetConfig {
                tau_v: 0.5,
                tau_s: 0.5,
                ..cfg()
            },
        )
        .unwrap();
        assert_eq!(sel.k_v, 5);
        assert_eq!(sel.i_v, vec![0, 1, 2, 3, 4]);
        assert_eq!(sel.i_s, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn select_injects_offset_zero() {
        let scores =
            VSScores::from_distributions(vec![0.1, 0.9, 0.0], vec![0.0, 0.05, 0.95]).unwrap();
        let sel = select_pattern(&scores, &BudgetConfig { tau_v: 0.5, tau_s: 0.5, ..cfg() }).unwrap();
        assert_eq!(sel.i_v, vec![1]);
        assert_eq!(sel.i_s, vec![0, 2]);
        assert_eq!(sel.k_s, 2);
    }

    #[test]
    fn select_peaked_three_atoms() {
        let mut v = vec![0.001; 20];
        v[3] = 0.5;
        v[7] = 0.3;
        v[11] = 0.183;
        let scores = VSScores::from_distributions(v.clone(), v).unwrap();
        let sel = select_pattern(&scores, &BudgetConfig { tau_v: 0.9, tau_s: 0.9, ..cfg() }).unwrap();
        // 0.5 + 0.3 + 0.183 = 0.983 >= 0.9 after three atoms.
        assert_eq!(sel.i_v, vec![3, 7, 11]);
        assert!(sel.k_v <= 4);
    }

    #[test]
    fn merge_row_hand_case() {
        assert_eq!(merge_row_columns(&[0, 5], &[0, 2], 4, 8), vec![0, 2, 4]);
        for row in 0..6 {
            assert_eq!(merge_row_columns(&[], &[0], row, 6), vec![row]);
        }
        assert_eq!(merge_row_columns(&[1, 3], &[0, 2], 3, 4), vec![1, 3]);
        assert!(merge_row_columns(&[2], &[1], 0, 4).is_empty());
    }

    #[test]
    fn merge_row_matches_set_oracle() {
        let mut rng = Rng::new(2);
        for _ in 0..300 {
            let n = 1 + rng.below(40) as usize;
            let (kv, ks) = (rng.below(n as u64 + 1) as usize, rng.below(n as u64 + 1) as usize);
            let mut i_v = rng.sample_distinct(n, kv);
            let mut i_s = rng.sample_distinct(n, ks);
            i_v.sort_unstable();
            i_s.sort_unstable();
            let row = rng.below(n as u64) as usize;
            let mut oracle = BTreeSet::new();
            oracle.extend(i_v.iter().copied().filter(|&j| j <= row));
            oracle.extend(i_s.iter().filter(|&&o| o <= row).map(|&o| row - o));
            assert_eq!(
                merge_row_columns(&i_v, &i_s, row, n),
                oracle.into_iter().collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn covered_pairs_matches_enumeration() {
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let n = 1 + rng.below(30) as usize;
            let (kv, ks) = (rng.below(n as u64 + 1) as usize, rng.below(n as u64 + 1) as usize);
            let mut i_v = rng.sample_distinct(n, kv);
            let mut i_s = rng.sample_distinct(n, ks);
            i_v.sort_unstable();
            i_s.sort_unstable();
            let brute: usize = (0..n).map(|i| merge_row_columns(&i_v, &i_s, i, n).len()).sum();
            assert_eq!(covered_pairs(&i_v, &i_s, n), brute);
        }
        assert_eq!(covered_pairs(&(0..10).collect::<Vec<_>>(), &[], 10), causal_pairs(10));
    }

    #[test]
    fn merge_path_two_way_split() {
        let a = [1, 3, 5];
        let b = [2, 4, 6];
        let splits = merge_path_partition(&a, &b, 2);
        assert_eq!(splits, vec![(0, 0), (2, 1), (3, 3)]);
        assert_eq!(parallel_merge(&a, &b, 2), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(merge_path_partition(&a, &b, 1), vec![(0, 0), (3, 3)]);
    }

    #[test]
    fn merge_path_handles_duplicates_and_empties() {
        let a = [1, 1, 2, 2, 2];
        let b = [1, 2, 2, 3];
        for p in 1..=9 {
            assert_eq!(parallel_merge(&a, &b, p), merge_sorted(&a, &b));
        }
        let e: [i32; 0] = [];
        assert_eq!(parallel_merge(&e, &b, 3), b.to_vec());
        assert_eq!(parallel_merge(&a, &e, 4), a.to_vec());
    }

    #[test]
    fn sampling_all_rows_equals_naive() {
        let mut rng = Rng::new(4);
        let n = 25;
        let mut m = || Matrix::from_fn(n, 4, |_, _| rng.normal());
        let inputs = AttentionInputs::new(m(), m(), m()).unwrap();
        let a = full_attention(&inputs, true).unwrap().a.unwrap();
        let mut r = Rng::new(0);
        assert_eq!(sampling_estimate(&inputs, n, &mut r).unwrap(), aggregate_naive(&a).unwrap());
        let last = sampling_estimate_rows(&inputs, &[n - 1]).unwrap();
        assert_eq!(last.vertical, a.row(n - 1).to_vec());
        assert!(sampling_estimate(&inputs, 0, &mut r).is_err());
    }

    #[test]
    fn random_pattern_full_budget_and_determinism() {
        let mut rng = Rng::new(5);
        let p = random_pattern(10, 10, 3, &mut rng).unwrap();
        assert_eq!(p.i_v, (0..10).collect::<Vec<_>>());
        assert!(p.i_s.contains(&0));
        let a = random_pattern(50, 7, 7, &mut Rng::new(8)).unwrap();
        let b = random_pattern(50, 7, 7, &mut Rng::new(8)).unwrap();
        assert_eq!(a, b);
        assert!(random_pattern(5, 6, 1, &mut rng).is_err());
    }

    #[test]
    fn random_recall_tracks_retention() {
        // Uniform causal attention: every row spreads mass evenly over its prefix.
        // The injected diagonal adds about ln(n)/n on top of the retention.
        let n = 256;
        let a = Matrix::from_fn(n, n, |i, j| if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 });
        let mut rng = Rng::new(6);
        for retention in [0.25, 0.5, 0.75] {
            let k_v = (retention * n as f64).round() as usize;
            let mean: f64 = (0..200)
                .map(|_| {
                    let p = random_pattern(n, k_v, 0, &mut rng).unwrap();
                    attention_recall(&a, &p.to_pattern()).unwrap()
                })
                .sum::<f64>()
                / 200.0;
            assert!((mean - retention).abs() < 0.05, "retention {retention}: {mean}");
        }
    }

    #[test]
    fn density_allocator_respects_budget() {
        let mut rng = Rng::new(7);
        let n = 48;
        let raw: Vec<f64> = (0..n).map(|_| 1e-3 + rng.next_f64().powi(4)).collect();
        let z: f64 = raw.iter().sum();
        let v: Vec<f64> = raw.iter().map(|x| x / z).collect();
        let scores = VSScores::from_distributions(v.clone(), v).unwrap();
        for sparsity in [0.99, 0.95, 0.9, 0.7, 0.5] {
            let budget = pair_budget(n, sparsity);
            let p = density_within_pairs(&scores, budget).unwrap();
            assert_eq!(p.i_s[0], 0);
            assert!(covered_pairs(&p.i_v, &p.i_s, n) <= budget.max(n), "sparsity {sparsity}");
        }
        let full = density_within_pairs(&scores, causal_pairs(n)).unwrap();
        assert_eq!(covered_pairs(&full.i_v, &full.i_s, n), causal_pairs(n));
    }

    #[test]
    fn density_allocator_prefers_mass_per_pair() {
        // Column 6 holds less mass than column 0 but costs 2 pairs instead of 8.
        let n = 8;
        let mut v = vec![0.0; n];
        v[0] = 0.6;
        v[6] = 0.4;
        let mut s = vec![0.0; n];
        s[0] = 1.0;
        let scores = VSScores::from_distributions(v, s).unwrap();
        let p = density_within_pairs(&scores, n + 2).unwrap();
        assert_eq!((p.i_v.clone(), p.i_s.clone()), (vec![6], vec![0]));
        // Column 6 overlaps the main diagonal at (6, 6), so it adds one pair.
        assert_eq!(covered_pairs(&p.i_v, &p.i_s, n), n + 1);
        let p = density_within_pairs(&scores, n + 8).unwrap();
        assert_eq!(p.i_v, vec![0, 6]);
    }

    #[test]
    fn random_at_sparsity_fits() {
        let mut rng = Rng::new(9);
        for s in [0.5, 0.9, 0.95] {
            let p = random_at_sparsity(200, s, &mut rng);
            assert!(covered_pairs(&p.i_v, &p.i_s, 200) <= pair_budget(200, s));
            assert!(p.i_s.contains(&0));
        }
    }

    #[test]
    fn index_text_roundtrip_and_errors() {
        let sel = SelectedIndices::from_lists(vec![0, 4, 9], vec![0, 2]);
        let text = sel.to_text();
        assert_eq!(text, "V: 0 4 9\nS: 0 2\n");
        assert_eq!(SelectedIndices::from_text(&text, 10).unwrap(), sel);
        assert!(SelectedIndices::from_text(&text, 9).is_err());
        assert!(SelectedIndices::from_text("V: 1\n", 4).is_err());
        assert!(SelectedIndices::from_text("V: 2 1\nS: 0\n", 4).is_err());
        assert!(SelectedIndices::from_text("V: x\nS: 0\n", 4).is_err());
        let empty = SelectedIndices::from_text("V:\nS: 0\n", 4).unwrap();
        assert!(empty.i_v.is_empty());
    }
}
