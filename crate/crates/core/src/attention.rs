//! Causal scaled dot-product attention: a naive reference, a tiled
//! online-softmax kernel, vertical-slash sparse attention, and the
//! Attention Recall metric.
//!
//! All kernels are causal. A query row `i` attends to key columns `j <= i`.
//! The recall sum formally runs over every `(i, j)`, but weights above the
//! diagonal are zero under causal masking, so only the causal prefix is
//! visited.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};
use crate::sparsity::merge_row_columns_into;

/// Largest `n` for which `full_attention` will materialize the `n x n`
/// weight matrix unless a different limit is passed explicitly.
pub const DEFAULT_MAX_WEIGHTS: usize = 4096;

/// Row sums of an attention matrix may deviate from 1 by at most this much.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct AttentionInputs {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    scale: f64,
}

impl AttentionInputs {
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Result<Self> {
        if q.shape() != k.shape() || q.shape() != v.shape() {
            return Err(Error::shape(format!(
                "q {:?}, k {:?} and v {:?} must share n and d",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        if q.rows() == 0 || q.cols() == 0 {
            return Err(Error::shape("attention needs n >= 1 and d >= 1"));
        }
        let scale = 1.0 / (q.cols() as f64).sqrt();
        Ok(Self { q, k, v, scale })
    }

    pub fn n(&self) -> usize {
        self.q.rows()
    }

    pub fn d(&self) -> usize {
        self.q.cols()
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn k(&self) -> &Matrix {
        &self.k
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Scaled logit `q_i . k_j / sqrt(d)`.
    #[inline]
    pub fn logit(&self, i: usize, j: usize) -> f64 {
        dot(self.q.row(i), self.k.row(j)) * self.scale
    }

    /// Same inputs with the value matrix replaced.
    pub fn with_values(&self, v: Matrix) -> Result<Self> {
        Self::new(self.q.clone(), self.k.clone(), v)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub o: Matrix,
    /// Causal weights, present only when requested.
    pub a: Option<Matrix>,
}

/// Vertical columns `i_v` and slash offsets `i_s`. Pair `(i, j)` is kept when
/// `j` is in `i_v` or `i - j` is in `i_s`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsePattern {
    pub i_v: Vec<usize>,
    pub i_s: Vec<usize>,
}

impl SparsePattern {
    /// Validates that both lists are strictly increasing and below `n`.
    pub fn new(i_v: Vec<usize>, i_s: Vec<usize>, n: usize) -> Result<Self> {
        check_index_list("vertical", &i_v, n)?;
        check_index_list("slash", &i_s, n)?;
        Ok(Self { i_v, i_s })
    }

    /// Every column selected: the dense causal pattern.
    pub fn dense(n: usize) -> Self {
        Self {
            i_v: (0..n).collect(),
            i_s: Vec::new(),
        }
    }

    pub fn empty() -> Self {
        Self {
            i_v: Vec::new(),
            i_s: Vec::new(),
        }
    }

    /// Row `i` keeps all causal columns in this pattern.
    pub fn columns_for_row(&self, row: usize) -> Vec<usize> {
        let mut out = Vec::new();
        merge_row_columns_into(&self.i_v, &self.i_s, row, &mut out);
        out
    }
}

pub(crate) fn check_index_list(what: &str, list: &[usize], n: usize) -> Result<()> {
    if let Some(w) = list.windows(2).find(|w| w[0] >= w[1]) {
        return Err(Error::IndexSet(format!(
            "{what} indices must be strictly increasing ({} then {})",
            w[0], w[1]
        )));
    }
    if let Some(&last) = list.last() {
        if last >= n {
            return Err(Error::IndexSet(format!(
                "{what} index {last} out of range for n = {n}"
            )));
        }
    }
    Ok(())
}

/// Reference attention. `A` is returned when `keep_weights` is set and
/// `n <= DEFAULT_MAX_WEIGHTS`.
pub fn full_attention(inputs: &AttentionInputs, keep_weights: bool) -> Result<AttentionOutput> {
    full_attention_with_limit(inputs, keep_weights, DEFAULT_MAX_WEIGHTS)
}

pub fn full_attention_with_limit(
    inputs: &AttentionInputs,
    keep_weights: bool,
    max_weights: usize,
) -> Result<AttentionOutput> {
    let n = inputs.n();
    let d = inputs.d();
    if keep_weights && n > max_weights {
        return Err(Error::config(format!(
            "refusing to materialize a {n}x{n} attention matrix (limit {max_weights})"
        )));
    }
    let mut o = Matrix::zeros(n, d);
    let mut a = keep_weights.then(|| Matrix::zeros(n, n));
    let mut e = vec![0.0; n];
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for (j, ej) in e.iter_mut().enumerate().take(i + 1) {
            *ej = inputs.logit(i, j);
            max = max.max(*ej);
        }
        let mut denom = 0.0;
        let out_row = o.row_mut(i);
        for (j, ej) in e.iter_mut().enumerate().take(i + 1) {
            *ej = (*ej - max).exp();
            denom += *ej;
            for (acc, &vv) in out_row.iter_mut().zip(inputs.v.row(j)) {
                *acc += *ej * vv;
            }
        }
        for x in out_row.iter_mut() {
            *x /= denom;
        }
        if let Some(a) = a.as_mut() {
            for (j, &ej) in e.iter().enumerate().take(i + 1) {
                a.set(i, j, ej / denom);
            }
        }
    }
    Ok(AttentionOutput { o, a })
}

/// Per-row running state of the online softmax.
struct OnlineRow<'a> {
    max: f64,
    denom: f64,
    acc: &'a mut [f64],
}

impl OnlineRow<'_> {
    /// Folds a batch of `(logit, value row)` pairs whose batch maximum is `batch_max`.
    fn absorb<'v>(&mut self, batch_max: f64, items: impl Iterator<Item = (f64, &'v [f64])>) {
        if batch_max == f64::NEG_INFINITY {
            return;
        }
        let new_max = self.max.max(batch_max);
        let correction = (self.max - new_max).exp();
        self.denom *= correction;
        for x in self.acc.iter_mut() {
            *x *= correction;
        }
        for (s, vrow) in items {
            let p = (s - new_max).exp();
            self.denom += p;
            for (x, &vv) in self.acc.iter_mut().zip(vrow) {
                *x += p * vv;
            }
        }
        self.max = new_max;
    }

    fn finish(self) {
        let denom = self.denom;
        for x in self.acc.iter_mut() {
            *x /= denom;
        }
    }
}

/// Tiled attention with online max/denominator rescaling. Never builds an
/// `n x n` buffer; the working set is one `block x block` logit tile per
/// query tile plus the output.
pub fn blockwise_attention(inputs: &AttentionInputs, block: usize) -> Result<AttentionOutput> {
    if block == 0 {
        return Err(Error::config("block size must be >= 1"));
    }
    let n = inputs.n();
    let d = inputs.d();
    let mut o = Matrix::zeros(n, d);
    o.data_mut()
        .par_chunks_mut(block * d)
        .enumerate()
        .for_each(|(tile, out)| {
            let r0 = tile * block;
            let rows = out.len() / d;
            let mut logits = vec![0.0; block * block];
            let mut states: Vec<OnlineRow> = out
                .chunks_mut(d)
                .map(|acc| OnlineRow {
                    max: f64::NEG_INFINITY,
                    denom: 0.0,
                    acc,
                })
                .collect();
            let last_row = r0 + rows - 1;
            for c0 in (0..=last_row).step_by(block) {
                let c1 = (c0 + block).min(n);
                for (r, state) in states.iter_mut().enumerate() {
                    let i = r0 + r;
                    let width = c1.min(i + 1).saturating_sub(c0);
                    let tile_row = &mut logits[r * block..r * block + width];
                    let mut batch_max = f64::NEG_INFINITY;
                    for (t, s) in tile_row.iter_mut().enumerate() {
                        *s = inputs.logit(i, c0 + t);
                        batch_max = batch_max.max(*s);
                    }
                    state.absorb(
                        batch_max,
                        tile_row
                            .iter()
                            .enumerate()
                            .map(|(t, &s)| (s, inputs.v.row(c0 + t))),
                    );
                }
            }
            states.into_iter().for_each(OnlineRow::finish);
        });
    Ok(AttentionOutput { o, a: None })
}

/// Vertical-slash sparse attention. Each query row gathers its merged column
/// list on the fly and streams the selected keys in chunks of `block`.
pub fn sparse_attention(
    inputs: &AttentionInputs,
    pattern: &SparsePattern,
    block: usize,
) -> Result<AttentionOutput> {
    if block == 0 {
        return Err(Error::config("block size must be >= 1"));
    }
    let n = inputs.n();
    let d = inputs.d();
    check_index_list("vertical", &pattern.i_v, n)?;
    check_index_list("slash", &pattern.i_s, n)?;
    let mut o = Matrix::zeros(n, d);
    o.data_mut()
        .par_chunks_mut(block * d)
        .enumerate()
        .try_for_each(|(tile, out)| {
            let mut cols = Vec::new();
            let mut logits = Vec::with_capacity(block);
            for (r, acc) in out.chunks_mut(d).enumerate() {
                let i = tile * block + r;
                merge_row_columns_into(&pattern.i_v, &pattern.i_s, i, &mut cols);
                if cols.is_empty() {
                    return Err(Error::UncoveredRow { row: i });
                }
                let mut state = OnlineRow {
                    max: f64::NEG_INFINITY,
                    denom: 0.0,
                    acc,
                };
                for chunk in cols.chunks(block) {
                    logits.clear();
                    logits.extend(chunk.iter().map(|&j| inputs.logit(i, j)));
                    let batch_max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    state.absorb(
                        batch_max,
                        logits
                            .iter()
                            .zip(chunk)
                            .map(|(&s, &j)| (s, inputs.v.row(j))),
                    );
                }
                state.finish();
            }
            Ok(())
        })?;
    Ok(AttentionOutput { o, a: None })
}

/// Checks that `a` is square, row-stochastic over the causal prefix and zero
/// above the diagonal.
pub fn validate_causal_weights(a: &Matrix) -> Result<()> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape(format!(
            "attention matrix must be square, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    for i in 0..n {
        let row = a.row(i);
        let sum: f64 = row[..=i].iter().sum();
        let leak = row[i + 1..].iter().any(|&x| x.abs() > 1e-12);
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE || leak || row.iter().any(|x| *x < 0.0) {
            return Err(Error::InvalidAttentionRow { row: i, sum });
        }
    }
    Ok(())
}

/// `(1/n) * sum of A[i, j]` over the pairs covered by `pattern`.
pub fn attention_recall(a: &Matrix, pattern: &SparsePattern) -> Result<f64> {
    validate_causal_weights(a)?;
    let n = a.rows();
    check_index_list("vertical", &pattern.i_v, n)?;
    check_index_list("slash", &pattern.i_s, n)?;
    Ok(recall_unchecked(a, pattern))
}

pub(crate) fn recall_unchecked(a: &Matrix, pattern: &SparsePattern) -> f64 {
    let n = a.rows();
    let mut cols = Vec::new();
    let mut mass = 0.0;
    for i in 0..n {
        merge_row_columns_into(&pattern.i_v, &pattern.i_s, i, &mut cols);
        let row = a.row(i);
        mass += cols.iter().map(|&j| row[j]).sum::<f64>();
    }
    mass / n as f64
}

/// Attention Recall computed straight from `Q`, `K` without materializing
/// `A`: a tiled pass for per-row log-normalizers, then a gather over the
/// pattern's columns.
pub fn recall_streaming(inputs: &AttentionInputs, pattern: &SparsePattern, block: usize) -> Result<f64> {
    if block == 0 {
        return Err(Error::config("block size must be >= 1"));
    }
    let n = inputs.n();
    check_index_list("vertical", &pattern.i_v, n)?;
    check_index_list("slash", &pattern.i_s, n)?;
    let (maxes, denoms) = row_normalizers(inputs, block);
    let mass: f64 = (0..n)
        .into_par_iter()
        .map_init(Vec::new, |cols, i| {
            merge_row_columns_into(&pattern.i_v, &pattern.i_s, i, cols);
            cols.iter()
                .map(|&j| (inputs.logit(i, j) - maxes[i]).exp())
                .sum::<f64>()
                / denoms[i]
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(mass / n as f64)
}

/// Per-row softmax maximum and denominator, computed tile by tile.
pub(crate) fn row_normalizers(inputs: &AttentionInputs, block: usize) -> (Vec<f64>, Vec<f64>) {
    let n = inputs.n();
    let stats: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut max = f64::NEG_INFINITY;
            let mut denom = 0.0;
            for c0 in (0..=i).step_by(block) {
                let c1 = (c0 + block).min(i + 1);
                let tile_max = (c0..c1)
                    .map(|j| inputs.logit(i, j))
                    .fold(f64::NEG_INFINITY, f64::max);
                let new_max = max.max(tile_max);
                denom = denom * (max - new_max).exp()
                    + (c0..c1).map(|j| (inputs.logit(i, j) - new_max).exp()).sum::<f64>();
                max = new_max;
            }
            (max, denom)
        })
        .collect();
    stats.into_iter().unzip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random_inputs(n: usize, d: usize, seed: u64) -> AttentionInputs {
        let mut rng = Rng::new(seed);
        let mut m = || Matrix::from_fn(n, d, |_, _| rng.normal());
        let (q, k, v) = (m(), m(), m());
        AttentionInputs::new(q, k, v).unwrap()
    }

    /// Straight-line evaluator: build P, mask, softmax, multiply.
    fn brute_force(inputs: &AttentionInputs, allowed: impl Fn(usize, usize) -> bool) -> Matrix {
        let n = inputs.n();
        let mut out = Matrix::zeros(n, inputs.d());
        for i in 0..n {
            let w: Vec<f64> = (0..n)
                .map(|j| {
                    if j <= i && allowed(i, j) {
                        let p: f64 = (0..inputs.d()).map(|t| inputs.q.get(i, t) * inputs.k.get(j, t)).sum();
                        (p / (inputs.d() as f64).sqrt()).exp()
                    } else {
                        0.0
                    }
                })
                .collect();
            let z: f64 = w.iter().sum();
            for t in 0..inputs.d() {
                let s: f64 = (0..n).map(|j| w[j] / z * inputs.v.get(j, t)).sum();
                out.set(i, t, s);
            }
        }
        out
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let err = AttentionInputs::new(Matrix::zeros(3, 2), Matrix::zeros(3, 2), Matrix::zeros(4, 2));
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn scale_is_inverse_sqrt_d() {
        let inputs = random_inputs(3, 7, 0);
        assert!((inputs.scale() - 1.0 / 7f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn single_token() {
        let inputs = random_inputs(1, 3, 1);
        let out = full_attention(&inputs, true).unwrap();
        assert_eq!(out.a.unwrap().data(), &[1.0]);
        assert_eq!(out.o, *inputs.v());
    }

    #[test]
    fn identical_keys_give_prefix_means() {
        let mut rng = Rng::new(2);
        let n = 6;
        let q = Matrix::from_fn(n, 3, |_, _| rng.normal());
        let key = [0.3, -1.2, 0.7];
        let k = Matrix::from_fn(n, 3, |_, j| key[j]);
        let v = Matrix::from_fn(n, 3, |_, _| rng.normal());
        let inputs = AttentionInputs::new(q, k, v.clone()).unwrap();
        let out = full_attention(&inputs, true).unwrap();
        let a = out.a.unwrap();
        for i in 0..n {
            for j in 0..=i {
                assert!((a.get(i, j) - 1.0 / (i + 1) as f64).abs() < 1e-15);
            }
            for t in 0..3 {
                let mean: f64 = (0..=i).map(|j| v.get(j, t)).sum::<f64>() / (i + 1) as f64;
                assert!((out.o.get(i, t) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn full_matches_brute_force_seed7() {
        let inputs = random_inputs(4, 2, 7);
        let out = full_attention(&inputs, false).unwrap();
        assert!(out.o.max_abs_diff(&brute_force(&inputs, |_, _| true)) <= 1e-12);
    }

    #[test]
    fn weights_are_causal_rows() {
        let inputs = random_inputs(20, 4, 3);
        let a = full_attention(&inputs, true).unwrap().a.unwrap();
        validate_causal_weights(&a).unwrap();
    }

    #[test]
    fn weight_materialization_is_capped() {
        let inputs = random_inputs(10, 2, 3);
        assert!(full_attention_with_limit(&inputs, true, 9).is_err());
        assert!(full_attention_with_limit(&inputs, false, 9).is_ok());
    }

    #[test]
    fn blockwise_single_tile_is_exact() {
        let inputs = random_inputs(37, 5, 4);
        let full = full_attention(&inputs, false).unwrap().o;
        assert_eq!(blockwise_attention(&inputs, 37).unwrap().o, full);
        assert_eq!(blockwise_attention(&inputs, 100).unwrap().o, full);
    }

    #[test]
    fn blockwise_small_and_ragged_tiles() {
        for (n, block) in [(40, 1), (257, 64), (100, 7)] {
            let inputs = random_inputs(n, 6, n as u64);
            let full = full_attention(&inputs, false).unwrap().o;
            let tiled = blockwise_attention(&inputs, block).unwrap().o;
            assert!(tiled.max_abs_diff(&full) <= 1e-10, "n={n} block={block}");
        }
        assert!(blockwise_attention(&random_inputs(3, 2, 0), 0).is_err());
    }

    #[test]
    fn sparse_with_all_columns_is_dense() {
        let inputs = random_inputs(50, 4, 5);
        let full = full_attention(&inputs, false).unwrap().o;
        let sparse = sparse_attention(&inputs, &SparsePattern::dense(50), 16).unwrap().o;
        assert!(sparse.max_abs_diff(&full) <= 1e-10);
    }

    #[test]
    fn sparse_diagonal_only_copies_values() {
        let inputs = random_inputs(12, 3, 6);
        let pat = SparsePattern::new(vec![], vec![0], 12).unwrap();
        let out = sparse_attention(&inputs, &pat, 4).unwrap().o;
        assert_eq!(out, *inputs.v());
    }

    #[test]
    fn sparse_matches_masked_oracle() {
        let inputs = random_inputs(32, 4, 8);
        let pat = SparsePattern::new(vec![0, 5], vec![0, 3], 32).unwrap();
        let oracle = brute_force(&inputs, |i, j| j == 0 || j == 5 || i - j == 0 || i - j == 3);
        let out = sparse_attention(&inputs, &pat, 8).unwrap().o;
        assert!(out.max_abs_diff(&oracle) <= 1e-12);
    }

    #[test]
    fn sparse_uncovered_row_is_error() {
        let inputs = random_inputs(6, 2, 9);
        let pat = SparsePattern::new(vec![3], vec![], 6).unwrap();
        let err = sparse_attention(&inputs, &pat, 2).unwrap_err();
        assert_eq!(err.to_string(), "uncovered query row 0");
    }

    #[test]
    fn pattern_validation() {
        assert!(SparsePattern::new(vec![1, 1], vec![], 4).is_err());
        assert!(SparsePattern::new(vec![2, 1], vec![], 4).is_err());
        assert!(SparsePattern::new(vec![], vec![4], 4).is_err());
        assert!(SparsePattern::new(vec![0, 3], vec![0], 4).is_ok());
    }

    #[test]
    fn recall_hand_example() {
        let a = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.5, 0.5, 0.0],
            vec![0.2, 0.3, 0.5],
        ])
        .unwrap();
        let pat = SparsePattern::new(vec![0], vec![0], 3).unwrap();
        assert!((attention_recall(&a, &pat).unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(attention_recall(&a, &SparsePattern::empty()).unwrap(), 0.0);
        assert!((attention_recall(&a, &SparsePattern::dense(3)).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn recall_rejects_bad_rows() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.4]]).unwrap();
        let err = attention_recall(&a, &SparsePattern::dense(2)).unwrap_err();
        assert!(matches!(err, Error::InvalidAttentionRow { row: 1, .. }));
        let leaky = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.5, 0.5]]).unwrap();
        assert!(attention_recall(&leaky, &SparsePattern::dense(2)).is_err());
    }

    #[test]
    fn streaming_recall_matches_materialized() {
        let inputs = random_inputs(90, 4, 10);
        let a = full_attention(&inputs, true).unwrap().a.unwrap();
        let pat = SparsePattern::new(vec![0, 7, 40], vec![0, 1, 2, 30], 90).unwrap();
        let r1 = attention_recall(&a, &pat).unwrap();
        let r2 = recall_streaming(&inputs, &pat, 16).unwrap();
        assert!((r1 - r2).abs() < 1e-12, "{r1} vs {r2}");
    }
}
