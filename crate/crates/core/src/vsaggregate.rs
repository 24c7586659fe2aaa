//! Ground-truth vertical and slash attention mass.
//!
//! `vertical[j]` collects the attention every query pays to key column `j`;
//! `slash[o]` collects the mass on diagonal `i - j = o`. Raw sums each total
//! `n` (one unit per causal row) and are divided by `n` to form
//! distributions.

use std::fmt::Write as _;

use crate::attention::{row_normalizers, validate_causal_weights, AttentionInputs};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Conservation tolerance for normalized score vectors.
pub const NORMALIZED_SUM_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct VSScores {
    pub vertical: Vec<f64>,
    pub slash: Vec<f64>,
    pub normalized: bool,
}

impl VSScores {
    /// Wraps two probability vectors, checking length, sign and sum.
    pub fn from_distributions(vertical: Vec<f64>, slash: Vec<f64>) -> Result<Self> {
        let s = Self {
            vertical,
            slash,
            normalized: true,
        };
        s.validate(1e-6)?;
        Ok(s)
    }

    pub fn n(&self) -> usize {
        self.vertical.len()
    }

    /// Divides raw sums by `n`. Already-normalized scores are returned as is.
    pub fn normalize(mut self) -> Self {
        if !self.normalized {
            let n = self.n() as f64;
            for x in self.vertical.iter_mut().chain(self.slash.iter_mut()) {
                *x /= n;
            }
            self.normalized = true;
        }
        self
    }

    /// Checks the conservation invariant: sums are 1 (normalized) or `n` (raw).
    pub fn validate(&self, tolerance: f64) -> Result<()> {
        let n = self.n();
        if self.slash.len() != n {
            return Err(Error::shape(format!(
                "vertical has {n} entries, slash has {}",
                self.slash.len()
            )));
        }
        if n == 0 {
            return Err(Error::Distribution("empty score vectors".into()));
        }
        let expected = if self.normalized { 1.0 } else { n as f64 };
        for (name, v) in [("vertical", &self.vertical), ("slash", &self.slash)] {
            if let Some(x) = v.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
                return Err(Error::Distribution(format!("{name} scores contain {x}")));
            }
            let sum: f64 = v.iter().sum();
            if (sum - expected).abs() > tolerance * expected.max(1.0) {
                return Err(Error::Distribution(format!(
                    "{name} scores sum to {sum}, expected {expected}"
                )));
            }
        }
        Ok(())
    }
}

/// How per-head score vectors are combined for a shared KV group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeadReduction {
    #[default]
    Mean,
    Sum,
}

/// Combines normalized per-head scores. `Mean` stays a distribution; `Sum`
/// produces unnormalized totals.
pub fn combine_heads(heads: &[VSScores], reduction: HeadReduction) -> Result<VSScores> {
    let first = heads
        .first()
        .ok_or_else(|| Error::shape("no heads to combine"))?;
    let n = first.n();
    let mut vertical = vec![0.0; n];
    let mut slash = vec![0.0; n];
    for h in heads {
        if h.n() != n || !h.normalized {
            return Err(Error::shape("heads must be normalized and share n"));
        }
        for (acc, x) in vertical.iter_mut().zip(&h.vertical) {
            *acc += x;
        }
        for (acc, x) in slash.iter_mut().zip(&h.slash) {
            *acc += x;
        }
    }
    match reduction {
        HeadReduction::Sum => Ok(VSScores {
            vertical,
            slash,
            normalized: false,
        }),
        HeadReduction::Mean => {
            let h = heads.len() as f64;
            Ok(VSScores {
                vertical: vertical.into_iter().map(|x| x / h).collect(),
                slash: slash.into_iter().map(|x| x / h).collect(),
                normalized: true,
            })
        }
    }
}

/// Aggregates a materialized causal attention matrix.
pub fn aggregate_naive(a: &Matrix) -> Result<VSScores> {
    validate_causal_weights(a)?;
    let n = a.rows();
    let mut vertical = vec![0.0; n];
    let mut slash = vec![0.0; n];
    for i in 0..n {
        for (j, &w) in a.row(i)[..=i].iter().enumerate() {
            vertical[j] += w;
            slash[i - j] += w;
        }
    }
    Ok(VSScores {
        vertical,
        slash,
        normalized: false,
    }
    .normalize())
}

/// Streaming aggregation without an `n x n` buffer: one tiled pass for the
/// row normalizers, then a second pass that recomputes each logit tile and
/// scatters the normalized weights into the column and diagonal sums.
pub fn aggregate_streaming(inputs: &AttentionInputs, block: usize) -> Result<VSScores> {
    Ok(aggregate_streaming_raw(inputs, block)?.normalize())
}

/// As [`aggregate_streaming`], but returns raw sums (each totals `n`).
pub fn aggregate_streaming_raw(inputs: &AttentionInputs, block: usize) -> Result<VSScores> {
    if block == 0 {
        return Err(Error::config("block size must be >= 1"));
    }
    let n = inputs.n();
    let (maxes, denoms) = row_normalizers(inputs, block);
    let mut vertical = vec![0.0; n];
    let mut slash = vec![0.0; n];
    let mut tile = vec![0.0; block * block];
    for r0 in (0..n).step_by(block) {
        let r1 = (r0 + block).min(n);
        for c0 in (0..r1).step_by(block) {
            let c1 = (c0 + block).min(n);
            for i in r0..r1 {
                let width = c1.min(i + 1).saturating_sub(c0);
                let row = &mut tile[(i - r0) * block..(i - r0) * block + width];
                for (t, s) in row.iter_mut().enumerate() {
                    *s = (inputs.logit(i, c0 + t) - maxes[i]).exp() / denoms[i];
                }
            }
            for i in r0..r1 {
                let width = c1.min(i + 1).saturating_sub(c0);
                for (t, &p) in tile[(i - r0) * block..(i - r0) * block + width].iter().enumerate() {
                    let j = c0 + t;
                    vertical[j] += p;
                    slash[i - j] += p;
                }
            }
        }
    }
    Ok(VSScores {
        vertical,
        slash,
        normalized: false,
    })
}

/// Human-readable table of the `k` highest entries per direction.
pub fn top_k_table(scores: &VSScores, k: usize) -> String {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    };
    let top_v = rank(&scores.vertical);
    let top_s = rank(&scores.slash);
    let mut out = String::from("rank\tcolumn\tvertical\toffset\tslash\n");
    for r in 0..top_v.len().max(top_s.len()) {
        let (c, vc) = top_v.get(r).map_or((String::new(), String::new()), |&j| {
            (j.to_string(), format!("{:.6}", scores.vertical[j]))
        });
        let (o, so) = top_s.get(r).map_or((String::new(), String::new()), |&o| {
            (o.to_string(), format!("{:.6}", scores.slash[o]))
        });
        let _ = writeln!(out, "{}\t{c}\t{vc}\t{o}\t{so}", r + 1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::full_attention;
    use crate::numerics::Rng;

    fn random_inputs(n: usize, d: usize, seed: u64) -> AttentionInputs {
        let mut rng = Rng::new(seed);
        let mut m = || Matrix::from_fn(n, d, |_, _| 1.5 * rng.normal());
        let (q, k, v) = (m(), m(), m());
        AttentionInputs::new(q, k, v).unwrap()
    }

    #[test]
    fn two_by_two_hand_sums() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let s = aggregate_naive(&a).unwrap();
        assert_eq!(s.vertical, vec![0.75, 0.25]);
        assert_eq!(s.slash, vec![0.75, 0.25]);
        assert!(s.normalized);
    }

    #[test]
    fn identity_attention() {
        let n = 5;
        let s = aggregate_naive(&Matrix::identity(n)).unwrap();
        assert!(s.vertical.iter().all(|&x| (x - 0.2).abs() < 1e-15));
        assert_eq!(s.slash, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn naive_conserves_mass() {
        let a = full_attention(&random_inputs(64, 8, 1), true).unwrap().a.unwrap();
        let s = aggregate_naive(&a).unwrap();
        assert!((s.vertical.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((s.slash.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn naive_rejects_non_stochastic() {
        let a = Matrix::from_rows(&[vec![0.5, 0.0], vec![0.5, 0.5]]).unwrap();
        assert!(aggregate_naive(&a).is_err());
    }

    #[test]
    fn streaming_single_tile_is_exact() {
        let inputs = random_inputs(50, 4, 2);
        let a = full_attention(&inputs, true).unwrap().a.unwrap();
        assert_eq!(aggregate_streaming(&inputs, 50).unwrap(), aggregate_naive(&a).unwrap());
    }

    #[test]
    fn streaming_matches_naive_n200_block32() {
        let inputs = random_inputs(200, 8, 3);
        let a = full_attention(&inputs, true).unwrap().a.unwrap();
        let naive = aggregate_naive(&a).unwrap();
        let stream = aggregate_streaming(&inputs, 32).unwrap();
        for (x, y) in naive.vertical.iter().zip(&stream.vertical) {
            assert!((x - y).abs() <= 1e-10);
        }
        for (x, y) in naive.slash.iter().zip(&stream.slash) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn raw_sums_equal_n() {
        let inputs = random_inputs(77, 4, 4);
        let raw = aggregate_streaming_raw(&inputs, 16).unwrap();
        assert!(!raw.normalized);
        raw.validate(1e-8 / 77.0).unwrap();
        assert!((raw.vertical.iter().sum::<f64>() - 77.0).abs() < 1e-8);
        assert!((raw.slash.iter().sum::<f64>() - 77.0).abs() < 1e-8);
    }

    #[test]
    fn identical_keys_give_harmonic_columns() {
        let n = 40;
        let mut rng = Rng::new(5);
        let q = Matrix::from_fn(n, 4, |_, _| rng.normal());
        let k = Matrix::from_fn(n, 4, |_, j| [0.2, 0.4, -0.1, 1.0][j]);
        let v = Matrix::from_fn(n, 4, |_, _| rng.normal());
        let inputs = AttentionInputs::new(q, k, v).unwrap();
        let s = aggregate_streaming(&inputs, 7).unwrap();
        for j in 0..n {
            let expected: f64 = (j..n).map(|i| 1.0 / (i + 1) as f64).sum::<f64>() / n as f64;
            assert!((s.vertical[j] - expected).abs() < 1e-13, "column {j}");
            // Offset o collects 1/(i+1) for rows i >= o: the same harmonic tail.
            assert!((s.slash[j] - expected).abs() < 1e-13, "offset {j}");
        }
    }

    #[test]
    fn values_do_not_matter() {
        let inputs = random_inputs(30, 4, 6);
        let mut rng = Rng::new(99);
        let other = inputs
            .with_values(Matrix::from_fn(30, 4, |_, _| rng.normal()))
            .unwrap();
        assert_eq!(
            aggregate_streaming(&inputs, 8).unwrap(),
            aggregate_streaming(&other, 8).unwrap()
        );
    }

    #[test]
    fn combine_mean_and_sum() {
        let a = VSScores::from_distributions(vec![1.0, 0.0], vec![0.5, 0.5]).unwrap();
        let b = VSScores::from_distributions(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let mean = combine_heads(&[a.clone(), b.clone()], HeadReduction::Mean).unwrap();
        assert_eq!(mean.vertical, vec![0.5, 0.5]);
        assert!(mean.normalized);
        let sum = combine_heads(&[a, b], HeadReduction::Sum).unwrap();
        assert_eq!(sum.slash, vec![1.0, 1.0]);
        assert!(!sum.normalized);
    }

    #[test]
    fn table_lists_top_entries() {
        let s = VSScores::from_distributions(vec![0.1, 0.7, 0.2], vec![0.6, 0.3, 0.1]).unwrap();
        let t = top_k_table(&s, 2);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "1\t1\t0.700000\t0\t0.600000");
    }
}
