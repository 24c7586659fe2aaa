//! Expected pre-softmax score under RoPE when queries and keys are
//! independent multivariate Gaussians.
//!
//! For plane `p` with complex means `mq_p = mq[2p] + i mq[2p+1]` and
//! `mk_p = mk[2p] + i mk[2p+1]`:
//!
//! ```text
//! a_p + i b_p = mq_p * conj(mk_p)
//! E[<R(m) q, R(n) k>] = sum_p a_p cos(d theta_p) - b_p sin(d theta_p),   d = m - n
//!                     = sum_p r_p cos(alpha_p + d theta_p)
//! ```
//!
//! with `r_p = |a_p + i b_p|` and `alpha_p = atan2(b_p, a_p)`. The expectation
//! depends on the offset `m - n` only. No softmax is applied here.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{dot, rotate_in_place, Covariance, GaussianSampler, Rng, RopeConfig};

#[derive(Clone, Debug)]
pub struct GaussianQKModel {
    pub mu_q: Vec<f64>,
    pub mu_k: Vec<f64>,
    pub sigma_q: Covariance,
    pub sigma_k: Covariance,
    pub rope: RopeConfig,
}

impl GaussianQKModel {
    pub fn new(
        mu_q: Vec<f64>,
        mu_k: Vec<f64>,
        sigma_q: Covariance,
        sigma_k: Covariance,
        rope: RopeConfig,
    ) -> Result<Self> {
        let dim = rope.head_dim();
        if mu_q.len() != dim || mu_k.len() != dim || sigma_q.dim() != dim || sigma_k.dim() != dim {
            return Err(Error::shape(format!(
                "means and covariances must all be {dim}-dimensional"
            )));
        }
        Ok(Self {
            mu_q,
            mu_k,
            sigma_q,
            sigma_k,
            rope,
        })
    }

    /// Unit-variance independent coordinates around the given means.
    pub fn isotropic(mu_q: Vec<f64>, mu_k: Vec<f64>, rope: RopeConfig) -> Result<Self> {
        let dim = rope.head_dim();
        Self::new(
            mu_q,
            mu_k,
            Covariance::isotropic(dim, 1.0),
            Covariance::isotropic(dim, 1.0),
            rope,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlashSpectrum {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub r: Vec<f64>,
    pub alpha: Vec<f64>,
}

pub fn slash_spectrum(model: &GaussianQKModel) -> SlashSpectrum {
    spectrum_from_means(&model.mu_q, &model.mu_k)
}

pub fn spectrum_from_means(mu_q: &[f64], mu_k: &[f64]) -> SlashSpectrum {
    let planes = mu_q.len() / 2;
    let mut s = SlashSpectrum {
        a: Vec::with_capacity(planes),
        b: Vec::with_capacity(planes),
        r: Vec::with_capacity(planes),
        alpha: Vec::with_capacity(planes),
    };
    for (q, k) in mu_q.chunks_exact(2).zip(mu_k.chunks_exact(2)) {
        let a = q[0] * k[0] + q[1] * k[1];
        let b = -q[0] * k[1] + q[1] * k[0];
        s.a.push(a);
        s.b.push(b);
        s.r.push(a.hypot(b));
        s.alpha.push(b.atan2(a));
    }
    s
}

/// `sum_p a_p cos(delta theta_p) - b_p sin(delta theta_p)`.
pub fn expected_score(spec: &SlashSpectrum, delta: f64, rope: &RopeConfig) -> f64 {
    spec.a
        .iter()
        .zip(&spec.b)
        .enumerate()
        .map(|(p, (&a, &b))| {
            let (sin, cos) = (delta * rope.theta(p)).sin_cos();
            a * cos - b * sin
        })
        .sum()
}

/// Amplitude-phase form `sum_p r_p cos(alpha_p + delta theta_p)`.
pub fn expected_score_polar(spec: &SlashSpectrum, delta: f64, rope: &RopeConfig) -> f64 {
    spec.r
        .iter()
        .zip(&spec.alpha)
        .enumerate()
        .map(|(p, (&r, &alpha))| r * (alpha + delta * rope.theta(p)).cos())
        .sum()
}

/// `<R(m) mu_q, R(n) mu_k>` by explicitly rotating both means.
pub fn expected_score_at_positions(mu_q: &[f64], mu_k: &[f64], m: f64, n: f64, rope: &RopeConfig) -> f64 {
    let thetas = rope.thetas();
    let mut q = mu_q.to_vec();
    let mut k = mu_k.to_vec();
    rotate_in_place(&mut q, m, &thetas);
    rotate_in_place(&mut k, n, &thetas);
    dot(&q, &k)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McPoint {
    pub delta: i64,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug)]
pub struct McOptions {
    /// Reuse the same `(q, k)` draws for every offset.
    pub common_random_numbers: bool,
    /// Key position `n`; the query sits at `n + delta`.
    pub key_position: i64,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            common_random_numbers: true,
            key_position: 0,
        }
    }
}

const MC_CHUNK: usize = 4096;

#[derive(Clone, Default)]
struct Moments {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Self {
            sum: vec![0.0; len],
            sum_sq: vec![0.0; len],
        }
    }

    fn push(&mut self, idx: usize, x: f64) {
        self.sum[idx] += x;
        self.sum_sq[idx] += x * x;
    }

    fn merge(mut self, other: &Moments) -> Self {
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
        self
    }
}

/// Empirical mean of `<R(n + delta) q, R(n) k>` over `samples` independent
/// draws `q ~ N(mu_q, Sigma_q)`, `k ~ N(mu_k, Sigma_k)`, per offset.
///
/// Work is split into fixed chunks with their own derived streams, so the
/// result does not depend on the thread count.
pub fn monte_carlo_score(
    model: &GaussianQKModel,
    deltas: &[i64],
    samples: usize,
    rng: &Rng,
    opts: &McOptions,
) -> Result<Vec<McPoint>> {
    if samples < 2 {
        return Err(Error::config("monte carlo needs at least 2 samples"));
    }
    let q_sampler = GaussianSampler::new(&model.mu_q, &model.sigma_q)?;
    let k_sampler = GaussianSampler::new(&model.mu_k, &model.sigma_k)?;
    let thetas = model.rope.thetas();
    let dim = model.rope.head_dim();
    let chunks = samples.div_ceil(MC_CHUNK);

    let run_chunk = |stream: u64, chunk: usize, targets: &[(usize, i64)]| {
        let mut local = rng.derive(stream).derive(chunk as u64);
        let count = MC_CHUNK.min(samples - chunk * MC_CHUNK);
        let mut moments = Moments::new(deltas.len());
        let mut q = vec![0.0; dim];
        let mut k = vec![0.0; dim];
        let mut qr = vec![0.0; dim];
        for _ in 0..count {
            q_sampler.draw_into(&mut local, &mut q);
            k_sampler.draw_into(&mut local, &mut k);
            rotate_in_place(&mut k, opts.key_position as f64, &thetas);
            for &(idx, delta) in targets {
                qr.copy_from_slice(&q);
                rotate_in_place(&mut qr, (opts.key_position + delta) as f64, &thetas);
                moments.push(idx, dot(&qr, &k));
            }
        }
        moments
    };

    let totals = if opts.common_random_numbers {
        let targets: Vec<(usize, i64)> = deltas.iter().copied().enumerate().collect();
        let parts: Vec<Moments> = (0..chunks)
            .into_par_iter()
            .map(|c| run_chunk(0, c, &targets))
            .collect();
        parts.iter().fold(Moments::new(deltas.len()), Moments::merge)
    } else {
        let parts: Vec<Moments> = (0..deltas.len() * chunks)
            .into_par_iter()
            .map(|job| {
                let (idx, c) = (job / chunks, job % chunks);
                run_chunk(1 + idx as u64, c, &[(idx, deltas[idx])])
            })
            .collect();
        parts.iter().fold(Moments::new(deltas.len()), Moments::merge)
    };

    let n = samples as f64;
    Ok(deltas
        .iter()
        .enumerate()
        .map(|(i, &delta)| {
            let mean = totals.sum[i] / n;
            let var = ((totals.sum_sq[i] - n * mean * mean) / (n - 1.0)).max(0.0);
            McPoint {
                delta,
                mean,
                stderr: (var / n).sqrt(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedMeans {
    pub mu_q: Vec<f64>,
    pub mu_k: Vec<f64>,
    /// Requested offsets past half the slowest plane's period.
    pub unreachable: Vec<usize>,
}

/// Means whose expected-score profile peaks at each requested offset, with
/// equal weights and every rotation plane in use.
pub fn plant_slash_means(offsets: &[usize], rope: &RopeConfig, strength: f64) -> Result<PlantedMeans> {
    let targets: Vec<(usize, f64)> = offsets.iter().map(|&o| (o, 1.0)).collect();
    let planes: Vec<usize> = (0..rope.planes()).collect();
    plant_slash_means_weighted(&targets, rope, strength, &planes)
}

/// Inverse design of the slash profile. Keys get mean `(sqrt(s), 0)` in
/// every used plane; query plane `p` gets
/// `sqrt(s) * sum_T w_T * (cos(T theta_p), -sin(T theta_p))` with weights
/// normalized to unit total, so the profile is
/// `s * sum_T w_T sum_p cos((delta - T) theta_p)`: constructive interference
/// at every target offset. Unused planes stay zero.
pub fn plant_slash_means_weighted(
    targets: &[(usize, f64)],
    rope: &RopeConfig,
    strength: f64,
    planes: &[usize],
) -> Result<PlantedMeans> {
    if !(strength.is_finite() && strength >= 0.0) {
        return Err(Error::config(format!("strength must be >= 0, got {strength}")));
    }
    if let Some(&p) = planes.iter().find(|&&p| p >= rope.planes()) {
        return Err(Error::config(format!("plane {p} out of range")));
    }
    if targets.iter().any(|t| !(t.1.is_finite() && t.1 >= 0.0)) {
        return Err(Error::config("target weights must be finite and >= 0"));
    }
    let dim = rope.head_dim();
    let mut mu_q = vec![0.0; dim];
    let mut mu_k = vec![0.0; dim];
    let total: f64 = targets.iter().map(|t| t.1).sum();
    let mut unreachable = Vec::new();
    if let Some(slowest) = planes.iter().map(|&p| rope.theta(p)).reduce(f64::min) {
        for &(offset, _) in targets {
            if offset as f64 * slowest > std::f64::consts::PI {
                log::warn!("slash offset {offset} exceeds half the slowest plane period; planting best-effort");
                unreachable.push(offset);
            }
        }
    }
    if strength == 0.0 || total == 0.0 {
        return Ok(PlantedMeans {
            mu_q,
            mu_k,
            unreachable,
        });
    }
    let amp = strength.sqrt();
    for &p in planes {
        let theta = rope.theta(p);
        let (mut re, mut im) = (0.0, 0.0);
        for &(offset, w) in targets {
            let (sin, cos) = (offset as f64 * theta).sin_cos();
            re += w / total * cos;
            im -= w / total * sin;
        }
        mu_q[2 * p] = amp * re;
        mu_q[2 * p + 1] = amp * im;
        mu_k[2 * p] = amp;
    }
    Ok(PlantedMeans {
        mu_q,
        mu_k,
        unreachable,
    })
}

/// Closed-form profile over a list of offsets.
pub fn expected_profile(mu_q: &[f64], mu_k: &[f64], deltas: &[i64], rope: &RopeConfig) -> Vec<f64> {
    let spec = spectrum_from_means(mu_q, mu_k);
    deltas
        .iter()
        .map(|&d| expected_score(&spec, d as f64, rope))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn rope(d: usize) -> RopeConfig {
        RopeConfig::with_default_base(d).unwrap()
    }

    #[test]
    fn zero_query_mean_gives_zero_spectrum() {
        let s = spectrum_from_means(&[0.0; 6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(s.a.iter().chain(&s.b).chain(&s.r).all(|&x| x == 0.0));
    }

    #[test]
    fn aligned_unit_means() {
        let s = spectrum_from_means(&[1.0, 0.0], &[1.0, 0.0]);
        assert_eq!((s.a[0], s.b[0], s.r[0], s.alpha[0]), (1.0, 0.0, 1.0, 0.0));
        let r = rope(2);
        for delta in [0.0, 1.0, 2.5, -7.0] {
            assert!((expected_score(&s, delta, &r) - f64::cos(delta)).abs() < 1e-15);
        }
    }

    #[test]
    fn quadrature_means_give_negative_sine() {
        let s = spectrum_from_means(&[0.0, 1.0], &[1.0, 0.0]);
        assert_eq!((s.a[0], s.b[0], s.r[0]), (0.0, 1.0, 1.0));
        let r = rope(2);
        for delta in [0.0, 0.3, 1.0, 4.0, -2.0] {
            let direct = expected_score(&s, delta, &r);
            assert!((direct + f64::sin(delta)).abs() < 1e-15);
            let rotated = expected_score_at_positions(&[0.0, 1.0], &[1.0, 0.0], delta, 0.0, &r);
            assert!((direct - rotated).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_offset_is_inner_product() {
        let mut rng = Rng::new(1);
        let q: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let k: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let s = spectrum_from_means(&q, &k);
        assert_eq!(expected_score(&s, 0.0, &rope(8)), s.a.iter().sum::<f64>());
        assert!((s.a.iter().sum::<f64>() - dot(&q, &k)).abs() < 1e-14);
    }

    #[test]
    fn even_in_offset_when_b_vanishes() {
        let s = SlashSpectrum {
            a: vec![0.7, -1.3, 2.0],
            b: vec![0.0; 3],
            r: vec![0.7, 1.3, 2.0],
            alpha: vec![0.0, std::f64::consts::PI, 0.0],
        };
        let r = rope(6);
        for delta in [1.0, 5.0, 33.0] {
            assert_eq!(expected_score(&s, delta, &r), expected_score(&s, -delta, &r));
        }
    }

    #[test]
    fn polar_form_agrees_in_all_quadrants() {
        let r = rope(8);
        let mut rng = Rng::new(2);
        for _ in 0..50 {
            let q: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let k: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let s = spectrum_from_means(&q, &k);
            for (p, (&a, &b)) in s.a.iter().zip(&s.b).enumerate() {
                assert!((s.r[p] * s.alpha[p].cos() - a).abs() < 1e-12);
                assert!((s.r[p] * s.alpha[p].sin() - b).abs() < 1e-12);
            }
            for delta in [-5000.0, -3.0, 0.0, 17.0, 10_000.0] {
                let d = expected_score(&s, delta, &r);
                let p = expected_score_polar(&s, delta, &r);
                assert!((d - p).abs() < 1e-12 * (1.0 + delta.abs()), "{d} vs {p}");
            }
        }
    }

    #[test]
    fn explicit_rotation_depends_only_on_offset() {
        let r = rope(8);
        let mut rng = Rng::new(3);
        let q: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let k: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let s = spectrum_from_means(&q, &k);
        for (m, n) in [(10.0, 3.0), (3.0, 10.0), (500.0, 480.0)] {
            let closed = expected_score(&s, m - n, &r);
            for shift in [0.0, 1.0, 250.0] {
                let rotated = expected_score_at_positions(&q, &k, m + shift, n + shift, &r);
                assert!((closed - rotated).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn degenerate_covariance_matches_closed_form() {
        let r = rope(4);
        let mu_q = vec![0.5, -1.0, 2.0, 0.1];
        let mu_k = vec![1.0, 0.3, -0.4, 0.8];
        let model = GaussianQKModel::new(
            mu_q.clone(),
            mu_k.clone(),
            Covariance::zero(4),
            Covariance::Full(Matrix::zeros(4, 4)),
            r.clone(),
        )
        .unwrap();
        let deltas: Vec<i64> = (0..20).collect();
        let pts = monte_carlo_score(&model, &deltas, 100, &Rng::new(4), &McOptions::default()).unwrap();
        let closed = expected_profile(&mu_q, &mu_k, &deltas, &r);
        for (pt, c) in pts.iter().zip(closed) {
            assert!((pt.mean - c).abs() < 1e-12);
            assert!(pt.stderr < 1e-6);
        }
    }

    #[test]
    fn shifting_positions_leaves_profile_unchanged() {
        let r = rope(4);
        let model = GaussianQKModel::isotropic(vec![1.0, 0.5, -0.3, 0.2], vec![0.4, 1.0, 0.9, -0.6], r).unwrap();
        let deltas: Vec<i64> = (0..10).collect();
        let base = monte_carlo_score(&model, &deltas, 20_000, &Rng::new(5), &McOptions::default()).unwrap();
        let shifted = monte_carlo_score(
            &model,
            &deltas,
            20_000,
            &Rng::new(5),
            &McOptions {
                key_position: 123,
                ..McOptions::default()
            },
        )
        .unwrap();
        for (a, b) in base.iter().zip(&shifted) {
            assert!((a.mean - b.mean).abs() < 1e-9, "{a:?} {b:?}");
        }
    }

    #[test]
    fn independent_draws_also_agree() {
        let r = rope(4);
        let model = GaussianQKModel::isotropic(vec![1.0, 0.0, 0.5, 0.5], vec![1.0, 0.0, 0.5, -0.5], r.clone()).unwrap();
        let deltas: Vec<i64> = (0..8).collect();
        let opts = McOptions {
            common_random_numbers: false,
            key_position: 0,
        };
        let pts = monte_carlo_score(&model, &deltas, 30_000, &Rng::new(6), &opts).unwrap();
        let closed = expected_profile(&model.mu_q, &model.mu_k, &deltas, &r);
        for (pt, c) in pts.iter().zip(closed) {
            assert!((pt.mean - c).abs() <= 4.0 * pt.stderr);
        }
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let model = GaussianQKModel::isotropic(vec![1.0; 4], vec![0.5; 4], rope(4)).unwrap();
        let a = monte_carlo_score(&model, &[0, 1, 2], 10_000, &Rng::new(7), &McOptions::default()).unwrap();
        let b = monte_carlo_score(&model, &[0, 1, 2], 10_000, &Rng::new(7), &McOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plant_single_offset_zero_aligns_means() {
        let r = rope(8);
        let planted = plant_slash_means(&[0], &r, 2.0).unwrap();
        for (q, k) in planted.mu_q.chunks(2).zip(planted.mu_k.chunks(2)) {
            assert!(q[1].abs() < 1e-15 && k[1] == 0.0);
            assert!(q[0] > 0.0 && k[0] > 0.0);
        }
        let deltas: Vec<i64> = (-50..=50).collect();
        let prof = expected_profile(&planted.mu_q, &planted.mu_k, &deltas, &r);
        let argmax = (0..prof.len()).max_by(|&a, &b| prof[a].total_cmp(&prof[b])).unwrap();
        assert_eq!(deltas[argmax], 0);
    }

    #[test]
    fn plant_single_plane_peaks_at_multiples() {
        // Plane 1 of a 4-dim rope has theta = base^(-1/2); choose base so theta = 2 pi / T.
        let period = 16.0;
        let base = (period / (2.0 * std::f64::consts::PI)).powi(2);
        let r = RopeConfig::new(4, base).unwrap();
        assert!((r.theta(1) - 2.0 * std::f64::consts::PI / period).abs() < 1e-12);
        let planted = plant_slash_means_weighted(&[(16, 1.0)], &r, 1.0, &[1]).unwrap();
        let deltas: Vec<i64> = (0..=64).collect();
        let prof = expected_profile(&planted.mu_q, &planted.mu_k, &deltas, &r);
        let max = prof.iter().copied().fold(f64::MIN, f64::max);
        let peaks: Vec<i64> = deltas
            .iter()
            .zip(&prof)
            .filter(|(_, &v)| v > max - 1e-9)
            .map(|(&d, _)| d)
            .collect();
        assert_eq!(peaks, vec![0, 16, 32, 48, 64]);
    }

    #[test]
    fn plant_zero_strength_is_flat() {
        let r = rope(8);
        let planted = plant_slash_means(&[5, 9], &r, 0.0).unwrap();
        assert!(planted.mu_q.iter().chain(&planted.mu_k).all(|&x| x == 0.0));
    }

    #[test]
    fn plant_multiple_offsets_creates_local_maxima() {
        let r = rope(16);
        let planes: Vec<usize> = (0..6).collect();
        let planted = plant_slash_means_weighted(&[(0, 1.0), (24, 1.0), (60, 1.0)], &r, 4.0, &planes).unwrap();
        let deltas: Vec<i64> = (0..120).collect();
        let prof = expected_profile(&planted.mu_q, &planted.mu_k, &deltas, &r);
        for t in [24usize, 60] {
            let window = &prof[t - 3..=t + 3];
            let local = (0..window.len()).max_by(|&a, &b| window[a].total_cmp(&window[b])).unwrap();
            assert!((local as i64 - 3).abs() <= 2, "offset {t}: {window:?}");
        }
    }

    #[test]
    fn plant_flags_unreachable_offsets() {
        let r = rope(4);
        // Slowest theta is 0.01 for a 4-dim rope; pi / 0.01 ~ 314.
        let planted = plant_slash_means(&[10, 400], &r, 1.0).unwrap();
        assert_eq!(planted.unreachable, vec![400]);
    }
}
