//! Synthetic attention heads with planted vertical anchors and slash
//! offsets, and the `VSTN` tensor file format.
//!
//! Generation for one head:
//!
//! 1. Query/key means come from [`plant_slash_means_weighted`] over every
//!    rotation plane but the slowest, which carries a shared query bias
//!    (`query_bias`) instead. That plane barely rotates over the sequence, so
//!    it acts as a position-independent "global" direction.
//! 2. Rows are `mean + noise_sigma * N(0, I)`, then RoPE at their position.
//! 3. Anchor key rows get `strength * sqrt(d) * g / |g|^2` added after
//!    rotation, with `g` the mean rotated query. An average query therefore
//!    gains `strength` logits on every anchor regardless of distance.
//!    Random anchors are drawn from the first half of the sequence, where
//!    enough queries remain to make them heavy hitters.
//! 4. Values are standard normal plus two planted signals standing in for
//!    hidden-state content: `value_signal` on coordinate 0 of anchor rows,
//!    and an absolute-position code of amplitude `value_position`: pairs
//!    `(cos, sin)(t * theta_m)` on the following coordinates, using the
//!    rotary frequency ladder.
//! 5. Targets are the streaming aggregate of the resulting head.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::attention::AttentionInputs;
use crate::error::{Error, Result};
use crate::numerics::{apply_rope_sequential, Matrix, Rng, RopeConfig, DEFAULT_ROPE_BASE};
use crate::theory::plant_slash_means_weighted;
use crate::vsaggregate::{aggregate_streaming, VSScores};

/// Tile size used when computing ground-truth targets.
pub const TARGET_BLOCK: usize = 64;


#[derive(Clone, Debug, PartialEq)]
pub struct PlantSpec {
    pub n: usize,
    pub d: usize,
    /// Fixed anchor columns with their strengths.
    pub anchors: Vec<(usize, f64)>,
    /// Extra anchors drawn uniformly per sample.
    pub random_anchors: usize,
    pub random_anchor_strength: f64,
    /// Planted diagonal offsets with relative weights; the weights sum to the
    /// planting strength.
    pub slash_offsets: Vec<(usize, f64)>,
    pub noise_sigma: f64,
    pub query_bias: f64,
    pub value_signal: f64,
    pub value_position: f64,
    pub rope_base: f64,
    pub seed: u64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            n: 256,
            d: 16,
            anchors: vec![(0, 8.0)],
            random_anchors: 4,
            random_anchor_strength: 6.0,
            slash_offsets: vec![(0, 1.5), (16, 1.5), (48, 1.5)],
            noise_sigma: 1.0,
            query_bias: 1.0,
            value_signal: 2.0,
            value_position: 4.0,
            rope_base: DEFAULT_ROPE_BASE,
            seed: 0,
        }
    }
}

impl PlantSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("n must be >= 1"));
        }
        if self.d < 2 || !self.d.is_multiple_of(2) {
            return Err(Error::config(format!("d must be even and >= 2, got {}", self.d)));
        }
        if let Some(&(c, _)) = self.anchors.iter().find(|a| a.0 >= self.n) {
            return Err(Error::config(format!("anchor {c} out of range for n = {}", self.n)));
        }
        if let Some(&(o, _)) = self.slash_offsets.iter().find(|s| s.0 >= self.n) {
            return Err(Error::config(format!("slash offset {o} out of range for n = {}", self.n)));
        }
        if self.random_anchors + self.anchors.len() > self.n.div_ceil(2) {
            return Err(Error::config("more anchors than tokens"));
        }
        let reals = [
            self.noise_sigma,
            self.random_anchor_strength,
            self.query_bias,
            self.value_signal,
            self.value_position,
        ];
        if !reals.iter().all(|x| x.is_finite()) || self.noise_sigma < 0.0 {
            return Err(Error::config("noise_sigma must be >= 0 and all strengths finite"));
        }
        if self.anchors.iter().chain(&self.slash_offsets).any(|a| !(a.1.is_finite() && a.1 >= 0.0)) {
            return Err(Error::config("anchor and slash strengths must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn rope(&self) -> Result<RopeConfig> {
        RopeConfig::new(self.d, self.rope_base)
    }

    /// The unrotated query and key means shared by every sample.
    pub fn means(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let rope = self.rope()?;
        let planes = rope.planes();
        let slash_planes: Vec<usize> = if planes > 1 { (0..planes - 1).collect() } else { vec![0] };
        let strength: f64 = self.slash_offsets.iter().map(|s| s.1).sum();
        let planted = plant_slash_means_weighted(&self.slash_offsets, &rope, strength, &slash_planes)?;
        let (mut mu_q, mu_k) = (planted.mu_q, planted.mu_k);
        if planes > 1 {
            mu_q[2 * (planes - 1)] = self.query_bias;
        }
        Ok((mu_q, mu_k))
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub target: VSScores,
    /// Sorted anchor columns actually planted.
    pub anchors: Vec<usize>,
}

impl SyntheticSample {
    pub fn inputs(&self) -> Result<AttentionInputs> {
        AttentionInputs::new(self.q.clone(), self.k.clone(), self.v.clone())
    }
}

fn noisy_rows(mean: &[f64], n: usize, sigma: f64, rng: &mut Rng) -> Matrix {
    let d = mean.len();
    Matrix::from_fn(n, d, |_, c| mean[c] + sigma * rng.normal())
}

pub fn generate(spec: &PlantSpec) -> Result<SyntheticSample> {
    spec.validate()?;
    let (n, d) = (spec.n, spec.d);
    let rope = spec.rope()?;
    let (mu_q, mu_k) = spec.means()?;
    let root = Rng::new(spec.seed);

    let q = apply_rope_sequential(&noisy_rows(&mu_q, n, spec.noise_sigma, &mut root.derive(1)), &rope)?;
    let mut k = apply_rope_sequential(&noisy_rows(&mu_k, n, spec.noise_sigma, &mut root.derive(2)), &rope)?;
    let mut v = noisy_rows(&vec![0.0; d], n, 1.0, &mut root.derive(3));
    let pairs = (d - 1) / 2;
    if spec.value_position != 0.0 && pairs > 0 {
        for t in 0..n {
            let row = v.row_mut(t);
            for (m, pair) in row[1..].chunks_exact_mut(2).enumerate() {
                let (sin, cos) = (t as f64 * rope.theta(m)).sin_cos();
                pair[0] += spec.value_position * cos;
                pair[1] += spec.value_position * sin;
            }
        }
    }

    let mut anchors: Vec<(usize, f64)> = spec.anchors.clone();
    if spec.random_anchors > 0 {
        let fixed: Vec<usize> = anchors.iter().map(|a| a.0).collect();
        let free: Vec<usize> = (0..n.div_ceil(2)).filter(|j| !fixed.contains(j)).collect();
        let picks = root.derive(4).sample_distinct(free.len(), spec.random_anchors);
        anchors.extend(picks.into_iter().map(|i| (free[i], spec.random_anchor_strength)));
    }

    let mut g = vec![0.0; d];
    for row in q.row_iter() {
        for (a, b) in g.iter_mut().zip(row) {
            *a += b;
        }
    }
    g.iter_mut().for_each(|x| *x /= n as f64);
    let norm_sq = g.iter().map(|x| x * x).sum::<f64>();
    if norm_sq > 1e-12 {
        let scale = (d as f64).sqrt() / norm_sq;
        g.iter_mut().for_each(|x| *x *= scale);
    } else {
        g.iter_mut().for_each(|x| *x = 0.0);
        g[d - 2] = 1.0;
    }
    for &(c, s) in &anchors {
        for (x, gc) in k.row_mut(c).iter_mut().zip(&g) {
            *x += s * gc;
        }
        v.row_mut(c)[0] += spec.value_signal;
    }

    let inputs = AttentionInputs::new(q, k, v)?;
    let target = aggregate_streaming(&inputs, TARGET_BLOCK)?;
    let mut anchor_cols: Vec<usize> = anchors.iter().map(|a| a.0).collect();
    anchor_cols.sort_unstable();
    anchor_cols.dedup();
    Ok(SyntheticSample {
        q: inputs.q().clone(),
        k: inputs.k().clone(),
        v: inputs.v().clone(),
        target,
        anchors: anchor_cols,
    })
}

/// Seed of sample `index` in a dataset rooted at `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    Rng::new(seed).derive(index as u64).seed()
}

/// `count` samples with per-sample derived seeds, generated in parallel.
pub fn generate_dataset(spec: &PlantSpec, count: usize) -> Result<Vec<SyntheticSample>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            generate(&PlantSpec {
                seed: sample_seed(spec.seed, i),
                ..spec.clone()
            })
        })
        .collect()
}

const TENSOR_MAGIC: &[u8; 4] = b"VSTN";
const TENSOR_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn into_matrix(self) -> Result<Matrix> {
        match self.dims[..] {
            [r, c] => Matrix::new(r, c, self.data),
            _ => Err(Error::Format(format!(
                "expected a rank-2 tensor, found rank {}",
                self.dims.len()
            ))),
        }
    }

    pub fn into_vector(self) -> Result<Vec<f64>> {
        match self.dims[..] {
            [_] => Ok(self.data),
            _ => Err(Error::Format(format!(
                "expected a rank-1 tensor, found rank {}",
                self.dims.len()
            ))),
        }
    }
}

pub fn encode_tensor(dims: &[usize], data: &[f64]) -> Vec<u8> {
    assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut out = Vec::with_capacity(12 + 8 * dims.len() + 8 * data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 12 {
        return Err(Error::Format("truncated header".into()));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Format("not a VSTN tensor file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!(
            "unsupported tensor version {version} (expected {TENSOR_VERSION})"
        )));
    }
    let ndim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = 12 + 8 * ndim;
    if bytes.len() < header {
        return Err(Error::Format("truncated header".into()));
    }
    let dims: Vec<usize> = bytes[12..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor dimensions overflow".into()))?;
    let payload = &bytes[header..];
    if payload.len() != 8 * count {
        return Err(Error::Format(format!(
            "truncated payload: header promises {count} values ({} bytes), found {} bytes",
            8 * count,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor { dims, data })
}

pub fn write_tensor(path: &Path, m: &Matrix) -> Result<()> {
    fs::write(path, encode_tensor(&[m.rows(), m.cols()], m.data()))?;
    Ok(())
}

pub fn write_vector(path: &Path, v: &[f64]) -> Result<()> {
    fs::write(path, encode_tensor(&[v.len()], v))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| io_context(e, path))?;
    decode_tensor(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    read_tensor(path)?
        .into_matrix()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_vector(path: &Path) -> Result<Vec<f64>> {
    read_tensor(path)?
        .into_vector()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn io_context(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub const Q_FILE: &str = "q.vstn";
pub const K_FILE: &str = "k.vstn";
pub const V_FILE: &str = "v.vstn";
pub const TARGET_V_FILE: &str = "target_v.vstn";
pub const TARGET_S_FILE: &str = "target_s.vstn";

pub fn sample_dir_name(index: usize) -> String {
    format!("sample_{index:04}")
}

pub fn write_sample_dir(dir: &Path, s: &SyntheticSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_tensor(&dir.join(Q_FILE), &s.q)?;
    write_tensor(&dir.join(K_FILE), &s.k)?;
    write_tensor(&dir.join(V_FILE), &s.v)?;
    write_vector(&dir.join(TARGET_V_FILE), &s.target.vertical)?;
    write_vector(&dir.join(TARGET_S_FILE), &s.target.slash)?;
    Ok(())
}

/// Q, K, V of a sample directory.
pub fn read_qkv(dir: &Path) -> Result<AttentionInputs> {
    AttentionInputs::new(
        read_matrix(&dir.join(Q_FILE))?,
        read_matrix(&dir.join(K_FILE))?,
        read_matrix(&dir.join(V_FILE))?,
    )
}

pub fn read_targets(dir: &Path) -> Result<VSScores> {
    VSScores::from_distributions(
        read_vector(&dir.join(TARGET_V_FILE))?,
        read_vector(&dir.join(TARGET_S_FILE))?,
    )
}

/// Sample directories under `root` (those containing a key tensor), sorted.
/// A directory that is itself a sample is returned alone.
pub fn list_sample_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(K_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| io_context(e, root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(K_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(dirs)
}
