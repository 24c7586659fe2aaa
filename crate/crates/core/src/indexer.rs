//! The vertical/slash indexer: a two-layer scoring network over per-token
//! features (by default `concat(K, V)`), trained by distillation against
//! ground-truth aggregates.
//!
//! ```text
//! Z      = SiLU(X W_U + b_U)
//! pred_v = softmax(Z w_v + b_v)          one entry per key column
//! pred_s = softmax(Z w_s + b_s)          token t scores offset n-1-t
//! ```
//!
//! Keys and values are inputs only; nothing here differentiates through them.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{silu, silu_grad, Matrix, Rng};
use crate::vsaggregate::VSScores;

pub const DEFAULT_EPS: f64 = 1e-8;

/// Which token features feed the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InputFeatures {
    Q,
    K,
    V,
    QK,
    #[default]
    KV,
}

impl InputFeatures {
    pub const ALL: [InputFeatures; 5] = [Self::Q, Self::K, Self::V, Self::QK, Self::KV];

    pub fn name(self) -> &'static str {
        match self {
            Self::Q => "Q",
            Self::K => "K",
            Self::V => "V",
            Self::QK => "QK",
            Self::KV => "KV",
        }
    }

    pub fn width(self, d: usize) -> usize {
        match self {
            Self::Q | Self::K | Self::V => d,
            Self::QK | Self::KV => 2 * d,
        }
    }

    /// Hidden width that keeps `W_U` the same size as a dual-feature
    /// network with `d_h` hidden units.
    pub fn normalized_hidden(self, d_h: usize) -> usize {
        match self {
            Self::Q | Self::K | Self::V => 2 * d_h,
            Self::QK | Self::KV => d_h,
        }
    }

    pub fn build(self, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
        match self {
            Self::Q => Ok(q.clone()),
            Self::K => Ok(k.clone()),
            Self::V => Ok(v.clone()),
            Self::QK => q.hconcat(k),
            Self::KV => k.hconcat(v),
        }
    }
}

impl std::str::FromStr for InputFeatures {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown input features {s:?}")))
    }
}

/// How the per-token slash logit is assigned to a diagonal offset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SlashMapping {
    /// Token `t` scores offset `n - 1 - t`.
    #[default]
    AnchorLast,
    /// Token `t` scores offset `t`.
    Identity,
}

impl SlashMapping {
    pub fn offset(self, t: usize, n: usize) -> usize {
        match self {
            Self::AnchorLast => n - 1 - t,
            Self::Identity => t,
        }
    }

    /// Reorders a token-indexed vector into offset order. Both mappings are
    /// involutions, so this also maps offsets back to tokens.
    pub fn permute(self, by_token: &[f64]) -> Vec<f64> {
        let n = by_token.len();
        (0..n).map(|o| by_token[self.offset(o, n)]).collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::AnchorLast => "anchor_last",
            Self::Identity => "identity",
        }
    }
}

impl std::str::FromStr for SlashMapping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchor_last" => Ok(Self::AnchorLast),
            "identity" => Ok(Self::Identity),
            _ => Err(Error::config(format!(
                "unknown slash mapping {s:?} (expected anchor_last or identity)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexerParams {
    pub w_u: Matrix,
    pub b_u: Vec<f64>,
    pub w_v: Vec<f64>,
    pub b_v: f64,
    pub w_s: Vec<f64>,
    pub b_s: f64,
}

impl IndexerParams {
    pub fn zeros(in_dim: usize, d_h: usize) -> Self {
        Self {
            w_u: Matrix::zeros(in_dim, d_h),
            b_u: vec![0.0; d_h],
            w_v: vec![0.0; d_h],
            b_v: 0.0,
            w_s: vec![0.0; d_h],
            b_s: 0.0,
        }
    }

    /// `W_U ~ U(-1/sqrt(in_dim), 1/sqrt(in_dim))`, everything else zero, so
    /// the first predictions are uniform.
    pub fn init(in_dim: usize, d_h: usize, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(in_dim, d_h);
        let bound = 1.0 / (in_dim as f64).sqrt();
        for w in p.w_u.data_mut() {
            *w = rng.uniform(-bound, bound);
        }
        p
    }

    pub fn in_dim(&self) -> usize {
        self.w_u.rows()
    }

    pub fn d_h(&self) -> usize {
        self.w_u.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.d_h();
        if self.b_u.len() != h || self.w_v.len() != h || self.w_s.len() != h {
            return Err(Error::shape(format!(
                "indexer parameters disagree on hidden width {h}"
            )));
        }
        if !self.flat().iter().all(|x| x.is_finite()) {
            return Err(Error::config("indexer parameters contain non-finite values"));
        }
        Ok(())
    }

    /// Errors unless the parameters expect `in_dim` features and `d_h` units.
    pub fn check_dims(&self, in_dim: usize, d_h: usize) -> Result<()> {
        if self.in_dim() != in_dim {
            return Err(Error::shape(format!(
                "indexer expects {} input features, got {in_dim}",
                self.in_dim()
            )));
        }
        if self.d_h() != d_h {
            return Err(Error::shape(format!(
                "indexer hidden width {} does not match configured d_h {d_h}",
                self.d_h()
            )));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.w_u.data().len() + 3 * self.d_h() + 2
    }

    /// Parameters in checkpoint order: W_U, b_U, w_v, b_v, w_s, b_s.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(self.w_u.data());
        out.extend_from_slice(&self.b_u);
        out.extend_from_slice(&self.w_v);
        out.push(self.b_v);
        out.extend_from_slice(&self.w_s);
        out.push(self.b_s);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let h = self.d_h();
        let (w_u, rest) = flat.split_at(self.w_u.data().len());
        self.w_u.data_mut().copy_from_slice(w_u);
        let (b_u, rest) = rest.split_at(h);
        self.b_u.copy_from_slice(b_u);
        let (w_v, rest) = rest.split_at(h);
        self.w_v.copy_from_slice(w_v);
        self.b_v = rest[0];
        let (w_s, rest) = rest[1..].split_at(h);
        self.w_s.copy_from_slice(w_s);
        self.b_s = rest[0];
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexerActivations {
    pub x: Matrix,
    pub h: Matrix,
    pub z: Matrix,
    pub logits_v: Vec<f64>,
    /// Token order.
    pub logits_s: Vec<f64>,
    pub pred_v: Vec<f64>,
    /// Offset order.
    pub pred_s: Vec<f64>,
    pub mapping: SlashMapping,
}

impl IndexerActivations {
    pub fn n(&self) -> usize {
        self.pred_v.len()
    }

    pub fn scores(&self) -> VSScores {
        VSScores {
            vertical: self.pred_v.clone(),
            slash: self.pred_s.clone(),
            normalized: true,
        }
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Forward pass on `concat(K, V)`.
pub fn indexer_forward(p: &IndexerParams, k: &Matrix, v: &Matrix) -> Result<IndexerActivations> {
    if k.shape() != v.shape() {
        return Err(Error::shape(format!(
            "keys are {:?} but values are {:?}",
            k.shape(),
            v.shape()
        )));
    }
    forward_features(p, k.hconcat(v)?, SlashMapping::default())
}

/// Forward pass on an arbitrary `n x in_dim` feature matrix.
pub fn forward_features(p: &IndexerParams, x: Matrix, mapping: SlashMapping) -> Result<IndexerActivations> {
    if x.cols() != p.in_dim() {
        return Err(Error::shape(format!(
            "indexer expects {} input features, got {}",
            p.in_dim(),
            x.cols()
        )));
    }
    if x.rows() == 0 {
        return Err(Error::shape("indexer input has no tokens"));
    }
    let mut h = x.matmul(&p.w_u)?;
    for row in h.data_mut().chunks_exact_mut(p.d_h()) {
        for (a, b) in row.iter_mut().zip(&p.b_u) {
            *a += b;
        }
    }
    let z = h.map(silu);
    let mut logits_v = Vec::with_capacity(x.rows());
    let mut logits_s = Vec::with_capacity(x.rows());
    for row in z.row_iter() {
        logits_v.push(crate::numerics::dot(row, &p.w_v) + p.b_v);
        logits_s.push(crate::numerics::dot(row, &p.w_s) + p.b_s);
    }
    let pred_v = crate::numerics::softmax(&logits_v);
    let pred_s = mapping.permute(&crate::numerics::softmax(&logits_s));
    Ok(IndexerActivations {
        x,
        h,
        z,
        logits_v,
        logits_s,
        pred_v,
        pred_s,
        mapping,
    })
}

fn check_distribution(v: &[f64], what: &str) -> Result<()> {
    if let Some(x) = v.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::Distribution(format!("{what} has invalid entry {x}")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Distribution(format!("{what} sums to {sum}")));
    }
    Ok(())
}

/// `sum pred * ln(pred / (target + eps))`, with `0 ln 0 = 0`.
pub fn kl_loss(pred: &[f64], target: &[f64], eps: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "prediction has {} entries, target {}",
            pred.len(),
            target.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::config(format!("eps must be positive, got {eps}")));
    }
    check_distribution(pred, "prediction")?;
    check_distribution(target, "target")?;
    Ok(pred
        .iter()
        .zip(target)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &t)| p * (p / (t + eps)).ln())
        .sum())
}

/// Distillation objective on one softmax head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossFn {
    /// `KL(pred || target + eps)`.
    Kl { eps: f64 },
    /// `KL(target || pred)`.
    ReverseKl,
    Mse,
    Msle,
    Cosine,
}

impl Default for LossFn {
    fn default() -> Self {
        LossFn::Kl { eps: DEFAULT_EPS }
    }
}

impl LossFn {
    pub fn name(self) -> &'static str {
        match self {
            Self::Kl { .. } => "KL",
            Self::ReverseKl => "ReverseKL",
            Self::Mse => "MSE",
            Self::Msle => "MSLE",
            Self::Cosine => "Cosine",
        }
    }

    /// Loss and its gradient with respect to the logits that produced `pred`.
    pub fn value_and_grad(self, logits: &[f64], pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
        let n = pred.len() as f64;
        match self {
            Self::Kl { eps } => {
                let logp = log_softmax(logits);
                let terms: Vec<f64> = pred
                    .iter()
                    .zip(&logp)
                    .zip(target)
                    .map(|((&p, &lp), &t)| if p > 0.0 { lp - (t + eps).ln() } else { 0.0 })
                    .collect();
                let loss: f64 = pred.iter().zip(&terms).map(|(p, g)| p * g).sum();
                let grad = pred.iter().zip(&terms).map(|(&p, &g)| p * (g - loss)).collect();
                (loss, grad)
            }
            Self::ReverseKl => {
                let logp = log_softmax(logits);
                let loss = target
                    .iter()
                    .zip(&logp)
                    .filter(|(&t, _)| t > 0.0)
                    .map(|(&t, &lp)| t * (t.ln() - lp))
                    .sum();
                let mass: f64 = target.iter().sum();
                let grad = pred.iter().zip(target).map(|(&p, &t)| p * mass - t).collect();
                (loss, grad)
            }
            Self::Mse => {
                let loss = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
                let g: Vec<f64> = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
                (loss, softmax_vjp(pred, &g))
            }
            Self::Msle => {
                let diff: Vec<f64> = pred
                    .iter()
                    .zip(target)
                    .map(|(p, t)| p.ln_1p() - t.ln_1p())
                    .collect();
                let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
                let g: Vec<f64> = diff
                    .iter()
                    .zip(pred)
                    .map(|(d, p)| 2.0 * d / (n * (1.0 + p)))
                    .collect();
                (loss, softmax_vjp(pred, &g))
            }
            Self::Cosine => {
                let pt: f64 = pred.iter().zip(target).map(|(p, t)| p * t).sum();
                let pp = pred.iter().map(|p| p * p).sum::<f64>().sqrt();
                let tt = target.iter().map(|t| t * t).sum::<f64>().sqrt();
                if pp == 0.0 || tt == 0.0 {
                    return (1.0, vec![0.0; pred.len()]);
                }
                let cos = pt / (pp * tt);
                let g: Vec<f64> = pred
                    .iter()
                    .zip(target)
                    .map(|(p, t)| -(t / (pp * tt) - cos * p / (pp * pp)))
                    .collect();
                (1.0 - cos, softmax_vjp(pred, &g))
            }
        }
    }
}

/// Pulls `dL/dpred` back through the softmax.
fn softmax_vjp(pred: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = pred.iter().zip(g).map(|(p, g)| p * g).sum();
    pred.iter().zip(g).map(|(p, g)| p * (g - dot)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub vertical: f64,
    pub slash: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.vertical + self.slash
    }
}

/// Loss of both heads and the logit gradients (token order for both).
pub fn loss_and_logit_grads(
    acts: &IndexerActivations,
    target: &VSScores,
    loss: LossFn,
) -> Result<(LossParts, Vec<f64>, Vec<f64>)> {
    let n = acts.n();
    if target.n() != n || target.slash.len() != n {
        return Err(Error::shape(format!(
            "targets have length {} but the indexer produced {n}",
            target.n()
        )));
    }
    let (lv, dz_v) = loss.value_and_grad(&acts.logits_v, &acts.pred_v, &target.vertical);
    // Slash target moves into token order so it lines up with the logits.
    let pred_s_tok = acts.mapping.permute(&acts.pred_s);
    let target_s_tok = acts.mapping.permute(&target.slash);
    let (ls, dz_s) = loss.value_and_grad(&acts.logits_s, &pred_s_tok, &target_s_tok);
    Ok((
        LossParts {
            vertical: lv,
            slash: ls,
        },
        dz_v,
        dz_s,
    ))
}

/// Parameter gradients from logit gradients `dz_v`, `dz_s` (token order).
pub fn backward_from_logits(p: &IndexerParams, acts: &IndexerActivations, dz_v: &[f64], dz_s: &[f64]) -> IndexerParams {
    let d_h = p.d_h();
    let mut g = IndexerParams::zeros(p.in_dim(), d_h);
    let mut dh = Matrix::zeros(acts.n(), d_h);
    for t in 0..acts.n() {
        let z = acts.z.row(t);
        let h = acts.h.row(t);
        let (gv, gs) = (dz_v[t], dz_s[t]);
        g.b_v += gv;
        g.b_s += gs;
        for c in 0..d_h {
            g.w_v[c] += z[c] * gv;
            g.w_s[c] += z[c] * gs;
        }
        let row = dh.row_mut(t);
        for c in 0..d_h {
            row[c] = (gv * p.w_v[c] + gs * p.w_s[c]) * silu_grad(h[c]);
        }
    }
    for t in 0..acts.n() {
        let x = acts.x.row(t);
        let row = dh.row(t);
        for (c, &d) in row.iter().enumerate() {
            g.b_u[c] += d;
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let out = &mut g.w_u.data_mut()[i * d_h..(i + 1) * d_h];
            for (o, &d) in out.iter_mut().zip(row) {
                *o += xi * d;
            }
        }
    }
    g
}

/// Gradients of the summed vertical and slash KL with the default smoothing.
pub fn indexer_backward(p: &IndexerParams, acts: &IndexerActivations, target: &VSScores) -> Result<IndexerParams> {
    let (_, dz_v, dz_s) = loss_and_logit_grads(acts, target, LossFn::default())?;
    Ok(backward_from_logits(p, acts, &dz_v, &dz_s))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub accumulation: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub d_h: usize,
    pub loss: LossFn,
    pub mapping: SlashMapping,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr_peak: 1e-3,
            warmup_steps: 100,
            accumulation: 1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            d_h: 64,
            loss: LossFn::default(),
            mapping: SlashMapping::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return Err(Error::config(format!("lr_peak must be > 0, got {}", self.lr_peak)));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::config(format!(
                "warmup ({}) exceeds steps ({})",
                self.warmup_steps, self.steps
            )));
        }
        if self.accumulation == 0 {
            return Err(Error::config("accumulation must be >= 1"));
        }
        if self.d_h == 0 {
            return Err(Error::config("d_h must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if let LossFn::Kl { eps } = self.loss {
            if !(eps > 0.0) {
                return Err(Error::config(format!("eps must be positive, got {eps}")));
            }
        }
        Ok(())
    }

    /// Linear warmup to `lr_peak`, then cosine decay to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr_peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.lr_peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One decoupled-weight-decay Adam update on flat parameters.
pub fn adamw_update(params: &mut [f64], grads: &[f64], state: &mut AdamState, step: usize, lr: f64, cfg: &TrainConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    let t = (step + 1) as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        params[i] -= lr * cfg.weight_decay * params[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
}

pub fn optimizer_step(p: &mut IndexerParams, grads: &IndexerParams, state: &mut AdamState, step: usize, cfg: &TrainConfig) {
    let mut flat = p.flat();
    adamw_update(&mut flat, &grads.flat(), state, step, cfg.lr_at(step), cfg);
    p.set_flat(&flat);
}

/// One training example: per-token features and normalized targets.
#[derive(Clone, Debug)]
pub struct IndexerSample {
    pub x: Matrix,
    pub target: VSScores,
}

impl IndexerSample {
    pub fn new(x: Matrix, target: VSScores) -> Result<Self> {
        if target.n() != x.rows() || target.slash.len() != x.rows() {
            return Err(Error::shape(format!(
                "{} tokens but targets of length {}",
                x.rows(),
                target.n()
            )));
        }
        if !target.normalized {
            return Err(Error::Distribution("training targets must be normalized".into()));
        }
        Ok(Self { x, target })
    }

    pub fn from_kv(k: &Matrix, v: &Matrix, target: VSScores) -> Result<Self> {
        if k.shape() != v.shape() {
            return Err(Error::shape("keys and values differ in shape"));
        }
        Self::new(k.hconcat(v)?, target)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: IndexerParams,
    /// Mean loss over each step's micro-batches, before that step's update.
    pub losses: Vec<f64>,
}

pub fn train(dataset: &[IndexerSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let init = {
        let first = dataset.first().ok_or(Error::EmptyDataset)?;
        IndexerParams::init(first.x.cols(), cfg.d_h, &mut Rng::new(cfg.seed).derive(1))
    };
    train_from(dataset, cfg, init)
}

/// Training from explicit initial parameters.
pub fn train_from(dataset: &[IndexerSample], cfg: &TrainConfig, init: IndexerParams) -> Result<TrainOutcome> {
    cfg.validate()?;
    let width = dataset.first().ok_or(Error::EmptyDataset)?.x.cols();
    if let Some(s) = dataset.iter().find(|s| s.x.cols() != width) {
        return Err(Error::shape(format!(
            "samples disagree on feature width ({width} vs {})",
            s.x.cols()
        )));
    }
    init.check_dims(width, cfg.d_h)?;
    let mut params = init;
    let mut state = AdamState::new(params.num_params());
    let mut order_rng = Rng::new(cfg.seed).derive(2);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut acc = vec![0.0; params.num_params()];
        let mut step_loss = 0.0;
        for _ in 0..cfg.accumulation {
            if cursor == order.len() {
                order = (0..dataset.len()).collect();
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            let sample = &dataset[order[cursor]];
            cursor += 1;
            let acts = forward_features(&params, sample.x.clone(), cfg.mapping)?;
            let (parts, dz_v, dz_s) = loss_and_logit_grads(&acts, &sample.target, cfg.loss)?;
            step_loss += parts.total();
            let g = backward_from_logits(&params, &acts, &dz_v, &dz_s);
            for (a, b) in acc.iter_mut().zip(g.flat()) {
                *a += b;
            }
        }
        let scale = 1.0 / cfg.accumulation as f64;
        acc.iter_mut().for_each(|a| *a *= scale);
        losses.push(step_loss * scale);
        let mut flat = params.flat();
        adamw_update(&mut flat, &acc, &mut state, step, cfg.lr_at(step), cfg);
        params.set_flat(&flat);
        if !flat.iter().all(|x| x.is_finite()) {
            return Err(Error::config(format!("training diverged at step {step}")));
        }
    }
    Ok(TrainOutcome { params, losses })
}

/// Mean loss over a dataset.
pub fn evaluate(p: &IndexerParams, dataset: &[IndexerSample], loss: LossFn, mapping: SlashMapping) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for s in dataset {
        let acts = forward_features(p, s.x.clone(), mapping)?;
        total += loss_and_logit_grads(&acts, &s.target, loss)?.0.total();
    }
    Ok(total / dataset.len() as f64)
}

/// Predicted vertical and slash distributions for one feature matrix.
pub fn predict(p: &IndexerParams, x: &Matrix, mapping: SlashMapping) -> Result<VSScores> {
    Ok(forward_features(p, x.clone(), mapping)?.scores())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"VSCK";
const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_bytes(p: &IndexerParams) -> Result<Vec<u8>> {
    p.validate()?;
    if !p.in_dim().is_multiple_of(2) {
        return Err(Error::shape(format!(
            "checkpoints need an even input width, got {}",
            p.in_dim()
        )));
    }
    let flat = p.flat();
    let mut out = Vec::with_capacity(16 + 8 * flat.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&((p.in_dim() / 2) as u32).to_le_bytes());
    out.extend_from_slice(&(p.d_h() as u32).to_le_bytes());
    for x in flat {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<IndexerParams> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a VSCK checkpoint".into()));
    }
    if bytes.len() < 16 {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let (d, d_h) = (word(8) as usize, word(12) as usize);
    let mut p = IndexerParams::zeros(2 * d, d_h);
    let expected = 16 + 8 * p.num_params();
    if bytes.len() < expected {
        return Err(Error::Format(format!(
            "truncated checkpoint: {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - expected
        )));
    }
    let flat: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    p.set_flat(&flat);
    Ok(p)
}

pub fn save_checkpoint(p: &IndexerParams, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(p)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<IndexerParams> {
    checkpoint_from_bytes(&fs::read(path)?)
}
