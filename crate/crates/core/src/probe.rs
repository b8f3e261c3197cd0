//! Linear heads, the three softmax losses, and the mini-batch SGD trainer.
//!
//! All three losses are cross-entropy at shifted logits `Wx (+ b) + offset`:
//! zero offset for plain cross-entropy, `ln π` for logit adjustment, and
//! `τ·ln β̂` for group logit adjustment. Offsets are constants and carry no
//! gradient.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSpace {
    Class,
    Group,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearScorer<T> {
    weights: Matrix<T>,
    bias: Option<Vec<T>>,
    target_space: TargetSpace,
}

impl<T: Scalar> LinearScorer<T> {
    pub fn new(weights: Matrix<T>, bias: Option<Vec<T>>, target_space: TargetSpace) -> Result<Self> {
        if weights.rows() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a scorer needs at least 2 outputs, got {}",
                weights.rows()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != weights.rows() {
                return Err(Error::DimensionMismatch(format!(
                    "bias of length {} for {} outputs",
                    b.len(),
                    weights.rows()
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("bias"));
            }
        }
        if weights.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("weights"));
        }
        Ok(Self {
            weights,
            bias,
            target_space,
        })
    }

    /// Zero-shot class head: one row per proxy, scaled to unit norm.
    pub fn from_proxies(z: &Matrix<T>, with_bias: bool) -> Result<Self> {
        Self::new(
            unit_rows(z),
            with_bias.then(|| vec![T::zero(); z.rows()]),
            TargetSpace::Class,
        )
    }

    /// Zero-shot group head: each class's unit proxy row repeated once per
    /// attribute value, in group order `class * attrs_per_class + attr`.
    pub fn group_head_from_proxies(z: &Matrix<T>, attrs_per_class: usize, with_bias: bool) -> Result<Self> {
        let unit = unit_rows(z);
        let rows = z.rows() * attrs_per_class;
        let w = Matrix::from_fn(rows, z.cols(), |g, j| unit.get(g / attrs_per_class, j));
        Self::new(w, with_bias.then(|| vec![T::zero(); rows]), TargetSpace::Group)
    }

    pub fn weights(&self) -> &Matrix<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix<T> {
        &mut self.weights
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [T]> {
        self.bias.as_deref_mut()
    }

    pub fn target_space(&self) -> TargetSpace {
        self.target_space
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn logits(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.dim());
        let mut out: Vec<T> = (0..self.outputs()).map(|c| dot(self.weights.row(c), x)).collect();
        if let Some(b) = &self.bias {
            out.iter_mut().zip(b).for_each(|(o, &b)| *o += b);
        }
        out
    }

    pub fn predict(&self, x: &[T]) -> usize {
        argmax(&self.logits(x))
    }

    /// Sums group rows into class rows: `w_y = Σ_{g ∈ G(y)} W_g` with groups
    /// ordered `class * attrs_per_class + attr`. Biases are summed the same way.
    pub fn aggregate_groups(&self, attrs_per_class: usize) -> Result<Self> {
        if attrs_per_class == 0 || !self.outputs().is_multiple_of(attrs_per_class) {
            return Err(Error::InvalidArgument(format!(
                "{} group rows do not split into classes of {attrs_per_class}",
                self.outputs()
            )));
        }
        let classes = self.outputs() / attrs_per_class;
        let d = self.dim();
        let mut w = Matrix::zeros(classes, d);
        for y in 0..classes {
            let row = w.row_mut(y);
            for a in 0..attrs_per_class {
                for (o, &v) in row.iter_mut().zip(self.weights.row(y * attrs_per_class + a)) {
                    *o += v;
                }
            }
        }
        let bias = self.bias.as_ref().map(|b| {
            (0..classes)
                .map(|y| (0..attrs_per_class).map(|a| b[y * attrs_per_class + a]).sum())
                .collect()
        });
        Self::new(w, bias, TargetSpace::Class)
    }

    /// Scorer computing `W(Px)`, stored as the single matrix `WP`.
    pub fn compose_right(&self, p: &Matrix<T>) -> Result<Self> {
        Self::new(self.weights.matmul(p)?, self.bias.clone(), self.target_space)
    }

    pub fn cast<U: Scalar>(&self) -> LinearScorer<U> {
        LinearScorer {
            weights: self.weights.cast(),
            bias: self
                .bias
                .as_ref()
                .map(|b| b.iter().map(|&v| U::lit(v.to_f64_lossy())).collect()),
            target_space: self.target_space,
        }
    }
}

fn unit_rows<T: Scalar>(z: &Matrix<T>) -> Matrix<T> {
    let mut out = z.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = norm2(row);
        if n > T::zero() {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Prior over classes or pseudo-groups, with the offset scale `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPrior {
    prior: Vec<f64>,
    tau: f64,
}

impl GroupPrior {
    pub fn new(prior: Vec<f64>, tau: f64) -> Result<Self> {
        if prior.is_empty() || prior.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "prior entries must be strictly positive: {prior:?}"
            )));
        }
        let s: f64 = prior.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("prior sums to {s}, not 1")));
        }
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(Error::InvalidArgument(format!("tau must be ≥ 0, got {tau}")));
        }
        Ok(Self { prior, tau })
    }

    /// Frequencies with `smoothing` pseudo-counts added to every entry.
    pub fn from_counts(counts: &[usize], smoothing: f64, tau: f64) -> Result<Self> {
        let total: f64 = counts.iter().map(|&c| c as f64 + smoothing).sum();
        if !(total > 0.0) {
            return Err(Error::InvalidArgument("prior from empty counts".into()));
        }
        let prior: Vec<f64> = counts.iter().map(|&c| (c as f64 + smoothing) / total).collect();
        // renormalize so the sum is as close to 1 as the arithmetic allows
        let s: f64 = prior.iter().sum();
        Self::new(prior.iter().map(|p| p / s).collect(), tau)
    }

    pub fn uniform(n: usize, tau: f64) -> Result<Self> {
        Self::new(vec![1.0 / n as f64; n], tau)
    }

    pub fn probs(&self) -> &[f64] {
        &self.prior
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.prior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prior.is_empty()
    }

    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        Self::new(self.prior.clone(), tau)
    }

    /// `ln π` (unscaled).
    pub fn log_prior<T: Scalar>(&self) -> Vec<T> {
        self.prior.iter().map(|p| T::lit(p.ln())).collect()
    }

    /// `τ·ln π`.
    pub fn scaled_log_prior<T: Scalar>(&self) -> Vec<T> {
        self.prior.iter().map(|p| T::lit(self.tau * p.ln())).collect()
    }
}

/// Gradient of a loss with respect to a scorer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<T> {
    pub weights: Matrix<T>,
    pub bias: Option<Vec<T>>,
}

/// Softmax cross-entropy at `logits + offset`. Returns the loss and
/// `softmax − onehot(target)`.
pub fn shifted_cross_entropy<T: Scalar>(logits: &[T], offset: Option<&[T]>, target: usize) -> (T, Vec<T>) {
    let mut z: Vec<T> = logits.to_vec();
    if let Some(off) = offset {
        z.iter_mut().zip(off).for_each(|(v, &o)| *v += o);
    }
    let top = argmax(&z);
    let m = z[top];
    let shifted_target = z[target] - m;
    let mut rest = T::zero();
    for (i, v) in z.iter_mut().enumerate() {
        *v = (*v - m).exp();
        if i != top {
            rest += *v;
        }
    }
    let sum = T::one() + rest;
    let loss = rest.ln_1p() - shifted_target;
    let mut dz: Vec<T> = z.iter().map(|&e| e / sum).collect();
    dz[target] -= T::one();
    (loss, dz)
}

fn loss_with_offset<T: Scalar>(
    scorer: &LinearScorer<T>,
    x: &[T],
    target: usize,
    offset: Option<&[T]>,
) -> Result<(T, Gradient<T>)> {
    if target >= scorer.outputs() {
        return Err(Error::InvalidArgument(format!(
            "target {target} out of range for {} outputs",
            scorer.outputs()
        )));
    }
    if x.len() != scorer.dim() {
        return Err(Error::DimensionMismatch(format!(
            "input of length {} for a {}-dimensional scorer",
            x.len(),
            scorer.dim()
        )));
    }
    if let Some(off) = offset {
        if off.len() != scorer.outputs() {
            return Err(Error::DimensionMismatch(format!(
                "prior over {} targets for a scorer with {} outputs",
                off.len(),
                scorer.outputs()
            )));
        }
    }
    let (loss, dz) = shifted_cross_entropy(&scorer.logits(x), offset, target);
    let weights = Matrix::from_fn(scorer.outputs(), scorer.dim(), |c, j| dz[c] * x[j]);
    let bias = scorer.bias().map(|_| dz);
    Ok((loss, Gradient { weights, bias }))
}

/// Plain softmax cross-entropy.
pub fn ce_loss<T: Scalar>(scorer: &LinearScorer<T>, x: &[T], target: usize) -> Result<(T, Gradient<T>)> {
    loss_with_offset(scorer, x, target, None)
}

/// Logit-adjusted cross-entropy: logits shifted by `ln π` (the prior's `tau`
/// is not applied).
pub fn la_loss<T: Scalar>(scorer: &LinearScorer<T>, x: &[T], y: usize, prior: &GroupPrior) -> Result<(T, Gradient<T>)> {
    loss_with_offset(scorer, x, y, Some(&prior.log_prior()))
}

/// Group logit-adjusted cross-entropy: logits shifted by `τ·ln β̂`.
pub fn gla_loss<T: Scalar>(
    scorer: &LinearScorer<T>,
    x: &[T],
    g: usize,
    prior: &GroupPrior,
) -> Result<(T, Gradient<T>)> {
    loss_with_offset(scorer, x, g, Some(&prior.scaled_log_prior()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    La,
    Gla,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub warmup_lr: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Train per-output bias terms alongside the weights.
    #[serde(default)]
    pub bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 2e-4,
            weight_decay: 5e-5,
            momentum: 0.9,
            warmup_lr: 1e-5,
            warmup_epochs: 1,
            seed: 0,
            shuffle: true,
            bias: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.learning_rate, self.weight_decay, self.momentum, self.warmup_lr];
        if rates.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "rates must be finite and ≥ 0: {rates:?}"
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch`: the warmup rate first, then cosine
    /// annealing `lr·½(1 + cos(π·epoch/epochs))`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            self.warmup_lr
        } else {
            let t = epoch as f64 / self.epochs as f64;
            self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }

    /// Short stable digest of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Features and targets a trainer may see. Ground-truth attributes are not
/// part of it.
#[derive(Debug, Clone, Copy)]
pub struct TrainView<'a, T> {
    pub features: &'a Matrix<T>,
    pub targets: &'a [usize],
    /// Per-sample loss weights; `None` means all ones.
    pub sample_weights: Option<&'a [T]>,
}

impl<'a, T: Scalar> TrainView<'a, T> {
    pub fn new(features: &'a Matrix<T>, targets: &'a [usize]) -> Self {
        Self {
            features,
            targets,
            sample_weights: None,
        }
    }

    pub fn weighted(mut self, weights: &'a [T]) -> Self {
        self.sample_weights = Some(weights);
        self
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub scorer: LinearScorer<T>,
    /// Scorer after each epoch; index 0 is the end of the first epoch.
    pub snapshots: Vec<LinearScorer<T>>,
    /// Mean weighted training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch SGD with momentum and decoupled-from-offset weight decay.
///
/// Per step: `v ← μv + (∇ + λW)`, `W ← W − lr·v`, with `∇` the mean over the
/// batch of per-sample weighted gradients. Bias terms get momentum but no
/// decay. The final short batch is kept. Shuffling uses only `cfg.seed`.
pub fn train<T: Scalar>(
    view: TrainView<'_, T>,
    loss_kind: LossKind,
    prior: Option<&GroupPrior>,
    cfg: &TrainConfig,
    init: LinearScorer<T>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let (n, d) = view.features.shape();
    let c = init.outputs();
    if view.targets.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} targets for {n} samples",
            view.targets.len()
        )));
    }
    if n == 0 {
        return Err(Error::EmptySplit("train"));
    }
    if d != init.dim() {
        return Err(Error::DimensionMismatch(format!(
            "features have {d} columns, scorer expects {}",
            init.dim()
        )));
    }
    if let Some(bad) = view.targets.iter().find(|&&t| t >= c) {
        return Err(Error::InvalidArgument(format!(
            "target {bad} out of range for {c} outputs"
        )));
    }
    if let Some(w) = view.sample_weights {
        if w.len() != n {
            return Err(Error::DimensionMismatch("sample weights length".into()));
        }
    }
    let offset: Option<Vec<T>> = match (loss_kind, prior) {
        (LossKind::Ce, _) => None,
        (LossKind::La, Some(p)) => Some(p.log_prior()),
        (LossKind::Gla, Some(p)) => Some(p.scaled_log_prior()),
        (_, None) => {
            return Err(Error::InvalidArgument(format!("{loss_kind:?} loss needs a prior")));
        }
    };
    if let Some(off) = &offset {
        if off.len() != c {
            return Err(Error::DimensionMismatch(format!(
                "prior over {} targets for {c} outputs",
                off.len()
            )));
        }
    }

    let mut scorer = init;
    let mut vel_w = vec![T::zero(); c * d];
    let mut vel_b = vec![T::zero(); c];
    let mut grad_w = vec![T::zero(); c * d];
    let mut grad_b = vec![T::zero(); c];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let wd = T::lit(cfg.weight_decay);
    let mu = T::lit(cfg.momentum);

    let mut snapshots = Vec::with_capacity(cfg.epochs);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let lr = T::lit(cfg.lr_at(epoch));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad_w.iter_mut().for_each(|g| *g = T::zero());
            grad_b.iter_mut().for_each(|g| *g = T::zero());
            for &i in batch {
                let x = view.features.row(i);
                let logits = scorer.logits(x);
                let (loss, dz) = shifted_cross_entropy(&logits, offset.as_deref(), view.targets[i]);
                let w = view.sample_weights.map_or(T::one(), |sw| sw[i]);
                epoch_loss += (w * loss).to_f64_lossy();
                for (k, &dk) in dz.iter().enumerate() {
                    let s = w * dk;
                    let row = &mut grad_w[k * d..(k + 1) * d];
                    for (g, &xj) in row.iter_mut().zip(x) {
                        *g += s * xj;
                    }
                    grad_b[k] += s;
                }
            }
            let inv_b = T::one() / T::lit(batch.len() as f64);
            let weights = scorer.weights_mut();
            let wdata: Vec<T> = weights.as_slice().to_vec();
            for (idx, v) in vel_w.iter_mut().enumerate() {
                *v = mu * *v + (grad_w[idx] * inv_b + wd * wdata[idx]);
            }
            for i in 0..c {
                let row = weights.row_mut(i);
                for (j, wv) in row.iter_mut().enumerate() {
                    *wv -= lr * vel_w[i * d + j];
                }
            }
            if let Some(b) = scorer.bias_mut() {
                for (k, bk) in b.iter_mut().enumerate() {
                    vel_b[k] = mu * vel_b[k] + grad_b[k] * inv_b;
                    *bk -= lr * vel_b[k];
                }
            }
        }
        let mean_loss = epoch_loss / n as f64;
        if !mean_loss.is_finite() || scorer.weights().as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        epoch_losses.push(mean_loss);
        snapshots.push(scorer.clone());
    }
    Ok(TrainOutcome {
        scorer,
        snapshots,
        epoch_losses,
    })
}

/// Provenance recorded next to trained weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub loss_kind: LossKind,
    pub tau: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default)]
    pub selected_epoch: Option<usize>,
}

/// JSON model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub target_space: TargetSpace,
    #[serde(rename = "C")]
    pub outputs: usize,
    #[serde(rename = "d")]
    pub dim: usize,
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<f64>>,
    pub provenance: Provenance,
}

impl ModelFile {
    pub fn from_scorer(scorer: &LinearScorer<f64>, provenance: Provenance) -> Self {
        Self {
            target_space: scorer.target_space(),
            outputs: scorer.outputs(),
            dim: scorer.dim(),
            weights: scorer.weights().as_slice().to_vec(),
            bias: scorer.bias().map(<[f64]>::to_vec),
            provenance,
        }
    }

    pub fn scorer(&self) -> Result<LinearScorer<f64>> {
        LinearScorer::new(
            Matrix::new(self.outputs, self.dim, self.weights.clone())?,
            self.bias.clone(),
            self.target_space,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
