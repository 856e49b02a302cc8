//! Run-aggregated loss and its streamed gradient.
//!
//! For a run with frames `x_1..x_n`, speeds `v_j`, capture interval `t` and
//! total `y`, the loss is
//!
//! ```text
//! L = (1/n) (y - sum_j f(x_j) v_j t)^2 + (lambda/n) sum_{j>=2} (p_j - p_{j-1})^2
//! ```
//!
//! where `p_j` is either the raw output `f(x_j)` or the scaled `f(x_j) v_j t`.
//! Its gradient splits into two parameter-sized sums that can be built
//! batch by batch:
//!
//! ```text
//! dL/dw = -(2/n) (y - P) sum_j v_j t df_j/dw + (2 lambda/n) sum_{j>=2} (p_j - p_{j-1}) (dp_j/dw - dp_{j-1}/dw)
//! ```
//!
//! Only the prediction and gradient of the last frame of a batch cross the
//! batch boundary.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Frame, Run, Split};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, GradVector, ModelParams, Network, OutputKind, Precision, Real};
use crate::report::{dataset_accuracy, mean_std, smoothness_metric, RunPrediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyTarget {
    #[default]
    RawOutput,
    ScaledOutput,
}

impl std::str::FromStr for PenaltyTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "raw_output" | "raw" => Ok(PenaltyTarget::RawOutput),
            "scaled_output" | "scaled" => Ok(PenaltyTarget::ScaledOutput),
            _ => Err(Error::config(format!("unknown penalty target {s:?}"))),
        }
    }
}

impl PenaltyTarget {
    /// Factor turning `f(x_j)` into `p_j`.
    fn scale(self, overlap: f64) -> f64 {
        match self {
            PenaltyTarget::RawOutput => 1.0,
            PenaltyTarget::ScaledOutput => overlap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum OptimizerKind {
    #[default]
    #[serde(rename = "sgd")]
    Sgd,
    #[serde(rename = "sgd-momentum")]
    SgdMomentum,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "sgd-momentum" | "momentum" => Ok(OptimizerKind::SgdMomentum),
            _ => Err(Error::config(format!("unknown optimizer {s:?}"))),
        }
    }
}

/// Per-epoch learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate towards zero over the epochs.
    Cosine,
}

impl LrSchedule {
    /// Multiplier for 1-based `epoch` out of `epochs`.
    pub fn factor(self, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * (epoch - 1) as f64 / epochs as f64).cos()),
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::config(format!("unknown lr schedule {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// Rescale run gradients whose L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub penalty_target: PenaltyTarget,
    pub precision: Precision,
    /// Set the output bias so that the initial network predicts the mean
    /// training density `sum y / sum v t`. Uses run totals only.
    pub init_output_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Constant,
            batch_size: 8,
            epochs: 10,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            clip_norm: None,
            seed: 0,
            penalty_target: PenaltyTarget::RawOutput,
            precision: Precision::F32,
            init_output_bias: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm must be > 0");
            }
        }
        Ok(())
    }
}

fn overlap(frame: &Frame) -> f64 {
    frame.speed * frame.capture_interval
}

/// Running sums for one run.
#[derive(Debug, Clone)]
pub struct AccumulatorState {
    /// `sum_j f(x_j) v_j t`
    pub pred_sum: f64,
    /// `sum_j v_j t df_j/dw`
    pub outgrad_sum: GradVector,
    /// `sum_{j>=2} (p_j - p_{j-1}) (dp_j/dw - dp_{j-1}/dw)` over the pairs
    /// seen so far, except the last frame's share of its outgoing pair,
    /// which is added once the next frame is known.
    pub smooth_grad_sum: GradVector,
    /// `sum_{j>=2} (p_j - p_{j-1})^2`
    pub penalty_sum: f64,
    pub frames_seen: usize,
    n_params: usize,
    carry_value: Option<f64>,
    /// Last frame seen and its penalty scale. Its gradient is recomputed
    /// at the start of the next batch rather than stored.
    carry_frame: Option<(Frame, f64)>,
    capture_interval: Option<f64>,
}

impl AccumulatorState {
    pub fn new(n_params: usize) -> Self {
        Self {
            pred_sum: 0.0,
            outgrad_sum: GradVector::zeros(n_params),
            smooth_grad_sum: GradVector::zeros(n_params),
            penalty_sum: 0.0,
            frames_seen: 0,
            n_params,
            carry_value: None,
            carry_frame: None,
            capture_interval: None,
        }
    }

    pub fn reset(&mut self) {
        self.pred_sum = 0.0;
        self.outgrad_sum.fill_zero();
        self.smooth_grad_sum.fill_zero();
        self.penalty_sum = 0.0;
        self.frames_seen = 0;
        self.carry_value = None;
        self.carry_frame = None;
        self.capture_interval = None;
    }

    /// Penalty-target value of the last accumulated frame.
    pub fn carry_prev(&self) -> Option<f64> {
        self.carry_value
    }

    /// Heap bytes owned by the state: the two gradient sums plus the
    /// carried frame's pixels.
    pub fn heap_bytes(&self) -> usize {
        let frame = self
            .carry_frame
            .as_ref()
            .map_or(0, |(f, _)| std::mem::size_of_val(f.image.pixels()));
        self.outgrad_sum.bytes() + self.smooth_grad_sum.bytes() + frame
    }

    /// Loss of the accumulated run, valid once every frame has been seen.
    pub fn loss(&self, y: f64, lambda: f64) -> f64 {
        let n = self.frames_seen as f64;
        let r = y - self.pred_sum;
        r * r / n + lambda / n * self.penalty_sum
    }

    /// Adds one chronological batch of frames. `first_index` is the
    /// position of `frames[0]` within its run.
    pub fn accumulate_batch<T: Real>(
        &mut self,
        net: &Network,
        params: &ModelParams<T>,
        frames: &[Frame],
        first_index: usize,
        target: PenaltyTarget,
    ) -> Result<()> {
        let mut scratch = vec![T::zero(); net.param_count()];
        self.accumulate_with(net, params, frames, first_index, target, &mut scratch)
    }

    /// As [`accumulate_batch`](Self::accumulate_batch) with a caller-owned
    /// per-frame gradient buffer.
    pub fn accumulate_with<T: Real>(
        &mut self,
        net: &Network,
        params: &ModelParams<T>,
        frames: &[Frame],
        first_index: usize,
        target: PenaltyTarget,
        scratch: &mut [T],
    ) -> Result<()> {
        if first_index != self.frames_seen {
            return Err(Error::Protocol(format!(
                "batch starts at frame {first_index} but {} frames were accumulated",
                self.frames_seen
            )));
        }
        if self.n_params != net.param_count() || scratch.len() != net.param_count() {
            return Err(Error::Dimension("accumulator does not match the network".into()));
        }
        if self.outgrad_sum.is_empty() {
            self.outgrad_sum = GradVector::zeros(self.n_params);
        }
        let Some(first) = frames.first() else {
            return Ok(());
        };
        let ci = *self.capture_interval.get_or_insert(first.capture_interval);
        if frames.iter().any(|f| f.capture_interval != ci) {
            return Err(Error::Protocol("capture interval changes within a run".into()));
        }

        let caches = frames
            .iter()
            .map(|f| net.forward_cached(params, &f.image))
            .collect::<Result<Vec<_>>>()?;
        let s: Vec<f64> = frames.iter().map(overlap).collect();
        let scale: Vec<f64> = s.iter().map(|&s| target.scale(s)).collect();
        let f: Vec<f64> = caches.iter().map(|c| c.output.f64()).collect();
        let p: Vec<f64> = f.iter().zip(&scale).map(|(a, b)| a * b).collect();

        // delta[j] = p_j - p_{j-1}, zero for the first frame of the run.
        let mut delta = Vec::with_capacity(p.len());
        let mut prev = self.carry_value;
        for &pj in &p {
            delta.push(prev.map_or(0.0, |q| pj - q));
            prev = Some(pj);
        }

        if let Some((prev_frame, prev_scale)) = self.carry_frame.take() {
            if delta[0] != 0.0 {
                let cache = net.forward_cached(params, &prev_frame.image)?;
                scratch.iter_mut().for_each(|v| *v = T::zero());
                net.backward(params, &cache, T::one(), scratch, None)?;
                self.smooth_grad_sum.axpy(-delta[0] * prev_scale, scratch);
            }
        }

        let last = frames.len() - 1;
        for (j, cache) in caches.into_iter().enumerate() {
            self.pred_sum += f[j] * s[j];
            self.penalty_sum += delta[j] * delta[j];
            scratch.iter_mut().for_each(|v| *v = T::zero());
            net.backward(params, &cache, T::one(), scratch, None)?;
            drop(cache);
            net.check_grad(scratch)?;
            self.outgrad_sum.axpy(s[j], scratch);
            let d = if j < last {
                scale[j] * (delta[j] - delta[j + 1])
            } else {
                scale[j] * delta[j]
            };
            self.smooth_grad_sum.axpy(d, scratch);
        }
        self.carry_frame = Some((frames[last].clone(), scale[last]));
        self.carry_value = Some(p[last]);
        self.frames_seen += frames.len();
        Ok(())
    }

    /// Assembles the run gradient and resets the state.
    pub fn finalize_run_gradient(&mut self, y_true: f64, n: usize, lambda: f64) -> Result<GradVector> {
        if self.frames_seen != n || n == 0 {
            return Err(Error::Protocol(format!(
                "finalizing a run of {n} frames after {} frames",
                self.frames_seen
            )));
        }
        let nf = n as f64;
        let a = -2.0 / nf * (y_true - self.pred_sum);
        let b = 2.0 * lambda / nf;
        let mut g = std::mem::replace(&mut self.outgrad_sum, GradVector::zeros(0));
        for (o, s) in g.0.iter_mut().zip(&self.smooth_grad_sum.0) {
            *o = a * *o + b * s;
        }
        // The output sum is reallocated by the next batch, so the returned
        // gradient never coexists with two live sums.
        self.reset();
        Ok(g)
    }
}

/// Streams a whole run through a fresh accumulator and returns its gradient
/// and loss.
pub fn run_gradient<T: Real>(
    net: &Network,
    params: &ModelParams<T>,
    run: &Run,
    batch_size: usize,
    lambda: f64,
    target: PenaltyTarget,
) -> Result<(GradVector, f64)> {
    let mut state = AccumulatorState::new(net.param_count());
    let mut scratch = vec![T::zero(); net.param_count()];
    for (i, chunk) in run.frames.chunks(batch_size.max(1)).enumerate() {
        state.accumulate_with(net, params, chunk, i * batch_size, target, &mut scratch)?;
    }
    let loss = state.loss(run.total_mass, lambda);
    Ok((state.finalize_run_gradient(run.total_mass, run.len(), lambda)?, loss))
}

/// Per-frame raw outputs of a run.
pub fn frame_outputs<T: Real>(net: &Network, params: &ModelParams<T>, run: &Run) -> Result<Vec<f64>> {
    run.frames
        .iter()
        .map(|f| net.forward(params, &f.image).map(|v| v.f64()))
        .collect()
}

/// Loss of one run, evaluated directly from per-frame outputs.
pub fn run_loss<T: Real>(net: &Network, params: &ModelParams<T>, run: &Run, lambda: f64, target: PenaltyTarget) -> Result<f64> {
    let f = frame_outputs(net, params, run)?;
    let s: Vec<f64> = run.frames.iter().map(overlap).collect();
    Ok(loss_from_outputs(&f, &s, run.total_mass, lambda, target))
}

pub fn loss_from_outputs(f: &[f64], s: &[f64], y: f64, lambda: f64, target: PenaltyTarget) -> f64 {
    let n = f.len() as f64;
    let pred: f64 = f.iter().zip(s).map(|(a, b)| a * b).sum();
    let p: Vec<f64> = f.iter().zip(s).map(|(a, b)| a * target.scale(*b)).collect();
    let pen: f64 = p.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0])).sum();
    (y - pred) * (y - pred) / n + lambda / n * pen
}

/// Gradient of [`run_loss`] computed in one unstreamed pass: the loss is
/// differentiated with respect to every frame output, then each frame's
/// output gradient is weighted by that derivative.
pub fn reference_full_gradient<T: Real>(
    net: &Network,
    params: &ModelParams<T>,
    run: &Run,
    lambda: f64,
    target: PenaltyTarget,
) -> Result<GradVector> {
    let n = run.len();
    if n == 0 {
        return Err(Error::Domain("run has no frames".into()));
    }
    let nf = n as f64;
    let f = frame_outputs(net, params, run)?;
    let s: Vec<f64> = run.frames.iter().map(overlap).collect();
    let pred: f64 = f.iter().zip(&s).map(|(a, b)| a * b).sum();
    let mut dl_dp = vec![0.0; n];
    for k in 1..n {
        let sk = target.scale(s[k]);
        let sp = target.scale(s[k - 1]);
        let diff = f[k] * sk - f[k - 1] * sp;
        dl_dp[k] += 2.0 * lambda / nf * diff;
        dl_dp[k - 1] -= 2.0 * lambda / nf * diff;
    }
    let coeffs: Vec<f64> = (0..n)
        .map(|j| -2.0 / nf * (run.total_mass - pred) * s[j] + dl_dp[j] * target.scale(s[j]))
        .collect();
    let images: Vec<_> = run.frames.iter().map(|f| &f.image).collect();
    net.output_grad_sum(params, &images, &coeffs)
}

/// Plain descent step `w - alpha * grad`.
pub fn apply_update<T: Real>(params: &ModelParams<T>, grad: &GradVector, cfg: &TrainConfig) -> Result<ModelParams<T>> {
    let mut out = params.clone();
    Optimizer::new(&TrainConfig { optimizer: OptimizerKind::Sgd, ..cfg.clone() }, params.len()).step(&mut out, grad)?;
    Ok(out)
}

/// SGD with optional heavy-ball momentum and gradient clipping.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    clip_norm: Option<f64>,
    velocity: Vec<f64>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, n_params: usize) -> Self {
        Self {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            momentum: cfg.momentum,
            clip_norm: cfg.clip_norm,
            velocity: match cfg.optimizer {
                OptimizerKind::Sgd => Vec::new(),
                OptimizerKind::SgdMomentum => vec![0.0; n_params],
            },
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step<T: Real>(&mut self, params: &mut ModelParams<T>, grad: &GradVector) -> Result<()> {
        if grad.len() != params.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} for {} parameters",
                grad.len(),
                params.len()
            )));
        }
        if !grad.is_finite() {
            return Err(Error::Numeric { layer: "gradient".into() });
        }
        let mut factor = 1.0;
        if let Some(c) = self.clip_norm {
            let norm = grad.norm();
            if norm > c {
                factor = c / norm;
            }
        }
        let w = params.values_mut();
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in w.iter_mut().zip(&grad.0) {
                    *p = T::of(p.f64() - self.lr * factor * g);
                }
            }
            OptimizerKind::SgdMomentum => {
                for ((p, g), v) in w.iter_mut().zip(&grad.0).zip(self.velocity.iter_mut()) {
                    *v = self.momentum * *v + factor * g;
                    *p = T::of(p.f64() - self.lr * *v);
                }
            }
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { layer: "parameters".into() });
        }
        Ok(())
    }
}

/// Predictions for one run.
pub fn predict_run<T: Real>(net: &Network, params: &ModelParams<T>, run: &Run) -> Result<RunPrediction> {
    let raw = frame_outputs(net, params, run)?;
    let scaled = raw.iter().zip(&run.frames).map(|(r, f)| r * overlap(f)).collect();
    Ok(RunPrediction::new(run.id.clone(), raw, scaled, run.total_mass))
}

/// Predictions for many runs, in input order. Runs are evaluated in
/// parallel; each run's result does not depend on scheduling.
pub fn predict_runs<T: Real>(net: &Network, params: &ModelParams<T>, runs: &[&Run]) -> Result<Vec<RunPrediction>> {
    use rayon::prelude::*;
    runs.par_iter().map(|r| predict_run(net, params, r)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean run loss over the epoch, each evaluated before its update.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub val_accuracy_std: Option<f64>,
    pub val_empty_mae: Option<f64>,
    /// Mean smoothness of the scaled per-frame validation signal.
    pub val_smoothness: Option<f64>,
    pub skipped_runs: usize,
}

/// Validation metrics for a set of runs.
fn evaluate<T: Real>(net: &Network, params: &ModelParams<T>, runs: &[&Run], cfg: &TrainConfig) -> Result<(f64, Option<(f64, f64, Option<f64>)>, Option<f64>)> {
    let preds = predict_runs(net, params, runs)?;
    let mut loss = 0.0;
    for (p, r) in preds.iter().zip(runs) {
        let s: Vec<f64> = r.frames.iter().map(overlap).collect();
        loss += loss_from_outputs(&p.frame_raw, &s, r.total_mass, cfg.lambda, cfg.penalty_target);
    }
    let acc = dataset_accuracy(&preds).ok().map(|a| (a.mean, a.std, a.empty_mae));
    let smooth: Vec<f64> = preds
        .iter()
        .filter(|p| p.frame_scaled.len() >= 2)
        .filter_map(|p| smoothness_metric(&p.frame_scaled).ok())
        .collect();
    Ok((
        loss / runs.len() as f64,
        acc,
        (!smooth.is_empty()).then(|| mean_std(&smooth).0),
    ))
}

/// Output bias giving the initial network the mean training density.
fn init_bias<T: Real>(params: &mut ModelParams<T>, runs: &[&Run]) {
    let y: f64 = runs.iter().map(|r| r.total_mass).sum();
    let s: f64 = runs.iter().flat_map(|r| r.frames.iter().map(overlap)).sum();
    if s <= 0.0 || !y.is_finite() {
        return;
    }
    let mut density = y / s;
    if params.arch().head.output == OutputKind::Softplus {
        // inverse softplus
        density = if density > 20.0 { density } else { density.exp_m1().max(1e-12).ln() };
    }
    if let Some(seg) = params.segment("output.bias") {
        params.values_mut()[seg.offset] = T::of(density);
    }
}

/// Parameters training starts from: the seeded initialization, with the
/// output bias set from the train split when configured.
pub fn initial_params<T: Real>(dataset: &Dataset, arch: &ArchConfig, cfg: &TrainConfig) -> Result<ModelParams<T>> {
    let mut params = ModelParams::<T>::build(arch)?;
    if cfg.init_output_bias {
        let train_runs: Vec<&Run> = dataset.runs_in(Split::Train).collect();
        init_bias(&mut params, &train_runs);
    }
    Ok(params)
}

/// Training result.
#[derive(Debug, Clone)]
pub struct Trained<T> {
    pub params: ModelParams<T>,
    pub history: Vec<EpochRecord>,
}

/// Trains on the train split, one parameter update per run.
pub fn train<T: Real>(dataset: &Dataset, arch: &ArchConfig, cfg: &TrainConfig) -> Result<Trained<T>> {
    train_with(dataset, arch, cfg, |_, _| Ok(()))
}

/// As [`train`], calling `observer` after every epoch.
pub fn train_with<T: Real>(
    dataset: &Dataset,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord, &ModelParams<T>) -> Result<()>,
) -> Result<Trained<T>> {
    cfg.validate()?;
    let net = Network::new(arch)?;
    let train_runs: Vec<&Run> = dataset.runs_in(Split::Train).collect();
    if train_runs.is_empty() {
        return Err(Error::config("train split is empty"));
    }
    let val_runs: Vec<&Run> = dataset.runs_in(Split::Val).filter(|r| !r.is_empty()).collect();
    let mut params = initial_params(dataset, arch, cfg)?;
    let mut opt = Optimizer::new(cfg, params.len());
    let mut state = AccumulatorState::new(params.len());
    let mut scratch = vec![T::zero(); params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_runs.len()).collect();

    for epoch in 1..=cfg.epochs {
        opt.set_learning_rate(cfg.learning_rate * cfg.lr_schedule.factor(epoch, cfg.epochs));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut used = 0;
        let mut skipped = 0;
        for &i in &order {
            let run = train_runs[i];
            if run.is_empty() {
                log::warn!("skipping run {} with no frames", run.id);
                skipped += 1;
                continue;
            }
            state.reset();
            for (b, chunk) in run.frames.chunks(cfg.batch_size).enumerate() {
                state.accumulate_with(&net, &params, chunk, b * cfg.batch_size, cfg.penalty_target, &mut scratch)?;
            }
            total += state.loss(run.total_mass, cfg.lambda);
            used += 1;
            let grad = state.finalize_run_gradient(run.total_mass, run.len(), cfg.lambda)?;
            opt.step(&mut params, &grad)?;
        }
        let mut rec = EpochRecord {
            epoch,
            train_loss: if used > 0 { total / used as f64 } else { f64::NAN },
            val_loss: None,
            val_accuracy: None,
            val_accuracy_std: None,
            val_empty_mae: None,
            val_smoothness: None,
            skipped_runs: skipped,
        };
        if !val_runs.is_empty() {
            let (loss, acc, smooth) = evaluate(&net, &params, &val_runs, cfg)?;
            rec.val_loss = Some(loss);
            if let Some((m, s, e)) = acc {
                rec.val_accuracy = Some(m);
                rec.val_accuracy_std = Some(s);
                rec.val_empty_mae = e;
            }
            rec.val_smoothness = smooth;
        }
        log::info!(
            "epoch {epoch}: train loss {:.5} val acc {:?}",
            rec.train_loss,
            rec.val_accuracy
        );
        observer(&rec, &params)?;
        history.push(rec);
    }
    Ok(Trained { params, history })
}
