//! Two-phase training: deterministic pretraining of a bias-free MLP, transfer
//! of its weights into the BNN means, then quantization-aware SVI with a
//! linearly annealed KL weight.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::bnn::{Activation, BnnModel, LayerVars};
use crate::error::{Error, Result};
use crate::rng::{standard_normal, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub pretrain_epochs: usize,
    pub svi_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beta_max: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            pretrain_epochs: 300,
            svi_epochs: 200,
            lr: 1e-3,
            batch_size: 128,
            beta_max: 0.25,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr must be finite and nonnegative, got {}", self.lr));
        }
        if !(self.beta_max >= 0.0 && self.beta_max.is_finite()) {
            problems.push(format!(
                "beta_max must be finite and nonnegative, got {}",
                self.beta_max
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            problems.push("moment decay rates must lie in [0, 1)".to_string());
        }
        if !(self.eps > 0.0) {
            problems.push(format!("optimizer epsilon must be positive, got {}", self.eps));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// KL weight for SVI epoch `epoch`: `beta_max · epoch / (svi_epochs − 1)`,
    /// held at zero when there is only one epoch.
    pub fn beta(&self, epoch: usize) -> f64 {
        if self.svi_epochs <= 1 {
            return 0.0;
        }
        let last = (self.svi_epochs - 1) as f64;
        self.beta_max * (epoch as f64).min(last) / last
    }
}

/// Adam moment estimates for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        OptimizerState {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn for_model(bnn: &BnnModel) -> Self {
        Self::new(bnn.layers.iter().flat_map(|l| [&l.mu, &l.rho]))
    }

    /// One bias-corrected Adam update.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], s: &TrainSchedule) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Spec(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - s.beta1.powi(t);
        let c2 = 1.0 - s.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            p.expect_same_shape(&grads[i], "adam")?;
            let m = self.m[i].values_mut();
            let v = self.v[i].values_mut();
            for (j, (w, &gr)) in p.values_mut().iter_mut().zip(grads[i].values()).enumerate() {
                m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * gr;
                v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * gr * gr;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= s.lr * mhat / (vhat.sqrt() + s.eps);
            }
        }
        Ok(())
    }
}

/// Deterministic bias-free MLP used for pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    /// `[fan_in, fan_out]` per layer.
    pub weights: Vec<Tensor>,
    pub activation: Activation,
}

impl Mlp {
    /// Weights drawn uniformly from `±1/√fan_in`.
    pub fn init(sizes: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Spec(format!("invalid layer sizes {sizes:?}")));
        }
        let weights = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let data = (0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::from_vec(w[0], w[1], data).expect("length matches shape")
            })
            .collect();
        Ok(Mlp { weights, activation })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        forward(x, &self.weights, self.activation)
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        Ok(accuracy(&self.logits(x)?, labels))
    }

    fn logits_on_graph(&self, g: &mut Graph, x: Var, weights: &[Var]) -> Result<Var> {
        let mut h = x;
        for (i, &w) in weights.iter().enumerate() {
            h = g.matmul(h, w)?;
            if i + 1 < weights.len() {
                h = self.activation.apply_on_graph(g, h)?;
            }
        }
        Ok(h)
    }
}

fn forward(x: &Tensor, weights: &[Tensor], activation: Activation) -> Result<Tensor> {
    let mut h = x.clone();
    for (i, w) in weights.iter().enumerate() {
        h = h.matmul(w)?;
        if i + 1 < weights.len() {
            h = activation.apply(&h);
        }
    }
    Ok(h)
}

/// Fraction of rows whose first maximal logit is the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(logits.row(i)) == l)
        .count();
    hits as f64 / labels.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn check_data(x: &Tensor, labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Spec("training data is empty".into()));
    }
    if x.rows() != labels.len() {
        return Err(Error::Validation(format!(
            "{} inputs but {} labels",
            x.rows(),
            labels.len()
        )));
    }
    Ok(())
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pretrained {
    pub mlp: Mlp,
    pub train_accuracy: f64,
    /// Mean minibatch NLL per epoch.
    pub losses: Vec<f64>,
}

/// Minimizes mean NLL of a deterministic MLP with Adam.
pub fn pretrain(
    sizes: &[usize],
    activation: Activation,
    x: &Tensor,
    labels: &[usize],
    schedule: &TrainSchedule,
    rng: &mut Rng,
) -> Result<Pretrained> {
    check_data(x, labels)?;
    schedule.validate()?;
    let mut mlp = Mlp::init(sizes, activation, rng)?;
    let mut opt = OptimizerState::new(&mlp.weights);
    let mut losses = Vec::with_capacity(schedule.pretrain_epochs);
    for epoch in 0..schedule.pretrain_epochs {
        let mut total = 0.0;
        let batches = shuffled_batches(labels.len(), schedule.batch_size, rng);
        for idx in &batches {
            let bx = x.select_rows(idx);
            let by: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let input = g.constant(bx);
            let ws: Vec<Var> = mlp.weights.iter().map(|w| g.param(w.clone())).collect();
            let logits = mlp.logits_on_graph(&mut g, input, &ws)?;
            let loss = g
                .log_softmax_nll(logits, &by)
                .map_err(|e| diverged("pretraining", epoch, e))?;
            total += g.value(loss).item();
            g.backward(loss)?;
            let grads: Vec<Tensor> = ws
                .iter()
                .map(|&w| g.take_grad(w).expect("weight is on the loss path"))
                .collect();
            let mut params: Vec<&mut Tensor> = mlp.weights.iter_mut().collect();
            opt.update(&mut params, &grads, schedule)?;
        }
        let mean = total / batches.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!(
                "pretraining diverged at epoch {epoch}: loss {mean}"
            )));
        }
        losses.push(mean);
    }
    let train_accuracy = mlp.accuracy(x, labels)?;
    Ok(Pretrained {
        mlp,
        train_accuracy,
        losses,
    })
}

fn diverged(phase: &str, epoch: usize, e: Error) -> Error {
    match e {
        Error::Numeric(op) => Error::Numeric(format!("{phase} diverged at epoch {epoch}: non-finite {op}")),
        other => other,
    }
}

/// Copies pretrained weights into the BNN means and sets every `σ` to
/// `sigma_init`.
pub fn transfer_mu(mlp: &Mlp, bnn: &mut BnnModel, sigma_init: f64) -> Result<()> {
    if !(sigma_init > 0.0) {
        return Err(Error::Spec(format!("initial sigma must be positive, got {sigma_init}")));
    }
    if mlp.weights.len() != bnn.layers.len() {
        return Err(Error::Validation(format!(
            "pretrained model has {} layers, BNN has {}",
            mlp.weights.len(),
            bnn.layers.len()
        )));
    }
    for (w, layer) in mlp.weights.iter().zip(&bnn.layers) {
        w.expect_same_shape(&layer.mu, "transfer_mu")?;
    }
    let rho = sigma_init.ln();
    for (w, layer) in mlp.weights.iter().zip(bnn.layers.iter_mut()) {
        layer.mu = w.clone();
        layer.rho = Tensor::full(w.rows(), w.cols(), rho);
    }
    Ok(())
}

/// The two loss terms of one SVI step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub nll: f64,
    /// `β · KL / N_train`
    pub kl_scaled: f64,
}

impl StepLoss {
    pub fn total(&self) -> f64 {
        self.nll + self.kl_scaled
    }
}

#[allow(clippy::too_many_arguments)]
/// One update of `μ` and `ρ` on `loss = NLL(one weight sample) + β·KL/N_train`.
pub fn svi_step(
    bnn: &mut BnnModel,
    x: &Tensor,
    labels: &[usize],
    beta: f64,
    n_train: usize,
    opt: &mut OptimizerState,
    schedule: &TrainSchedule,
    rng: &mut Rng,
) -> Result<StepLoss> {
    if !(beta >= 0.0) {
        return Err(Error::Spec(format!("beta must be nonnegative, got {beta}")));
    }
    if n_train == 0 {
        return Err(Error::Spec("n_train must be positive".into()));
    }
    check_data(x, labels)?;
    let mut g = Graph::new();
    let input = g.constant(x.clone());
    let vars: Vec<LayerVars> = bnn
        .layers
        .iter()
        .map(|l| LayerVars {
            mu: g.param(l.mu.clone()),
            rho: g.param(l.rho.clone()),
        })
        .collect();
    let mut weights = Vec::with_capacity(vars.len());
    for (layer, &v) in bnn.layers.iter().zip(&vars) {
        let eps = standard_normal(layer.fan_in(), layer.fan_out(), rng);
        weights.push(layer.sample_on_graph(&mut g, v, eps)?);
    }
    let logits = bnn.logits_on_graph(&mut g, input, &weights)?;
    let nll = g.log_softmax_nll(logits, labels)?;
    let nll_value = g.value(nll).item();

    let (loss, kl_scaled) = if beta > 0.0 {
        let mut kl = None;
        for (layer, &v) in bnn.layers.iter().zip(&vars) {
            let k = layer.kl_on_graph(&mut g, v)?;
            kl = Some(match kl {
                None => k,
                Some(acc) => g.add(acc, k)?,
            });
        }
        let kl = g.scale(kl.expect("model has layers"), beta / n_train as f64)?;
        let value = g.value(kl).item();
        (g.add(nll, kl)?, value)
    } else {
        (nll, 0.0)
    };
    if !(nll_value + kl_scaled).is_finite() {
        return Err(Error::Numeric(format!("svi loss {}", nll_value + kl_scaled)));
    }
    g.backward(loss)?;

    let mut grads = Vec::with_capacity(2 * vars.len());
    for v in &vars {
        for var in [v.mu, v.rho] {
            let shape = g.value(var).shape();
            grads.push(g.take_grad(var).unwrap_or_else(|| Tensor::zeros(shape.0, shape.1)));
        }
    }
    let mut params: Vec<&mut Tensor> = bnn.layers.iter_mut().flat_map(|l| [&mut l.mu, &mut l.rho]).collect();
    opt.update(&mut params, &grads, schedule)?;
    Ok(StepLoss {
        nll: nll_value,
        kl_scaled,
    })
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean minibatch NLL.
    pub nll: f64,
    /// `KL(q ‖ prior) / N_train` at the end of the epoch, before `β`.
    pub kl: f64,
    pub beta: f64,
    /// Accuracy on the monitor slice with noise-free weights.
    pub train_acc: f64,
    pub wall_ms: u64,
}

/// Noise-free weights (`ε = 0`), passed through the model's quantizers.
pub fn mean_weights(bnn: &BnnModel) -> Result<Vec<Tensor>> {
    bnn.layers
        .iter()
        .map(|l| l.sample_with_noise(Tensor::zeros(l.fan_in(), l.fan_out())))
        .collect()
}

/// Accuracy of the noise-free network.
pub fn mean_weight_accuracy(bnn: &BnnModel, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let w = mean_weights(bnn)?;
    Ok(accuracy(&bnn.logits_with_weights(x, &w)?, labels))
}

/// Runs `schedule.svi_epochs` epochs over shuffled minibatches, calling
/// `on_epoch` after each.
#[allow(clippy::too_many_arguments)]
pub fn train_svi(
    bnn: &mut BnnModel,
    x: &Tensor,
    labels: &[usize],
    monitor: (&Tensor, &[usize]),
    schedule: &TrainSchedule,
    rng: &mut Rng,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    check_data(x, labels)?;
    schedule.validate()?;
    let n_train = labels.len();
    let mut opt = OptimizerState::for_model(bnn);
    let mut log = Vec::with_capacity(schedule.svi_epochs);
    for epoch in 0..schedule.svi_epochs {
        let start = Instant::now();
        let beta = schedule.beta(epoch);
        let batches = shuffled_batches(n_train, schedule.batch_size, rng);
        let mut nll = 0.0;
        for idx in &batches {
            let bx = x.select_rows(idx);
            let by: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let step = svi_step(bnn, &bx, &by, beta, n_train, &mut opt, schedule, rng)
                .map_err(|e| diverged("svi", epoch, e))?;
            nll += step.nll;
        }
        let row = EpochLog {
            epoch,
            nll: nll / batches.len() as f64,
            kl: bnn.kl_to_prior()? / n_train as f64,
            beta,
            train_acc: mean_weight_accuracy(bnn, monitor.0, monitor.1)?,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&row);
        log.push(row);
    }
    Ok(log)
}
