//! Mean-field Gaussian variational layers and the bias-free MLP classifier.
//!
//! Each weight carries a Gaussian `N(μ, σ²)` with `σ = exp(ρ)`. Depending on
//! the [`Method`], three quantizers are wired around the reparameterized
//! draw `w = μ + σ·ε`:
//!
//! | method | mean            | std-dev   | sample            |
//! |--------|-----------------|-----------|-------------------|
//! | float  | clip(μ)         | σ         | w                 |
//! | vpq    | B1(clip(μ))     | B2(σ)     | w                 |
//! | spq    | clip(μ)         | σ         | A(w)              |
//! | jq     | B1(clip(μ))     | B2(σ)     | A(w)              |
//!
//! `A` and `B1` are [`UniformQuantizer`]s sharing the clip radius, `B2` is a
//! [`LogQuantizer`]. Every quantizer back-propagates straight through.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Graph, Var};
use crate::error::{Error, Result};
use crate::quant::{clip_on_graph, LogQuantizer, UniformQuantizer};
use crate::rng::{sample_rng, standard_normal, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Float,
    Vpq,
    Spq,
    Jq,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Float, Method::Vpq, Method::Spq, Method::Jq];

    /// Whether the variational parameters are quantized.
    pub fn quantizes_params(self) -> bool {
        matches!(self, Method::Vpq | Method::Jq)
    }

    /// Whether sampled weights are quantized.
    pub fn quantizes_samples(self) -> bool {
        matches!(self, Method::Spq | Method::Jq)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Float => "float",
            Method::Vpq => "vpq",
            Method::Spq => "spq",
            Method::Jq => "jq",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "float" => Ok(Method::Float),
            "vpq" => Ok(Method::Vpq),
            "spq" | "sq" => Ok(Method::Spq),
            "jq" => Ok(Method::Jq),
            other => Err(Error::Spec(format!("unknown method `{other}` (float|vpq|spq|jq)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softplus,
    Relu,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Softplus => "softplus",
            Activation::Relu => "relu",
        }
    }

    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Softplus => x.map(autodiff::softplus),
            Activation::Relu => x.map(|v| v.max(0.0)),
        }
    }

    pub fn apply_on_graph(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Softplus => g.softplus(x),
            Activation::Relu => g.relu(x),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "softplus" => Ok(Activation::Softplus),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Spec(format!("unknown activation `{other}` (softplus|relu)"))),
        }
    }
}

/// Quantizers attached to one variational layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerQuantizers {
    /// `A`: on sampled weights.
    pub sample: UniformQuantizer,
    /// `B1`: on the mean.
    pub mean: UniformQuantizer,
    /// `B2`: on the standard deviation.
    pub std: LogQuantizer,
}

impl LayerQuantizers {
    pub fn new(bits: u32, clip: f64, sigma_lo: f64, sigma_hi: f64) -> Result<Self> {
        let uniform = UniformQuantizer::new(bits, clip)?;
        Ok(LayerQuantizers {
            sample: uniform,
            mean: uniform,
            std: LogQuantizer::new(bits, sigma_lo, sigma_hi)?,
        })
    }
}

/// Everything needed to build a [`BnnModel`] apart from its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Layer widths including input and output, e.g. `[784, 100, 100, 10]`.
    pub sizes: Vec<usize>,
    pub method: Method,
    pub bits: u32,
    pub activation: Activation,
    pub clip: f64,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub prior_std: f64,
    /// Under vpq/jq, compute the KL term from the quantized parameters.
    pub kl_on_quantized: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            sizes: vec![crate::INPUT_DIM, 100, 100, crate::NUM_CLASSES],
            method: Method::Float,
            bits: 8,
            activation: Activation::Softplus,
            clip: 1.0,
            sigma_lo: 1e-3,
            sigma_hi: 1.0,
            prior_std: 1.0,
            kl_on_quantized: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 || self.sizes.contains(&0) {
            return Err(Error::Spec(format!("invalid layer sizes {:?}", self.sizes)));
        }
        if !(self.prior_std > 0.0) {
            return Err(Error::Spec(format!(
                "prior std must be positive, got {}",
                self.prior_std
            )));
        }
        self.quantizers().map(|_| ())
    }

    pub fn quantizers(&self) -> Result<LayerQuantizers> {
        LayerQuantizers::new(self.bits, self.clip, self.sigma_lo, self.sigma_hi)
    }
}

/// Closed-form `KL(N(m, s²) ‖ N(0, p²))` for a single weight.
pub fn kl_gaussian(m: f64, s: f64, p: f64) -> f64 {
    0.5 * (m * m / (p * p) + s * s / (p * p) - 1.0 - 2.0 * (s / p).ln())
}

/// Mean-field Gaussian linear layer without bias.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLayer {
    pub name: String,
    /// `[fan_in, fan_out]`
    pub mu: Tensor,
    /// `σ = exp(ρ)`
    pub rho: Tensor,
    pub prior_std: f64,
    pub method: Method,
    pub quant: LayerQuantizers,
    pub clip: f64,
    pub kl_on_quantized: bool,
}

/// Graph handles of a layer's trainable parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub mu: Var,
    pub rho: Var,
}

impl GaussianLayer {
    pub fn fan_in(&self) -> usize {
        self.mu.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.mu.cols()
    }

    pub fn sigma(&self) -> Tensor {
        self.rho.map(f64::exp)
    }

    pub fn num_weights(&self) -> usize {
        self.mu.len()
    }

    /// Mean and standard deviation as used for sampling, after clipping and
    /// (under vpq/jq) quantization. Gradients reach `mu` and `rho`.
    pub fn effective_params_on_graph(&self, g: &mut Graph, vars: LayerVars) -> Result<(Var, Var)> {
        let mut mean = clip_on_graph(g, vars.mu, self.clip)?;
        let mut std = g.exp(vars.rho)?;
        if self.method.quantizes_params() {
            mean = self.quant.mean.apply(g, mean)?;
            std = self.quant.std.apply(g, std)?;
        }
        Ok((mean, std))
    }

    /// Reparameterized weight draw for noise `eps`.
    pub fn sample_on_graph(&self, g: &mut Graph, vars: LayerVars, eps: Tensor) -> Result<Var> {
        let (mean, std) = self.effective_params_on_graph(g, vars)?;
        let eps = g.constant(eps);
        let noise = g.mul(std, eps)?;
        let w = g.add(mean, noise)?;
        if self.method.quantizes_samples() {
            self.quant.sample.apply(g, w)
        } else {
            Ok(w)
        }
    }

    /// Weight draw for a given noise tensor, without gradient tracking.
    pub fn sample_with_noise(&self, eps: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = LayerVars {
            mu: g.constant(self.mu.clone()),
            rho: g.constant(self.rho.clone()),
        };
        let w = self.sample_on_graph(&mut g, vars, eps)?;
        Ok(g.value(w).clone())
    }

    pub fn sample_weights(&self, rng: &mut Rng) -> Result<Tensor> {
        let eps = standard_normal(self.fan_in(), self.fan_out(), rng);
        self.sample_with_noise(eps)
    }

    /// KL divergence to the `N(0, prior_std²)` prior, summed over weights.
    pub fn kl_on_graph(&self, g: &mut Graph, vars: LayerVars) -> Result<Var> {
        let (mean, std) = if self.kl_on_quantized && self.method.quantizes_params() {
            self.effective_params_on_graph(g, vars)?
        } else {
            (vars.mu, g.exp(vars.rho)?)
        };
        let p = self.prior_std;
        let m2 = g.square(mean)?;
        let s2 = g.square(std)?;
        let quad = g.add(m2, s2)?;
        let quad = g.scale(quad, 0.5 / (p * p))?;
        let ln_s = g.ln(std)?;
        let per_weight = g.sub(quad, ln_s)?;
        let per_weight = g.offset(per_weight, p.ln() - 0.5)?;
        g.sum(per_weight)
    }

    pub fn kl_to_prior(&self) -> Result<f64> {
        let mut g = Graph::new();
        let vars = LayerVars {
            mu: g.constant(self.mu.clone()),
            rho: g.constant(self.rho.clone()),
        };
        let kl = self.kl_on_graph(&mut g, vars)?;
        Ok(g.value(kl).item())
    }
}

/// Bias-free Bayesian MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct BnnModel {
    pub layers: Vec<GaussianLayer>,
    pub activation: Activation,
    pub config: ModelConfig,
}

impl BnnModel {
    /// Model with zero means and every `σ = sigma_init`; see
    /// [`crate::svi::transfer_mu`] for starting from pretrained weights.
    pub fn new(config: &ModelConfig, sigma_init: f64) -> Result<Self> {
        config.validate()?;
        if !(sigma_init > 0.0) {
            return Err(Error::Spec(format!("initial sigma must be positive, got {sigma_init}")));
        }
        let quant = config.quantizers()?;
        let layers = config
            .sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| GaussianLayer {
                name: format!("fc{}", i + 1),
                mu: Tensor::zeros(w[0], w[1]),
                rho: Tensor::full(w[0], w[1], sigma_init.ln()),
                prior_std: config.prior_std,
                method: config.method,
                quant,
                clip: config.clip,
                kl_on_quantized: config.kl_on_quantized,
            })
            .collect();
        Ok(BnnModel {
            layers,
            activation: config.activation,
            config: config.clone(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, GaussianLayer::fan_out)
    }

    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(GaussianLayer::num_weights).sum()
    }

    /// One weight draw per layer.
    pub fn sample_weights(&self, rng: &mut Rng) -> Result<Vec<Tensor>> {
        self.layers.iter().map(|l| l.sample_weights(rng)).collect()
    }

    /// Logits of a forward pass with fixed weights.
    pub fn logits_with_weights(&self, x: &Tensor, weights: &[Tensor]) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, w) in weights.iter().enumerate() {
            h = h.matmul(w)?;
            if i + 1 < weights.len() {
                h = self.activation.apply(&h);
            }
        }
        if !h.all_finite() {
            return Err(Error::Numeric("forward pass".into()));
        }
        Ok(h)
    }

    pub fn logits_on_graph(&self, g: &mut Graph, x: Var, weights: &[Var]) -> Result<Var> {
        let mut h = x;
        for (i, &w) in weights.iter().enumerate() {
            h = g.matmul(h, w)?;
            if i + 1 < weights.len() {
                h = self.activation.apply_on_graph(g, h)?;
            }
        }
        Ok(h)
    }

    /// Softmax class probabilities under one fresh weight sample.
    pub fn forward_once(&self, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "forward_once",
                left: x.shape(),
                right: (self.input_dim(), self.num_classes()),
            });
        }
        let weights = self.sample_weights(rng)?;
        Ok(softmax_rows(&self.logits_with_weights(x, &weights)?))
    }

    /// `n` independent predictive distributions. Sample `i` draws its weights
    /// from [`sample_rng`]`(eval_seed, i)`, so the result does not depend on
    /// how samples are spread across threads.
    pub fn predictive_ensemble(&self, x: &Tensor, n: usize, eval_seed: u64) -> Result<Vec<Tensor>> {
        if n == 0 {
            return Err(Error::Spec("ensemble needs at least one sample".into()));
        }
        (0..n)
            .into_par_iter()
            .map(|i| self.forward_once(x, &mut sample_rng(eval_seed, i as u64)))
            .collect()
    }

    /// Summed KL of all layers to the prior.
    pub fn kl_to_prior(&self) -> Result<f64> {
        self.layers.iter().map(GaussianLayer::kl_to_prior).sum()
    }
}

/// Row-wise softmax, computed from log-sum-exp.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let cols = logits.cols();
    for r in 0..logits.rows() {
        let lse = autodiff::log_sum_exp(logits.row(r));
        for v in &mut out.values_mut()[r * cols..(r + 1) * cols] {
            *v = (*v - lse).exp();
        }
    }
    out
}
