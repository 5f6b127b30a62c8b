//! Uniform and logarithmic quantizers with straight-through gradients.
//!
//! Three quantizers sit on every Gaussian weight: a uniform quantizer on the
//! sampled weight, a uniform quantizer on the mean and a logarithmic
//! quantizer on the standard deviation (see [`crate::bnn`]). All of them are
//! pure functions of `(input, quantizer)`; the `apply` methods additionally
//! record a straight-through node on an autodiff [`Graph`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_BITS: u32 = 32;

/// Symmetric signed uniform quantizer on `[-clip, clip]`.
///
/// The integer grid is `{-(2^(b-1) - 1), …, 2^(b-1) - 1}`, so zero is exactly
/// representable and `q(-x) = -q(x)`. Ties round to even.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformQuantizer {
    bits: u32,
    clip: f64,
}

impl UniformQuantizer {
    pub fn new(bits: u32, clip: f64) -> Result<Self> {
        if !(2..=MAX_BITS).contains(&bits) {
            return Err(Error::Spec(format!(
                "uniform quantizer needs 2..={MAX_BITS} bits, got {bits}"
            )));
        }
        if !(clip > 0.0 && clip.is_finite()) {
            return Err(Error::Spec(format!("clip radius must be positive, got {clip}")));
        }
        Ok(UniformQuantizer { bits, clip })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    /// Largest integer level, `2^(b-1) - 1`.
    pub fn max_level(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }

    pub fn step(&self) -> f64 {
        self.clip / self.max_level() as f64
    }

    pub fn level(&self, i: i64) -> f64 {
        // endpoints are pinned so the output never leaves [-clip, clip]
        let m = self.max_level();
        if i >= m {
            self.clip
        } else if i <= -m {
            -self.clip
        } else {
            i as f64 * self.step()
        }
    }

    pub fn index(&self, x: f64) -> i64 {
        let m = self.max_level();
        let r = (x / self.step()).round_ties_even();
        // clamp in float space first so huge inputs do not saturate the cast oddly
        r.clamp(-(m as f64), m as f64) as i64
    }

    pub fn quantize_value(&self, x: f64) -> f64 {
        self.level(self.index(x))
    }

    /// Whether the straight-through gradient passes at `x`.
    pub fn passes(&self, x: f64) -> bool {
        x.abs() <= self.clip
    }

    pub fn quantize(&self, x: &Tensor) -> Tensor {
        x.map(|v| self.quantize_value(v))
    }

    /// All representable values in increasing order.
    pub fn levels(&self) -> Vec<f64> {
        let m = self.max_level();
        (-m..=m).map(|i| self.level(i)).collect()
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let input = g.value(x);
        let forward = self.quantize(input);
        let pass = input.values().iter().map(|&v| self.passes(v)).collect();
        g.straight_through(x, forward, pass)
    }
}

/// Logarithmic quantizer for strictly positive values such as standard
/// deviations.
///
/// Levels are `exp(ln lo + k·Δ)` for `k = 0..2^b − 1` with
/// `Δ = (ln hi − ln lo)/(2^b − 1)`; the endpoints are exactly `lo` and `hi`.
/// Inputs are rounded to the nearest level in the log domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogQuantizer {
    bits: u32,
    lo: f64,
    hi: f64,
}

impl LogQuantizer {
    pub fn new(bits: u32, lo: f64, hi: f64) -> Result<Self> {
        if !(1..=MAX_BITS).contains(&bits) {
            return Err(Error::Spec(format!(
                "log quantizer needs 1..={MAX_BITS} bits, got {bits}"
            )));
        }
        if !(lo > 0.0 && hi.is_finite() && lo < hi) {
            return Err(Error::Spec(format!(
                "log quantizer range must satisfy 0 < lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(LogQuantizer { bits, lo, hi })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn max_index(&self) -> u64 {
        (1u64 << self.bits) - 1
    }

    /// Spacing of adjacent levels in the log domain.
    pub fn log_step(&self) -> f64 {
        (self.hi.ln() - self.lo.ln()) / self.max_index() as f64
    }

    pub fn level(&self, k: u64) -> f64 {
        let max = self.max_index();
        if k == 0 {
            self.lo
        } else if k >= max {
            self.hi
        } else {
            (self.lo.ln() + k as f64 * self.log_step()).exp()
        }
    }

    /// Index of the nearest level; `sigma` must be positive.
    pub fn index(&self, sigma: f64) -> u64 {
        let t = ((sigma.ln() - self.lo.ln()) / self.log_step()).round_ties_even();
        t.clamp(0.0, self.max_index() as f64) as u64
    }

    pub fn quantize_value(&self, sigma: f64) -> Result<f64> {
        if !(sigma > 0.0) {
            return Err(Error::Domain(format!(
                "log quantizer input must be positive, got {sigma}"
            )));
        }
        Ok(self.level(self.index(sigma)))
    }

    pub fn passes(&self, sigma: f64) -> bool {
        (self.lo..=self.hi).contains(&sigma)
    }

    pub fn quantize(&self, sigma: &Tensor) -> Result<Tensor> {
        let mut out = sigma.clone();
        for v in out.values_mut() {
            *v = self.quantize_value(*v)?;
        }
        Ok(out)
    }

    pub fn levels(&self) -> Vec<f64> {
        (0..=self.max_index()).map(|k| self.level(k)).collect()
    }

    /// Worst-case relative error for inputs inside `[lo, hi]`: half a log step,
    /// rounded up.
    pub fn max_relative_error(&self) -> f64 {
        (self.log_step() / 2.0).exp_m1()
    }

    pub fn apply(&self, g: &mut Graph, sigma: Var) -> Result<Var> {
        let input = g.value(sigma);
        let forward = self.quantize(input)?;
        let pass = input.values().iter().map(|&v| self.passes(v)).collect();
        g.straight_through(sigma, forward, pass)
    }
}

/// Unsigned uniform quantizer with `2^b` levels on `[0, hi]`.
///
/// Used for optional input quantization and as the uniform baseline when
/// comparing quantization error on standard deviations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeQuantizer {
    bits: u32,
    hi: f64,
}

impl RangeQuantizer {
    pub fn new(bits: u32, hi: f64) -> Result<Self> {
        if !(1..=MAX_BITS).contains(&bits) {
            return Err(Error::Spec(format!(
                "range quantizer needs 1..={MAX_BITS} bits, got {bits}"
            )));
        }
        if !(hi > 0.0 && hi.is_finite()) {
            return Err(Error::Spec(format!("range upper bound must be positive, got {hi}")));
        }
        Ok(RangeQuantizer { bits, hi })
    }

    pub fn max_level(&self) -> u64 {
        (1u64 << self.bits) - 1
    }

    pub fn step(&self) -> f64 {
        self.hi / self.max_level() as f64
    }

    pub fn quantize_value(&self, x: f64) -> f64 {
        let k = (x / self.step()).round_ties_even().clamp(0.0, self.max_level() as f64);
        if k as u64 == self.max_level() {
            self.hi
        } else {
            k * self.step()
        }
    }
}

/// Clamps every element to `[-r, r]`.
pub fn clip_magnitude(x: &Tensor, r: f64) -> Tensor {
    x.map(|v| v.clamp(-r, r))
}

/// Records a clamp to `[-r, r]` whose gradient is 1 inside the range and 0
/// outside.
pub fn clip_on_graph(g: &mut Graph, x: Var, r: f64) -> Result<Var> {
    if !(r > 0.0) {
        return Err(Error::Spec(format!("clip radius must be positive, got {r}")));
    }
    let input = g.value(x);
    let forward = clip_magnitude(input, r);
    let pass = input.values().iter().map(|v| v.abs() <= r).collect();
    g.gate(x, forward, pass, false)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub err_uniform: f64,
    pub err_log: f64,
}

/// Relative error `|q(σ) − σ| / σ` of a uniform and a logarithmic quantizer
/// over the given standard deviations.
pub fn relative_error_sweep(uniform: &RangeQuantizer, log: &LogQuantizer, sigmas: &[f64]) -> Result<Vec<SweepRow>> {
    sigmas
        .iter()
        .map(|&sigma| {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::Domain(format!("sweep values must be positive, got {sigma}")));
            }
            let err_uniform = (uniform.quantize_value(sigma) - sigma).abs() / sigma;
            let err_log = (log.quantize_value(sigma)? - sigma).abs() / sigma;
            Ok(SweepRow {
                sigma,
                err_uniform,
                err_log,
            })
        })
        .collect()
}
