//! Symbol probabilities: the softmax-weighted Gaussian mixture used for
//! latent coding, the per-channel factorized prior used for hyper-latents,
//! and rate accounting helpers.

use crate::coder::{QuantizedCdf, PMF_TOTAL};
use crate::error::{Error, Result};

/// Sigma clamp applied after the exp activation of raw scale outputs.
pub const SIGMA_MIN: f64 = 1e-6;
pub const SIGMA_MAX: f64 = 1e4;

/// Symbol bound for hyper-latent coding; the factorized tables cover
/// `[-Z_BOUND, Z_BOUND]`.
pub const Z_BOUND: i32 = 255;

/// Cumulative normal distribution via the complementary error function.
/// Deep tails (beyond 13 standard deviations, mass < 1e-38) short-circuit to
/// exact 0/1; far below the 2^-16 coder resolution.
pub fn normal_cdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let t = (x - mu) / sigma;
    if t > 13.0 {
        return 1.0;
    }
    if t < -13.0 {
        return 0.0;
    }
    0.5 * libm::erfc(-t / std::f64::consts::SQRT_2)
}

/// Softmax over mixing logits.
pub fn softmax(pi: &[f64]) -> Vec<f64> {
    let m = pi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = pi.iter().map(|&p| (p - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// One mixture component for a single element: mean, activated sigma, and the
/// already-softmaxed weight.
#[derive(Debug, Clone, Copy)]
pub struct MixComponent {
    pub mu: f64,
    pub sigma: f64,
    pub theta: f64,
}

/// Probability of the dequantized value `symbol * step` under the mixture of
/// Gaussian interval masses with half-step integration bounds.
pub fn mix_probability(components: &[MixComponent], symbol: i32, step: f64) -> f64 {
    let y = symbol as f64 * step;
    let mut p = 0.0;
    for c in components {
        let hi = normal_cdf(y + step / 2.0, c.mu, c.sigma);
        let lo = normal_cdf(y - step / 2.0, c.mu, c.sigma);
        p += c.theta * (hi - lo);
    }
    p.clamp(f64::MIN_POSITIVE, 1.0)
}

/// Evaluate the mixture pmf over the symbol window `[lo, hi]` (inclusive)
/// into a reused buffer.
pub fn mix_pmf_into(components: &[MixComponent], lo: i32, hi: i32, step: f64, pmf: &mut Vec<f64>) {
    // One CDF evaluation per bin edge per component.
    let n = (hi - lo + 1) as usize;
    pmf.clear();
    pmf.resize(n, 0.0);
    for c in components {
        let mut prev = normal_cdf((lo as f64 - 0.5) * step, c.mu, c.sigma);
        for (k, slot) in pmf.iter_mut().enumerate() {
            let edge = (lo + k as i32) as f64 + 0.5;
            let cur = normal_cdf(edge * step, c.mu, c.sigma);
            *slot += c.theta * (cur - prev).max(0.0);
            prev = cur;
        }
    }
}

/// Allocating wrapper around [`mix_pmf_into`].
pub fn mix_pmf(components: &[MixComponent], lo: i32, hi: i32, step: f64) -> Vec<f64> {
    let mut pmf = Vec::new();
    mix_pmf_into(components, lo, hi, step, &mut pmf);
    pmf
}

/// Per-channel monotone CDF tables over integer symbols in
/// `[-Z_BOUND, Z_BOUND]`, stored as cumulative frequencies with total 2^16.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedPrior {
    /// One cumulative table per channel, each of length `2 * Z_BOUND + 2`,
    /// starting at 0 and ending at 2^16.
    pub channels: Vec<Vec<u32>>,
}

impl FactorizedPrior {
    pub fn bins() -> usize {
        (2 * Z_BOUND + 1) as usize
    }

    pub fn validate(&self) -> Result<()> {
        for (ch, cum) in self.channels.iter().enumerate() {
            if cum.len() != Self::bins() + 1 {
                return Err(Error::Weights(format!(
                    "factorized table for channel {ch} has {} entries, expected {}",
                    cum.len(),
                    Self::bins() + 1
                )));
            }
            if cum[0] != 0 || *cum.last().unwrap() != PMF_TOTAL {
                return Err(Error::Weights(format!(
                    "factorized table for channel {ch} does not span [0, 2^16]"
                )));
            }
            if cum.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Weights(format!(
                    "factorized table for channel {ch} is not strictly increasing"
                )));
            }
        }
        Ok(())
    }

    fn clamp_symbol(symbol: i32) -> usize {
        (symbol.clamp(-Z_BOUND, Z_BOUND) + Z_BOUND) as usize
    }

    /// `(cdf[s+1] - cdf[s]) / 2^16`, out-of-range symbols clamp to the
    /// boundary bin.
    pub fn probability(&self, channel: usize, symbol: i32) -> f64 {
        let cum = &self.channels[channel];
        let k = Self::clamp_symbol(symbol);
        (cum[k + 1] - cum[k]) as f64 / PMF_TOTAL as f64
    }

    /// The coder-side distribution for one channel (the full table window).
    pub fn cdf(&self, channel: usize) -> QuantizedCdf {
        QuantizedCdf { lo: -Z_BOUND, cum: self.channels[channel].clone() }
    }
}

/// Total information content in bits: sum of -log2 p.
pub fn estimate_bits(probabilities: &[f64]) -> Result<f64> {
    let mut bits = 0.0;
    for &p in probabilities {
        if p <= 0.0 || p > 1.0 {
            return Err(Error::Format(format!("probability {p} outside (0, 1]")));
        }
        bits -= p.log2();
    }
    Ok(bits)
}
