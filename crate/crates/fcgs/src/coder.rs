//! Bit-exact range coding of integer symbols against quantized per-symbol
//! distributions, plus a static Bernoulli coder for mask bits.
//!
//! The coder keeps a 64-bit `low`/`range` pair and renormalizes byte-wise
//! once `range` drops below 2^56, so the division slack per symbol is below
//! 2^-40 bits. Carries ripple backwards through the emitted buffer. The
//! exact scheme is documented in `docs/bitstream.md`.

use crate::error::{Error, Result};

/// Total frequency of every quantized distribution.
pub const PMF_TOTAL: u32 = 1 << 16;
const RENORM_THRESHOLD: u64 = 1 << 56;

/// A quantized CDF over the contiguous symbol window `[lo, lo + len)`.
/// `cum` has `len + 1` entries, strictly increasing from 0 to 2^16.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCdf {
    pub lo: i32,
    pub cum: Vec<u32>,
}

impl QuantizedCdf {
    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hi(&self) -> i32 {
        self.lo + self.len() as i32
    }

    /// Probability of `symbol` under the quantized model, 0 if outside.
    pub fn probability(&self, symbol: i32) -> f64 {
        if symbol < self.lo || symbol >= self.hi() {
            return 0.0;
        }
        let k = (symbol - self.lo) as usize;
        (self.cum[k + 1] - self.cum[k]) as f64 / PMF_TOTAL as f64
    }

    /// Information content of `symbol` in bits under the quantized model.
    pub fn bits(&self, symbol: i32) -> f64 {
        -self.probability(symbol).log2()
    }
}

/// Reusable workspace for [`quantize_pmf_into`]; `cum` holds the result.
#[derive(Default)]
pub struct PmfScratch {
    freq: Vec<u32>,
    remainders: Vec<(f64, usize)>,
    order: Vec<usize>,
    pub cum: Vec<u32>,
}

/// Round a real pmf over a symbol window to integer frequencies that sum to
/// exactly 2^16, with a floor of 1 per bin (largest-remainder rounding).
/// The cumulative table lands in `scratch.cum` (length `p.len() + 1`).
pub fn quantize_pmf_into(p: &[f64], scratch: &mut PmfScratch) -> Result<()> {
    let n = p.len();
    if n == 0 || n > PMF_TOTAL as usize {
        return Err(Error::Coder(format!(
            "pmf window of {n} bins is outside (0, {PMF_TOTAL}]"
        )));
    }
    let sum: f64 = p.iter().sum();
    let freq = &mut scratch.freq;
    freq.clear();
    freq.resize(n, 0);
    if sum > 0.0 {
        let mut assigned: u64 = 0;
        let remainders = &mut scratch.remainders;
        remainders.clear();
        for (i, &pi) in p.iter().enumerate() {
            let t = (pi.max(0.0) / sum) * PMF_TOTAL as f64;
            let base = t.floor();
            freq[i] = base as u32;
            assigned += base as u64;
            remainders.push((t - base, i));
        }
        let deficit = (PMF_TOTAL as u64).saturating_sub(assigned) as usize;
        remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, i) in remainders.iter().take(deficit) {
            freq[i] += 1;
        }
    } else {
        // Degenerate pmf: uniform.
        let base = PMF_TOTAL / n as u32;
        let extra = (PMF_TOTAL - base * n as u32) as usize;
        for (i, f) in freq.iter_mut().enumerate() {
            *f = base + u32::from(i < extra);
        }
    }

    // Enforce the per-bin floor of 1, taking mass from the largest bins.
    let mut need: u64 = freq.iter().filter(|&&f| f == 0).count() as u64;
    if need > 0 {
        for f in freq.iter_mut() {
            if *f == 0 {
                *f = 1;
            }
        }
        let order = &mut scratch.order;
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
        for &i in order.iter() {
            if need == 0 {
                break;
            }
            let take = need.min(u64::from(freq[i].saturating_sub(1)));
            freq[i] -= take as u32;
            need -= take;
        }
        debug_assert_eq!(need, 0);
    }

    let cum = &mut scratch.cum;
    cum.clear();
    cum.reserve(n + 1);
    let mut acc = 0u32;
    cum.push(0);
    for &f in freq.iter() {
        acc += f;
        cum.push(acc);
    }
    debug_assert_eq!(acc, PMF_TOTAL);
    Ok(())
}

/// Allocating wrapper around [`quantize_pmf_into`].
pub fn quantize_pmf(p: &[f64], lo: i32) -> Result<QuantizedCdf> {
    let mut scratch = PmfScratch::default();
    quantize_pmf_into(p, &mut scratch)?;
    Ok(QuantizedCdf { lo, cum: scratch.cum })
}

/// Incremental range encoder. Sections own one encoder each; the byte output
/// is framed by the caller.
pub struct RangeEncoder {
    low: u64,
    range: u64,
    out: Vec<u8>,
    coded: bool,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u64::MAX, out: Vec::new(), coded: false }
    }

    fn ripple_carry(&mut self) {
        for b in self.out.iter_mut().rev() {
            if *b == 0xFF {
                *b = 0;
            } else {
                *b += 1;
                return;
            }
        }
        // A carry out of the front of the stream would mean low+range
        // exceeded the coder invariant.
        unreachable!("range coder carry escaped the emitted buffer");
    }

    pub fn encode_symbol(&mut self, cdf: &QuantizedCdf, symbol: i32) -> Result<()> {
        self.encode_with(cdf.lo, &cdf.cum, symbol)
    }

    /// Borrowed-slice variant of [`Self::encode_symbol`] so hot paths can
    /// reuse scratch cumulative buffers.
    pub fn encode_with(&mut self, lo: i32, cum: &[u32], symbol: i32) -> Result<()> {
        let hi = lo + cum.len() as i32 - 1;
        if symbol < lo || symbol >= hi {
            return Err(Error::Coder(format!(
                "symbol {symbol} outside window [{lo}, {hi})"
            )));
        }
        let k = (symbol - lo) as usize;
        let (cum_lo, cum_hi) = (cum[k] as u64, cum[k + 1] as u64);
        let r = self.range >> 16;
        let add = r * cum_lo;
        let (low, carry) = self.low.overflowing_add(add);
        self.low = low;
        if carry {
            self.ripple_carry();
        }
        self.range = if cum_hi == PMF_TOTAL as u64 {
            self.range - add
        } else {
            r * (cum_hi - cum_lo)
        };
        while self.range < RENORM_THRESHOLD {
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
        self.coded = true;
        Ok(())
    }

    /// Flush and return the body bytes. An encoder that coded no symbols
    /// produces an empty body.
    pub fn finish(mut self) -> Vec<u8> {
        if !self.coded {
            return self.out;
        }
        // Round low up to the next multiple of 2^56; since range >= 2^56 the
        // rounded value stays inside [low, low + range), so a single byte
        // pins the interval and the decoder zero-pads the rest.
        let (v, carry) = self.low.overflowing_add(RENORM_THRESHOLD - 1);
        if carry {
            self.ripple_carry();
        }
        self.out.push((v >> 56) as u8);
        self.out
    }
}

/// Incremental range decoder over a byte slice. Bytes past the end read as
/// zero, matching the encoder's minimal flush.
pub struct RangeDecoder<'a> {
    buf: &'a [u8],
    pos: usize,
    code: u64,
    range: u64,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        let mut d = RangeDecoder { buf, pos: 0, code: 0, range: u64::MAX };
        for _ in 0..8 {
            d.code = (d.code << 8) | d.next_byte() as u64;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.buf.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode_symbol(&mut self, cdf: &QuantizedCdf) -> Result<i32> {
        self.decode_with(cdf.lo, &cdf.cum)
    }

    /// Borrowed-slice variant of [`Self::decode_symbol`].
    pub fn decode_with(&mut self, lo: i32, cum: &[u32]) -> Result<i32> {
        let r = self.range >> 16;
        let dv = (self.code / r).min(PMF_TOTAL as u64 - 1) as u32;
        // cum is strictly increasing, so partition_point finds the unique bin
        // with cum[k] <= dv < cum[k+1].
        let k = cum.partition_point(|&c| c <= dv) - 1;
        let (cum_lo, cum_hi) = (cum[k] as u64, cum[k + 1] as u64);
        let add = r * cum_lo;
        self.code -= add;
        self.range = if cum_hi == PMF_TOTAL as u64 {
            self.range - add
        } else {
            r * (cum_hi - cum_lo)
        };
        if self.code >= self.range {
            return Err(Error::Corruption(
                "range coder state violation (stream/model desynchronization)".into(),
            ));
        }
        while self.range < RENORM_THRESHOLD {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte() as u64;
        }
        Ok(lo + k as i32)
    }
}

/// Encode symbols against per-symbol distributions from `cdf_for`.
pub fn encode_symbols(
    symbols: &[i32],
    mut cdf_for: impl FnMut(usize) -> QuantizedCdf,
) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        enc.encode_symbol(&cdf_for(i), s)?;
    }
    Ok(enc.finish())
}

/// Exact inverse of [`encode_symbols`] given the identical distributions.
pub fn decode_symbols(
    bytes: &[u8],
    count: usize,
    mut cdf_for: impl FnMut(usize) -> QuantizedCdf,
) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        out.push(dec.decode_symbol(&cdf_for(i))?);
    }
    Ok(out)
}

fn bernoulli_cdf(p1_fixed: u16) -> QuantizedCdf {
    let p1 = p1_fixed as u32;
    QuantizedCdf { lo: 0, cum: vec![0, PMF_TOTAL - p1, PMF_TOTAL] }
}

/// Code mask bits against a static Bernoulli model. The 4-byte header holds
/// the 16-bit fixed-point frequency of ones (clamped into [1, 65535]).
pub fn encode_mask_bits(bits: &[bool]) -> Vec<u8> {
    let ones = bits.iter().filter(|&&b| b).count();
    let p1_fixed = if bits.is_empty() {
        PMF_TOTAL / 2
    } else {
        ((ones as f64 / bits.len() as f64) * PMF_TOTAL as f64).round() as u32
    }
    .clamp(1, PMF_TOTAL - 1) as u16;
    let cdf = bernoulli_cdf(p1_fixed);
    let mut out = Vec::new();
    out.extend_from_slice(&p1_fixed.to_le_bytes());
    out.extend_from_slice(&[0, 0]);
    let mut enc = RangeEncoder::new();
    for &b in bits {
        enc.encode_symbol(&cdf, i32::from(b)).expect("bit within window");
    }
    out.extend_from_slice(&enc.finish());
    out
}

pub fn decode_mask_bits(bytes: &[u8], count: usize) -> Result<Vec<bool>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("mask section shorter than its 4-byte header".into()));
    }
    let p1_fixed = u16::from_le_bytes([bytes[0], bytes[1]]);
    if p1_fixed == 0 {
        return Err(Error::Corruption("mask header holds zero one-frequency".into()));
    }
    let cdf = bernoulli_cdf(p1_fixed);
    let mut dec = RangeDecoder::new(&bytes[4..]);
    (0..count).map(|_| Ok(dec.decode_symbol(&cdf)? != 0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_xoshiro::rand_core::{RngCore, SeedableRng};
    use rand_xoshiro::Xoshiro256StarStar;

    fn uniform_cdf(bins: usize) -> QuantizedCdf {
        let p = vec![1.0 / bins as f64; bins];
        quantize_pmf(&p, 0).unwrap()
    }

    #[test]
    fn quantize_pmf_spec_cases() {
        let c = quantize_pmf(&[0.5, 0.5], 0).unwrap();
        assert_eq!(c.cum, vec![0, 32768, 65536]);
        let c = quantize_pmf(&[1.0, 0.0], 0).unwrap();
        assert_eq!(c.cum, vec![0, 65535, 65536]);
    }

    #[test]
    fn quantize_pmf_random_sums_and_bounds() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(42);
        let n = 1024;
        let p: Vec<f64> = (0..n).map(|_| (rng.next_u64() >> 11) as f64).collect();
        let sum: f64 = p.iter().sum();
        let p: Vec<f64> = p.iter().map(|v| v / sum).collect();
        let c = quantize_pmf(&p, -7).unwrap();
        assert_eq!(*c.cum.last().unwrap(), PMF_TOTAL);
        // Bins below the floor get 1/65536 each; that mass is drained from the
        // largest bins, so the worst-case error grows with the floored count.
        let floored = p.iter().filter(|&&q| q * (PMF_TOTAL as f64) < 1.0).count() as f64;
        let bound = (2.0 + floored) / PMF_TOTAL as f64;
        for (i, w) in c.cum.windows(2).enumerate() {
            let f = w[1] - w[0];
            assert!(f >= 1);
            let err = (f as f64 / PMF_TOTAL as f64 - p[i]).abs();
            assert!(err <= bound);
        }
    }

    #[test]
    fn empty_symbol_list_round_trips_with_empty_body() {
        let body = encode_symbols(&[], |_| unreachable!()).unwrap();
        assert!(body.is_empty());
        let back = decode_symbols(&body, 0, |_| unreachable!()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn uniform_symbols_near_entropy() {
        let cdf = uniform_cdf(256);
        let n = 1_000_000usize;
        let mut rng = Xoshiro256StarStar::seed_from_u64(1);
        let symbols: Vec<i32> = (0..n).map(|_| (rng.next_u64() & 0xFF) as i32).collect();
        let body = encode_symbols(&symbols, |_| cdf.clone()).unwrap();
        assert!((body.len() as f64 - n as f64).abs() < n as f64 * 0.01);
        let back = decode_symbols(&body, n, |_| cdf.clone()).unwrap();
        assert_eq!(back, symbols);
    }

    #[test]
    fn skewed_round_trip_and_rate_bound() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(9);
        for trial in 0..30 {
            let bins = 2 + (rng.next_u64() % 300) as usize;
            let skew = 1.0 + trial as f64;
            let p: Vec<f64> = (0..bins).map(|i| (-(i as f64) * skew / bins as f64).exp()).collect();
            let sum: f64 = p.iter().sum();
            let p: Vec<f64> = p.iter().map(|v| v / sum).collect();
            let cdf = quantize_pmf(&p, -(bins as i32) / 2).unwrap();
            let n = 2000;
            let symbols: Vec<i32> = (0..n)
                .map(|_| {
                    let dv = (rng.next_u64() % PMF_TOTAL as u64) as u32;
                    cdf.lo + (cdf.cum.partition_point(|&c| c <= dv) - 1) as i32
                })
                .collect();
            let body = encode_symbols(&symbols, |_| cdf.clone()).unwrap();
            let ideal: f64 = symbols.iter().map(|&s| cdf.bits(s)).sum();
            assert!((body.len() as f64) * 8.0 <= ideal + 32.0 + 64.0, "rate bound violated");
            let back = decode_symbols(&body, n, |_| cdf.clone()).unwrap();
            assert_eq!(back, symbols);
        }
    }

    #[test]
    fn out_of_window_symbol_is_an_error() {
        let cdf = uniform_cdf(4);
        assert!(encode_symbols(&[4], |_| cdf.clone()).is_err());
        assert!(encode_symbols(&[-1], |_| cdf.clone()).is_err());
    }

    #[test]
    fn byte_mutation_never_panics() {
        let cdf = uniform_cdf(16);
        let mut rng = Xoshiro256StarStar::seed_from_u64(5);
        let symbols: Vec<i32> = (0..1024).map(|_| (rng.next_u64() & 0xF) as i32).collect();
        let body = encode_symbols(&symbols, |_| cdf.clone()).unwrap();
        for i in 0..body.len().min(64) {
            let mut mutated = body.clone();
            mutated[i] ^= 0x5A;
            match decode_symbols(&mutated, symbols.len(), |_| cdf.clone()) {
                Ok(decoded) => assert_ne!(decoded, symbols, "mutation at byte {i} went unnoticed"),
                Err(Error::Corruption(_)) => {}
                Err(e) => panic!("unexpected error class: {e:?}"),
            }
        }
    }

    #[test]
    fn mask_bits_round_trip_and_sizes() {
        // All ones: body is just the flush byte.
        let bits = vec![true; 1000];
        let bytes = encode_mask_bits(&bits);
        assert!(bytes.len() <= 4 + 1);
        assert_eq!(decode_mask_bits(&bytes, 1000).unwrap(), bits);

        // Balanced: close to 1 bit per symbol.
        let mut rng = Xoshiro256StarStar::seed_from_u64(3);
        let bits: Vec<bool> = (0..100_000).map(|_| rng.next_u64() & 1 == 1).collect();
        let bytes = encode_mask_bits(&bits);
        assert!((bytes.len() as f64 - 12_500.0).abs() < 12_500.0 * 0.01 + 16.0);
        assert_eq!(decode_mask_bits(&bytes, bits.len()).unwrap(), bits);
    }
}
