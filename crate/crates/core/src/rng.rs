//! Seedable random streams and the sampling primitives shared by every sampler.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};

/// A reproducible random stream identified by `(base_seed, stream_id)`.
///
/// Backed by ChaCha8, whose 64-bit stream parameter gives independent
/// sequences for distinct `stream_id`s under the same key.
#[derive(Clone, Debug)]
pub struct SeededStream {
    base_seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl SeededStream {
    pub fn new(base_seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
        rng.set_stream(stream_id);
        SeededStream {
            base_seed,
            stream_id,
            rng,
        }
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform index in `0..m`.
    pub fn index(&mut self, m: usize) -> usize {
        self.rng.random_range(0..m)
    }
}

impl RngCore for SeededStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Draw from IG(shape, rate) as the reciprocal of Gamma(shape, scale = 1/rate).
pub fn inverse_gamma_sample<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite()) || !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "inverse gamma needs positive finite shape and rate, got ({shape}, {rate})"
        )));
    }
    let gamma = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::InvalidParameter(format!("gamma: {e}")))?;
    loop {
        let g: f64 = gamma.sample(rng);
        // A zero gamma draw is possible for tiny shapes; redraw rather than return +inf.
        if g > 0.0 {
            return Ok(1.0 / g);
        }
    }
}

/// `log(sum(exp(values)))`, stable for large magnitudes.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    let max = max_log_weight(values)?;
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

fn max_log_weight(values: &[f64]) -> Result<f64> {
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        if v.is_nan() || v == f64::INFINITY {
            return Err(Error::DegenerateWeights);
        }
        if v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights);
    }
    Ok(max)
}

/// Exponentiate and normalize log-weights into a probability vector.
pub fn normalize_log_weights(values: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; values.len()];
    normalize_log_weights_into(values, &mut out)?;
    Ok(out)
}

/// In-place variant of [`normalize_log_weights`]; `out` must match `values` in length.
pub fn normalize_log_weights_into(values: &[f64], out: &mut [f64]) -> Result<()> {
    debug_assert_eq!(values.len(), out.len());
    let max = max_log_weight(values)?;
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(values) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(())
}

/// Inverse-CDF table with a guide index, so repeated draws from one weight
/// vector cost O(1) expected time each.
#[derive(Clone, Debug, Default)]
pub struct CategoricalTable {
    cumulative: Vec<f64>,
    guide: Vec<usize>,
    last_positive: usize,
}

impl CategoricalTable {
    pub fn new(weights: &[f64]) -> Result<Self> {
        let mut table = CategoricalTable::default();
        table.rebuild(weights)?;
        Ok(table)
    }

    /// Refill the table from nonnegative, possibly unnormalized `weights`, reusing the allocation.
    pub fn rebuild(&mut self, weights: &[f64]) -> Result<()> {
        self.cumulative.clear();
        let mut acc = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "weight {i} is {w}; weights must be finite and nonnegative"
                )));
            }
            if w > 0.0 {
                self.last_positive = i;
            }
            acc += w;
            self.cumulative.push(acc);
        }
        if !(acc > 0.0) {
            return Err(Error::DegenerateWeights);
        }
        let m = self.cumulative.len();
        self.guide.clear();
        let mut j = 0;
        for k in 0..m {
            let threshold = acc * (k as f64 / m as f64);
            while j < m - 1 && self.cumulative[j] <= threshold {
                j += 1;
            }
            self.guide.push(j);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cumulative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cumulative.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.index_at(rng.random::<f64>())
    }

    /// Index selected by the uniform variate `v ∈ [0, 1)`.
    fn index_at(&self, v: f64) -> usize {
        let m = self.cumulative.len();
        let u = v * self.cumulative[m - 1];
        let mut j = self.guide[((v * m as f64) as usize).min(m - 1)];
        while j > 0 && self.cumulative[j - 1] > u {
            j -= 1;
        }
        while j < m - 1 && self.cumulative[j] <= u {
            j += 1;
        }
        if self.cumulative[j] <= u {
            // u rounded up to the total; fall back to the last index with mass.
            return self.last_positive;
        }
        j
    }
}

/// Walker/Vose alias table: one 64-bit draw per sample, for many draws from
/// the same weight vector.
#[derive(Clone, Debug, Default)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<u32>,
    scaled: Vec<f64>,
    small: Vec<u32>,
    large: Vec<u32>,
}

impl AliasTable {
    /// Rebuild from nonnegative weights with positive sum `total`, reusing buffers.
    pub fn rebuild(&mut self, weights: &[f64], total: f64) -> Result<()> {
        let m = weights.len();
        if m == 0 || m > u32::MAX as usize {
            return Err(Error::InvalidParameter(format!("alias table size {m}")));
        }
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegenerateWeights);
        }
        for buf in [&mut self.prob, &mut self.scaled] {
            buf.clear();
            buf.resize(m, 0.0);
        }
        for buf in [&mut self.alias, &mut self.small, &mut self.large] {
            buf.clear();
            buf.resize(m, 0);
        }
        let scale = m as f64 / total;
        let (mut ns, mut nl) = (0, 0);
        let mut last_positive = 0;
        for (i, &w) in weights.iter().enumerate() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "weight {i} is {w}; weights must be finite and nonnegative"
                )));
            }
            if w > 0.0 {
                last_positive = i as u32;
            }
            let p = w * scale;
            self.scaled[i] = p;
            self.alias[i] = i as u32;
            // Branch-free partition into under- and over-full columns.
            self.small[ns] = i as u32;
            self.large[nl] = i as u32;
            let is_small = (p < 1.0) as usize;
            ns += is_small;
            nl += 1 - is_small;
        }
        while ns > 0 && nl > 0 {
            ns -= 1;
            let s = self.small[ns] as usize;
            let l = self.large[nl - 1];
            self.prob[s] = self.scaled[s];
            self.alias[s] = l;
            let rest = (self.scaled[l as usize] + self.scaled[s]) - 1.0;
            self.scaled[l as usize] = rest;
            if rest < 1.0 {
                nl -= 1;
                self.small[ns] = l;
                ns += 1;
            }
        }
        for &l in &self.large[..nl] {
            self.prob[l as usize] = 1.0;
        }
        // Leftovers from rounding keep their own column unless they carry no mass.
        for &s in &self.small[..ns] {
            if weights[s as usize] > 0.0 {
                self.prob[s as usize] = 1.0;
            } else {
                self.alias[s as usize] = last_positive;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prob.is_empty()
    }

    #[inline]
    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> usize {
        let x = rng.next_u64();
        let j = (((x >> 32) * self.prob.len() as u64) >> 32) as usize;
        let coin = (x & 0xffff_ffff) as f64 * (1.0 / 4_294_967_296.0);
        if coin < self.prob[j] {
            j
        } else {
            self.alias[j] as usize
        }
    }

    /// Probability of each index implied by the table.
    pub fn implied_probabilities(&self) -> Vec<f64> {
        let m = self.prob.len() as f64;
        let mut out: Vec<f64> = self.prob.iter().map(|p| p / m).collect();
        for (k, &a) in self.alias.iter().enumerate() {
            out[a as usize] += (1.0 - self.prob[k]) / m;
        }
        out
    }
}

/// Multinomial resampling: `count` zero-based indices drawn by inverse CDF.
pub fn categorical_resample<R: Rng + ?Sized>(
    weights: &[f64],
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let table = CategoricalTable::new(weights)?;
    Ok((0..count).map(|_| table.sample(rng)).collect())
}
