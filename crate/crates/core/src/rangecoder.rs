//! Byte-oriented range coder over 16-bit cumulative frequency tables.
//!
//! State is a 64-bit `low` with a carry byte cache and a 32-bit `range`,
//! renormalised a byte at a time once `range` drops below 2^24. All state
//! arithmetic is integer, so the byte stream is platform independent.

use crate::Error;

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;

/// Cumulative frequencies `cum[0] = 0 < cum[1] < ... < cum[n] = 2^16`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodedCdf {
    cum: Vec<u32>,
}

impl CodedCdf {
    pub fn from_frequencies(freqs: &[u32]) -> Result<Self, Error> {
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        cum.push(0u32);
        for &f in freqs {
            if f == 0 {
                return Err(Error::Invalid("zero frequency in coded CDF".into()));
            }
            cum.push(cum.last().copied().unwrap_or(0) + f);
        }
        if cum.last() != Some(&PROB_TOTAL) {
            return Err(Error::Invalid(format!(
                "frequencies sum to {}, need {PROB_TOTAL}",
                cum.last().copied().unwrap_or(0)
            )));
        }
        Ok(Self { cum })
    }

    pub fn symbols(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cum
    }

    pub fn frequency(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    /// Symbol whose interval contains `value`.
    fn find(&self, value: u32) -> usize {
        // last index with cum[i] <= value
        self.cum.partition_point(|&c| c <= value) - 1
    }
}

/// Integer frequencies summing to 2^16, each at least one.
///
/// Largest-remainder rounding keeps every `freq/2^16` within `2^-16` of its
/// input when all inputs are at least `2^-16`; the fix-up for zero counts
/// only triggers below that.
pub fn quantize_cdf(probs: &[f64]) -> Result<CodedCdf, Error> {
    let n = probs.len();
    if n == 0 || n > PROB_TOTAL as usize {
        return Err(Error::Invalid(format!("cannot code an alphabet of {n} symbols")));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Invalid("probabilities must be finite and non-negative".into()));
    }
    let total: f64 = probs.iter().sum();
    if total <= 0.0 {
        return Err(Error::Invalid("probabilities sum to zero".into()));
    }
    let scaled: Vec<f64> = probs.iter().map(|p| p / total * PROB_TOTAL as f64).collect();
    let mut freqs: Vec<u32> = scaled.iter().map(|s| s.floor() as u32).collect();
    let assigned: u64 = freqs.iter().map(|&f| f as u64).sum();
    let mut left = PROB_TOTAL as u64 - assigned.min(PROB_TOTAL as u64);
    if left > 0 {
        let mut order: Vec<usize> = (0..n).collect();
        // ties broken by index so the table is deterministic
        order.sort_by(|&a, &b| {
            let (ra, rb) = (scaled[a] - scaled[a].floor(), scaled[b] - scaled[b].floor());
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            freqs[i] += 1;
            left -= 1;
        }
    }
    for i in 0..n {
        if freqs[i] == 0 {
            let donor = (0..n).max_by(|&a, &b| freqs[a].cmp(&freqs[b]).then(b.cmp(&a))).expect("non-empty");
            freqs[donor] -= 1;
            freqs[i] = 1;
        }
    }
    CodedCdf::from_frequencies(&freqs)
}

#[derive(Debug)]
pub struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
    started: bool,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Self { low: 0, range: u32::MAX, cache: 0, pending: 1, out: Vec::new(), started: false }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                // the very first byte is always zero and is not stored
                if self.started {
                    self.out.push(byte.wrapping_add(carry));
                }
                self.started = true;
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn encode_range(&mut self, start: u32, freq: u32) {
        let r = self.range >> PROB_BITS;
        self.low += r as u64 * start as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode(&mut self, symbol: usize, cdf: &CodedCdf) {
        debug_assert!(symbol < cdf.symbols());
        self.encode_range(cdf.cum[symbol], cdf.frequency(symbol));
    }

    /// Sixteen raw bits at uniform probability.
    pub fn encode_raw16(&mut self, v: u16) {
        self.encode_range(v as u32, 1);
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct Decoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self, Error> {
        let mut d = Self { code: 0, range: u32::MAX, input, pos: 0 };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8, Error> {
        let b = *self.input.get(self.pos).ok_or(Error::Truncated)?;
        self.pos += 1;
        Ok(b)
    }

    fn consume(&mut self, r: u32, start: u32, freq: u32) -> Result<(), Error> {
        self.code -= r * start;
        self.range = r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode(&mut self, cdf: &CodedCdf) -> Result<usize, Error> {
        let r = self.range >> PROB_BITS;
        let value = self.code / r;
        if value >= PROB_TOTAL {
            return Err(Error::Corrupt("range decoder state out of bounds".into()));
        }
        let s = cdf.find(value);
        self.consume(r, cdf.cum[s], cdf.frequency(s))?;
        Ok(s)
    }

    pub fn decode_raw16(&mut self) -> Result<u16, Error> {
        let r = self.range >> PROB_BITS;
        let value = self.code / r;
        if value >= PROB_TOTAL {
            return Err(Error::Corrupt("range decoder state out of bounds".into()));
        }
        self.consume(r, value, 1)?;
        Ok(value as u16)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}
