//! Counter-based deterministic PRNG.
//!
//! Every stochastic operation in the crate draws from an explicitly named
//! [`Stream`]. A stream is a pure function of `(seed, label, counter)`:
//! the n-th value never depends on how many other streams exist or in
//! which order they are consumed, so corpus generation, initialization,
//! and dropout are all independently reproducible. All floating-point
//! transforms go through `libm`, so the produced values are bit-identical
//! across platforms.

/// `splitmix64` finalizer: a bijective avalanche mix on 64 bits.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes, used to turn stream names into keys.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// A named, seedable, counter-based random stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    /// Stream identified by `(seed, label)`.
    pub fn new(seed: u64, label: &str) -> Stream {
        Stream { key: mix(mix(seed).wrapping_add(fnv1a(label.as_bytes()))), counter: 0 }
    }

    /// Stream identified by `(seed, label, index)`; used for per-utterance
    /// and per-step streams.
    pub fn indexed(seed: u64, label: &str, index: u64) -> Stream {
        let base = Stream::new(seed, label);
        Stream { key: mix(base.key.wrapping_add(mix(index).wrapping_add(GOLDEN))), counter: 0 }
    }

    /// Child stream derived from this stream's key and a sub-label.
    pub fn derive(&self, label: &str) -> Stream {
        Stream { key: mix(self.key.wrapping_add(fnv1a(label.as_bytes()))), counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter = self.counter.wrapping_add(1);
        mix(self.key ^ c.wrapping_mul(GOLDEN).wrapping_add(GOLDEN))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box–Muller (uses `libm`, platform-independent).
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
    }

    /// Uniform integer in `[0, n)`. The modulo bias is below 2^-53 for the
    /// desk-scale `n` used here and is accepted for simplicity.
    pub fn pick(&mut self, n: usize) -> usize {
        assert!(n > 0, "pick from empty range");
        (self.next_u64() % n as u64) as usize
    }

    /// Bernoulli draw with success probability `p`.
    pub fn coin(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }
}
