//! Counter-based random stream.
//!
//! A SplitMix64 walk over a 64-bit state: every draw advances the counter by a
//! fixed odd constant and mixes it, so the integer stream is reproducible at
//! the bit level across runs and platforms for a given seed. Streams can be
//! split (`split`, `derive`) into statistically independent children, which is
//! how modules and deep copies get their own draw sequences.

/// Seeded generator state. Cloning snapshots the stream position.
#[derive(Clone, Debug)]
pub struct RngState {
    state: u64,
}

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { state: seed }
    }

    /// Next 64 bits of the stream.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix(self.state)
    }

    /// Uniform draw in (0, 1]; never zero, so `ln` is always finite.
    pub fn next_f64(&mut self) -> f64 {
        (((self.next_u64() >> 11) + 1) as f64) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller on the counter stream. Each draw
    /// consumes exactly two counter steps; no state is cached, so a stream's
    /// draw sequence is a pure function of its position.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Child stream; advances this stream by one draw.
    pub fn split(&mut self) -> RngState {
        RngState {
            state: mix(self.next_u64() ^ 0x6A09_E667_F3BC_C909),
        }
    }

    /// Child stream keyed by `tag` without advancing this stream. Equal tags
    /// give equal children, so derived streams are stable across calls.
    pub fn derive(&self, tag: u64) -> RngState {
        RngState {
            state: mix(self.state ^ mix(tag ^ 0x6A09_E667_F3BC_C909)),
        }
    }

    pub(crate) fn pos(&self) -> u64 {
        self.state
    }
}

/// FNV-1a over raw bytes; used for stable stream tags and prior fingerprints.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01B3);
    }
    h
}
