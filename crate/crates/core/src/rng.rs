//! SplitMix64 streams, one per named purpose.
//!
//! Every random draw in the engine comes from a stream seeded as
//! `seed ^ purpose_tag`, optionally keyed further by indices such as
//! (timestep, layer, image) so that parallel work draws from independent,
//! order-free streams.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Purpose tags XOR-ed into the run seed.
pub mod tags {
    pub const WEIGHTS: u64 = 0x5745_4947_4854_5331;
    pub const SCENE: u64 = 0x5343_454E_4553_5331;
    pub const PROMPT: u64 = 0x5052_4F4D_5054_5331;
    pub const ATTN_DROPOUT: u64 = 0x4154_544E_4452_5031;
    pub const RFH_DROPOUT: u64 = 0x5246_4844_5250_5331;
    pub const MASK_DROPOUT: u64 = 0x4D41_534B_4452_5031;
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Stream for `purpose` under the run seed.
    pub fn for_purpose(seed: u64, purpose: u64) -> Self {
        Self::new(seed ^ purpose)
    }

    /// Stream for `purpose` further keyed by a tuple of indices.
    pub fn keyed(seed: u64, purpose: u64, key: &[u64]) -> Self {
        let mut s = seed ^ purpose;
        for &k in key {
            s = mix64(s ^ mix64(k.wrapping_add(GOLDEN_GAMMA)));
        }
        Self::new(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[lo, hi]` (inclusive).
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        let span = (hi - lo + 1) as u64;
        lo + (self.next_u64() % span) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }
}
