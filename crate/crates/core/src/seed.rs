//! Seed derivation so that every (run, round, client) stream is independent
//! of scheduling order.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `parts` into `master`, one splitmix round per part.
pub fn derive(master: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix(master), |h, &p| splitmix(h ^ splitmix(p)))
}

/// Stream tags kept apart so that, e.g., client training and replay synthesis
/// never share a seed.
pub mod stream {
    pub const CLIENT: u64 = 1;
    pub const SYNTH: u64 = 2;
    pub const CONSOLIDATE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SHARDS: u64 = 5;
    pub const ORDER: u64 = 6;
    pub const DATA: u64 = 7;
}
