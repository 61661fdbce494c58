//! Keyed random substreams.
//!
//! Every random draw in the generator comes from a ChaCha stream whose 256-bit
//! key is the tuple `(seed, sample index, stage/channel, attempt)`. A sample is
//! therefore a pure function of its key, whatever worker produces it and in
//! whatever order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Random stream owned by exactly one worker.
pub type RandomStream = ChaCha8Rng;

/// Pipeline stages that draw random numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum Stage {
    Selection = 1,
    Affine = 2,
    Svf = 3,
    GmmParams = 4,
    GmmVoxels = 5,
    Gamma = 6,
    Motion = 7,
    Bias = 8,
    Slice = 9,
    RegistrationError = 10,
    Crop = 11,
    Phase = 12,
    Init = 13,
    Misc = 14,
}

/// Key identifying one substream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub sample: u64,
    pub stage: Stage,
    pub channel: u32,
    pub attempt: u64,
}

impl StreamKey {
    pub fn new(seed: u64, sample: u64, stage: Stage, channel: u32) -> Self {
        StreamKey { seed, sample, stage, channel, attempt: 0 }
    }

    pub fn with_attempt(mut self, attempt: u64) -> Self {
        self.attempt = attempt;
        self
    }

    pub fn stream(&self) -> RandomStream {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.sample.to_le_bytes());
        let tag = ((self.stage as u64) << 32) | self.channel as u64;
        key[16..24].copy_from_slice(&tag.to_le_bytes());
        key[24..32].copy_from_slice(&self.attempt.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }
}

/// Shorthand for `StreamKey::new(..).stream()`.
pub fn substream(seed: u64, sample: u64, stage: Stage, channel: u32) -> RandomStream {
    StreamKey::new(seed, sample, stage, channel).stream()
}

/// U(a, b); returns `a` when the range is degenerate.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    let u: f64 = rng.random();
    a + (b - a) * u
}

/// N(mean, sd²); `sd == 0` yields `mean` exactly without consuming entropy.
pub fn normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return mean;
    }
    let z: f64 = rng.sample(StandardNormal);
    mean + sd * z
}
