//! Seed derivation.
//!
//! Every random stream in a run is derived from the master seed by folding the
//! tuple `(master, scheme, replicate, client, round, purpose)` through
//! SplitMix64:
//!
//! ```text
//! h = mix(master)
//! for v in [scheme, replicate, client, round, purpose]:
//!     h = mix(h ^ mix(v))
//! ```
//!
//! where `mix` is the SplitMix64 finalizer applied to `x + 0x9E3779B97F4A7C15`.
//! The resulting `u64` seeds a `ChaCha8Rng`. Streams are keyed by client id
//! and round, never by scheduling order, so results do not depend on the
//! number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Placeholder for tuple slots that do not apply (server-side streams, or
/// streams shared by every scheme in a sweep).
pub const SHARED: u64 = u64::MAX;

/// What a stream is used for. The discriminant is part of the hash input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Data = 1,
    Init = 2,
    Shard = 3,
    Shuffle = 4,
    Channel = 5,
    Pilot = 6,
    UplinkNoise = 7,
    DownlinkNoise = 8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedKey {
    pub master: u64,
    pub scheme: u64,
    pub replicate: u64,
    pub client: u64,
    pub round: u64,
    pub purpose: Purpose,
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedKey {
    pub fn seed(&self) -> u64 {
        [
            self.scheme,
            self.replicate,
            self.client,
            self.round,
            self.purpose as u64,
        ]
        .iter()
        .fold(splitmix(self.master), |h, &v| splitmix(h ^ splitmix(v)))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed())
    }
}

/// Seeds for one federation run (one scheme × replicate × snr cell).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub master: u64,
    pub scheme: u64,
    pub replicate: u64,
}

impl RunSeeds {
    pub fn new(master: u64, scheme: u64, replicate: u64) -> Self {
        Self {
            master,
            scheme,
            replicate,
        }
    }

    pub fn key(&self, client: u64, round: u64, purpose: Purpose) -> SeedKey {
        SeedKey {
            master: self.master,
            scheme: self.scheme,
            replicate: self.replicate,
            client,
            round,
            purpose,
        }
    }

    pub fn rng(&self, client: u64, round: u64, purpose: Purpose) -> ChaCha8Rng {
        self.key(client, round, purpose).rng()
    }
}
