//! Named random streams.
//!
//! Every draw is keyed by (run seed, purpose, donor, entity), so a given
//! center deciding on a given donor sees the same uniform regardless of
//! what happened earlier in the run. Two policies simulated with the same
//! seed therefore share acceptance, split and rescue randomness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    CenterWillingness,
    PatientAcceptance,
    CenterOffer,
    Split,
    Rescue,
    PostTransplant,
    Imputation,
}

impl Purpose {
    fn tag(self) -> &'static str {
        match self {
            Purpose::CenterWillingness => "center-willingness",
            Purpose::PatientAcceptance => "patient-acceptance",
            Purpose::CenterOffer => "center-offer",
            Purpose::Split => "split",
            Purpose::Rescue => "rescue",
            Purpose::PostTransplant => "post-transplant",
            Purpose::Imputation => "imputation",
        }
    }
}

/// Derives a 64-bit seed from a master seed and a replication index.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"replication");
    h.update(master.to_le_bytes());
    h.update(index.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

/// 64-bit FNV-1a, used to turn entity ids into ChaCha stream numbers.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStreams {
    seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        RngStreams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Key material shared by all draws for one (purpose, donor) pair.
    pub fn for_donor(&self, purpose: Purpose, donor_id: &str) -> DonorStream {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(purpose.tag().as_bytes());
        h.update([0u8]);
        h.update(donor_id.as_bytes());
        DonorStream {
            key: h.finalize().into(),
        }
    }

    /// One uniform on the open interval (0, 1).
    pub fn uniform(&self, purpose: Purpose, donor_id: &str, entity: &str) -> f64 {
        self.for_donor(purpose, donor_id).uniform(entity)
    }
}

#[derive(Debug, Clone)]
pub struct DonorStream {
    key: [u8; 32],
}

impl DonorStream {
    pub fn rng(&self, entity: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(fnv1a(entity.as_bytes()));
        rng
    }

    pub fn uniform(&self, entity: &str) -> f64 {
        open_uniform(&mut self.rng(entity))
    }
}

/// Uniform on (0, 1), never returning either endpoint.
pub fn open_uniform(rng: &mut impl Rng) -> f64 {
    let bits: u64 = rng.random::<u64>() >> 11;
    (bits as f64 + 0.5) / (1u64 << 53) as f64
}
