use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a random stream is used for; part of the stream key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Sampling = 1,
    LocalTraining = 2,
    PersonalTraining = 3,
    Init = 4,
    /// Per-client synthetic data generation.
    Data = 5,
    /// Train/test split of a client's samples.
    Split = 6,
    /// Isolated-training baselines.
    Baseline = 7,
}

/// Independent stream keyed by `(seed, round, client, purpose)`. The key is
/// laid out directly in the 32-byte ChaCha seed, so distinct keys never
/// share a stream.
pub fn stream(seed: u64, round: usize, client: Option<usize>, purpose: Purpose) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(round as u64).to_le_bytes());
    let client_word = client.map_or(0, |c| c as u64 + 1);
    key[16..24].copy_from_slice(&client_word.to_le_bytes());
    key[24..].copy_from_slice(&(purpose as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
