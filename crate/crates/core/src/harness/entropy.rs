//! Rate-capped random-number service.

use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::time::{SimDuration, SimTime};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EntropyError {
    #[error("requested {requested} bytes, allowed 1..={max}")]
    Size { requested: usize, max: usize },
}

#[derive(Debug)]
struct State {
    rng: ChaCha20Rng,
    /// When the generator finishes the work already queued.
    free_at: SimTime,
    served_bytes: u64,
}

/// Serves seeded CSPRNG output no faster than `rate_bps`. Requests beyond
/// the rate queue behind each other.
#[derive(Debug)]
pub struct EntropyService {
    rate_bps: f64,
    max_bytes: usize,
    state: Mutex<State>,
}

#[derive(Debug, Clone)]
pub struct Entropy {
    pub bytes: Vec<u8>,
    /// Simulated instant the bytes are ready.
    pub ready_at: SimTime,
}

impl EntropyService {
    pub const DEFAULT_RATE_BPS: f64 = 4e9;

    pub fn new(seed: u64, rate_bps: f64, max_bytes: usize) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(0x5152_4e47);
        Self { rate_bps, max_bytes, state: Mutex::new(State { rng, free_at: SimTime(0), served_bytes: 0 }) }
    }

    pub fn max_bytes(&self) -> usize {
        self.max_bytes
    }

    pub fn request(&self, n: usize, now: SimTime) -> Result<Entropy, EntropyError> {
        if n == 0 || n > self.max_bytes {
            return Err(EntropyError::Size { requested: n, max: self.max_bytes });
        }
        let mut s = self.state.lock();
        let mut bytes = vec![0u8; n];
        s.rng.fill_bytes(&mut bytes);
        // Sub-microsecond work accumulates exactly in bits, rounded up once.
        let busy = SimDuration(((n as f64 * 8.0 / self.rate_bps) * 1e6).ceil() as u64);
        let start = s.free_at.max(now);
        s.free_at = start + busy;
        s.served_bytes += n as u64;
        Ok(Entropy { bytes, ready_at: s.free_at })
    }

    pub fn served_bytes(&self) -> u64 {
        self.state.lock().served_bytes
    }
}
