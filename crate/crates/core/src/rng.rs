//! Seeded random sub-streams.
//!
//! One master seed drives everything. Each consumer derives an independent
//! ChaCha stream from `(purpose, index)`, so the training stream, model
//! initialization and the evaluation task set never share draws and any
//! evaluation task can be regenerated on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type Rng = ChaCha12Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Init = 1,
    Train = 2,
    Eval = 3,
    Bench = 4,
    Test = 5,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Streams {
    master: u64,
}

impl Streams {
    pub fn new(master: u64) -> Self {
        Streams { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Stream for item `index` of `purpose`. Indices must stay below 2^56.
    pub fn stream(&self, purpose: Purpose, index: u64) -> Rng {
        debug_assert!(index < 1 << 56);
        let mut rng = Rng::seed_from_u64(self.master);
        rng.set_stream(((purpose as u64) << 56) | index);
        rng
    }
}
