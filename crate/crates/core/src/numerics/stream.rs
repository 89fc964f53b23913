use core::f64::consts::TAU;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::Vector;

/// Words of ChaCha output reserved for one counter slot (two `u64`s).
const WORDS_PER_SLOT: u128 = 4;

/// Position in a counter-based random sequence.
///
/// The value drawn at a slot is a pure function of `(seed, stream_id,
/// counter)`: the seed keys a ChaCha8 generator, the stream id selects its
/// nonce and the counter selects the word position. Copies are snapshots, so
/// a sample can be replayed by keeping a copy of the stream before drawing.
///
/// One slot yields one scalar draw; vector draws consume one slot per entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RandomStream {
    seed: u64,
    stream_id: u64,
    counter: u64,
}

impl RandomStream {
    pub const fn new(seed: u64, stream_id: u64) -> Self {
        Self {
            seed,
            stream_id,
            counter: 0,
        }
    }

    pub const fn seed(&self) -> u64 {
        self.seed
    }

    pub const fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub const fn counter(&self) -> u64 {
        self.counter
    }

    /// The same stream positioned at `counter`.
    pub const fn at(self, counter: u64) -> Self {
        Self { counter, ..self }
    }

    /// The same stream moved forward by `slots`.
    pub const fn advanced(self, slots: u64) -> Self {
        Self {
            counter: self.counter + slots,
            ..self
        }
    }

    /// Reserves `slots` consecutive slots: returns a snapshot at the current
    /// position and moves `self` past the reserved block.
    pub fn take(&mut self, slots: u64) -> RandomStream {
        let snapshot = *self;
        self.counter += slots;
        snapshot
    }

    fn generator(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng.set_word_pos(u128::from(self.counter) * WORDS_PER_SLOT);
        rng
    }

    /// Uniform draw in `[0, 1)`; consumes one slot.
    pub fn next_uniform(&mut self) -> f64 {
        let mut rng = self.generator();
        self.counter += 1;
        unit_interval(rng.next_u64())
    }

    /// Uniform index in `0..n`; consumes one slot. `n` must be positive.
    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_index on an empty range");
        let mut rng = self.generator();
        self.counter += 1;
        ((u128::from(rng.next_u64()) * n as u128) >> 64) as usize
    }

    /// One standard normal draw; consumes one slot.
    pub fn next_gaussian(&mut self) -> f64 {
        let mut rng = self.generator();
        self.counter += 1;
        box_muller(&mut rng)
    }

    /// `dim` i.i.d. zero-mean normal entries with standard deviation `std`.
    /// Consumes `dim` slots whatever the value of `std`.
    pub fn gaussian_vec(&mut self, dim: usize, std: f64) -> Vector {
        let start = self.take(dim as u64);
        if std == 0.0 {
            return Vector::zeros(dim);
        }
        let mut rng = start.generator();
        Vector::from_fn(dim, |_, _| std * box_muller(&mut rng))
    }
}

fn unit_interval(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

// Consumes exactly two u64 words, i.e. one slot.
fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = 1.0 - unit_interval(rng.next_u64());
    let u2 = unit_interval(rng.next_u64());
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(TAU * u2)
}
