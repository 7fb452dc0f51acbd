//! Splittable counter-based random number generation.
//!
//! A [`Rng`] is a 128-bit key plus a draw counter. Output `i` is a pure
//! function of `(key, i)`, and [`Rng::split`] derives a child key from the
//! parent key and a label without touching the parent. Every random stream in
//! a simulation is therefore addressed by its label path from the root seed
//! (`round/7/client/<id>/batches`, ...), which is what makes the sequential
//! and parallel client runners consume identical per-client streams.

use rand::rand_core::impls;
use rand::RngCore;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A fold-in label for [`Rng::split`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label<'a> {
    Str(&'a str),
    Int(u64),
}

impl Label<'_> {
    fn hash(self) -> u64 {
        // FNV-1a with a type tag so that "7" and 7 differ.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        match self {
            Label::Str(s) => {
                feed(b's');
                s.bytes().for_each(&mut feed);
            }
            Label::Int(i) => {
                feed(b'i');
                i.to_le_bytes().into_iter().for_each(&mut feed);
            }
        }
        mix64(h)
    }
}

impl<'a> From<&'a str> for Label<'a> {
    fn from(s: &'a str) -> Self {
        Label::Str(s)
    }
}

impl<'a> From<&'a String> for Label<'a> {
    fn from(s: &'a String) -> Self {
        Label::Str(s)
    }
}

impl From<u64> for Label<'_> {
    fn from(i: u64) -> Self {
        Label::Int(i)
    }
}

impl From<usize> for Label<'_> {
    fn from(i: usize) -> Self {
        Label::Int(i as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rng {
    key: [u64; 2],
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: [mix64(seed ^ 0x5851_f42d_4c95_7f2d), mix64(seed.wrapping_add(GOLDEN))],
            counter: 0,
        }
    }

    /// Child generator for `label`. Depends only on this generator's key,
    /// not on how many values have been drawn from it.
    pub fn split<'a>(&self, label: impl Into<Label<'a>>) -> Rng {
        let h = label.into().hash();
        let k0 = mix64(self.key[0] ^ h);
        let k1 = mix64(self.key[1].wrapping_add(mix64(h ^ k0)).rotate_left(17));
        Rng {
            key: [k0, k1],
            counter: 0,
        }
    }

    pub fn key(&self) -> [u64; 2] {
        self.key
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter = self.counter.wrapping_add(1);
        mix64(mix64(self.key[0].wrapping_add(c.wrapping_mul(GOLDEN))) ^ self.key[1])
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        impls::fill_bytes_via_next(self, dst)
    }
}
