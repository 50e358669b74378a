//! Reproducible, independent random streams.
//!
//! A stream is a ChaCha8 generator keyed by the global seed, with the stream
//! id selecting ChaCha's 64-bit stream (nonce). Distinct ids give disjoint
//! keystreams under the same key; the word position is the counter.
//!
//! A coupled stream serves normals and uniforms from separate keystreams and
//! can coarsen its normals: with factor `k`, each draw is the normalized sum
//! of the matching components of `k` consecutive fine steps. Euler paths at
//! `dt` and `dt / k` driven by coupled streams with the same seed and id then
//! share their Brownian increments.

use std::collections::VecDeque;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const AUX_KEY: u64 = 0x5851_f42d_4c95_7f2d;

#[derive(Debug, Clone)]
struct Coupling {
    aux: ChaCha8Rng,
    factor: usize,
    dim: usize,
    buffer: VecDeque<f64>,
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    id: u64,
    inner: ChaCha8Rng,
    coupling: Option<Box<Coupling>>,
}

impl RngStream {
    pub fn new(seed: u64, id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(id);
        Self { seed, id, inner, coupling: None }
    }

    /// A coupled stream whose normals are coarsened by `factor` for
    /// `dim`-component steps.
    pub fn coupled(seed: u64, id: u64, factor: usize, dim: usize) -> Self {
        let mut s = Self::new(seed, id);
        let mut aux = ChaCha8Rng::seed_from_u64(seed ^ AUX_KEY);
        aux.set_stream(id);
        s.coupling = Some(Box::new(Coupling { aux, factor: factor.max(1), dim: dim.max(1), buffer: VecDeque::new() }));
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// A child stream for sub-tasks: same seed, id mixed with `child`, same
    /// coupling mode.
    pub fn derive(&self, child: u64) -> Self {
        let id = split_mix(self.id ^ split_mix(child.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        match &self.coupling {
            None => Self::new(self.seed, id),
            Some(c) => Self::coupled(self.seed, id, c.factor, c.dim),
        }
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        let Some(c) = self.coupling.as_deref_mut() else {
            return self.inner.sample(StandardNormal);
        };
        if c.factor == 1 {
            return self.inner.sample(StandardNormal);
        }
        if c.buffer.is_empty() {
            let fine: Vec<f64> = (0..c.factor * c.dim).map(|_| self.inner.sample(StandardNormal)).collect();
            let norm = (c.factor as f64).sqrt();
            for k in 0..c.dim {
                c.buffer.push_back((0..c.factor).map(|s| fine[s * c.dim + k]).sum::<f64>() / norm);
            }
        }
        c.buffer.pop_front().expect("buffer refilled")
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        match self.coupling.as_deref_mut() {
            Some(c) => c.aux.random::<f64>(),
            None => self.inner.random::<f64>(),
        }
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: u64) -> u64 {
        match self.coupling.as_deref_mut() {
            Some(c) => c.aux.random_range(0..n),
            None => self.inner.random_range(0..n),
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn split_mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
