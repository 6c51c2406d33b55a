//! Counter-based Gaussian streams.
//!
//! Every standard normal used by the simulation is a pure function of
//! `(seed, replication, domain, particle, step, axis)`, so results do not
//! depend on how replications or particles are scheduled across threads.
//! The block cipher is Philox4x32-10; pairs of uniforms are mapped to pairs
//! of normals with Box–Muller.

use serde::{Deserialize, Serialize};

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline(always)]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = (a as u64) * (b as u64);
    ((p >> 32) as u32, p as u32)
}

/// Philox4x32 with 10 rounds.
#[inline]
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, c[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

/// Uniform in the open interval (0, 1) with 53 random bits.
#[inline(always)]
fn open_unit(hi: u32, lo: u32) -> f64 {
    let bits = ((hi as u64) << 21) ^ ((lo as u64) >> 11);
    (bits as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Source of standard normal draws for the Euler–Maruyama scheme.
pub trait NoiseSource: Sync {
    /// Fill `out` (length d) with the standard normals for `particle` at `step`.
    fn standard_normals(&self, step: usize, particle: usize, out: &mut [f64]);

    /// Fill `out` (`N × d`, row-major) with every particle's normals at
    /// `step`; equal to calling [`NoiseSource::standard_normals`] per row.
    fn fill_step(&self, step: usize, dim: usize, out: &mut [f64]) {
        for (i, row) in out.chunks_exact_mut(dim).enumerate() {
            self.standard_normals(step, i, row);
        }
    }
}

/// What a stream is used for. Different domains never share counters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum StreamDomain {
    Brownian = 0,
    Initial = 1,
    Probe = 2,
}

/// Master seed. Streams are derived per replication and domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSpec {
    pub seed: u64,
}

impl RngSpec {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn stream(&self, replication: u32, domain: StreamDomain) -> CounterRng {
        CounterRng {
            key: [self.seed as u32, (self.seed >> 32) as u32],
            replication,
            domain,
        }
    }

    pub fn brownian(&self, replication: u32) -> CounterRng {
        self.stream(replication, StreamDomain::Brownian)
    }

    /// A seed whose streams are disjoint from this one (distinct cipher key).
    pub fn derive(&self, tag: u64) -> RngSpec {
        RngSpec::new(splitmix64(self.seed ^ splitmix64(tag)))
    }
}

/// The finaliser of SplitMix64; used only to derive keys.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One (replication, domain) stream.
///
/// Normal number `j = particle·d + axis` at `step` is component `j mod 2` of
/// the Box–Muller pair drawn from counter
/// `[j/2, step, replication, domain << 24]`, so distinct draws map to
/// distinct counters under the same key and consecutive axes and particles
/// share pairs without waste.
#[derive(Clone, Copy, Debug)]
pub struct CounterRng {
    key: [u32; 2],
    replication: u32,
    domain: StreamDomain,
}

/// Flag in the last counter word separating uniforms from normal pairs.
const UNIFORM_FLAG: u32 = 1 << 23;

impl CounterRng {
    /// Box–Muller pair number `block` at `step`.
    #[inline]
    pub fn normal_pair(&self, block: usize, step: usize) -> (f64, f64) {
        debug_assert!(block >> 32 == 0);
        let ctr = [block as u32, step as u32, self.replication, (self.domain as u32) << 24];
        let r = philox4x32_10(ctr, self.key);
        let u1 = open_unit(r[0], r[1]);
        let u2 = open_unit(r[2], r[3]);
        let radius = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        (radius * c, radius * s)
    }

    /// Uniform on (0,1) for auxiliary randomness (probe fields, resampling).
    pub fn uniform(&self, index: usize, step: usize) -> f64 {
        let r = philox4x32_10(
            [
                index as u32,
                step as u32,
                self.replication,
                ((self.domain as u32) << 24) | UNIFORM_FLAG,
            ],
            self.key,
        );
        open_unit(r[0], r[1])
    }

    pub fn replication(&self) -> u32 {
        self.replication
    }
}

impl NoiseSource for CounterRng {
    #[inline]
    fn standard_normals(&self, step: usize, particle: usize, out: &mut [f64]) {
        let j0 = particle * out.len();
        let mut pair = (0.0, 0.0);
        for (a, o) in out.iter_mut().enumerate() {
            let j = j0 + a;
            if a == 0 || j % 2 == 0 {
                pair = self.normal_pair(j / 2, step);
            }
            *o = if j % 2 == 0 { pair.0 } else { pair.1 };
        }
    }

    fn fill_step(&self, step: usize, _dim: usize, out: &mut [f64]) {
        let half = out.len() / 2;
        let mut pairs = out.chunks_exact_mut(2);
        for (b, p) in pairs.by_ref().enumerate() {
            let (z0, z1) = self.normal_pair(b, step);
            p[0] = z0;
            p[1] = z1;
        }
        if let [last] = pairs.into_remainder() {
            *last = self.normal_pair(half, step).0;
        }
    }
}

/// Noise for a grid coarsened by `factor`: each coarse normal is the
/// normalised sum of `factor` consecutive fine normals, so the coarse
/// Brownian increments are exact sums of the fine ones.
pub struct CoarsenedNoise<'a, N: NoiseSource + ?Sized> {
    pub fine: &'a N,
    pub factor: usize,
}

impl<N: NoiseSource + ?Sized> NoiseSource for CoarsenedNoise<'_, N> {
    fn standard_normals(&self, step: usize, particle: usize, out: &mut [f64]) {
        let mut stack = [0.0f64; 8];
        let mut heap;
        let buf: &mut [f64] = if out.len() <= stack.len() {
            &mut stack[..out.len()]
        } else {
            heap = vec![0.0; out.len()];
            &mut heap
        };
        out.fill(0.0);
        for sub in 0..self.factor {
            self.fine.standard_normals(step * self.factor + sub, particle, buf);
            for (o, b) in out.iter_mut().zip(buf.iter()) {
                *o += b;
            }
        }
        let scale = 1.0 / (self.factor as f64).sqrt();
        out.iter_mut().for_each(|o| *o *= scale);
    }
}
