//! Counter-addressed Gaussian noise.
//!
//! Normals for `(path, step)` come from a ChaCha8 stream selected by the path
//! index, at a word offset fixed by the step index, so any worker can draw
//! any block and the sample never depends on scheduling.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::{lit, Scalar};

pub trait NoiseSource: Send + Sync {
    /// Standard normals for one path, steps `0..steps`, `dim` per step.
    fn path_normals(&self, path: usize, steps: usize, dim: usize) -> Vec<f64>;

    /// Standard normals for a single `(path, step)` block.
    fn normals(&self, path: usize, step: usize, dim: usize) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterNoise {
    seed: u64,
}

impl CounterNoise {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn stream(&self, path: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(path as u64);
        rng
    }
}

/// 32-bit words consumed per step: one pair of `u64`s per pair of normals.
fn words_per_step(dim: usize) -> u128 {
    4 * dim.div_ceil(2) as u128
}

fn fill_normals(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let scale = 1.0 / (1u64 << 53) as f64;
    for pair in out.chunks_mut(2) {
        let u1 = ((rng.next_u64() >> 11) + 1) as f64 * scale;
        let u2 = (rng.next_u64() >> 11) as f64 * scale;
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        pair[0] = r * c;
        if pair.len() > 1 {
            pair[1] = r * s;
        }
    }
}

impl NoiseSource for CounterNoise {
    fn path_normals(&self, path: usize, steps: usize, dim: usize) -> Vec<f64> {
        let mut rng = self.stream(path);
        let mut out = vec![0.0; steps * dim];
        for block in out.chunks_mut(dim) {
            fill_normals(&mut rng, block);
        }
        out
    }

    fn normals(&self, path: usize, step: usize, dim: usize) -> Vec<f64> {
        let mut rng = self.stream(path);
        rng.set_word_pos(step as u128 * words_per_step(dim));
        let mut out = vec![0.0; dim];
        fill_normals(&mut rng, &mut out);
        out
    }
}

/// Brownian increments `sqrt(dt_j) * N(0, I)` of one path on `dts`.
pub fn brownian_increments<S: Scalar, N: NoiseSource + ?Sized>(
    noise: &N,
    dts: &[S],
    path: usize,
    dim: usize,
) -> Vec<S> {
    let z = noise.path_normals(path, dts.len(), dim);
    z.chunks(dim)
        .zip(dts)
        .flat_map(|(block, dt)| {
            let s = dt.sqrt();
            block.iter().map(move |v| lit::<S>(*v) * s)
        })
        .collect()
}

/// Sums consecutive groups of `factor` increments: the same Brownian path on
/// a grid `factor` times coarser.
pub fn aggregate_increments<S: Scalar>(fine: &[S], dim: usize, factor: usize) -> Vec<S> {
    assert!(factor >= 1 && fine.len().is_multiple_of(dim * factor));
    fine.chunks(dim * factor)
        .flat_map(|group| (0..dim).map(move |i| group.iter().skip(i).step_by(dim).fold(S::zero(), |s, x| s + *x)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_access_matches_sequential() {
        let n = CounterNoise::new(17);
        for dim in [1, 2, 3] {
            let seq = n.path_normals(5, 40, dim);
            for step in [0, 1, 7, 39] {
                assert_eq!(n.normals(5, step, dim), seq[step * dim..(step + 1) * dim]);
            }
        }
    }

    #[test]
    fn paths_and_seeds_differ() {
        let a = CounterNoise::new(1).path_normals(0, 4, 1);
        let b = CounterNoise::new(1).path_normals(1, 4, 1);
        let c = CounterNoise::new(2).path_normals(0, 4, 1);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn normal_moments() {
        let n = CounterNoise::new(3);
        let z: Vec<f64> = (0..200).flat_map(|p| n.path_normals(p, 500, 1)).collect();
        let m = z.iter().sum::<f64>() / z.len() as f64;
        let v = z.iter().map(|x| (x - m).powi(2)).sum::<f64>() / z.len() as f64;
        let k = z.iter().map(|x| x.powi(4)).sum::<f64>() / z.len() as f64;
        let se = 1.0 / (z.len() as f64).sqrt();
        assert!(m.abs() < 4.0 * se);
        assert!((v - 1.0).abs() < 4.0 * 2f64.sqrt() * se);
        assert!((k - 3.0).abs() < 4.0 * 96f64.sqrt() * se);
    }

    #[test]
    fn aggregation_preserves_endpoint() {
        let n = CounterNoise::new(9);
        let dts = vec![1.0 / 64.0; 64];
        let fine = brownian_increments(&n, &dts, 0, 2);
        let coarse = aggregate_increments(&fine, 2, 8);
        assert_eq!(coarse.len(), 16);
        for i in 0..2 {
            let a: f64 = fine.iter().skip(i).step_by(2).sum();
            let b: f64 = coarse.iter().skip(i).step_by(2).sum();
            assert!((a - b).abs() < 1e-12);
        }
    }
}
