use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Float, Tensor};

/// Supplies the standard-normal draws used for reparameterized sampling.
pub trait NoiseSource<T: Float> {
    /// Draws for a tensor whose leading dimension is the batch.
    fn standard_normal(&mut self, shape: &[usize]) -> Tensor<T>;
}

/// All-zero noise: every latent is set to its mean.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNoise;

impl<T: Float> NoiseSource<T> for ZeroNoise {
    fn standard_normal(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::zeros(shape)
    }
}

/// One independent stream per batch item, so a sample's draws do not depend
/// on which other samples share its batch.
#[derive(Clone, Debug)]
pub struct SeededNoise {
    streams: Vec<ChaCha8Rng>,
}

impl SeededNoise {
    /// Item `i` draws from the stream seeded by `seeds[i]`.
    pub fn per_sample(seeds: &[u64]) -> Self {
        Self { streams: seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect() }
    }

    /// `n` streams of a single seed.
    pub fn batch(seed: u64, n: usize) -> Self {
        let streams = (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64 + 1);
                rng
            })
            .collect();
        Self { streams }
    }
}

impl<T: Float> NoiseSource<T> for SeededNoise {
    fn standard_normal(&mut self, shape: &[usize]) -> Tensor<T> {
        let n = shape[0];
        assert_eq!(n, self.streams.len(), "noise source built for {} items, asked for {n}", self.streams.len());
        let per: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(n * per);
        for rng in &mut self.streams {
            data.extend((0..per).map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::of(v)
            }));
        }
        Tensor::from_vec(shape, data).expect("noise shape")
    }
}
