//! Fixtures shared by the benchmarks.

use vaex_core::data::ImageSet;
use vaex_core::probcache::{ProbCache, ProbCacheEntry};
use vaex_core::Tensor;

/// `n` deterministic pseudo-images of `size`×`size` with alternating labels.
pub fn fixture(n: usize, size: usize) -> (ImageSet, ProbCache) {
    let per = 3 * size * size;
    let data: Vec<f32> = (0..n * per).map(|i| ((i.wrapping_mul(2_654_435_761) >> 7) % 1000) as f32 / 1000.0).collect();
    let images = Tensor::from_vec(&[n, 3, size, size], data).expect("fixture shape");
    let ids: Vec<String> = (0..n).map(|i| format!("b{i:05}")).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let entries = ids
        .iter()
        .zip(&labels)
        .map(|(id, &l)| ProbCacheEntry::from_raw(id, &if l == 0 { [0.9, 0.1] } else { [0.1, 0.9] }).expect("valid probabilities"))
        .collect();
    let set = ImageSet::new(ids, images, labels).expect("fixture set");
    (set, ProbCache::new(2, entries).expect("fixture cache"))
}
