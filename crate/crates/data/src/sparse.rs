//! Uniform sparse sampling of valid depth pixels (settings B/C input).

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rdfc_core::DepthMap;

/// Keep `min(n, #valid)` valid pixels chosen uniformly without
/// replacement; everything else becomes 0. Values are copied exactly.
/// Sampling draws from valid pixels only (sampling holes would be
/// vacuous).
pub fn sample_sparse(d: &DepthMap, n: usize, seed: u64) -> DepthMap {
    let (h, w) = d.data.dim();
    let valid: Vec<(usize, usize)> = d
        .data
        .indexed_iter()
        .filter(|(_, &v)| v > 0.0)
        .map(|(idx, _)| idx)
        .collect();
    let mut out = Array2::<f64>::zeros((h, w));
    if n >= valid.len() {
        for &(i, j) in &valid {
            out[[i, j]] = d.data[[i, j]];
        }
    } else if n > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chosen = rand::seq::index::sample(&mut rng, valid.len(), n);
        for k in chosen.iter() {
            let (i, j) = valid[k];
            out[[i, j]] = d.data[[i, j]];
        }
    }
    DepthMap { data: out }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn exact_count_when_enough_valid() {
        let d = DepthMap::new(Array2::from_shape_fn((100, 100), |(i, j)| {
            1.0 + (i * 100 + j) as f64 * 1e-4
        }))
        .unwrap();
        let s = sample_sparse(&d, 500, 7);
        assert_eq!(s.num_valid(), 500);
        for (idx, &v) in s.data.indexed_iter() {
            if v > 0.0 {
                assert_eq!(v, d.data[idx]);
            }
        }
    }

    #[test]
    fn zero_n_gives_empty() {
        let d = DepthMap::new(Array2::from_elem((10, 10), 2.0)).unwrap();
        let s = sample_sparse(&d, 0, 3);
        assert_eq!(s.num_valid(), 0);
    }

    #[test]
    fn fewer_valid_than_n_keeps_all() {
        let mut a = Array2::<f64>::zeros((30, 30));
        for k in 0..300 {
            a[[k / 30, k % 30]] = 1.0 + k as f64 * 0.01;
        }
        let d = DepthMap::new(a.clone()).unwrap();
        let s = sample_sparse(&d, 500, 11);
        assert_eq!(s.num_valid(), 300);
        assert_eq!(s.data, a);
    }

    #[test]
    fn deterministic_per_seed() {
        let d = DepthMap::new(Array2::from_elem((40, 40), 3.0)).unwrap();
        let a = sample_sparse(&d, 100, 5);
        let b = sample_sparse(&d, 100, 5);
        let c = sample_sparse(&d, 100, 6);
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn subset_of_valid_property() {
        let mut a = Array2::<f64>::zeros((20, 20));
        for i in 0..20 {
            for j in 0..20 {
                if (i + j) % 3 == 0 {
                    a[[i, j]] = 1.0 + (i + j) as f64;
                }
            }
        }
        let d = DepthMap::new(a).unwrap();
        for seed in 0..20 {
            let s = sample_sparse(&d, 50, seed);
            for (idx, &v) in s.data.indexed_iter() {
                if v > 0.0 {
                    assert_eq!(v, d.data[idx], "value copied exactly");
                }
            }
        }
    }
}
