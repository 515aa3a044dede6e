use fedlft_core::{derive_seed, Entry, Shape, SparseTensor};

/// Deterministic sparse tensor with low-rank structure: every cell gets a
/// smooth value, then pseudo-random thinning keeps roughly `keep` percent.
/// Coordinates are enumerated once each, so the result is duplicate-free.
pub fn synthetic(users: usize, services: usize, times: usize, keep: usize, seed: u64) -> SparseTensor {
    let shape = Shape::new(users, services, times).unwrap();
    let mut entries = Vec::new();
    let mut k = seed;
    for u in 0..users {
        for s in 0..services {
            for t in 0..times {
                k = derive_seed(k, 1);
                if (k % 100) as usize >= keep {
                    continue;
                }
                let value = 1.0
                    + 0.5 * ((u * 7 + 3) % 11) as f64 / 11.0
                    + 0.3 * ((s * 5 + 1) % 13) as f64 / 13.0
                    + 0.2 * ((t * 3 + 2) % 7) as f64 / 7.0;
                entries.push(Entry { user: u, service: s, time: t, value });
            }
        }
    }
    SparseTensor::build(shape, entries).unwrap()
}
