use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator for the given seed.
pub(crate) fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent generator keyed by `(seed, stream, index)`; used where results
/// must not depend on how rows are batched.
pub(crate) fn keyed(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let k = splitmix64(seed ^ splitmix64(stream.wrapping_add(splitmix64(index))));
    ChaCha8Rng::seed_from_u64(k)
}
