//! Correctness confirmation: a polynomial hash over GF(2^61 − 1),
//! reduced to `lambda_c` bits.

use crate::rng::counter_word;

const P: u64 = (1 << 61) - 1;
/// Bits packed per field element.
const CHUNK: usize = 56;

fn mul(a: u64, b: u64) -> u64 {
    let w = a as u128 * b as u128;
    let lo = (w as u64) & P;
    let hi = (w >> 61) as u64;
    let s = lo + hi;
    if s >= P {
        s - P
    } else {
        s
    }
}

fn add(a: u64, b: u64) -> u64 {
    let s = a + b;
    if s >= P {
        s - P
    } else {
        s
    }
}

/// Public per-block hash key expanded from a 64-bit seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfirmKey {
    point: u64,
    scale: u64,
}

impl ConfirmKey {
    pub fn from_seed(seed: u64) -> Self {
        let draw = |mut i: u64| loop {
            let v = counter_word(seed, i) & P;
            if v != 0 && v != P {
                return v;
            }
            i += 2;
        };
        Self {
            point: draw(0),
            scale: draw(1),
        }
    }
}

/// Evaluates the polynomial whose first coefficient is the bit length and
/// whose remaining coefficients are 56-bit chunks of the block, then maps
/// the value to the top `bits` of scale·h mod p. An empty block hashes to 0.
pub fn confirm_hash(block: &[u8], key: ConfirmKey, bits: u32) -> u64 {
    assert!((1..=61).contains(&bits));
    if block.is_empty() {
        return 0;
    }
    let mut h = (block.len() as u64) % P;
    for chunk in block.chunks(CHUNK) {
        let c = chunk.iter().fold(0u64, |acc, &b| (acc << 1) | (b & 1) as u64);
        h = add(mul(h, key.point), c);
    }
    mul(h, key.scale) >> (61 - bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn field_arithmetic() {
        assert_eq!(mul(P - 1, P - 1), 1);
        assert_eq!(mul(1 << 60, 2), 1);
        assert_eq!(add(P - 1, 1), 0);
    }

    #[test]
    fn identical_blocks_identical_tags() {
        let k = ConfirmKey::from_seed(3);
        let b: Vec<u8> = (0..1000).map(|i| (i % 3 == 0) as u8).collect();
        assert_eq!(confirm_hash(&b, k, 50), confirm_hash(&b.clone(), k, 50));
        assert!(confirm_hash(&b, k, 50) < 1 << 50);
        assert_eq!(confirm_hash(&[], k, 50), 0);
        assert_eq!(confirm_hash(&[], ConfirmKey::from_seed(4), 50), 0);
    }

    #[test]
    fn length_is_bound_into_the_tag() {
        let k = ConfirmKey::from_seed(11);
        assert_ne!(confirm_hash(&[0; 10], k, 50), confirm_hash(&[0; 11], k, 50));
    }

    #[test]
    fn single_bit_differences_never_collide() {
        let mut rng = stream(17);
        for trial in 0..10_000 {
            let n = rng.gen_range(1..2000);
            let a: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let mut b = a.clone();
            b[rng.gen_range(0..n)] ^= 1;
            let k = ConfirmKey::from_seed(trial);
            assert_ne!(confirm_hash(&a, k, 50), confirm_hash(&b, k, 50));
        }
    }
}
