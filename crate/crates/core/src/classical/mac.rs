//! Wegman-Carter tags: a polynomial hash over GF(2^128) masked by a
//! one-time pad.

/// Low terms of the field polynomial x^128 + x^7 + x^2 + x + 1.
const REDUCTION: u128 = 0x87;

/// Product in GF(2^128); bit i of a word is the coefficient of x^i.
pub fn gf128_mul(a: u128, b: u128) -> u128 {
    let (mut a, mut b, mut r) = (a, b, 0u128);
    while b != 0 {
        if b & 1 == 1 {
            r ^= a;
        }
        b >>= 1;
        let carry = a >> 127;
        a <<= 1;
        if carry == 1 {
            a ^= REDUCTION;
        }
    }
    r
}

/// Evaluates the message polynomial at `key`: 16-byte little-endian blocks
/// (the last one zero-padded) followed by a block holding the bit length.
pub fn poly_hash(message: &[u8], key: u128) -> u128 {
    let mut acc = 0u128;
    for chunk in message.chunks(16) {
        let mut block = [0u8; 16];
        block[..chunk.len()].copy_from_slice(chunk);
        acc = gf128_mul(acc ^ u128::from_le_bytes(block), key);
    }
    gf128_mul(acc ^ (message.len() as u128 * 8), key)
}

/// Tag of `message` under a reusable hash key and a fresh 16-byte pad.
pub fn mac_tag(message: &[u8], hash_key: u128, pad: &[u8; 16]) -> [u8; 16] {
    (poly_hash(message, hash_key) ^ u128::from_le_bytes(*pad)).to_le_bytes()
}

/// Comparison whose running time does not depend on where the tags differ.
pub fn tags_equal(a: &[u8; 16], b: &[u8; 16]) -> bool {
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, RngCore};

    #[test]
    fn field_identities() {
        assert_eq!(gf128_mul(1, 0xdead_beef), 0xdead_beef);
        assert_eq!(gf128_mul(0, 12345), 0);
        // x^127 · x = x^128 = x^7 + x^2 + x + 1
        assert_eq!(gf128_mul(1 << 127, 2), 0x87);
    }

    proptest! {
        #[test]
        fn multiplication_commutes_and_distributes(a: u128, b: u128, c: u128) {
            prop_assert_eq!(gf128_mul(a, b), gf128_mul(b, a));
            prop_assert_eq!(gf128_mul(a, b ^ c), gf128_mul(a, b) ^ gf128_mul(a, c));
        }
    }

    #[test]
    fn deterministic_and_empty() {
        let pad = [7u8; 16];
        assert_eq!(mac_tag(b"abc", 99, &pad), mac_tag(b"abc", 99, &pad));
        // empty message hashes to the zero polynomial plus a zero length block
        assert_eq!(mac_tag(b"", 99, &pad), pad);
    }

    #[test]
    fn length_block_separates_zero_padding() {
        assert_ne!(poly_hash(&[0u8; 3], 12345), poly_hash(&[0u8; 4], 12345));
    }

    #[test]
    fn one_bit_changes_never_collide() {
        let mut rng = crate::rng::stream(17);
        let pad = [0u8; 16];
        let mut msg = vec![0u8; 200];
        for _ in 0..10_000 {
            rng.fill_bytes(&mut msg);
            let key = ((rng.next_u64() as u128) << 64) | rng.next_u64() as u128;
            let mut other = msg.clone();
            let bit = rng.gen_range(0..msg.len() * 8);
            other[bit / 8] ^= 1 << (bit % 8);
            assert_ne!(mac_tag(&msg, key, &pad), mac_tag(&other, key, &pad));
        }
    }

    #[test]
    fn constant_time_compare() {
        let a = [1u8; 16];
        let mut b = a;
        assert!(tags_equal(&a, &b));
        b[15] ^= 0x80;
        assert!(!tags_equal(&a, &b));
    }
}
