//! Small shared helpers: content hashing for ids/cache keys, hex encoding.

/// FNV-1a 64-bit. Used for config hashes, split ids, and cache keys —
/// stable across platforms, not cryptographic.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn hex64(h: u64) -> String {
    format!("{h:016x}")
}

/// Hash of a sequence of byte chunks (order-sensitive).
pub fn fnv1a64_chunks<'a>(chunks: impl IntoIterator<Item = &'a [u8]>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for chunk in chunks {
        for &b in chunk {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        // separator so ["ab","c"] != ["a","bc"]
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn f32_bytes(v: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.len() * 4);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_known_values() {
        // Published FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn chunked_hash_is_order_sensitive() {
        let a = fnv1a64_chunks([b"ab".as_slice(), b"c".as_slice()]);
        let b = fnv1a64_chunks([b"a".as_slice(), b"bc".as_slice()]);
        assert_ne!(a, b);
    }
}
