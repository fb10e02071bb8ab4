//! Content hashing for manifests and probe identity.
//!
//! FNV-1a/64: a stable, dependency-free checksum. These hashes verify
//! reproducibility of pipeline artifacts; they are not cryptographic.

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn fnv1a64_hex(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}
