//! Fixed-width bit packing, least significant bit first.

/// Payload bytes for `count` codes of `bits` bits each: `ceil(bits * count / 8)`.
pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

/// Packs each code's low `bits` bits back to back. The caller guarantees
/// every code fits; higher bits are masked off in release builds.
pub fn pack(codes: &[u32], bits: u8) -> Vec<u8> {
    debug_assert!((1..=32).contains(&bits));
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    let mask = mask(bits);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mut pos = 0;
    for &c in codes {
        debug_assert!(c as u64 <= mask, "code {c} does not fit in {bits} bits");
        acc |= (c as u64 & mask) << filled;
        filled += bits as u32;
        while filled >= 8 {
            out[pos] = acc as u8;
            pos += 1;
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out[pos] = acc as u8;
    }
    out
}

/// Inverse of [`pack`]. Returns `None` if `bytes` has the wrong length or
/// nonzero padding bits, so that only canonical payloads are accepted.
pub fn unpack(bytes: &[u8], count: usize, bits: u8) -> Option<Vec<u32>> {
    if bytes.len() != packed_len(count, bits) {
        return None;
    }
    let mask = mask(bits);
    let mut out = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mut iter = bytes.iter();
    for _ in 0..count {
        while filled < bits as u32 {
            acc |= (*iter.next()? as u64) << filled;
            filled += 8;
        }
        out.push((acc & mask) as u32);
        acc >>= bits;
        filled -= bits as u32;
    }
    if acc != 0 {
        return None;
    }
    Some(out)
}

fn mask(bits: u8) -> u64 {
    (1u64 << bits) - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn payload_sizes() {
        assert_eq!(pack(&[0; 32], 6).len(), 24);
        assert_eq!(pack(&[7; 10], 8).len(), 10);
        assert_eq!(packed_len(3, 3), 2);
    }

    #[test]
    fn lsb_first_layout() {
        assert_eq!(pack(&[1, 2, 3], 2), vec![0b0011_1001]);
        assert_eq!(pack(&[0x3f, 0x01], 6), vec![0x7f, 0x00]);
    }

    #[test]
    fn padding_must_be_zero() {
        assert_eq!(unpack(&[0b1000_0001], 1, 3), None);
        assert_eq!(unpack(&[0b0000_0001], 1, 3), Some(vec![1]));
        assert_eq!(unpack(&[0, 0], 1, 3), None);
    }

    proptest! {
        #[test]
        fn round_trip(bits in 1u8..=16, raw in proptest::collection::vec(any::<u32>(), 0..300)) {
            let codes: Vec<u32> = raw.iter().map(|c| c & ((1u32 << bits) - 1)).collect();
            let bytes = pack(&codes, bits);
            prop_assert_eq!(bytes.len(), packed_len(codes.len(), bits));
            prop_assert_eq!(unpack(&bytes, codes.len(), bits), Some(codes));
        }
    }
}
