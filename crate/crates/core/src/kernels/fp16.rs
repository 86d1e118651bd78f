//! IEEE 754 binary16 <-> binary32 conversion with round-half-to-even.

/// Converts an `f32` to binary16 bits. Rounds to nearest, ties to even;
/// overflow goes to infinity, subnormals are kept, NaNs are quieted.
pub fn fp32_to_fp16(x: f32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xff) as i32;
    let man = bits & 0x007f_ffff;

    if exp == 0xff {
        if man == 0 {
            return sign | 0x7c00;
        }
        return sign | 0x7e00 | (man >> 13) as u16;
    }

    let half_exp = exp - 127 + 15;
    if half_exp >= 31 {
        return sign | 0x7c00;
    }

    if half_exp >= 1 {
        let base = ((half_exp as u32) << 10) | (man >> 13);
        let rem = man & 0x1fff;
        let round_up = rem > 0x1000 || (rem == 0x1000 && base & 1 == 1);
        // A carry out of the mantissa correctly bumps the exponent, and past
        // 0x7bff lands exactly on the infinity encoding.
        return sign | (base + round_up as u32) as u16;
    }

    // Subnormal or zero result. Value = m * 2^(exp-150); in units of 2^-24
    // that is m >> shift with shift = 126 - exp.
    if exp == 0 {
        return sign;
    }
    let m = man | 0x0080_0000;
    let shift = (126 - exp) as u32;
    if shift > 24 {
        return sign;
    }
    let q = m >> shift;
    let rem = m & ((1u32 << shift) - 1);
    let half = 1u32 << (shift - 1);
    let round_up = rem > half || (rem == half && q & 1 == 1);
    sign | (q + round_up as u32) as u16
}

/// Converts binary16 bits to `f32`. Exact for every non-NaN input.
pub fn fp16_to_fp32(h: u16) -> f32 {
    let sign = ((h & 0x8000) as u32) << 16;
    let exp = ((h >> 10) & 0x1f) as u32;
    let man = (h & 0x03ff) as u32;
    let bits = match (exp, man) {
        (0, 0) => sign,
        (0, _) => {
            // Normalize the subnormal.
            let shift = man.leading_zeros() - 21;
            let man = (man << shift) & 0x03ff;
            let exp = 113 - shift;
            sign | (exp << 23) | (man << 13)
        }
        (0x1f, 0) => sign | 0x7f80_0000,
        (0x1f, _) => sign | 0x7fc0_0000 | (man << 13),
        _ => sign | ((exp + 112) << 23) | (man << 13),
    };
    f32::from_bits(bits)
}

pub fn f32_slice_to_fp16(xs: &[f32]) -> Vec<u16> {
    xs.iter().map(|&x| fp32_to_fp16(x)).collect()
}
