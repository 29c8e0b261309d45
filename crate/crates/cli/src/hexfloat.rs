//! C99-style hexadecimal floating-point text (`%a`), encoded and decoded
//! exactly.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HexFloatError {
    pub text: String,
    pub reason: &'static str,
}

impl fmt::Display for HexFloatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "malformed hex float {:?}: {}", self.text, self.reason)
    }
}

impl std::error::Error for HexFloatError {}

const MANTISSA_BITS: u32 = 52;
const EXP_BIAS: i64 = 1023;

/// Formats `v` as `[-]0x1.<hex>p<exp>` (normal), `[-]0x0.<hex>p-1022`
/// (subnormal), `[-]0x0p+0`, `inf`, `-inf` or `nan`. Trailing zero digits
/// are dropped.
pub fn encode(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp = ((bits >> MANTISSA_BITS) & 0x7ff) as i64;
    let frac = bits & ((1u64 << MANTISSA_BITS) - 1);
    if exp == 0 && frac == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, e) = if exp == 0 {
        (0, 1 - EXP_BIAS)
    } else {
        (1, exp - EXP_BIAS)
    };
    let digits = format!("{frac:013x}");
    let digits = digits.trim_end_matches('0');
    let esign = if e < 0 { '-' } else { '+' };
    if digits.is_empty() {
        format!("{sign}0x{lead}p{esign}{}", e.abs())
    } else {
        format!("{sign}0x{lead}.{digits}p{esign}{}", e.abs())
    }
}

/// Parses the output of [`encode`] and, more generally, any hex float whose
/// significand has at most 53 significant bits and whose value is exactly
/// representable. Inexact inputs are rejected rather than rounded.
pub fn decode(text: &str) -> Result<f64, HexFloatError> {
    let err = |reason| HexFloatError {
        text: text.to_string(),
        reason,
    };
    let (neg, body) = match text.as_bytes().first() {
        Some(b'-') => (true, &text[1..]),
        Some(b'+') => (false, &text[1..]),
        _ => (false, text),
    };
    match body {
        "inf" | "infinity" => return Ok(if neg { f64::NEG_INFINITY } else { f64::INFINITY }),
        "nan" => return Ok(f64::NAN),
        _ => {}
    }
    let body = body
        .strip_prefix("0x")
        .or_else(|| body.strip_prefix("0X"))
        .ok_or_else(|| err("missing 0x prefix"))?;
    let (mant, exp) = body
        .split_once(['p', 'P'])
        .ok_or_else(|| err("missing binary exponent"))?;
    let exp: i64 = exp.parse().map_err(|_| err("bad exponent"))?;
    let (int_part, frac_part) = mant.split_once('.').unwrap_or((mant, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(err("empty significand"));
    }
    let mut m: u64 = 0;
    let mut shift: i64 = 0;
    for (i, c) in int_part.chars().chain(frac_part.chars()).enumerate() {
        let d = c.to_digit(16).ok_or_else(|| err("non-hex digit"))? as u64;
        if m >> 59 != 0 {
            return Err(err("too many significant digits"));
        }
        m = (m << 4) | d;
        if i >= int_part.len() {
            shift -= 4;
        }
    }
    let sign_bit = if neg { 1u64 << 63 } else { 0 };
    if m == 0 {
        return Ok(f64::from_bits(sign_bit));
    }
    // value = m · 2^e2
    let e2 = exp + shift;
    let bitlen = 64 - m.leading_zeros() as i64;
    // drop trailing zero bits so the significand is as short as possible
    let tz = m.trailing_zeros() as i64;
    let (m, e2, bitlen) = (m >> tz, e2 + tz, bitlen - tz);
    if bitlen > 53 {
        return Err(err("more than 53 significant bits"));
    }
    let top = e2 + bitlen - 1;
    if top > EXP_BIAS {
        return Err(err("overflows f64"));
    }
    let bits = if top >= 1 - EXP_BIAS {
        let frac = (m << (53 - bitlen)) & ((1u64 << MANTISSA_BITS) - 1);
        ((top + EXP_BIAS) as u64) << MANTISSA_BITS | frac
    } else {
        // subnormal: value = frac · 2^-1074
        let s = e2 + 1074;
        if s < 0 {
            return Err(err("not exactly representable"));
        }
        m << s
    };
    Ok(f64::from_bits(sign_bit | bits))
}
