//! Loss rendering with insignificant digits replaced by `?`.

use bittrace_core::Precision;

const DECIMALS: usize = 6;
const UNKNOWN: &str = "?.??????";

/// Renders `v` with six decimals, masking every digit whose place value is
/// not resolved by the error bound `|v|·2^-e`.
///
/// Zero bits mask every digit, even for a zero value, since no bound is known.
/// Negative and non-finite values render as `?.??????`.
pub fn mask_digits(v: f64, e: u8, p: Precision) -> String {
    if !v.is_finite() || v < 0.0 {
        return UNKNOWN.to_string();
    }
    let err = match e {
        0 => f64::INFINITY,
        e if e >= p.max_bits() => 0.0,
        e => v * 2f64.powi(-i32::from(e)),
    };
    let text = format!("{v:.DECIMALS$}");
    let point = text.find('.').unwrap_or(text.len());
    text.char_indices()
        .map(|(i, c)| {
            if c == '.' {
                return c;
            }
            let place = if i < point {
                (point - i - 1) as i32
            } else {
                -((i - point) as i32)
            };
            if err < 0.5 * 10f64.powi(place) {
                c
            } else {
                '?'
            }
        })
        .collect()
}
