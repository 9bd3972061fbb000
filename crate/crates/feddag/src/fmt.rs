//! Stable text formatting for numeric output files.

/// Format with six significant digits, fixed or scientific by magnitude,
/// trailing zeros trimmed. Deterministic, so repeated runs diff cleanly.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-5..=8).contains(&mag) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - mag).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        let trimmed = s.trim_end_matches('0').trim_end_matches('.');
        trimmed.to_string()
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn representative_values() {
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(1.0), "1");
        assert_eq!(sig6(0.5), "0.5");
        assert_eq!(sig6(123.456), "123.456");
        assert_eq!(sig6(123.4567891), "123.457");
        assert_eq!(sig6(0.000123456), "0.000123456");
        assert_eq!(sig6(-2.5), "-2.5");
        assert_eq!(sig6(f64::NAN), "nan");
        assert_eq!(sig6(f64::INFINITY), "inf");
        assert!(sig6(1.23e12).contains('e'));
    }
}
