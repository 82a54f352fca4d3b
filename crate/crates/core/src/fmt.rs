//! Number formatting shared by every file writer.

/// Formats a float with 17 significant digits so that parsing the text
/// recovers the identical `f64`.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        return "NaN".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    format!("{:.16e}", x)
}

/// Formats an optional value, writing an empty field for `None`.
pub fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_bits() {
        for x in [0.1, -3.85, 1.0 / 3.0, 6.02214076e23, 5e-324, 0.0] {
            let back: f64 = num(x).parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits());
        }
    }
}
