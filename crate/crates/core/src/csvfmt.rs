//! Float formatting for CSV artifacts.

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn f64_cell(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn opt_f64(v: Option<f64>) -> String {
    v.map(f64_cell).unwrap_or_default()
}

pub fn opt_bool(v: Option<bool>) -> String {
    v.map(|b| b.to_string()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02e23, f64::MIN_POSITIVE] {
            assert_eq!(f64_cell(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(opt_f64(None), "");
    }
}
