//! Text formatting for reals shared by every file format the crate emits.
//!
//! All floating-point values are printed with 17 significant digits in
//! scientific notation, which is enough for an exact `f64` round trip, so
//! serialized artifacts are byte-identical across runs and platforms.

use std::io;

use serde::Serialize;

/// Formats a real with 17 significant digits (one digit before the point,
/// sixteen after), e.g. `1.5000000000000000e0`.
pub fn format_real(value: f64) -> String {
    format!("{value:.16e}")
}

/// JSON formatter that routes every `f64` through [`format_real`].
struct SigDigits;

impl serde_json::ser::Formatter for SigDigits {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

/// Serializes `value` as a JSON string with 17-significant-digit reals.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SigDigits);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(out).expect("serde_json emits UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_real_round_trips_exactly() {
        for &x in &[0.0, 1.0, -1.5, 0.1, 1e-300, 123456.789, f64::MIN_POSITIVE] {
            let parsed: f64 = format_real(x).parse().unwrap();
            assert_eq!(parsed.to_bits(), x.to_bits());
        }
    }

    #[test]
    fn json_floats_use_scientific_notation() {
        let doc = to_json_string(&vec![0.5f64]).unwrap();
        assert_eq!(doc, "[5.0000000000000000e-1]");
        let back: Vec<f64> = serde_json::from_str(&doc).unwrap();
        assert_eq!(back, vec![0.5]);
    }
}
