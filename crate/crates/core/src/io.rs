//! Shared helpers for the line-delimited artifact formats.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Format a float with exactly 17 significant digits.
///
/// 17 digits are enough to round-trip any `f64`; the fixed width keeps the
/// output independent of the shortest-representation algorithm.
pub fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

/// Render a float slice as a JSON array of 17-significant-digit numbers.
pub fn fixed_array(values: &[f64]) -> Result<Box<RawValue>> {
    let mut s = String::with_capacity(values.len() * 24 + 2);
    s.push('[');
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                step: i,
                what: "feature value cannot be serialized".into(),
            });
        }
        if i > 0 {
            s.push(',');
        }
        s.push_str(&fmt_f64(*v));
    }
    s.push(']');
    Ok(RawValue::from_string(s)?)
}

/// Hex SHA-256 of the canonical JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hex SHA-256 of arbitrary bytes, used for artifact identifiers.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn create_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_json_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Non-empty lines of a text file with their 1-based line numbers.
pub fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

pub fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Serde adapter writing `Vec<f64>` with [`fixed_array`] so that
/// serialize -> parse -> serialize is byte-stable.
pub mod exact_f64s {
    use serde::{de::Deserialize, ser::Error as _, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        super::fixed_array(values)
            .map_err(S::Error::custom)?
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<f64>::deserialize(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn seventeen_significant_digits() {
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
        assert_eq!(fmt_f64(-0.1), "-1.0000000000000001e-1");
    }

    proptest! {
        #[test]
        fn fixed_format_round_trips(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let arr = fixed_array(&[x]).unwrap();
            let back: Vec<f64> = serde_json::from_str(arr.get()).unwrap();
            prop_assert_eq!(back[0].to_bits(), x.to_bits());
        }
    }
}
