//! JSON helpers: 17-significant-digit float encoding and parse errors that
//! carry a byte offset.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;

use crate::error::{Error, Result};

/// Formats a finite float with 17 significant digits, which round-trips
/// every `f64` exactly.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn raw_number<S: Serializer>(x: f64) -> std::result::Result<Box<RawValue>, S::Error> {
    if !x.is_finite() {
        return Err(serde::ser::Error::custom(format!(
            "cannot encode non-finite value {x}"
        )));
    }
    RawValue::from_string(format_f64(x)).map_err(serde::ser::Error::custom)
}

/// `#[serde(with = "sig17")]` for `f64` fields.
pub mod sig17 {
    use super::*;

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        raw_number::<S>(*x)?.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        f64::deserialize(d)
    }
}

/// `#[serde(with = "sig17_vec")]` for `Vec<f64>` fields.
pub mod sig17_vec {
    use super::*;
    use serde::ser::SerializeSeq;

    pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(xs.len()))?;
        for &x in xs {
            seq.serialize_element(&raw_number::<S>(x)?)?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Vec<f64>, D::Error> {
        Vec::<f64>::deserialize(d)
    }
}

pub(crate) fn byte_offset(text: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in text.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len() + 1;
    }
    text.len()
}

pub fn from_slice<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })
}

pub fn to_vec_pretty<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| Error::Parse {
        offset: 0,
        message: e.to_string(),
    })?;
    out.push(b'\n');
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Probe {
        #[serde(with = "sig17")]
        x: f64,
        #[serde(with = "sig17_vec")]
        v: Vec<f64>,
    }

    #[test]
    fn floats_round_trip_exactly() {
        let p = Probe {
            x: 0.1 + 0.2,
            v: vec![f64::MIN_POSITIVE, -1.0 / 3.0, 1e300, 0.0],
        };
        let bytes = to_vec_pretty(&p).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("3.0000000000000004e-1"));
        let back: Probe = from_slice(&bytes).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn non_finite_is_rejected() {
        let p = Probe {
            x: f64::NAN,
            v: vec![],
        };
        assert!(to_vec_pretty(&p).is_err());
    }

    #[test]
    fn parse_error_reports_offset() {
        let text = b"{\n  \"x\": 1.0,\n  \"v\": [1, oops]\n}";
        match from_slice::<Probe>(text) {
            Err(Error::Parse { offset, .. }) => assert_eq!(&text[offset..offset + 1], b"o"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
