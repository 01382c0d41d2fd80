//! Serde adapters that write `f64` values as decimal strings.
//!
//! Session files hash their contents, so every number is written with the
//! shortest round-trip representation (`{:?}` formatting) instead of relying on
//! the JSON writer. Infinite support bounds round-trip as `"inf"` / `"-inf"`.
//! Deserialization accepts either a string or a plain JSON number so that
//! hand-written configuration files stay convenient.

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serializer};

#[derive(Deserialize)]
#[serde(untagged)]
enum Repr {
    Num(f64),
    Text(String),
}

impl Repr {
    fn into_f64<E: de::Error>(self) -> Result<f64, E> {
        match self {
            Repr::Num(v) => Ok(v),
            Repr::Text(s) => parse(&s).map_err(E::custom),
        }
    }
}

pub fn format(v: f64) -> String {
    format!("{v:?}")
}

pub fn parse(s: &str) -> Result<f64, String> {
    match s.trim() {
        "inf" | "+inf" | "Infinity" => Ok(f64::INFINITY),
        "-inf" | "-Infinity" => Ok(f64::NEG_INFINITY),
        t => t.parse::<f64>().map_err(|e| format!("invalid decimal {s:?}: {e}")),
    }
}

pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format(*v))
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Repr::deserialize(d)?.into_f64()
}

pub mod vec {
    use super::*;
    use serde::ser::SerializeSeq;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for x in v {
            seq.serialize_element(&format(*x))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Repr>::deserialize(d)?
            .into_iter()
            .map(Repr::into_f64)
            .collect()
    }
}

pub mod opt {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_some(&format(*x)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Option::<Repr>::deserialize(d)?
            .map(Repr::into_f64)
            .transpose()
    }
}

pub mod pair {
    use super::*;
    use serde::ser::SerializeTuple;

    pub fn serialize<S: Serializer>(v: &(f64, f64), s: S) -> Result<S::Ok, S::Error> {
        let mut t = s.serialize_tuple(2)?;
        t.serialize_element(&format(v.0))?;
        t.serialize_element(&format(v.1))?;
        t.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(f64, f64), D::Error> {
        let (a, b) = <(Repr, Repr)>::deserialize(d)?;
        Ok((a.into_f64()?, b.into_f64()?))
    }
}

pub mod opt_pair {
    use super::*;

    #[derive(serde::Serialize)]
    struct Out(#[serde(with = "super::pair")] (f64, f64));

    pub fn serialize<S: Serializer>(v: &Option<(f64, f64)>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(p) => s.serialize_some(&Out(*p)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<(f64, f64)>, D::Error> {
        match Option::<(Repr, Repr)>::deserialize(d)? {
            Some((a, b)) => Ok(Some((a.into_f64()?, b.into_f64()?))),
            None => Ok(None),
        }
    }
}

pub mod matrix {
    use super::*;

    #[derive(serde::Serialize)]
    struct Row<'a>(#[serde(with = "super::vec")] &'a Vec<f64>);

    pub fn serialize<S: Serializer>(m: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.iter().map(Row))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        Vec::<Vec<Repr>>::deserialize(d)?
            .into_iter()
            .map(|row| row.into_iter().map(Repr::into_f64).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Serialize;

    #[derive(Serialize, Deserialize, Debug, PartialEq)]
    struct Probe {
        #[serde(with = "super")]
        x: f64,
        #[serde(with = "super::vec")]
        v: Vec<f64>,
        #[serde(with = "super::opt", default)]
        o: Option<f64>,
    }

    #[test]
    fn infinities_and_tiny_values_round_trip() {
        let p = Probe {
            x: f64::NEG_INFINITY,
            v: vec![0.1, 1e-300, f64::INFINITY, 2.81088772221],
            o: Some(-0.0),
        };
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"-inf\""));
        let back: Probe = serde_json::from_str(&s).unwrap();
        assert_eq!(back.v, p.v);
        assert_eq!(back.x, p.x);
    }

    #[test]
    fn accepts_plain_numbers() {
        let back: Probe = serde_json::from_str(r#"{"x": 1.5, "v": [1, "2.5"]}"#).unwrap();
        assert_eq!(back.x, 1.5);
        assert_eq!(back.v, vec![1.0, 2.5]);
        assert_eq!(back.o, None);
    }
}

pub mod pairs {
    use super::*;

    #[derive(serde::Serialize)]
    struct Out(#[serde(with = "super::pair")] (f64, f64));

    pub fn serialize<S: Serializer>(v: &[(f64, f64)], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|p| Out(*p)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<(f64, f64)>, D::Error> {
        Vec::<(Repr, Repr)>::deserialize(d)?
            .into_iter()
            .map(|(a, b)| Ok((a.into_f64()?, b.into_f64()?)))
            .collect()
    }
}
