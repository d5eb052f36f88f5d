//! JSON helpers shared by the catalog parser, the session model and the
//! report writer: duplicate-key aware decoding, canonical serialization and
//! content hashing.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::de::{self, DeserializeSeed, Deserializer, MapAccess, SeqAccess, Visitor};
use serde::Serialize;
use serde_json::{Map, Number, Value};
use sha2::{Digest, Sha256};

/// A decoded document together with the JSON pointers of every object key
/// that appeared more than once. The retained value is the last occurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct StrictDocument {
    pub value: Value,
    pub duplicate_keys: Vec<String>,
}

/// Decodes any self-describing serde format (JSON, YAML) into a
/// [`serde_json::Value`], preserving key order and recording duplicate keys
/// instead of silently overwriting them.
pub fn decode_strict<'de, D>(deserializer: D) -> Result<StrictDocument, D::Error>
where
    D: Deserializer<'de>,
{
    let mut duplicate_keys = Vec::new();
    let value = ValueSeed {
        pointer: String::new(),
        duplicates: &mut duplicate_keys,
    }
    .deserialize(deserializer)?;
    Ok(StrictDocument {
        value,
        duplicate_keys,
    })
}

/// Parses JSON text with [`decode_strict`]; trailing content is an error.
pub fn parse_strict_json(text: &str) -> Result<StrictDocument, serde_json::Error> {
    let mut de = serde_json::Deserializer::from_str(text);
    let doc = decode_strict(&mut de)?;
    de.end()?;
    Ok(doc)
}

/// Escapes one JSON pointer reference token.
pub fn escape_pointer_token(token: &str) -> String {
    token.replace('~', "~0").replace('/', "~1")
}

pub fn unescape_pointer_token(token: &str) -> String {
    token.replace("~1", "/").replace("~0", "~")
}

struct ValueSeed<'a> {
    pointer: String,
    duplicates: &'a mut Vec<String>,
}

impl<'de> DeserializeSeed<'de> for ValueSeed<'_> {
    type Value = Value;

    fn deserialize<D: Deserializer<'de>>(self, deserializer: D) -> Result<Value, D::Error> {
        deserializer.deserialize_any(self)
    }
}

impl<'de> Visitor<'de> for ValueSeed<'_> {
    type Value = Value;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("any JSON-compatible value")
    }

    fn visit_bool<E: de::Error>(self, v: bool) -> Result<Value, E> {
        Ok(Value::Bool(v))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<Value, E> {
        Ok(Value::Number(v.into()))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Value, E> {
        Ok(Value::Number(v.into()))
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<Value, E> {
        Ok(Number::from_f64(v).map_or(Value::Null, Value::Number))
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<Value, E> {
        Ok(Value::String(v.to_string()))
    }

    fn visit_string<E: de::Error>(self, v: String) -> Result<Value, E> {
        Ok(Value::String(v))
    }

    fn visit_unit<E: de::Error>(self) -> Result<Value, E> {
        Ok(Value::Null)
    }

    fn visit_none<E: de::Error>(self) -> Result<Value, E> {
        Ok(Value::Null)
    }

    fn visit_some<D: Deserializer<'de>>(self, deserializer: D) -> Result<Value, D::Error> {
        deserializer.deserialize_any(self)
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Value, A::Error> {
        let mut items = Vec::new();
        loop {
            let seed = ValueSeed {
                pointer: format!("{}/{}", self.pointer, items.len()),
                duplicates: &mut *self.duplicates,
            };
            match seq.next_element_seed(seed)? {
                Some(v) => items.push(v),
                None => break,
            }
        }
        Ok(Value::Array(items))
    }

    fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Value, A::Error> {
        let mut map = Map::new();
        loop {
            let key_seed = ValueSeed {
                pointer: self.pointer.clone(),
                duplicates: &mut *self.duplicates,
            };
            let Some(key) = access.next_key_seed(key_seed)? else {
                break;
            };
            let key = match key {
                Value::String(s) => s,
                Value::Null => "null".to_string(),
                other => other.to_string(),
            };
            let pointer = format!("{}/{}", self.pointer, escape_pointer_token(&key));
            let value = access.next_value_seed(ValueSeed {
                pointer: pointer.clone(),
                duplicates: &mut *self.duplicates,
            })?;
            if map.insert(key, value).is_some() {
                self.duplicates.push(pointer);
            }
        }
        Ok(Value::Object(map))
    }
}

/// Recursively sorts every object's keys.
pub fn canonicalize(value: &mut Value) {
    match value {
        Value::Object(map) => {
            map.sort_keys();
            for v in map.values_mut() {
                canonicalize(v);
            }
        }
        Value::Array(items) => items.iter_mut().for_each(canonicalize),
        _ => {}
    }
}

/// Canonical JSON: sorted keys, two-space indentation, trailing LF.
pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> Result<String, serde_json::Error> {
    let mut value = serde_json::to_value(value)?;
    canonicalize(&mut value);
    let mut out = serde_json::to_string_pretty(&value)?;
    out.push('\n');
    Ok(out)
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
