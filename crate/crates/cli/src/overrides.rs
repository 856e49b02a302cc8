//! `--set key=value` overrides applied to JSON config documents.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use massflow::{Error, Result};

/// One `key=value` pair. Dotted keys address nested objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

impl std::str::FromStr for Override {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(Error::Config(format!("bad override key `{key}`")));
        }
        // bare words are strings; anything that parses as JSON is taken as JSON
        let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
        Ok(Override {
            path: key.split('.').map(str::to_string).collect(),
            value,
        })
    }
}

fn set(doc: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut cur = doc;
    for (i, k) in path.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not an object", path[..i].join("."))))?;
        if !obj.contains_key(k) {
            return Err(Error::Config(format!("unknown config key `{}`", path[..=i].join("."))));
        }
        cur = obj.get_mut(k).expect("checked");
    }
    *cur = value;
    Ok(())
}

/// Applies the overrides whose first key component is `prefix` (or all
/// unprefixed ones when `prefix` is empty) to `base`.
pub fn apply<T: Serialize + DeserializeOwned>(base: &T, overrides: &[Override], prefix: &str) -> Result<T> {
    let mut doc = serde_json::to_value(base)?;
    for o in overrides {
        let path: &[String] = if prefix.is_empty() {
            &o.path
        } else if o.path.first().map(String::as_str) == Some(prefix) {
            &o.path[1..]
        } else {
            continue;
        };
        if path.is_empty() {
            return Err(Error::Config(format!("override `{prefix}` needs a field")));
        }
        set(&mut doc, path, o.value.clone())?;
    }
    serde_json::from_value(doc).map_err(|e| Error::Config(format!("invalid override: {e}")))
}

/// Rejects overrides not consumed by any of `prefixes` ("" = unprefixed).
pub fn check_consumed(overrides: &[Override], prefixes: &[&str], unprefixed_keys: &[String]) -> Result<()> {
    for o in overrides {
        let head = o.path[0].as_str();
        let ok = (prefixes.contains(&head) && o.path.len() > 1) || unprefixed_keys.iter().any(|k| k == head);
        if !ok {
            return Err(Error::Config(format!("unknown config key `{}`", o.path.join("."))));
        }
    }
    Ok(())
}

/// Top-level keys of a serialized config.
pub fn keys<T: Serialize>(value: &T) -> Result<Vec<String>> {
    Ok(match serde_json::to_value(value)? {
        Value::Object(m) => m.keys().cloned().collect(),
        _ => Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Cfg {
        a: f64,
        b: Option<u32>,
        name: String,
        inner: Inner,
    }

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Inner {
        x: (f64, f64),
    }

    fn base() -> Cfg {
        Cfg { a: 1.0, b: None, name: "n".into(), inner: Inner { x: (0.0, 1.0) } }
    }

    fn ov(s: &str) -> Override {
        s.parse().unwrap()
    }

    #[test]
    fn overrides_set_values() {
        let c = apply(&base(), &[ov("a=2.5"), ov("b=3"), ov("name=hello"), ov("inner.x=[2,3]")], "").unwrap();
        assert_eq!(c, Cfg { a: 2.5, b: Some(3), name: "hello".into(), inner: Inner { x: (2.0, 3.0) } });
    }

    #[test]
    fn unknown_keys_and_bad_types_fail() {
        assert!(apply(&base(), &[ov("zzz=1")], "").is_err());
        assert!(apply(&base(), &[ov("a=\"x\"")], "").is_err());
        assert!("novalue".parse::<Override>().is_err());
        assert!("a..b=1".parse::<Override>().is_err());
    }

    #[test]
    fn prefixed_overrides() {
        let c = apply(&base(), &[ov("cfg.a=7"), ov("a=9")], "cfg").unwrap();
        assert_eq!(c.a, 7.0);
        let keys = keys(&base()).unwrap();
        assert!(check_consumed(&[ov("cfg.a=7"), ov("a=1")], &["cfg"], &keys).is_ok());
        assert!(check_consumed(&[ov("other.a=7")], &["cfg"], &keys).is_err());
    }
}
