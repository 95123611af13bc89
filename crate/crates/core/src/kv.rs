//! `key = value` text files with `#` comments.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses all entries, rejecting malformed lines, duplicate keys and keys
/// outside `allowed`.
pub fn parse(text: &str, allowed: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}", lineno + 1), "expected key = value"))?;
        let (k, v) = (k.trim(), v.trim());
        if !allowed.contains(&k) {
            return Err(Error::config(k, "unknown key"));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::config(k, "given more than once"));
        }
    }
    Ok(out)
}

pub fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

/// Overwrites `slot` when `key` is present.
pub fn set<T: FromStr>(map: &BTreeMap<String, String>, key: &str, slot: &mut T) -> Result<()> {
    if let Some(v) = map.get(key) {
        *slot = value(key, v)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_reports_keys() {
        let m = parse("a = 1\n# c\n b=x y # tail\n", &["a", "b"]).unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "x y");
        let e = parse("a = 1\na = 2", &["a"]).unwrap_err();
        assert!(e.to_string().contains("a"));
        let e = parse("zz = 1", &["a"]).unwrap_err();
        assert!(e.to_string().contains("zz"));
        let mut x = 0usize;
        let e = set(&m, "b", &mut x).unwrap_err();
        assert!(e.to_string().contains("b"));
    }
}
