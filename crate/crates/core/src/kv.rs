//! Minimal `key = value` text documents used for field definitions,
//! calibration files, pipeline configs, and metric reports.
//!
//! Lines starting with `#` and blank lines are ignored. Keys are unique;
//! later occurrences override earlier ones. Values are stored verbatim.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KvError {
    #[error("line {0}: expected `key = value`, got {1:?}")]
    Malformed(usize, String),
    #[error("missing required key {0:?}")]
    MissingKey(String),
    #[error("key {key:?}: cannot parse {value:?} as {ty}")]
    BadValue {
        key: String,
        value: String,
        ty: &'static str,
    },
}

/// An ordered key-value document.
#[derive(Debug, Clone, Default)]
pub struct KvDoc {
    pairs: BTreeMap<String, String>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut doc = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(KvError::Malformed(i + 1, line.to_string()));
            };
            doc.set(key.trim(), value.trim());
        }
        Ok(doc)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.pairs.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, KvError> {
        self.get(key)
            .ok_or_else(|| KvError::MissingKey(key.to_string()))
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>, KvError> {
        self.get(key)
            .map(|v| {
                v.parse::<f64>().map_err(|_| KvError::BadValue {
                    key: key.to_string(),
                    value: v.to_string(),
                    ty: "f64",
                })
            })
            .transpose()
    }

    pub fn require_f64(&self, key: &str) -> Result<f64, KvError> {
        self.get_f64(key)?
            .ok_or_else(|| KvError::MissingKey(key.to_string()))
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>, KvError> {
        self.get(key)
            .map(|v| {
                v.parse::<usize>().map_err(|_| KvError::BadValue {
                    key: key.to_string(),
                    value: v.to_string(),
                    ty: "usize",
                })
            })
            .transpose()
    }

    pub fn require_usize(&self, key: &str) -> Result<usize, KvError> {
        self.get_usize(key)?
            .ok_or_else(|| KvError::MissingKey(key.to_string()))
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>, KvError> {
        self.get(key)
            .map(|v| {
                v.parse::<u64>().map_err(|_| KvError::BadValue {
                    key: key.to_string(),
                    value: v.to_string(),
                    ty: "u64",
                })
            })
            .transpose()
    }

    /// Parse a comma-separated list of floats.
    pub fn get_f64_list(&self, key: &str) -> Result<Option<Vec<f64>>, KvError> {
        let Some(v) = self.get(key) else {
            return Ok(None);
        };
        let mut out = Vec::new();
        for tok in v.split(',') {
            let tok = tok.trim();
            if tok.is_empty() {
                continue;
            }
            out.push(tok.parse::<f64>().map_err(|_| KvError::BadValue {
                key: key.to_string(),
                value: tok.to_string(),
                ty: "f64",
            })?);
        }
        Ok(Some(out))
    }

    pub fn require_f64_list(&self, key: &str) -> Result<Vec<f64>, KvError> {
        self.get_f64_list(key)?
            .ok_or_else(|| KvError::MissingKey(key.to_string()))
    }

    /// Render as text. Keys are emitted in sorted order so output is
    /// byte-stable across runs.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.pairs {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// Format an `f64` so that the text round-trips to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render_round_trip() {
        let text = "# comment\na = 1.5\nb = hello world\n\nrows = 1,2,3\n";
        let doc = KvDoc::parse(text).unwrap();
        assert_eq!(doc.require_f64("a").unwrap(), 1.5);
        assert_eq!(doc.require("b").unwrap(), "hello world");
        assert_eq!(doc.require_f64_list("rows").unwrap(), vec![1.0, 2.0, 3.0]);
        let again = KvDoc::parse(&doc.render()).unwrap();
        assert_eq!(again.render(), doc.render());
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = KvDoc::parse("a = 1\nnot a pair\n").unwrap_err();
        match err {
            KvError::Malformed(line, _) => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
