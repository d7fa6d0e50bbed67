//! Label vocabularies.
//!
//! One text file per label set, one `id name` pair per line with ids
//! running from 0 upward. Blank lines and lines starting with `#` are
//! ignored.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    names: Vec<String>,
}

impl Vocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return Err(Error::schema(format!("vocabulary[{i}]"), format!("label `{n}` is empty or has whitespace")));
            }
            if names[..i].contains(n) {
                return Err(Error::schema(format!("vocabulary[{i}]"), format!("label `{n}` appears twice")));
            }
        }
        if names.len() < 2 {
            return Err(Error::schema("vocabulary", "a vocabulary needs at least 2 labels"));
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut names = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let path = format!("{source}:{}", lineno + 1);
            let mut parts = line.split_whitespace();
            let (Some(id), Some(name), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::schema(path, "expected `id name`"));
            };
            let id: usize = id.parse().map_err(|_| Error::schema(&path, format!("`{id}` is not an id")))?;
            if id != names.len() {
                return Err(Error::schema(path, format!("expected id {}, found {id}", names.len())));
            }
            names.push(name.to_string());
        }
        Self::new(names)
    }

    pub fn to_text(&self) -> String {
        self.names.iter().enumerate().map(|(i, n)| format!("{i} {n}\n")).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// The label sets of a dataset. Objects are unlabelled when `affordance`
/// is absent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabularies {
    pub sub_activity: Vocabulary,
    pub affordance: Option<Vocabulary>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_round_trip() {
        let v = Vocabulary::parse("# classes\n0 reach\n1 place\n\n", "v").unwrap();
        assert_eq!(v.id("place"), Some(1));
        assert_eq!(v.name(0), Some("reach"));
        assert_eq!(Vocabulary::parse(&v.to_text(), "v").unwrap(), v);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(Vocabulary::parse("1 a\n0 b\n", "v").is_err());
        assert!(Vocabulary::parse("0 a\n1 a\n", "v").is_err());
        assert!(Vocabulary::parse("0 a b\n", "v").is_err());
        assert!(Vocabulary::parse("0 a\n", "v").is_err());
    }
}
