//! INI-style configuration: `[section]` headers, `key = value` lines and `#`
//! comments. Sections may repeat (one `[wire]` block per wire, say).
//!
//! Typed access goes through [`SectionReader`], which remembers which keys
//! were consumed so callers can reject unknown keys with [`SectionReader::finish`].

use std::collections::HashSet;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ini {
    pub sections: Vec<Section>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Ini> {
        let mut sections: Vec<Section> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("unterminated section header '{content}'"),
                })?;
                let name = name.trim();
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
                    return Err(Error::Parse {
                        line,
                        msg: format!("invalid section name '{name}'"),
                    });
                }
                sections.push(Section {
                    name: name.to_string(),
                    line,
                    entries: Vec::new(),
                });
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                line,
                msg: format!("expected 'key = value', got '{content}'"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    line,
                    msg: "empty key".into(),
                });
            }
            let section = sections.last_mut().ok_or_else(|| Error::Parse {
                line,
                msg: format!("key '{key}' outside of any section"),
            })?;
            if section.entries.iter().any(|e| e.key == key) {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate key '{key}' in [{}]", section.name),
                });
            }
            section.entries.push(Entry {
                key: key.to_string(),
                value: value.trim().to_string(),
                line,
            });
        }
        Ok(Ini { sections })
    }

    pub fn sections_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Section> + 'a {
        self.sections.iter().filter(move |s| s.name == name)
    }

    /// The single section called `name`; errors if it repeats.
    pub fn unique(&self, name: &str) -> Result<Option<&Section>> {
        let mut it = self.sections.iter().filter(|s| s.name == name);
        let first = it.next();
        if let Some(dup) = it.next() {
            return Err(Error::Parse {
                line: dup.line,
                msg: format!("section [{name}] appears more than once"),
            });
        }
        Ok(first)
    }

    /// Errors on any section not listed in `known`.
    pub fn reject_unknown_sections(&self, known: &[&str]) -> Result<()> {
        match self.sections.iter().find(|s| !known.contains(&s.name.as_str())) {
            Some(s) => Err(Error::Parse {
                line: s.line,
                msg: format!("unknown section [{}]", s.name),
            }),
            None => Ok(()),
        }
    }
}

impl std::fmt::Display for Ini {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, s) in self.sections.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            writeln!(f, "[{}]", s.name)?;
            for e in &s.entries {
                writeln!(f, "{} = {}", e.key, e.value)?;
            }
        }
        Ok(())
    }
}

/// Builder for writing configs.
#[derive(Debug, Default)]
pub struct IniWriter {
    ini: Ini,
}

impl IniWriter {
    pub fn section(&mut self, name: &str) -> &mut Self {
        self.ini.sections.push(Section {
            name: name.into(),
            line: 0,
            entries: Vec::new(),
        });
        self
    }

    pub fn kv(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let s = self.ini.sections.last_mut().expect("section() first");
        s.entries.push(Entry {
            key: key.into(),
            value: value.to_string(),
            line: 0,
        });
        self
    }

    pub fn finish(&mut self) -> String {
        std::mem::take(&mut self.ini).to_string()
    }
}

/// Typed, consumption-tracking view of one section.
pub struct SectionReader<'a> {
    section: &'a Section,
    used: HashSet<&'a str>,
}

impl<'a> SectionReader<'a> {
    pub fn new(section: &'a Section) -> Self {
        SectionReader {
            section,
            used: HashSet::new(),
        }
    }

    pub fn line(&self) -> usize {
        self.section.line
    }

    fn entry(&mut self, key: &str) -> Option<&'a Entry> {
        let e = self.section.entries.iter().find(|e| e.key == key)?;
        self.used.insert(e.key.as_str());
        Some(e)
    }

    pub fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        let name = self.section.name.clone();
        match self.entry(key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|_| Error::Parse {
                line: e.line,
                msg: format!("invalid value '{}' for {name}.{key}", e.value),
            }),
        }
    }

    pub fn get_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let line = self.section.line;
        let name = self.section.name.clone();
        self.get(key)?.ok_or_else(|| Error::Parse {
            line,
            msg: format!("missing key '{key}' in [{name}]"),
        })
    }

    pub fn get_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        let name = self.section.name.clone();
        match self.entry(key) {
            None => Ok(default),
            Some(e) => match e.value.to_ascii_lowercase().as_str() {
                "true" | "yes" | "on" | "1" => Ok(true),
                "false" | "no" | "off" | "0" => Ok(false),
                _ => Err(Error::Parse {
                    line: e.line,
                    msg: format!("invalid boolean '{}' for {name}.{key}", e.value),
                }),
            },
        }
    }

    /// Errors on the first key that was never read.
    pub fn finish(self) -> Result<()> {
        match self.section.entries.iter().find(|e| !self.used.contains(e.key.as_str())) {
            Some(e) => Err(Error::Parse {
                line: e.line,
                msg: format!("unknown key '{}' in [{}]", e.key, self.section.name),
            }),
            None => Ok(()),
        }
    }
}
