//! Flat sectioned config files: `[section]` headers, `key = value` lines,
//! `#` or `;` comments. Every error names the offending line or
//! `section.key` so archived experiment configs fail loudly, not silently.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Clone, Default)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Config::default();
        let mut current: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| anyhow!("line {line_no}: unterminated section header `{line}`"))?
                    .trim();
                if name.is_empty() {
                    bail!("line {line_no}: empty section name");
                }
                config.sections.entry(name.to_string()).or_default();
                current = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {line_no}: expected `key = value`, got `{line}`"))?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                bail!("line {line_no}: empty key");
            }
            let section = current
                .as_ref()
                .ok_or_else(|| anyhow!("line {line_no}: key `{key}` appears before any [section]"))?;
            let entries = config.sections.get_mut(section).expect("section exists");
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                bail!("line {line_no}: duplicate key `{section}.{key}`");
            }
        }
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies one `section.key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (target, value) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{assignment}` must look like section.key=value"))?;
        let (section, key) = target
            .trim()
            .split_once('.')
            .ok_or_else(|| anyhow!("override target `{target}` must look like section.key"))?;
        if section.is_empty() || key.is_empty() {
            bail!("override target `{target}` must look like section.key");
        }
        self.sections
            .entry(section.trim().to_string())
            .or_default()
            .insert(key.trim().to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map(|v| v.as_str())
    }

    pub fn parsed<T>(&self, section: &str, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.get(section, key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| anyhow!("key `{section}.{key}`: cannot parse `{raw}`: {e}")),
        }
    }

    pub fn get_or<T>(&self, section: &str, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.parsed(section, key)?.unwrap_or(default))
    }

    /// Comma-separated list value.
    pub fn list<T>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.get(section, key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(|item| {
                    let item = item.trim();
                    item.parse::<T>()
                        .map_err(|e| anyhow!("key `{section}.{key}`: cannot parse `{item}`: {e}"))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_keys_comments() {
        let config = Config::parse(
            "# comment\n[plan]\ntrials = 3\nm_grid = 100, 200\n; more\n[problem]\nsigma = 0.5\n",
        )
        .unwrap();
        assert_eq!(config.get("plan", "trials"), Some("3"));
        assert_eq!(config.parsed::<f64>("problem", "sigma").unwrap(), Some(0.5));
        assert_eq!(
            config.list::<usize>("plan", "m_grid").unwrap().unwrap(),
            vec![100, 200]
        );
        assert_eq!(config.get("plan", "missing"), None);
    }

    #[test]
    fn errors_name_the_offender() {
        let err = Config::parse("[plan]\ntrials\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = Config::parse("key = 1\n").unwrap_err().to_string();
        assert!(err.contains("before any [section]"), "{err}");
        let err = Config::parse("[plan]\na = 1\na = 2\n").unwrap_err().to_string();
        assert!(err.contains("plan.a"), "{err}");

        let config = Config::parse("[plan]\ntrials = few\n").unwrap();
        let err = config.parsed::<usize>("plan", "trials").unwrap_err().to_string();
        assert!(err.contains("plan.trials") && err.contains("few"), "{err}");
        assert_eq!(config.parsed::<usize>("plan", "absent").unwrap(), None);
    }

    #[test]
    fn overrides_replace_and_create_keys() {
        let mut config = Config::parse("[plan]\ntrials = 3\n").unwrap();
        config.set("plan.trials=9").unwrap();
        config.set("extra.flag = on").unwrap();
        assert_eq!(config.get("plan", "trials"), Some("9"));
        assert_eq!(config.get("extra", "flag"), Some("on"));
        assert!(config.set("no_dot=1").is_err());
        assert!(config.set("plan.trials").is_err());
    }
}
