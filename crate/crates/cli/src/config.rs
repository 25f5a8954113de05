//! key=value config files merged with command line flags. Flags win over
//! file values, file values over defaults; keys nobody consumed are
//! rejected so typos fail loudly. Every command writes its fully resolved
//! values back out, and that file reproduces the run.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mcfill_core::{Error, Result};

/// Values read from a config file, consumed key by key.
pub struct FileValues {
    map: BTreeMap<String, String>,
}

impl FileValues {
    pub fn empty() -> Self {
        FileValues { map: BTreeMap::new() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut map = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format("config", format!("{}:{}: no '='", path.display(), ln + 1))
            })?;
            if map.insert(key.trim().to_string(), value.trim().to_string()).is_some() {
                return Err(Error::format("config", format!("duplicate key {:?}", key.trim())));
            }
        }
        Ok(FileValues { map })
    }

    pub fn load_opt(path: Option<&PathBuf>) -> Result<Self> {
        match path {
            Some(p) => FileValues::load(p),
            None => Ok(FileValues::empty()),
        }
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    /// Reject keys that no flag consumed.
    pub fn finish(self) -> Result<()> {
        if self.map.is_empty() {
            return Ok(());
        }
        let keys: Vec<&str> = self.map.keys().map(|k| k.as_str()).collect();
        Err(Error::format("config", format!("unknown keys {keys:?}")))
    }
}

fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse::<T>()
        .map_err(|_| Error::format("config", format!("{key}: cannot parse {raw:?}")))
}

/// Flag > file > default.
pub fn resolve<T: FromStr>(
    flag: Option<T>,
    file: &mut FileValues,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        file.take(key);
        return Ok(v);
    }
    match file.take(key) {
        Some(raw) => parse(key, &raw),
        None => Ok(default),
    }
}

/// Flag > file; missing everywhere is an error (used for paths).
pub fn resolve_required<T: FromStr>(
    flag: Option<T>,
    file: &mut FileValues,
    key: &str,
) -> Result<T> {
    if let Some(v) = flag {
        file.take(key);
        return Ok(v);
    }
    match file.take(key) {
        Some(raw) => parse(key, &raw),
        None => Err(Error::invalid(format!("missing {key:?}: pass --{} or set it in the config", key.replace('_', "-")))),
    }
}

/// Flag > file > absent.
pub fn resolve_opt<T: FromStr>(
    flag: Option<T>,
    file: &mut FileValues,
    key: &str,
) -> Result<Option<T>> {
    if let Some(v) = flag {
        file.take(key);
        return Ok(Some(v));
    }
    match file.take(key) {
        Some(raw) => parse(key, &raw).map(Some),
        None => Ok(None),
    }
}

/// Fully resolved settings, written next to a command's outputs.
pub struct Resolved {
    pairs: Vec<(&'static str, String)>,
}

impl Resolved {
    pub fn new() -> Self {
        Resolved { pairs: Vec::new() }
    }

    pub fn push(&mut self, key: &'static str, value: impl Display) {
        self.pairs.push((key, value.to_string()));
    }

    pub fn push_opt(&mut self, key: &'static str, value: Option<impl Display>) {
        if let Some(v) = value {
            self.push(key, v);
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (k, v) in &self.pairs {
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }
        fs::write(path, text)?;
        Ok(())
    }
}

/// Marker dropped into an output directory when a command dies partway;
/// removed again once the command finishes cleanly.
pub const FAILED_SENTINEL: &str = ".failed";

pub fn run_guarded(out: &Path, body: impl FnOnce() -> Result<()>) -> Result<()> {
    fs::create_dir_all(out)?;
    let sentinel = out.join(FAILED_SENTINEL);
    if sentinel.exists() {
        fs::remove_file(&sentinel)?;
    }
    match body() {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = fs::write(&sentinel, format!("{e}\n"));
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file_with(text: &str) -> FileValues {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, text).unwrap();
        FileValues::load(&p).unwrap()
    }

    #[test]
    fn flags_override_file_values_and_defaults() {
        let mut f = file_with("alpha=3\nbeta=old\n# comment\n\n");
        assert_eq!(resolve(Some(9u32), &mut f, "alpha", 1).unwrap(), 9);
        assert_eq!(resolve::<String>(None, &mut f, "beta", "d".into()).unwrap(), "old");
        assert_eq!(resolve::<u32>(None, &mut f, "gamma", 7).unwrap(), 7);
        f.finish().unwrap();
    }

    #[test]
    fn unconsumed_keys_are_rejected() {
        let f = file_with("wombat=1\n");
        let err = f.finish().unwrap_err();
        assert!(err.to_string().contains("wombat"), "{err}");
    }

    #[test]
    fn malformed_values_name_the_key() {
        let mut f = file_with("alpha=notanumber\n");
        let err = resolve::<u32>(None, &mut f, "alpha", 0).unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");
    }

    #[test]
    fn required_keys_report_what_is_missing() {
        let mut f = FileValues::empty();
        let err = resolve_required::<String>(None, &mut f, "out_dir").unwrap_err();
        assert!(err.to_string().contains("out_dir"), "{err}");
        assert!(err.to_string().contains("--out-dir"), "{err}");
    }

    #[test]
    fn guard_places_and_clears_the_sentinel() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let err = run_guarded(&out, || Err(Error::invalid("boom".to_string()))).unwrap_err();
        assert!(err.to_string().contains("boom"));
        assert!(out.join(FAILED_SENTINEL).exists());
        run_guarded(&out, || Ok(())).unwrap();
        assert!(!out.join(FAILED_SENTINEL).exists());
    }
}
