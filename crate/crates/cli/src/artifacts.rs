//! Output directory handling: atomic writes and stage manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.txt";
pub const THRESHOLD: &str = "threshold.txt";
pub const NORMALIZATION: &str = "normalization.csv";

pub struct OutDir {
    root: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes through a temporary sibling and renames it into place.
    pub fn write_with<F>(&self, name: &str, fill: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut dyn Write) -> Result<(), CliError>,
    {
        let target = self.path(name);
        let tmp = self.path(&format!(".{name}.tmp"));
        let file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        let mut out = std::io::BufWriter::new(file);
        let result = fill(&mut out).and_then(|_| {
            out.flush().map_err(io_err(&tmp))?;
            out.get_ref().sync_all().map_err(io_err(&tmp))
        });
        drop(out);
        if let Err(e) = result {
            let _ = fs::remove_file(&tmp);
            return Err(e);
        }
        fs::rename(&tmp, &target).map_err(io_err(&target))
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.path(name);
        self.write_with(name, |out| {
            out.write_all(text.as_bytes()).map_err(io_err(&path))
        })
    }

    pub fn read_key_values(&self, name: &str) -> Result<BTreeMap<String, String>, CliError> {
        let path = self.path(name);
        let text = fs::read_to_string(&path).map_err(|e| {
            CliError::Config(format!(
                "missing artifact {} ({e}); run the earlier pipeline stage first",
                path.display()
            ))
        })?;
        Ok(parse_key_values(&text))
    }

    /// Fails unless `name` records the given configuration hash.
    pub fn require_hash(&self, name: &str, hash: &str) -> Result<BTreeMap<String, String>, CliError> {
        let kv = self.read_key_values(name)?;
        match kv.get("config_hash") {
            Some(h) if h == hash => Ok(kv),
            Some(h) => Err(CliError::Config(format!(
                "{} was produced by a different configuration (hash {h}, current {hash})",
                self.path(name).display()
            ))),
            None => Err(CliError::Config(format!(
                "{} has no config_hash entry",
                self.path(name).display()
            ))),
        }
    }
}

pub fn parse_key_values(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// `key = value` lines in the given order.
pub fn key_values(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_round_trip() {
        let text = key_values(&[("a", "1".into()), ("b", "x y".into())]);
        let kv = parse_key_values(&text);
        assert_eq!(kv["a"], "1");
        assert_eq!(kv["b"], "x y");
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutDir::create(dir.path()).unwrap();
        out.write_text("f.txt", "hello").unwrap();
        assert_eq!(fs::read_to_string(out.path("f.txt")).unwrap(), "hello");
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn failed_write_keeps_previous_file() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutDir::create(dir.path()).unwrap();
        out.write_text("f.txt", "old").unwrap();
        let err = out.write_with("f.txt", |_| Err(CliError::Config("boom".into())));
        assert!(err.is_err());
        assert_eq!(fs::read_to_string(out.path("f.txt")).unwrap(), "old");
    }

    #[test]
    fn hash_mismatch_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutDir::create(dir.path()).unwrap();
        out.write_text(MANIFEST, "config_hash = abc\n").unwrap();
        assert!(out.require_hash(MANIFEST, "abc").is_ok());
        assert!(matches!(out.require_hash(MANIFEST, "def"), Err(CliError::Config(_))));
        assert!(matches!(out.require_hash("nope.txt", "abc"), Err(CliError::Config(_))));
    }
}
