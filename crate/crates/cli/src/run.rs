//! Run plumbing: `--spec` mirroring, metadata and atomic output.

use std::collections::HashSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use cavstat::{Error, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;

use crate::args::Cli;

/// Expands `--spec run.json` into flags. Flags given on the command line win.
pub fn expand_spec(raw: Vec<OsString>) -> Result<Vec<OsString>> {
    let strs: Vec<String> = raw.iter().map(|s| s.to_string_lossy().into_owned()).collect();
    let mut spec_path = None;
    let mut rest = Vec::new();
    let mut i = 1;
    while i < strs.len() {
        let a = &strs[i];
        if a == "--spec" {
            spec_path = strs.get(i + 1).cloned();
            i += 2;
            continue;
        }
        if let Some(p) = a.strip_prefix("--spec=") {
            spec_path = Some(p.to_string());
        } else {
            rest.push(raw[i].clone());
        }
        i += 1;
    }
    let Some(path) = spec_path else { return Ok(raw) };
    let text = std::fs::read_to_string(&path)?;
    let Value::Object(map) = serde_json::from_str::<Value>(&text)
        .map_err(|e| Error::Config(format!("{path}: {e}")))?
    else {
        return Err(Error::Config(format!("{path}: run spec must be a JSON object")));
    };
    let command = match map.get("command") {
        Some(Value::String(c)) => c.clone(),
        _ => return Err(Error::Config(format!("{path}: missing string field \"command\""))),
    };
    let given: HashSet<String> = rest
        .iter()
        .filter_map(|a| a.to_str())
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();
    let mut out = vec![raw[0].clone(), OsString::from(&command)];
    for (key, value) in &map {
        let flag = key.replace('_', "-");
        if key == "command" || flag == "spec" || given.contains(&flag) {
            continue;
        }
        let rendered = match value {
            Value::Null => continue,
            Value::String(s) => s.clone(),
            Value::Bool(b) => b.to_string(),
            Value::Number(n) => n.to_string(),
            Value::Array(items) => items
                .iter()
                .map(|v| match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect::<Vec<_>>()
                .join(","),
            Value::Object(_) => return Err(Error::Config(format!("{path}: field \"{key}\" cannot be an object"))),
        };
        out.push(OsString::from(format!("--{flag}={rendered}")));
    }
    out.extend(rest.into_iter().filter(|a| a.to_str() != Some(command.as_str())));
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub toolkit_version: &'static str,
    pub command: String,
    pub spec_hash: String,
    pub seed: u64,
    pub timestamp: u64,
}

impl Metadata {
    pub fn new(cli: &Cli, seed: u64) -> Result<Self> {
        let canonical = serde_json::to_value(cli).map_err(|e| Error::Config(e.to_string()))?;
        let command = canonical["command"]["command"].as_str().unwrap_or_default().to_string();
        let digest = Sha256::digest(canonical.to_string().as_bytes());
        let spec_hash = digest.iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self { toolkit_version: env!("CARGO_PKG_VERSION"), command, spec_hash, seed, timestamp: timestamp()? })
    }
}

fn timestamp() -> Result<u64> {
    match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("SOURCE_DATE_EPOCH is not an integer: '{v}'"))),
        Err(_) => Ok(SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)),
    }
}

/// Artifacts staged in temporary files and renamed into place together.
#[derive(Default)]
pub struct Outputs {
    staged: Vec<(NamedTempFile, PathBuf)>,
}

impl Outputs {
    pub fn add(&mut self, path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
        let path = path.as_ref();
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let mut tmp = NamedTempFile::new_in(&dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        self.staged.push((tmp, path.to_path_buf()));
        Ok(())
    }

    pub fn add_json<T: Serialize>(&mut self, path: impl AsRef<Path>, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        self.add(path, text.as_bytes())
    }

    /// Renames every staged file; on failure removes the ones already moved.
    pub fn commit(self) -> Result<Vec<PathBuf>> {
        let mut done: Vec<PathBuf> = Vec::new();
        for (tmp, path) in self.staged {
            if let Err(e) = tmp.persist(&path) {
                for p in &done {
                    let _ = std::fs::remove_file(p);
                }
                return Err(Error::Io(e.error));
            }
            done.push(path);
        }
        Ok(done)
    }
}

pub fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn spec_expansion_and_override() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"command":"predict","mu":0.5,"n_total":40,"alpha":"dagger","strict":true,"mu_list":[1,2]}"#).unwrap();
        let spec = p.to_str().unwrap();
        let out = expand_spec(os(&["cavstat", "--spec", spec, "--mu", "0.1"])).unwrap();
        let out: Vec<_> = out.iter().map(|s| s.to_str().unwrap().to_string()).collect();
        assert_eq!(out[1], "predict");
        assert!(out.contains(&"--n-total=40".to_string()));
        assert!(out.contains(&"--alpha=dagger".to_string()));
        assert!(out.contains(&"--strict=true".to_string()));
        assert!(out.contains(&"--mu-list=1,2".to_string()));
        assert!(!out.iter().any(|a| a == "--mu=0.5"));
        assert_eq!(&out[out.len() - 2..], &["--mu".to_string(), "0.1".to_string()]);
    }

    #[test]
    fn spec_needs_command() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"mu":0.5}"#).unwrap();
        let err = expand_spec(os(&["cavstat", &format!("--spec={}", p.display())])).unwrap_err();
        assert_eq!(err.kind(), "config");
    }

    #[test]
    fn outputs_are_all_or_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let mut o = Outputs::default();
        o.add(&a, b"1").unwrap();
        drop(o);
        assert!(!a.exists());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
        let mut o = Outputs::default();
        o.add(&a, b"1").unwrap();
        o.commit().unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), b"1");
    }
}
