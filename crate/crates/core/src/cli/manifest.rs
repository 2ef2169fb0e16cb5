//! Run manifests: one `manifest.txt` of `key=value` lines per output directory.
//!
//! ```text
//! tool=sitskit
//! version=0.1.0
//! command=prior-gen
//! seed=42
//! threads=4
//! wall_time_s=0.031
//! cwd=/work
//! arg.0=prior-gen
//! arg.1=--input
//! ...
//! config.scale=10000
//! output.0=SAM_PRIOR_0.stsr
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub threads: usize,
    pub wall_time_s: f64,
    pub cwd: PathBuf,
    /// Command line without the program name.
    pub args: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<PathBuf>,
    /// File names relative to the output directory.
    pub outputs: Vec<String>,
    /// Outputs that legitimately differ between runs (timings).
    pub volatile: Vec<String>,
}

fn one_line(v: &str) -> String {
    v.replace(['\n', '\r'], " ")
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "tool=sitskit").unwrap();
        writeln!(s, "version={}", self.version).unwrap();
        writeln!(s, "command={}", self.command).unwrap();
        if let Some(seed) = self.seed {
            writeln!(s, "seed={seed}").unwrap();
        }
        writeln!(s, "threads={}", self.threads).unwrap();
        writeln!(s, "wall_time_s={}", self.wall_time_s).unwrap();
        writeln!(s, "cwd={}", self.cwd.display()).unwrap();
        for (i, a) in self.args.iter().enumerate() {
            writeln!(s, "arg.{i}={}", one_line(a)).unwrap();
        }
        for (k, v) in &self.config {
            writeln!(s, "config.{k}={}", one_line(v)).unwrap();
        }
        for (i, p) in self.inputs.iter().enumerate() {
            writeln!(s, "input.{i}={}", p.display()).unwrap();
        }
        for (i, o) in self.outputs.iter().enumerate() {
            writeln!(s, "output.{i}={o}").unwrap();
        }
        for (i, o) in self.volatile.iter().enumerate() {
            writeln!(s, "volatile.{i}={o}").unwrap();
        }
        s
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut m = RunManifest::default();
        let mut args = BTreeMap::new();
        let mut inputs = BTreeMap::new();
        let mut outputs = BTreeMap::new();
        let mut volatile = BTreeMap::new();
        let bad = |k: &str, v: &str| Error::Format(format!("{origin}: bad value for {k}: {v:?}"));
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else {
                continue;
            };
            let index = |prefix: &str| -> Result<Option<usize>> {
                match k.strip_prefix(prefix) {
                    None => Ok(None),
                    Some(n) => n.parse().map(Some).map_err(|_| bad(k, v)),
                }
            };
            match k {
                "tool" => {}
                "version" => m.version = v.to_string(),
                "command" => m.command = v.to_string(),
                "seed" => m.seed = Some(v.parse().map_err(|_| bad(k, v))?),
                "threads" => m.threads = v.parse().map_err(|_| bad(k, v))?,
                "wall_time_s" => m.wall_time_s = v.parse().map_err(|_| bad(k, v))?,
                "cwd" => m.cwd = PathBuf::from(v),
                _ => {
                    if let Some(i) = index("arg.")? {
                        args.insert(i, v.to_string());
                    } else if let Some(key) = k.strip_prefix("config.") {
                        m.config.insert(key.to_string(), v.to_string());
                    } else if let Some(i) = index("input.")? {
                        inputs.insert(i, PathBuf::from(v));
                    } else if let Some(i) = index("output.")? {
                        outputs.insert(i, v.to_string());
                    } else if let Some(i) = index("volatile.")? {
                        volatile.insert(i, v.to_string());
                    }
                }
            }
        }
        if m.command.is_empty() {
            return Err(Error::Format(format!("{origin}: manifest has no command")));
        }
        m.args = args.into_values().collect();
        m.inputs = inputs.into_values().collect();
        m.outputs = outputs.into_values().collect();
        m.volatile = volatile.into_values().collect();
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Writes `manifest.txt` in `dir` through a temporary file and a rename.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_NAME);
        write_atomic(&path, self.to_text().as_bytes())?;
        Ok(path)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let m = RunManifest {
            command: "split".into(),
            version: "0.1.0".into(),
            seed: Some(2025),
            threads: 4,
            wall_time_s: 0.5,
            cwd: "/tmp".into(),
            args: (0..12).map(|i| format!("a{i}")).collect(),
            config: [("band-map".to_string(), "b2=0,b3=1".to_string())].into(),
            inputs: vec!["in.stsr".into()],
            outputs: vec!["split.txt".into(), "t.csv".into()],
            volatile: vec!["t.csv".into()],
        };
        let back = RunManifest::parse(&m.to_text(), "m").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn requires_command() {
        assert!(RunManifest::parse("seed=1\n", "m").is_err());
        assert!(RunManifest::parse("command=x\nseed=abc\n", "m").is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest {
            command: "synth".into(),
            ..Default::default()
        };
        let p = m.write(dir.path()).unwrap();
        assert!(p.exists());
        assert!(!dir.path().join("manifest.txt.tmp").exists());
        assert_eq!(RunManifest::load(&p).unwrap().command, "synth");
    }
}
